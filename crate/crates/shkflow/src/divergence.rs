//! Divergences between densities on a common grid: KL, Renyi, total
//! variation, hockey-stick, and the moment helpers the rate decomposition
//! needs.
//!
//! Everything works off the cached log-densities, and anything that
//! exponentiates goes through a max-shifted log-sum-exp, so steep density
//! ratios never overflow. Quadrature is the midpoint rule of the underlying
//! grid, summed left to right.

use crate::flow::DensityField;
use crate::grid::GridField;
use crate::{Error, Result};

const NEG_CLAMP: f64 = 1e-12;

fn clamp_nonnegative(name: &'static str, value: f64) -> Result<f64> {
    if value >= 0.0 {
        Ok(value)
    } else if value >= -NEG_CLAMP {
        Ok(0.0)
    } else {
        Err(Error::Negative { name, value })
    }
}

/// Kullback-Leibler divergence `KL(p || q)`. Roundoff-scale negatives
/// (within -1e-12) clamp to zero; anything more negative is an error.
pub fn kl(p: &DensityField, q: &DensityField) -> Result<f64> {
    p.check_same_grid(q)?;
    let dx = p.grid().dx();
    let mut acc = 0.0;
    for i in 0..p.values().len() {
        acc += p.values()[i] * (p.log_values()[i] - q.log_values()[i]);
    }
    clamp_nonnegative("kl", acc * dx)
}

/// Renyi divergence of order `alpha > 1`, computed in log space:
/// `(1/(alpha-1)) * logsumexp(alpha log p + (1-alpha) log q + log dx)`.
pub fn renyi(p: &DensityField, q: &DensityField, alpha: f64) -> Result<f64> {
    if !(alpha.is_finite() && alpha > 1.0) {
        return Err(Error::BadRenyiOrder { alpha });
    }
    p.check_same_grid(q)?;
    let n = p.values().len();
    let log_dx = p.grid().dx().ln();
    let mut terms = Vec::with_capacity(n);
    let mut m = f64::NEG_INFINITY;
    for i in 0..n {
        let a = alpha * p.log_values()[i] + (1.0 - alpha) * q.log_values()[i] + log_dx;
        m = m.max(a);
        terms.push(a);
    }
    let mut acc = 0.0;
    for &a in &terms {
        acc += (a - m).exp();
    }
    let lse = m + acc.ln();
    clamp_nonnegative("renyi", lse / (alpha - 1.0))
}

/// Total variation distance `0.5 * integral |p - q|`.
pub fn tv(p: &DensityField, q: &DensityField) -> Result<f64> {
    p.check_same_grid(q)?;
    let dx = p.grid().dx();
    let mut acc = 0.0;
    for (a, b) in p.values().iter().zip(q.values()) {
        acc += (a - b).abs();
    }
    Ok(0.5 * acc * dx)
}

/// One-sided hockey-stick divergence `integral (p - e^eps q)_+` for
/// `eps >= 0`. At `eps = 0` this equals total variation.
pub fn hockey_stick(p: &DensityField, q: &DensityField, eps: f64) -> Result<f64> {
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(Error::Negative {
            name: "eps",
            value: eps,
        });
    }
    p.check_same_grid(q)?;
    let dx = p.grid().dx();
    let scale = eps.exp();
    let mut acc = 0.0;
    for (a, b) in p.values().iter().zip(q.values()) {
        let gap = a - scale * b;
        if gap > 0.0 {
            acc += gap;
        }
    }
    Ok(acc * dx)
}

/// Symmetric hockey-stick divergence: the larger of the two orderings.
pub fn hockey_stick_symmetric(p: &DensityField, q: &DensityField, eps: f64) -> Result<f64> {
    let a = hockey_stick(p, q, eps)?;
    let b = hockey_stick(q, p, eps)?;
    Ok(a.max(b))
}

/// `sup |log p - log q|` over the grid.
pub fn sup_log_ratio(p: &DensityField, q: &DensityField) -> Result<f64> {
    p.check_same_grid(q)?;
    let mut hi: f64 = 0.0;
    for (a, b) in p.log_values().iter().zip(q.log_values()) {
        hi = hi.max((a - b).abs());
    }
    Ok(hi)
}

/// Mean and variance of `f` under `rho`.
pub fn moment_stats(f: &GridField, rho: &DensityField) -> Result<(f64, f64)> {
    if !f.grid().same_layout(rho.grid()) {
        return Err(Error::GridMismatch {
            expected: rho.grid().n(),
            got: f.grid().n(),
        });
    }
    let dx = rho.grid().dx();
    let mut acc = 0.0;
    for (v, r) in f.values().iter().zip(rho.values()) {
        acc += v * r;
    }
    let mean = acc * dx;
    let mut acc2 = 0.0;
    for (v, r) in f.values().iter().zip(rho.values()) {
        let d = v - mean;
        acc2 += d * d * r;
    }
    Ok((mean, acc2 * dx))
}

/// Covariance of `f` and `g` under `rho`.
pub fn covariance(f: &GridField, g: &GridField, rho: &DensityField) -> Result<f64> {
    let (mf, _) = moment_stats(f, rho)?;
    let (mg, _) = moment_stats(g, rho)?;
    let dx = rho.grid().dx();
    let mut acc = 0.0;
    for i in 0..rho.values().len() {
        acc += (f.values()[i] - mf) * (g.values()[i] - mg) * rho.values()[i];
    }
    Ok(acc * dx)
}

/// One row of a divergence series between a pair of evolving densities.
#[derive(Clone, Debug)]
pub struct DivergenceRow {
    pub t: f64,
    pub kl: f64,
    pub tv: f64,
    pub sup_log_ratio: f64,
    /// Renyi divergences in the order of the configured alpha list.
    pub renyi: Vec<f64>,
    /// Symmetric hockey-stick values in the order of the configured eps list.
    pub hockey: Vec<f64>,
}

/// Time-indexed divergence report between two trajectories.
///
/// Serializes as CSV with header `t,kl,tv,sup_log_ratio`, one `renyi_{a}`
/// column per configured order, and one `hs_{eps}` column per configured
/// epsilon (symmetric hockey-stick).
#[derive(Clone, Debug)]
pub struct DivergenceSeries {
    alphas: Vec<f64>,
    eps_list: Vec<f64>,
    rows: Vec<DivergenceRow>,
}

impl DivergenceSeries {
    pub fn new(alphas: Vec<f64>, eps_list: Vec<f64>) -> Result<Self> {
        for &a in &alphas {
            if !(a.is_finite() && a > 1.0) {
                return Err(Error::BadRenyiOrder { alpha: a });
            }
        }
        for &e in &eps_list {
            if !(e.is_finite() && e >= 0.0) {
                return Err(Error::Negative {
                    name: "eps",
                    value: e,
                });
            }
        }
        Ok(DivergenceSeries {
            alphas,
            eps_list,
            rows: Vec::new(),
        })
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn push(&mut self, t: f64, p: &DensityField, q: &DensityField) -> Result<()> {
        let mut renyi_vals = Vec::with_capacity(self.alphas.len());
        for &a in &self.alphas {
            renyi_vals.push(renyi(p, q, a)?);
        }
        let mut hockey = Vec::with_capacity(self.eps_list.len());
        for &e in &self.eps_list {
            hockey.push(hockey_stick_symmetric(p, q, e)?);
        }
        self.rows.push(DivergenceRow {
            t,
            kl: kl(p, q)?,
            tv: tv(p, q)?,
            sup_log_ratio: sup_log_ratio(p, q)?,
            renyi: renyi_vals,
            hockey,
        });
        Ok(())
    }

    pub fn rows(&self) -> &[DivergenceRow] {
        &self.rows
    }

    pub fn header(&self) -> String {
        let mut h = String::from("t,kl,tv,sup_log_ratio");
        for &a in &self.alphas {
            h.push_str(&format!(",renyi_{}", trim_float(a)));
        }
        for &e in &self.eps_list {
            h.push_str(&format!(",hs_{}", trim_float(e)));
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}",
                row.t, row.kl, row.tv, row.sup_log_ratio
            ));
            for v in &row.renyi {
                out.push_str(&format!(",{v}"));
            }
            for v in &row.hockey {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Formats column labels: integers lose the trailing `.0`.
fn trim_float(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}
