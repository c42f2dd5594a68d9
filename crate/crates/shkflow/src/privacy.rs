//! Differential-privacy layer: datasets on the circle, the exponential
//! mechanism realized as a Gibbs target, privacy curves read off the
//! log-ratio envelopes, and utility guarantees for the sampled output.
//!
//! The mechanism releases a sample from `pi_beta propto exp(-beta L_D)`
//! where `L_D` is the dataset loss. Running the reaction-diffusion flow
//! toward `pi_beta` for a finite time yields interpolated guarantees: the
//! pure-epsilon curve decays like `e^{-t}` toward the stationary epsilon,
//! and KL-type divergences convert to `(eps, delta)` pairs.

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bounds::{BoundParams, EnvelopeKind};
use crate::flow::DensityField;
use crate::grid::{quadrature, GridField, PeriodicGrid};
use crate::potentials::{gibbs_target, PotentialSpec};
use crate::{Error, Result};

const TAU: f64 = 2.0 * std::f64::consts::PI;

fn wrap_to_torus(x: f64) -> f64 {
    let y = x - TAU * ((x + std::f64::consts::PI) / TAU).floor();
    // Guard the half-open convention against floating-point edge cases.
    if y >= std::f64::consts::PI {
        -std::f64::consts::PI
    } else {
        y
    }
}

/// An ordered collection of observations wrapped to `[-pi, pi)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TorusDataset {
    label: String,
    points: Vec<f64>,
}

impl TorusDataset {
    pub fn new(label: impl Into<String>, points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for (i, &p) in points.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::NonFinite {
                    what: "dataset observation",
                    cell: i,
                });
            }
        }
        Ok(TorusDataset {
            label: label.into(),
            points: points.into_iter().map(wrap_to_torus).collect(),
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Parses a dataset file: one observation per line, radians. Blank
    /// lines are skipped.
    pub fn parse_csv(label: impl Into<String>, contents: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (lineno, line) in contents.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let value: f64 = line.parse().map_err(|_| {
                Error::Config(format!(
                    "dataset line {}: expected one real number, got {line:?}",
                    lineno + 1
                ))
            })?;
            points.push(value);
        }
        TorusDataset::new(label, points)
    }

    /// Serializes as one observation per line, round-tripping exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for &p in &self.points {
            out.push_str(&format!("{p}\n"));
        }
        out
    }

    /// Returns a copy differing in exactly one observation.
    pub fn neighboring(&self, index: usize, new_value: f64) -> Result<TorusDataset> {
        if index >= self.points.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.points.len(),
            });
        }
        if !new_value.is_finite() {
            return Err(Error::NonFinite {
                what: "replacement observation",
                cell: index,
            });
        }
        let mut points = self.points.clone();
        points[index] = wrap_to_torus(new_value);
        Ok(TorusDataset {
            label: format!("{}-adj{}", self.label, index),
            points,
        })
    }
}

/// Draws `count` points `center + sd * z`, `z ~ N(0, 1)`, wrapped to the
/// circle. The stream is fully determined by `seed`.
pub fn sample_wrapped_normal(seed: u64, count: usize, center: f64, sd: f64) -> Result<Vec<f64>> {
    if !(sd >= 0.0 && sd.is_finite()) {
        return Err(Error::Negative {
            name: "sd",
            value: sd,
        });
    }
    if !center.is_finite() {
        return Err(Error::NonFinite {
            what: "sampling center",
            cell: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    Ok((0..count)
        .map(|_| {
            let z: f64 = normal.sample(&mut rng);
            wrap_to_torus(center + sd * z)
        })
        .collect())
}

/// Loss functions the mechanism supports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LossKind {
    /// `L_D(x) = (1/n) sum_j (1 - cos(x - y_j))`; per-record sensitivity
    /// `2/n` in sup norm.
    CosineMean,
}

/// Exponential-mechanism configuration.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ExpMechSpec {
    pub beta: f64,
    pub loss: LossKind,
}

impl ExpMechSpec {
    pub fn new(beta: f64, loss: LossKind) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::NonPositive {
                name: "beta",
                value: beta,
            });
        }
        Ok(ExpMechSpec { beta, loss })
    }
}

/// Evaluates the dataset loss on the grid.
pub fn mech_loss(dataset: &TorusDataset, grid: &PeriodicGrid) -> Result<GridField> {
    let inv_n = 1.0 / dataset.len() as f64;
    GridField::from_fn(grid, |x| {
        let mut acc = 0.0;
        for &y in dataset.points() {
            acc += 1.0 - (x - y).cos();
        }
        acc * inv_n
    })
}

/// Builds the mechanism potential `beta * L_D` as a tabulated spec, so the
/// mechanism target is the Gibbs density of the returned potential.
pub fn mech_potential(
    dataset: &TorusDataset,
    mech: &ExpMechSpec,
    grid: &PeriodicGrid,
) -> Result<PotentialSpec> {
    let loss = mech_loss(dataset, grid)?;
    let values: Vec<f64> = loss.values().iter().map(|&l| mech.beta * l).collect();
    PotentialSpec::tabulated(values)
}

/// Pure-DP epsilon curve at time `t`: the stationary floor for the chosen
/// envelope plus the transient `2 b e^{-t}`.
pub fn pure_dp_epsilon(t: f64, params: &BoundParams, kind: EnvelopeKind) -> Result<f64> {
    params.validate()?;
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::Negative { name: "t", value: t });
    }
    let floor = match kind {
        EnvelopeKind::A1 => 2.0 * params.delta_pot,
        EnvelopeKind::A1P => params.delta_osc,
        EnvelopeKind::ExactFloor => params.s_tar,
    };
    Ok(floor + 2.0 * params.b * (-t).exp())
}

/// Converts an averaged KL budget into the `delta` of an
/// `(eps, delta)` guarantee by Markov's inequality: `delta = h_bar / eps`.
pub fn approx_dp_delta(eps: f64, h_bar: f64) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::NonPositive {
            name: "eps",
            value: eps,
        });
    }
    if !(h_bar >= 0.0 && h_bar.is_finite()) {
        return Err(Error::Negative {
            name: "h_bar",
            value: h_bar,
        });
    }
    Ok(h_bar / eps)
}

/// Total variation yields the degenerate guarantee `(0, tv)`.
pub fn dp_from_tv(tv: f64) -> Result<(f64, f64)> {
    if !(tv >= 0.0 && tv <= 1.0 + 1e-12) {
        return Err(Error::Negative {
            name: "tv",
            value: tv,
        });
    }
    Ok((0.0, tv.min(1.0)))
}

/// Utility floor of the stationary mechanism.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct UtilityFloorReport {
    pub alpha: f64,
    /// `alpha + (1/beta) (ln(m / m_alpha) + 1)` where `m = 2 pi` and
    /// `m_alpha` is the measure of `{f <= min f + alpha}`.
    pub bound: f64,
    /// `E_{pi_beta}[f] - min f`, evaluated on the grid.
    pub exact: f64,
    /// Measure of the `alpha`-sublevel set.
    pub sublevel_mass: f64,
}

/// Bounds the expected excess loss of a sample from the Gibbs density of
/// `beta * f` over the grid minimum of `f`.
pub fn utility_floor(f: &GridField, beta: f64, alpha: f64) -> Result<UtilityFloorReport> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::NonPositive {
            name: "beta",
            value: beta,
        });
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::NonPositive {
            name: "alpha",
            value: alpha,
        });
    }
    let grid = f.grid();
    let f_min = f.values().iter().cloned().fold(f64::INFINITY, f64::min);
    let count = f
        .values()
        .iter()
        .filter(|&&fv| fv <= f_min + alpha)
        .count();
    if count == 0 {
        return Err(Error::EmptySublevel { alpha });
    }
    let sublevel_mass = count as f64 * grid.dx();
    let bound = alpha + (TAU / sublevel_mass).ln().mul_add(1.0 / beta, 1.0 / beta);

    let scaled: Vec<f64> = f.values().iter().map(|&fv| beta * fv).collect();
    let scaled = GridField::new(grid, scaled)?;
    let target = gibbs_target(&scaled)?;
    let weighted: Vec<f64> = (0..grid.n())
        .map(|i| f.values()[i] * target.density.values()[i])
        .collect();
    let exact = quadrature(&GridField::new(grid, weighted)?) - f_min;

    Ok(UtilityFloorReport {
        alpha,
        bound,
        exact,
        sublevel_mass,
    })
}

/// Finite-time utility guarantee.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct UtilityBound {
    /// Stationary floor plus the transient tail.
    pub value: f64,
    /// Time after which the tail expression is valid.
    pub t_star: f64,
}

/// Adds the finite-time tail to a stationary utility floor:
///
/// `floor + 2 ||f||_inf sqrt(h_t0 / 2) exp(-((2 - 3 delta)/2) (t - t_star))`
///
/// valid for `t >= t_star = t0 + ln(m_cap / delta) + ln(1/delta)/(1 - 2 delta)`,
/// provided the flow's KL to the mechanism target at `t0` is at most 1 and
/// the density stays bounded by `m_cap`.
pub fn utility_bound(
    t: f64,
    t0: f64,
    h_t0: f64,
    m_cap: f64,
    delta: f64,
    f_sup: f64,
    floor: &UtilityFloorReport,
) -> Result<UtilityBound> {
    if !(t0 >= 0.0 && t0.is_finite()) {
        return Err(Error::UtilityPrecondition {
            name: "t0",
            value: t0,
            requirement: "t0 >= 0".into(),
        });
    }
    if !(h_t0 >= 0.0 && h_t0 <= 1.0) {
        return Err(Error::UtilityPrecondition {
            name: "h_t0",
            value: h_t0,
            requirement: "0 <= h_t0 <= 1 (KL at the anchor time)".into(),
        });
    }
    if !(m_cap >= 1.0 && m_cap.is_finite()) {
        return Err(Error::UtilityPrecondition {
            name: "m_cap",
            value: m_cap,
            requirement: "m_cap >= 1".into(),
        });
    }
    if !(delta > 0.0 && delta < 0.25) {
        return Err(Error::UtilityPrecondition {
            name: "delta",
            value: delta,
            requirement: "0 < delta < 0.25".into(),
        });
    }
    if !(f_sup >= 0.0 && f_sup.is_finite()) {
        return Err(Error::UtilityPrecondition {
            name: "f_sup",
            value: f_sup,
            requirement: "f_sup >= 0".into(),
        });
    }
    let t_star = t0 + (m_cap / delta).ln() + (1.0 / delta).ln() / (1.0 - 2.0 * delta);
    if !(t >= t_star) {
        return Err(Error::UtilityPrecondition {
            name: "t",
            value: t,
            requirement: format!("t >= t_star = {t_star:.6}"),
        });
    }
    let tail = 2.0 * f_sup * (h_t0 / 2.0).sqrt() * (-(2.0 - 3.0 * delta) / 2.0 * (t - t_star)).exp();
    Ok(UtilityBound {
        value: floor.bound + tail,
        t_star,
    })
}

/// Expected excess loss of the current density: `E_rho[f] - min f`.
pub fn empirical_utility(rho: &DensityField, f: &GridField) -> Result<f64> {
    let grid = rho.grid();
    if !grid.same_layout(f.grid()) {
        return Err(Error::GridMismatch {
            expected: grid.n(),
            got: f.grid().n(),
        });
    }
    let f_min = f.values().iter().cloned().fold(f64::INFINITY, f64::min);
    let weighted: Vec<f64> = (0..grid.n())
        .map(|i| f.values()[i] * rho.values()[i])
        .collect();
    Ok(quadrature(&GridField::new(grid, weighted)?) - f_min)
}

/// One time slice of the privacy/utility certificate.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DpCertificateRow {
    pub t: f64,
    pub eps_pure_a1: f64,
    pub eps_pure_a1p: f64,
    /// Realized sup-norm log ratio between the paired laws.
    pub eps_empirical: f64,
    pub kl_pair: f64,
    pub tv_pair: f64,
    /// Symmetric hockey-stick divergence at the certificate's `eps`.
    pub hs_sym_at_eps: f64,
    /// `kl_pair / eps`: the Markov `delta` with the instantaneous KL
    /// standing in for the averaged budget.
    pub delta_at_eps: f64,
    pub utility: f64,
    pub utility_floor: f64,
}

/// Privacy certificate over a trajectory at a fixed audit `eps`.
#[derive(Clone, Debug, Serialize)]
pub struct DpCertificate {
    pub eps: f64,
    pub rows: Vec<DpCertificateRow>,
}

impl DpCertificate {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::NonPositive {
                name: "eps",
                value: eps,
            });
        }
        Ok(DpCertificate {
            eps,
            rows: Vec::new(),
        })
    }

    pub fn push_row(&mut self, row: DpCertificateRow) {
        self.rows.push(row);
    }

    /// Checks the structural invariants: nonnegative entries, time-ordered
    /// rows, nonincreasing pure-epsilon curves, and the tighter
    /// oscillation-based curve staying below the sup-based one.
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.rows.iter().enumerate() {
            for (name, value) in [
                ("eps_pure_a1", r.eps_pure_a1),
                ("eps_pure_a1p", r.eps_pure_a1p),
                ("eps_empirical", r.eps_empirical),
                ("kl_pair", r.kl_pair),
                ("tv_pair", r.tv_pair),
                ("hs_sym@eps", r.hs_sym_at_eps),
                ("delta_at_eps", r.delta_at_eps),
            ] {
                if !(value >= 0.0 && value.is_finite()) {
                    return Err(Error::Config(format!(
                        "certificate row {i}: {name} = {value} out of range"
                    )));
                }
            }
            if r.eps_pure_a1p > r.eps_pure_a1 + 1e-12 {
                return Err(Error::Config(format!(
                    "certificate row {i}: oscillation curve {} above sup curve {}",
                    r.eps_pure_a1p, r.eps_pure_a1
                )));
            }
        }
        for w in self.rows.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::Config("certificate rows out of time order".into()));
            }
            if w[1].eps_pure_a1 > w[0].eps_pure_a1 + 1e-12
                || w[1].eps_pure_a1p > w[0].eps_pure_a1p + 1e-12
            {
                return Err(Error::Config(
                    "pure-epsilon curve must be nonincreasing in t".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn header() -> &'static str {
        "t,eps_pure_a1,eps_pure_a1p,eps_empirical,kl_pair,tv_pair,hs_sym@eps,delta_at_eps,utility,utility_floor"
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::header());
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.t,
                r.eps_pure_a1,
                r.eps_pure_a1p,
                r.eps_empirical,
                r.kl_pair,
                r.tv_pair,
                r.hs_sym_at_eps,
                r.delta_at_eps,
                r.utility,
                r.utility_floor
            ));
        }
        out
    }
}
