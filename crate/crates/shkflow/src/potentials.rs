//! Potential specifications, Gibbs targets, and pairwise sensitivity data.
//!
//! A potential is either a finite trigonometric polynomial (constant plus
//! cosine/sine harmonics) or a table of midpoint samples. Analytic specs
//! know their own gradients; tabulated specs fall back to the spectral
//! derivative, which is exact for the band-limited tables the crate
//! produces. Harmonic content is capped at `n/4` on an `n`-cell grid so
//! that products of two potentials-level quantities stay below Nyquist.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::flow::DensityField;
use crate::grid::{oscillation, spectral_derivative, sup_norm, GridField, PeriodicGrid};
use crate::{Error, Result};

/// A potential on the circle: `constant + sum_k a_k cos(k x) + b_k sin(k x)`,
/// or a table of midpoint samples.
///
/// The JSON form is `{"constant": c, "cos": {"1": a1, ...}, "sin": {...}}`
/// for analytic specs and `{"tabulated": [...]}` for tables; unknown keys
/// are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecJson", into = "SpecJson")]
pub struct PotentialSpec {
    constant: f64,
    cos_coeffs: BTreeMap<usize, f64>,
    sin_coeffs: BTreeMap<usize, f64>,
    tabulated: Option<Vec<f64>>,
}

impl PotentialSpec {
    /// The zero potential.
    pub fn zero() -> Self {
        PotentialSpec {
            constant: 0.0,
            cos_coeffs: BTreeMap::new(),
            sin_coeffs: BTreeMap::new(),
            tabulated: None,
        }
    }

    /// A constant potential.
    pub fn constant(c: f64) -> Self {
        let mut s = Self::zero();
        s.constant = c;
        s
    }

    /// A pure table of midpoint samples; usable only on grids of matching size.
    pub fn tabulated(values: Vec<f64>) -> Result<Self> {
        for (cell, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "tabulated potential",
                    cell,
                });
            }
        }
        Ok(PotentialSpec {
            constant: 0.0,
            cos_coeffs: BTreeMap::new(),
            sin_coeffs: BTreeMap::new(),
            tabulated: Some(values),
        })
    }

    /// Adds `a cos(k x)`. Harmonic indices start at 1.
    pub fn with_cos(mut self, k: usize, a: f64) -> Result<Self> {
        self.check_analytic()?;
        if k == 0 {
            return Err(Error::ZeroHarmonic);
        }
        *self.cos_coeffs.entry(k).or_insert(0.0) += a;
        Ok(self)
    }

    /// Adds `b sin(k x)`. Harmonic indices start at 1.
    pub fn with_sin(mut self, k: usize, b: f64) -> Result<Self> {
        self.check_analytic()?;
        if k == 0 {
            return Err(Error::ZeroHarmonic);
        }
        *self.sin_coeffs.entry(k).or_insert(0.0) += b;
        Ok(self)
    }

    /// Shifts the potential by a constant.
    pub fn with_constant(mut self, c: f64) -> Self {
        match &mut self.tabulated {
            Some(values) => {
                for v in values.iter_mut() {
                    *v += c;
                }
            }
            None => self.constant += c,
        }
        self
    }

    fn check_analytic(&self) -> Result<()> {
        if self.tabulated.is_some() {
            return Err(Error::Config(
                "tabulated potentials take no harmonic coefficients".into(),
            ));
        }
        Ok(())
    }

    pub fn is_tabulated(&self) -> bool {
        self.tabulated.is_some()
    }

    /// Largest harmonic index present (0 for constants and tables).
    pub fn max_harmonic(&self) -> usize {
        let kc = self.cos_coeffs.keys().next_back().copied().unwrap_or(0);
        let ks = self.sin_coeffs.keys().next_back().copied().unwrap_or(0);
        kc.max(ks)
    }

    fn check_resolution(&self, grid: &PeriodicGrid) -> Result<()> {
        if let Some(values) = &self.tabulated {
            if values.len() != grid.n() {
                return Err(Error::TabulatedLength {
                    expected: grid.n(),
                    got: values.len(),
                });
            }
            return Ok(());
        }
        let limit = grid.n() / 4;
        let k = self.max_harmonic();
        if k > limit {
            return Err(Error::Harmonic {
                k,
                limit,
                n: grid.n(),
            });
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecJson {
    #[serde(default, skip_serializing_if = "json_zero")]
    constant: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    cos: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    sin: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tabulated: Option<Vec<f64>>,
}

fn json_zero(v: &f64) -> bool {
    *v == 0.0
}

fn parse_harmonics(raw: BTreeMap<String, f64>, side: &str) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for (key, v) in raw {
        let k: usize = key
            .parse()
            .map_err(|_| Error::Config(format!("{side} harmonic key {key:?} is not an integer")))?;
        if k == 0 {
            return Err(Error::ZeroHarmonic);
        }
        if !v.is_finite() {
            return Err(Error::Config(format!(
                "{side} harmonic {k} has non-finite coefficient"
            )));
        }
        out.insert(k, v);
    }
    Ok(out)
}

impl TryFrom<SpecJson> for PotentialSpec {
    type Error = Error;

    fn try_from(raw: SpecJson) -> Result<Self> {
        if let Some(values) = raw.tabulated {
            if raw.constant != 0.0 || !raw.cos.is_empty() || !raw.sin.is_empty() {
                return Err(Error::Config(
                    "tabulated potentials take no harmonic coefficients".into(),
                ));
            }
            return PotentialSpec::tabulated(values);
        }
        if !raw.constant.is_finite() {
            return Err(Error::Config("constant term is non-finite".into()));
        }
        Ok(PotentialSpec {
            constant: raw.constant,
            cos_coeffs: parse_harmonics(raw.cos, "cos")?,
            sin_coeffs: parse_harmonics(raw.sin, "sin")?,
            tabulated: None,
        })
    }
}

impl From<PotentialSpec> for SpecJson {
    fn from(spec: PotentialSpec) -> Self {
        SpecJson {
            constant: spec.constant,
            cos: spec
                .cos_coeffs
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            sin: spec
                .sin_coeffs
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            tabulated: spec.tabulated,
        }
    }
}

/// Samples the potential at the grid midpoints.
pub fn eval_potential(spec: &PotentialSpec, grid: &PeriodicGrid) -> Result<GridField> {
    spec.check_resolution(grid)?;
    if let Some(values) = &spec.tabulated {
        return GridField::new(grid, values.clone());
    }
    let values: Vec<f64> = grid
        .nodes()
        .iter()
        .map(|&x| {
            let mut v = spec.constant;
            for (&k, &a) in &spec.cos_coeffs {
                v += a * (k as f64 * x).cos();
            }
            for (&k, &b) in &spec.sin_coeffs {
                v += b * (k as f64 * x).sin();
            }
            v
        })
        .collect();
    GridField::new(grid, values)
}

/// Samples the potential gradient: analytically for trigonometric specs,
/// spectrally for tables.
pub fn eval_gradient(spec: &PotentialSpec, grid: &PeriodicGrid) -> Result<GridField> {
    spec.check_resolution(grid)?;
    if spec.tabulated.is_some() {
        let v = eval_potential(spec, grid)?;
        return Ok(spectral_derivative(&v));
    }
    let values: Vec<f64> = grid
        .nodes()
        .iter()
        .map(|&x| {
            let mut v = 0.0;
            for (&k, &a) in &spec.cos_coeffs {
                v -= a * k as f64 * (k as f64 * x).sin();
            }
            for (&k, &b) in &spec.sin_coeffs {
                v += b * k as f64 * (k as f64 * x).cos();
            }
            v
        })
        .collect();
    GridField::new(grid, values)
}

/// Normalized Gibbs density `exp(-V)/Z` together with its log and `log Z`.
#[derive(Clone, Debug)]
pub struct GibbsTarget {
    pub density: DensityField,
    pub log_density: GridField,
    pub log_z: f64,
}

/// Builds the Gibbs target of a sampled potential. The normalization runs
/// through a max-shifted log-sum-exp, so steep potentials stay finite.
pub fn gibbs_target(v: &GridField) -> Result<GibbsTarget> {
    let grid = v.grid();
    let dx = grid.dx();

    let mut neg_v_max = f64::NEG_INFINITY;
    for &x in v.values() {
        neg_v_max = neg_v_max.max(-x);
    }
    let mut acc = 0.0;
    for &x in v.values() {
        acc += (-x - neg_v_max).exp();
    }
    let log_z = neg_v_max + (acc * dx).ln();

    let log_values: Vec<f64> = v.values().iter().map(|&x| -x - log_z).collect();
    let values: Vec<f64> = log_values.iter().map(|&l| l.exp()).collect();
    let log_density = GridField::new(grid, log_values.clone())?;
    let density = DensityField::from_parts(grid, values, log_values)?;
    Ok(GibbsTarget {
        density,
        log_density,
        log_z,
    })
}

/// Pairwise sensitivity quantities for two potentials on a common grid.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SensitivityReport {
    /// `sup |V - V'|`.
    pub delta_pot: f64,
    /// `osc(V - V')`.
    pub delta_osc: f64,
    /// `sup |grad V - grad V'|`.
    pub delta_gradpot: f64,
    /// `sup |log pi - log pi'|` between the two Gibbs targets.
    pub s_tar_exact: f64,
    /// `log(Z / Z')`.
    pub log_z_ratio: f64,
}

/// Computes the sensitivity report for a pair of potentials.
pub fn sensitivity_report(
    spec: &PotentialSpec,
    spec_prime: &PotentialSpec,
    grid: &PeriodicGrid,
) -> Result<SensitivityReport> {
    let v = eval_potential(spec, grid)?;
    let vp = eval_potential(spec_prime, grid)?;
    let g = eval_gradient(spec, grid)?;
    let gp = eval_gradient(spec_prime, grid)?;

    let diff: Vec<f64> = v
        .values()
        .iter()
        .zip(vp.values())
        .map(|(a, b)| a - b)
        .collect();
    let diff = GridField::new(grid, diff)?;
    let gdiff: Vec<f64> = g
        .values()
        .iter()
        .zip(gp.values())
        .map(|(a, b)| a - b)
        .collect();
    let gdiff = GridField::new(grid, gdiff)?;

    let target = gibbs_target(&v)?;
    let target_prime = gibbs_target(&vp)?;
    let log_diff: Vec<f64> = target
        .log_density
        .values()
        .iter()
        .zip(target_prime.log_density.values())
        .map(|(a, b)| a - b)
        .collect();
    let log_diff = GridField::new(grid, log_diff)?;

    Ok(SensitivityReport {
        delta_pot: sup_norm(&diff),
        delta_osc: oscillation(&diff),
        delta_gradpot: sup_norm(&gdiff),
        s_tar_exact: sup_norm(&log_diff),
        log_z_ratio: target.log_z - target_prime.log_z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, quadrature};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn double_well() -> PotentialSpec {
        PotentialSpec::constant(1.2).with_cos(2, -1.2).unwrap()
    }

    #[test]
    fn eval_matches_closed_form() {
        let g = build_grid(64).unwrap();
        let v = eval_potential(&double_well(), &g).unwrap();
        for (i, &x) in g.nodes().iter().enumerate() {
            let want = 1.2 * (1.0 - (2.0 * x).cos());
            assert!((v.values()[i] - want).abs() <= 1e-14);
        }
    }

    #[test]
    fn zero_spec_evaluates_to_zero() {
        let g = build_grid(16).unwrap();
        let v = eval_potential(&PotentialSpec::zero(), &g).unwrap();
        assert!(sup_norm(&v) == 0.0);
        let dv = eval_gradient(&PotentialSpec::zero(), &g).unwrap();
        assert!(sup_norm(&dv) == 0.0);
    }

    #[test]
    fn harmonics_above_quarter_nyquist_are_rejected() {
        let g = build_grid(8).unwrap();
        let ok = PotentialSpec::zero().with_cos(2, 1.0).unwrap();
        assert!(eval_potential(&ok, &g).is_ok());
        let too_fine = PotentialSpec::zero().with_cos(3, 1.0).unwrap();
        assert!(matches!(
            eval_potential(&too_fine, &g),
            Err(Error::Harmonic { k: 3, limit: 2, n: 8 })
        ));
        assert!(matches!(
            eval_gradient(&too_fine, &g),
            Err(Error::Harmonic { .. })
        ));
    }

    #[test]
    fn tabulated_requires_matching_length() {
        let g = build_grid(16).unwrap();
        let spec = PotentialSpec::tabulated(vec![0.5; 8]).unwrap();
        assert!(matches!(
            eval_potential(&spec, &g),
            Err(Error::TabulatedLength { expected: 16, got: 8 })
        ));
        let spec = PotentialSpec::tabulated(vec![0.5; 16]).unwrap();
        let v = eval_potential(&spec, &g).unwrap();
        assert!(v.values().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let g = build_grid(512).unwrap();
        let spec = double_well().with_sin(1, 0.3).unwrap();
        let v = eval_potential(&spec, &g).unwrap();
        let dv = eval_gradient(&spec, &g).unwrap();
        let n = g.n();
        let dx = g.dx();
        for i in 0..n {
            let fd = (v.values()[(i + 1) % n] - v.values()[(i + n - 1) % n]) / (2.0 * dx);
            assert!((dv.values()[i] - fd).abs() <= 1e-3);
        }
    }

    #[test]
    fn tabulated_gradient_is_spectral() {
        let g = build_grid(64).unwrap();
        let table: Vec<f64> = g.nodes().iter().map(|&x| x.sin()).collect();
        let spec = PotentialSpec::tabulated(table).unwrap();
        let dv = eval_gradient(&spec, &g).unwrap();
        for (i, &x) in g.nodes().iter().enumerate() {
            assert!((dv.values()[i] - x.cos()).abs() <= 1e-9);
        }
    }

    #[test]
    fn gibbs_of_constant_potential_is_uniform() {
        let g = build_grid(32).unwrap();
        let v = eval_potential(&PotentialSpec::constant(3.0), &g).unwrap();
        let t = gibbs_target(&v).unwrap();
        let u = 1.0 / (2.0 * PI);
        for &p in t.density.values() {
            assert!((p - u).abs() <= 1e-14);
        }
        assert!((t.log_z - ((2.0 * PI).ln() - 3.0)).abs() <= 1e-12);
    }

    #[test]
    fn gibbs_density_is_normalized_and_shift_invariant() {
        let g = build_grid(128).unwrap();
        let spec = PotentialSpec::constant(4.0).with_cos(1, -4.0).unwrap();
        let v = eval_potential(&spec, &g).unwrap();
        let t = gibbs_target(&v).unwrap();
        let mass: f64 = quadrature(&GridField::new(&g, t.density.values().to_vec()).unwrap());
        assert!((mass - 1.0).abs() <= 1e-13);

        let shifted = eval_potential(&spec.clone().with_constant(7.5), &g).unwrap();
        let ts = gibbs_target(&shifted).unwrap();
        for (a, b) in t.density.values().iter().zip(ts.density.values()) {
            assert!((a - b).abs() <= 1e-13 * a.abs().max(1.0));
        }
        assert!((ts.log_z - (t.log_z - 7.5)).abs() <= 1e-12);
    }

    #[test]
    fn gibbs_of_even_potential_is_symmetric() {
        let g = build_grid(64).unwrap();
        let spec = PotentialSpec::constant(4.0).with_cos(1, -4.0).unwrap();
        let v = eval_potential(&spec, &g).unwrap();
        let t = gibbs_target(&v).unwrap();
        let p = t.density.values();
        let n = g.n();
        for i in 0..n {
            assert!((p[i] - p[n - 1 - i]).abs() <= 1e-12 * p[i].max(1e-300));
        }
        let max_idx = (0..n).max_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap()).unwrap();
        assert!(g.node(max_idx).abs() <= g.dx());
    }

    #[test]
    fn sensitivity_report_on_shifted_sine_pair() {
        let g = build_grid(512).unwrap();
        let v = double_well();
        let vp = double_well().with_sin(1, 0.6).unwrap().with_constant(1.0);
        let r = sensitivity_report(&v, &vp, &g).unwrap();
        assert!((r.delta_pot - 1.6).abs() <= 1e-3);
        assert!((r.delta_osc - 1.2).abs() <= 1e-3);
        assert!((r.s_tar_exact - 0.6435).abs() <= 2e-3);
        assert!((r.delta_gradpot - 0.6).abs() <= 1e-3);
        assert!(r.log_z_ratio.abs() <= r.delta_pot + 1e-12);
    }

    #[test]
    fn sensitivity_of_identical_pair_vanishes() {
        let g = build_grid(64).unwrap();
        let v = double_well();
        let r = sensitivity_report(&v, &v.clone(), &g).unwrap();
        assert!(r.delta_pot == 0.0);
        assert!(r.delta_osc == 0.0);
        assert!(r.delta_gradpot == 0.0);
        assert!(r.s_tar_exact <= 1e-15);
        assert!(r.log_z_ratio.abs() <= 1e-15);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let spec: PotentialSpec =
            serde_json::from_str(r#"{"constant": 1.2, "cos": {"2": -1.2}, "sin": {"1": 0.6}}"#)
                .unwrap();
        assert_eq!(
            spec,
            PotentialSpec::constant(1.2)
                .with_cos(2, -1.2)
                .unwrap()
                .with_sin(1, 0.6)
                .unwrap()
        );
        let text = serde_json::to_string(&spec).unwrap();
        let back: PotentialSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);

        assert!(serde_json::from_str::<PotentialSpec>(r#"{"konstant": 1.0}"#).is_err());
        assert!(serde_json::from_str::<PotentialSpec>(r#"{"cos": {"0": 1.0}}"#).is_err());
        assert!(serde_json::from_str::<PotentialSpec>(r#"{"cos": {"x": 1.0}}"#).is_err());
        assert!(
            serde_json::from_str::<PotentialSpec>(r#"{"tabulated": [1.0], "constant": 2.0}"#)
                .is_err()
        );

        let tab: PotentialSpec = serde_json::from_str(r#"{"tabulated": [0.0, 1.0]}"#).unwrap();
        assert!(tab.is_tabulated());
        let text = serde_json::to_string(&tab).unwrap();
        let back: PotentialSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(tab, back);
    }

    fn arb_spec() -> impl Strategy<Value = PotentialSpec> {
        (
            -3.0f64..3.0,
            prop::collection::btree_map(1usize..5, -2.0f64..2.0, 0..3),
            prop::collection::btree_map(1usize..5, -2.0f64..2.0, 0..3),
        )
            .prop_map(|(c, cos, sin)| {
                let mut s = PotentialSpec::constant(c);
                for (k, a) in cos {
                    s = s.with_cos(k, a).unwrap();
                }
                for (k, b) in sin {
                    s = s.with_sin(k, b).unwrap();
                }
                s
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn sensitivity_is_shift_covariant(v in arb_spec(), vp in arb_spec(), c in -5.0f64..5.0) {
            let g = build_grid(64).unwrap();
            let base = sensitivity_report(&v, &vp, &g).unwrap();
            let shifted = sensitivity_report(&v, &vp.clone().with_constant(c), &g).unwrap();
            prop_assert!((base.delta_osc - shifted.delta_osc).abs() <= 1e-10);
            prop_assert!((base.delta_gradpot - shifted.delta_gradpot).abs() <= 1e-10);
            prop_assert!((base.s_tar_exact - shifted.s_tar_exact).abs() <= 1e-10);
            prop_assert!(((base.log_z_ratio + c) - shifted.log_z_ratio).abs() <= 1e-10);
        }

        #[test]
        fn normalization_ratio_and_floor_obey_sensitivity(v in arb_spec(), vp in arb_spec()) {
            let g = build_grid(64).unwrap();
            let r = sensitivity_report(&v, &vp, &g).unwrap();
            prop_assert!(r.log_z_ratio.abs() <= r.delta_pot + 1e-12);
            prop_assert!(r.s_tar_exact <= 2.0 * r.delta_pot + 1e-12);
            prop_assert!(r.s_tar_exact <= r.delta_osc + 1e-12);
            prop_assert!(r.delta_osc <= 2.0 * r.delta_pot + 1e-12);
        }
    }
}
