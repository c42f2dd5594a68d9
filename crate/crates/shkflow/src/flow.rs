//! Transport-reaction solver for the birth-death Langevin flow
//!
//!   d rho/dt = div(grad rho + rho grad V) - alpha rho,
//!   alpha    = log(rho/pi) - E_rho[log(rho/pi)],
//!
//! discretized with a central finite-volume flux in space and classical RK4
//! in time. `Dynamics::Langevin` drops the reaction term and keeps the pure
//! transport flow. The flux telescopes around the circle, so mass is
//! conserved to roundoff; the mean-centered reaction term adds nothing to
//! the mass balance either. The discrete Gibbs density is stationary only
//! up to an O(dx^2) flux truncation residual, which the tests pin down by
//! grid refinement.
//!
//! Determinism: every reduction runs left to right, state updates are plain
//! indexed loops, and nothing in here spawns threads.

use serde::{Deserialize, Serialize};

use crate::grid::{quad_raw, GridField, PeriodicGrid};
use crate::potentials::{eval_potential, gibbs_target, GibbsTarget, PotentialSpec};
use crate::{Error, Result};

const MASS_TOL: f64 = 1e-10;
const KL_CLAMP: f64 = 1e-12;

/// A strictly positive probability density on the grid with unit mass
/// (within 1e-10) and a cached elementwise logarithm.
#[derive(Clone, Debug)]
pub struct DensityField {
    grid: PeriodicGrid,
    values: Vec<f64>,
    log_values: Vec<f64>,
    mass: f64,
}

impl DensityField {
    /// Validates positivity, finiteness, and unit mass, then caches logs.
    pub fn new(grid: &PeriodicGrid, values: Vec<f64>) -> Result<Self> {
        let log_values: Vec<f64> = values.iter().map(|v| v.ln()).collect();
        Self::from_parts(grid, values, log_values)
    }

    /// Internal constructor for callers that already hold exact logs
    /// (e.g. Gibbs targets built in log space). Runs the same validation.
    pub(crate) fn from_parts(
        grid: &PeriodicGrid,
        values: Vec<f64>,
        log_values: Vec<f64>,
    ) -> Result<Self> {
        grid.check_len(values.len())?;
        for (cell, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "density",
                    cell,
                });
            }
            if v <= 0.0 {
                return Err(Error::NonPositiveDensity { cell, value: v });
            }
        }
        let mass = quad_raw(&values, grid.dx());
        let drift = (mass - 1.0).abs();
        if !(drift <= MASS_TOL) {
            return Err(Error::BadMass { mass, drift });
        }
        Ok(DensityField {
            grid: grid.clone(),
            values,
            log_values,
            mass,
        })
    }

    /// The uniform density 1/(2 pi).
    pub fn uniform(grid: &PeriodicGrid) -> Self {
        let u = 1.0 / (2.0 * std::f64::consts::PI);
        let values = vec![u; grid.n()];
        let log_values = vec![u.ln(); grid.n()];
        let mass = quad_raw(&values, grid.dx());
        DensityField {
            grid: grid.clone(),
            values,
            log_values,
            mass,
        }
    }

    /// Normalizes arbitrary positive samples into a density.
    pub fn normalized(grid: &PeriodicGrid, mut values: Vec<f64>) -> Result<Self> {
        grid.check_len(values.len())?;
        for (cell, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "density",
                    cell,
                });
            }
            if v <= 0.0 {
                return Err(Error::NonPositiveDensity { cell, value: v });
            }
        }
        let mass = quad_raw(&values, grid.dx());
        for v in values.iter_mut() {
            *v /= mass;
        }
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Cached `ln(values)`, accurate to 1e-14 relative.
    pub fn log_values(&self) -> &[f64] {
        &self.log_values
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    /// The density as a plain grid field.
    pub fn to_grid_field(&self) -> GridField {
        GridField::new(&self.grid, self.values.clone()).expect("density values are finite")
    }

    /// CSV snapshot with columns `theta,rho`.
    pub fn to_csv(&self) -> String {
        self.to_grid_field().to_csv("rho")
    }

    pub(crate) fn check_same_grid(&self, other: &DensityField) -> Result<()> {
        if self.grid.same_layout(&other.grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch {
                expected: self.grid.n(),
                got: other.grid.n(),
            })
        }
    }
}

/// Which flow to integrate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Dynamics {
    /// Transport plus mean-centered birth-death reaction.
    Shk,
    /// Pure transport (no reaction).
    Langevin,
}

/// Time-stepping parameters.
///
/// `dt` must respect the diffusion stability cap `0.2 dx^2`; the integrator
/// additionally rounds `dt` down so that `t_final` is hit exactly.
#[derive(Clone, Copy, Debug)]
pub struct SolverConfig {
    pub dt: f64,
    pub t_final: f64,
    pub record_every: usize,
    pub dynamics: Dynamics,
    pub positivity_floor: f64,
}

impl SolverConfig {
    /// Defaults for a given grid: `dt = 0.2 dx^2`, snapshots roughly every
    /// 0.02 time units, SHK dynamics, floor 1e-300.
    pub fn for_grid(grid: &PeriodicGrid) -> Self {
        let dt = 0.2 * grid.dx() * grid.dx();
        SolverConfig {
            dt,
            t_final: 1.0,
            record_every: ((0.02 / dt).round() as usize).max(1),
            dynamics: Dynamics::Shk,
            positivity_floor: 1e-300,
        }
    }

    pub fn with_t_final(mut self, t_final: f64) -> Self {
        self.t_final = t_final;
        self
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_dynamics(mut self, dynamics: Dynamics) -> Self {
        self.dynamics = dynamics;
        self
    }

    pub fn with_record_every(mut self, record_every: usize) -> Self {
        self.record_every = record_every;
        self
    }

    pub fn with_positivity_floor(mut self, floor: f64) -> Self {
        self.positivity_floor = floor;
        self
    }

    pub fn validate(&self, grid: &PeriodicGrid) -> Result<()> {
        let limit = 0.2 * grid.dx() * grid.dx();
        if !(self.dt > 0.0) {
            return Err(Error::NonPositive {
                name: "dt",
                value: self.dt,
            });
        }
        if self.dt > limit * (1.0 + 1e-9) {
            return Err(Error::CflViolation {
                dt: self.dt,
                limit,
            });
        }
        if !(self.t_final > 0.0) {
            return Err(Error::NonPositive {
                name: "t_final",
                value: self.t_final,
            });
        }
        if self.record_every == 0 {
            return Err(Error::NonPositive {
                name: "record_every",
                value: 0.0,
            });
        }
        if !(self.positivity_floor >= 0.0) {
            return Err(Error::Negative {
                name: "positivity_floor",
                value: self.positivity_floor,
            });
        }
        Ok(())
    }
}

/// Per-snapshot diagnostics recorded along a trajectory.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DiagnosticsRow {
    pub t: f64,
    pub mass: f64,
    /// KL(rho_t || pi), clamped at zero when roundoff drives it within
    /// -1e-12 of zero.
    pub kl_to_target: f64,
    /// Oscillation of log(rho_t / pi).
    pub osc_log_ratio: f64,
    /// Spatial mean of log(rho_t / pi) over theta.
    pub mean_log_ratio: f64,
}

/// Recorded output of one integration.
#[derive(Clone, Debug)]
pub struct Trajectory {
    times: Vec<f64>,
    snapshots: Vec<DensityField>,
    diagnostics: Vec<DiagnosticsRow>,
}

impl Trajectory {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn snapshots(&self) -> &[DensityField] {
        &self.snapshots
    }

    pub fn diagnostics(&self) -> &[DiagnosticsRow] {
        &self.diagnostics
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_density(&self) -> &DensityField {
        self.snapshots.last().expect("trajectory records t = 0")
    }

    /// Index of the recorded time closest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        let mut best = 0;
        let mut best_gap = f64::INFINITY;
        for (i, &s) in self.times.iter().enumerate() {
            let gap = (s - t).abs();
            if gap < best_gap {
                best_gap = gap;
                best = i;
            }
        }
        best
    }

    /// Diagnostics CSV with header `t,mass,kl_to_target,osc_log_ratio,mean_log_ratio`.
    pub fn diagnostics_csv(&self) -> String {
        let mut out = String::from("t,mass,kl_to_target,osc_log_ratio,mean_log_ratio\n");
        for row in &self.diagnostics {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.t, row.mass, row.kl_to_target, row.osc_log_ratio, row.mean_log_ratio
            ));
        }
        out
    }

    /// File name for snapshot `index`: `rho_t{index}.csv`.
    pub fn snapshot_file_name(index: usize) -> String {
        format!("rho_t{index}.csv")
    }
}

/// Central finite-volume transport term `div(grad rho + rho grad V)`.
pub fn transport_rhs(rho: &DensityField, v: &GridField) -> Result<GridField> {
    let grid = rho.grid();
    if !grid.same_layout(v.grid()) {
        return Err(Error::GridMismatch {
            expected: grid.n(),
            got: v.grid().n(),
        });
    }
    let ctx = RhsContext::new(grid, v.values(), rho.log_values().to_vec(), false, 0.0);
    let n = grid.n();
    let mut flux = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut out = vec![0.0; n];
    ctx.eval(rho.values(), &mut flux, &mut w, &mut out)
        .map_err(|(cell, value)| Error::NonPositiveDensity { cell, value })?;
    GridField::new(grid, out)
}

/// Mean-centered birth-death rate `alpha = log(rho/pi) - E_rho[log(rho/pi)]`.
/// Its density-weighted quadrature vanishes by construction.
pub fn reaction_rate(rho: &DensityField, target: &GibbsTarget) -> Result<GridField> {
    let grid = rho.grid();
    rho.check_same_grid(&target.density)?;
    let n = grid.n();
    let logpi = target.log_density.values();
    let mut w = Vec::with_capacity(n);
    for i in 0..n {
        w.push(rho.log_values()[i] - logpi[i]);
    }
    let mut acc = 0.0;
    for i in 0..n {
        acc += w[i] * rho.values()[i];
    }
    let mean = acc * grid.dx();
    for wi in w.iter_mut() {
        *wi -= mean;
    }
    GridField::new(grid, w)
}

/// Full right-hand side for the chosen dynamics.
pub fn rhs(
    rho: &DensityField,
    v: &GridField,
    target: &GibbsTarget,
    dynamics: Dynamics,
) -> Result<GridField> {
    let transport = transport_rhs(rho, v)?;
    match dynamics {
        Dynamics::Langevin => Ok(transport),
        Dynamics::Shk => {
            let alpha = reaction_rate(rho, target)?;
            let values: Vec<f64> = transport
                .values()
                .iter()
                .zip(alpha.values())
                .zip(rho.values())
                .map(|((tr, a), r)| tr - a * r)
                .collect();
            GridField::new(rho.grid(), values)
        }
    }
}

struct RhsContext {
    n: usize,
    dx: f64,
    inv_dx: f64,
    dv: Vec<f64>,
    logpi: Vec<f64>,
    shk: bool,
    floor: f64,
}

impl RhsContext {
    fn new(grid: &PeriodicGrid, v_values: &[f64], logpi: Vec<f64>, shk: bool, floor: f64) -> Self {
        let n = grid.n();
        let dx = grid.dx();
        let inv_dx = 1.0 / dx;
        let mut dv = vec![0.0; n];
        for i in 0..n {
            let ip = if i + 1 < n { i + 1 } else { 0 };
            dv[i] = (v_values[ip] - v_values[i]) * inv_dx;
        }
        RhsContext {
            n,
            dx,
            inv_dx,
            dv,
            logpi,
            shk,
            floor,
        }
    }

    /// Writes the right-hand side of the flow into `out`. Returns the first
    /// cell at or below the positivity floor on failure.
    fn eval(
        &self,
        y: &[f64],
        flux: &mut [f64],
        w: &mut [f64],
        out: &mut [f64],
    ) -> std::result::Result<(), (usize, f64)> {
        let n = self.n;
        for (i, &yi) in y.iter().enumerate() {
            if !(yi > self.floor) {
                return Err((i, yi));
            }
        }
        for i in 0..n {
            let ip = if i + 1 < n { i + 1 } else { 0 };
            flux[i] = (y[ip] - y[i]) * self.inv_dx + 0.5 * (y[i] + y[ip]) * self.dv[i];
        }
        for i in 0..n {
            let im = if i == 0 { n - 1 } else { i - 1 };
            out[i] = (flux[i] - flux[im]) * self.inv_dx;
        }
        if self.shk {
            for i in 0..n {
                w[i] = y[i].ln() - self.logpi[i];
            }
            let mut acc = 0.0;
            for i in 0..n {
                acc += w[i] * y[i];
            }
            let mean = acc * self.dx;
            for i in 0..n {
                out[i] -= (w[i] - mean) * y[i];
            }
        }
        Ok(())
    }
}

/// Integrates the flow from `rho0` under potential `spec`.
///
/// Records the initial state, every `record_every`-th step, and the final
/// step. Mass is checked against the 1e-10 drift budget after every step,
/// and any stage value at or below the positivity floor aborts with the
/// offending time and cell.
pub fn integrate(
    rho0: &DensityField,
    spec: &PotentialSpec,
    config: &SolverConfig,
) -> Result<Trajectory> {
    let grid = rho0.grid().clone();
    config.validate(&grid)?;
    let v = eval_potential(spec, &grid)?;
    let target = gibbs_target(&v)?;

    let steps = ((config.t_final / config.dt - 1e-9).ceil() as usize).max(1);
    let dt = config.t_final / steps as f64;
    let half_dt = 0.5 * dt;
    let sixth_dt = dt / 6.0;

    let n = grid.n();
    let dx = grid.dx();
    let ctx = RhsContext::new(
        &grid,
        v.values(),
        target.log_density.values().to_vec(),
        config.dynamics == Dynamics::Shk,
        config.positivity_floor,
    );

    let mut y = rho0.values().to_vec();
    let mut stage = vec![0.0; n];
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut flux = vec![0.0; n];
    let mut w = vec![0.0; n];

    let mut traj = Trajectory {
        times: Vec::new(),
        snapshots: Vec::new(),
        diagnostics: Vec::new(),
    };
    record(&mut traj, &grid, &ctx.logpi, 0.0, &y)?;

    for step in 1..=steps {
        let t_stage = (step - 1) as f64 * dt;
        let lost = |(cell, value)| Error::PositivityLost {
            t: t_stage,
            cell,
            value,
            floor: config.positivity_floor,
        };

        ctx.eval(&y, &mut flux, &mut w, &mut k1).map_err(lost)?;
        for i in 0..n {
            stage[i] = y[i] + half_dt * k1[i];
        }
        ctx.eval(&stage, &mut flux, &mut w, &mut k2).map_err(lost)?;
        for i in 0..n {
            stage[i] = y[i] + half_dt * k2[i];
        }
        ctx.eval(&stage, &mut flux, &mut w, &mut k3).map_err(lost)?;
        for i in 0..n {
            stage[i] = y[i] + dt * k3[i];
        }
        ctx.eval(&stage, &mut flux, &mut w, &mut k4).map_err(lost)?;
        for i in 0..n {
            y[i] += sixth_dt * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]);
        }

        let t = if step == steps {
            config.t_final
        } else {
            step as f64 * dt
        };

        let mass = quad_raw(&y, dx);
        let drift = (mass - 1.0).abs();
        if !(drift <= MASS_TOL) {
            if !mass.is_finite() {
                let cell = y.iter().position(|v| !v.is_finite()).unwrap_or(0);
                return Err(Error::NonFinite {
                    what: "density",
                    cell,
                });
            }
            return Err(Error::MassDrift { t, mass, drift });
        }

        if step % config.record_every == 0 || step == steps {
            record(&mut traj, &grid, &ctx.logpi, t, &y)?;
        }
    }

    Ok(traj)
}

fn record(
    traj: &mut Trajectory,
    grid: &PeriodicGrid,
    logpi: &[f64],
    t: f64,
    y: &[f64],
) -> Result<()> {
    let n = grid.n();
    let dx = grid.dx();
    let mut logy = Vec::with_capacity(n);
    let mut kl_acc = 0.0;
    let mut mean_acc = 0.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let yi = y[i];
        if !(yi > 0.0) {
            return Err(Error::PositivityLost {
                t,
                cell: i,
                value: yi,
                floor: 0.0,
            });
        }
        let ly = yi.ln();
        logy.push(ly);
        let wi = ly - logpi[i];
        kl_acc += wi * yi;
        mean_acc += wi;
        lo = lo.min(wi);
        hi = hi.max(wi);
    }
    let mut kl = kl_acc * dx;
    if kl < 0.0 && kl >= -KL_CLAMP {
        kl = 0.0;
    }
    let mass = quad_raw(y, dx);
    let snapshot = DensityField::from_parts(grid, y.to_vec(), logy)?;
    traj.times.push(t);
    traj.snapshots.push(snapshot);
    traj.diagnostics.push(DiagnosticsRow {
        t,
        mass,
        kl_to_target: kl,
        osc_log_ratio: hi - lo,
        mean_log_ratio: mean_acc * dx / (2.0 * std::f64::consts::PI),
    });
    Ok(())
}
