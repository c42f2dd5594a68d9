//! Command-line front end.
//!
//! One JSON config file (all fields optional, unknown keys rejected) plus a
//! few flag overrides drive nine subcommands: the five built-in experiment
//! variants, a free-form `solve` for user potentials, a `bounds` tabulator
//! for the envelope family, and a `certify` pipeline for user datasets.
//!
//! Contract: stdout carries exactly one JSON summary line
//! (`{"subcommand":…,"files":[…],"elapsed_s":…}`), stderr carries
//! diagnostics, and the exit status is 0 on success, 1 on validation
//! errors, 2 on solver failures (mass drift or positivity loss). Output
//! files never contain timing, so reruns with the same config are
//! bitwise-identical.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bounds::{BoundParams, EnvelopeKind, EnvelopeSeries, EnvelopeSeriesKind, STarMode};
use crate::divergence::hockey_stick_symmetric;
use crate::experiments::{
    pair_bound_params, run_all, run_exp1, run_exp2, run_exp3, run_exp4, run_flow_pair,
    Exp1Variant, ExperimentConfig, ExperimentOutput, PairSeries,
};
use crate::flow::{integrate, DensityField, Dynamics, SolverConfig};
use crate::grid::build_grid;
use crate::potentials::{eval_potential, gibbs_target, sensitivity_report, PotentialSpec};
use crate::privacy::{
    approx_dp_delta, empirical_utility, mech_loss, mech_potential, pure_dp_epsilon,
    sample_wrapped_normal, utility_floor, DpCertificate, DpCertificateRow, ExpMechSpec, LossKind,
    TorusDataset,
};
use crate::{Error, Result};

/// A potential as plain data: `V(x) = constant + Σ a·cos(kx) + Σ b·sin(kx)`,
/// or a table of per-cell samples (exclusive with the analytic terms).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialConfig {
    #[serde(default)]
    pub constant: f64,
    /// Pairs `[k, a]` contributing `a cos(kx)`.
    #[serde(default)]
    pub cos: Vec<(usize, f64)>,
    /// Pairs `[k, b]` contributing `b sin(kx)`.
    #[serde(default)]
    pub sin: Vec<(usize, f64)>,
    /// Per-cell samples on the run's grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tabulated: Option<Vec<f64>>,
}

impl PotentialConfig {
    pub fn to_spec(&self) -> Result<PotentialSpec> {
        if let Some(values) = &self.tabulated {
            if self.constant != 0.0 || !self.cos.is_empty() || !self.sin.is_empty() {
                return Err(Error::Config(
                    "a tabulated potential cannot also carry analytic terms".into(),
                ));
            }
            return PotentialSpec::tabulated(values.clone());
        }
        let mut spec = PotentialSpec::constant(self.constant);
        for &(k, a) in &self.cos {
            spec = spec.with_cos(k, a)?;
        }
        for &(k, b) in &self.sin {
            spec = spec.with_sin(k, b)?;
        }
        Ok(spec)
    }
}

/// Inputs for the `bounds` subcommand: envelope parameters plus the time
/// grid to tabulate them on.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    pub delta_pot: f64,
    pub delta_osc: f64,
    pub delta_gradpot: f64,
    pub r0: f64,
    pub r0_prime: f64,
    /// Defaults to `max(r0, r0_prime)`.
    #[serde(default)]
    pub b: Option<f64>,
    /// Defaults to TWO_DELTA_POT.
    #[serde(default)]
    pub s_tar_mode: Option<STarMode>,
    /// Required when `s_tar_mode` is EXACT; ignored otherwise.
    #[serde(default)]
    pub s_tar: Option<f64>,
    pub lambda_gibbs: f64,
    /// Young parameter, defaults to 0.5.
    #[serde(default)]
    pub c: Option<f64>,
    /// Defaults to 8.
    #[serde(default)]
    pub t_max: Option<f64>,
    /// Defaults to 401 (including t = 0).
    #[serde(default)]
    pub t_points: Option<usize>,
}

impl BoundsConfig {
    fn to_params(&self) -> Result<BoundParams> {
        let mode = self.s_tar_mode.unwrap_or(STarMode::TwoDeltaPot);
        let s_tar = match mode {
            STarMode::TwoDeltaPot => 2.0 * self.delta_pot,
            STarMode::DeltaOsc => self.delta_osc,
            STarMode::Exact => self.s_tar.ok_or_else(|| {
                Error::Config("s_tar_mode EXACT requires an explicit s_tar".into())
            })?,
        };
        let params = BoundParams {
            delta_pot: self.delta_pot,
            delta_osc: self.delta_osc,
            delta_gradpot: self.delta_gradpot,
            r0: self.r0,
            r0_prime: self.r0_prime,
            b: self.b.unwrap_or_else(|| self.r0.max(self.r0_prime)),
            s_tar,
            s_tar_mode: mode,
            lambda_gibbs: self.lambda_gibbs,
            c: self.c.unwrap_or(0.5),
        };
        params.validate()?;
        Ok(params)
    }
}

/// Inputs for the `certify` subcommand. The dataset comes from a CSV file
/// (one observation per line, radians) or, when `path` is absent, from the
/// seeded wrapped-normal sampler.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub label: Option<String>,
    /// Sample size when sampling (default 100).
    #[serde(default)]
    pub count: Option<usize>,
    /// Sampling center (default 0.25).
    #[serde(default)]
    pub center: Option<f64>,
    /// Sampling standard deviation (default 0.05).
    #[serde(default)]
    pub sd: Option<f64>,
    /// Which observation the neighboring dataset replaces (default 0).
    #[serde(default)]
    pub neighbor_index: Option<usize>,
    /// Replacement value (default -2.4).
    #[serde(default)]
    pub neighbor_value: Option<f64>,
}

/// The JSON config file. Every field is optional; unknown keys are a hard
/// error. Flags override the top-level scalars.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub grid_n: Option<usize>,
    pub dt: Option<f64>,
    pub t_final: Option<f64>,
    pub record_every: Option<usize>,
    pub seed: Option<u64>,
    pub beta: Option<f64>,
    pub c_grid: Option<usize>,
    pub renyi_alphas: Option<Vec<f64>>,
    pub eps_list: Option<Vec<f64>>,
    /// `solve` only; defaults to SHK.
    pub dynamics: Option<Dynamics>,
    /// `solve` only; required there.
    pub potential: Option<PotentialConfig>,
    /// `solve` only; enables the paired-run columns.
    pub potential_prime: Option<PotentialConfig>,
    /// `solve` only; start from the Gibbs density of this potential
    /// instead of the uniform density.
    pub initial: Option<PotentialConfig>,
    /// `bounds` only; required there.
    pub bounds: Option<BoundsConfig>,
    /// `certify` only; optional (defaults to the seeded sampler).
    pub dataset: Option<DatasetConfig>,
}

impl FileConfig {
    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let config: FileConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    /// Applies one `--set KEY=VALUE` override. Only top-level scalars are
    /// addressable; unknown keys are a hard error.
    fn apply_set(&mut self, kv: &str) -> Result<()> {
        let (key, value) = kv.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects KEY=VALUE, got '{kv}'"))
        })?;
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Config(format!("--set {key}: cannot parse '{value}'"))
            })
        }
        match key {
            "grid_n" => self.grid_n = Some(parse(key, value)?),
            "dt" => self.dt = Some(parse(key, value)?),
            "t_final" => self.t_final = Some(parse(key, value)?),
            "record_every" => self.record_every = Some(parse(key, value)?),
            "seed" => self.seed = Some(parse(key, value)?),
            "beta" => self.beta = Some(parse(key, value)?),
            "c_grid" => self.c_grid = Some(parse(key, value)?),
            other => {
                return Err(Error::Config(format!(
                    "unknown --set key '{other}' (valid: grid_n, dt, t_final, \
                     record_every, seed, beta, c_grid)"
                )))
            }
        }
        Ok(())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "shkflow",
    version,
    about = "Birth-death Langevin flow solver with divergence and privacy certificates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate a user potential (optionally a perturbed pair).
    Solve(CommonArgs),
    /// Tabulate the log-ratio envelopes and KL bounds for given parameters.
    Bounds(CommonArgs),
    /// Run the privacy-certificate pipeline on a user dataset.
    Certify(CommonArgs),
    /// Perturbed double-well pair, log-ratio envelopes (first variant).
    Exp1a(CommonArgs),
    /// Factor-of-2 oscillation-vs-sup demonstration (second variant).
    Exp1b(CommonArgs),
    /// Renyi-order study and Young-parameter tradeoff sweep.
    Exp2(CommonArgs),
    /// Exponential-mechanism privacy certificate on a sampled dataset.
    Exp3(CommonArgs),
    /// Reaction-vs-transport comparison on a metastable double well.
    Exp4(CommonArgs),
    /// Run the five experiment variants in order.
    All(CommonArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Solve(_) => "solve",
            Command::Bounds(_) => "bounds",
            Command::Certify(_) => "certify",
            Command::Exp1a(_) => "exp1a",
            Command::Exp1b(_) => "exp1b",
            Command::Exp2(_) => "exp2",
            Command::Exp3(_) => "exp3",
            Command::Exp4(_) => "exp4",
            Command::All(_) => "all",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::Solve(a)
            | Command::Bounds(a)
            | Command::Certify(a)
            | Command::Exp1a(a)
            | Command::Exp1b(a)
            | Command::Exp2(a)
            | Command::Exp3(a)
            | Command::Exp4(a)
            | Command::All(a) => a,
        }
    }
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// JSON config file; all fields optional, unknown keys rejected.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory (created if absent).
    #[arg(long, default_value = "out")]
    outdir: PathBuf,

    /// Grid size override (even, >= 8).
    #[arg(long)]
    grid_n: Option<usize>,

    /// Time step override; must respect the stability cap 0.2*dx^2.
    #[arg(long)]
    dt: Option<f64>,

    /// Horizon override.
    #[arg(long)]
    t_final: Option<f64>,

    /// Dataset seed override.
    #[arg(long)]
    seed: Option<u64>,

    /// Override a top-level config scalar, e.g. --set beta=5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl CommonArgs {
    /// config file < --set overrides < dedicated flags.
    fn resolve(&self) -> Result<FileConfig> {
        let mut config = match &self.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        for kv in &self.set {
            config.apply_set(kv)?;
        }
        if let Some(n) = self.grid_n {
            config.grid_n = Some(n);
        }
        if let Some(dt) = self.dt {
            config.dt = Some(dt);
        }
        if let Some(tf) = self.t_final {
            config.t_final = Some(tf);
        }
        if let Some(seed) = self.seed {
            config.seed = Some(seed);
        }
        Ok(config)
    }
}

#[derive(Serialize)]
struct Summary {
    subcommand: &'static str,
    files: Vec<String>,
    elapsed_s: f64,
}

/// Parses `argv` (including the program name) and runs the subcommand.
/// Returns the process exit status: 0 success, 1 validation error,
/// 2 solver failure.
pub fn parse_and_dispatch(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let started = Instant::now();
    let name = cli.command.name();
    match run(&cli.command) {
        Ok(files) => {
            let summary = Summary {
                subcommand: name,
                files,
                elapsed_s: started.elapsed().as_secs_f64(),
            };
            println!(
                "{}",
                serde_json::to_string(&summary).expect("summary serializes")
            );
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(command: &Command) -> Result<Vec<String>> {
    let args = command.args();
    let config = args.resolve()?;
    let outdir = &args.outdir;
    match command {
        Command::Solve(_) => solve_subcommand(&config, outdir),
        Command::Bounds(_) => bounds_subcommand(&config, outdir),
        Command::Certify(_) => certify_subcommand(&config, outdir),
        Command::Exp1a(_) => {
            collect_files(vec![run_exp1(&experiment_config(&config, outdir), Exp1Variant::A)?])
        }
        Command::Exp1b(_) => {
            collect_files(vec![run_exp1(&experiment_config(&config, outdir), Exp1Variant::B)?])
        }
        Command::Exp2(_) => collect_files(vec![run_exp2(&experiment_config(&config, outdir))?]),
        Command::Exp3(_) => collect_files(vec![run_exp3(&experiment_config(&config, outdir))?]),
        Command::Exp4(_) => collect_files(vec![run_exp4(&experiment_config(&config, outdir))?]),
        Command::All(_) => collect_files(run_all(&experiment_config(&config, outdir))?),
    }
}

fn experiment_config(config: &FileConfig, outdir: &Path) -> ExperimentConfig {
    let mut ec = ExperimentConfig::new(outdir);
    if let Some(n) = config.grid_n {
        ec.grid_n = n;
    }
    ec.dt = config.dt;
    ec.t_final = config.t_final;
    ec.record_every = config.record_every;
    if let Some(alphas) = &config.renyi_alphas {
        ec.renyi_alphas = alphas.clone();
    }
    if let Some(eps) = &config.eps_list {
        ec.eps_list = eps.clone();
    }
    if let Some(c) = config.c_grid {
        ec.c_grid = c;
    }
    if let Some(seed) = config.seed {
        ec.seed = seed;
    }
    if let Some(beta) = config.beta {
        ec.beta = beta;
    }
    ec
}

fn collect_files(outputs: Vec<ExperimentOutput>) -> Result<Vec<String>> {
    Ok(outputs
        .iter()
        .flat_map(|o| o.files.iter().map(|f| f.display().to_string()))
        .collect())
}

fn emit(dir: &Path, name: &str, contents: &str, files: &mut Vec<String>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents)?;
    files.push(path.display().to_string());
    Ok(())
}

fn solver_from(config: &FileConfig, grid: &crate::grid::PeriodicGrid) -> Result<SolverConfig> {
    let mut solver = SolverConfig::for_grid(grid);
    if let Some(dt) = config.dt {
        solver = solver
            .with_dt(dt)
            .with_record_every(((0.02 / dt).round() as usize).max(1));
    }
    if let Some(tf) = config.t_final {
        solver = solver.with_t_final(tf);
    }
    if let Some(re) = config.record_every {
        solver = solver.with_record_every(re);
    }
    if let Some(dynamics) = config.dynamics {
        solver = solver.with_dynamics(dynamics);
    }
    solver.validate(grid)?;
    Ok(solver)
}

/// Integrates the configured potential (pair); emits diagnostics CSVs, the
/// potential(s) as re-ingestable JSON, and for pairs the divergence series
/// with its bound columns.
fn solve_subcommand(config: &FileConfig, outdir: &Path) -> Result<Vec<String>> {
    let potential = config.potential.as_ref().ok_or_else(|| {
        Error::Config("solve needs a `potential` section in the config".into())
    })?;
    let grid = build_grid(config.grid_n.unwrap_or(512))?;
    let spec = potential.to_spec()?;
    let solver = solver_from(config, &grid)?;
    let rho0 = match &config.initial {
        Some(init) => gibbs_target(&eval_potential(&init.to_spec()?, &grid)?)?.density,
        None => DensityField::uniform(&grid),
    };

    let dir = outdir.join("solve");
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();

    let mut potential_json = serde_json::to_string_pretty(potential)?;
    potential_json.push('\n');

    match &config.potential_prime {
        None => {
            let traj = integrate(&rho0, &spec, &solver)?;
            emit(&dir, "diagnostics.csv", &traj.diagnostics_csv(), &mut files)?;
            emit(&dir, "potential.json", &potential_json, &mut files)?;
        }
        Some(potential_prime) => {
            let spec_p = potential_prime.to_spec()?;
            let (traj, traj_p) = run_flow_pair(&rho0, &rho0, &spec, &spec_p, &solver)?;
            let report = sensitivity_report(&spec, &spec_p, &grid)?;
            let params = pair_bound_params(&report, &spec_p, &grid, &traj, &traj_p)?;
            let alphas = config
                .renyi_alphas
                .clone()
                .unwrap_or_else(|| vec![2.0, 3.0, 5.0, 10.0]);
            let eps_list = config.eps_list.clone().unwrap_or_else(|| vec![0.15]);
            let series = PairSeries::build(&traj, &traj_p, &alphas, &eps_list, &params)?;
            emit(&dir, "diagnostics.csv", &traj.diagnostics_csv(), &mut files)?;
            emit(
                &dir,
                "diagnostics_prime.csv",
                &traj_p.diagnostics_csv(),
                &mut files,
            )?;
            emit(&dir, "pair.csv", &series.to_csv(), &mut files)?;
            emit(&dir, "potential.json", &potential_json, &mut files)?;
            let mut prime_json = serde_json::to_string_pretty(potential_prime)?;
            prime_json.push('\n');
            emit(&dir, "potential_prime.json", &prime_json, &mut files)?;
        }
    }
    Ok(files)
}

/// Tabulates all six bound curves on a uniform time grid.
fn bounds_subcommand(config: &FileConfig, outdir: &Path) -> Result<Vec<String>> {
    let bounds = config.bounds.as_ref().ok_or_else(|| {
        Error::Config("bounds needs a `bounds` section in the config".into())
    })?;
    let params = bounds.to_params()?;
    let t_max = bounds.t_max.unwrap_or(8.0);
    if !(t_max > 0.0 && t_max.is_finite()) {
        return Err(Error::NonPositive {
            name: "t_max",
            value: t_max,
        });
    }
    let t_points = bounds.t_points.unwrap_or(401);
    if t_points < 2 {
        return Err(Error::Config(format!(
            "t_points must be at least 2, got {t_points}"
        )));
    }
    let t_grid: Vec<f64> = (0..t_points)
        .map(|i| t_max * i as f64 / (t_points - 1) as f64)
        .collect();

    let kinds = [
        EnvelopeSeriesKind::LogratioA1,
        EnvelopeSeriesKind::LogratioA1p,
        EnvelopeSeriesKind::LogratioExactFloor,
        EnvelopeSeriesKind::KlLinear,
        EnvelopeSeriesKind::KlLsiClosed,
        EnvelopeSeriesKind::KlLsiGronwall,
    ];
    let columns: Vec<EnvelopeSeries> = kinds
        .iter()
        .map(|&kind| EnvelopeSeries::sample(kind, &t_grid, &params))
        .collect::<Result<_>>()?;

    let mut csv = String::from(
        "t,logratio_a1_bound,logratio_a1p_bound,logratio_exact_floor_bound,\
         kl_linear_bound,kl_lsi_closed_bound,kl_lsi_gronwall_bound\n",
    );
    for (i, &t) in t_grid.iter().enumerate() {
        csv.push_str(&format!("{t}"));
        for col in &columns {
            csv.push_str(&format!(",{}", col.values[i]));
        }
        csv.push('\n');
    }

    let dir = outdir.join("bounds");
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    emit(&dir, "bounds.csv", &csv, &mut files)?;
    let mut params_json = serde_json::to_string_pretty(&params)?;
    params_json.push('\n');
    emit(&dir, "params.json", &params_json, &mut files)?;
    Ok(files)
}

/// Runs the exponential-mechanism certificate pipeline on the configured
/// dataset (file or seeded sample) and its one-observation neighbor.
fn certify_subcommand(config: &FileConfig, outdir: &Path) -> Result<Vec<String>> {
    let dataset_config = config.dataset.clone().unwrap_or_default();
    let grid = build_grid(config.grid_n.unwrap_or(512))?;
    let beta = config.beta.unwrap_or(5.0);
    let mech = ExpMechSpec::new(beta, LossKind::CosineMean)?;

    let label = dataset_config.label.clone().unwrap_or_else(|| "D".into());
    let dataset = match &dataset_config.path {
        Some(path) => TorusDataset::parse_csv(label, &fs::read_to_string(path)?)?,
        None => TorusDataset::new(
            label,
            sample_wrapped_normal(
                config.seed.unwrap_or(20240925),
                dataset_config.count.unwrap_or(100),
                dataset_config.center.unwrap_or(0.25),
                dataset_config.sd.unwrap_or(0.05),
            )?,
        )?,
    };
    let dataset_adj = dataset.neighboring(
        dataset_config.neighbor_index.unwrap_or(0),
        dataset_config.neighbor_value.unwrap_or(-2.4),
    )?;

    let spec = mech_potential(&dataset, &mech, &grid)?;
    let spec_adj = mech_potential(&dataset_adj, &mech, &grid)?;
    let mut solver = solver_from(config, &grid)?;
    if config.t_final.is_none() {
        solver = solver.with_t_final(7.0);
    }
    let rho0 = DensityField::uniform(&grid);
    let (traj, traj_p) = run_flow_pair(&rho0, &rho0, &spec, &spec_adj, &solver)?;
    let report = sensitivity_report(&spec, &spec_adj, &grid)?;
    let params = pair_bound_params(&report, &spec_adj, &grid, &traj, &traj_p)?;

    let eps_list = config.eps_list.clone().unwrap_or_else(|| vec![0.15]);
    let eps = *eps_list.first().ok_or_else(|| {
        Error::Config("certify needs at least one eps in eps_list".into())
    })?;
    let loss = mech_loss(&dataset, &grid)?;
    let floor = utility_floor(&loss, beta, 0.1)?;

    let mut cert = DpCertificate::new(eps)?;
    for (i, &t) in traj.times().iter().enumerate() {
        let rho = &traj.snapshots()[i];
        let rho_p = &traj_p.snapshots()[i];
        let kl_pair = crate::divergence::kl(rho, rho_p)?;
        cert.push_row(DpCertificateRow {
            t,
            eps_pure_a1: pure_dp_epsilon(t, &params, EnvelopeKind::A1)?,
            eps_pure_a1p: pure_dp_epsilon(t, &params, EnvelopeKind::A1P)?,
            eps_empirical: crate::divergence::sup_log_ratio(rho, rho_p)?,
            kl_pair,
            tv_pair: crate::divergence::tv(rho, rho_p)?,
            hs_sym_at_eps: hockey_stick_symmetric(rho, rho_p, eps)?,
            delta_at_eps: approx_dp_delta(eps, kl_pair)?,
            utility: empirical_utility(rho, &loss)?,
            utility_floor: floor.exact,
        });
    }
    cert.validate()?;

    let dir = outdir.join("certify");
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    emit(&dir, "certificate.csv", &cert.to_csv(), &mut files)?;
    emit(&dir, "dataset.csv", &dataset.to_csv(), &mut files)?;

    #[derive(Serialize)]
    struct CertifySummary {
        delta_pot: f64,
        delta_osc: f64,
        s_tar_exact: f64,
        utility_floor_exact: f64,
        utility_floor_bound: f64,
    }
    let mut summary_json = serde_json::to_string_pretty(&CertifySummary {
        delta_pot: report.delta_pot,
        delta_osc: report.delta_osc,
        s_tar_exact: report.s_tar_exact,
        utility_floor_exact: floor.exact,
        utility_floor_bound: floor.bound,
    })?;
    summary_json.push('\n');
    emit(&dir, "scalars.json", &summary_json, &mut files)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn dispatch(args: &[&str]) -> i32 {
        let argv = std::iter::once("shkflow".to_string())
            .chain(args.iter().map(|s| s.to_string()));
        parse_and_dispatch(argv)
    }

    fn read(path: &Path) -> String {
        fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
    }

    #[test]
    fn exp1a_writes_the_declared_files() {
        let tmp = TempDir::new().unwrap();
        let out = tmp.path().join("out");
        let code = dispatch(&[
            "exp1a",
            "--outdir",
            out.to_str().unwrap(),
            "--grid-n",
            "64",
            "--t-final",
            "0.5",
        ]);
        assert_eq!(code, 0);
        assert!(out.join("EXP1A/series.csv").is_file());
        assert!(out.join("EXP1A/scalars.json").is_file());
    }

    #[test]
    fn cfl_violation_exits_1_and_names_dt() {
        let tmp = TempDir::new().unwrap();
        let config_path = tmp.path().join("config.json");
        fs::write(
            &config_path,
            r#"{"grid_n": 64, "dt": 1.0, "potential": {"cos": [[1, -1.0]]}}"#,
        )
        .unwrap();
        let args = CommonArgs {
            config: Some(config_path),
            outdir: tmp.path().join("out"),
            ..Default::default()
        };
        let err = run(&Command::Solve(args)).unwrap_err();
        let message = err.to_string();
        assert!(message.contains("dt"), "{message}");
        assert!(message.contains("1.0"), "{message}");
        assert!(message.contains("cap"), "{message}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let tmp = TempDir::new().unwrap();
        let config_path = tmp.path().join("config.json");
        fs::write(&config_path, r#"{"grid_m": 64}"#).unwrap();
        let code = dispatch(&[
            "exp2",
            "--config",
            config_path.to_str().unwrap(),
            "--outdir",
            tmp.path().join("out").to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn unknown_set_key_is_rejected() {
        let mut config = FileConfig::default();
        assert!(config.apply_set("grid_n=128").is_ok());
        assert_eq!(config.grid_n, Some(128));
        let err = config.apply_set("grid_m=128").unwrap_err();
        assert!(err.to_string().contains("grid_m"));
        assert!(config.apply_set("grid_n").is_err());
        assert!(config.apply_set("dt=fast").is_err());
    }

    #[test]
    fn solve_single_flow_reports_monotone_kl() {
        let tmp = TempDir::new().unwrap();
        let config_path = tmp.path().join("config.json");
        fs::write(
            &config_path,
            r#"{"grid_n": 64, "t_final": 1.0, "potential": {"constant": 1.0, "cos": [[2, -1.0]]}}"#,
        )
        .unwrap();
        let out = tmp.path().join("out");
        let code = dispatch(&[
            "solve",
            "--config",
            config_path.to_str().unwrap(),
            "--outdir",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let text = read(&out.join("solve/diagnostics.csv"));
        let kls: Vec<f64> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect();
        assert!(kls.len() > 10);
        for w in kls.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "KL increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn solve_identical_pair_has_null_divergence_columns() {
        let tmp = TempDir::new().unwrap();
        let config_path = tmp.path().join("config.json");
        fs::write(
            &config_path,
            r#"{
                "grid_n": 64,
                "t_final": 0.5,
                "potential": {"constant": 1.0, "cos": [[2, -1.0]]},
                "potential_prime": {"constant": 1.0, "cos": [[2, -1.0]]}
            }"#,
        )
        .unwrap();
        let out = tmp.path().join("out");
        assert_eq!(
            dispatch(&[
                "solve",
                "--config",
                config_path.to_str().unwrap(),
                "--outdir",
                out.to_str().unwrap(),
            ]),
            0
        );
        let text = read(&out.join("solve/pair.csv"));
        for line in text.lines().skip(1) {
            let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
            // kl, tv, sup_log_ratio
            assert!(cells[1].abs() <= 1e-10);
            assert!(cells[2].abs() <= 1e-10);
            assert!(cells[3].abs() <= 1e-10);
        }
    }

    #[test]
    fn tabulated_potential_round_trips_bitwise() {
        let tmp = TempDir::new().unwrap();
        let n = 64;
        let grid = build_grid(n).unwrap();
        let values: Vec<f64> = grid
            .nodes()
            .iter()
            .map(|&x| 1.3 - 1.1 * (2.0 * x).cos() + 0.2 * x.sin())
            .collect();
        let config = serde_json::json!({
            "grid_n": n,
            "t_final": 0.4,
            "potential": {"tabulated": values},
        });
        let config_a = tmp.path().join("a.json");
        fs::write(&config_a, serde_json::to_string(&config).unwrap()).unwrap();
        let out_a = tmp.path().join("out_a");
        assert_eq!(
            dispatch(&[
                "solve",
                "--config",
                config_a.to_str().unwrap(),
                "--outdir",
                out_a.to_str().unwrap(),
            ]),
            0
        );

        // Re-ingest the emitted potential and rerun.
        let emitted: serde_json::Value =
            serde_json::from_str(&read(&out_a.join("solve/potential.json"))).unwrap();
        let config_b = tmp.path().join("b.json");
        fs::write(
            &config_b,
            serde_json::to_string(&serde_json::json!({
                "grid_n": n,
                "t_final": 0.4,
                "potential": emitted,
            }))
            .unwrap(),
        )
        .unwrap();
        let out_b = tmp.path().join("out_b");
        assert_eq!(
            dispatch(&[
                "solve",
                "--config",
                config_b.to_str().unwrap(),
                "--outdir",
                out_b.to_str().unwrap(),
            ]),
            0
        );
        assert_eq!(
            fs::read(out_a.join("solve/diagnostics.csv")).unwrap(),
            fs::read(out_b.join("solve/diagnostics.csv")).unwrap()
        );
        assert_eq!(
            fs::read(out_a.join("solve/potential.json")).unwrap(),
            fs::read(out_b.join("solve/potential.json")).unwrap()
        );
    }

    #[test]
    fn bounds_subcommand_tabulates_dominating_columns() {
        let tmp = TempDir::new().unwrap();
        let config_path = tmp.path().join("config.json");
        fs::write(
            &config_path,
            r#"{"bounds": {
                "delta_pot": 0.8, "delta_osc": 1.2, "delta_gradpot": 0.6,
                "r0": 2.0, "r0_prime": 2.4, "lambda_gibbs": 0.084,
                "t_max": 4.0, "t_points": 81
            }}"#,
        )
        .unwrap();
        let out = tmp.path().join("out");
        assert_eq!(
            dispatch(&[
                "bounds",
                "--config",
                config_path.to_str().unwrap(),
                "--outdir",
                out.to_str().unwrap(),
            ]),
            0
        );
        let text = read(&out.join("bounds/bounds.csv"));
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,logratio_a1_bound,logratio_a1p_bound,logratio_exact_floor_bound,\
             kl_linear_bound,kl_lsi_closed_bound,kl_lsi_gronwall_bound"
        );
        let rows: Vec<Vec<f64>> = lines
            .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 81);
        assert_eq!(rows[0][0], 0.0);
        assert_eq!(rows[80][0], 4.0);
        for row in &rows {
            assert!(row[2] <= row[1] + 1e-12, "a1p exceeds a1");
            assert!(row[6] <= row[5] + 1e-8, "gronwall exceeds closed form");
        }
        assert!(out.join("bounds/params.json").is_file());
        // s_tar defaulted to 2*delta_pot.
        let params: serde_json::Value =
            serde_json::from_str(&read(&out.join("bounds/params.json"))).unwrap();
        assert_eq!(params["s_tar"].as_f64().unwrap(), 1.6);
        assert_eq!(params["s_tar_mode"].as_str().unwrap(), "TWO_DELTA_POT");
    }

    #[test]
    fn bounds_subcommand_requires_its_section() {
        let args = CommonArgs {
            outdir: TempDir::new().unwrap().path().join("out"),
            ..Default::default()
        };
        let err = run(&Command::Bounds(args)).unwrap_err();
        assert!(err.to_string().contains("bounds"));
    }

    #[test]
    fn certify_runs_on_a_user_dataset_file() {
        let tmp = TempDir::new().unwrap();
        let dataset_path = tmp.path().join("points.csv");
        let points: Vec<String> = (0..24).map(|i| format!("{}", 0.2 + 0.01 * i as f64)).collect();
        fs::write(&dataset_path, points.join("\n")).unwrap();
        let config_path = tmp.path().join("config.json");
        fs::write(
            &config_path,
            serde_json::to_string(&serde_json::json!({
                "grid_n": 64,
                "t_final": 1.0,
                "beta": 4.0,
                "dataset": {"path": dataset_path, "neighbor_value": -2.0}
            }))
            .unwrap(),
        )
        .unwrap();
        let out = tmp.path().join("out");
        assert_eq!(
            dispatch(&[
                "certify",
                "--config",
                config_path.to_str().unwrap(),
                "--outdir",
                out.to_str().unwrap(),
            ]),
            0
        );
        let cert = read(&out.join("certify/certificate.csv"));
        assert!(cert.starts_with("t,eps_pure_a1,"));
        assert!(cert.lines().count() > 10);
        let dataset = read(&out.join("certify/dataset.csv"));
        assert_eq!(dataset.lines().count(), 24);
        let scalars: serde_json::Value =
            serde_json::from_str(&read(&out.join("certify/scalars.json"))).unwrap();
        // Replacing one of 24 records moves the mechanism potential by at
        // most 2*beta/n.
        let delta_pot = scalars["delta_pot"].as_f64().unwrap();
        assert!(delta_pot <= 2.0 * 4.0 / 24.0 + 1e-9, "{delta_pot}");
    }

    #[test]
    fn help_exits_zero_without_a_summary() {
        assert_eq!(dispatch(&["--help"]), 0);
    }

    #[test]
    fn missing_subcommand_is_a_usage_error() {
        assert_ne!(dispatch(&[]), 0);
    }
}
