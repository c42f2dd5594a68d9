use thiserror::Error;

/// Crate-wide error type. Configuration and validation problems exit with
/// code 1 from the CLI; runtime solver failures exit with code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid size must be an even integer >= 8, got {n}")]
    GridSize { n: usize },

    #[error("grid mismatch: field on {got} cells used with a {expected}-cell grid")]
    GridMismatch { expected: usize, got: usize },

    #[error("field length {got} does not match grid size {expected}")]
    FieldLength { expected: usize, got: usize },

    #[error("{what} contains a non-finite value at cell {cell}")]
    NonFinite { what: &'static str, cell: usize },

    #[error("harmonic {k} exceeds the resolvable limit n/4 = {limit} on an {n}-cell grid")]
    Harmonic { k: usize, limit: usize, n: usize },

    #[error("harmonic index 0 is not allowed; put constants in the `constant` field")]
    ZeroHarmonic,

    #[error("tabulated potential has {got} samples but the grid has {expected} cells")]
    TabulatedLength { expected: usize, got: usize },

    #[error("density mass {mass:.17} deviates from 1 by {drift:.3e} (tolerance 1e-10)")]
    BadMass { mass: f64, drift: f64 },

    #[error("density must be strictly positive; cell {cell} holds {value:.3e}")]
    NonPositiveDensity { cell: usize, value: f64 },

    #[error("dt = {dt:.6e} exceeds the stability cap 0.2*dx^2 = {limit:.6e}")]
    CflViolation { dt: f64, limit: f64 },

    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },

    #[error("{name} must be nonnegative, got {value}")]
    Negative { name: &'static str, value: f64 },

    #[error("Renyi order must be > 1, got {alpha}")]
    BadRenyiOrder { alpha: f64 },

    #[error("c must lie strictly inside (0, 1), got {c}")]
    BadYoungParameter { c: f64 },

    #[error("b = {b} must dominate max(r0, r0_prime) = {need}")]
    BTooSmall { b: f64, need: f64 },

    #[error("decay rate kappa = {kappa:.6e} must be positive")]
    BadKappa { kappa: f64 },

    #[error("dataset must contain at least one observation")]
    EmptyDataset,

    #[error("observation index {index} out of range for dataset of size {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("sublevel set {{f <= min f + {alpha}}} is empty; increase alpha above 0")]
    EmptySublevel { alpha: f64 },

    #[error("utility bound precondition failed: {name} = {value} must satisfy {requirement}")]
    UtilityPrecondition {
        name: &'static str,
        value: f64,
        requirement: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("solver: mass drifted to {mass:.17} (|mass - 1| = {drift:.3e} > 1e-10) at t = {t:.6}")]
    MassDrift { t: f64, mass: f64, drift: f64 },

    #[error("solver: density fell to {value:.6e} (floor {floor:.1e}) at t = {t:.6}, cell {cell}")]
    PositivityLost {
        t: f64,
        cell: usize,
        value: f64,
        floor: f64,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MassDrift { .. } | Error::PositivityLost { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
