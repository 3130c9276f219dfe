use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Why a local smoothing window could not be used.
#[derive(Debug, Clone, PartialEq)]
pub enum WindowFailureKind {
    /// Fewer than two distinct design points carry positive kernel weight.
    TooFewPoints { distinct: usize },
    /// The boundary-corrected density estimate fell to or below the floor.
    DensityFloor { density: f64 },
    /// A residual needed for the variance estimate could not be formed because
    /// the local fit at this sample point failed.
    FitAtSample { at: f64, distinct: usize },
}

/// A single degenerate `(series, x, h)` evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowFailure {
    pub series: Option<usize>,
    pub x: f64,
    pub h: f64,
    pub kind: WindowFailureKind,
}

impl WindowFailure {
    pub(crate) fn new(x: f64, h: f64, kind: WindowFailureKind) -> Self {
        Self {
            series: None,
            x,
            h,
            kind,
        }
    }

    pub(crate) fn for_series(mut self, i: usize) -> Self {
        self.series = Some(i);
        self
    }
}

impl fmt::Display for WindowFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.series {
            Some(i) => write!(f, "(i={i}, x={}, h={})", self.x, self.h)?,
            None => write!(f, "(x={}, h={})", self.x, self.h)?,
        }
        match &self.kind {
            WindowFailureKind::TooFewPoints { distinct } => {
                write!(f, ": {distinct} distinct point(s) in the bandwidth window")
            }
            WindowFailureKind::DensityFloor { density } => {
                write!(f, ": density estimate {density:.3e} below floor")
            }
            WindowFailureKind::FitAtSample { at, distinct } => write!(
                f,
                ": local fit at sample point X={at} has {distinct} distinct point(s) in its window"
            ),
        }
    }
}

fn summarize(failures: &[WindowFailure]) -> String {
    const SHOWN: usize = 5;
    let mut s = failures
        .iter()
        .take(SHOWN)
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ");
    if failures.len() > SHOWN {
        s.push_str(&format!("; and {} more", failures.len() - SHOWN));
    }
    s
}

/// Coarse classification used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Input,
    Numerical,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("panel has no records")]
    EmptyPanel,
    #[error("unbalanced panel: {0}")]
    UnbalancedPanel(String),
    #[error("series {series_id:?}: x = {x} at t = {t} lies outside [0, 1]")]
    OutOfSupport { series_id: String, t: u64, x: f64 },
    #[error("series {series_id:?}: non-finite value at t = {t}")]
    NonFiniteValue { series_id: String, t: u64 },
    #[error("need at least 2 series, got {n}")]
    TooFewSeries { n: usize },
    #[error("series {series_id:?} has more than one observation at t = {t}")]
    DuplicateObservation { series_id: String, t: u64 },
    #[error("bandwidth h = {h} is outside (0, 0.5]")]
    BadBandwidth { h: f64 },
    #[error("location x = {x} lies outside [0, 1]")]
    BadLocation { x: f64 },
    #[error("location-scale grid is empty")]
    EmptyGrid,
    #[error(
        "insufficient local data at {} point(s): {}; consider raising h_min",
        failures.len(),
        summarize(failures)
    )]
    InsufficientLocalData { failures: Vec<WindowFailure> },
    #[error("degenerate density {failure}")]
    DegenerateDensity { failure: WindowFailure },
    #[error("variance normalization is zero for pair ({i}, {j}) at x = {x}, h = {h} while the fits differ")]
    ZeroVariance { i: usize, j: usize, x: f64, h: f64 },
    #[error("every grid point is degenerate for at least one series")]
    AllPointsDegenerate,
    #[error("non-finite distance between {i} and {j}")]
    NonFiniteDistance { i: usize, j: usize },
    #[error("invalid distance matrix: {0}")]
    InvalidMatrix(String),
    #[error("quadrature failed: {0}")]
    QuadratureFailure(String),
    #[error("factorization failed: {0}")]
    FactorizationFailure(String),
    #[error("level alpha = {alpha} must lie in (0, 1)")]
    BadLevel { alpha: f64 },
    #[error("replication count must be at least 1")]
    BadReps,
    #[error("group index {k} is not in 1..=5")]
    BadGroup { k: usize },
    #[error("partition has {found} clusters, expected {expected}")]
    ClusterCountMismatch { expected: usize, found: usize },
    #[error("invalid simulation design: {0}")]
    BadDesign(String),
    #[error("malformed dendrogram: {0}")]
    MalformedDendrogram(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            InsufficientLocalData { .. }
            | DegenerateDensity { .. }
            | ZeroVariance { .. }
            | AllPointsDegenerate
            | NonFiniteDistance { .. } => ErrorCategory::Numerical,
            QuadratureFailure(_) | FactorizationFailure(_) | Io(_) => ErrorCategory::Internal,
            _ => ErrorCategory::Input,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
