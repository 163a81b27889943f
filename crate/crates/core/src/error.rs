//! Error type shared by the pipeline modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("bad CSV header in {path}: expected `{expected}`, found `{found}`")]
    BadHeader {
        path: String,
        expected: String,
        found: String,
    },

    #[error("malformed record in {path} line {line}: {message}")]
    BadRecord {
        path: String,
        line: u64,
        message: String,
    },

    #[error("latitude {0} out of projectable range")]
    LatitudeOutOfRange(f64),

    #[error("UTM zone {0} outside 1..=60")]
    ZoneOutOfRange(i32),

    #[error("non-positive time step between consecutive points of user {user_id} (dt = {dt} s)")]
    NonPositiveTimeStep { user_id: String, dt: f64 },

    #[error("empty sample set")]
    EmptySamples,

    #[error("neighbor rank {k} exceeds sample count {n}")]
    NeighborRankTooLarge { k: usize, n: usize },

    #[error("need at least {needed} trajectories, found {found}")]
    TooFewTrajectories { needed: usize, found: usize },

    #[error("train and test sets share journey id {0}")]
    OverlappingJourneys(u64),

    #[error("degenerate rectangle or grid: {0}")]
    DegenerateGrid(String),

    #[error("location ({x1}, {x2}) outside map bounds, {distance:.1} m from the box")]
    OutsideMap { x1: f64, x2: f64, distance: f64 },

    #[error("graph node {0} cannot reach the campus")]
    UnreachableNode(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("design matrix is rank deficient; collinear columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("conditional treatment density underflows to zero for student {student_id}")]
    ZeroDensity { student_id: String },

    #[error(
        "entropy-balancing solver did not converge in {iterations} iterations \
         (max |residual| = {max_residual:.3e}); residuals: {}",
        residuals
            .iter()
            .map(|(name, r)| format!("{name}={r:.2e}"))
            .collect::<Vec<_>>()
            .join(", ")
    )]
    EbNoConvergence {
        iterations: usize,
        max_residual: f64,
        residuals: Vec<(String, f64)>,
    },

    #[error("model fit failed: {0}")]
    FitFailed(String),

    #[error("quasi-complete separation suspected: |{column}| = {value:.1} on the logit scale")]
    Separation { column: String, value: f64 },

    #[error("{0}")]
    InvalidInput(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
