//! Pipeline driver behind the `commute` binary. Commands are plain
//! functions over a [`config::RunConfig`] so integration tests can call
//! them without spawning processes.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod svg;

use thiserror::Error;

/// Exit-code taxonomy: configuration problems (2), data problems (3),
/// solver failures (4).
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("solver error: {0}")]
    Solver(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Solver(_) => 4,
        }
    }
}

impl From<commute_core::Error> for CliError {
    fn from(e: commute_core::Error) -> Self {
        use commute_core::Error as E;
        match e {
            E::InvalidConfig(_) | E::ZoneOutOfRange(_) | E::DegenerateGrid(_) => {
                CliError::Config(e.to_string())
            }
            E::EbNoConvergence { .. }
            | E::FitFailed(_)
            | E::RankDeficient { .. }
            | E::Separation { .. }
            | E::ZeroDensity { .. } => CliError::Solver(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// Install the rayon thread pool once; `0` keeps the default size.
pub fn init_threads(threads: usize) {
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}
