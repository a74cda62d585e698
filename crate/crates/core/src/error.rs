use thiserror::Error;

/// Direction in which a trajectory left the admissible region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EscapeDirection {
    Up,
    Down,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("grid error: {0}")]
    Grid(String),
    #[error("trajectory escaped {direction:?} at t = {time}")]
    Escape { time: f64, direction: EscapeDirection },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("ill-conditioned system (condition estimate {cond:e})")]
    IllConditioned { cond: f64 },
    #[error("iteration diverged after {iterations} steps (last ratio {last_ratio})")]
    Diverged { iterations: usize, last_ratio: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) | Error::Io(_) => 1,
            Error::Domain(_) | Error::Grid(_) => 2,
            Error::Escape { .. }
            | Error::Numerical(_)
            | Error::IllConditioned { .. }
            | Error::Diverged { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
