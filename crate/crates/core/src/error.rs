use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("{active} active sites exceed the enumeration cap of {cap}")]
    TooManySites { active: usize, cap: usize },

    #[error("inconsistent reduced spec: {0}")]
    InconsistentSpec(String),

    #[error("invalid site index: {0}")]
    InvalidIndex(String),

    #[error("argument outside the domain: {0}")]
    Domain(String),

    #[error("{what} did not converge after {iterations} iterations (last defect {defect:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        defect: f64,
    },

    #[error("operator is numerically singular (condition estimate {condition:e})")]
    Singular { condition: f64 },

    #[error("self-consistent equation left the real branch at e = {e}")]
    LeftRealBranch { e: f64 },

    #[error("sample {sample} at n = {n} (seed {seed:#018x}) failed: {source}")]
    SampleFailed {
        n: usize,
        sample: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for failures of a numerical procedure, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonConvergence { .. } | Error::Singular { .. } | Error::LeftRealBranch { .. } => {
                true
            }
            Error::SampleFailed { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    /// Seed of the failing disorder sample, when the error came out of an ensemble run.
    pub fn failing_seed(&self) -> Option<u64> {
        match self {
            Error::SampleFailed { seed, .. } => Some(*seed),
            _ => None,
        }
    }
}
