use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("unsupported block count {0}; rosters exist for 1, 3, 4 and 8 blocks")]
    UnsupportedRoster(usize),
    #[error("could not place scene after {attempts} rejection attempts (over-dense configuration)")]
    PlacementFailed { attempts: usize },
    #[error("target block {target} out of range for {n_blocks} blocks")]
    BadTarget { target: usize, n_blocks: usize },
    #[error("resolution mismatch: expected {expected:?}, got {got:?}")]
    Resolution { expected: (usize, usize), got: (usize, usize) },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("upstream representation changed during downstream training")]
    FrozenViolated,
    #[error("expert reached only {got} of {wanted} successful episodes in {attempts} attempts")]
    ExpertQuota { wanted: usize, got: usize, attempts: usize },
}

pub type Result<T> = core::result::Result<T, Error>;
