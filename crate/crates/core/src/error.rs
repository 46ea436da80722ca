use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Array or vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A NaN or infinity reached a place that requires finite numbers.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// The training loss stopped being finite.
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    /// An iterative solver hit its sweep cap before reaching tolerance.
    #[error("no convergence within {0} sweeps")]
    NoConvergence(usize),

    /// A fitted-iteration step failed; carries the outer iteration index.
    #[error("fit failed at iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
