use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rate matrix is not irreducible")]
    Reducible,

    #[error("invalid rate matrix: {0}")]
    InvalidRateMatrix(String),

    #[error("endpoint event has probability {prob:e} (start {start}, end {end})")]
    NullEvent { start: usize, end: usize, prob: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("trajectory diverged at t = {time}")]
    Divergence { time: f64 },

    #[error("non-finite emission density at n = {index}, state {state}")]
    NonFiniteEmission { index: usize, state: usize },

    #[error("state {state} has zero expected dwell time (iteration {iteration})")]
    DegenerateState { state: usize, iteration: usize },

    #[error("objective decreased by {decrease:e} at iteration {iteration}")]
    ObjectiveDecrease { iteration: usize, decrease: f64 },

    #[error("argument error: {0}")]
    Argument(String),

    #[error("selection failed: {0}")]
    Selection(String),

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures that stem from the numerics rather than from the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Reducible
                | Error::NullEvent { .. }
                | Error::Divergence { .. }
                | Error::NonFiniteEmission { .. }
                | Error::DegenerateState { .. }
                | Error::ObjectiveDecrease { .. }
        )
    }
}
