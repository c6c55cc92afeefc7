use thiserror::Error;

pub type Result<T> = std::result::Result<T, HalError>;

#[derive(Debug, Error)]
pub enum HalError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("unsupported spline order {0} (supported range is 0..=3)")]
    UnsupportedOrder(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("coordinate descent did not converge after {sweeps} sweeps (last max change {last_change:.3e}); trace tail: {trace:?}")]
    NonConvergence {
        sweeps: usize,
        last_change: f64,
        trace: Vec<f64>,
    },

    #[error("lambda bisection failed after {steps} steps (target C = {target}, last realized C = {realized})")]
    Bisection {
        steps: usize,
        target: f64,
        realized: f64,
    },

    #[error("selector error: {0}")]
    Selector(String),

    #[error("positivity violation: {count} rows with propensity outside [{gmin}, {gmax}] exceed the truncation budget; first offending rows: {rows:?}")]
    Positivity {
        count: usize,
        gmin: f64,
        gmax: f64,
        rows: Vec<usize>,
    },

    #[error("degenerate treatment: {0}")]
    DegenerateTreatment(String),

    #[error("degenerate influence curve: {0}")]
    DegenerateEic(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
