use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("cross_entropy: class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },

    #[error("backward already ran on this tape; call reset() first")]
    BackwardTwice,

    #[error("backward: {0}")]
    Backward(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("gate requires a predictor but none is configured")]
    MissingPredictor,

    #[error("precision signal entry {index} is negative ({value})")]
    NegativeSignal { index: usize, value: f64 },

    #[error("coverage unachievable: p_correct = {0}")]
    CoverageUnachievable(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token index {0} out of vocabulary")]
    Token(usize),

    #[error("degenerate specialization: expert gate weights tie ({0:.3e} apart)")]
    DegenerateSpecialization(f64),

    #[error("metric: {0}")]
    Metric(String),
}
