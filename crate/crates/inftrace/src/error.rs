use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
    #[error("gradient target must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("node {node} ({op}) is marked non-differentiable but lies on the backward path")]
    NonDifferentiable { node: usize, op: &'static str },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("example has no tokens")]
    EmptyExample,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{path}:{line}: {detail}")]
    CorpusParse {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("duplicate lexicon headword `{0}`")]
    DuplicateHeadword(String),
    #[error("checkpoint {path}: bad magic at byte offset 0")]
    BadMagic { path: String },
    #[error("checkpoint {path}: malformed at byte offset {offset}: {detail}")]
    CheckpointFormat {
        path: String,
        offset: usize,
        detail: String,
    },
    #[error("Hessian dimension {p} exceeds the dense cap of {cap}")]
    HessianCap { p: usize, cap: usize },
    #[error(
        "damped Hessian is numerically singular (pivot {pivot:.3e} at column {column}); \
         increase the damping"
    )]
    SingularHessian { column: usize, pivot: f64 },
    #[error(
        "stochastic inverse-Hessian recursion diverged at step {step} \
         (iterate norm {norm:.3e}); decrease the scale"
    )]
    IhvpDiverged { step: usize, norm: f64 },
    #[error("labels differ between an example and its perturbation ({left} vs {right})")]
    PerturbationLabelMismatch { left: u32, right: u32 },
    #[error("no lexicon-covered token position in example")]
    NoCoveredPosition,
    #[error("lexicon entry for token `{0}` has no usable substitutes")]
    EmptyLexiconEntry(String),
    #[error("per-test budget {k} exhausted the pool of perturbable training examples")]
    BudgetExhausted { k: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}
