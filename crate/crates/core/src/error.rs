use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("matrix must have at least one row and one column, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("data length {got} does not match shape (expected {expected})")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("row {0} has zero norm")]
    ZeroNormRow(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("mask has no set pixels")]
    EmptyMask,
    #[error("both masks are empty")]
    BothEmpty,
    #[error("row label count {labels} does not match row count {rows}")]
    LabelCount { rows: usize, labels: usize },

    #[error("channel {0} is listed more than once")]
    DuplicateChannel(usize),
    #[error("at least two classes are required, got {0}")]
    TooFewClasses(usize),
    #[error("lambda must lie in [0, 1], got {0}")]
    BadLambda(f64),
    #[error("k = {k} is outside 1..={dim}")]
    KOutOfRange { k: usize, dim: usize },
    #[error("template list is empty")]
    EmptyTemplateList,
    #[error("class name count {names} does not match class count {classes}")]
    ClassNameCount { classes: usize, names: usize },

    #[error("trainable channel count {count} must lie strictly between 0 and {dim}")]
    BadCount { count: usize, dim: usize },
    #[error("channel {0} is frozen")]
    FrozenChannel(usize),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("class label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("class {class}: have {have} instances, need {need}")]
    InsufficientInstances { class: usize, have: usize, need: usize },
    #[error("unseen class {0} has no pseudo samples")]
    MissingUnseenClass(usize),
    #[error("class {0} appears more than once")]
    DuplicateClass(usize),
    #[error("cache bank is empty")]
    EmptyBank,
    #[error("class count mismatch: classifier has {classifier}, bank has {bank}")]
    ClassCountMismatch { classifier: usize, bank: usize },
    #[error("cache size K must be at least 1")]
    ZeroCacheSize,

    #[error("not a probability vector: {0}")]
    NotAProbabilityVector(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("{name} must lie in [0, 1], got {value}")]
    BadBeta { name: &'static str, value: f64 },
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),

    #[error("no ground truth for the evaluated classes")]
    EmptySplit,
    #[error("unknown dataset '{0}'")]
    UnknownDataset(String),
    #[error("split does not match the annotation set: {0}")]
    SplitMismatch(String),
    #[error("seen and unseen sets overlap on '{0}'")]
    OverlappingSplit(String),
    #[error("invalid annotation set: {0}")]
    BadAnnotations(String),

    #[error("bad synthetic config: {0}")]
    BadConfig(String),
    #[error("cannot place {instances} instances without overlap in a {height}x{width} image")]
    DoesNotFit { instances: usize, height: usize, width: usize },
}
