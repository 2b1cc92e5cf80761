use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TraceError {
    #[error("malformed trace line {line}")]
    MalformedLine { line: usize },
    #[error("time decreases at line {line}")]
    NonMonotonicTime { line: usize },
    #[error("trace has no events")]
    EmptyTrace,
    #[error("event {index} has invalid time {time}")]
    BadTime { index: usize, time: f64 },
    #[error("site index {index} out of range for {n_sites} monitored sites")]
    LabelOutOfRange { index: usize, n_sites: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("no traces to merge")]
    EmptyInput,
    #[error("{requested} distinct sites requested but only {available} available")]
    InsufficientSites { requested: usize, available: usize },
    #[error("invalid mix config: {0}")]
    BadMixConfig(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DefenseError {
    #[error("padding fraction {0} outside [0, 0.2]")]
    BadFraction(f64),
    #[error("invalid defense config: {0}")]
    BadConfig(String),
    #[error("histogram masses sum to {0}, expected 1")]
    BadHistogram(f64),
    #[error("cannot defend an empty trace")]
    EmptyTrace,
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("rate {0} outside the allowed range")]
    BadRate(f64),
    #[error("{0}")]
    Invalid(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        TensorError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("threshold {0} outside (0, 1)")]
    BadThreshold(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("k = {k} outside 1..={n_labels}")]
    BadK { k: usize, n_labels: usize },
    #[error("label {0} has only one class among the records")]
    DegenerateLabel(usize),
    #[error("threshold {0} outside (0, 1)")]
    BadThreshold(f64),
    #[error("no records to evaluate")]
    EmptyInput,
    #[error("record lengths differ: y has {y}, prediction has {y_hat}")]
    LengthMismatch { y: usize, y_hat: usize },
}

/// Pipeline stage, used to tag errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Synth,
    Defend,
    Aggregate,
    Train,
    Eval,
    Report,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Synth => "synth",
            Stage::Defend => "defend",
            Stage::Aggregate => "aggregate",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Report => "report",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("[config] {0}")]
    Config(String),
    #[error("[{stage}] data error: {message}")]
    Data { stage: Stage, message: String },
    #[error("[{stage}] training error: {message}")]
    Training { stage: Stage, message: String },
}

impl ExperimentError {
    pub fn data(stage: Stage, err: impl std::fmt::Display) -> Self {
        ExperimentError::Data {
            stage,
            message: err.to_string(),
        }
    }

    pub fn training(stage: Stage, err: impl std::fmt::Display) -> Self {
        ExperimentError::Training {
            stage,
            message: err.to_string(),
        }
    }

    /// Process exit code: 2 config, 3 data, 4 training.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Data { .. } => 3,
            ExperimentError::Training { .. } => 4,
        }
    }
}
