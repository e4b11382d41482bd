use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation{}", location(*.layer, *.step))]
    NonFinite {
        layer: Option<usize>,
        step: Option<usize>,
    },

    #[error("unstable state transition: {0}")]
    UnstableTransition(String),

    #[error("quadratic oracle guard: sequence length {len} exceeds {guard}")]
    QuadraticGuard { len: usize, guard: usize },

    #[error("decode mode processes exactly one token per step, got {0}")]
    DecodeLength(usize),

    #[error("no activity recorded")]
    NoActivity,

    #[error("activity layer {layer} has {got} states, expected {expected}")]
    ActivityShape {
        layer: usize,
        expected: usize,
        got: usize,
    },

    #[error("pruning ratio {0} outside [0, 1)")]
    RatioOutOfRange(f64),

    #[error("ratio too aggressive for N: ratio {ratio} keeps no state out of {n}")]
    RatioTooAggressive { ratio: f64, n: usize },

    #[error("duplicate state index {0}")]
    DuplicateIndex(usize),

    #[error("plan does not match model: {0}")]
    PlanMismatch(String),

    #[error("missing scores for layers {0:?}")]
    MissingLayers(Vec<usize>),

    #[error("per-head pruning requires a Mamba-2 model")]
    HeadModeUnsupported,

    #[error("marginal drop needs a uniform grid with spacing {delta}: {detail}")]
    NonUniformGrid { delta: f64, detail: String },

    #[error("benchmark failed: {0}")]
    Benchmark(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn location(layer: Option<usize>, step: Option<usize>) -> String {
    match (layer, step) {
        (Some(l), Some(t)) => format!(" at layer {l}, step {t}"),
        (Some(l), None) => format!(" in layer {l}"),
        (None, Some(t)) => format!(" at step {t}"),
        (None, None) => String::new(),
    }
}

impl Error {
    /// Stable identifier printed by the CLI next to every message.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::Shape(_) => "shape_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::UnstableTransition(_) => "unstable_transition",
            Error::QuadraticGuard { .. } => "quadratic_guard",
            Error::DecodeLength(_) => "decode_length",
            Error::NoActivity => "no_activity",
            Error::ActivityShape { .. } => "activity_shape",
            Error::RatioOutOfRange(_) => "ratio_out_of_range",
            Error::RatioTooAggressive { .. } => "ratio_too_aggressive",
            Error::DuplicateIndex(_) => "duplicate_index",
            Error::PlanMismatch(_) => "plan_mismatch",
            Error::MissingLayers(_) => "missing_layers",
            Error::HeadModeUnsupported => "head_mode_unsupported",
            Error::NonUniformGrid { .. } => "non_uniform_grid",
            Error::Benchmark(_) => "benchmark_failed",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(what: &'static str, detail: impl ToString) -> Self {
        Error::Format {
            what,
            detail: detail.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a layer index to a location-less non-finite error.
    pub(crate) fn in_layer(self, layer: usize) -> Self {
        match self {
            Error::NonFinite { layer: None, step } => Error::NonFinite {
                layer: Some(layer),
                step,
            },
            other => other,
        }
    }
}
