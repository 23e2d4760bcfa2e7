use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("autodiff: {0}")]
    Graph(String),

    #[error("bad switch string {input:?}: {reason} (expected e.g. \"[0.5,0.25,0.25]x\" or \"[4x0.25]x\")")]
    SwitchSyntax { input: String, reason: String },

    #[error("switch {switch} rounds layer {layer} ({name}) to zero channels")]
    EmptyLayer {
        switch: String,
        layer: usize,
        name: String,
    },

    #[error("switch {switch} has total width {total} which exceeds the model width {available}")]
    SwitchTooWide {
        switch: String,
        total: f64,
        available: f64,
    },

    #[error("missing normalization stats for switch {switch}, sub-model {position}, layer {layer}")]
    MissingStats {
        switch: String,
        position: usize,
        layer: usize,
    },

    #[error("non-finite loss for switch {switch}: {detail}")]
    NonFiniteLoss { switch: String, detail: String },

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("wire protocol: {0}")]
    Wire(String),

    #[error("device {device}: {message}")]
    Device { device: String, message: String },

    #[error("device {device} replied with error {code}: {message}")]
    Remote {
        device: String,
        code: String,
        message: String,
    },

    #[error("planner: {0}")]
    Plan(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
