use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor data length does not match its shape, or a zero dimension.
    InvalidShape { shape: alloc::vec::Vec<usize>, len: usize },
    /// Operand shapes rejected by an op; names the offending node.
    ShapeMismatch { node: usize, op: &'static str, detail: String },
    /// NaN or infinity seen at a graph boundary or in a computed value.
    NonFinite { context: String },
    /// A parameter placeholder had no binding.
    UnboundParameter(String),
    /// Backward pass requested before the graph was evaluated.
    NotEvaluated,
    /// Backward pass requested from a node that is not a scalar.
    NonScalarLoss { node: usize, shape: alloc::vec::Vec<usize> },
    InvalidConfig(String),
    /// Prompt plus response does not fit the positional table.
    SequenceTooLong { len: usize, max: usize },
    EmptyResponse,
    MissingEos,
    TokenOutOfRange { token: u32, vocab: usize },
    MarginUnreachable { attempts: usize },
    EmptyInput(&'static str),
    /// Advantage standardization needs at least two trajectories.
    SingleTrajectory,
    MissingReference,
    Checkpoint(String),
    Scorer(String),
    /// Training produced a non-finite loss.
    Diverged { step: usize, loss: f64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidShape { shape, len } => {
                write!(f, "invalid tensor: shape {shape:?} does not hold {len} values")
            }
            Error::ShapeMismatch { node, op, detail } => {
                write!(f, "shape mismatch at node {node} ({op}): {detail}")
            }
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::UnboundParameter(name) => write!(f, "parameter `{name}` is not bound"),
            Error::NotEvaluated => write!(f, "graph has not been evaluated"),
            Error::NonScalarLoss { node, shape } => {
                write!(f, "loss node {node} is not scalar (shape {shape:?})")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::SequenceTooLong { len, max } => {
                write!(f, "sequence length {len} exceeds max_seq_len {max}")
            }
            Error::EmptyResponse => write!(f, "response is empty"),
            Error::MissingEos => write!(f, "response does not end with EOS"),
            Error::TokenOutOfRange { token, vocab } => {
                write!(f, "token id {token} outside vocabulary of {vocab}")
            }
            Error::MarginUnreachable { attempts } => {
                write!(f, "gold margin not reached after {attempts} resamples")
            }
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::SingleTrajectory => {
                write!(f, "advantage standardization needs at least two trajectories")
            }
            Error::MissingReference => write!(f, "reference response required for PPO targets"),
            Error::Checkpoint(msg) => write!(f, "checkpoint: {msg}"),
            Error::Scorer(msg) => write!(f, "scorer failed: {msg}"),
            Error::Diverged { step, loss } => write!(f, "non-finite loss {loss} at step {step}"),
        }
    }
}

impl core::error::Error for Error {}
