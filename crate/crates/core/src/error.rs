use alloc::string::String;
use core::fmt;

/// Errors raised by the numeric core, the data layer and the training driver.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A parameter selected for update has no gradient from the current step.
    MissingGradient(String),
    /// Two evaluations of the same function at the same point disagreed.
    NonDeterministic { first: f64, second: f64 },
    /// Caller supplied an argument outside the operation's domain.
    InvalidInput(String),
    /// An instance or model does not conform to the field schema.
    Schema(String),
    /// Training loss stopped being finite.
    Divergence { step: u64, loss: f64 },
    /// A statistic is undefined for the given input (e.g. single-class AUC).
    Undefined(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => write!(
                f,
                "dimension error in {op}: {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::MissingGradient(name) => {
                write!(f, "parameter `{name}` is selected for update but has no gradient")
            }
            Error::NonDeterministic { first, second } => write!(
                f,
                "model function is not deterministic: baseline evaluated to {first:e} and then {second:e}"
            ),
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::Schema(msg) => write!(f, "schema violation: {msg}"),
            Error::Divergence { step, loss } => {
                write!(f, "training diverged at step {step}: loss = {loss}")
            }
            Error::Undefined(what) => write!(f, "undefined: {what}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
