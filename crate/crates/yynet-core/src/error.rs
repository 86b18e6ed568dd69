use alloc::string::String;
use core::fmt;

/// Errors surfaced by tensor ops, model construction and training.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    Shape(String),
    /// A configuration invariant was violated.
    Config(String),
    /// An operation was attempted in an invalid state (e.g. backward
    /// without an active tape, or a scheduler queried out of range).
    State(String),
    /// Input data is invalid (e.g. a class label out of range).
    Data(String),
    /// Non-finite values appeared in gradients or the loss.
    TrainingDiverged(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::TrainingDiverged(m) => write!(f, "training diverged: {m}"),
        }
    }
}

impl core::error::Error for Error {}

macro_rules! err_ctor {
    ($name:ident, $variant:ident) => {
        pub fn $name(msg: impl fmt::Display) -> Error {
            Error::$variant(alloc::format!("{msg}"))
        }
    };
}

impl Error {
    err_ctor!(shape, Shape);
    err_ctor!(config, Config);
    err_ctor!(state, State);
    err_ctor!(data, Data);
    err_ctor!(diverged, TrainingDiverged);
}
