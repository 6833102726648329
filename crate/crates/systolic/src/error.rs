//! Error types shared across the compiler and simulator.

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("index value {0} is not an integer")]
    NonIntegerIndex(f64),
    #[error("unknown name `{0}`")]
    UnknownName(String),
    #[error("read of `{name}` at {index:?} is out of bounds")]
    OutOfBoundsRead { name: String, index: Vec<i64> },
    #[error("extern `{0}` is not registered")]
    UnboundExtern(String),
    #[error("extern `{name}` failed: {message}")]
    ExternFault { name: String, message: String },
    #[error("rank mismatch: `{name}` has rank {expected}, got {got} indices")]
    RankMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum IrError {
    #[error("unknown name `{0}`")]
    UnknownName(String),
    #[error("unknown variable `{0}`")]
    UnknownVar(String),
    #[error("duplicate name `{0}`")]
    DuplicateName(String),
    #[error("rank mismatch: `{name}` has rank {expected}, got {got} indices")]
    RankMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("missing bounds for variable `{var}` of function `{func}`")]
    MissingBounds { func: String, var: String },
    #[error("function `{0}` has no definitions")]
    NoDefinitions(String),
    #[error("binding error: {0}")]
    Binding(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ScheduleError {
    #[error("unknown variable `{0}` in directive")]
    UnknownVar(String),
    #[error("non-positive tile factor for `{0}`")]
    NonPositiveFactor(String),
    #[error("tile factor {factor} exceeds extent {extent} of loop `{var}`")]
    FactorExceedsExtent {
        var: String,
        factor: i64,
        extent: i64,
    },
    #[error("loops {0:?} are not adjacent levels of the nest")]
    NonAdjacentLoops(Vec<String>),
    #[error("variable `{var}` is still used in `{site}`")]
    VarStillUsed { var: String, site: String },
    #[error("loop `{0}` is not the innermost loop")]
    NotInnermost(String),
    #[error("extent of loop `{0}` is not resolvable to a constant")]
    UnresolvableExtent(String),
    #[error("malformed tile argument list: {0}")]
    MalformedTile(String),
    #[error("unknown function `{0}`")]
    UnknownFunc(String),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LayoutError {
    #[error("function `{func}` does not consume value `{value}`")]
    ValueNotConsumed { func: String, value: String },
    #[error("function `{func}` does not produce value `{value}`")]
    ValueNotProduced { func: String, value: String },
    #[error("isolation chain is empty")]
    EmptyChain,
    #[error("relay direction has {got} components but `{func}` unrolls {expected} loops")]
    DirectionRankMismatch {
        func: String,
        got: usize,
        expected: usize,
    },
    #[error("relay on `{0}` which has no unrolled loops")]
    RelayWithoutUnroll(String),
    #[error("buffer level `{level}` is not a loop of `{func}`")]
    UnknownLevel { func: String, level: String },
    #[error("buffer footprint for `{value}` in `{func}` depends on data, not just bounds")]
    UnboundedFootprint { func: String, value: String },
    #[error("line buffer for `{value}` in `{func}` has no reusable window")]
    NonSlidingAccess { func: String, value: String },
    #[error("inconsistent wiring: {0}")]
    InconsistentWiring(String),
    #[error("probe deadlock: {0}")]
    ProbeDeadlock(String),
    #[error("extern signature mismatch for `{func}`: {message}")]
    SignatureMismatch { func: String, message: String },
    #[error("duplicate extern name `{0}`")]
    DuplicateName(String),
    #[error("host functions must sit at the memory end of chain `{0}`")]
    HostNotAtMemoryEnd(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Error)]
pub enum SimError {
    #[error("deadlock: {0}")]
    Deadlock(crate::sim::DeadlockReport),
    #[error("step limit of {0} exceeded")]
    StepLimitExceeded(u64),
    #[error("extern `{name}` failed: {message}")]
    ExternFault { name: String, message: String },
    #[error("simulation fault: {0}")]
    Fault(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}
