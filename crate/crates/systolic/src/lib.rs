//! A compiler kit for mapping loop-nest programs onto spatial processing-
//! element graphs: temporal definitions plus scheduling directives lower to a
//! PE/channel graph, executed by a token-driven simulator and verified
//! differentially against a sequential reference interpreter.

pub mod error;
pub mod externs;
pub mod ir;
pub mod value;

pub mod schedule;

pub mod layout;

pub mod sim;

pub mod verify;

pub mod parse;

pub mod examples;

pub use error::{EvalError, IrError, LayoutError, ScheduleError, SimError};
pub use value::{Binding, Bound, ElemType, Scalar, Tensor};
