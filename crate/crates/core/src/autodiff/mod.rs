//! Reverse-mode differentiation, finite-difference checking and the registry
//! of differentiable operations.

pub mod fd;
pub mod ops;
pub mod suite;
pub mod tape;

pub use fd::{fd_check, FdReport};
pub use tape::{Gradients, Op, Saved, Tape, Var};
