//! Dense and sparse linear algebra plus reverse-mode differentiation.

mod gradcheck;
mod matrix;
mod sparse;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport, LeafCheck};
pub use matrix::Matrix;
pub use sparse::SparseCsr;
pub use tape::{sigmoid, softmax_rows, BatchStats, Gradients, Tape, Var};
