//! Minimal reverse-mode differentiation over dense `f64` matrices, plus a
//! momentum SGD optimizer and a finite-difference gradient checker.

mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use gradcheck::gradient_check;
pub use graph::{CustomOp, Graph, NormMode, RunningStats, Var, BATCH_NORM_EPS};
pub use optim::{Sgd, SgdConfig};
pub use tensor::{zero_grads, DiffTensor};
