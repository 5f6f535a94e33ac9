//! Dense linear algebra, nonlinearities, and reverse-mode gradients.

mod gradcheck;
mod matrix;
pub mod ops;
mod params;
mod real;
pub mod tape;

pub use gradcheck::grad_check;
pub use matrix::Matrix;
pub use ops::{l2_normalize_rows, row_softmax, sigmoid, softmax};
pub use params::{ParamSlot, ParamVector};
pub use real::Real;
pub use tape::{Gradients, Graph, Var};

/// Free-function form of [`Matrix::matmul`].
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> crate::Result<Matrix<T>> {
    a.matmul(b)
}
