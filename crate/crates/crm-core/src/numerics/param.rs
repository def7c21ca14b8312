//! Trainable parameters and the SGD update.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::scalar::Scalar;

/// A named trainable tensor paired with its gradient accumulator.
///
/// Gradients are *accumulated*: backward passes add into `grad`, and
/// [`sgd_step`] consumes and zeroes it. The name shows up in error messages
/// and is the tensor's key in checkpoints.
#[derive(Debug, Clone)]
pub struct Param<S: Scalar = f32> {
    name: String,
    pub value: Matrix<S>,
    pub grad: Matrix<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, value: Matrix<S>) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = S::ZERO);
    }

    /// Add `delta` into the gradient; errors on shape mismatch.
    pub fn accumulate_grad(&mut self, delta: &Matrix<S>) -> Result<()> {
        self.grad.add_assign(delta).map_err(|_| {
            Error::shape(
                format!("grad of '{}'", self.name),
                format!("{}x{}", self.value.rows(), self.value.cols()),
                format!("{}x{}", delta.rows(), delta.cols()),
            )
        })
    }
}

/// Anything that exposes its trainable parameters as a flat list.
///
/// The order must be stable across calls: the gradient checker and the
/// optimizer both index into it.
pub trait HasParams<S: Scalar = f32> {
    fn params(&self) -> Vec<&Param<S>>;
    fn params_mut(&mut self) -> Vec<&mut Param<S>>;

    /// Zero every gradient accumulator.
    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// One vanilla SGD step: `value -= lr * grad` for every parameter, then zero
/// the gradients.
///
/// Errors with the parameter's name if its gradient contains a non-finite
/// value; the parameter values are untouched in that case.
pub fn sgd_step<'a, S: Scalar>(
    params: impl IntoIterator<Item = &'a mut Param<S>>,
    lr: S,
) -> Result<()> {
    let params: Vec<&'a mut Param<S>> = params.into_iter().collect();
    for p in &params {
        p.grad
            .ensure_finite(&format!("gradient of '{}'", p.name()))?;
    }
    for p in params {
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data().iter()) {
            *v -= lr * *g;
        }
        p.zero_grad();
    }
    Ok(())
}
