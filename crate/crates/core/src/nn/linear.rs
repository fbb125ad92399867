use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::params::{scoped, Parameters};
use super::{uniform_array1, uniform_array2};
use crate::real::Real;

/// Affine map over token rows: `y = x · W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear<F: Real> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Linear<F> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: uniform_array2(input, output, bound, rng),
            bias: uniform_array1(output, bound, rng),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<F>, dy: &Array2<F>, grads: &mut Self) -> Array2<F> {
        self.backward_params(x, dy, grads);
        dy.dot(&self.weight.t())
    }

    pub fn backward_params(&self, x: &Array2<F>, dy: &Array2<F>, grads: &mut Self) {
        ndarray::linalg::general_mat_mul(F::one(), &x.t(), dy, F::one(), &mut grads.weight);
        grads.bias += &dy.sum_axis(Axis(0));
    }
}

impl<F: Real> Parameters<F> for Linear<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f(&scoped(prefix, "weight"), self.weight.view().into_dyn());
        f(&scoped(prefix, "bias"), self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        f(&scoped(prefix, "weight"), self.weight.view_mut().into_dyn());
        f(&scoped(prefix, "bias"), self.bias.view_mut().into_dyn());
    }
}
