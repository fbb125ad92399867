//! Hand-written layers with explicit forward and backward passes.
//!
//! Every layer caches what its backward pass needs; gradients are stored in a
//! value of the same type as the layer (see [`Parameters`]), so optimizer state
//! and checkpoints can walk parameters and gradients in lockstep.

mod attention;
mod conv;
mod linear;
mod norm;
mod optim;
mod params;

pub use attention::{FeedForward, FeedForwardCache, SelfAttention, SelfAttentionCache};
pub use conv::{interp_matrix, relu_backward, relu_inplace, BatchNorm2d, BatchNormCache, Conv2d, Upsample};
pub use linear::Linear;
pub use norm::{LayerNorm, LayerNormCache};
pub use optim::{cosine_lr, Adam};
pub use params::{
    accumulate, digest, flatten, max_abs, num_params, scale, scoped, set_flat, zeroed, Parameters,
};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::real::Real;

pub(crate) fn uniform_array2<F: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    bound: f64,
    rng: &mut R,
) -> Array2<F> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || F::lit(dist.sample(rng)))
}

pub(crate) fn uniform_array1<F: Real, R: Rng + ?Sized>(n: usize, bound: f64, rng: &mut R) -> Array1<F> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array1::from_shape_simple_fn(n, || F::lit(dist.sample(rng)))
}

/// Row-wise softmax in place.
pub fn softmax_rows<F: Real>(x: &mut Array2<F>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

/// Backward of a row-wise softmax given its output `y` and upstream `dy`.
pub fn softmax_rows_backward<F: Real>(y: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let mut dx = Array2::zeros(y.raw_dim());
    for ((yr, dyr), mut dxr) in y
        .axis_iter(Axis(0))
        .zip(dy.axis_iter(Axis(0)))
        .zip(dx.axis_iter_mut(Axis(0)))
    {
        let dot: F = yr.iter().zip(dyr.iter()).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &dyv) in dxr.iter_mut().zip(yr.iter()).zip(dyr.iter()) {
            *d = yv * (dyv - dot);
        }
    }
    dx
}
