use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis, Zip};

use super::params::{scoped, Parameters};
use crate::real::Real;

/// Per-token normalization over the channel axis.
#[derive(Clone, Debug)]
pub struct LayerNorm<F: Real> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub eps: F,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<F: Real> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            eps: F::lit(1e-5),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let c = F::lit(x.ncols() as f64);
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
            let mean = row.sum() / c;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<F>() / c;
            let inv = F::one() / (var + self.eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            *s = inv;
        }
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<F>, dy: &Array2<F>, grads: &mut Self) -> Array2<F> {
        grads.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grads.beta += &dy.sum_axis(Axis(0));
        let c = F::lit(dy.ncols() as f64);
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        Zip::from(dx.rows_mut())
            .and(dxhat.rows())
            .and(cache.xhat.rows())
            .and(&cache.inv_std)
            .for_each(|mut dxr, dh, xh, &inv| {
                let sum_dh = dh.sum();
                let sum_dh_xh: F = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum();
                Zip::from(&mut dxr).and(&dh).and(&xh).for_each(|d, &g, &h| {
                    *d = inv / c * (c * g - sum_dh - h * sum_dh_xh);
                });
            });
        dx
    }
}

impl<F: Real> Parameters<F> for LayerNorm<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f(&scoped(prefix, "gamma"), self.gamma.view().into_dyn());
        f(&scoped(prefix, "beta"), self.beta.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        f(&scoped(prefix, "gamma"), self.gamma.view_mut().into_dyn());
        f(&scoped(prefix, "beta"), self.beta.view_mut().into_dyn());
    }
}
