use ndarray::{s, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use super::linear::Linear;
use super::params::{scoped, Parameters};
use super::{softmax_rows, softmax_rows_backward};
use crate::real::Real;

/// Multi-head scaled dot-product self-attention over a token matrix `[P, C]`.
#[derive(Clone, Debug)]
pub struct SelfAttention<F: Real> {
    pub qkv: Linear<F>,
    pub out: Linear<F>,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct SelfAttentionCache<F: Real> {
    x: Array2<F>,
    qkv: Array2<F>,
    attn: Vec<Array2<F>>,
    ctx: Array2<F>,
}

impl<F: Real> SelfAttention<F> {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        Self {
            qkv: Linear::new(dim, 3 * dim, rng),
            out: Linear::new(dim, dim, rng),
            heads,
        }
    }

    fn dim(&self) -> usize {
        self.out.output_dim()
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, SelfAttentionCache<F>) {
        let c = self.dim();
        let d = c / self.heads;
        let scale = F::one() / F::lit(d as f64).sqrt();
        let qkv = self.qkv.forward(x);
        let mut ctx = Array2::zeros((x.nrows(), c));
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = qkv.slice(s![.., h * d..(h + 1) * d]);
            let k = qkv.slice(s![.., c + h * d..c + (h + 1) * d]);
            let v = qkv.slice(s![.., 2 * c + h * d..2 * c + (h + 1) * d]);
            let mut a = q.dot(&k.t());
            a.mapv_inplace(|s| s * scale);
            softmax_rows(&mut a);
            ctx.slice_mut(s![.., h * d..(h + 1) * d]).assign(&a.dot(&v));
            attn.push(a);
        }
        let y = self.out.forward(&ctx);
        (
            y,
            SelfAttentionCache {
                x: x.clone(),
                qkv,
                attn,
                ctx,
            },
        )
    }

    pub fn backward(&self, cache: &SelfAttentionCache<F>, dy: &Array2<F>, grads: &mut Self) -> Array2<F> {
        let c = self.dim();
        let d = c / self.heads;
        let scale = F::one() / F::lit(d as f64).sqrt();
        let dctx = self.out.backward(&cache.ctx, dy, &mut grads.out);
        let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
        for h in 0..self.heads {
            let q = cache.qkv.slice(s![.., h * d..(h + 1) * d]);
            let k = cache.qkv.slice(s![.., c + h * d..c + (h + 1) * d]);
            let v = cache.qkv.slice(s![.., 2 * c + h * d..2 * c + (h + 1) * d]);
            let a = &cache.attn[h];
            let dc = dctx.slice(s![.., h * d..(h + 1) * d]);
            let da = dc.dot(&v.t());
            dqkv.slice_mut(s![.., 2 * c + h * d..2 * c + (h + 1) * d])
                .assign(&a.t().dot(&dc));
            let mut ds = softmax_rows_backward(a, &da);
            ds.mapv_inplace(|g| g * scale);
            dqkv.slice_mut(s![.., h * d..(h + 1) * d]).assign(&ds.dot(&k));
            dqkv.slice_mut(s![.., c + h * d..c + (h + 1) * d])
                .assign(&ds.t().dot(&q));
        }
        self.qkv.backward(&cache.x, &dqkv, &mut grads.qkv)
    }
}

impl<F: Real> Parameters<F> for SelfAttention<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.qkv.visit(&scoped(prefix, "qkv"), f);
        self.out.visit(&scoped(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.qkv.visit_mut(&scoped(prefix, "qkv"), f);
        self.out.visit_mut(&scoped(prefix, "out"), f);
    }
}

/// Two-layer position-wise MLP with a ReLU in between.
#[derive(Clone, Debug)]
pub struct FeedForward<F: Real> {
    pub hidden: Linear<F>,
    pub out: Linear<F>,
}

#[derive(Clone, Debug)]
pub struct FeedForwardCache<F: Real> {
    x: Array2<F>,
    h: Array2<F>,
}

impl<F: Real> FeedForward<F> {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(dim, hidden, rng),
            out: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, FeedForwardCache<F>) {
        let mut h = self.hidden.forward(x);
        h.mapv_inplace(|v| v.max(F::zero()));
        let y = self.out.forward(&h);
        (y, FeedForwardCache { x: x.clone(), h })
    }

    pub fn backward(&self, cache: &FeedForwardCache<F>, dy: &Array2<F>, grads: &mut Self) -> Array2<F> {
        let mut dh = self.out.backward(&cache.h, dy, &mut grads.out);
        ndarray::Zip::from(&mut dh)
            .and(&cache.h)
            .for_each(|g, &h| if h <= F::zero() { *g = F::zero() });
        self.hidden.backward(&cache.x, &dh, &mut grads.hidden)
    }
}

impl<F: Real> Parameters<F> for FeedForward<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.hidden.visit(&scoped(prefix, "hidden"), f);
        self.out.visit(&scoped(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.hidden.visit_mut(&scoped(prefix, "hidden"), f);
        self.out.visit_mut(&scoped(prefix, "out"), f);
    }
}
