use ndarray::{Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use super::deformable::{DeformableAttention, DeformableCache};
use crate::error::Result;
use crate::nn::{
    scoped, FeedForward, FeedForwardCache, LayerNorm, LayerNormCache, Parameters, SelfAttention,
    SelfAttentionCache,
};
use crate::real::Real;

/// Self-attention, deformable cross-attention and feed-forward sublayers, each
/// wrapped as residual-then-normalize.
#[derive(Clone, Debug)]
pub struct AttentionBlock<F: Real> {
    pub self_attn: SelfAttention<F>,
    pub norm1: LayerNorm<F>,
    pub cross_attn: DeformableAttention<F>,
    pub norm2: LayerNorm<F>,
    pub ffn: FeedForward<F>,
    pub norm3: LayerNorm<F>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<F: Real> {
    sa: SelfAttentionCache<F>,
    ln1: LayerNormCache<F>,
    ca: DeformableCache<F>,
    ln2: LayerNormCache<F>,
    ff: FeedForwardCache<F>,
    ln3: LayerNormCache<F>,
}

impl<F: Real> BlockCache<F> {
    pub fn cross_attention(&self) -> &DeformableCache<F> {
        &self.ca
    }
}

impl<F: Real> AttentionBlock<F> {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        heads: usize,
        frames: usize,
        keypoints: usize,
        feedforward: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            self_attn: SelfAttention::new(channels, heads, rng),
            norm1: LayerNorm::new(channels),
            cross_attn: DeformableAttention::new(channels, heads, frames, keypoints, rng),
            norm2: LayerNorm::new(channels),
            ffn: FeedForward::new(channels, feedforward, rng),
            norm3: LayerNorm::new(channels),
        }
    }

    pub fn forward(
        &self,
        query: &Array2<F>,
        frames: &[&Array2<F>],
        height: usize,
        width: usize,
    ) -> Result<(Array2<F>, BlockCache<F>)> {
        let (sa_out, sa) = self.self_attn.forward(query);
        let (x1, ln1) = self.norm1.forward(&(query + &sa_out));
        let (ca_out, ca) = self.cross_attn.forward(&x1, frames, height, width)?;
        let (x2, ln2) = self.norm2.forward(&(&x1 + &ca_out));
        let (ff_out, ff) = self.ffn.forward(&x2);
        let (x3, ln3) = self.norm3.forward(&(&x2 + &ff_out));
        Ok((
            x3,
            BlockCache {
                sa,
                ln1,
                ca,
                ln2,
                ff,
                ln3,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &BlockCache<F>,
        frames: &[&Array2<F>],
        height: usize,
        width: usize,
        dy: &Array2<F>,
        grads: &mut Self,
    ) -> Array2<F> {
        let d3 = self.norm3.backward(&cache.ln3, dy, &mut grads.norm3);
        let dx2 = &d3 + &self.ffn.backward(&cache.ff, &d3, &mut grads.ffn);
        let d2 = self.norm2.backward(&cache.ln2, &dx2, &mut grads.norm2);
        let dx1 = &d2
            + &self
                .cross_attn
                .backward(&cache.ca, frames, height, width, &d2, &mut grads.cross_attn);
        let d1 = self.norm1.backward(&cache.ln1, &dx1, &mut grads.norm1);
        &d1 + &self.self_attn.backward(&cache.sa, &d1, &mut grads.self_attn)
    }
}

impl<F: Real> Parameters<F> for AttentionBlock<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.self_attn.visit(&scoped(prefix, "self_attn"), f);
        self.norm1.visit(&scoped(prefix, "norm1"), f);
        self.cross_attn.visit(&scoped(prefix, "cross_attn"), f);
        self.norm2.visit(&scoped(prefix, "norm2"), f);
        self.ffn.visit(&scoped(prefix, "ffn"), f);
        self.norm3.visit(&scoped(prefix, "norm3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.self_attn.visit_mut(&scoped(prefix, "self_attn"), f);
        self.norm1.visit_mut(&scoped(prefix, "norm1"), f);
        self.cross_attn.visit_mut(&scoped(prefix, "cross_attn"), f);
        self.norm2.visit_mut(&scoped(prefix, "norm2"), f);
        self.ffn.visit_mut(&scoped(prefix, "ffn"), f);
        self.norm3.visit_mut(&scoped(prefix, "norm3"), f);
    }
}
