//! Deformable cross-attention over a stack of same-sized token grids.
//!
//! Every pixel is a query whose reference point is its own coordinate. From
//! the query feature the layer predicts, per head, frame and keypoint, a 2-D
//! offset in pixel units and an attention logit. Logits are normalized with a
//! softmax over all `frames * keypoints` samples of a head, the value-projected
//! frames are sampled bilinearly at `reference + offset`, and the per-head sums
//! are mixed by the output projection.

use ndarray::{s, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use super::sampling::{corners, gather};
use crate::error::{Error, Result};
use crate::nn::{scoped, Linear, Parameters};
use crate::real::Real;

#[derive(Clone, Debug)]
pub struct DeformableAttention<F: Real> {
    pub value_proj: Linear<F>,
    pub output_proj: Linear<F>,
    pub attn_weight_proj: Linear<F>,
    pub offset_proj: Linear<F>,
    pub heads: usize,
    pub frames: usize,
    pub keypoints: usize,
}

#[derive(Clone, Debug)]
pub struct DeformableCache<F: Real> {
    query: Array2<F>,
    values: Vec<Array2<F>>,
    offsets: Array2<F>,
    weights: Array2<F>,
    ctx: Array2<F>,
}

impl<F: Real> DeformableCache<F> {
    pub fn offsets(&self) -> &Array2<F> {
        &self.offsets
    }

    /// Softmax-normalized attention weights `[P, heads * frames * keypoints]`.
    pub fn weights(&self) -> &Array2<F> {
        &self.weights
    }
}

impl<F: Real> DeformableAttention<F> {
    /// Offset projection starts at exactly zero so initial samples land on the reference points.
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        heads: usize,
        frames: usize,
        keypoints: usize,
        rng: &mut R,
    ) -> Self {
        let samples = heads * frames * keypoints;
        Self {
            value_proj: Linear::new(channels, channels, rng),
            output_proj: Linear::new(channels, channels, rng),
            attn_weight_proj: Linear::new(channels, samples, rng),
            offset_proj: Linear::zeros(channels, 2 * samples),
            heads,
            frames,
            keypoints,
        }
    }

    pub fn channels(&self) -> usize {
        self.value_proj.input_dim()
    }

    fn samples_per_head(&self) -> usize {
        self.frames * self.keypoints
    }

    fn check(&self, query: &Array2<F>, frames: &[&Array2<F>], height: usize, width: usize) -> Result<()> {
        if frames.len() != self.frames {
            return Err(Error::Argument(format!(
                "deformable attention expects {} frames, got {}",
                self.frames,
                frames.len()
            )));
        }
        let p = height * width;
        for t in std::iter::once(query).chain(frames.iter().copied()) {
            if t.dim() != (p, self.channels()) {
                return Err(Error::shape(
                    format!("({p}, {})", self.channels()),
                    format!("{:?}", t.dim()),
                ));
            }
        }
        Ok(())
    }

    pub fn forward(
        &self,
        query: &Array2<F>,
        frames: &[&Array2<F>],
        height: usize,
        width: usize,
    ) -> Result<(Array2<F>, DeformableCache<F>)> {
        self.check(query, frames, height, width)?;
        let offsets = self.offset_proj.forward(query);
        Ok(self.attend(query, frames, height, width, offsets))
    }

    /// Same as [`DeformableAttention::forward`] but with a caller-supplied offset table
    /// `[P, heads * frames * keypoints * 2]` (x then y per sample).
    pub fn forward_with_offsets(
        &self,
        query: &Array2<F>,
        frames: &[&Array2<F>],
        height: usize,
        width: usize,
        offsets: Array2<F>,
    ) -> Result<(Array2<F>, DeformableCache<F>)> {
        self.check(query, frames, height, width)?;
        let expect = (height * width, 2 * self.heads * self.samples_per_head());
        if offsets.dim() != expect {
            return Err(Error::shape(format!("{expect:?}"), format!("{:?}", offsets.dim())));
        }
        Ok(self.attend(query, frames, height, width, offsets))
    }

    fn attend(
        &self,
        query: &Array2<F>,
        frames: &[&Array2<F>],
        height: usize,
        width: usize,
        offsets: Array2<F>,
    ) -> (Array2<F>, DeformableCache<F>) {
        let c = self.channels();
        let d = c / self.heads;
        let spp = self.samples_per_head();
        let values: Vec<Array2<F>> = frames.iter().map(|f| self.value_proj.forward(f)).collect();
        let mut weights = self.attn_weight_proj.forward(query);
        for mut row in weights.rows_mut() {
            for a in 0..self.heads {
                let mut group = row.slice_mut(s![a * spp..(a + 1) * spp]);
                let max = group.iter().copied().fold(F::neg_infinity(), F::max);
                group.mapv_inplace(|v| (v - max).exp());
                let sum = group.sum();
                group.mapv_inplace(|v| v / sum);
            }
        }
        let mut ctx = Array2::zeros((height * width, c));
        for p in 0..height * width {
            let (px, py) = (F::lit((p % width) as f64), F::lit((p / width) as f64));
            let mut out_row = ctx.row_mut(p);
            let out_row = out_row.as_slice_mut().expect("contiguous");
            for a in 0..self.heads {
                let head_out = &mut out_row[a * d..(a + 1) * d];
                for (f, vals) in values.iter().enumerate() {
                    for m in 0..self.keypoints {
                        let idx = a * spp + f * self.keypoints + m;
                        let x = px + offsets[[p, 2 * idx]];
                        let y = py + offsets[[p, 2 * idx + 1]];
                        let cn = corners(x, y, height, width);
                        gather(vals, &cn, a * d, weights[[p, idx]], head_out);
                    }
                }
            }
        }
        let out = self.output_proj.forward(&ctx);
        (
            out,
            DeformableCache {
                query: query.clone(),
                values,
                offsets,
                weights,
                ctx,
            },
        )
    }

    /// Accumulates parameter gradients and returns `dL/dquery`. Frame inputs are
    /// treated as constants (they never require gradients in this model).
    pub fn backward(
        &self,
        cache: &DeformableCache<F>,
        frames: &[&Array2<F>],
        height: usize,
        width: usize,
        dy: &Array2<F>,
        grads: &mut Self,
    ) -> Array2<F> {
        let c = self.channels();
        let d = c / self.heads;
        let spp = self.samples_per_head();
        let dctx = self.output_proj.backward(&cache.ctx, dy, &mut grads.output_proj);
        let mut dvalues: Vec<Array2<F>> = cache.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect();
        let mut dweights = Array2::<F>::zeros(cache.weights.raw_dim());
        let mut doffsets = Array2::<F>::zeros(cache.offsets.raw_dim());
        let mut sample = vec![F::zero(); d];
        for p in 0..height * width {
            let (px, py) = (F::lit((p % width) as f64), F::lit((p / width) as f64));
            for a in 0..self.heads {
                let g = dctx.slice(s![p, a * d..(a + 1) * d]);
                for (f, vals) in cache.values.iter().enumerate() {
                    for m in 0..self.keypoints {
                        let idx = a * spp + f * self.keypoints + m;
                        let wgt = cache.weights[[p, idx]];
                        let x = px + cache.offsets[[p, 2 * idx]];
                        let y = py + cache.offsets[[p, 2 * idx + 1]];
                        let cn = corners(x, y, height, width);
                        sample.iter_mut().for_each(|v| *v = F::zero());
                        gather(vals, &cn, a * d, F::one(), &mut sample);
                        dweights[[p, idx]] = g.iter().zip(&sample).map(|(&u, &v)| u * v).sum();

                        // corner values projected on the upstream gradient
                        let mut proj = [F::zero(); 4];
                        for k in 0..4 {
                            if let Some(i) = cn.idx[k] {
                                let row = vals.row(i);
                                proj[k] = g
                                    .iter()
                                    .zip(row.slice(s![a * d..(a + 1) * d]))
                                    .map(|(&u, &v)| u * v)
                                    .sum();
                                let mut drow = dvalues[f].slice_mut(s![i, a * d..(a + 1) * d]);
                                drow.scaled_add(wgt * cn.w[k], &g);
                            }
                        }
                        let one = F::one();
                        let ddx = (one - cn.fy) * (proj[1] - proj[0]) + cn.fy * (proj[3] - proj[2]);
                        let ddy = (one - cn.fx) * (proj[2] - proj[0]) + cn.fx * (proj[3] - proj[1]);
                        doffsets[[p, 2 * idx]] = wgt * ddx;
                        doffsets[[p, 2 * idx + 1]] = wgt * ddy;
                    }
                }
            }
        }
        let mut dlogits = Array2::<F>::zeros(dweights.raw_dim());
        for p in 0..height * width {
            for a in 0..self.heads {
                let range = a * spp..(a + 1) * spp;
                let dot: F = range
                    .clone()
                    .map(|i| cache.weights[[p, i]] * dweights[[p, i]])
                    .sum();
                for i in range {
                    dlogits[[p, i]] = cache.weights[[p, i]] * (dweights[[p, i]] - dot);
                }
            }
        }
        for (frame, dv) in frames.iter().zip(&dvalues) {
            self.value_proj.backward_params(frame, dv, &mut grads.value_proj);
        }
        let mut dq = self
            .attn_weight_proj
            .backward(&cache.query, &dlogits, &mut grads.attn_weight_proj);
        dq += &self.offset_proj.backward(&cache.query, &doffsets, &mut grads.offset_proj);
        dq
    }
}

impl<F: Real> Parameters<F> for DeformableAttention<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.value_proj.visit(&scoped(prefix, "value_proj"), f);
        self.output_proj.visit(&scoped(prefix, "output_proj"), f);
        self.attn_weight_proj.visit(&scoped(prefix, "attn_weight_proj"), f);
        self.offset_proj.visit(&scoped(prefix, "offset_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.value_proj.visit_mut(&scoped(prefix, "value_proj"), f);
        self.output_proj.visit_mut(&scoped(prefix, "output_proj"), f);
        self.attn_weight_proj.visit_mut(&scoped(prefix, "attn_weight_proj"), f);
        self.offset_proj.visit_mut(&scoped(prefix, "offset_proj"), f);
    }
}
