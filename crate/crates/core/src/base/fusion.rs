use ndarray::{Array2, Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::bev::{BevEmbedding, EmbeddingSource};
use crate::error::{Error, Result};
use crate::nn::{softmax_rows, softmax_rows_backward};
use crate::real::Real;

/// How per-agent embeddings are merged into the ego's fused embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Mean,
    Max,
    /// Per-pixel dot-product self-attention across agents, averaged over agents.
    Attn,
}

#[derive(Clone, Debug)]
pub enum FusionCache<F: Real> {
    Mean,
    /// Index of the winning agent per element.
    Max(Array3<u8>),
    /// Attention matrix `[A, A]` per pixel.
    Attn(Vec<Array2<F>>),
}

/// Fused embedding of `embs` (all the same shape).
pub fn fuse_agents<F: Real>(embs: &[BevEmbedding<F>], kind: FusionKind) -> Result<BevEmbedding<F>> {
    let first = embs
        .first()
        .ok_or_else(|| Error::Argument("cannot fuse an empty list of embeddings".into()))?;
    let views: Vec<&Array3<F>> = embs.iter().map(|e| &e.data).collect();
    let (data, _) = fuse_forward(&views, kind)?;
    let source = if embs.len() == 1 {
        first.source
    } else {
        EmbeddingSource::FusedMultiCav
    };
    BevEmbedding::new(data, first.frame_index, source)
}

pub fn fuse_forward<F: Real>(embs: &[&Array3<F>], kind: FusionKind) -> Result<(Array3<F>, FusionCache<F>)> {
    let first = *embs
        .first()
        .ok_or_else(|| Error::Argument("cannot fuse an empty list of embeddings".into()))?;
    if let Some(e) = embs.iter().find(|e| e.dim() != first.dim()) {
        return Err(Error::Argument(format!(
            "embedding shape {:?} differs from {:?}",
            e.dim(),
            first.dim()
        )));
    }
    if embs.len() == 1 {
        let cache = match kind {
            FusionKind::Mean => FusionCache::Mean,
            FusionKind::Max => FusionCache::Max(Array3::zeros(first.dim())),
            FusionKind::Attn => FusionCache::Attn(Vec::new()),
        };
        return Ok((first.clone(), cache));
    }
    let n = embs.len();
    Ok(match kind {
        FusionKind::Mean => {
            let mut out = first.clone();
            for e in &embs[1..] {
                out += *e;
            }
            out.mapv_inplace(|v| v / F::lit(n as f64));
            (out, FusionCache::Mean)
        }
        FusionKind::Max => {
            let mut out = first.clone();
            let mut arg = Array3::<u8>::zeros(first.dim());
            for (a, e) in embs.iter().enumerate().skip(1) {
                Zip::from(&mut out).and(&mut arg).and(*e).for_each(|o, i, &v| {
                    if v > *o {
                        *o = v;
                        *i = a as u8;
                    }
                });
            }
            (out, FusionCache::Max(arg))
        }
        FusionKind::Attn => {
            let (c, h, w) = first.dim();
            let scale = F::one() / F::lit(c as f64).sqrt();
            let inv_n = F::one() / F::lit(n as f64);
            let mut out = Array3::zeros((c, h, w));
            let mut attn = Vec::with_capacity(h * w);
            for i in 0..h {
                for j in 0..w {
                    let x = tokens_at(embs, i, j);
                    let mut s = x.dot(&x.t()) * scale;
                    softmax_rows(&mut s);
                    let omega = s.sum_axis(Axis(0)) * inv_n;
                    let fused = omega.dot(&x);
                    out.slice_mut(ndarray::s![.., i, j]).assign(&fused);
                    attn.push(s);
                }
            }
            (out, FusionCache::Attn(attn))
        }
    })
}

/// `[A, C]` agent tokens at pixel `(i, j)`.
fn tokens_at<F: Real>(embs: &[&Array3<F>], i: usize, j: usize) -> Array2<F> {
    let c = embs[0].dim().0;
    Array2::from_shape_fn((embs.len(), c), |(a, k)| embs[a][[k, i, j]])
}

/// Gradient with respect to each input embedding.
pub fn fuse_backward<F: Real>(
    embs: &[&Array3<F>],
    cache: &FusionCache<F>,
    dout: &Array3<F>,
) -> Vec<Array3<F>> {
    let n = embs.len();
    if n == 1 {
        return vec![dout.clone()];
    }
    match cache {
        FusionCache::Mean => {
            let g = dout.mapv(|v| v / F::lit(n as f64));
            vec![g; n]
        }
        FusionCache::Max(arg) => (0..n)
            .map(|a| {
                Zip::from(dout)
                    .and(arg)
                    .map_collect(|&d, &i| if i as usize == a { d } else { F::zero() })
            })
            .collect(),
        FusionCache::Attn(attn) => {
            let (c, h, w) = dout.dim();
            let scale = F::one() / F::lit(c as f64).sqrt();
            let inv_n = F::one() / F::lit(n as f64);
            let mut grads = vec![Array3::zeros((c, h, w)); n];
            for i in 0..h {
                for j in 0..w {
                    let x = tokens_at(embs, i, j);
                    let s = &attn[i * w + j];
                    let d = dout.slice(ndarray::s![.., i, j]).mapv(|v| v * inv_n);
                    // every agent's output receives d / n
                    let col = s.sum_axis(Axis(0));
                    let mut dx = Array2::<F>::zeros((n, c));
                    for b in 0..n {
                        dx.row_mut(b).scaled_add(col[b], &d);
                    }
                    let xd = x.dot(&d);
                    let dw = Array2::from_shape_fn((n, n), |(_, b)| xd[b]);
                    let ds = softmax_rows_backward(s, &dw) * scale;
                    dx += &ds.dot(&x);
                    dx += &ds.t().dot(&x);
                    for (a, g) in grads.iter_mut().enumerate() {
                        g.slice_mut(ndarray::s![.., i, j]).assign(&dx.row(a));
                    }
                }
            }
            grads
        }
    }
}
