//! BEV embeddings and importance-guided fusion.
//!
//! An importance estimator projects every pixel of an embedding to `O`
//! channels, takes the per-pixel channel maximum and squashes it with a
//! sigmoid. Maps of several embeddings are normalized against each other with
//! a per-pixel softmax and the embeddings are blended with those weights,
//! broadcasting each `H x W` weight over all channels.

use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{scoped, Linear, Parameters};
use crate::real::{sigmoid, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EmbeddingSource {
    FusedMultiCav,
    EgoOnly,
    TemporalRefined,
}

/// A `C x H x W` feature grid centered on the ego vehicle.
#[derive(Clone, Debug, PartialEq)]
pub struct BevEmbedding<F: Real> {
    pub data: Array3<F>,
    pub frame_index: i64,
    pub source: EmbeddingSource,
}

impl<F: Real> BevEmbedding<F> {
    pub fn new(data: Array3<F>, frame_index: i64, source: EmbeddingSource) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Argument(format!("empty embedding shape ({c}, {h}, {w})")));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("embedding contains non-finite values".into()));
        }
        Ok(Self {
            data,
            frame_index,
            source,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    /// Token matrix `[H*W, C]`, rows in row-major pixel order.
    pub fn to_tokens(&self) -> Array2<F> {
        to_tokens(&self.data)
    }

    pub fn from_tokens(
        tokens: &Array2<F>,
        height: usize,
        width: usize,
        frame_index: i64,
        source: EmbeddingSource,
    ) -> Self {
        Self {
            data: from_tokens(tokens, height, width),
            frame_index,
            source,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map_data<G: Real>(&self, f: impl Fn(F) -> G) -> BevEmbedding<G> {
        BevEmbedding {
            data: self.data.mapv(f),
            frame_index: self.frame_index,
            source: self.source,
        }
    }
}

pub fn to_tokens<F: Real>(data: &Array3<F>) -> Array2<F> {
    let (c, h, w) = data.dim();
    data.view()
        .into_shape_with_order((c, h * w))
        .map(|v| v.t().to_owned())
        .unwrap_or_else(|_| {
            data.as_standard_layout()
                .into_owned()
                .into_shape_with_order((c, h * w))
                .expect("contiguous")
                .t()
                .to_owned()
        })
}

pub fn from_tokens<F: Real>(tokens: &Array2<F>, height: usize, width: usize) -> Array3<F> {
    let c = tokens.ncols();
    tokens
        .t()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, height, width))
        .expect("token count matches grid")
}

/// Per-pixel saliency in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMap<F: Real>(pub Array2<F>);

/// Per-pixel softmax weight of one member of a fused set; members sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeImportance<F: Real>(pub Array2<F>);

/// The importance generator: a per-pixel linear projection `C -> O` with bias.
#[derive(Clone, Debug)]
pub struct ImportanceEstimator<F: Real> {
    pub generator: Linear<F>,
}

/// What the fusion backward pass needs besides the member embeddings.
#[derive(Clone, Debug)]
pub struct FuseCache<F: Real> {
    argmax: Vec<Vec<usize>>,
    maps: Vec<Array1<F>>,
    weights: Vec<Array1<F>>,
}

impl<F: Real> FuseCache<F> {
    pub fn weights(&self) -> &[Array1<F>] {
        &self.weights
    }
}

impl<F: Real> ImportanceEstimator<F> {
    pub fn new<R: Rng + ?Sized>(channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Self {
            generator: Linear::new(channels, out_channels, rng),
        }
    }

    pub fn from_linear(generator: Linear<F>) -> Result<Self> {
        if generator.output_dim() == 0 {
            return Err(Error::Config("importance generator needs O >= 1".into()));
        }
        if !generator.weight.iter().chain(generator.bias.iter()).all(|v| v.is_finite()) {
            return Err(Error::Config("importance generator weights are not finite".into()));
        }
        Ok(Self { generator })
    }

    pub fn channels(&self) -> usize {
        self.generator.input_dim()
    }

    pub fn out_channels(&self) -> usize {
        self.generator.output_dim()
    }

    fn check(&self, c: usize) -> Result<()> {
        if c != self.channels() {
            return Err(Error::Config(format!(
                "importance estimator expects {} channels, embedding has {c}",
                self.channels()
            )));
        }
        Ok(())
    }

    /// Sigmoid of the channel-max of the generated channels, per token.
    pub fn map_tokens(&self, tokens: &Array2<F>) -> (Array1<F>, Vec<usize>) {
        let g = self.generator.forward(tokens);
        let mut argmax = Vec::with_capacity(g.nrows());
        let map = g
            .axis_iter(Axis(0))
            .map(|row| {
                let (idx, best) = row
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0, F::neg_infinity()), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
                argmax.push(idx);
                sigmoid(best)
            })
            .collect();
        (map, argmax)
    }

    /// Importance-weighted blend of token matrices sharing one shape.
    pub fn fuse_tokens(&self, members: &[&Array2<F>]) -> (Array2<F>, FuseCache<F>) {
        let mut maps = Vec::with_capacity(members.len());
        let mut argmax = Vec::with_capacity(members.len());
        for m in members {
            let (map, idx) = self.map_tokens(m);
            maps.push(map);
            argmax.push(idx);
        }
        let weights = softmax_members(&maps);
        let mut fused = Array2::zeros(members[0].raw_dim());
        for (m, w) in members.iter().zip(&weights) {
            Zip::from(fused.rows_mut())
                .and(m.rows())
                .and(w)
                .for_each(|mut f, e, &wv| f.scaled_add(wv, &e));
        }
        (
            fused,
            FuseCache {
                argmax,
                maps,
                weights,
            },
        )
    }

    /// Accumulates generator gradients and returns `dL/dmember` for members flagged in `need`.
    pub fn fuse_backward(
        &self,
        members: &[&Array2<F>],
        cache: &FuseCache<F>,
        dfused: &Array2<F>,
        grads: &mut Self,
        need: &[bool],
    ) -> Vec<Option<Array2<F>>> {
        let n = members.len();
        let p = dfused.nrows();
        // dL/dI_n per token
        let dweights: Vec<Array1<F>> = members
            .iter()
            .map(|m| {
                Zip::from(dfused.rows())
                    .and(m.rows())
                    .map_collect(|d, e| d.dot(&e))
            })
            .collect();
        let mut dmaps = vec![Array1::<F>::zeros(p); n];
        for t in 0..p {
            let dot: F = (0..n).map(|k| cache.weights[k][t] * dweights[k][t]).sum();
            for k in 0..n {
                let m = cache.maps[k][t];
                dmaps[k][t] = cache.weights[k][t] * (dweights[k][t] - dot) * m * (F::one() - m);
            }
        }
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let e = members[k];
            for t in 0..p {
                let o = cache.argmax[k][t];
                let g = dmaps[k][t];
                grads.generator.bias[o] += g;
                grads
                    .generator
                    .weight
                    .column_mut(o)
                    .scaled_add(g, &e.row(t));
            }
            out.push(need.get(k).copied().unwrap_or(false).then(|| {
                let mut de = dfused.clone();
                Zip::from(de.rows_mut())
                    .and(&cache.weights[k])
                    .and(&dmaps[k])
                    .and(&cache.argmax[k])
                    .for_each(|mut row, &w, &g, &o| {
                        row.mapv_inplace(|v| v * w);
                        row.scaled_add(g, &self.generator.weight.column(o));
                    });
                de
            }));
        }
        out
    }
}

fn softmax_members<F: Real>(maps: &[Array1<F>]) -> Vec<Array1<F>> {
    let p = maps[0].len();
    let mut weights: Vec<Array1<F>> = maps.iter().map(|m| Array1::zeros(m.len())).collect();
    for t in 0..p {
        let max = maps.iter().map(|m| m[t]).fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (w, m) in weights.iter_mut().zip(maps) {
            w[t] = (m[t] - max).exp();
            sum += w[t];
        }
        for w in weights.iter_mut() {
            w[t] /= sum;
        }
    }
    weights
}

impl<F: Real> Parameters<F> for ImportanceEstimator<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.generator.visit(&scoped(prefix, "generator"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.generator.visit_mut(&scoped(prefix, "generator"), f);
    }
}

pub(crate) fn check_same_shape<F: Real>(embs: &[&BevEmbedding<F>]) -> Result<()> {
    let first = embs
        .first()
        .ok_or_else(|| Error::Argument("at least one embedding is required".into()))?
        .shape();
    for e in embs {
        if e.shape() != first {
            return Err(Error::Argument(format!(
                "embedding shape {:?} differs from {:?}",
                e.shape(),
                first
            )));
        }
    }
    Ok(())
}

pub fn importance_map<F: Real>(emb: &BevEmbedding<F>, est: &ImportanceEstimator<F>) -> Result<ImportanceMap<F>> {
    est.check(emb.channels())?;
    let (_, h, w) = emb.shape();
    let (map, _) = est.map_tokens(&emb.to_tokens());
    Ok(ImportanceMap(
        map.into_shape_with_order((h, w)).expect("pixel count"),
    ))
}

pub fn relative_importance<F: Real>(maps: &[ImportanceMap<F>]) -> Result<Vec<RelativeImportance<F>>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Argument("relative importance of an empty set".into()))?
        .0
        .dim();
    if let Some(bad) = maps.iter().find(|m| m.0.dim() != first) {
        return Err(Error::Argument(format!(
            "importance map shape {:?} differs from {first:?}",
            bad.0.dim()
        )));
    }
    let flat: Vec<Array1<F>> = maps
        .iter()
        .map(|m| m.0.iter().copied().collect())
        .collect();
    Ok(softmax_members(&flat)
        .into_iter()
        .map(|w| RelativeImportance(w.into_shape_with_order(first).expect("pixel count")))
        .collect())
}

pub fn importance_fuse<F: Real>(
    embs: &[&BevEmbedding<F>],
    est: &ImportanceEstimator<F>,
) -> Result<BevEmbedding<F>> {
    check_same_shape(embs)?;
    est.check(embs[0].channels())?;
    let (_, h, w) = embs[0].shape();
    let tokens: Vec<Array2<F>> = embs.iter().map(|e| e.to_tokens()).collect();
    let refs: Vec<&Array2<F>> = tokens.iter().collect();
    let (fused, _) = est.fuse_tokens(&refs);
    let frame = embs.iter().map(|e| e.frame_index).max().unwrap_or(0);
    Ok(BevEmbedding::from_tokens(
        &fused,
        h,
        w,
        frame,
        EmbeddingSource::TemporalRefined,
    ))
}
