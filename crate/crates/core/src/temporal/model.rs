use ndarray::{Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use super::block::{AttentionBlock, BlockCache};
use super::history::HistoryBuffer;
use super::{HistorySource, TemporalConfig};
use crate::bev::{BevEmbedding, EmbeddingSource, FuseCache, ImportanceEstimator};
use crate::error::{Error, Result};
use crate::nn::{scoped, Parameters};
use crate::real::Real;

#[derive(Clone, Debug)]
pub struct TemporalFusion<F: Real> {
    pub config: TemporalConfig,
    pub query_estimator: ImportanceEstimator<F>,
    pub blocks: Vec<AttentionBlock<F>>,
    pub aggregate_estimator: ImportanceEstimator<F>,
}

#[derive(Clone, Debug)]
enum QueryCache<F: Real> {
    Importance(FuseCache<F>),
    Mean,
}

/// Forward state kept for one gradient-tracked step.
#[derive(Clone, Debug)]
pub struct TemporalCache<F: Real> {
    /// `[padded history.., current]`
    frames: Vec<Array2<F>>,
    /// Members of the initial query: current first, then the real history entries.
    members: Vec<usize>,
    query: QueryCache<F>,
    blocks: Vec<BlockCache<F>>,
    temporal_out: Array2<F>,
    aggregate: Option<FuseCache<F>>,
    height: usize,
    width: usize,
}

impl<F: Real> TemporalCache<F> {
    pub fn blocks(&self) -> &[BlockCache<F>] {
        &self.blocks
    }
}

impl<F: Real> TemporalFusion<F> {
    pub fn new<R: Rng + ?Sized>(config: TemporalConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let frames = config.history_len + 1;
        let query_estimator = ImportanceEstimator::new(c, config.importance_channels, rng);
        let blocks = (0..config.num_blocks)
            .map(|_| {
                AttentionBlock::new(
                    c,
                    config.num_heads,
                    frames,
                    config.num_keypoints,
                    config.feedforward_dim,
                    rng,
                )
            })
            .collect();
        let aggregate_estimator = ImportanceEstimator::new(c, config.importance_channels, rng);
        Ok(Self {
            config,
            query_estimator,
            blocks,
            aggregate_estimator,
        })
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    /// Frames fed to cross-attention: history oldest-first, left-padded with the
    /// oldest entry up to `history_len`, then the current embedding.
    fn frame_list<'a>(&self, current: &'a Array2<F>, history: &[&'a Array2<F>]) -> Vec<&'a Array2<F>> {
        let want = self.config.history_len;
        let mut frames = Vec::with_capacity(want + 1);
        let keep = &history[history.len().saturating_sub(want)..];
        for _ in keep.len()..want {
            frames.push(keep[0]);
        }
        frames.extend(keep.iter().copied());
        frames.push(current);
        frames
    }

    /// Token-level forward. Returns `None` for the cache on the bypass path (empty history).
    pub fn forward_tokens(
        &self,
        current: &Array2<F>,
        history: &[&Array2<F>],
        height: usize,
        width: usize,
        keep_cache: bool,
    ) -> Result<(Array2<F>, Option<TemporalCache<F>>)> {
        let c = self.channels();
        let p = height * width;
        for t in std::iter::once(current).chain(history.iter().copied()) {
            if t.dim() != (p, c) {
                return Err(Error::shape(format!("({p}, {c})"), format!("{:?}", t.dim())));
            }
        }
        if history.is_empty() || self.config.history_len == 0 {
            return Ok((current.clone(), None));
        }
        let history = &history[history.len().saturating_sub(self.config.history_len)..];
        let frames = self.frame_list(current, history);

        let mut members: Vec<&Array2<F>> = vec![current];
        members.extend(history.iter().copied());
        let (mut x, query) = if self.config.query_importance {
            let (q, cache) = self.query_estimator.fuse_tokens(&members);
            (q, QueryCache::Importance(cache))
        } else {
            let mut q = Array2::zeros(current.raw_dim());
            for m in &members {
                q += *m;
            }
            q.mapv_inplace(|v| v / F::lit(members.len() as f64));
            (q, QueryCache::Mean)
        };

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(&x, &frames, height, width)?;
            x = y;
            if keep_cache {
                block_caches.push(cache);
            }
        }
        let (out, aggregate) = if self.config.feature_aggregation {
            let (o, cache) = self.aggregate_estimator.fuse_tokens(&[current, &x]);
            (o, Some(cache))
        } else {
            (x.clone(), None)
        };
        let cache = keep_cache.then(|| {
            let n = frames.len();
            TemporalCache {
                frames: frames.iter().map(|f| (*f).clone()).collect(),
                members: std::iter::once(n - 1)
                    .chain(n - 1 - history.len()..n - 1)
                    .collect(),
                query,
                blocks: block_caches,
                temporal_out: x,
                aggregate,
                height,
                width,
            }
        });
        Ok((out, cache))
    }

    /// Accumulates parameter gradients for `dL/doutput`.
    pub fn backward(&self, cache: &TemporalCache<F>, dout: &Array2<F>, grads: &mut Self) {
        let frames: Vec<&Array2<F>> = cache.frames.iter().collect();
        let current = frames[frames.len() - 1];
        let mut dx = match &cache.aggregate {
            Some(agg) => self
                .aggregate_estimator
                .fuse_backward(
                    &[current, &cache.temporal_out],
                    agg,
                    dout,
                    &mut grads.aggregate_estimator,
                    &[false, true],
                )
                .pop()
                .flatten()
                .expect("temporal output gradient requested"),
            None => dout.clone(),
        };
        for ((block, bc), g) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grads.blocks.iter_mut())
            .rev()
        {
            dx = block.backward(bc, &frames, cache.height, cache.width, &dx, g);
        }
        if let QueryCache::Importance(qc) = &cache.query {
            let members: Vec<&Array2<F>> = cache.members.iter().map(|&i| frames[i]).collect();
            self.query_estimator
                .fuse_backward(&members, qc, &dx, &mut grads.query_estimator, &[]);
        }
    }

    pub fn forward(&self, current: &BevEmbedding<F>, history: &HistoryBuffer<F>) -> Result<BevEmbedding<F>> {
        if current.channels() != self.channels() {
            return Err(Error::Argument(format!(
                "embedding has {} channels, module expects {}",
                current.channels(),
                self.channels()
            )));
        }
        if !current.is_finite() {
            return Err(Error::Data("current embedding is not finite".into()));
        }
        if history.is_empty() || self.config.history_len == 0 {
            return Ok(current.clone());
        }
        let (_, h, w) = current.shape();
        for e in history.entries() {
            if e.shape() != current.shape() {
                return Err(Error::Argument(format!(
                    "history entry shape {:?} differs from current {:?}",
                    e.shape(),
                    current.shape()
                )));
            }
        }
        let cur = current.to_tokens();
        let hist: Vec<Array2<F>> = history.entries().map(|e| e.to_tokens()).collect();
        let refs: Vec<&Array2<F>> = hist.iter().collect();
        let (out, _) = self.forward_tokens(&cur, &refs, h, w, false)?;
        Ok(BevEmbedding::from_tokens(
            &out,
            h,
            w,
            current.frame_index,
            EmbeddingSource::TemporalRefined,
        ))
    }

    /// Forward, then push the refined output or the raw input per `history_source`.
    pub fn step(&self, current: &BevEmbedding<F>, history: &mut HistoryBuffer<F>) -> Result<BevEmbedding<F>> {
        let out = self.forward(current, history)?;
        match self.config.history_source {
            HistorySource::Refined => history.push(out.clone())?,
            HistorySource::Raw => history.push(current.clone())?,
        }
        Ok(out)
    }
}

impl<F: Real> Parameters<F> for TemporalFusion<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.query_estimator.visit(&scoped(prefix, "query_estimator"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&scoped(prefix, &format!("blocks.{i}")), f);
        }
        self.aggregate_estimator.visit(&scoped(prefix, "aggregate_estimator"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.query_estimator.visit_mut(&scoped(prefix, "query_estimator"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&scoped(prefix, &format!("blocks.{i}")), f);
        }
        self.aggregate_estimator.visit_mut(&scoped(prefix, "aggregate_estimator"), f);
    }
}
