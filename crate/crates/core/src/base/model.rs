use ndarray::{Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::fusion::FusionKind;
use crate::bev::{BevEmbedding, EmbeddingSource};
use crate::error::{Error, Result};
use crate::nn::{
    relu_backward, relu_inplace, scoped, BatchNorm2d, BatchNormCache, Conv2d, Parameters, Upsample,
};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseConfig {
    /// Embedding channels `C`.
    pub channels: usize,
    /// Observation-to-embedding downsampling: 1, 2 or 4.
    pub downsample: usize,
    pub encoder_widths: [usize; 2],
    pub decoder_widths: [usize; 3],
    pub fusion: FusionKind,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            downsample: 4,
            encoder_widths: [16, 32],
            decoder_widths: [32, 16, 16],
            fusion: FusionKind::Max,
        }
    }
}

impl BaseConfig {
    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4].contains(&self.downsample) {
            return Err(Error::Config(format!(
                "downsample must be 1, 2 or 4, got {}",
                self.downsample
            )));
        }
        if self.channels == 0
            || self.encoder_widths.contains(&0)
            || self.decoder_widths.contains(&0)
        {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Stride of the two downsampling encoder stages.
    fn encoder_strides(&self) -> [usize; 2] {
        match self.downsample {
            4 => [2, 2],
            2 => [2, 1],
            _ => [1, 1],
        }
    }

    /// Upsampling factors of the three decoder stages.
    pub fn decoder_factors(&self) -> [usize; 3] {
        match self.downsample {
            4 => [2, 2, 1],
            2 => [2, 1, 1],
            _ => [1, 1, 1],
        }
    }

    pub fn embedding_size(&self, grid_cells: usize) -> usize {
        grid_cells / self.downsample
    }
}

/// Bias-free convolutional encoder: an all-zero observation maps to an all-zero embedding.
#[derive(Clone, Debug)]
pub struct Encoder<F: Real> {
    pub conv1: Conv2d<F>,
    pub conv2: Conv2d<F>,
    pub conv3: Conv2d<F>,
}

#[derive(Clone, Debug)]
pub struct EncoderCache<F: Real> {
    input_dim: (usize, usize, usize),
    cols1: Array2<F>,
    a1: Array3<F>,
    cols2: Array2<F>,
    a2: Array3<F>,
    cols3: Array2<F>,
}

impl<F: Real> Encoder<F> {
    pub fn new<R: Rng + ?Sized>(cfg: &BaseConfig, rng: &mut R) -> Self {
        let [w1, w2] = cfg.encoder_widths;
        let [s1, s2] = cfg.encoder_strides();
        Self {
            conv1: Conv2d::new(1, w1, 3, 1, false, rng),
            conv2: Conv2d::new(w1, w2, 3, s1, false, rng),
            conv3: Conv2d::new(w2, cfg.channels, 3, s2, false, rng),
        }
    }

    pub fn forward(&self, x: &Array3<F>) -> (Array3<F>, EncoderCache<F>) {
        let (mut a1, cols1) = self.conv1.forward(x);
        relu_inplace(&mut a1);
        let (mut a2, cols2) = self.conv2.forward(&a1);
        relu_inplace(&mut a2);
        let (y, cols3) = self.conv3.forward(&a2);
        let cache = EncoderCache {
            input_dim: x.dim(),
            cols1,
            a1,
            cols2,
            a2,
            cols3,
        };
        (y, cache)
    }

    pub fn backward(&self, cache: &EncoderCache<F>, dy: &Array3<F>, grads: &mut Self) {
        let mut d2 = self
            .conv3
            .backward(&cache.cols3, cache.a2.dim(), dy, Some(&mut grads.conv3), true)
            .expect("input grad");
        relu_backward(&cache.a2, &mut d2);
        let mut d1 = self
            .conv2
            .backward(&cache.cols2, cache.a1.dim(), &d2, Some(&mut grads.conv2), true)
            .expect("input grad");
        relu_backward(&cache.a1, &mut d1);
        self.conv1
            .backward(&cache.cols1, cache.input_dim, &d1, Some(&mut grads.conv1), false);
    }
}

impl<F: Real> Parameters<F> for Encoder<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.conv1.visit(&scoped(prefix, "conv1"), f);
        self.conv2.visit(&scoped(prefix, "conv2"), f);
        self.conv3.visit(&scoped(prefix, "conv3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.conv1.visit_mut(&scoped(prefix, "conv1"), f);
        self.conv2.visit_mut(&scoped(prefix, "conv2"), f);
        self.conv3.visit_mut(&scoped(prefix, "conv3"), f);
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage<F: Real> {
    pub up: Upsample,
    pub conv: Conv2d<F>,
    pub norm: BatchNorm2d<F>,
}

/// Three upsample/conv/BN/ReLU stages and a 1x1 logit head.
#[derive(Clone, Debug)]
pub struct Decoder<F: Real> {
    pub stages: Vec<DecoderStage<F>>,
    pub head: Conv2d<F>,
}

#[derive(Clone, Debug)]
struct StageCache<F: Real> {
    up_dim: (usize, usize, usize),
    cols: Vec<Array2<F>>,
    bn: BatchNormCache<F>,
    act: Vec<Array3<F>>,
}

#[derive(Clone, Debug)]
pub struct DecoderCache<F: Real> {
    stages: Vec<StageCache<F>>,
    head_cols: Vec<Array2<F>>,
    head_in: (usize, usize, usize),
}

/// Batch statistics from a training-mode pass, one `((mean, var), count)` per stage.
pub type DecoderStats<F> = Vec<((ndarray::Array1<F>, ndarray::Array1<F>), usize)>;

impl<F: Real> Decoder<F> {
    pub fn new<R: Rng + ?Sized>(cfg: &BaseConfig, rng: &mut R) -> Self {
        let mut cin = cfg.channels;
        let stages = cfg
            .decoder_widths
            .iter()
            .zip(cfg.decoder_factors())
            .map(|(&w, factor)| {
                let stage = DecoderStage {
                    up: Upsample { factor },
                    conv: Conv2d::new(cin, w, 3, 1, false, rng),
                    norm: BatchNorm2d::new(w),
                };
                cin = w;
                stage
            })
            .collect();
        Self {
            stages,
            head: Conv2d::new(cin, 1, 1, 1, true, rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.stages[0].conv.in_channels
    }

    pub fn scale(&self) -> usize {
        self.stages.iter().map(|s| s.up.factor).product()
    }

    /// Logits for a batch; BN uses batch statistics when `training`.
    pub fn forward(
        &self,
        xs: &[Array3<F>],
        training: bool,
    ) -> (Vec<Array2<F>>, DecoderCache<F>, DecoderStats<F>) {
        let mut cur: Vec<Array3<F>> = xs.to_vec();
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut stats = Vec::new();
        for st in &self.stages {
            let ups: Vec<Array3<F>> = cur.iter().map(|x| st.up.forward(x)).collect();
            let up_dim = ups[0].dim();
            let (convs, cols): (Vec<_>, Vec<_>) = ups.iter().map(|u| st.conv.forward(u)).unzip();
            let (mut act, bn, s) = st.norm.forward(&convs, training);
            act.iter_mut().for_each(relu_inplace);
            let count = act.len() * act[0].len() / st.norm.gamma.len();
            stats.extend(s.map(|s| (s, count)));
            cur = act.clone();
            caches.push(StageCache { up_dim, cols, bn, act });
        }
        let head_in = cur[0].dim();
        let (logits, head_cols): (Vec<_>, Vec<_>) = cur
            .iter()
            .map(|x| {
                let (y, cols) = self.head.forward(x);
                (y.index_axis_move(Axis(0), 0), cols)
            })
            .unzip();
        let cache = DecoderCache {
            stages: caches,
            head_cols,
            head_in,
        };
        (logits, cache, stats)
    }

    /// Gradient with respect to the decoder inputs; parameter gradients are
    /// accumulated into `grads` when given (a frozen decoder passes `None`).
    pub fn backward(
        &self,
        cache: &DecoderCache<F>,
        dlogits: &[Array2<F>],
        mut grads: Option<&mut Self>,
    ) -> Vec<Array3<F>> {
        let mut cur: Vec<Array3<F>> = dlogits
            .iter()
            .zip(&cache.head_cols)
            .map(|(d, cols)| {
                let d3 = d.clone().insert_axis(Axis(0));
                self.head
                    .backward(cols, cache.head_in, &d3, grads.as_deref_mut().map(|g| &mut g.head), true)
                    .expect("input grad")
            })
            .collect();
        for (k, (st, sc)) in self.stages.iter().zip(&cache.stages).enumerate().rev() {
            for (d, a) in cur.iter_mut().zip(&sc.act) {
                relu_backward(a, d);
            }
            let dconv = st.norm.backward(
                &sc.bn,
                &cur,
                grads.as_deref_mut().map(|g| &mut g.stages[k].norm),
            );
            cur = dconv
                .iter()
                .zip(&sc.cols)
                .map(|(d, cols)| {
                    let dup = st
                        .conv
                        .backward(cols, sc.up_dim, d, grads.as_deref_mut().map(|g| &mut g.stages[k].conv), true)
                        .expect("input grad");
                    st.up.backward(&dup)
                })
                .collect();
        }
        cur
    }

    pub fn update_running(&mut self, stats: &DecoderStats<F>) {
        for (st, (s, count)) in self.stages.iter_mut().zip(stats) {
            st.norm.update_running(s, *count);
        }
    }
}

impl<F: Real> Parameters<F> for Decoder<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        for (i, st) in self.stages.iter().enumerate() {
            let p = scoped(prefix, &format!("stage{i}"));
            st.conv.visit(&scoped(&p, "conv"), f);
            st.norm.visit(&scoped(&p, "norm"), f);
        }
        self.head.visit(&scoped(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        for (i, st) in self.stages.iter_mut().enumerate() {
            let p = scoped(prefix, &format!("stage{i}"));
            st.conv.visit_mut(&scoped(&p, "conv"), f);
            st.norm.visit_mut(&scoped(&p, "norm"), f);
        }
        self.head.visit_mut(&scoped(prefix, "head"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        for (i, st) in self.stages.iter().enumerate() {
            let p = scoped(prefix, &format!("stage{i}"));
            st.norm.visit_buffers(&scoped(&p, "norm"), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        for (i, st) in self.stages.iter_mut().enumerate() {
            let p = scoped(prefix, &format!("stage{i}"));
            st.norm.visit_buffers_mut(&scoped(&p, "norm"), f);
        }
    }
}

/// Per-agent encoder, agent fusion and decoder.
#[derive(Clone, Debug)]
pub struct BaseModel<F: Real> {
    pub config: BaseConfig,
    pub encoder: Encoder<F>,
    pub decoder: Decoder<F>,
}

pub fn observation_tensor<F: Real>(obs: &Array2<bool>) -> Array3<F> {
    obs.mapv(|v| if v { F::one() } else { F::zero() }).insert_axis(Axis(0))
}

impl<F: Real> BaseModel<F> {
    pub fn new<R: Rng + ?Sized>(config: BaseConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder: Encoder::new(&config, rng),
            decoder: Decoder::new(&config, rng),
            config,
        })
    }

    /// Embedding of one agent's (ego-frame) observation.
    pub fn encode(&self, obs: &Array2<bool>, frame_index: i64) -> Result<BevEmbedding<F>> {
        let (h, w) = obs.dim();
        let d = self.config.downsample;
        if h == 0 || h != w || h % d != 0 {
            return Err(Error::Argument(format!(
                "observation {h}x{w} must be square and divisible by {d}"
            )));
        }
        let (y, _) = self.encoder.forward(&observation_tensor(obs));
        BevEmbedding::new(y, frame_index, EmbeddingSource::EgoOnly)
    }

    /// Logits at observation resolution, BN in evaluation mode.
    pub fn decode(&self, emb: &BevEmbedding<F>) -> Result<Array2<F>> {
        let (c, h, w) = emb.shape();
        if c != self.config.channels || h != w {
            return Err(Error::shape(
                format!("({}, H, H)", self.config.channels),
                format!("{:?}", emb.shape()),
            ));
        }
        let (mut out, _, _) = self.decoder.forward(std::slice::from_ref(&emb.data), false);
        Ok(out.pop().expect("one output"))
    }

    pub fn fusion(&self) -> FusionKind {
        self.config.fusion
    }
}

impl<F: Real> Parameters<F> for BaseModel<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.encoder.visit(&scoped(prefix, "encoder"), f);
        self.decoder.visit(&scoped(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.encoder.visit_mut(&scoped(prefix, "encoder"), f);
        self.decoder.visit_mut(&scoped(prefix, "decoder"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.decoder.visit_buffers(&scoped(prefix, "decoder"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.decoder.visit_buffers_mut(&scoped(prefix, "decoder"), f);
    }
}
