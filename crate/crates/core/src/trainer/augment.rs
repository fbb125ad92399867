use ndarray::{s, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::objectives::GroundTruthMap;
use crate::store::{FrameSequence, FrameSource};

/// Spatial augmentations enabled for training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugFlags {
    pub flip: bool,
    pub rot90: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialTransform {
    Identity,
    /// Reverse the column axis.
    FlipH,
    /// Counter-clockwise rotation by `k * 90` degrees, `k` in 1..=3.
    Rot90(u8),
}

/// Each non-final frame independently drops from fused to ego-only with
/// probability `prob`; the final frame keeps its scheduled source.
pub fn comm_augment<R: Rng + ?Sized>(mask: &[FrameSource], prob: f64, rng: &mut R) -> Vec<FrameSource> {
    let last = mask.len().saturating_sub(1);
    mask.iter()
        .enumerate()
        .map(|(i, &src)| {
            if i < last && src == FrameSource::Fused && prob > 0.0 && rng.random_bool(prob.min(1.0)) {
                FrameSource::EgoOnly
            } else {
                src
            }
        })
        .collect()
}

pub fn draw_transform<R: Rng + ?Sized>(flags: AugFlags, rng: &mut R) -> SpatialTransform {
    let mut options = vec![SpatialTransform::Identity];
    if flags.flip {
        options.push(SpatialTransform::FlipH);
    }
    if flags.rot90 {
        options.extend((1..=3).map(SpatialTransform::Rot90));
    }
    if options.len() == 1 {
        return SpatialTransform::Identity;
    }
    options[rng.random_range(0..options.len())]
}

fn rot90_once<T: Clone>(a: &Array2<T>) -> Array2<T> {
    a.t().slice(s![..;-1, ..]).to_owned()
}

pub fn transform_map<T: Clone>(a: &Array2<T>, t: SpatialTransform) -> Array2<T> {
    match t {
        SpatialTransform::Identity => a.clone(),
        SpatialTransform::FlipH => a.slice(s![.., ..;-1]).to_owned(),
        SpatialTransform::Rot90(k) => {
            let mut out = a.clone();
            for _ in 0..k {
                out = rot90_once(&out);
            }
            out
        }
    }
}

pub fn transform_embedding(a: &Array3<f32>, t: SpatialTransform) -> Array3<f32> {
    if t == SpatialTransform::Identity {
        return a.clone();
    }
    let planes: Vec<Array2<f32>> = a.outer_iter().map(|p| transform_map(&p.to_owned(), t)).collect();
    let (h, w) = planes[0].dim();
    let mut out = Array3::zeros((a.dim().0, h, w));
    for (mut o, p) in out.outer_iter_mut().zip(&planes) {
        o.assign(p);
    }
    out
}

/// Applies one transform, drawn per sequence, to every embedding and map.
pub fn spatial_augment<R: Rng + ?Sized>(seq: &FrameSequence, flags: AugFlags, rng: &mut R) -> FrameSequence {
    apply_transform(seq, draw_transform(flags, rng))
}

pub fn apply_transform(seq: &FrameSequence, t: SpatialTransform) -> FrameSequence {
    if t == SpatialTransform::Identity {
        return seq.clone();
    }
    let mut out = seq.clone();
    for f in &mut out.frames {
        f.embedding = transform_embedding(&f.embedding, t);
        f.gt = GroundTruthMap(transform_map(&f.gt.0, t));
    }
    out
}
