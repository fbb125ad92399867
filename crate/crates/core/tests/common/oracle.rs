//! Independent reference implementations used as test oracles.

use ndarray::{Array2, Array3};
use tempcobev::bev::{BevEmbedding, ImportanceEstimator};
use tempcobev::nn::Linear;
use tempcobev::temporal::DeformableAttention;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-pixel importance from first principles: sigmoid of the max generated channel.
pub fn oracle_importance(e: &BevEmbedding<f64>, est: &ImportanceEstimator<f64>) -> Array2<f64> {
    let (c, h, w) = e.shape();
    let g = &est.generator;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let best = (0..g.output_dim())
            .map(|o| g.bias[o] + (0..c).map(|k| e.data[[k, y, x]] * g.weight[[k, o]]).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        sigmoid(best)
    })
}

/// Importance-weighted blend with an explicit per-pixel softmax over members.
pub fn oracle_fuse(members: &[&BevEmbedding<f64>], est: &ImportanceEstimator<f64>) -> Array3<f64> {
    let maps: Vec<Array2<f64>> = members.iter().map(|m| oracle_importance(m, est)).collect();
    let (c, h, w) = members[0].shape();
    Array3::from_shape_fn((c, h, w), |(k, y, x)| {
        let z: f64 = maps.iter().map(|m| m[[y, x]].exp()).sum();
        members
            .iter()
            .zip(&maps)
            .map(|(e, m)| m[[y, x]].exp() / z * e.data[[k, y, x]])
            .sum()
    })
}

/// Bilinear interpolation with zero padding, written independently of the crate.
pub fn oracle_bilinear(grid: &Array2<f64>, h: usize, w: usize, c0: usize, x: f64, y: f64, out: &mut [f64], scale: f64) {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    for (dx, dy, wt) in [
        (0.0, 0.0, (1.0 - fx) * (1.0 - fy)),
        (1.0, 0.0, fx * (1.0 - fy)),
        (0.0, 1.0, (1.0 - fx) * fy),
        (1.0, 1.0, fx * fy),
    ] {
        let (cx, cy) = (x0 + dx, y0 + dy);
        if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
            continue;
        }
        let token = cy as usize * w + cx as usize;
        for (i, o) in out.iter_mut().enumerate() {
            *o += scale * wt * grid[[token, c0 + i]];
        }
    }
}

pub fn linear(x: &Array2<f64>, l: &Linear<f64>) -> Array2<f64> {
    Array2::from_shape_fn((x.nrows(), l.output_dim()), |(i, o)| {
        l.bias[o] + (0..x.ncols()).map(|k| x[[i, k]] * l.weight[[k, o]]).sum::<f64>()
    })
}

/// Deformable cross-attention with explicit loops over heads, frames and keypoints.
pub fn oracle_deformable(
    d: &DeformableAttention<f64>,
    query: &Array2<f64>,
    frames: &[&Array2<f64>],
    h: usize,
    w: usize,
    offsets: &Array2<f64>,
) -> Array2<f64> {
    let c = query.ncols();
    let hd = c / d.heads;
    let logits = linear(query, &d.attn_weight_proj);
    let values: Vec<Array2<f64>> = frames.iter().map(|f| linear(f, &d.value_proj)).collect();
    let mut ctx = Array2::zeros((h * w, c));
    for p in 0..h * w {
        for a in 0..d.heads {
            let idx = |f: usize, m: usize| (a * d.frames + f) * d.keypoints + m;
            let z: f64 = (0..d.frames)
                .flat_map(|f| (0..d.keypoints).map(move |m| (f, m)))
                .map(|(f, m)| logits[[p, idx(f, m)]].exp())
                .sum();
            let mut acc = vec![0.0; hd];
            for f in 0..d.frames {
                for m in 0..d.keypoints {
                    let i = idx(f, m);
                    let x = (p % w) as f64 + offsets[[p, 2 * i]];
                    let y = (p / w) as f64 + offsets[[p, 2 * i + 1]];
                    oracle_bilinear(&values[f], h, w, a * hd, x, y, &mut acc, logits[[p, i]].exp() / z);
                }
            }
            for (k, v) in acc.into_iter().enumerate() {
                ctx[[p, a * hd + k]] = v;
            }
        }
    }
    linear(&ctx, &d.output_proj)
}

pub fn oracle_layer_norm(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        row.mapv_inplace(|v| (v - mean) / (var + 1e-5).sqrt());
    }
    y
}
