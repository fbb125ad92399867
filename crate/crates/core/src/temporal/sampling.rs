use ndarray::{Array1, Array2};

use crate::bev::BevEmbedding;
use crate::real::Real;

/// The four integer neighbors of a fractional position and their bilinear weights.
/// Neighbors outside the grid are `None` (zero padding).
#[derive(Clone, Copy, Debug)]
pub(crate) struct Corners<F: Real> {
    pub idx: [Option<usize>; 4],
    pub w: [F; 4],
    pub fx: F,
    pub fy: F,
}

#[inline]
pub(crate) fn corners<F: Real>(x: F, y: F, height: usize, width: usize) -> Corners<F> {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (xi, yi) = (x0.as_f64() as i64, y0.as_f64() as i64);
    let at = |cx: i64, cy: i64| {
        (cx >= 0 && cy >= 0 && (cx as usize) < width && (cy as usize) < height)
            .then(|| cy as usize * width + cx as usize)
    };
    let one = F::one();
    Corners {
        idx: [at(xi, yi), at(xi + 1, yi), at(xi, yi + 1), at(xi + 1, yi + 1)],
        w: [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy],
        fx,
        fy,
    }
}

/// Accumulates `scale * sample` of token columns `[c0, c0 + out.len())` into `out`.
#[inline]
pub(crate) fn gather<F: Real>(values: &Array2<F>, c: &Corners<F>, c0: usize, scale: F, out: &mut [F]) {
    let n = out.len();
    for k in 0..4 {
        if let Some(i) = c.idx[k] {
            let wk = scale * c.w[k];
            if wk == F::zero() {
                continue;
            }
            let row = values.row(i);
            let row = row.as_slice().expect("contiguous token rows");
            for (o, &v) in out.iter_mut().zip(&row[c0..c0 + n]) {
                *o += wk * v;
            }
        }
    }
}

/// Bilinear interpolation of every channel at `(x, y)` in pixel coordinates
/// (`x` along width, `y` along height), zero outside the grid.
pub fn bilinear_sample<F: Real>(emb: &BevEmbedding<F>, x: F, y: F) -> Array1<F> {
    let (ch, h, w) = emb.shape();
    let c = corners(x, y, h, w);
    let mut out = Array1::zeros(ch);
    for k in 0..4 {
        if let Some(i) = c.idx[k] {
            let (py, px) = (i / w, i % w);
            for (ci, o) in out.iter_mut().enumerate() {
                *o += c.w[k] * emb.data[[ci, py, px]];
            }
        }
    }
    out
}
