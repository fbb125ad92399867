use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;

use super::params::{scoped, Parameters};
use super::uniform_array2;
use crate::real::Real;

/// 2-D convolution over a single `[C, H, W]` image, lowered to a matrix product via im2col.
#[derive(Clone, Debug)]
pub struct Conv2d<F: Real> {
    /// `[out_channels, in_channels * k * k]`
    pub weight: Array2<F>,
    pub bias: Option<Array1<F>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl<F: Real> Conv2d<F> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            weight: uniform_array2(out_channels, fan_in, bound, rng),
            bias: bias.then(|| Array1::zeros(out_channels)),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        let p = self.padding;
        ((h + 2 * p - k) / self.stride + 1, (w + 2 * p - k) / self.stride + 1)
    }

    fn im2col(&self, x: &Array3<F>) -> Array2<F> {
        let (cin, h, w) = x.dim();
        let (ho, wo) = self.output_size(h, w);
        let k = self.kernel;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut cols = Array2::zeros((cin * k * k, ho * wo));
        let cs = cols.as_slice_mut().expect("fresh array");
        let n = ho * wo;
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cs[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &xs[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<F>, (cin, h, w): (usize, usize, usize)) -> Array3<F> {
        let (ho, wo) = self.output_size(h, w);
        let k = self.kernel;
        let n = ho * wo;
        let cs = cols.as_slice().expect("standard layout");
        let mut x = Array3::zeros((cin, h, w));
        let xs = x.as_slice_mut().expect("fresh array");
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cs[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                xs[base + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns the output and the im2col buffer needed by [`Conv2d::backward`].
    pub fn forward(&self, x: &Array3<F>) -> (Array3<F>, Array2<F>) {
        let (_, h, w) = x.dim();
        let (ho, wo) = self.output_size(h, w);
        let cols = self.im2col(x);
        let mut y = self.weight.dot(&cols);
        if let Some(b) = &self.bias {
            y += &b.view().insert_axis(Axis(1));
        }
        let y = y
            .into_shape_with_order((self.out_channels, ho, wo))
            .expect("conv output shape");
        (y, cols)
    }

    pub fn backward(
        &self,
        cols: &Array2<F>,
        input_dim: (usize, usize, usize),
        dy: &Array3<F>,
        grads: Option<&mut Self>,
        need_input_grad: bool,
    ) -> Option<Array3<F>> {
        let (cout, ho, wo) = dy.dim();
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((cout, ho * wo))
            .expect("conv grad shape");
        if let Some(g) = grads {
            ndarray::linalg::general_mat_mul(F::one(), &dy2, &cols.t(), F::one(), &mut g.weight);
            if let Some(gb) = g.bias.as_mut() {
                *gb += &dy2.sum_axis(Axis(1));
            }
        }
        need_input_grad.then(|| {
            let dcols = self.weight.t().dot(&dy2);
            self.col2im(&dcols, input_dim)
        })
    }
}

impl<F: Real> Parameters<F> for Conv2d<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f(&scoped(prefix, "weight"), self.weight.view().into_dyn());
        if let Some(b) = &self.bias {
            f(&scoped(prefix, "bias"), b.view().into_dyn());
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        f(&scoped(prefix, "weight"), self.weight.view_mut().into_dyn());
        if let Some(b) = self.bias.as_mut() {
            f(&scoped(prefix, "bias"), b.view_mut().into_dyn());
        }
    }
}

/// Batch normalization over `[C, H, W]` images, statistics per channel across the batch.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<F: Real> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub momentum: F,
    pub eps: F,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<F: Real> {
    xhat: Vec<Array3<F>>,
    inv_std: Array1<F>,
    training: bool,
}

impl<F: Real> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: F::lit(0.1),
            eps: F::lit(1e-5),
        }
    }

    /// Training mode normalizes with batch statistics and returns them for
    /// [`BatchNorm2d::update_running`]; evaluation mode uses running statistics.
    pub fn forward(
        &self,
        xs: &[Array3<F>],
        training: bool,
    ) -> (Vec<Array3<F>>, BatchNormCache<F>, Option<(Array1<F>, Array1<F>)>) {
        let c = self.gamma.len();
        let (mean, var, stats) = if training {
            let count = F::lit((xs.len() * xs[0].len() / c) as f64);
            let mut mean = Array1::zeros(c);
            for x in xs {
                mean += &x.sum_axis(Axis(2)).sum_axis(Axis(1));
            }
            mean.mapv_inplace(|v| v / count);
            let mut var = Array1::<F>::zeros(c);
            for x in xs {
                for (ci, plane) in x.axis_iter(Axis(0)).enumerate() {
                    let m = mean[ci];
                    var[ci] += plane.iter().map(|&v| (v - m) * (v - m)).sum::<F>();
                }
            }
            var.mapv_inplace(|v| v / count);
            (mean.clone(), var.clone(), Some((mean, var)))
        } else {
            (self.running_mean.clone(), self.running_var.clone(), None)
        };
        let inv_std = var.mapv(|v| F::one() / (v + self.eps).sqrt());
        let mut xhat = Vec::with_capacity(xs.len());
        let mut ys = Vec::with_capacity(xs.len());
        for x in xs {
            let mut h = x.clone();
            let mut y = x.clone();
            for ci in 0..c {
                let (m, s, g, b) = (mean[ci], inv_std[ci], self.gamma[ci], self.beta[ci]);
                Zip::from(h.index_axis_mut(Axis(0), ci))
                    .and(y.index_axis_mut(Axis(0), ci))
                    .for_each(|hv, yv| {
                        *hv = (*hv - m) * s;
                        *yv = *hv * g + b;
                    });
            }
            xhat.push(h);
            ys.push(y);
        }
        (
            ys,
            BatchNormCache {
                xhat,
                inv_std,
                training,
            },
            stats,
        )
    }

    pub fn update_running(&mut self, stats: &(Array1<F>, Array1<F>), count: usize) {
        let m = self.momentum;
        let unbias = if count > 1 {
            F::lit(count as f64 / (count - 1) as f64)
        } else {
            F::one()
        };
        Zip::from(&mut self.running_mean)
            .and(&stats.0)
            .for_each(|r, &v| *r = (F::one() - m) * *r + m * v);
        Zip::from(&mut self.running_var)
            .and(&stats.1)
            .for_each(|r, &v| *r = (F::one() - m) * *r + m * v * unbias);
    }

    pub fn backward(
        &self,
        cache: &BatchNormCache<F>,
        dys: &[Array3<F>],
        grads: Option<&mut Self>,
    ) -> Vec<Array3<F>> {
        let c = self.gamma.len();
        let mut sum_dy = Array1::<F>::zeros(c);
        let mut sum_dy_xhat = Array1::<F>::zeros(c);
        for (dy, xh) in dys.iter().zip(&cache.xhat) {
            for ci in 0..c {
                let d = dy.index_axis(Axis(0), ci);
                let h = xh.index_axis(Axis(0), ci);
                sum_dy[ci] += d.sum();
                sum_dy_xhat[ci] += Zip::from(&d).and(&h).fold(F::zero(), |acc, &a, &b| acc + a * b);
            }
        }
        if let Some(g) = grads {
            g.gamma += &sum_dy_xhat;
            g.beta += &sum_dy;
        }
        let count = F::lit((dys.len() * dys[0].len() / c) as f64);
        dys.iter()
            .zip(&cache.xhat)
            .map(|(dy, xh)| {
                let mut dx = dy.clone();
                for ci in 0..c {
                    let k = self.gamma[ci] * cache.inv_std[ci];
                    let (sd, sdx) = (sum_dy[ci] / count, sum_dy_xhat[ci] / count);
                    let training = cache.training;
                    Zip::from(dx.index_axis_mut(Axis(0), ci))
                        .and(xh.index_axis(Axis(0), ci))
                        .for_each(|d, &h| {
                            *d = if training { k * (*d - sd - h * sdx) } else { k * *d };
                        });
                }
                dx
            })
            .collect()
    }
}

impl<F: Real> Parameters<F> for BatchNorm2d<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f(&scoped(prefix, "gamma"), self.gamma.view().into_dyn());
        f(&scoped(prefix, "beta"), self.beta.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        f(&scoped(prefix, "gamma"), self.gamma.view_mut().into_dyn());
        f(&scoped(prefix, "beta"), self.beta.view_mut().into_dyn());
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f(&scoped(prefix, "running_mean"), self.running_mean.view().into_dyn());
        f(&scoped(prefix, "running_var"), self.running_var.view().into_dyn());
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        f(&scoped(prefix, "running_mean"), self.running_mean.view_mut().into_dyn());
        f(&scoped(prefix, "running_var"), self.running_var.view_mut().into_dyn());
    }
}

/// Row-interpolation matrix `[n_out, n_in]` for half-pixel-centered bilinear resizing.
pub fn interp_matrix<F: Real>(n_in: usize, n_out: usize) -> Array2<F> {
    let mut m = Array2::zeros((n_out, n_in));
    let ratio = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let l = src - i0 as f64;
        m[[o, i0]] += F::lit(1.0 - l);
        m[[o, i1]] += F::lit(l);
    }
    m
}

/// Bilinear upsampling by an integer factor (factor 1 is the identity).
#[derive(Clone, Copy, Debug)]
pub struct Upsample {
    pub factor: usize,
}

impl Upsample {
    pub fn forward<F: Real>(&self, x: &Array3<F>) -> Array3<F> {
        if self.factor == 1 {
            return x.clone();
        }
        let (c, h, w) = x.dim();
        let uh = interp_matrix::<F>(h, h * self.factor);
        let uw = interp_matrix::<F>(w, w * self.factor);
        let mut y = Array3::zeros((c, h * self.factor, w * self.factor));
        for (plane, mut out) in x.axis_iter(Axis(0)).zip(y.axis_iter_mut(Axis(0))) {
            out.assign(&uh.dot(&plane).dot(&uw.t()));
        }
        y
    }

    pub fn backward<F: Real>(&self, dy: &Array3<F>) -> Array3<F> {
        if self.factor == 1 {
            return dy.clone();
        }
        let (c, ho, wo) = dy.dim();
        let (h, w) = (ho / self.factor, wo / self.factor);
        let uh = interp_matrix::<F>(h, ho);
        let uw = interp_matrix::<F>(w, wo);
        let mut dx = Array3::zeros((c, h, w));
        for (plane, mut out) in dy.axis_iter(Axis(0)).zip(dx.axis_iter_mut(Axis(0))) {
            out.assign(&uh.t().dot(&plane).dot(&uw));
        }
        dx
    }
}

pub fn relu_inplace<F: Real>(x: &mut Array3<F>) {
    x.mapv_inplace(|v| v.max(F::zero()));
}

/// Zeroes `dy` wherever the post-activation output was not positive.
pub fn relu_backward<F: Real>(activated: &Array3<F>, dy: &mut Array3<F>) {
    Zip::from(dy).and(activated).for_each(|g, &a| {
        if a <= F::zero() {
            *g = F::zero()
        }
    });
}
