use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, Zip};
use sha2::{Digest, Sha256};

use crate::real::Real;

/// Walks the named arrays of a layer or model.
///
/// `visit`/`visit_mut` cover trainable parameters; buffers (running
/// statistics) are persisted and digested but never optimized.
pub trait Parameters<F: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>));
    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {}
    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {}
}

pub fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A copy of `m` with every trainable parameter set to zero; used as a gradient accumulator.
pub fn zeroed<F: Real, M: Parameters<F> + Clone>(m: &M) -> M {
    let mut z = m.clone();
    z.visit_mut("", &mut |_, mut a| a.fill(F::zero()));
    z
}

fn collect<F: Real, M: Parameters<F>>(m: &M) -> Vec<ArrayD<F>> {
    let mut out = Vec::new();
    m.visit("", &mut |_, a| out.push(a.to_owned()));
    out
}

/// `dst += src` over trainable parameters.
pub fn accumulate<F: Real, M: Parameters<F>>(dst: &mut M, src: &M) {
    let src = collect(src);
    let mut i = 0;
    dst.visit_mut("", &mut |_, mut a| {
        Zip::from(&mut a).and(&src[i]).for_each(|d, &s| *d += s);
        i += 1;
    });
}

pub fn scale<F: Real, M: Parameters<F>>(m: &mut M, s: F) {
    m.visit_mut("", &mut |_, mut a| a.mapv_inplace(|v| v * s));
}

pub fn num_params<F: Real, M: Parameters<F>>(m: &M) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, a| n += a.len());
    n
}

pub fn flatten<F: Real, M: Parameters<F>>(m: &M) -> Vec<F> {
    let mut out = Vec::new();
    m.visit("", &mut |_, a| out.extend(a.iter().copied()));
    out
}

pub fn set_flat<F: Real, M: Parameters<F>>(m: &mut M, values: &[F]) {
    let mut i = 0;
    m.visit_mut("", &mut |_, mut a| {
        for v in a.iter_mut() {
            *v = values[i];
            i += 1;
        }
    });
    assert_eq!(i, values.len(), "flat parameter length mismatch");
}

pub fn max_abs<F: Real, M: Parameters<F>>(m: &M) -> F {
    let mut best = F::zero();
    m.visit("", &mut |_, a| {
        for &v in a.iter() {
            best = best.max(v.abs());
        }
    });
    best
}

/// SHA-256 over names, shapes and float32 bytes of all parameters and buffers.
pub fn digest<F: Real, M: Parameters<F>>(m: &M) -> String {
    let mut hasher = Sha256::new();
    let mut feed = |name: &str, a: ArrayViewD<'_, F>| {
        hasher.update(name.as_bytes());
        for &d in a.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in a.iter() {
            hasher.update(v.as_f32().to_le_bytes());
        }
    };
    m.visit("", &mut feed);
    m.visit_buffers("", &mut feed);
    hex::encode(hasher.finalize())
}
