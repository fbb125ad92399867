mod common;

use common::{rel_error, rng};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use tempcobev::objectives::{
    iou_loss, iou_loss_with_grad, iou_metric, weighted_cross_entropy,
    weighted_cross_entropy_with_grad, GroundTruthMap,
};

fn random_case(seed: u64, h: usize, w: usize) -> (Array2<f64>, GroundTruthMap) {
    let mut r = rng(seed);
    let l = Array2::from_shape_fn((h, w), |_| r.random_range(-3.0..3.0));
    let g = GroundTruthMap(Array2::from_shape_fn((h, w), |_| r.random_bool(0.4)));
    (l, g)
}

fn central_diff(f: impl Fn(&Array2<f64>) -> f64, l: &Array2<f64>, eps: f64) -> Array2<f64> {
    let mut out = Array2::zeros(l.dim());
    for (idx, o) in out.indexed_iter_mut() {
        let mut up = l.clone();
        up[idx] += eps;
        let mut down = l.clone();
        down[idx] -= eps;
        *o = (f(&up) - f(&down)) / (2.0 * eps);
    }
    out
}

#[test]
fn iou_loss_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let (l, g) = random_case(seed, 4, 4);
        let (_, grad) = iou_loss_with_grad(&l, &g).unwrap();
        let num = central_diff(|x| iou_loss(x, &g).unwrap(), &l, 1e-4);
        for (a, n) in grad.iter().zip(num.iter()) {
            assert!(rel_error(*a, *n) <= 1e-3, "seed {seed}: {a} vs {n}");
        }
    }
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let (l, g) = random_case(3, 4, 4);
    let (_, grad) = weighted_cross_entropy_with_grad(&l, &g, 2.0).unwrap();
    let num = central_diff(|x| weighted_cross_entropy(x, &g, 2.0).unwrap(), &l, 1e-4);
    for (a, n) in grad.iter().zip(num.iter()) {
        assert!(rel_error(*a, *n) <= 1e-4);
    }
}

#[test]
fn cross_entropy_is_stable_for_extreme_logits() {
    let l = Array2::from_elem((2, 2), 1e4f64);
    let g = GroundTruthMap(Array2::from_elem((2, 2), false));
    let v = weighted_cross_entropy(&l, &g, 2.0).unwrap();
    assert!(v.is_finite() && (v - 1e4).abs() < 1e-6);
}

fn scalar_iou_oracle(l: &[f64], g: &[bool]) -> f64 {
    let mut i = 0.0;
    let mut u = 0.0;
    for (&l, &g) in l.iter().zip(g) {
        let p = 1.0 / (1.0 + (-l).exp());
        let g = if g { 1.0 } else { 0.0 };
        i += p * g;
        u += p + g - p * g;
    }
    1.0 - (1.0 + i) / (1.0 + u)
}

proptest! {
    #[test]
    fn iou_loss_in_unit_interval_and_matches_oracle(
        l in prop::collection::vec(-30.0f64..30.0, 12),
        g in prop::collection::vec(any::<bool>(), 12),
    ) {
        let la = Array2::from_shape_vec((3, 4), l.clone()).unwrap();
        let ga = GroundTruthMap(Array2::from_shape_vec((3, 4), g.clone()).unwrap());
        let v = iou_loss(&la, &ga).unwrap();
        prop_assert!((0.0..1.0).contains(&v));
        prop_assert!((v - scalar_iou_oracle(&l, &g)).abs() < 1e-12);
    }

    #[test]
    fn iou_loss_monotone_toward_label(
        l in prop::collection::vec(-5.0f64..5.0, 9),
        g in prop::collection::vec(any::<bool>(), 9),
        idx in 0usize..9,
        step in 0.05f64..2.0,
    ) {
        let la = Array2::from_shape_vec((3, 3), l).unwrap();
        let ga = GroundTruthMap(Array2::from_shape_vec((3, 3), g.clone()).unwrap());
        let before = iou_loss(&la, &ga).unwrap();
        let mut moved = la.clone();
        let k = (idx / 3, idx % 3);
        moved[k] += if g[idx] { step } else { -step };
        let after = iou_loss(&moved, &ga).unwrap();
        prop_assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn iou_metric_permutation_invariant(seed in 0u64..1000, perm_seed in 0u64..1000) {
        let (l, g) = random_case(seed, 4, 5);
        let mut order: Vec<usize> = (0..20).collect();
        let mut r = rng(perm_seed);
        for i in (1..order.len()).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        let lf: Vec<f64> = l.iter().copied().collect();
        let gf: Vec<bool> = g.0.iter().copied().collect();
        let lp = Array2::from_shape_fn((4, 5), |(i, j)| lf[order[i * 5 + j]]);
        let gp = GroundTruthMap(Array2::from_shape_fn((4, 5), |(i, j)| gf[order[i * 5 + j]]));
        prop_assert_eq!(iou_metric(&l, &g, 0.5).unwrap(), iou_metric(&lp, &gp, 0.5).unwrap());
    }
}
