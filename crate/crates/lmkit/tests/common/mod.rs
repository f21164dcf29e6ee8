//! Shared test oracles: central finite differences and seeded random data.
//!
//! The finite-difference machinery here is the independent gradient oracle;
//! it only ever calls forward evaluations and never touches the reverse-mode
//! path it is used to check.

#![allow(dead_code)]

use lmkit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform random tensor in [lo, hi).
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Central finite-difference gradient of `eval` with respect to every input
/// coordinate, step 1e-5.
pub fn finite_diff_grads(
    inputs: &[Tensor<f64>],
    eval: &dyn Fn(&[Tensor<f64>]) -> f64,
) -> Vec<Tensor<f64>> {
    const H: f64 = 1e-5;
    let mut grads = Vec::with_capacity(inputs.len());
    for which in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[which].shape());
        for coord in 0..inputs[which].len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[coord] += H;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[coord] -= H;
            grad.data_mut()[coord] = (eval(&plus) - eval(&minus)) / (2.0 * H);
        }
        grads.push(grad);
    }
    grads
}

/// Central finite difference for a sampled subset of coordinates of one
/// input; returns (coordinate, derivative) pairs.
pub fn finite_diff_sampled(
    inputs: &[Tensor<f64>],
    which: usize,
    coords: &[usize],
    eval: &dyn Fn(&[Tensor<f64>]) -> f64,
) -> Vec<(usize, f64)> {
    const H: f64 = 1e-5;
    coords
        .iter()
        .map(|&coord| {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[coord] += H;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[coord] -= H;
            (coord, (eval(&plus) - eval(&minus)) / (2.0 * H))
        })
        .collect()
}

/// Relative error with an absolute floor: central differences at step 1e-5
/// carry ~1e-10 of cancellation noise, so gradients below 1e-5 cannot be
/// resolved relatively and are compared absolutely instead.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-5 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

pub fn assert_grads_close(analytic: &Tensor<f64>, fd: &Tensor<f64>, tol: f64, what: &str) {
    assert_eq!(analytic.shape(), fd.shape(), "{what}: gradient shape");
    let mut worst = 0.0;
    let mut worst_at = 0;
    for (i, (&a, &f)) in analytic.data().iter().zip(fd.data()).enumerate() {
        let e = rel_err(a, f);
        if e > worst {
            worst = e;
            worst_at = i;
        }
    }
    assert!(
        worst < tol,
        "{what}: max rel err {worst:.3e} at coord {worst_at} \
         (analytic {}, fd {}), tol {tol:.1e}",
        analytic.data()[worst_at],
        fd.data()[worst_at]
    );
}

/// Deterministic pseudo-random token stream for corpus-level tests.
pub fn random_ids(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}
