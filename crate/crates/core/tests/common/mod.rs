//! Dense reference implementations shared by the integration tests.
#![allow(dead_code)]

use cdl_core::{CodeMap, FilterBank};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The `N x C*Ne` block-Toeplitz matrix of full convolution with `h`.
pub fn dense_dict(h: &FilterBank, n: usize) -> DMatrix<f64> {
    let k = h.filter_len();
    let ne = n + 1 - k;
    let mut m = DMatrix::zeros(n, h.n_filters() * ne);
    for c in 0..h.n_filters() {
        for col in 0..ne {
            for (tap, &v) in h.filter(c).iter().enumerate() {
                m[(col + tap, c * ne + col)] = v;
            }
        }
    }
    m
}

/// Derivative of [`dense_dict`] with respect to tap `tap` of filter `c`.
pub fn dense_dict_partial(c_count: usize, k: usize, n: usize, c: usize, tap: usize) -> DMatrix<f64> {
    let ne = n + 1 - k;
    let mut m = DMatrix::zeros(n, c_count * ne);
    for col in 0..ne {
        m[(col + tap, c * ne + col)] = 1.0;
    }
    m
}

pub fn to_vector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

pub fn random_code<R: Rng>(channels: usize, len: usize, rng: &mut R) -> CodeMap {
    let data = (0..channels * len).map(|_| rng.random_range(-1.0..1.0)).collect();
    CodeMap::from_vec(channels, len, data).unwrap()
}

pub fn random_signal<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

pub fn soft(v: f64, b: f64) -> f64 {
    v.signum() * (v.abs() - b).max(0.0)
}

/// Sparse window `H x + noise` with a few spikes well above the encoder's
/// threshold `lambda sigma^2`.
pub fn sparse_window<R: Rng>(h: &FilterBank, n: usize, spikes: usize, amp: f64, noise: f64, rng: &mut R) -> Vec<f64> {
    let ne = n + 1 - h.filter_len();
    let mut x = CodeMap::zeros(h.n_filters(), ne);
    for _ in 0..spikes {
        let c = rng.random_range(0..h.n_filters());
        let at = rng.random_range(0..ne);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        x.set(c, at, sign * amp * rng.random_range(1.0..2.0));
    }
    let mut y = cdl_core::apply_dict(h, &x).unwrap();
    y.iter_mut().for_each(|v| *v += noise * rng.random_range(-1.0..1.0));
    y
}

/// Largest singular value squared of `m`.
pub fn spectral_sq(m: &DMatrix<f64>) -> f64 {
    let s = m.clone().svd(false, false).singular_values;
    let top = s.iter().cloned().fold(0.0_f64, f64::max);
    top * top
}
