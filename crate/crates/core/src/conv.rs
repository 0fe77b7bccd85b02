//! The convolutional dictionary as a matrix-free operator.
//!
//! A [`FilterBank`] of `C` filters of length `K` defines the block-Toeplitz
//! synthesis operator `H: R^{C x Ne} -> R^N` with `Ne = N - K + 1`:
//! `(Hx)[n] = sum_c sum_k h_c[k] x_c[n - k]` (linear, "full" convolution).
//! Its adjoint is the valid cross-correlation
//! `(H^T y)_c[n] = sum_k h_c[k] y[n + k]`. `H` is never materialized.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Safety factor applied on top of the power-iteration estimate of
/// `sigma_max(H^T H)`, which converges from below.
pub const LIPSCHITZ_SAFETY: f64 = 1.05;
pub const DEFAULT_POWER_TOL: f64 = 1e-6;
pub const DEFAULT_POWER_MAX_ITER: usize = 500;

/// `C` filters of `K` taps each, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct FilterBank {
    n_filters: usize,
    filter_len: usize,
    taps: Vec<f64>,
}

impl FilterBank {
    pub fn new(n_filters: usize, filter_len: usize, taps: Vec<f64>) -> Result<Self> {
        if n_filters == 0 || filter_len == 0 {
            return Err(Error::dim("filter bank needs C >= 1 and K >= 1"));
        }
        if taps.len() != n_filters * filter_len {
            return Err(Error::dim(format!(
                "expected {} taps for C={n_filters}, K={filter_len}, got {}",
                n_filters * filter_len,
                taps.len()
            )));
        }
        if taps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("filter taps must be finite".into()));
        }
        Ok(FilterBank {
            n_filters,
            filter_len,
            taps,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::dim("filters must all have the same length"));
        }
        Self::new(rows.len(), k, rows.concat())
    }

    pub fn n_filters(&self) -> usize {
        self.n_filters
    }

    pub fn filter_len(&self) -> usize {
        self.filter_len
    }

    pub fn filter(&self, c: usize) -> &[f64] {
        &self.taps[c * self.filter_len..(c + 1) * self.filter_len]
    }

    pub fn filter_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.taps[c * self.filter_len..(c + 1) * self.filter_len]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.taps
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.taps
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.taps.chunks_exact(self.filter_len)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    pub fn norms(&self) -> Vec<f64> {
        self.rows().map(l2_norm).collect()
    }

    /// Rescales every filter to unit l2 norm.
    pub fn normalize(&mut self) -> Result<()> {
        let k = self.filter_len;
        for row in self.taps.chunks_exact_mut(k) {
            let n = l2_norm(row);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Domain("cannot normalize a zero or non-finite filter".into()));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(())
    }

    pub fn normalized(mut self) -> Result<Self> {
        self.normalize()?;
        Ok(self)
    }

    /// Largest deviation of any filter norm from 1.
    pub fn unit_norm_deviation(&self) -> f64 {
        self.norms().into_iter().map(|n| (n - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn is_unit_norm(&self, tol: f64) -> bool {
        self.unit_norm_deviation() <= tol
    }

    /// Code length `Ne = N - K + 1` for windows of length `n`.
    pub fn code_len(&self, n: usize) -> Result<usize> {
        if n < self.filter_len {
            return Err(Error::dim(format!(
                "window length N={n} is shorter than filter length K={}",
                self.filter_len
            )));
        }
        Ok(n - self.filter_len + 1)
    }

    /// Random Gaussian filters normalized to unit norm.
    pub fn random_unit<R: Rng + ?Sized>(n_filters: usize, filter_len: usize, rng: &mut R) -> Result<Self> {
        let taps = (0..n_filters * filter_len)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Self::new(n_filters, filter_len, taps)?.normalized()
    }
}

impl TryFrom<Vec<Vec<f64>>> for FilterBank {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        FilterBank::from_rows(&rows)
    }
}

impl From<FilterBank> for Vec<Vec<f64>> {
    fn from(bank: FilterBank) -> Self {
        bank.to_rows()
    }
}

/// Sparse codes for one window: `C` channels of `Ne` samples, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeMap {
    channels: usize,
    len: usize,
    data: Vec<f64>,
}

impl CodeMap {
    pub fn zeros(channels: usize, len: usize) -> Self {
        CodeMap {
            channels,
            len,
            data: vec![0.0; channels * len],
        }
    }

    pub fn from_vec(channels: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * len {
            return Err(Error::dim(format!(
                "code map {channels}x{len} needs {} entries, got {}",
                channels * len,
                data.len()
            )));
        }
        Ok(CodeMap { channels, len, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, n: usize) -> f64 {
        self.data[c * self.len + n]
    }

    pub fn set(&mut self, c: usize, n: usize, v: f64) {
        self.data[c * self.len + n] = v;
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn l0_norm(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    pub fn dot(&self, other: &CodeMap) -> f64 {
        dot(&self.data, &other.data)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_code(h: &FilterBank, x: &CodeMap) -> Result<()> {
    if x.channels != h.n_filters {
        return Err(Error::dim(format!(
            "code map has {} channels but the bank has {} filters",
            x.channels, h.n_filters
        )));
    }
    if x.len == 0 {
        return Err(Error::dim("code map has zero length"));
    }
    Ok(())
}

/// Synthesis `Hx`: sum over channels of the full convolution `h_c * x_c`.
/// Output length is `Ne + K - 1`.
pub fn apply_dict(h: &FilterBank, x: &CodeMap) -> Result<Vec<f64>> {
    check_code(h, x)?;
    let mut out = vec![0.0; x.len + h.filter_len - 1];
    synth_into(h, x, &mut out);
    Ok(out)
}

/// Adjoint `H^T y`: valid cross-correlation of `y` with every filter.
pub fn apply_dict_adjoint(h: &FilterBank, y: &[f64]) -> Result<CodeMap> {
    let ne = h.code_len(y.len())?;
    let mut out = CodeMap::zeros(h.n_filters, ne);
    analysis_into(h, y, &mut out);
    Ok(out)
}

// Skips zero code entries, so the cost scales with the support of `x`.
pub(crate) fn synth_into(h: &FilterBank, x: &CodeMap, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let k = h.filter_len;
    for (c, filt) in h.rows().enumerate() {
        for (m, &a) in x.channel(c).iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (o, &t) in out[m..m + k].iter_mut().zip(filt) {
                *o += a * t;
            }
        }
    }
}

pub(crate) fn analysis_into(h: &FilterBank, y: &[f64], out: &mut CodeMap) {
    let k = h.filter_len;
    for c in 0..h.n_filters {
        let filt = h.filter(c);
        for (n, o) in out.channel_mut(c).iter_mut().enumerate() {
            *o = dot(filt, &y[n..n + k]);
        }
    }
}

/// Gradient of `<g, Hx>` with respect to the filter taps:
/// `out[c][k] = sum_m x_c[m] g[m + k]`, returned row-major `C x K`.
///
/// This is the decoder-side filter gradient; zero code entries are skipped.
pub fn filter_gradient(x: &CodeMap, g: &[f64], filter_len: usize) -> Result<Vec<f64>> {
    if g.len() + 1 != x.len + filter_len {
        return Err(Error::dim(format!(
            "signal length {} does not match code length {} and K={filter_len}",
            g.len(),
            x.len
        )));
    }
    let mut out = vec![0.0; x.channels * filter_len];
    accumulate_filter_gradient(x, g, filter_len, 1.0, &mut out);
    Ok(out)
}

pub(crate) fn accumulate_filter_gradient(x: &CodeMap, g: &[f64], k: usize, scale: f64, out: &mut [f64]) {
    for c in 0..x.channels {
        let row = &mut out[c * k..(c + 1) * k];
        for (m, &a) in x.channel(c).iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let a = a * scale;
            for (o, &v) in row.iter_mut().zip(&g[m..m + k]) {
                *o += a * v;
            }
        }
    }
}

/// Two-sided soft threshold `sgn(v) * max(|v| - b, 0)`; entries with
/// `|v| <= b` map to exactly zero.
pub fn shrink(v: &[f64], b: f64) -> Result<Vec<f64>> {
    check_threshold(b)?;
    Ok(v.iter().map(|&x| shrink_scalar(x, b)).collect())
}

pub(crate) fn check_threshold(b: f64) -> Result<()> {
    if b.is_nan() || b < 0.0 {
        return Err(Error::param(format!("shrinkage threshold must be >= 0, got {b}")));
    }
    Ok(())
}

#[inline]
pub(crate) fn shrink_scalar(x: f64, b: f64) -> f64 {
    if x > b {
        x - b
    } else if x < -b {
        x + b
    } else {
        0.0
    }
}

/// `H` bound to a window length, with the filter cross-correlation table
/// used to apply the normal operator `H^T H` directly in code space.
pub struct DictOperator<'a> {
    bank: &'a FilterBank,
    n: usize,
    code_len: usize,
    // gram[(b * C + g) * (2K - 1) + (lag + K - 1)] = sum_j h_b[j + lag] h_g[j]
    gram: Vec<f64>,
    scratch_len: usize,
}

impl<'a> DictOperator<'a> {
    pub fn new(bank: &'a FilterBank, n: usize) -> Result<Self> {
        let code_len = bank.code_len(n)?;
        let c = bank.n_filters;
        let k = bank.filter_len as isize;
        let width = 2 * bank.filter_len - 1;
        let mut gram = vec![0.0; c * c * width];
        for b in 0..c {
            let hb = bank.filter(b);
            for g in 0..c {
                let hg = bank.filter(g);
                for lag in -(k - 1)..k {
                    let mut acc = 0.0;
                    for j in 0..k {
                        let i = j + lag;
                        if (0..k).contains(&i) {
                            acc += hb[i as usize] * hg[j as usize];
                        }
                    }
                    gram[(b * c + g) * width + (lag + k - 1) as usize] = acc;
                }
            }
        }
        Ok(DictOperator {
            bank,
            n,
            code_len,
            gram,
            scratch_len: n,
        })
    }

    pub fn bank(&self) -> &FilterBank {
        self.bank
    }

    pub fn signal_len(&self) -> usize {
        self.n
    }

    pub fn code_len(&self) -> usize {
        self.code_len
    }

    pub fn zero_code(&self) -> CodeMap {
        CodeMap::zeros(self.bank.n_filters, self.code_len)
    }

    pub fn synth(&self, x: &CodeMap, out: &mut [f64]) {
        synth_into(self.bank, x, out);
    }

    pub fn analysis(&self, y: &[f64], out: &mut CodeMap) {
        analysis_into(self.bank, y, out);
    }

    /// `out = H^T H x`.
    ///
    /// Sparse inputs go through the cross-correlation table (cost
    /// `nnz * C * (2K - 1)`); dense inputs through two convolutions.
    pub fn normal(&self, x: &CodeMap, out: &mut CodeMap) {
        let c = self.bank.n_filters;
        let k = self.bank.filter_len;
        let nnz = x.data.iter().filter(|v| **v != 0.0).count();
        if nnz * (2 * k - 1) * c >= 2 * c * self.code_len * k {
            let mut sig = vec![0.0; self.scratch_len];
            self.synth(x, &mut sig);
            self.analysis(&sig, out);
            return;
        }
        out.data.iter_mut().for_each(|v| *v = 0.0);
        let width = 2 * k - 1;
        let ne = self.code_len as isize;
        let ki = k as isize;
        for g in 0..c {
            for (np, &a) in x.channel(g).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let np = np as isize;
                // out[b][np - lag] += gram_bg[lag] * a, for lag in (-K, K)
                let lag_lo = (np - ne + 1).max(-(ki - 1));
                let lag_hi = np.min(ki - 1);
                for b in 0..c {
                    let row = &self.gram[(b * c + g) * width..(b * c + g + 1) * width];
                    let dst = out.channel_mut(b);
                    for lag in lag_lo..=lag_hi {
                        dst[(np - lag) as usize] += row[(lag + ki - 1) as usize] * a;
                    }
                }
            }
        }
    }
}

/// Result of [`estimate_lipschitz`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzEstimate {
    /// Power-iteration estimate of the largest eigenvalue of `H^T H`.
    pub sigma_max_sq: f64,
    /// `LIPSCHITZ_SAFETY * sigma_max_sq`, the step constant handed to FISTA.
    pub lipschitz: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Power iteration on `H^T H` for windows of length `n`.
///
/// Stops when the relative change of the Rayleigh quotient drops below `tol`.
/// If `max_iter` is exhausted the last iterate is returned with
/// `converged == false`.
pub fn estimate_lipschitz(h: &FilterBank, n: usize, tol: f64, max_iter: usize) -> Result<LipschitzEstimate> {
    if !(tol > 0.0) {
        return Err(Error::param(format!("power iteration tolerance must be > 0, got {tol}")));
    }
    let op = DictOperator::new(h, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_1195);
    let mut v = op.zero_code();
    v.data.iter_mut().for_each(|x| *x = rng.random::<f64>() - 0.5);
    let nv = l2_norm(&v.data);
    v.data.iter_mut().for_each(|x| *x /= nv);

    let mut u = op.zero_code();
    let mut sig = vec![0.0; n];
    let mut rq = 0.0;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=max_iter.max(1) {
        iterations = it;
        // Always the dense path: v is a generic dense vector.
        op.synth(&v, &mut sig);
        op.analysis(&sig, &mut u);
        let next = dot(&v.data, &u.data);
        let nu = l2_norm(&u.data);
        if nu == 0.0 {
            return Err(Error::Domain("H^T H annihilated the probe vector; is the bank zero?".into()));
        }
        let change = (next - rq).abs() / next.abs();
        rq = next;
        for (a, b) in v.data.iter_mut().zip(&u.data) {
            *a = b / nu;
        }
        if it > 1 && change < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("power iteration did not converge in {iterations} iterations");
    }
    Ok(LipschitzEstimate {
        sigma_max_sq: rq,
        lipschitz: LIPSCHITZ_SAFETY * rq,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_code(c: usize, ne: usize, rng: &mut ChaCha8Rng) -> CodeMap {
        CodeMap::from_vec(c, ne, (0..c * ne).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap()
    }

    #[test]
    fn identity_filter_zero_pads_code() {
        let h = FilterBank::new(1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let x = CodeMap::from_vec(1, 5, vec![1.0, -2.0, 3.0, 0.5, 4.0]).unwrap();
        let y = apply_dict(&h, &x).unwrap();
        assert_eq!(y, vec![1.0, -2.0, 3.0, 0.5, 4.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_code_gives_zero_signal() {
        let h = FilterBank::random_unit(3, 5, &mut rng(1)).unwrap();
        let y = apply_dict(&h, &CodeMap::zeros(3, 10)).unwrap();
        assert_eq!(y.len(), 14);
        assert!(y.iter().all(|v| *v == 0.0));
        let x = apply_dict_adjoint(&h, &[0.0; 14]).unwrap();
        assert!(x.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adjoint_rejects_short_signal() {
        let h = FilterBank::random_unit(2, 6, &mut rng(2)).unwrap();
        assert!(matches!(apply_dict_adjoint(&h, &[1.0; 5]), Err(Error::Dimension(_))));
    }

    #[test]
    fn apply_dict_rejects_channel_mismatch() {
        let h = FilterBank::random_unit(2, 3, &mut rng(3)).unwrap();
        assert!(apply_dict(&h, &CodeMap::zeros(3, 4)).is_err());
    }

    #[test]
    fn shrink_examples() {
        assert_eq!(shrink(&[0.0], 0.7).unwrap(), vec![0.0]);
        assert_eq!(shrink(&[1.5, -2.0], 1.0).unwrap(), vec![0.5, -1.0]);
        let v = [0.3, -1.2, 7.0];
        assert_eq!(shrink(&v, 0.0).unwrap(), v.to_vec());
        // Closed threshold.
        assert_eq!(shrink(&[1.0, -1.0], 1.0).unwrap(), vec![0.0, 0.0]);
        assert!(shrink(&[1.0], -0.1).is_err());
    }

    #[test]
    fn normal_operator_paths_agree() {
        let mut r = rng(4);
        let h = FilterBank::random_unit(3, 7, &mut r).unwrap();
        let n = 40;
        let op = DictOperator::new(&h, n).unwrap();
        // Sparse input takes the table path, dense input the convolution path.
        let mut sparse = op.zero_code();
        sparse.set(0, 0, 1.3);
        sparse.set(2, 33, -0.4);
        sparse.set(1, 17, 2.0);
        let dense = random_code(3, op.code_len(), &mut r);
        for x in [&sparse, &dense] {
            let mut fast = op.zero_code();
            op.normal(x, &mut fast);
            let slow = apply_dict_adjoint(&h, &apply_dict(&h, x).unwrap()).unwrap();
            for (a, b) in fast.as_slice().iter().zip(slow.as_slice()) {
                assert_relative_eq!(a, b, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn filter_gradient_matches_directional_derivative() {
        let mut r = rng(5);
        let x = random_code(2, 9, &mut r);
        let g: Vec<f64> = (0..12).map(|_| r.random::<f64>()).collect();
        let grad = filter_gradient(&x, &g, 4).unwrap();
        // <g, Hx> is linear in h, so the gradient is exact under any perturbation.
        let dir: Vec<f64> = (0..8).map(|_| r.random::<f64>() - 0.5).collect();
        let hd = FilterBank::new(2, 4, dir.clone()).unwrap();
        let lhs = dot(&g, &apply_dict(&hd, &x).unwrap());
        assert_relative_eq!(lhs, dot(&grad, &dir), epsilon = 1e-12);
    }

    #[test]
    fn lipschitz_identity_filters() {
        let single = FilterBank::new(1, 5, vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let est = estimate_lipschitz(&single, 20, 1e-9, 500).unwrap();
        assert_relative_eq!(est.sigma_max_sq, 1.0, epsilon = 1e-9);
        assert_relative_eq!(est.lipschitz, 1.05, epsilon = 1e-8);

        let double = FilterBank::new(2, 3, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let est = estimate_lipschitz(&double, 12, 1e-9, 500).unwrap();
        assert_relative_eq!(est.sigma_max_sq, 2.0, epsilon = 1e-8);
        assert_relative_eq!(est.lipschitz, 2.1, epsilon = 1e-8);
        assert!(est.converged);
    }

    #[test]
    fn lipschitz_rejects_bad_tolerance() {
        let h = FilterBank::random_unit(1, 3, &mut rng(6)).unwrap();
        assert!(estimate_lipschitz(&h, 10, 0.0, 10).is_err());
    }

    #[test]
    fn lipschitz_reports_non_convergence() {
        let h = FilterBank::random_unit(3, 8, &mut rng(7)).unwrap();
        let est = estimate_lipschitz(&h, 64, 1e-15, 2).unwrap();
        assert!(!est.converged);
        assert_eq!(est.iterations, 2);
        assert!(est.lipschitz >= est.sigma_max_sq);
    }

    #[test]
    fn normalize_rejects_zero_filter() {
        let mut h = FilterBank::new(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(h.normalize().is_err());
        assert!(FilterBank::new(1, 2, vec![f64::NAN, 0.0]).is_err());
        assert!(FilterBank::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn filter_bank_serde_is_row_list() {
        let h = FilterBank::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = serde_json::to_string(&h).unwrap();
        assert_eq!(s, "[[1.0,2.0],[3.0,4.0]]");
        let back: FilterBank = serde_json::from_str(&s).unwrap();
        assert_eq!(back, h);
        assert!(serde_json::from_str::<FilterBank>("[[1.0],[2.0,3.0]]").is_err());
    }
}
