//! Unrolled FISTA/ISTA encoder.
//!
//! Solves `min_x 1/(2 sigma^2) ||y - Hx||^2 + lambda ||x||_1` with a fixed
//! number `T` of proximal-gradient iterations started from zero:
//!
//! ```text
//! s_t = (1 + sqrt(1 + 4 s_{t-1}^2)) / 2,  m_t = (s_{t-1} - 1) / s_t
//! w_t = z_{t-1} + m_t (z_{t-1} - z_{t-2})
//! c_t = w_t + (1/L) H^T (y - H w_t)
//! z_t = shrink(c_t, lambda sigma^2 / L)
//! ```
//!
//! ISTA is the same recursion with every `m_t = 0`.

use serde::{Deserialize, Serialize};

use crate::conv::{check_threshold, estimate_lipschitz, shrink_scalar, CodeMap, DictOperator, FilterBank};
use crate::conv::{DEFAULT_POWER_MAX_ITER, DEFAULT_POWER_TOL};
use crate::error::{Error, Result};
use crate::par::{try_map_indexed, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EncoderMode {
    #[default]
    #[serde(rename = "FISTA", alias = "fista")]
    Fista,
    #[serde(rename = "ISTA", alias = "ista")]
    Ista,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Number of unrolled iterations.
    #[serde(rename = "T")]
    pub iterations: usize,
    /// Step constant; must dominate the largest eigenvalue of `H^T H`.
    #[serde(rename = "L")]
    pub lipschitz: f64,
    pub lambda: f64,
    pub sigma: f64,
    #[serde(default)]
    pub mode: EncoderMode,
}

impl EncoderConfig {
    pub fn new(iterations: usize, lipschitz: f64, lambda: f64, sigma: f64) -> Self {
        EncoderConfig {
            iterations,
            lipschitz,
            lambda,
            sigma,
            mode: EncoderMode::Fista,
        }
    }

    pub fn with_mode(mut self, mode: EncoderMode) -> Self {
        self.mode = mode;
        self
    }

    /// Shrinkage threshold `b = lambda sigma^2 / L`.
    pub fn bias(&self) -> f64 {
        self.lambda * self.sigma * self.sigma / self.lipschitz
    }

    /// Checks the scalar invariants (cheap; no operator norm involved).
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::param("encoder needs T >= 1 iterations"));
        }
        for (name, v) in [("L", self.lipschitz), ("lambda", self.lambda), ("sigma", self.sigma)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        let b = self.bias();
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::param(format!("bias lambda*sigma^2/L must be > 0, got {b}")));
        }
        Ok(())
    }

    /// Full validation against a filter bank: additionally rejects an `L`
    /// below the power-iteration estimate of `sigma_max(H^T H)`.
    pub fn validate_for(&self, h: &FilterBank, n: usize) -> Result<()> {
        self.validate()?;
        let est = estimate_lipschitz(h, n, DEFAULT_POWER_TOL, DEFAULT_POWER_MAX_ITER)?;
        if self.lipschitz < est.sigma_max_sq * (1.0 - 1e-9) {
            return Err(Error::param(format!(
                "L = {} is below the largest eigenvalue of H^T H ({}); FISTA may diverge",
                self.lipschitz, est.sigma_max_sq
            )));
        }
        Ok(())
    }
}

/// Everything the backward passes need from one forward run.
///
/// Index `t - 1` holds iteration `t`; `s` has one extra leading entry `s_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FistaTrace {
    pub s: Vec<f64>,
    /// Momentum weights `m_t` actually used (all zero in ISTA mode).
    pub momentum: Vec<f64>,
    pub w: Vec<CodeMap>,
    /// Pre-shrinkage iterates.
    pub c: Vec<CodeMap>,
    /// `z_t^(1) = shrink(c_t, b)`.
    pub z1: Vec<CodeMap>,
    /// `z_t^(2) = z_{t-1}^(1)`.
    pub z2: Vec<CodeMap>,
    pub(crate) config: EncoderConfig,
    pub(crate) filters: Vec<f64>,
    pub(crate) signal_len: usize,
}

impl FistaTrace {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn iterations(&self) -> usize {
        self.c.len()
    }

    /// Final code `z_T^(1)`.
    pub fn output(&self) -> &CodeMap {
        self.z1.last().expect("trace has at least one iteration")
    }

    /// Errors unless this trace was produced by `encode(y, h, cfg)` for a
    /// window of length `n`.
    pub fn check_matches(&self, h: &FilterBank, cfg: &EncoderConfig, n: usize) -> Result<()> {
        if self.config != *cfg {
            return Err(Error::StaleTrace("encoder configuration differs".into()));
        }
        if self.filters != h.as_slice() {
            return Err(Error::StaleTrace("filters changed since the forward pass".into()));
        }
        if self.signal_len != n {
            return Err(Error::StaleTrace(format!("trace is for N={}, window has N={n}", self.signal_len)));
        }
        Ok(())
    }
}

/// `1/(2 sigma^2) ||y - Hx||^2 + lambda ||x||_1`.
pub fn objective(y: &[f64], h: &FilterBank, x: &CodeMap, lambda: f64, sigma: f64) -> Result<f64> {
    if y.len() + 1 != x.len() + h.filter_len() {
        return Err(Error::dim(format!(
            "window length {} inconsistent with code length {} and K={}",
            y.len(),
            x.len(),
            h.filter_len()
        )));
    }
    let yhat = crate::conv::apply_dict(h, x)?;
    let rss: f64 = y.iter().zip(&yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(rss / (2.0 * sigma * sigma) + lambda * x.l1_norm())
}

/// Runs the unrolled encoder on one window. With `keep_trace` the full
/// per-iteration cache is returned as well.
pub fn encode(y: &[f64], h: &FilterBank, cfg: &EncoderConfig, keep_trace: bool) -> Result<(CodeMap, Option<FistaTrace>)> {
    cfg.validate()?;
    let op = DictOperator::new(h, y.len())?;
    let mut hty = op.zero_code();
    op.analysis(y, &mut hty);
    Ok(run(&op, &hty, cfg, keep_trace, |_| {}))
}

/// Like [`encode`] but hands every iterate `z_t` to `observe` (used for
/// convergence diagnostics).
pub fn encode_observed<F: FnMut(&CodeMap)>(y: &[f64], h: &FilterBank, cfg: &EncoderConfig, observe: F) -> Result<CodeMap> {
    cfg.validate()?;
    let op = DictOperator::new(h, y.len())?;
    let mut hty = op.zero_code();
    op.analysis(y, &mut hty);
    Ok(run(&op, &hty, cfg, false, observe).0)
}

fn run<F: FnMut(&CodeMap)>(
    op: &DictOperator<'_>,
    hty: &CodeMap,
    cfg: &EncoderConfig,
    keep_trace: bool,
    mut observe: F,
) -> (CodeMap, Option<FistaTrace>) {
    let t_max = cfg.iterations;
    let b = cfg.bias();
    let inv_l = 1.0 / cfg.lipschitz;
    let fista = cfg.mode == EncoderMode::Fista;

    let mut trace = keep_trace.then(|| FistaTrace {
        s: Vec::with_capacity(t_max + 1),
        momentum: Vec::with_capacity(t_max),
        w: Vec::with_capacity(t_max),
        c: Vec::with_capacity(t_max),
        z1: Vec::with_capacity(t_max),
        z2: Vec::with_capacity(t_max),
        config: *cfg,
        filters: op.bank().as_slice().to_vec(),
        signal_len: op.signal_len(),
    });

    let mut z1 = op.zero_code();
    let mut z2 = op.zero_code();
    let mut w = op.zero_code();
    let mut c = op.zero_code();
    let mut hhw = op.zero_code();
    let mut s_prev = 0.0_f64;
    if let Some(tr) = trace.as_mut() {
        tr.s.push(s_prev);
    }

    for _ in 0..t_max {
        let s = (1.0 + (1.0 + 4.0 * s_prev * s_prev).sqrt()) / 2.0;
        let m = if fista { (s_prev - 1.0) / s } else { 0.0 };
        for ((wi, &a), &p) in w.as_mut_slice().iter_mut().zip(z1.as_slice()).zip(z2.as_slice()) {
            *wi = a + m * (a - p);
        }
        op.normal(&w, &mut hhw);
        for (((ci, &wi), &g), &q) in c
            .as_mut_slice()
            .iter_mut()
            .zip(w.as_slice())
            .zip(hty.as_slice())
            .zip(hhw.as_slice())
        {
            *ci = wi + (g - q) * inv_l;
        }
        // z2 <- z1, z1 <- shrink(c)
        std::mem::swap(&mut z1, &mut z2);
        for (zi, &ci) in z1.as_mut_slice().iter_mut().zip(c.as_slice()) {
            *zi = shrink_scalar(ci, b);
        }
        observe(&z1);
        if let Some(tr) = trace.as_mut() {
            tr.s.push(s);
            tr.momentum.push(m);
            tr.w.push(w.clone());
            tr.c.push(c.clone());
            tr.z1.push(z1.clone());
            tr.z2.push(z2.clone());
        }
        s_prev = s;
    }
    (z1, trace)
}

/// Encodes every window (inference mode, no trace).
pub fn encode_batch<W: AsRef<[f64]> + Sync>(windows: &[W], h: &FilterBank, cfg: &EncoderConfig, exec: Execution) -> Result<Vec<CodeMap>> {
    cfg.validate()?;
    try_map_indexed(windows.len(), exec, |j| encode(windows[j].as_ref(), h, cfg, false).map(|(x, _)| x))
}

/// One proximal-gradient step from `x` (used by long-run reference solvers
/// and fixed-point checks).
pub fn ista_step(y: &[f64], h: &FilterBank, x: &CodeMap, lipschitz: f64, bias: f64) -> Result<CodeMap> {
    check_threshold(bias)?;
    let yhat = crate::conv::apply_dict(h, x)?;
    let r: Vec<f64> = y.iter().zip(&yhat).map(|(a, b)| a - b).collect();
    let g = crate::conv::apply_dict_adjoint(h, &r)?;
    let mut out = x.clone();
    for (o, &gi) in out.as_mut_slice().iter_mut().zip(g.as_slice()) {
        *o = shrink_scalar(*o + gi / lipschitz, bias);
    }
    Ok(out)
}
