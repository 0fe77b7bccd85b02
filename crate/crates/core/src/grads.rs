//! Training losses and their gradients.
//!
//! * Filter loss: `1/2 ||y - H enc(y)||^2`, the tied-weight reconstruction
//!   error. Its gradient flows through the decoder and through every unrolled
//!   encoder layer, since all of them share the same filters.
//! * Lambda loss: `lambda (||enc(y)||_1 + C delta) - (Ne + r - 1) C log lambda`,
//!   the negative log posterior of `lambda` under a Gamma(r, delta) prior with
//!   the code fixed at the encoder output.
//!
//! Both gradients are computed by a reverse sweep over a [`FistaTrace`]. The
//! sweep includes every path, including the momentum coupling through
//! `w_t = (1 + m_t) z_{t-1} - m_t z_{t-2}`, so the results are exact total
//! derivatives of the unrolled computation. [`fd_gradient`] checks them against
//! central finite differences.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conv::{accumulate_filter_gradient, apply_dict, estimate_lipschitz, CodeMap, DictOperator, FilterBank};
use crate::encoder::{encode, EncoderConfig, FistaTrace};
use crate::error::{Error, Result};
use crate::sim::stream_rng;

/// Gamma(r, delta) hyper-prior on lambda (shape `r`, rate `delta`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaPrior {
    pub r: f64,
    pub delta: f64,
}

impl GammaPrior {
    pub fn new(r: f64, delta: f64) -> Result<Self> {
        let p = GammaPrior { r, delta };
        p.validate()?;
        Ok(p)
    }

    /// Prior with mean `lambda_center`: `r = delta * lambda_center`.
    pub fn centered(lambda_center: f64, delta: f64) -> Result<Self> {
        Self::new(delta * lambda_center, delta)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r.is_finite() && self.r > 0.0 && self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::param(format!(
                "Gamma prior needs r > 0 and delta > 0, got r={}, delta={}",
                self.r, self.delta
            )));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.r / self.delta
    }
}

/// Default lambda initialization `sqrt(2 log(C Ne)) / sigma`.
pub fn lambda_init(n_filters: usize, code_len: usize, sigma: f64) -> f64 {
    (2.0 * ((n_filters * code_len) as f64).ln()).sqrt() / sigma
}

/// Coefficient `(Ne + r - 1) C` of the log-lambda term.
pub fn log_lambda_weight(n_filters: usize, code_len: usize, prior: &GammaPrior) -> f64 {
    (code_len as f64 + prior.r - 1.0) * n_filters as f64
}

/// Minimizer of the lambda loss for a frozen code with l1 norm `code_l1`.
pub fn lambda_stationary_point(code_l1: f64, n_filters: usize, code_len: usize, prior: &GammaPrior) -> f64 {
    log_lambda_weight(n_filters, code_len, prior) / (code_l1 + n_filters as f64 * prior.delta)
}

/// Lambda loss for a frozen code.
pub fn lambda_loss_frozen(lambda: f64, code_l1: f64, n_filters: usize, code_len: usize, prior: &GammaPrior) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("lambda must be > 0, got {lambda}")));
    }
    Ok(lambda * (code_l1 + n_filters as f64 * prior.delta) - log_lambda_weight(n_filters, code_len, prior) * lambda.ln())
}

/// `lambda_loss_frozen(a) - lambda_loss_frozen(b)`, computed without the
/// cancellation of subtracting two large values. Near the minimizer the loss
/// is flat to second order, so comparing plain loss values cannot place the
/// minimizer closer than about `sqrt(eps)` relative; this form can.
pub fn lambda_loss_frozen_diff(a: f64, b: f64, code_l1: f64, n_filters: usize, code_len: usize, prior: &GammaPrior) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::Domain(format!("lambda must be > 0, got {a} and {b}")));
    }
    let d = a - b;
    Ok(d * (code_l1 + n_filters as f64 * prior.delta) - log_lambda_weight(n_filters, code_len, prior) * (d / b).ln_1p())
}

/// `1/2 ||y - H x||^2` for a given code.
pub fn reconstruction_loss(y: &[f64], h: &FilterBank, x: &CodeMap) -> Result<f64> {
    let yhat = apply_dict(h, x)?;
    if yhat.len() != y.len() {
        return Err(Error::dim(format!("reconstruction has length {}, window {}", yhat.len(), y.len())));
    }
    Ok(0.5 * y.iter().zip(&yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
}

/// Filter loss: reconstruction error of the tied autoencoder.
pub fn loss_h(y: &[f64], h: &FilterBank, cfg: &EncoderConfig) -> Result<f64> {
    let (x, _) = encode(y, h, cfg, false)?;
    reconstruction_loss(y, h, &x)
}

/// Lambda loss evaluated at the encoder output for `cfg.lambda`.
pub fn loss_lambda(y: &[f64], h: &FilterBank, cfg: &EncoderConfig, prior: &GammaPrior) -> Result<f64> {
    if !(cfg.lambda > 0.0) {
        return Err(Error::Domain(format!("lambda must be > 0, got {}", cfg.lambda)));
    }
    prior.validate()?;
    let (x, _) = encode(y, h, cfg, false)?;
    lambda_loss_frozen(cfg.lambda, x.l1_norm(), h.n_filters(), x.len(), prior)
}

/// Reverse sweep over the encoder layers.
///
/// `gz1` enters as the adjoint of `z_T^(1)`. For each layer the closure
/// `on_layer(t, gz1_t)` sees the adjoint of `z_t^(1)` before it is pushed
/// through the shrinkage mask; `on_active(t, gc_t)` sees the masked adjoint of
/// `c_t` when it is not identically zero.
fn reverse_sweep(
    op: &DictOperator<'_>,
    trace: &FistaTrace,
    mut gz1: CodeMap,
    mut on_layer: impl FnMut(usize, &CodeMap),
    mut on_active: impl FnMut(usize, &CodeMap),
) {
    let b = trace.config.bias();
    let inv_l = 1.0 / trace.config.lipschitz;
    let mut gz2 = op.zero_code();
    let mut gc = op.zero_code();
    let mut hhgc = op.zero_code();
    let mut gw = op.zero_code();
    for t in (0..trace.iterations()).rev() {
        on_layer(t, &gz1);
        let mut any = false;
        for ((g, &dz), &c) in gc.as_mut_slice().iter_mut().zip(gz1.as_slice()).zip(trace.c[t].as_slice()) {
            *g = if c.abs() > b { dz } else { 0.0 };
            any |= *g != 0.0;
        }
        if any {
            on_active(t, &gc);
            op.normal(&gc, &mut hhgc);
            for ((o, &g), &q) in gw.as_mut_slice().iter_mut().zip(gc.as_slice()).zip(hhgc.as_slice()) {
                *o = g - q * inv_l;
            }
        } else {
            gw.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        }
        // w_t = (1 + m) z1_{t-1} - m z2_{t-1};  z2_t = z1_{t-1}
        let m = trace.momentum[t];
        for ((a, p), &g) in gz1.as_mut_slice().iter_mut().zip(gz2.as_mut_slice()).zip(gw.as_slice()) {
            *a = (1.0 + m) * g + *p;
            *p = -m * g;
        }
    }
}

/// Gradient of the filter loss with respect to every filter tap (row-major
/// `C x K`), accumulated over the decoder and all `T` encoder layers.
pub fn grad_h(y: &[f64], h: &FilterBank, cfg: &EncoderConfig, trace: &FistaTrace) -> Result<Vec<f64>> {
    Ok(grad_h_with_loss(y, h, cfg, trace)?.0)
}

/// [`grad_h`] plus the loss value, sharing the decoder pass.
pub fn grad_h_with_loss(y: &[f64], h: &FilterBank, cfg: &EncoderConfig, trace: &FistaTrace) -> Result<(Vec<f64>, f64)> {
    trace.check_matches(h, cfg, y.len())?;
    let op = DictOperator::new(h, y.len())?;
    let k = h.filter_len();
    let x = trace.output();

    let mut resid = vec![0.0; y.len()];
    op.synth(x, &mut resid);
    resid.iter_mut().zip(y).for_each(|(r, &v)| *r -= v);
    let loss = 0.5 * resid.iter().map(|r| r * r).sum::<f64>();

    let mut grad = vec![0.0; h.n_filters() * k];
    accumulate_filter_gradient(x, &resid, k, 1.0, &mut grad);
    let mut gz1 = op.zero_code();
    op.analysis(&resid, &mut gz1);

    let inv_l = 1.0 / cfg.lipschitz;
    let mut hg = vec![0.0; y.len()];
    let mut r = vec![0.0; y.len()];
    reverse_sweep(
        &op,
        trace,
        gz1,
        |_, _| {},
        |t, gc| {
            // c_t = w_t + (1/L) H^T (y - H w_t): differentiate <gc, c_t> in h.
            let w = &trace.w[t];
            op.synth(w, &mut r);
            r.iter_mut().zip(y).for_each(|(a, &v)| *a = v - *a);
            op.synth(gc, &mut hg);
            accumulate_filter_gradient(gc, &r, k, inv_l, &mut grad);
            accumulate_filter_gradient(w, &hg, k, -inv_l, &mut grad);
        },
    );
    Ok((grad, loss))
}

/// The two pieces of the lambda gradient: everything except the log-prior
/// term, and the log-prior term `-(Ne + r - 1) C / lambda` itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaGradParts {
    pub data_term: f64,
    pub log_prior_term: f64,
}

impl LambdaGradParts {
    pub fn total(&self) -> f64 {
        self.data_term + self.log_prior_term
    }
}

/// Gradient of the lambda loss with respect to lambda (total derivative
/// through all encoder layers).
pub fn grad_lambda(y: &[f64], h: &FilterBank, cfg: &EncoderConfig, prior: &GammaPrior, trace: &FistaTrace) -> Result<f64> {
    Ok(grad_lambda_parts(y, h, cfg, prior, trace)?.total())
}

pub fn grad_lambda_parts(
    y: &[f64],
    h: &FilterBank,
    cfg: &EncoderConfig,
    prior: &GammaPrior,
    trace: &FistaTrace,
) -> Result<LambdaGradParts> {
    if !(cfg.lambda > 0.0) {
        return Err(Error::Domain(format!("lambda must be > 0, got {}", cfg.lambda)));
    }
    prior.validate()?;
    trace.check_matches(h, cfg, y.len())?;
    let op = DictOperator::new(h, y.len())?;
    let x = trace.output();
    let c_count = h.n_filters();

    // Subgradient of ||z_T||_1, zero at exact zeros.
    let mut seed = op.zero_code();
    for (s, &v) in seed.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *s = if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        };
    }

    let b = cfg.bias();
    let dz_dlambda = -cfg.sigma * cfg.sigma / cfg.lipschitz;
    let mut d_l1 = 0.0;
    reverse_sweep(
        &op,
        trace,
        seed,
        |t, gz1| {
            for (&g, &c) in gz1.as_slice().iter().zip(trace.c[t].as_slice()) {
                if g != 0.0 && c.abs() >= b {
                    d_l1 += g * dz_dlambda * c.signum();
                }
            }
        },
        |_, _| {},
    );

    let data_term = x.l1_norm() + c_count as f64 * prior.delta + cfg.lambda * d_l1;
    let log_prior_term = -log_lambda_weight(c_count, x.len(), prior) / cfg.lambda;
    Ok(LambdaGradParts { data_term, log_prior_term })
}

/// Which parameter a finite-difference check perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FdTarget {
    Filters,
    Lambda,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradParam {
    Filter { channel: usize, tap: usize },
    Lambda,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    pub param: GradParam,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// The +/- perturbation changed some shrinkage decision, so the loss is
    /// not differentiable across the stencil and the entry is not scored.
    pub kink: bool,
}

/// Analytic gradients next to their finite-difference estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub n_filters: usize,
    pub filter_len: usize,
    pub grad_h: Vec<f64>,
    pub grad_lambda: f64,
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    fn max_err(&self, pick: impl Fn(&GradParam) -> bool) -> Option<f64> {
        self.entries
            .iter()
            .filter(|e| pick(&e.param) && !e.kink)
            .map(|e| e.rel_err)
            .fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
    }

    /// Largest relative error over scored filter entries.
    pub fn max_rel_err_filters(&self) -> Option<f64> {
        self.max_err(|p| matches!(p, GradParam::Filter { .. }))
    }

    pub fn max_rel_err_lambda(&self) -> Option<f64> {
        self.max_err(|p| matches!(p, GradParam::Lambda))
    }

    pub fn kink_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kink).count()
    }
}

/// Denominator floor for [`relative_error`], so entries that are exactly zero
/// in both estimates are not scored as infinitely wrong.
pub const REL_ERR_FLOOR: f64 = 1e-12;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// A single-window gradient-check problem.
#[derive(Debug, Clone)]
pub struct GradProblem<'a> {
    pub window: &'a [f64],
    pub filters: &'a FilterBank,
    pub encoder: EncoderConfig,
    pub prior: GammaPrior,
}

/// Finite-difference step used by the built-in gradient checks.
pub const FD_STEP: f64 = 1e-6;
/// Pass thresholds for the gradient check.
pub const GRAD_H_TOLERANCE: f64 = 1e-5;
pub const GRAD_LAMBDA_TOLERANCE: f64 = 1e-4;

/// An owned gradient-check problem.
#[derive(Debug, Clone, PartialEq)]
pub struct GradInstance {
    pub window: Vec<f64>,
    pub filters: FilterBank,
    pub encoder: EncoderConfig,
    pub prior: GammaPrior,
}

impl GradInstance {
    /// Small random instance: `C <= 3`, `K <= 6`, `N <= 40`, `T <= 15`,
    /// random unit-norm filters, `lambda` in [0.1, 10], `sigma` in [0.05, 1].
    /// The window is a sparse code through the filters plus noise, with
    /// amplitudes well above the shrinkage bias so the code is not empty.
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, 0);
        let c = rng.random_range(1..=3);
        let k = rng.random_range(2..=6);
        let n = rng.random_range((k + 10).max(16)..=40);
        let t = rng.random_range(3..=15);
        let lambda = 10f64.powf(rng.random_range(-1.0..=1.0));
        let sigma = 10f64.powf(rng.random_range(0.05f64.log10()..=0.0));
        let filters = FilterBank::random_unit(c, k, &mut rng)?;
        let lipschitz = 1.05 * estimate_lipschitz(&filters, n, 1e-10, 5000)?.lipschitz;
        let encoder = EncoderConfig::new(t, lipschitz, lambda, sigma);
        let scale = 1.0 + 4.0 * encoder.bias() * lipschitz;
        let mut x = CodeMap::zeros(c, n - k + 1);
        for _ in 0..rng.random_range(2..=5) {
            let ch = rng.random_range(0..c);
            let at = rng.random_range(0..x.len());
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            x.set(ch, at, sign * scale * rng.random_range(1.0..2.0));
        }
        let mut window = apply_dict(&filters, &x)?;
        window
            .iter_mut()
            .for_each(|v| *v += 0.1 * sigma * rng.sample::<f64, _>(StandardNormal));
        let prior = GammaPrior::centered(lambda * rng.random_range(0.5..2.0), rng.random_range(0.1..5.0))?;
        Ok(GradInstance {
            window,
            filters,
            encoder,
            prior,
        })
    }

    pub fn problem(&self) -> GradProblem<'_> {
        GradProblem {
            window: &self.window,
            filters: &self.filters,
            encoder: self.encoder,
            prior: self.prior,
        }
    }
}

fn shrink_pattern(trace: &FistaTrace) -> Vec<bool> {
    let b = trace.config.bias();
    trace.c.iter().flat_map(|c| c.as_slice().iter().map(move |v| v.abs() > b)).collect()
}

/// Finite-difference check of [`grad_h`] and/or [`grad_lambda`].
///
/// `step` is absolute for filter taps and relative (`step * lambda`) for
/// lambda. The encoder is re-run for every perturbation.
pub fn fd_gradient(problem: &GradProblem<'_>, target: FdTarget, step: f64) -> Result<GradReport> {
    if !(step > 0.0) {
        return Err(Error::param(format!("finite-difference step must be > 0, got {step}")));
    }
    let y = problem.window;
    let h = problem.filters;
    let cfg = problem.encoder;
    let prior = problem.prior;
    let (_, trace) = encode(y, h, &cfg, true)?;
    let trace = trace.expect("trace requested");
    let base_pattern = shrink_pattern(&trace);
    let gh = grad_h(y, h, &cfg, &trace)?;
    let gl = grad_lambda(y, h, &cfg, &prior, &trace)?;
    let mut entries = Vec::new();

    if matches!(target, FdTarget::Filters | FdTarget::Both) {
        let k = h.filter_len();
        let mut probe = h.clone();
        for (i, &analytic) in gh.iter().enumerate() {
            let mut eval = |v: f64| -> Result<(f64, bool)> {
                probe.as_mut_slice()[i] = v;
                let (x, tr) = encode(y, &probe, &cfg, true)?;
                let kink = shrink_pattern(&tr.expect("trace requested")) != base_pattern;
                Ok((reconstruction_loss(y, &probe, &x)?, kink))
            };
            let x0 = h.as_slice()[i];
            let (up, k_up) = eval(x0 + step)?;
            let (down, k_down) = eval(x0 - step)?;
            probe.as_mut_slice()[i] = x0;
            let numeric = (up - down) / (2.0 * step);
            entries.push(GradEntry {
                param: GradParam::Filter {
                    channel: i / k,
                    tap: i % k,
                },
                analytic,
                numeric,
                rel_err: relative_error(analytic, numeric),
                kink: k_up || k_down,
            });
        }
    }

    if matches!(target, FdTarget::Lambda | FdTarget::Both) {
        let dl = step * cfg.lambda;
        let eval = |lambda: f64| -> Result<(f64, bool)> {
            let c2 = EncoderConfig { lambda, ..cfg };
            let (x, tr) = encode(y, h, &c2, true)?;
            let kink = shrink_pattern(&tr.expect("trace requested")) != base_pattern;
            Ok((lambda_loss_frozen(lambda, x.l1_norm(), h.n_filters(), x.len(), &prior)?, kink))
        };
        let (up, k_up) = eval(cfg.lambda + dl)?;
        let (down, k_down) = eval(cfg.lambda - dl)?;
        let numeric = (up - down) / (2.0 * dl);
        entries.push(GradEntry {
            param: GradParam::Lambda,
            analytic: gl,
            numeric,
            rel_err: relative_error(gl, numeric),
            kink: k_up || k_down,
        });
    }

    Ok(GradReport {
        n_filters: h.n_filters(),
        filter_len: h.filter_len(),
        grad_h: gh,
        grad_lambda: gl,
        entries,
    })
}
