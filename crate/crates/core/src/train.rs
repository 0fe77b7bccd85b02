//! Two-stage training: ADAM on the filters from the reconstruction loss, then
//! ADAM on lambda from its posterior loss, once per mini-batch.
//!
//! Both gradients of a batch come from a single encoder pass with the
//! pre-update parameters. Filters are renormalized to unit norm after every
//! step. The returned parameters are those of the epoch with the lowest
//! validation reconstruction loss.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conv::{dot, estimate_lipschitz, FilterBank, DEFAULT_POWER_MAX_ITER, DEFAULT_POWER_TOL};
use crate::encoder::{encode, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{filter_err, match_filters};
use crate::grads::{grad_h_with_loss, grad_lambda_parts, reconstruction_loss, GammaPrior};
use crate::par::{map_sum, Execution};
use crate::sim::Dataset;

pub const LAMBDA_MIN: f64 = 1e-6;
pub const LAMBDA_MAX: f64 = 1e9;

const SPLIT_SALT: u64 = 0x5EED_0001;
const SHUFFLE_SALT: u64 = 0x5EED_0002;
const AUGMENT_SALT: u64 = 0x5EED_0003;

/// Removes from each filter's block of `grad` its projection on that filter.
/// Filters are assumed unit-norm.
pub fn project_tangent(h: &FilterBank, grad: &mut [f64]) {
    let k = h.filter_len();
    for (c, g) in grad.chunks_mut(k).enumerate() {
        let row = h.filter(c);
        let r = dot(g, row);
        g.iter_mut().zip(row).for_each(|(a, b)| *a -= r * b);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub eta_h: f64,
    pub eta_lambda: f64,
    #[serde(alias = "B")]
    pub batch_size: usize,
    #[serde(alias = "I")]
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub augment_flip: bool,
    pub augment_rotate: bool,
    /// Append one flipped and one rotated copy of every training window up
    /// front instead of augmenting on the fly.
    pub augment_precompute: bool,
    pub seed: u64,
    /// Fixed reduction order, so repeated runs are bit-identical.
    pub deterministic: bool,
    pub validation_fraction: f64,
    /// Re-estimate the Lipschitz constant after every epoch instead of
    /// keeping the initial value.
    pub reestimate_lipschitz: bool,
    /// Include the `-(Ne + r - 1) C log lambda` term in the lambda loss.
    pub lambda_log_prior: bool,
    pub parallel: bool,
    /// Drop the component of each filter's gradient along the filter itself
    /// before the ADAM step. That component only changes the norm, which the
    /// renormalization undoes, but ADAM's per-coordinate scaling turns it into
    /// a spurious change of direction.
    pub project_gradient: bool,
    /// The filter learning rate in epoch `e` (1-based) is
    /// `eta_h * eta_h_decay^(e-1)`. 1 keeps it constant.
    pub eta_h_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta_h: 0.01,
            eta_lambda: 1.0,
            batch_size: 32,
            epochs: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            augment_flip: false,
            augment_rotate: false,
            augment_precompute: false,
            seed: 0,
            deterministic: false,
            validation_fraction: 0.1,
            reestimate_lipschitz: false,
            lambda_log_prior: true,
            parallel: true,
            project_gradient: true,
            eta_h_decay: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rate_ok = |v: f64| v.is_finite() && v >= 0.0;
        if !rate_ok(self.eta_h) || !rate_ok(self.eta_lambda) {
            return Err(Error::param(format!(
                "learning rates must be finite and >= 0, got eta_h={} eta_lambda={}",
                self.eta_h, self.eta_lambda
            )));
        }
        if !(self.eta_h_decay > 0.0 && self.eta_h_decay <= 1.0) {
            return Err(Error::param(format!("eta_h_decay must be in (0, 1], got {}", self.eta_h_decay)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::param("batch_size and epochs must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::param("ADAM needs betas in [0, 1) and eps > 0"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::param(format!(
                "validation_fraction must be in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }

    fn execution(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean reconstruction loss over the epoch's training batches.
    pub train_loss: f64,
    /// Mean reconstruction loss on the validation windows after the epoch
    /// (NaN without a validation split).
    pub val_loss: f64,
    pub lambda: f64,
    /// Matched error per true filter, when the dataset carries truth.
    pub filter_err_db: Vec<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub filters: FilterBank,
    pub lambda: f64,
    pub lipschitz: f64,
    pub history: TrainHistory,
}

/// ADAM state for one parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// `params -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// `y -> -y`.
pub fn flip(y: &[f64]) -> Vec<f64> {
    y.iter().map(|v| -v).collect()
}

/// Circular rotation: `out[(n + shift) mod N] = y[n]`.
pub fn rotate(y: &[f64], shift: usize) -> Vec<f64> {
    let mut out = y.to_vec();
    if !y.is_empty() {
        out.rotate_right(shift % y.len());
    }
    out
}

/// Random flip (probability 1/2) and/or rotation by a uniform delay in
/// `[1, N]`.
pub fn augment_window<R: Rng + ?Sized>(y: &[f64], do_flip: bool, do_rotate: bool, rng: &mut R) -> Vec<f64> {
    let mut out = y.to_vec();
    if do_flip && rng.random_bool(0.5) {
        out = flip(&out);
    }
    if do_rotate && !y.is_empty() {
        out = rotate(&out, rng.random_range(1..=y.len()));
    }
    out
}

/// Adds `noise_scale` times standard Gaussian noise to every tap and
/// renormalizes.
pub fn perturb_filters<R: Rng + ?Sized>(h: &FilterBank, noise_scale: f64, rng: &mut R) -> Result<FilterBank> {
    let mut out = h.clone();
    for v in out.as_mut_slice() {
        *v += noise_scale * rng.sample::<f64, _>(StandardNormal);
    }
    out.normalize()?;
    Ok(out)
}

/// Perturbs each true filter with Gaussian noise until its error is within
/// 0.5 dB of `target_err_db`.
pub fn init_filters_perturbed<R: Rng + ?Sized>(h_true: &FilterBank, target_err_db: f64, rng: &mut R) -> Result<FilterBank> {
    if !(target_err_db < 0.0) {
        return Err(Error::param(format!("target error must be < 0 dB, got {target_err_db}")));
    }
    let h_true = h_true.clone().normalized()?;
    let k = h_true.filter_len();
    // Noise of per-tap scale s tilts a unit filter by about atan(s sqrt(K - 1)).
    let sin = 10f64.powf(target_err_db / 10.0).min(1.0);
    let scale = sin.asin().tan() / ((k.max(2) - 1) as f64).sqrt();
    let mut rows = Vec::with_capacity(h_true.n_filters());
    for c in 0..h_true.n_filters() {
        let target = h_true.filter(c);
        let mut found = None;
        for _ in 0..1000 {
            let cand: Vec<f64> = target.iter().map(|v| v + scale * rng.sample::<f64, _>(StandardNormal)).collect();
            let e = filter_err(target, &cand)?;
            if (e - target_err_db).abs() <= 0.5 {
                found = Some(cand);
                break;
            }
        }
        rows.push(found.ok_or_else(|| Error::Init(format!("could not reach {target_err_db} dB for filter {c} within 1000 draws")))?);
    }
    FilterBank::from_rows(&rows)?.normalized()
}

/// Mean reconstruction loss over windows, encoder run in inference mode.
pub fn mean_loss_h<W: AsRef<[f64]> + Sync>(
    windows: &[W],
    h: &FilterBank,
    enc: &EncoderConfig,
    exec: Execution,
    deterministic: bool,
) -> Result<f64> {
    if windows.is_empty() {
        return Ok(f64::NAN);
    }
    let s = map_sum(windows.len(), 1, exec, deterministic, |j| {
        let y = windows[j].as_ref();
        let (x, _) = encode(y, h, enc, false)?;
        Ok::<_, Error>(vec![reconstruction_loss(y, h, &x)?])
    })?;
    Ok(s[0] / windows.len() as f64)
}

fn keyed_rng(seed: u64, salt: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(stream);
    rng
}

pub fn train(
    data: &Dataset,
    h0: &FilterBank,
    lambda0: f64,
    cfg: &TrainConfig,
    enc: &EncoderConfig,
    prior: &GammaPrior,
) -> Result<TrainOutcome> {
    train_with_progress(data, h0, lambda0, cfg, enc, prior, |_, _| {})
}

/// [`train`] with a callback after every epoch, given the epoch's record and
/// the filters at the end of it.
pub fn train_with_progress(
    data: &Dataset,
    h0: &FilterBank,
    lambda0: f64,
    cfg: &TrainConfig,
    enc: &EncoderConfig,
    prior: &GammaPrior,
    mut on_epoch: impl FnMut(&EpochRecord, &FilterBank),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    prior.validate()?;
    if !(lambda0 > 0.0 && lambda0.is_finite()) {
        return Err(Error::Domain(format!("initial lambda must be > 0, got {lambda0}")));
    }
    if !h0.is_unit_norm(1e-9) {
        return Err(Error::param("initial filters must have unit-norm rows"));
    }
    let n = data.window_len();
    let mut enc = EncoderConfig { lambda: lambda0, ..*enc };
    enc.validate_for(h0, n)?;
    let exec = cfg.execution();
    let c_count = h0.n_filters();
    let k = h0.filter_len();
    let dim = c_count * k;

    // Validation split.
    let mut order: Vec<usize> = (0..data.n_windows()).collect();
    order.shuffle(&mut keyed_rng(cfg.seed, SPLIT_SALT, 0));
    let n_val = (cfg.validation_fraction * data.n_windows() as f64).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val.min(data.n_windows() - 1));
    let val_windows: Vec<&[f64]> = val_idx.iter().map(|&j| data.window(j)).collect();
    let mut train_windows: Vec<Vec<f64>> = train_idx.iter().map(|&j| data.window(j).to_vec()).collect();
    if cfg.augment_precompute {
        let mut rng = keyed_rng(cfg.seed, AUGMENT_SALT, u64::MAX);
        let base = train_windows.len();
        for j in 0..base {
            let f = flip(&train_windows[j]);
            let r = rotate(&train_windows[j], rng.random_range(1..=n));
            train_windows.push(f);
            train_windows.push(r);
        }
    }
    let on_the_fly = !cfg.augment_precompute && (cfg.augment_flip || cfg.augment_rotate);

    let mut h = h0.clone();
    let mut lambda = lambda0;
    let mut adam_h = Adam::new(dim, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut adam_l = Adam::new(1, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut history = TrainHistory {
        records: Vec::new(),
        best_epoch: 0,
        warnings: Vec::new(),
    };
    let mut best: Option<(f64, FilterBank, f64, f64)> = None;
    let warn = |history: &mut TrainHistory, msg: String| {
        log::warn!("{msg}");
        history.warnings.push(msg);
    };

    for epoch in 1..=cfg.epochs {
        let eta_h = cfg.eta_h * cfg.eta_h_decay.powi(epoch as i32 - 1);
        let start = Instant::now();
        let mut perm: Vec<usize> = (0..train_windows.len()).collect();
        perm.shuffle(&mut keyed_rng(cfg.seed, SHUFFLE_SALT, epoch as u64));
        let mut loss_sum = 0.0;
        let mut clamped = false;

        for batch in perm.chunks(cfg.batch_size) {
            let h_ref = &h;
            let enc_ref = &enc;
            let windows = &train_windows;
            let sums = map_sum(batch.len(), dim + 3, exec, cfg.deterministic, |b| {
                let j = batch[b];
                let aug;
                let y: &[f64] = if on_the_fly {
                    let mut rng = keyed_rng(cfg.seed, AUGMENT_SALT, ((epoch as u64) << 32) | j as u64);
                    aug = augment_window(&windows[j], cfg.augment_flip, cfg.augment_rotate, &mut rng);
                    &aug
                } else {
                    &windows[j]
                };
                let (_, trace) = encode(y, h_ref, enc_ref, true)?;
                let trace = trace.expect("trace requested");
                let (mut g, loss) = grad_h_with_loss(y, h_ref, enc_ref, &trace)?;
                let gl = grad_lambda_parts(y, h_ref, enc_ref, prior, &trace)?;
                g.extend([gl.data_term, gl.log_prior_term, loss]);
                Ok::<_, Error>(g)
            })?;
            if let Some(i) = sums.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient entry {i} in epoch {epoch} (lambda={lambda})"
                )));
            }
            let inv = 1.0 / batch.len() as f64;
            loss_sum += sums[dim + 2];

            // Stage 1: filters.
            if cfg.eta_h > 0.0 {
                let mut grad: Vec<f64> = sums[..dim].iter().map(|v| v * inv).collect();
                if cfg.project_gradient {
                    project_tangent(&h, &mut grad);
                }
                adam_h.step(h.as_mut_slice(), &grad, eta_h);
                h.normalize()?;
            }
            // Stage 2: lambda.
            if cfg.eta_lambda > 0.0 {
                let mut g = sums[dim] * inv;
                if cfg.lambda_log_prior {
                    g += sums[dim + 1] * inv;
                }
                let mut p = [lambda];
                adam_l.step(&mut p, &[g], cfg.eta_lambda);
                if !(p[0] >= LAMBDA_MIN) || p[0] > LAMBDA_MAX {
                    clamped = true;
                }
                lambda = p[0].clamp(LAMBDA_MIN, LAMBDA_MAX);
                enc.lambda = lambda;
            }
        }
        if clamped {
            warn(
                &mut history,
                format!("epoch {epoch}: lambda hit the clamp range [{LAMBDA_MIN:e}, {LAMBDA_MAX:e}]"),
            );
        }

        let estimate = estimate_lipschitz(&h, n, DEFAULT_POWER_TOL, DEFAULT_POWER_MAX_ITER)?;
        if cfg.reestimate_lipschitz {
            enc.lipschitz = estimate.lipschitz;
        } else if estimate.sigma_max_sq > enc.lipschitz {
            warn(
                &mut history,
                format!(
                    "epoch {epoch}: fixed L={} is below the current spectral estimate {}",
                    enc.lipschitz, estimate.sigma_max_sq
                ),
            );
        }

        let val_loss = mean_loss_h(&val_windows, &h, &enc, exec, cfg.deterministic)?;
        let filter_err_db = match &data.truth {
            Some(t) => match_filters(&t.filters, &h, k / 2)?.err_by_true(),
            None => Vec::new(),
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / perm.len() as f64,
            val_loss,
            lambda,
            filter_err_db,
            seconds: start.elapsed().as_secs_f64(),
        };
        // Without a validation split the most recent epoch wins.
        let score = if val_loss.is_nan() { -(epoch as f64) } else { val_loss };
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, h.clone(), lambda, enc.lipschitz));
            history.best_epoch = epoch;
        }
        on_epoch(&record, &h);
        history.records.push(record);
    }

    let (_, filters, lambda, lipschitz) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        filters,
        lambda,
        lipschitz,
        history,
    })
}
