//! Synthetic recordings from the convolutional generative model.
//!
//! Each window is `sum_c h_c * x_c + v` with sparse spike trains `x_c`, then
//! the whole dataset is divided by its maximum absolute value.
//!
//! Random streams are derived from a single seed with ChaCha8 stream ids:
//! stream 0 draws the filters, stream `2j + 1` the events of window `j` and
//! stream `2j + 2` its noise. The noise is drawn as a standard normal scaled by
//! sigma afterwards, so two configs differing only in SNR share events and
//! noise shape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conv::{dot, l2_norm, synth_into, CodeMap, FilterBank};
use crate::error::{Error, Result};
use crate::par::{map_indexed, try_map_indexed, Execution};

const FILTER_STREAM: u64 = 0;
const MAX_FILTER_ATTEMPTS: usize = 100_000;

/// Where the simulated filters come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterSource {
    /// Smoothed Gaussian noise, unit norm, rejection-sampled so every pair's
    /// peak |normalized cross-correlation| over all lags lies in
    /// `[min_xcorr, max_xcorr]`.
    Synthetic {
        min_xcorr: f64,
        max_xcorr: f64,
    },
    Supplied(FilterBank),
}

impl Default for FilterSource {
    fn default() -> Self {
        FilterSource::Synthetic {
            min_xcorr: 0.5,
            max_xcorr: 0.95,
        }
    }
}

/// Fields left out of a JSON config take their [`Default`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    #[serde(rename = "C")]
    pub n_filters: usize,
    #[serde(rename = "K")]
    pub filter_len: usize,
    #[serde(rename = "N")]
    pub window_len: usize,
    #[serde(rename = "J")]
    pub n_windows: usize,
    pub firing_rate_hz: f64,
    pub fs_hz: f64,
    pub amp_mean: f64,
    pub amp_std: f64,
    /// `None` (or +inf) disables the noise.
    #[serde(default)]
    pub snr_db: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub filter_source: FilterSource,
}

/// Four neurons, 1000 windows of 500 samples, 16 dB.
impl Default for SimConfig {
    fn default() -> Self {
        SimConfig::four_neuron(500, 1000, Some(16.0), 0)
    }
}

impl SimConfig {
    /// Small-scale version of the four-neuron recording: 30 Hz, 10 kHz,
    /// amplitudes N(180, 30).
    pub fn four_neuron(window_len: usize, n_windows: usize, snr_db: Option<f64>, seed: u64) -> Self {
        SimConfig {
            n_filters: 4,
            filter_len: 18,
            window_len,
            n_windows,
            firing_rate_hz: 30.0,
            fs_hz: 10_000.0,
            amp_mean: 180.0,
            amp_std: 30.0,
            snr_db,
            seed,
            filter_source: FilterSource::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_filters == 0 || self.filter_len == 0 || self.n_windows == 0 {
            return Err(Error::dim(format!(
                "C, K and J must be positive (C={}, K={}, J={})",
                self.n_filters, self.filter_len, self.n_windows
            )));
        }
        if self.filter_len > self.window_len {
            return Err(Error::dim(format!(
                "filter length K={} exceeds window length N={}",
                self.filter_len, self.window_len
            )));
        }
        if !(self.firing_rate_hz >= 0.0 && self.firing_rate_hz.is_finite()) {
            return Err(Error::param(format!("firing_rate_hz must be >= 0, got {}", self.firing_rate_hz)));
        }
        if !(self.fs_hz > 0.0 && self.fs_hz.is_finite()) {
            return Err(Error::param(format!("fs_hz must be > 0, got {}", self.fs_hz)));
        }
        if !(self.amp_std >= 0.0 && self.amp_std.is_finite() && self.amp_mean.is_finite()) {
            return Err(Error::param(format!(
                "need finite amp_mean and amp_std >= 0, got {} and {}",
                self.amp_mean, self.amp_std
            )));
        }
        if let Some(s) = self.snr_db {
            if s.is_nan() || s == f64::NEG_INFINITY {
                return Err(Error::param(format!("snr_db must be a number or +inf, got {s}")));
            }
        }
        match &self.filter_source {
            FilterSource::Synthetic { min_xcorr, max_xcorr } => {
                if !(0.0..=1.0).contains(min_xcorr) || !(0.0..=1.0).contains(max_xcorr) || min_xcorr > max_xcorr {
                    return Err(Error::param(format!(
                        "cross-correlation band [{min_xcorr}, {max_xcorr}] must be inside [0, 1]"
                    )));
                }
            }
            FilterSource::Supplied(h) => {
                if h.n_filters() != self.n_filters || h.filter_len() != self.filter_len {
                    return Err(Error::dim(format!(
                        "supplied filters are {}x{}, config says {}x{}",
                        h.n_filters(),
                        h.filter_len(),
                        self.n_filters,
                        self.filter_len
                    )));
                }
            }
        }
        Ok(())
    }

    fn noise_enabled(&self) -> bool {
        matches!(self.snr_db, Some(s) if s.is_finite())
    }

    /// Expected kept events per window and channel: Poisson count over the
    /// admissible onsets `[0, N-K]`, reduced by the dead-time factor
    /// `1 / (1 + rho K)` of the K-sample refractory thinning.
    pub fn expected_events_per_window(&self) -> f64 {
        let rho = self.firing_rate_hz / self.fs_hz;
        rho * (self.window_len - self.filter_len + 1) as f64 / (1.0 + rho * self.filter_len as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeEvent {
    pub channel: usize,
    pub sample: usize,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub filters: FilterBank,
    /// Events per window; amplitudes are on the pre-normalization scale.
    pub events: Vec<Vec<SpikeEvent>>,
}

impl GroundTruth {
    /// The code map of window `j` (unnormalized amplitudes).
    pub fn code(&self, j: usize, window_len: usize) -> CodeMap {
        let mut x = CodeMap::zeros(self.filters.n_filters(), window_len - self.filters.filter_len() + 1);
        for e in &self.events[j] {
            x.set(e.channel, e.sample, x.get(e.channel, e.sample) + e.amplitude);
        }
        x
    }

    pub fn event_count(&self) -> usize {
        self.events.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n_windows: usize,
    window_len: usize,
    samples: Vec<f64>,
    /// Noise standard deviation after normalization (0 when noiseless).
    pub sigma: f64,
    pub fs_hz: f64,
    /// The max-abs divisor that was applied.
    pub normalization_scale: f64,
    pub truth: Option<GroundTruth>,
}

impl Dataset {
    pub fn new(
        n_windows: usize,
        window_len: usize,
        samples: Vec<f64>,
        sigma: f64,
        fs_hz: f64,
        normalization_scale: f64,
        truth: Option<GroundTruth>,
    ) -> Result<Self> {
        if samples.len() != n_windows * window_len {
            return Err(Error::dim(format!(
                "{} samples cannot form {n_windows} windows of length {window_len}",
                samples.len()
            )));
        }
        if let Some(t) = &truth {
            if t.events.len() != n_windows {
                return Err(Error::dim(format!(
                    "truth has {} event lists for {n_windows} windows",
                    t.events.len()
                )));
            }
            let ne = (window_len + 1).saturating_sub(t.filters.filter_len());
            for e in t.events.iter().flatten() {
                if e.channel >= t.filters.n_filters() || e.sample >= ne {
                    return Err(Error::Malformed(format!("truth event {e:?} out of range")));
                }
            }
        }
        Ok(Dataset {
            n_windows,
            window_len,
            samples,
            sigma,
            fs_hz,
            normalization_scale,
            truth,
        })
    }

    /// Splits a continuous recording into consecutive windows of `window_len`
    /// (a trailing partial window is dropped) and divides by the max absolute
    /// value. `sigma` is on the raw scale; when absent it is estimated as
    /// `MAD / 0.6745`.
    pub fn from_recording(recording: &[f64], window_len: usize, fs_hz: f64, sigma: Option<f64>) -> Result<Self> {
        if window_len == 0 {
            return Err(Error::dim("window length must be positive"));
        }
        let n_windows = recording.len() / window_len;
        if n_windows == 0 {
            return Err(Error::dim(format!(
                "recording of {} samples is shorter than one window ({window_len})",
                recording.len()
            )));
        }
        let mut samples = recording[..n_windows * window_len].to_vec();
        if let Some(bad) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("recording sample {bad} is not finite")));
        }
        let raw_sigma = match sigma {
            Some(s) => s,
            None => mad_sigma(&samples),
        };
        let scale = samples.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return Err(Error::Domain("recording is identically zero".into()));
        }
        samples.iter_mut().for_each(|v| *v /= scale);
        Dataset::new(n_windows, window_len, samples, raw_sigma / scale, fs_hz, scale, None)
    }

    pub fn n_windows(&self) -> usize {
        self.n_windows
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn window(&self, j: usize) -> &[f64] {
        &self.samples[j * self.window_len..(j + 1) * self.window_len]
    }

    pub fn windows(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.chunks_exact(self.window_len)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Noiseless window `j` on the normalized scale, rebuilt from the truth.
    pub fn clean_window(&self, j: usize) -> Option<Vec<f64>> {
        let t = self.truth.as_ref()?;
        let mut out = vec![0.0; self.window_len];
        synth_into(&t.filters, &t.code(j, self.window_len), &mut out);
        out.iter_mut().for_each(|v| *v /= self.normalization_scale);
        Some(out)
    }
}

/// Median absolute deviation noise estimate `MAD / 0.6745`.
pub fn mad_sigma(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let med = median(samples.to_vec());
    median(samples.iter().map(|v| (v - med).abs()).collect()) / 0.6745
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Noise level giving `snr_db = 10 log10(mean(clean^2) / sigma^2)`.
pub fn snr_to_sigma(clean: &[f64], snr_db: f64) -> Result<f64> {
    if clean.is_empty() {
        return Err(Error::UndefinedSnr);
    }
    let power = clean.iter().map(|v| v * v).sum::<f64>() / clean.len() as f64;
    if power == 0.0 {
        return Err(Error::UndefinedSnr);
    }
    if snr_db.is_nan() {
        return Err(Error::param("snr_db is NaN"));
    }
    Ok((power / 10f64.powf(snr_db / 10.0)).sqrt())
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Peak |normalized cross-correlation| of two filters over all lags.
pub fn peak_normalized_xcorr(a: &[f64], b: &[f64]) -> f64 {
    let norm = l2_norm(a) * l2_norm(b);
    if norm == 0.0 {
        return 0.0;
    }
    let (ka, kb) = (a.len() as isize, b.len() as isize);
    let mut best = 0.0_f64;
    for lag in -(kb - 1)..ka {
        let mut s = 0.0;
        for (j, &bv) in b.iter().enumerate() {
            let i = j as isize + lag;
            if i >= 0 && i < ka {
                s += a[i as usize] * bv;
            }
        }
        best = best.max(s.abs());
    }
    best / norm
}

fn smooth_unit_filter<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..k + 2).map(|_| rng.sample(StandardNormal)).collect();
    let mut f: Vec<f64> = raw.windows(3).map(|w| (w[0] + w[1] + w[2]) / 3.0).collect();
    let n = dot(&f, &f).sqrt();
    f.iter_mut().for_each(|v| *v /= n);
    f
}

/// Draws `C` smoothed unit-norm filters whose pairwise peak cross-correlation
/// lies in `[min_xcorr, max_xcorr]`. Filters are accepted one at a time.
pub fn synthesize_filters<R: Rng + ?Sized>(
    n_filters: usize,
    filter_len: usize,
    min_xcorr: f64,
    max_xcorr: f64,
    rng: &mut R,
) -> Result<FilterBank> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n_filters);
    let mut attempts = 0;
    while rows.len() < n_filters {
        attempts += 1;
        if attempts > MAX_FILTER_ATTEMPTS {
            return Err(Error::param(format!(
                "could not draw {n_filters} filters of length {filter_len} with cross-correlation in [{min_xcorr}, {max_xcorr}]"
            )));
        }
        let cand = smooth_unit_filter(filter_len, rng);
        if rows.iter().all(|r| {
            let x = peak_normalized_xcorr(r, &cand);
            x >= min_xcorr && x <= max_xcorr
        }) {
            rows.push(cand);
        }
    }
    FilterBank::from_rows(&rows)
}

/// Poisson onsets on `[0, N-K]`, sorted and thinned so consecutive kept
/// onsets are at least `K` apart.
fn draw_events<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<Vec<SpikeEvent>> {
    let span = cfg.window_len - cfg.filter_len + 1;
    let mean_count = cfg.firing_rate_hz * span as f64 / cfg.fs_hz;
    let amp = Normal::new(cfg.amp_mean, cfg.amp_std).map_err(|e| Error::param(e.to_string()))?;
    let count = if mean_count > 0.0 {
        Poisson::new(mean_count).map_err(|e| Error::param(e.to_string()))?
    } else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for c in 0..cfg.n_filters {
        let n: f64 = count.sample(rng);
        let mut onsets: Vec<usize> = (0..n as usize).map(|_| rng.random_range(0..span)).collect();
        onsets.sort_unstable();
        let mut last: Option<usize> = None;
        for s in onsets {
            if last.is_some_and(|l| s < l + cfg.filter_len) {
                continue;
            }
            last = Some(s);
            out.push(SpikeEvent {
                channel: c,
                sample: s,
                amplitude: amp.sample(rng),
            });
        }
    }
    Ok(out)
}

/// Renders `sum_c h_c * x_c` for one window's events.
pub fn render_window(filters: &FilterBank, events: &[SpikeEvent], window_len: usize) -> Result<Vec<f64>> {
    let ne = filters.code_len(window_len)?;
    let mut x = CodeMap::zeros(filters.n_filters(), ne);
    for e in events {
        if e.channel >= filters.n_filters() || e.sample >= ne {
            return Err(Error::dim(format!("event {e:?} does not fit a window of length {window_len}")));
        }
        x.set(e.channel, e.sample, x.get(e.channel, e.sample) + e.amplitude);
    }
    let mut out = vec![0.0; window_len];
    synth_into(filters, &x, &mut out);
    Ok(out)
}

/// Builds a dataset from given filters and events: renders, adds noise at
/// `snr_db` (dataset-wide power), normalizes by the max absolute value.
pub fn assemble(
    filters: &FilterBank,
    events: Vec<Vec<SpikeEvent>>,
    window_len: usize,
    fs_hz: f64,
    snr_db: Option<f64>,
    seed: u64,
    exec: Execution,
) -> Result<Dataset> {
    let j_count = events.len();
    if j_count == 0 {
        return Err(Error::dim("need at least one window"));
    }
    let clean = try_map_indexed(j_count, exec, |j| render_window(filters, &events[j], window_len))?;
    let mut samples: Vec<f64> = clean.into_iter().flatten().collect();

    let mut sigma = 0.0;
    if let Some(snr) = snr_db.filter(|s| s.is_finite()) {
        sigma = match snr_to_sigma(&samples, snr) {
            Ok(s) => s,
            Err(Error::UndefinedSnr) => {
                log::warn!("no events were drawn, so the SNR has no reference power; using unit-variance noise");
                1.0
            }
            Err(e) => return Err(e),
        };
        let noise = map_indexed(j_count, exec, |j| {
            let mut rng = stream_rng(seed, 2 * j as u64 + 2);
            (0..window_len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>()
        });
        for (s, v) in samples.iter_mut().zip(noise.into_iter().flatten()) {
            *s += sigma * v;
        }
    }

    let scale = samples.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let scale = if scale > 0.0 { scale } else { 1.0 };
    samples.iter_mut().for_each(|v| *v /= scale);
    Dataset::new(
        j_count,
        window_len,
        samples,
        sigma / scale,
        fs_hz,
        scale,
        Some(GroundTruth {
            filters: filters.clone(),
            events,
        }),
    )
}

pub fn simulate(cfg: &SimConfig) -> Result<Dataset> {
    simulate_with(cfg, Execution::default())
}

pub fn simulate_with(cfg: &SimConfig, exec: Execution) -> Result<Dataset> {
    cfg.validate()?;
    let filters = match &cfg.filter_source {
        FilterSource::Supplied(h) => h.clone(),
        FilterSource::Synthetic { min_xcorr, max_xcorr } => {
            let mut rng = stream_rng(cfg.seed, FILTER_STREAM);
            synthesize_filters(cfg.n_filters, cfg.filter_len, *min_xcorr, *max_xcorr, &mut rng)?
        }
    };
    let events = try_map_indexed(cfg.n_windows, exec, |j| {
        let mut rng = stream_rng(cfg.seed, 2 * j as u64 + 1);
        draw_events(cfg, &mut rng)
    })?;
    let snr = if cfg.noise_enabled() { cfg.snr_db } else { None };
    assemble(&filters, events, cfg.window_len, cfg.fs_hz, snr, cfg.seed, exec)
}
