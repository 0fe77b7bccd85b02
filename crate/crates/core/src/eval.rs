//! Filter-recovery error, filter matching and spike-sorting scores.

use serde::{Deserialize, Serialize};

use crate::conv::{dot, CodeMap, FilterBank};
use crate::encoder::{encode, EncoderConfig};
use crate::error::{Error, Result};
use crate::par::{try_map_indexed, Execution};
use crate::sim::{Dataset, SpikeEvent};

/// Floor for [`filter_err`] when the two filters are parallel.
pub const ERR_FLOOR_DB: f64 = -150.0;
/// Largest filter count searched exhaustively by [`match_filters`].
pub const EXHAUSTIVE_MAX_FILTERS: usize = 8;
pub const DEFAULT_TOLERANCE: usize = 10;

/// `10 log10 sqrt(1 - cos^2)` between two filters, floored at -150 dB (which
/// it also returns once `1 - cos^2` is within rounding of zero).
pub fn filter_err(h_true: &[f64], h_hat: &[f64]) -> Result<f64> {
    if h_true.len() != h_hat.len() {
        return Err(Error::dim(format!("filter lengths differ: {} vs {}", h_true.len(), h_hat.len())));
    }
    err_from_inner(dot(h_true, h_hat), dot(h_true, h_true), dot(h_hat, h_hat))
}

fn err_from_inner(inner: f64, ntrue: f64, nhat: f64) -> Result<f64> {
    if ntrue == 0.0 || nhat == 0.0 {
        return Err(Error::Domain("filter_err of a zero filter".into()));
    }
    let gap = 1.0 - inner * inner / (ntrue * nhat);
    // Below a few ulps the gap is rounding noise from the cosine itself.
    if gap <= 8.0 * f64::EPSILON {
        return Ok(ERR_FLOOR_DB);
    }
    Ok((5.0 * gap.log10()).max(ERR_FLOOR_DB))
}

/// `sum_k a[k] b[k + shift]` with zero padding.
fn shifted_inner(a: &[f64], b: &[f64], shift: isize) -> f64 {
    let mut s = 0.0;
    for (k, &av) in a.iter().enumerate() {
        let i = k as isize + shift;
        if i >= 0 && (i as usize) < b.len() {
            s += av * b[i as usize];
        }
    }
    s
}

/// Error between `h_true[k]` and `h_hat[k + shift]` (zero padded, full norms).
pub fn shifted_filter_err(h_true: &[f64], h_hat: &[f64], shift: isize) -> Result<f64> {
    err_from_inner(shifted_inner(h_true, h_hat, shift), dot(h_true, h_true), dot(h_hat, h_hat))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct PairFit {
    err_db: f64,
    shift: isize,
    sign: i8,
}

fn best_pair(h_true: &[f64], h_hat: &[f64], max_shift: usize) -> Result<PairFit> {
    let (nt, nh) = (dot(h_true, h_true), dot(h_hat, h_hat));
    let mut best: Option<PairFit> = None;
    let m = max_shift as isize;
    // Visit shifts by increasing magnitude so ties prefer the smallest shift.
    for s in std::iter::once(0).chain((1..=m).flat_map(|s| [s, -s])) {
        let inner = shifted_inner(h_true, h_hat, s);
        let err_db = err_from_inner(inner, nt, nh)?;
        if best.is_none_or(|b| err_db < b.err_db) {
            best = Some(PairFit {
                err_db,
                shift: s,
                sign: if inner < 0.0 { -1 } else { 1 },
            });
        }
    }
    Ok(best.expect("shift range is never empty"))
}

/// Assignment of learned filters to true filters.
///
/// All vectors are indexed by learned filter `c`: it matches true filter
/// `permutation[c]`, and `h_true[k]` lines up with `h_hat[k + shifts[c]]`, so an
/// event detected at onset `n` in learned channel `c` corresponds to a true
/// onset near `n + shifts[c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub permutation: Vec<usize>,
    pub shifts: Vec<isize>,
    pub signs: Vec<i8>,
    pub err_db: Vec<f64>,
    /// True when the greedy fallback was used instead of exhaustive search.
    pub greedy: bool,
}

impl MatchResult {
    pub fn total_err(&self) -> f64 {
        self.err_db.iter().sum()
    }

    pub fn max_err(&self) -> f64 {
        self.err_db.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn median_err(&self) -> f64 {
        median(&self.err_db)
    }

    /// Errors reordered by true filter index.
    pub fn err_by_true(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.err_db.len()];
        for (c, &t) in self.permutation.iter().enumerate() {
            out[t] = self.err_db[c];
        }
        out
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

fn cost_table(h_true: &FilterBank, h_hat: &FilterBank, max_shift: usize) -> Result<Vec<Vec<PairFit>>> {
    if h_true.n_filters() != h_hat.n_filters() || h_true.filter_len() != h_hat.filter_len() {
        return Err(Error::dim(format!(
            "cannot match {}x{} filters against {}x{}",
            h_hat.n_filters(),
            h_hat.filter_len(),
            h_true.n_filters(),
            h_true.filter_len()
        )));
    }
    (0..h_hat.n_filters())
        .map(|c| {
            (0..h_true.n_filters())
                .map(|t| best_pair(h_true.filter(t), h_hat.filter(c), max_shift))
                .collect()
        })
        .collect()
}

fn assemble_match(table: &[Vec<PairFit>], perm: Vec<usize>, greedy: bool) -> MatchResult {
    let fits: Vec<PairFit> = perm.iter().enumerate().map(|(c, &t)| table[c][t]).collect();
    MatchResult {
        permutation: perm,
        shifts: fits.iter().map(|f| f.shift).collect(),
        signs: fits.iter().map(|f| f.sign).collect(),
        err_db: fits.iter().map(|f| f.err_db).collect(),
        greedy,
    }
}

/// Matches learned filters to true ones, minimizing summed error over
/// permutations and shifts in `[-max_shift, max_shift]`. Exhaustive up to
/// [`EXHAUSTIVE_MAX_FILTERS`] filters, greedy beyond.
pub fn match_filters(h_true: &FilterBank, h_hat: &FilterBank, max_shift: usize) -> Result<MatchResult> {
    let table = cost_table(h_true, h_hat, max_shift)?;
    let c = table.len();
    if c > EXHAUSTIVE_MAX_FILTERS {
        return Ok(assemble_match(&table, greedy_assignment(&table), true));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut perm: Vec<usize> = (0..c).collect();
    permute(&mut perm, 0, &mut |p| {
        let total: f64 = p.iter().enumerate().map(|(i, &t)| table[i][t].err_db).sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, p.to_vec()));
        }
    });
    Ok(assemble_match(&table, best.expect("at least one permutation").1, false))
}

/// Greedy matching only (smallest pair error first).
pub fn match_filters_greedy(h_true: &FilterBank, h_hat: &FilterBank, max_shift: usize) -> Result<MatchResult> {
    let table = cost_table(h_true, h_hat, max_shift)?;
    Ok(assemble_match(&table, greedy_assignment(&table), true))
}

fn greedy_assignment(table: &[Vec<PairFit>]) -> Vec<usize> {
    let c = table.len();
    let mut pairs: Vec<(usize, usize)> = (0..c).flat_map(|i| (0..c).map(move |t| (i, t))).collect();
    pairs.sort_by(|a, b| table[a.0][a.1].err_db.total_cmp(&table[b.0][b.1].err_db).then(a.cmp(b)));
    let mut perm = vec![usize::MAX; c];
    let mut used = vec![false; c];
    for (i, t) in pairs {
        if perm[i] == usize::MAX && !used[t] {
            perm[i] = t;
            used[t] = true;
        }
    }
    perm
}

fn permute(p: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        visit(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, visit);
        p.swap(k, i);
    }
}

/// Thresholded local maxima of `|x_c|`, greedily thinned (largest first) so
/// that kept events on a channel are at least `min_separation` apart.
pub fn detect_events(code: &CodeMap, threshold: f64, min_separation: usize) -> Vec<SpikeEvent> {
    let mut out = Vec::new();
    for c in 0..code.channels() {
        let x = code.channel(c);
        let mut cand: Vec<usize> = (0..x.len())
            .filter(|&n| {
                let a = x[n].abs();
                a > threshold && (n == 0 || a > x[n - 1].abs()) && (n + 1 == x.len() || a >= x[n + 1].abs())
            })
            .collect();
        cand.sort_by(|&a, &b| x[b].abs().total_cmp(&x[a].abs()).then(a.cmp(&b)));
        let mut kept: Vec<usize> = Vec::new();
        for n in cand {
            if kept.iter().all(|&k| k.abs_diff(n) >= min_separation) {
                kept.push(n);
            }
        }
        kept.sort_unstable();
        out.extend(kept.into_iter().map(|n| SpikeEvent {
            channel: c,
            sample: n,
            amplitude: x[n],
        }));
    }
    out
}

/// Detected events for each threshold: `events[i][j]` lists window `j`'s
/// events at `thresholds[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Detections {
    pub thresholds: Vec<f64>,
    pub events: Vec<Vec<Vec<SpikeEvent>>>,
}

impl Detections {
    pub fn counts(&self) -> Vec<usize> {
        self.events.iter().map(|per| per.iter().map(Vec::len).sum()).collect()
    }
}

/// Encodes every window once and detects events at each threshold.
/// `thresholds` are sorted ascending in the result.
pub fn spike_sort(
    data: &Dataset,
    h: &FilterBank,
    enc: &EncoderConfig,
    thresholds: &[f64],
    min_separation: Option<usize>,
    exec: Execution,
) -> Result<Detections> {
    enc.validate_for(h, data.window_len())?;
    let mut thr = thresholds.to_vec();
    if thr.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::param("thresholds must be finite and >= 0"));
    }
    thr.sort_by(f64::total_cmp);
    let sep = min_separation.unwrap_or(h.filter_len());
    let per_window = try_map_indexed(data.n_windows(), exec, |j| {
        let (x, _) = encode(data.window(j), h, enc, false)?;
        Ok::<_, Error>(thr.iter().map(|&t| detect_events(&x, t, sep)).collect::<Vec<_>>())
    })?;
    let mut events: Vec<Vec<Vec<SpikeEvent>>> = vec![Vec::with_capacity(data.n_windows()); thr.len()];
    for w in per_window {
        for (i, ev) in w.into_iter().enumerate() {
            events[i].push(ev);
        }
    }
    Ok(Detections { thresholds: thr, events })
}

/// Maps learned-channel events onto true channels and onsets.
pub fn align_events(events: &[SpikeEvent], m: &MatchResult) -> Vec<SpikeEvent> {
    events
        .iter()
        .filter_map(|e| {
            let s = e.sample as isize + m.shifts[e.channel];
            (s >= 0).then(|| SpikeEvent {
                channel: m.permutation[e.channel],
                sample: s as usize,
                amplitude: e.amplitude,
            })
        })
        .collect()
}

/// One-to-one matching of estimated to true events on the same channel
/// within `tolerance` samples, closest pairs first. Returns matched pairs as
/// `(estimated index, true index)`.
pub fn match_events(estimated: &[SpikeEvent], truth: &[SpikeEvent], tolerance: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for (i, e) in estimated.iter().enumerate() {
        for (t, g) in truth.iter().enumerate() {
            let d = e.sample.abs_diff(g.sample);
            if e.channel == g.channel && d <= tolerance {
                pairs.push((d, i, t));
            }
        }
    }
    pairs.sort_unstable();
    let mut est_used = vec![false; estimated.len()];
    let mut true_used = vec![false; truth.len()];
    let mut out = Vec::new();
    for (_, i, t) in pairs {
        if !est_used[i] && !true_used[t] {
            est_used[i] = true;
            true_used[t] = true;
            out.push((i, t));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SortReport {
    pub thresholds: Vec<f64>,
    pub true_miss: Vec<f64>,
    pub false_alarm: Vec<f64>,
    pub tolerance_samples: usize,
    pub detected: Vec<usize>,
    pub true_total: usize,
    /// Threshold indices where true_miss decreased or false_alarm increased
    /// relative to the previous threshold.
    pub monotonicity_violations: Vec<usize>,
}

impl SortReport {
    /// Index of the threshold minimizing `max(true_miss, false_alarm)`.
    pub fn best_index(&self) -> Option<usize> {
        (0..self.thresholds.len()).min_by(|&a, &b| {
            let fa = self.true_miss[a].max(self.false_alarm[a]);
            let fb = self.true_miss[b].max(self.false_alarm[b]);
            fa.total_cmp(&fb)
        })
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// True-miss and false-alarm proportions for every threshold. Estimated
/// events must already be expressed in true channels and onsets (see
/// [`align_events`]).
pub fn roc_curve(detections: &Detections, truth: &[Vec<SpikeEvent>], tolerance: usize) -> Result<SortReport> {
    let true_total: usize = truth.iter().map(Vec::len).sum();
    let mut true_miss = Vec::new();
    let mut false_alarm = Vec::new();
    let mut detected = Vec::new();
    for per in &detections.events {
        if per.len() != truth.len() {
            return Err(Error::dim(format!(
                "{} detected windows vs {} truth windows",
                per.len(),
                truth.len()
            )));
        }
        let est_total: usize = per.iter().map(Vec::len).sum();
        let matched: usize = per.iter().zip(truth).map(|(e, t)| match_events(e, t, tolerance).len()).sum();
        true_miss.push(ratio(true_total - matched, true_total));
        false_alarm.push(ratio(est_total - matched, est_total));
        detected.push(est_total);
    }
    let violations = (1..true_miss.len())
        .filter(|&i| true_miss[i] < true_miss[i - 1] || false_alarm[i] > false_alarm[i - 1])
        .collect::<Vec<_>>();
    if !violations.is_empty() {
        log::warn!("sorting curve is not monotone at threshold indices {violations:?}");
    }
    Ok(SortReport {
        thresholds: detections.thresholds.clone(),
        true_miss,
        false_alarm,
        tolerance_samples: tolerance,
        detected,
        true_total,
        monotonicity_violations: violations,
    })
}

/// Aligns detections through `m` and scores them against the truth.
pub fn score_sorting(detections: &Detections, truth: &[Vec<SpikeEvent>], m: &MatchResult, tolerance: usize) -> Result<SortReport> {
    let aligned = Detections {
        thresholds: detections.thresholds.clone(),
        events: detections
            .events
            .iter()
            .map(|per| per.iter().map(|e| align_events(e, m)).collect())
            .collect(),
    };
    roc_curve(&aligned, truth, tolerance)
}
