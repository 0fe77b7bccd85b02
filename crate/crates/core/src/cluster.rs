//! Filter initialization by clustering detected waveforms: amplitude-threshold
//! detection, projection on the top principal components, k-means.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{dot, FilterBank};
use crate::error::{Error, Result};
use crate::sim::Dataset;

pub const KMEANS_ITERATIONS: usize = 50;
const PCA_COMPONENTS: usize = 2;
const POWER_ITERATIONS: usize = 1000;

/// Length-`K` snippets centred on local maxima of `|y|` above `threshold`,
/// at least `K` samples apart (largest peaks kept first). Peaks too close to a
/// window edge for a full snippet are skipped.
pub fn detect_snippets(data: &Dataset, filter_len: usize, threshold: f64) -> Vec<Vec<f64>> {
    let k = filter_len;
    let mut out = Vec::new();
    for y in data.windows() {
        let mut peaks: Vec<usize> = (0..y.len())
            .filter(|&n| {
                let a = y[n].abs();
                a > threshold && (n == 0 || a > y[n - 1].abs()) && (n + 1 == y.len() || a >= y[n + 1].abs())
            })
            .collect();
        peaks.sort_by(|&a, &b| y[b].abs().total_cmp(&y[a].abs()).then(a.cmp(&b)));
        let mut kept: Vec<usize> = Vec::new();
        for p in peaks {
            if kept.iter().all(|&q| q.abs_diff(p) >= k) {
                kept.push(p);
            }
        }
        kept.sort_unstable();
        for p in kept {
            if p >= k / 2 && p - k / 2 + k <= y.len() {
                out.push(y[p - k / 2..p - k / 2 + k].to_vec());
            }
        }
    }
    out
}

/// Leading eigenvectors of the sample covariance of `rows`, by power
/// iteration with deflation.
pub fn principal_components(rows: &[Vec<f64>], n_components: usize) -> Vec<Vec<f64>> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let d = first.len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n).collect();
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            let a = r[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += a * (r[j] - mean[j]) / n;
            }
        }
    }
    let mut comps: Vec<Vec<f64>> = Vec::new();
    for c in 0..n_components.min(d) {
        // Deterministic start that is not orthogonal to typical components.
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * ((i + c) % 7) as f64).collect();
        let mut eig = 0.0;
        for _ in 0..POWER_ITERATIONS {
            let mut w: Vec<f64> = (0..d).map(|i| dot(&cov[i * d..(i + 1) * d], &v)).collect();
            for p in &comps {
                let a = dot(&w, p);
                w.iter_mut().zip(p).for_each(|(x, y)| *x -= a * y);
            }
            let norm = dot(&w, &w).sqrt();
            if norm == 0.0 {
                break;
            }
            w.iter_mut().for_each(|x| *x /= norm);
            let done = (norm - eig).abs() <= 1e-12 * norm;
            eig = norm;
            v = w;
            if done {
                break;
            }
        }
        comps.push(v);
    }
    comps
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centers: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(i, c)| (i, sq_dist(p, c)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one center")
}

/// k-means with k-means++ seeding and a fixed number of Lloyd iterations.
/// Empty clusters keep their previous center.
pub fn kmeans<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, iterations: usize, rng: &mut R) -> Result<KMeans> {
    if k == 0 || points.len() < k {
        return Err(Error::Init(format!("cannot form {k} clusters from {} points", points.len())));
    }
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    while centers.len() < k {
        let d: Vec<f64> = points.iter().map(|p| nearest(p, &centers).1).collect();
        let total: f64 = d.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = d.len() - 1;
            for (i, w) in d.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[idx].clone());
    }
    let dim = points[0].len();
    let mut labels = vec![0; points.len()];
    for _ in 0..iterations {
        for (l, p) in labels.iter_mut().zip(points) {
            *l = nearest(p, &centers).0;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for ((c, s), &n) in centers.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    for (l, p) in labels.iter_mut().zip(points) {
        *l = nearest(p, &centers).0;
    }
    Ok(KMeans { centers, labels })
}

/// Unit-norm initial filters from clustered event waveforms.
pub fn init_filters_kmeans(data: &Dataset, n_filters: usize, filter_len: usize, threshold: f64, seed: u64) -> Result<FilterBank> {
    if n_filters == 0 || filter_len == 0 || filter_len > data.window_len() {
        return Err(Error::dim(format!(
            "need 1 <= C and 1 <= K <= N, got C={n_filters}, K={filter_len}, N={}",
            data.window_len()
        )));
    }
    let snippets = detect_snippets(data, filter_len, threshold);
    if snippets.len() < n_filters {
        return Err(Error::Init(format!(
            "only {} events exceed threshold {threshold}; lower the threshold",
            snippets.len()
        )));
    }
    let comps = principal_components(&snippets, PCA_COMPONENTS);
    let scores: Vec<Vec<f64>> = snippets.iter().map(|s| comps.iter().map(|c| dot(s, c)).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let km = kmeans(&scores, n_filters, KMEANS_ITERATIONS, &mut rng)?;

    let mut rows = vec![vec![0.0; filter_len]; n_filters];
    let mut counts = vec![0usize; n_filters];
    for (s, &l) in snippets.iter().zip(&km.labels) {
        counts[l] += 1;
        rows[l].iter_mut().zip(s).for_each(|(r, v)| *r += v);
    }
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Init(format!(
            "cluster {empty} is empty ({} clusters populated); lower the threshold",
            counts.iter().filter(|&&n| n > 0).count()
        )));
    }
    let mut bank = FilterBank::from_rows(&rows)?;
    bank.normalize()
        .map_err(|_| Error::Init("a cluster mean waveform is zero".into()))?;
    Ok(bank)
}
