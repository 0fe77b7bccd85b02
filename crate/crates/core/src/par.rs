//! Window-level data parallelism.
//!
//! Every batch operation in the crate (encoding, gradients, sorting) maps an
//! independent closure over window indices. With the `parallel` feature the
//! map runs on the rayon pool; without it, or with [`Execution::Sequential`],
//! it is a plain loop. Results always come back in index order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How a batch of independent window computations is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    /// `Parallel` degrades to `Sequential` when the crate is built without the
    /// `parallel` feature.
    pub fn effective(self) -> Execution {
        if cfg!(feature = "parallel") {
            self
        } else {
            Execution::Sequential
        }
    }
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indexed<T, F>(n: usize, exec: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec.effective() {
        #[cfg(feature = "parallel")]
        Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// Like [`map_indexed`] but short-circuits on the first error (in index
/// order for sequential execution; any failing index for parallel).
pub fn try_map_indexed<T, E, F>(n: usize, exec: Execution, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    match exec.effective() {
        #[cfg(feature = "parallel")]
        Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// Sums equal-length vectors with a fixed pairwise tree, so the floating
/// point result depends only on the input order, never on thread count.
pub fn tree_sum(mut parts: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    if parts.is_empty() {
        return None;
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += *y;
                }
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop()
}

/// Maps `f` over `0..n` and sums the resulting vectors.
///
/// When `deterministic` is set the partial results are collected and reduced
/// with [`tree_sum`]; otherwise rayon's work-stealing reduction is used, whose
/// association order (and so the last bits of the sum) can vary between runs.
pub fn map_sum<F, E>(n: usize, dim: usize, exec: Execution, deterministic: bool, f: F) -> Result<Vec<f64>, E>
where
    E: Send,
    F: Fn(usize) -> Result<Vec<f64>, E> + Sync + Send,
{
    if n == 0 {
        return Ok(vec![0.0; dim]);
    }
    match (exec.effective(), deterministic) {
        #[cfg(feature = "parallel")]
        (Execution::Parallel, false) => (0..n).into_par_iter().map(f).try_reduce(
            || vec![0.0; dim],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += *y;
                }
                Ok(a)
            },
        ),
        _ => {
            let parts = try_map_indexed(n, exec, f)?;
            Ok(tree_sum(parts).unwrap_or_else(|| vec![0.0; dim]))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let seq = map_indexed(100, Execution::Sequential, |i| i * i);
        let par = map_indexed(100, Execution::Parallel, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }

    #[test]
    fn tree_sum_matches_plain_sum_on_integers() {
        let parts: Vec<Vec<f64>> = (0..13).map(|i| vec![i as f64, 1.0]).collect();
        assert_eq!(tree_sum(parts), Some(vec![78.0, 13.0]));
        assert_eq!(tree_sum(vec![]), None);
    }

    #[test]
    fn deterministic_sum_is_schedule_independent() {
        let f = |i: usize| -> Result<Vec<f64>, ()> { Ok(vec![(i as f64).sin() * 1e-3, 1.0 / (i as f64 + 1.0)]) };
        let a = map_sum(1000, 2, Execution::Parallel, true, f).unwrap();
        let b = map_sum(1000, 2, Execution::Sequential, true, f).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn try_map_propagates_errors() {
        let r: Result<Vec<usize>, String> = try_map_indexed(10, Execution::Sequential, |i| if i == 3 { Err("boom".into()) } else { Ok(i) });
        assert_eq!(r.unwrap_err(), "boom");
    }
}
