//! Reproducible Monte Carlo aggregation.
//!
//! Paths are split into fixed-size chunks independent of the worker count.
//! Each chunk is folded sequentially in path order; chunk results are then
//! merged pairwise, `(0,1), (2,3), ...`, level by level, with an odd tail
//! carried up unchanged. The summation order is therefore a function of
//! `n_paths` alone and any worker count yields bit-identical results.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;

/// Paths per chunk.
pub const CHUNK: usize = 256;

/// Accumulators that combine partial results.
pub trait Merge: Sized {
    fn merge(&mut self, other: Self);
}

/// Running mean and variance (Welford, merged with Chan's update).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MeanVar {
    pub n: u64,
    pub mean: f64,
    m2: f64,
}

impl MeanVar {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut acc = Self::new();
        xs.iter().for_each(|&x| acc.push(x));
        acc
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Standard error of the mean.
    pub fn stderr(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }

    /// `(mean - target) / stderr`; zero when both the gap and the error vanish.
    pub fn z_score(&self, target: f64) -> f64 {
        let gap = self.mean - target;
        let se = self.stderr();
        if se > 0.0 {
            gap / se
        } else if gap == 0.0 {
            0.0
        } else {
            gap.signum() * f64::INFINITY
        }
    }
}

impl Merge for MeanVar {
    fn merge(&mut self, other: Self) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let w = other.n as f64 / n as f64;
        self.mean += delta * w;
        self.m2 += other.m2 + delta * delta * self.n as f64 * w;
        self.n = n;
    }
}

impl<T: Merge> Merge for Vec<T> {
    fn merge(&mut self, other: Self) {
        assert_eq!(self.len(), other.len(), "accumulator length mismatch");
        for (a, b) in self.iter_mut().zip(other) {
            a.merge(b);
        }
    }
}

/// Per-path values kept in path order; merging concatenates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Samples(pub Vec<f64>);

impl Merge for Samples {
    fn merge(&mut self, other: Self) {
        self.0.extend(other.0);
    }
}

/// Merge in the fixed pairwise tree described in the module docs: adjacent
/// parts, left to right, until one remains.
pub fn pairwise_merge<A: Merge>(mut parts: Vec<A>) -> Option<A> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.merge(b);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub workers: usize,
}

impl McConfig {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        Self {
            n_paths,
            seed,
            workers: 1,
        }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }
}

/// Fold `per_path(path_index, &mut acc)` over all paths.
///
/// The first error in path order is returned.
pub fn run_paths<A, I, F>(cfg: &McConfig, init: I, per_path: F) -> Result<A>
where
    A: Merge + Send,
    I: Fn() -> A + Sync,
    F: Fn(u64, &mut A) -> Result<()> + Sync,
{
    let n_chunks = cfg.n_paths.div_ceil(CHUNK);
    let work = || {
        (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let mut acc = init();
                let start = c * CHUNK;
                let end = (start + CHUNK).min(cfg.n_paths);
                for p in start..end {
                    per_path(p as u64, &mut acc)?;
                }
                Ok(acc)
            })
            .collect::<Vec<Result<A>>>()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .expect("failed to build worker pool");
    let parts = pool.install(work);
    let parts = parts.into_iter().collect::<Result<Vec<A>>>()?;
    Ok(pairwise_merge(parts).unwrap_or_else(&init))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mean_var_matches_two_pass() {
        let xs = [1.0, 4.0, 2.5, -3.0, 7.25, 0.5];
        let acc = MeanVar::from_slice(&xs);
        let mean = xs.iter().sum::<f64>() / 6.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
        assert!((acc.mean - mean).abs() < 1e-14);
        assert!((acc.variance() - var).abs() < 1e-13);
    }

    #[test]
    fn constant_samples_keep_exact_mean() {
        let acc = MeanVar::from_slice(&[0.1; 1000]);
        assert_eq!(acc.mean, 0.1);
        let mut a = MeanVar::from_slice(&[0.1; 7]);
        a.merge(MeanVar::from_slice(&[0.1; 13]));
        assert_eq!(a.mean, 0.1);
    }

    #[test]
    fn worker_count_does_not_change_result() {
        let f = |p: u64, acc: &mut MeanVar| {
            acc.push(((p as f64) * 0.37).sin());
            Ok(())
        };
        let a = run_paths(&McConfig::new(5000, 1).with_workers(1), MeanVar::new, f).unwrap();
        let b = run_paths(&McConfig::new(5000, 1).with_workers(3), MeanVar::new, f).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n, 5000);
    }

    proptest! {
        #[test]
        fn merge_agrees_with_sequential(xs in proptest::collection::vec(-1e3f64..1e3, 2..200), cut in 0usize..200) {
            let cut = cut % xs.len();
            let mut a = MeanVar::from_slice(&xs[..cut]);
            a.merge(MeanVar::from_slice(&xs[cut..]));
            let b = MeanVar::from_slice(&xs);
            prop_assert_eq!(a.n, b.n);
            prop_assert!((a.mean - b.mean).abs() <= 1e-9 * (1.0 + b.mean.abs()));
            prop_assert!((a.variance() - b.variance()).abs() <= 1e-8 * (1.0 + b.variance()));
        }
    }
}
