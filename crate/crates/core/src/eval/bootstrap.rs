use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MomeError, Result};

/// Case indices of resample `i`: `n` draws with replacement from a ChaCha8
/// stream keyed by `(seed, i)`.
pub fn resample_indices(n: usize, seed: u64, i: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Nearest-rank percentile of sorted values, `p` in percent.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let k = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[k.clamp(1, sorted.len()) - 1]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    /// Resamples on which the statistic was undefined.
    pub skipped: usize,
}

fn check_boot(n: usize, n_boot: usize) -> Result<()> {
    if n == 0 {
        return Err(MomeError::invalid("empty cohort"));
    }
    if n_boot < 2 {
        return Err(MomeError::invalid(format!("n_boot {n_boot} must be >= 2")));
    }
    Ok(())
}

/// Values of `stat` on resamples `0..n_boot`, in resample order.
fn resample_values<F>(n: usize, n_boot: usize, seed: u64, stat: &F) -> Vec<Option<f64>>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    (0..n_boot as u64)
        .into_par_iter()
        .map(|i| stat(&resample_indices(n, seed, i)))
        .collect()
}

/// Percentile bootstrap: `stat` maps case indices to a value (or `None`
/// when undefined on that resample). The point estimate uses every case once.
pub fn bootstrap_ci<F>(n: usize, stat: F, n_boot: usize, seed: u64) -> Result<Interval>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    check_boot(n, n_boot)?;
    let identity: Vec<usize> = (0..n).collect();
    let point = stat(&identity).ok_or_else(|| MomeError::Undefined("statistic undefined on the full cohort".into()))?;
    let values = resample_values(n, n_boot, seed, &stat);
    let skipped = values.iter().filter(|v| v.is_none()).count();
    let mut valid: Vec<f64> = values.into_iter().flatten().collect();
    if valid.is_empty() {
        return Err(MomeError::Undefined("statistic undefined on every resample".into()));
    }
    valid.sort_by(f64::total_cmp);
    Ok(Interval {
        point,
        lo: nearest_rank(&valid, 2.5),
        hi: nearest_rank(&valid, 97.5),
        skipped,
    })
}

/// Paired bootstrap of `stat_a − stat_b` over shared case indices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedDifference {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub p_value: f64,
    pub skipped: usize,
}

impl PairedDifference {
    /// The 95% interval excludes zero.
    pub fn significant(&self) -> bool {
        self.lo > 0.0 || self.hi < 0.0
    }
}

pub fn paired_bootstrap<A, B>(n: usize, stat_a: A, stat_b: B, n_boot: usize, seed: u64) -> Result<PairedDifference>
where
    A: Fn(&[usize]) -> Option<f64> + Sync,
    B: Fn(&[usize]) -> Option<f64> + Sync,
{
    check_boot(n, n_boot)?;
    let diff = |idx: &[usize]| Some(stat_a(idx)? - stat_b(idx)?);
    let identity: Vec<usize> = (0..n).collect();
    let point =
        diff(&identity).ok_or_else(|| MomeError::Undefined("difference undefined on the full cohort".into()))?;
    let values = resample_values(n, n_boot, seed, &diff);
    let skipped = values.iter().filter(|v| v.is_none()).count();
    let mut valid: Vec<f64> = values.into_iter().flatten().collect();
    if valid.is_empty() {
        return Err(MomeError::Undefined("difference undefined on every resample".into()));
    }
    let k = valid.len() as f64;
    let le = valid.iter().filter(|&&d| d <= 0.0).count() as f64 / k;
    let ge = valid.iter().filter(|&&d| d >= 0.0).count() as f64 / k;
    let p_value = (2.0 * le.min(ge)).clamp(2.0 / (n_boot as f64 + 1.0), 1.0);
    valid.sort_by(f64::total_cmp);
    Ok(PairedDifference {
        point,
        lo: nearest_rank(&valid, 2.5),
        hi: nearest_rank(&valid, 97.5),
        p_value,
        skipped,
    })
}

/// Two-sided bootstrap p-value of `stat_a − stat_b`.
pub fn bootstrap_pvalue<A, B>(n: usize, stat_a: A, stat_b: B, n_boot: usize, seed: u64) -> Result<f64>
where
    A: Fn(&[usize]) -> Option<f64> + Sync,
    B: Fn(&[usize]) -> Option<f64> + Sync,
{
    Ok(paired_bootstrap(n, stat_a, stat_b, n_boot, seed)?.p_value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_examples() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 2.5), 25.0);
        assert_eq!(nearest_rank(&v, 97.5), 975.0);
        assert_eq!(nearest_rank(&[3.0], 2.5), 3.0);
    }

    #[test]
    fn constant_statistic_has_degenerate_interval() {
        let ci = bootstrap_ci(30, |_| Some(0.7), 200, 1).unwrap();
        assert_eq!((ci.point, ci.lo, ci.hi), (0.7, 0.7, 0.7));
    }

    #[test]
    fn all_undefined_is_an_error() {
        assert!(bootstrap_ci(5, |i: &[usize]| (i.len() == 5 && i[0] == 99).then_some(1.0), 10, 0).is_err());
    }

    #[test]
    fn separated_difference_hits_clip_floor() {
        let p = bootstrap_pvalue(20, |_| Some(1.0), |_| Some(0.0), 1000, 3).unwrap();
        assert_eq!(p, 2.0 / 1001.0);
        let same = bootstrap_pvalue(20, |_| Some(0.4), |_| Some(0.4), 1000, 3).unwrap();
        assert_eq!(same, 1.0);
    }
}
