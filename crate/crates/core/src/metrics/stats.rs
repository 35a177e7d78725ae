//! Cohort statistics: bootstrap aggregation and two-sample tests.

use crate::error::{Error, Result};
use crate::rng::{stream2, tags};
use rand::Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

/// Arithmetic mean.
pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Stats("mean of an empty sample".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Sample standard deviation (n - 1 denominator); 0 for a single value.
pub fn sample_sd(values: &[f64]) -> Result<f64> {
    let m = mean(values)?;
    if values.len() < 2 || values.iter().all(|v| *v == values[0]) {
        // A constant sample has zero spread by definition; the two-pass
        // formula would report rounding dust because the computed mean
        // of n identical values can land an ulp off the value itself.
        return Ok(0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    Ok((ss / (values.len() - 1) as f64).sqrt())
}

/// Mean and spread of bootstrap replicate means.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BootstrapSummary {
    pub replicates: usize,
    pub mean: f64,
    pub sd: f64,
}

/// Resample the cohort with replacement `replicates` times, recording
/// each replicate's mean; report the mean and SD of those means.
/// Replicate r draws from its own RNG stream, so results are
/// deterministic in `seed` and independent of evaluation order.
pub fn bootstrap_mean(values: &[f64], replicates: usize, seed: u64) -> Result<BootstrapSummary> {
    if values.is_empty() {
        return Err(Error::Stats("bootstrap needs at least one value".into()));
    }
    if replicates == 0 {
        return Err(Error::Stats("bootstrap needs at least one replicate".into()));
    }
    let n = values.len();
    let replicate_means: Vec<f64> = (0..replicates as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream2(seed, tags::BOOTSTRAP_REPLICATE, r);
            let sum: f64 = (0..n).map(|_| values[rng.gen_range(0..n)]).sum();
            sum / n as f64
        })
        .collect();
    Ok(BootstrapSummary {
        replicates,
        mean: mean(&replicate_means)?,
        sd: sample_sd(&replicate_means)?,
    })
}

/// Welch's unequal-variance t-test, two-sided.
///
/// Returns (t, p) with Welch–Satterthwaite degrees of freedom. When
/// both samples have zero variance the statistic degenerates: equal
/// means give (0, 1) by convention, distinct means are a certain
/// difference, (signed infinity, 0).
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Stats(format!(
            "welch t needs at least 2 values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a)?, mean(b)?);
    let (sa, sb) = (sample_sd(a)?, sample_sd(b)?);
    let (va, vb) = (sa * sa / na, sb * sb / nb);
    let se2 = va + vb;
    if se2 == 0.0 {
        return Ok(if ma == mb {
            (0.0, 1.0)
        } else {
            ((ma - mb).signum() * f64::INFINITY, 0.0)
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::Stats(format!("t distribution (df = {df}): {e}")))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok((t, p))
}

/// Average ranks of the pooled sample, with values closer than `tol`
/// sharing their average rank. Returns (ranks, tie-group sizes).
fn average_ranks(pooled: &[f64], tol: f64) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].partial_cmp(&pooled[j]).expect("finite values"));
    let mut ranks = vec![0.0; pooled.len()];
    let mut tie_sizes = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && pooled[order[end]] - pooled[order[end - 1]] <= tol {
            end += 1;
        }
        // 1-based ranks start+1 ..= end share their average.
        let avg = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        tie_sizes.push(end - start);
        start = end;
    }
    (ranks, tie_sizes)
}

/// Mann-Whitney U test, two-sided normal approximation with tie
/// correction and continuity correction.
///
/// Returns (U, p) where U is the first sample's statistic (the number
/// of (a, b) pairs with a > b, ties counting half). When every pooled
/// value is tied the variance vanishes and p = 1 by convention.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Stats("mann-whitney needs nonempty samples".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, tie_sizes) = average_ranks(&pooled, 1e-8);
    let rank_sum_a: f64 = ranks[..a.len()].iter().sum();
    let u = rank_sum_a - na * (na + 1.0) / 2.0;

    let n = na + nb;
    let mu = na * nb / 2.0;
    let tie_term: f64 = tie_sizes
        .iter()
        .map(|&t| (t * t * t - t) as f64)
        .sum::<f64>()
        / (n * (n - 1.0));
    let sigma2 = na * nb / 12.0 * ((n + 1.0) - tie_term);
    if sigma2 <= 0.0 {
        return Ok((u, 1.0));
    }
    let z = ((u - mu).abs() - 0.5).max(0.0) / sigma2.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let p = (2.0 * (1.0 - normal.cdf(z))).clamp(0.0, 1.0);
    Ok((u, p))
}
