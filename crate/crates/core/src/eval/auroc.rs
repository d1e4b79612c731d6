use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, rng_from_seed, stream};
use rand::RngExt;

/// Mann–Whitney AUROC over unmasked entries, ties counted as one half.
pub fn auroc(scores: &[f64], labels: &[bool], mask: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.len() != mask.len() {
        return Err(invalid("scores, labels and mask differ in length"));
    }
    let idx: Vec<usize> = (0..scores.len()).filter(|&i| mask[i]).collect();
    auroc_indexed(scores, labels, &idx)
}

/// AUROC over the multiset of positions `idx` (repeats allowed), by midranks.
pub(crate) fn auroc_indexed(scores: &[f64], labels: &[bool], idx: &[usize]) -> Result<f64> {
    if idx.iter().any(|&i| scores[i].is_nan()) {
        return Err(invalid("scores contain NaN"));
    }
    let mut order: Vec<usize> = idx.to_vec();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = order.iter().filter(|&&i| labels[i]).count();
    let n_neg = order.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!("{n_pos} positives and {n_neg} negatives")));
    }
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && scores[order[end]] == scores[order[k]] {
            end += 1;
        }
        let mid = (k + 1 + end) as f64 / 2.0;
        rank_sum += mid * order[k..end].iter().filter(|&&i| labels[i]).count() as f64;
        k = end;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Bootstrap resamples drawn with replacement at the image level. A draw
/// rejected by `valid` is redrawn, up to `max_retries` times per replicate.
/// Replicate `b`, attempt `a` uses its own derived seed, so the result does
/// not depend on thread count.
pub fn bootstrap_indices(
    n: usize,
    b: usize,
    seed: u64,
    max_retries: usize,
    valid: impl Fn(&[usize]) -> bool + Sync,
) -> Result<Vec<Vec<usize>>> {
    if n == 0 || b == 0 {
        return Err(invalid("bootstrap needs at least one sample and one replicate"));
    }
    (0..b)
        .into_par_iter()
        .map(|rep| {
            for attempt in 0..=max_retries {
                let mut rng = rng_from_seed(derive_seed(seed, &[stream::BOOTSTRAP, rep as u64, attempt as u64]));
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                if valid(&idx) {
                    return Ok(idx);
                }
            }
            Err(Error::UndefinedMetric(format!("no valid bootstrap resample after {max_retries} retries")))
        })
        .collect()
}

pub const DEFAULT_BOOTSTRAP_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Linear-interpolated percentile of sorted data, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// 2.5 / 97.5 percentile interval of replicate values around `point`.
pub fn percentile_ci(point: f64, replicates: &[f64]) -> ConfidenceInterval {
    let mut s = replicates.to_vec();
    s.sort_by(f64::total_cmp);
    ConfidenceInterval { point, lower: percentile(&s, 0.025), upper: percentile(&s, 0.975) }
}

/// AUROC with a percentile bootstrap interval over `b` image-level resamples.
pub fn bootstrap_ci(scores: &[f64], labels: &[bool], mask: &[bool], b: usize, seed: u64) -> Result<ConfidenceInterval> {
    let point = auroc(scores, labels, mask)?;
    let kept: Vec<usize> = (0..scores.len()).filter(|&i| mask[i]).collect();
    let sets = bootstrap_indices(kept.len(), b, seed, DEFAULT_BOOTSTRAP_RETRIES, |idx| {
        let pos = idx.iter().filter(|&&i| labels[kept[i]]).count();
        pos > 0 && pos < idx.len()
    })?;
    let reps: Vec<f64> = sets
        .iter()
        .map(|idx| {
            let global: Vec<usize> = idx.iter().map(|&i| kept[i]).collect();
            auroc_indexed(scores, labels, &global)
        })
        .collect::<Result<_>>()?;
    Ok(percentile_ci(point, &reps))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub mean_difference: f64,
    pub t: f64,
    pub p_value: f64,
    /// Differences had zero variance; `p` follows the 0/1 convention.
    pub degenerate: bool,
}

/// Two-sided paired t-test on `a[i] − b[i]`.
pub fn paired_compare(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(invalid("paired samples must have equal length of at least 2"));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        let p_value = if mean == 0.0 { 1.0 } else { 0.0 };
        let t = if mean == 0.0 { 0.0 } else { mean.signum() * f64::INFINITY };
        return Ok(PairedTest { mean_difference: mean, t, p_value, degenerate: true });
    }
    let t = mean / (var.sqrt() / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| invalid(e.to_string()))?;
    let p_value = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(PairedTest { mean_difference: mean, t, p_value, degenerate: false })
}

/// `p_i < alpha / m`.
pub fn bonferroni(p_values: &[f64], alpha: f64) -> Vec<bool> {
    let m = p_values.len().max(1) as f64;
    p_values.iter().map(|&p| p < alpha / m).collect()
}
