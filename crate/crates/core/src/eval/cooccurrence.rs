use crate::error::{invalid, Error, Result};
use crate::toydata::N_LABELS;

pub type CooccurrenceMatrix = [[f64; N_LABELS]; N_LABELS];

/// `M[r][c]` = share of samples with condition `r` that also have `c`.
/// Rows of conditions with no positives are NaN.
pub fn cooccurrence(labels: &[[bool; N_LABELS]]) -> CooccurrenceMatrix {
    let mut counts = [[0usize; N_LABELS]; N_LABELS];
    for row in labels {
        for r in (0..N_LABELS).filter(|&r| row[r]) {
            for c in (0..N_LABELS).filter(|&c| row[c]) {
                counts[r][c] += 1;
            }
        }
    }
    std::array::from_fn(|r| {
        let n = counts[r][r];
        std::array::from_fn(|c| if n == 0 { f64::NAN } else { counts[r][c] as f64 / n as f64 })
    })
}

/// Pearson correlation over entries that are finite in both inputs.
pub fn matrix_correlation(m1: &[f64], m2: &[f64]) -> Result<f64> {
    if m1.len() != m2.len() {
        return Err(invalid("matrices differ in size"));
    }
    let pairs: Vec<(f64, f64)> = m1.iter().zip(m2).filter(|(a, b)| a.is_finite() && b.is_finite()).map(|(&a, &b)| (a, b)).collect();
    if pairs.len() < 2 {
        return Err(Error::UndefinedMetric("fewer than two jointly valid entries".into()));
    }
    let n = pairs.len() as f64;
    let (ma, mb) = (pairs.iter().map(|p| p.0).sum::<f64>() / n, pairs.iter().map(|p| p.1).sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in &pairs {
        sab += (a - ma) * (b - mb);
        saa += (a - ma) * (a - ma);
        sbb += (b - mb) * (b - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedMetric("zero variance".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

pub fn flatten(m: &CooccurrenceMatrix) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}
