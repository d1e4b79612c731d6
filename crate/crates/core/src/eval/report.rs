use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::auroc::{auroc_indexed, bootstrap_indices, paired_compare, percentile_ci, ConfidenceInterval, DEFAULT_BOOTSTRAP_RETRIES};
use super::bonferroni;
use crate::error::{invalid, Error, Result};
use crate::toydata::{resolve_labels, Dataset, LabelMode, LABEL_NAMES, N_LABELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetric {
    pub name: String,
    /// `None` when the test set lacks positives or negatives for the label.
    pub auroc: Option<ConfidenceInterval>,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub mean_difference: f64,
    pub p_value: f64,
    pub significant: bool,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrechetEntry {
    pub reference: String,
    pub candidate: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub dataset_id: String,
    pub seed: u64,
    pub bootstrap_replicates: usize,
    pub labels: Vec<LabelMetric>,
    /// Mean over defined labels.
    pub macro_auroc: ConfidenceInterval,
    /// Per-resample macro AUROC; resamples are shared by every model scored
    /// on the same test set with the same seed, which pairs them.
    pub macro_replicates: Vec<f64>,
    pub comparisons: Vec<Comparison>,
    pub frechet: Vec<FrechetEntry>,
    /// Row-normalized co-occurrence of test labels; `None` marks empty rows.
    pub cooccurrence: Option<Vec<Vec<Option<f64>>>>,
}

/// Test-time targets and masks (Uncertain labels masked, nothing dropped).
pub fn test_labels(data: &Dataset) -> (Vec<[bool; N_LABELS]>, Vec<[bool; N_LABELS]>) {
    data.records
        .iter()
        .map(|r| {
            let res = resolve_labels(&r.label_states, LabelMode::Testing);
            (res.targets, res.mask)
        })
        .unzip()
}

/// Per-label and macro AUROC with shared bootstrap resamples.
pub fn evaluate_predictions(
    model_id: &str,
    dataset_id: &str,
    probs: &[[f32; N_LABELS]],
    targets: &[[bool; N_LABELS]],
    masks: &[[bool; N_LABELS]],
    b: usize,
    seed: u64,
) -> Result<EvalReport> {
    let n = probs.len();
    if targets.len() != n || masks.len() != n {
        return Err(invalid("predictions, targets and masks differ in length"));
    }
    let scores: Vec<Vec<f64>> = (0..N_LABELS).map(|l| probs.iter().map(|p| p[l] as f64).collect()).collect();
    let labels: Vec<Vec<bool>> = (0..N_LABELS).map(|l| targets.iter().map(|t| t[l]).collect()).collect();
    let kept: Vec<Vec<usize>> = (0..N_LABELS).map(|l| (0..n).filter(|&i| masks[i][l]).collect()).collect();
    let counts: Vec<(usize, usize)> = (0..N_LABELS)
        .map(|l| {
            let pos = kept[l].iter().filter(|&&i| labels[l][i]).count();
            (pos, kept[l].len() - pos)
        })
        .collect();
    let defined: Vec<usize> = (0..N_LABELS).filter(|&l| counts[l].0 > 0 && counts[l].1 > 0).collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric("no label has both positives and negatives".into()));
    }
    let resample_ok = |idx: &[usize]| {
        defined.iter().all(|&l| {
            let (mut pos, mut neg) = (false, false);
            for &i in idx {
                if masks[i][l] {
                    if labels[l][i] {
                        pos = true;
                    } else {
                        neg = true;
                    }
                }
                if pos && neg {
                    return true;
                }
            }
            false
        })
    };
    let sets = bootstrap_indices(n, b, seed, DEFAULT_BOOTSTRAP_RETRIES, resample_ok)?;
    let mut per_label_reps: Vec<Vec<f64>> = (0..N_LABELS).map(|_| Vec::with_capacity(b)).collect();
    let mut macro_reps = Vec::with_capacity(b);
    for idx in &sets {
        let mut sum = 0.0;
        for &l in &defined {
            let sub: Vec<usize> = idx.iter().copied().filter(|&i| masks[i][l]).collect();
            let a = auroc_indexed(&scores[l], &labels[l], &sub)?;
            per_label_reps[l].push(a);
            sum += a;
        }
        macro_reps.push(sum / defined.len() as f64);
    }
    let mut point_sum = 0.0;
    let mut metrics = Vec::with_capacity(N_LABELS);
    for l in 0..N_LABELS {
        let (n_pos, n_neg) = counts[l];
        let auroc = if defined.contains(&l) {
            let p = auroc_indexed(&scores[l], &labels[l], &kept[l])?;
            point_sum += p;
            Some(percentile_ci(p, &per_label_reps[l]))
        } else {
            None
        };
        metrics.push(LabelMetric { name: LABEL_NAMES[l].to_string(), auroc, n_pos, n_neg });
    }
    Ok(EvalReport {
        model_id: model_id.into(),
        dataset_id: dataset_id.into(),
        seed,
        bootstrap_replicates: b,
        labels: metrics,
        macro_auroc: percentile_ci(point_sum / defined.len() as f64, &macro_reps),
        macro_replicates: macro_reps,
        comparisons: Vec::new(),
        frechet: Vec::new(),
        cooccurrence: None,
    })
}

/// Paired tests of every report against `baseline` on macro replicates,
/// with Bonferroni-adjusted significance over the whole family.
pub fn compare_to_baseline(baseline: &EvalReport, others: &[&EvalReport], alpha: f64) -> Result<Vec<Comparison>> {
    let tests = others
        .iter()
        .map(|o| {
            if o.dataset_id != baseline.dataset_id || o.seed != baseline.seed || o.bootstrap_replicates != baseline.bootstrap_replicates {
                return Err(invalid(format!("{} and {} were not bootstrapped on the same resamples", o.model_id, baseline.model_id)));
            }
            paired_compare(&o.macro_replicates, &baseline.macro_replicates)
        })
        .collect::<Result<Vec<_>>>()?;
    let flags = bonferroni(&tests.iter().map(|t| t.p_value).collect::<Vec<_>>(), alpha);
    Ok(others
        .iter()
        .zip(tests.iter().zip(flags))
        .map(|(o, (t, sig))| Comparison {
            a: o.model_id.clone(),
            b: baseline.model_id.clone(),
            mean_difference: t.mean_difference,
            p_value: t.p_value,
            significant: sig,
            degenerate: t.degenerate,
        })
        .collect())
}

impl EvalReport {
    pub fn set_cooccurrence(&mut self, m: &super::CooccurrenceMatrix) {
        self.cooccurrence = Some(m.iter().map(|row| row.iter().map(|&v| v.is_finite().then_some(v)).collect()).collect());
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
    }

    /// One row per label: name, auroc, ci_lo, ci_hi, n_pos, n_neg. Undefined
    /// labels leave the three metric fields empty.
    pub fn write_label_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["name", "auroc", "ci_lo", "ci_hi", "n_pos", "n_neg"])?;
        for m in &self.labels {
            let (a, lo, hi) = match &m.auroc {
                Some(ci) => (format!("{:.6}", ci.point), format!("{:.6}", ci.lower), format!("{:.6}", ci.upper)),
                None => Default::default(),
            };
            w.write_record([m.name.clone(), a, lo, hi, m.n_pos.to_string(), m.n_neg.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}
