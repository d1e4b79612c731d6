use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{write_json_atomic, RunEntry, RunManifest};
use crate::error::{Error, Result};
use crate::eval::EvalReport;

pub const FIGURE_COLUMNS: [&str; 6] = ["ratio_percent", "regime", "macro_auroc", "ci_lo", "ci_hi", "baseline_auroc"];

/// One point of a macro-AUROC-vs-ratio series, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureRow {
    pub ratio_percent: u32,
    pub regime: String,
    pub macro_auroc: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub baseline_auroc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FigureOutput {
    pub files: Vec<PathBuf>,
    /// Runs that were skipped, with the reason.
    pub warnings: Vec<String>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn load_report(root: &Path, e: &RunEntry, test: &str) -> std::result::Result<EvalReport, String> {
    let rel = e.reports.get(test).ok_or_else(|| format!("no {test} report recorded"))?;
    EvalReport::read_json(&root.join(rel)).map_err(|err| format!("{}: {err}", rel.display()))
}

/// Writes `figure-<test set>.csv` into `out_dir` for every test set named in
/// the manifests. Each manifest is paired with the directory it lives in.
/// Unfinished manifests and runs with missing reports are skipped and listed
/// in `figure-warnings.json`.
pub fn emit_figure_csv(manifests: &[(PathBuf, RunManifest)], out_dir: &Path) -> Result<FigureOutput> {
    let mut out = FigureOutput::default();
    let mut rows: BTreeMap<String, Vec<FigureRow>> = BTreeMap::new();
    for (root, m) in manifests {
        let regime = m.config.family.regime();
        if m.finished_unix.is_none() {
            out.warnings.push(format!("{}: run did not finish", root.display()));
            continue;
        }
        for test in &m.test_sets {
            let base: Vec<f64> = m
                .baseline
                .iter()
                .filter_map(|e| match load_report(root, e, test) {
                    Ok(r) => Some(r.macro_auroc.point),
                    Err(msg) => {
                        out.warnings.push(format!("{}: baseline seed {}: {msg}", root.display(), e.seed));
                        None
                    }
                })
                .collect();
            if base.is_empty() {
                out.warnings.push(format!("{}: no baseline for {test}", root.display()));
                continue;
            }
            let baseline = mean(&base);
            let mut by_ratio: BTreeMap<u32, Vec<(f64, f64, f64)>> = BTreeMap::new();
            for e in &m.runs {
                match load_report(root, e, test) {
                    Ok(r) => by_ratio.entry(e.ratio_percent).or_default().push((
                        r.macro_auroc.point,
                        r.macro_auroc.lower,
                        r.macro_auroc.upper,
                    )),
                    Err(msg) => out.warnings.push(format!(
                        "{}: ratio {}% seed {}: {msg}",
                        root.display(),
                        e.ratio_percent,
                        e.seed
                    )),
                }
            }
            let series = rows.entry(test.clone()).or_default();
            for (ratio, v) in by_ratio {
                let col = |f: fn(&(f64, f64, f64)) -> f64| mean(&v.iter().map(f).collect::<Vec<_>>());
                series.push(FigureRow {
                    ratio_percent: ratio,
                    regime: regime.into(),
                    macro_auroc: col(|t| t.0),
                    ci_lo: col(|t| t.1),
                    ci_hi: col(|t| t.2),
                    baseline_auroc: baseline,
                });
            }
        }
    }
    fs::create_dir_all(out_dir)?;
    for (test, mut series) in rows {
        series.sort_by(|a, b| a.regime.cmp(&b.regime).then(a.ratio_percent.cmp(&b.ratio_percent)));
        let path = out_dir.join(format!("figure-{test}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        for r in &series {
            w.serialize(r)?;
        }
        if series.is_empty() {
            w.write_record(FIGURE_COLUMNS)?;
        }
        w.flush()?;
        out.files.push(path);
    }
    if !out.warnings.is_empty() {
        write_json_atomic(&out_dir.join("figure-warnings.json"), &out.warnings)?;
    }
    Ok(out)
}

/// Reads a figure CSV, rejecting files whose header differs from
/// [`FIGURE_COLUMNS`].
pub fn read_figure_csv(path: &Path) -> Result<Vec<FigureRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<&str> = r.headers()?.iter().collect();
    if header != FIGURE_COLUMNS {
        return Err(Error::Format(format!("{}: unexpected columns {header:?}", path.display())));
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
