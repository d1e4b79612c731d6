//! Supplementation experiments: data preparation, the shared synthetic pool,
//! one classifier per (ratio, seed), bootstrap evaluation, run manifests and
//! figure-ready CSVs.

mod config;
mod figure;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{
    canonical_hash, file_sha256, BootstrapConfig, DataConfig, ExperimentConfig, Family, FrechetConfig, SynthesisConfig,
    DEFAULT_RATIOS, DESK_SAMPLING_STEPS,
};
pub use figure::{emit_figure_csv, read_figure_csv, FigureOutput, FigureRow, FIGURE_COLUMNS};

use crate::classifier::{train_classifier, ClassifierConfig, TrainedClassifier};
use crate::denoiser::Denoiser;
use crate::diffusion::generate_replica_range;
use crate::error::{invalid, Error, Result};
use crate::eval::{
    compare_to_baseline, cooccurrence, evaluate_predictions, flatten, frechet_distance, matrix_correlation, test_labels,
    EvalReport, FeatureStats, FrechetEntry,
};
use crate::rng::{derive_seed, stream};
use crate::schedule::{make_schedule, ScheduleKind, DEFAULT_TIMESTEPS};
use crate::toydata::{generate_site, load_dataset, save_dataset, split_by_patient, supplement, Dataset, SiteSpec, SupplementMode};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_FORMAT: &str = "synthsupp-run-1";
pub const SITE_A_TEST: &str = "siteA-test";
pub const SITE_B_TEST: &str = "siteB-test";

/// Stream ids local to the harness.
const FRECHET_STREAM: u64 = 101;

/// Patient-level splits of both sites. Training and validation parts
/// exclude records with Uncertain labels; test parts keep them (masked at
/// scoring time).
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub a_train: Dataset,
    pub a_val: Dataset,
    pub a_test: Dataset,
    pub b_train: Dataset,
    pub b_val: Dataset,
    pub b_test: Dataset,
}

impl ExperimentData {
    /// Named splits, in a fixed order.
    pub fn named(&self) -> [(&'static str, &Dataset); 6] {
        [
            ("siteA-train", &self.a_train),
            ("siteA-val", &self.a_val),
            (SITE_A_TEST, &self.a_test),
            ("siteB-train", &self.b_train),
            ("siteB-val", &self.b_val),
            (SITE_B_TEST, &self.b_test),
        ]
    }
}

fn prepare_site(spec: &SiteSpec, cfg: &DataConfig, site: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let total = cfg.train_images + cfg.test_images;
    let corpus = generate_site(&spec.clone().with_image_count(total), derive_seed(cfg.seed, &[stream::DATA, site]))?;
    let test_frac = cfg.test_images as f64 / total as f64;
    let outer = split_by_patient(&corpus, (1.0 - test_frac, 0.0, test_frac), derive_seed(cfg.seed, &[stream::SPLIT, site]))?;
    let inner = split_by_patient(
        &outer.train,
        (1.0 - cfg.val_fraction, cfg.val_fraction, 0.0),
        derive_seed(cfg.seed, &[stream::SPLIT, site, 1]),
    )?;
    Ok((inner.train.trainable(), inner.val.trainable(), outer.test))
}

/// Deterministic in `cfg`; the denoiser behind the pool must be trained on
/// `a_train`.
pub fn prepare_data(cfg: &DataConfig) -> Result<ExperimentData> {
    let (a_train, a_val, a_test) = prepare_site(&cfg.site_a, cfg, 0)?;
    let (b_train, b_val, b_test) = prepare_site(&cfg.site_b, cfg, 1)?;
    Ok(ExperimentData { a_train, a_val, a_test, b_train, b_val, b_test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub ratio_percent: u32,
    pub seed: u64,
    pub classifier: ClassifierConfig,
    /// Content hash naming the cached checkpoint.
    pub classifier_key: String,
    pub n_real: usize,
    pub n_synthetic: usize,
    pub n_val: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Test-set name to report path, relative to the run directory.
    pub reports: BTreeMap<String, PathBuf>,
    pub label_tables: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub crate_version: String,
    pub checkpoint_sha256: String,
    pub pool_key: Option<String>,
    pub seeds: Vec<u64>,
    pub started_unix: u64,
    /// `None` while the run is in progress.
    pub finished_unix: Option<u64>,
    pub test_sets: Vec<String>,
    pub runs: Vec<RunEntry>,
    /// Real-only classifier per seed (the ratio-0 runs when configured).
    pub baseline: Vec<RunEntry>,
    pub frechet: Vec<FrechetEntry>,
    /// Correlation of the two test sets' co-occurrence matrices.
    pub site_cooccurrence_correlation: Option<f64>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let m: Self = serde_json::from_reader(std::io::BufReader::new(fs::File::open(dir.join(MANIFEST_FILE))?))?;
        if m.format != RUN_FORMAT {
            return Err(Error::Format(format!("unknown run format {:?}", m.format)));
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json_atomic(&dir.join(MANIFEST_FILE), self)
    }

    /// Entries whose configured ratio is `ratio`.
    pub fn runs_at(&self, ratio: u32) -> impl Iterator<Item = &RunEntry> {
        self.runs.iter().filter(move |e| e.ratio_percent == ratio)
    }
}

fn write_json_atomic<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = std::io::BufWriter::new(fs::File::create(&tmp)?);
        serde_json::to_writer_pretty(&mut w, v)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Replica sets `1..=config.synthesis.pool_replicas` of `a_train`, built once
/// per (data, checkpoint, sampler) and stored under the cache directory.
/// An existing smaller pool is extended rather than rebuilt.
pub fn ensure_pool(
    config: &ExperimentConfig,
    data: &ExperimentData,
    model: &Denoiser<f32>,
    checkpoint_sha256: &str,
    log: &mut dyn FnMut(&str),
) -> Result<(Dataset, String)> {
    let s = &config.synthesis;
    let key = canonical_hash(&json!({
        "data": config.data,
        "checkpoint": checkpoint_sha256,
        "cfg_scale": s.cfg_scale,
        "sampling_steps": s.sampling_steps,
        "seed": s.seed,
    }))?;
    let dir = config.cache_dir().join(format!("pool-{}", &key[..16]));
    let want = s.pool_replicas;
    let mut pool = if dir.join(crate::toydata::MANIFEST_FILE).exists() {
        load_dataset(&dir)?
    } else {
        Dataset::new(data.a_train.image_size, Vec::new())
    };
    let have = pool.records.iter().filter_map(|r| r.provenance.replica()).max().unwrap_or(0);
    if have < want {
        log(&format!("generating synthetic replicas {}..={} of {} records", have + 1, want, data.a_train.len()));
        let sched = make_schedule(ScheduleKind::Cosine, DEFAULT_TIMESTEPS)?;
        let more = generate_replica_range(model, &data.a_train, have + 1..=want, s.cfg_scale, s.sampling_steps, s.seed, &sched)?;
        pool.records.extend(more.records);
        let tmp = dir.with_extension("partial");
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        save_dataset(&tmp, &pool)?;
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::rename(&tmp, &dir)?;
    }
    Ok((pool, key))
}

fn training_sets<'a>(
    family: Family,
    data: &'a ExperimentData,
    pool: Option<&Dataset>,
    ratio: u32,
) -> Result<(Dataset, &'a Dataset)> {
    let empty = Dataset::new(data.a_train.image_size, Vec::new());
    let pool = pool.unwrap_or(&empty);
    Ok(match family {
        Family::SupplementSameOrigin => (supplement(&data.a_train, pool, ratio, SupplementMode::Mixed)?, &data.a_val),
        Family::PureSynthetic if ratio == 0 => (data.a_train.clone(), &data.a_val),
        Family::PureSynthetic => (supplement(&data.a_train, pool, ratio, SupplementMode::PureSynthetic)?, &data.a_val),
        Family::CrossSiteMix => (supplement(&data.b_train, pool, ratio, SupplementMode::Mixed)?, &data.b_val),
    })
}

/// Trains, or loads from the cache, the classifier for one training set.
fn cached_classifier(
    config: &ExperimentConfig,
    key: &str,
    train: &Dataset,
    val: &Dataset,
    clf: &ClassifierConfig,
    log: &mut dyn FnMut(&str),
) -> Result<TrainedClassifier> {
    let dir = config.cache_dir().join("classifiers");
    let path = dir.join(format!("{key}.ckpt"));
    if path.exists() {
        return TrainedClassifier::load(&path);
    }
    fs::create_dir_all(&dir)?;
    let model = train_classifier(train, val, clf, |e| {
        log(&format!("  epoch {} train {:.4} val {:.4}", e.epoch, e.train_loss, e.val_loss))
    })?;
    let tmp = path.with_extension("partial");
    model.save(&tmp)?;
    fs::rename(tmp, &path)?;
    Ok(model)
}

struct Trained {
    entry: RunEntry,
    reports: Vec<EvalReport>,
    dir: PathBuf,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunManifest> {
    run_experiment_with(config, &mut |_| {})
}

/// Runs every (ratio, seed) pair of the experiment, writing reports under
/// `config.output_dir` and returning the completed manifest.
pub fn run_experiment_with(config: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<RunManifest> {
    config.validate()?;
    let ckpt = &config.synthesis.checkpoint;
    if !ckpt.is_file() {
        return Err(invalid(format!("diffusion checkpoint {} does not exist", ckpt.display())));
    }
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    let checkpoint_sha256 = file_sha256(ckpt)?;
    let mut manifest = RunManifest {
        format: RUN_FORMAT.into(),
        config_hash: config.hash()?,
        config: config.clone(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
        checkpoint_sha256: checkpoint_sha256.clone(),
        pool_key: None,
        seeds: config.seeds.clone(),
        started_unix: unix_now(),
        finished_unix: None,
        test_sets: vec![SITE_A_TEST.into(), SITE_B_TEST.into()],
        runs: Vec::new(),
        baseline: Vec::new(),
        frechet: Vec::new(),
        site_cooccurrence_correlation: None,
    };
    manifest.write(out)?;
    write_json_atomic(&out.join("config.json"), config)?;

    log("preparing site data");
    let data = prepare_data(&config.data)?;
    let model = Denoiser::<f32>::load(ckpt)?;
    if model.config.image_size != data.a_train.image_size {
        return Err(invalid(format!(
            "checkpoint generates {}px images but the data are {}px",
            model.config.image_size, data.a_train.image_size
        )));
    }
    let pool = if config.max_replicas() > 0 {
        let (p, key) = ensure_pool(config, &data, &model, &checkpoint_sha256, log)?;
        manifest.pool_key = Some(key);
        Some(p)
    } else {
        None
    };
    let tests: [(&str, &Dataset); 2] = [(SITE_A_TEST, &data.a_test), (SITE_B_TEST, &data.b_test)];
    let test_labels_by_set: Vec<_> = tests.iter().map(|(_, d)| test_labels(d)).collect();
    let cooc: Vec<_> = tests.iter().map(|(_, d)| cooccurrence(&d.present_matrix())).collect();
    manifest.site_cooccurrence_correlation = matrix_correlation(&flatten(&cooc[0]), &flatten(&cooc[1])).ok();

    let regime = config.family.regime();
    let mut jobs: Vec<(u32, bool)> = config.ratios.iter().map(|&r| (r, false)).collect();
    if !config.ratios.contains(&0) {
        jobs.insert(0, (0, true));
    }
    let mut first_baseline: Option<TrainedClassifier> = None;
    let mut trained: Vec<(bool, Trained)> = Vec::new();
    for &seed in &config.seeds {
        let clf = ClassifierConfig { seed, ..config.classifier.clone() };
        for &(ratio, baseline_only) in &jobs {
            let (train, val) = training_sets(config.family, &data, pool.as_ref(), ratio)?;
            let k = ratio / 100;
            let real_site = match (config.family, k) {
                (Family::PureSynthetic, k) if k > 0 => None,
                (Family::CrossSiteMix, _) => Some("siteB"),
                _ => Some("siteA"),
            };
            let key = canonical_hash(&json!({
                "data": config.data,
                "real": real_site,
                "synthetic_replicas": k,
                "pool": if k > 0 { manifest.pool_key.clone() } else { None },
                "classifier": clf,
            }))?;
            log(&format!("{regime} ratio {ratio}% seed {seed}: {} training records", train.len()));
            let model = cached_classifier(config, &key, &train, val, &clf, log)?;
            let name = if baseline_only { "baseline".to_string() } else { format!("ratio-{ratio}") };
            let rel_dir = PathBuf::from("runs").join(&name).join(format!("seed-{seed}"));
            let model_id = format!("{regime}/{name}/seed-{seed}");
            let mut reports = Vec::new();
            for (ti, (test_name, test)) in tests.iter().enumerate() {
                let probs = model.predict_dataset(test)?;
                let (t, m) = &test_labels_by_set[ti];
                let mut rep = evaluate_predictions(
                    &model_id,
                    test_name,
                    &probs,
                    t,
                    m,
                    config.bootstrap.replicates,
                    derive_seed(config.bootstrap.seed, &[ti as u64]),
                )?;
                rep.set_cooccurrence(&cooc[ti]);
                reports.push(rep);
            }
            let n_synthetic = train.records.iter().filter(|r| !r.provenance.is_real()).count();
            let entry = RunEntry {
                ratio_percent: ratio,
                seed,
                classifier: clf.clone(),
                classifier_key: key,
                n_real: train.len() - n_synthetic,
                n_synthetic,
                n_val: val.len(),
                best_epoch: model.best_epoch,
                best_val_loss: model.best_val_loss,
                reports: tests.iter().map(|(n, _)| (n.to_string(), rel_dir.join(format!("report-{n}.json")))).collect(),
                label_tables: tests.iter().map(|(n, _)| (n.to_string(), rel_dir.join(format!("labels-{n}.csv")))).collect(),
            };
            if ratio == 0 && first_baseline.is_none() {
                first_baseline = Some(model);
            }
            trained.push((baseline_only, Trained { entry, reports, dir: rel_dir }));
        }
    }

    // Paired comparisons against the same-seed baseline, Bonferroni-adjusted
    // over the non-zero ratios.
    for &seed in &config.seeds {
        for ti in 0..tests.len() {
            let base = trained
                .iter()
                .find(|(_, t)| t.entry.seed == seed && t.entry.ratio_percent == 0)
                .map(|(_, t)| t.reports[ti].clone())
                .expect("baseline trained for every seed");
            let others: Vec<usize> = (0..trained.len())
                .filter(|&i| trained[i].1.entry.seed == seed && trained[i].1.entry.ratio_percent != 0)
                .collect();
            let refs: Vec<&EvalReport> = others.iter().map(|&i| &trained[i].1.reports[ti]).collect();
            let comps = compare_to_baseline(&base, &refs, config.bootstrap.alpha)?;
            for (&i, c) in others.iter().zip(comps) {
                trained[i].1.reports[ti].comparisons = vec![c];
            }
        }
    }

    if let (Some(fc), Some(feat_model)) = (&config.frechet, &first_baseline) {
        manifest.frechet = frechet_sweep(config, fc, &data, &model, feat_model, log)?;
    }

    for (baseline_only, t) in trained {
        let dir = out.join(&t.dir);
        fs::create_dir_all(&dir)?;
        for (ti, (test_name, _)) in tests.iter().enumerate() {
            t.reports[ti].write_json(&out.join(&t.entry.reports[*test_name]))?;
            t.reports[ti].write_label_csv(&out.join(&t.entry.label_tables[*test_name]))?;
        }
        if t.entry.ratio_percent == 0 {
            manifest.baseline.push(t.entry.clone());
        }
        if !baseline_only {
            manifest.runs.push(t.entry);
        }
    }
    manifest.finished_unix = Some(unix_now());
    manifest.write(out)?;
    Ok(manifest)
}

/// Fréchet distance between classifier features of real siteA training
/// images and one synthetic replica of the same records at each scale.
fn frechet_sweep(
    config: &ExperimentConfig,
    fc: &FrechetConfig,
    data: &ExperimentData,
    model: &Denoiser<f32>,
    features: &TrainedClassifier,
    log: &mut dyn FnMut(&str),
) -> Result<Vec<FrechetEntry>> {
    let n = fc.n_images.min(data.a_train.len());
    let source = Dataset::new(data.a_train.image_size, data.a_train.records[..n].to_vec());
    let stats = |d: &Dataset| -> Result<FeatureStats> {
        let rows: Vec<Vec<f64>> = d
            .records
            .iter()
            .map(|r| Ok(features.penultimate_features(&r.pixels)?.into_iter().map(f64::from).collect()))
            .collect::<Result<_>>()?;
        FeatureStats::from_features(&rows)
    };
    let real = stats(&source)?;
    let sched = make_schedule(ScheduleKind::Cosine, DEFAULT_TIMESTEPS)?;
    let seed = derive_seed(config.synthesis.seed, &[FRECHET_STREAM]);
    let mut out = Vec::new();
    for &s in &fc.cfg_scales {
        log(&format!("Fréchet sweep: {n} images at guidance scale {s}"));
        let syn = generate_replica_range(model, &source, 1..=1, s, config.synthesis.sampling_steps, seed, &sched)?;
        out.push(FrechetEntry {
            reference: "siteA-train".into(),
            candidate: format!("cfg-{s}"),
            distance: frechet_distance(&real, &stats(&syn)?)?,
        });
    }
    Ok(out)
}

/// Writes every split of `data` as a dataset directory under `dir`.
pub fn export_data(data: &ExperimentData, dir: &Path) -> Result<()> {
    for (name, d) in data.named() {
        save_dataset(&dir.join(name), d)?;
    }
    Ok(())
}

