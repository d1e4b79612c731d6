//! `synthsupp`: command-line front end for data generation, diffusion
//! training and sampling, classifier training, evaluation and experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use synthsupp::classifier::{train_classifier, ClassifierConfig, TrainedClassifier};
use synthsupp::denoiser::{ConditionVector, Denoiser, DenoiserConfig};
use synthsupp::diffusion::{generate_replicas, sample_batch, train_diffusion, DiffusionTrainConfig, SampleRequest};
use synthsupp::eval::{compare_to_baseline, cooccurrence, evaluate_predictions, test_labels, EvalReport};
use synthsupp::harness::{
    emit_figure_csv, export_data, prepare_data, run_experiment_with, ExperimentConfig, Family, RunManifest,
    DESK_SAMPLING_STEPS, MANIFEST_FILE,
};
use synthsupp::rng::derive_seed;
use synthsupp::schedule::{make_schedule, ScheduleKind, DEFAULT_TIMESTEPS};
use synthsupp::toydata::{generate_site, load_dataset, save_dataset, write_pgm, SiteSpec, LABEL_NAMES, N_LABELS};

const THREADS_ENV: &str = "SYNTHSUPP_THREADS";
const RUN_RECORD: &str = "run.json";

#[derive(Parser, Debug)]
#[command(name = "synthsupp", version, about = "Diffusion replicas and supplementation experiments on toy multi-label images")]
#[command(after_help = "Set SYNTHSUPP_THREADS to limit worker threads.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a toy site corpus into a dataset directory.
    GenData(GenData),
    /// Train a conditional denoiser on a dataset directory.
    TrainDiffusion(TrainDiffusion),
    /// Draw images from a denoiser checkpoint.
    Sample(Sample),
    /// Train a multi-label classifier.
    TrainClassifier(TrainClassifier),
    /// Score a classifier on a dataset with bootstrap confidence intervals.
    Evaluate(Evaluate),
    /// Run or summarise supplementation experiments.
    #[command(subcommand)]
    Experiment(Experiment),
    /// Tabulate evaluation reports and test them against a baseline.
    Report(Report),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long, default_value = "siteA")]
    site: String,
    /// Site specification JSON, replacing the built-in site.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Number of images.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainDiffusion {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Denoiser architecture JSON; defaults are used when absent.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.999)]
    ema_decay: f64,
    #[arg(long, default_value_t = 0.1)]
    drop_rate: f64,
}

#[derive(Args, Debug)]
struct Sample {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    cfg_scale: f64,
    /// Images to draw, or replicas per record with --from-data.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = DESK_SAMPLING_STEPS)]
    steps: usize,
    /// Comma-separated pathologies to condition on.
    #[arg(long, default_value = "")]
    labels: String,
    #[arg(long, default_value_t = 5)]
    age_decade: u8,
    #[arg(long, default_value_t = 0)]
    sex: u8,
    #[arg(long, default_value_t = 0)]
    race: u8,
    /// Replicate every record of this dataset instead; writes a dataset.
    #[arg(long)]
    from_data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainClassifier {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Classifier config JSON; desk defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct Evaluate {
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    /// Name recorded as the dataset id; defaults to the directory name.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Experiment {
    /// Write a desk-scale config to edit.
    Init(ExperimentInit),
    /// Export the data splits a config uses (train the denoiser on siteA-train).
    Prepare(ExperimentPrepare),
    /// Run every ratio and seed of a config.
    Run(ExperimentRun),
    /// Emit figure CSVs from finished runs.
    Report(ExperimentReport),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FamilyArg {
    SupplementSameOrigin,
    PureSynthetic,
    CrossSiteMix,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::SupplementSameOrigin => Family::SupplementSameOrigin,
            FamilyArg::PureSynthetic => Family::PureSynthetic,
            FamilyArg::CrossSiteMix => Family::CrossSiteMix,
        }
    }
}

#[derive(Args, Debug)]
struct ExperimentInit {
    #[arg(long, value_enum)]
    family: FamilyArg,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Use every ratio from 0 to 1000%.
    #[arg(long)]
    full_grid: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory receiving `experiment.json`; also the run's output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExperimentPrepare {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExperimentRun {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the data, synthesis and bootstrap seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ExperimentReport {
    /// Run directories; defaults to every directory under --out holding a manifest.
    #[arg(long, num_args = 1..)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Report {
    /// Evaluation reports on a common test set.
    #[arg(long, num_args = 1.., required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    tool: &'static str,
    version: &'static str,
    argv: Vec<String>,
    seed: Option<u64>,
    threads: Option<usize>,
    finished_unix: u64,
    outputs: &'a [String],
}

fn write_run_record(out: &Path, seed: Option<u64>, outputs: &[String]) -> Result<()> {
    let rec = RunRecord {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        argv: std::env::args().collect(),
        seed,
        threads: threads_from_env().ok().flatten(),
        finished_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        outputs,
    };
    fs::write(out.join(RUN_RECORD), serde_json::to_string_pretty(&rec)? + "\n")?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => bail!("{THREADS_ENV} must be a positive integer, got {v:?}"),
        },
        Err(_) => Ok(None),
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => read_json::<SiteSpec>(p)?,
        None => SiteSpec::builtin(&a.site)?,
    };
    if let Some(s) = a.size {
        spec.image_size = s;
    }
    let data = generate_site(&spec.with_image_count(a.n), a.seed)?;
    save_dataset(&a.out, &data)?;
    eprintln!("wrote {} images to {}", data.len(), a.out.display());
    write_run_record(&a.out, Some(a.seed), &["manifest.json".into(), "pixels.f32".into()])
}

fn train_diffusion_cmd(a: TrainDiffusion) -> Result<()> {
    let data = load_dataset(&a.data)?.trainable();
    let mut model = match &a.model_config {
        Some(p) => read_json::<DenoiserConfig>(p)?,
        None => DenoiserConfig { image_size: data.image_size, ..DenoiserConfig::default() },
    };
    if let Some(c) = a.base_channels {
        model.base_channels = c;
    }
    let train = DiffusionTrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        ema_decay: a.ema_decay,
        guidance_drop_rate: a.drop_rate,
        seed: a.seed,
        ..DiffusionTrainConfig::default()
    };
    fs::create_dir_all(&a.out)?;
    let sched = make_schedule(ScheduleKind::Cosine, DEFAULT_TIMESTEPS)?;
    let mut window = 0.0;
    let (m, losses) = train_diffusion(&data, &model, &train, &sched, |step, loss| {
        window += loss;
        if step % 100 == 0 {
            eprintln!("step {step}: loss {:.4}", window / 100.0);
            window = 0.0;
        }
    })?;
    m.save(&a.out.join("denoiser.ckpt"))?;
    let mut w = csv::Writer::from_path(a.out.join("losses.csv"))?;
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush()?;
    fs::write(a.out.join("train_config.json"), serde_json::to_string_pretty(&train)? + "\n")?;
    write_run_record(&a.out, Some(a.seed), &["denoiser.ckpt".into(), "losses.csv".into(), "train_config.json".into()])
}

fn parse_labels(s: &str) -> Result<[bool; N_LABELS]> {
    let mut out = [false; N_LABELS];
    for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
        match LABEL_NAMES.iter().position(|l| l.eq_ignore_ascii_case(name)) {
            Some(i) => out[i] = true,
            None => bail!("unknown label {name:?}; expected one of {}", LABEL_NAMES.join(", ")),
        }
    }
    Ok(out)
}

fn sample_cmd(a: Sample) -> Result<()> {
    let model = Denoiser::<f32>::load(&a.checkpoint)?;
    let sched = make_schedule(ScheduleKind::Cosine, DEFAULT_TIMESTEPS)?;
    fs::create_dir_all(&a.out)?;
    let size = model.config.image_size;
    if let Some(src) = &a.from_data {
        let n = u32::try_from(a.n).context("--n is too large")?;
        let source = load_dataset(src)?;
        let syn = generate_replicas(&model, &source, n, a.cfg_scale, a.steps, a.seed, &sched)?;
        save_dataset(&a.out, &syn)?;
        eprintln!("wrote {} synthetic records to {}", syn.len(), a.out.display());
        return write_run_record(&a.out, Some(a.seed), &["manifest.json".into(), "pixels.f32".into()]);
    }
    let cond = ConditionVector::new(parse_labels(&a.labels)?, a.age_decade, a.sex, a.race)?;
    let reqs: Vec<SampleRequest> = (0..a.n)
        .map(|i| SampleRequest::new(cond, a.cfg_scale, derive_seed(a.seed, &[i as u64])).with_steps(a.steps))
        .collect();
    let images = sample_batch(&model, &reqs, &sched)?;
    let mut outputs = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let name = format!("sample-{i:04}.pgm");
        write_pgm(&a.out.join(&name), size, size, &img.to_f32())?;
        outputs.push(name);
    }
    eprintln!("wrote {} images to {}", images.len(), a.out.display());
    write_run_record(&a.out, Some(a.seed), &outputs)
}

fn train_classifier_cmd(a: TrainClassifier) -> Result<()> {
    let train = load_dataset(&a.train)?;
    let val = load_dataset(&a.val)?;
    let mut cfg = match &a.config {
        Some(p) => read_json::<ClassifierConfig>(p)?,
        None => ClassifierConfig { image_size: train.image_size, ..ClassifierConfig::desk() },
    };
    cfg.seed = a.seed;
    if let Some(e) = a.epochs {
        cfg.max_epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    fs::create_dir_all(&a.out)?;
    let model = train_classifier(&train, &val, &cfg, |e| {
        eprintln!("epoch {}: train {:.4} val {:.4}", e.epoch, e.train_loss, e.val_loss)
    })?;
    model.save(&a.out.join("classifier.ckpt"))?;
    fs::write(a.out.join("history.json"), serde_json::to_string_pretty(&model.history)? + "\n")?;
    eprintln!("best epoch {} (val loss {:.4})", model.best_epoch, model.best_val_loss);
    write_run_record(&a.out, Some(a.seed), &["classifier.ckpt".into(), "history.json".into()])
}

fn evaluate_cmd(a: Evaluate) -> Result<()> {
    let model = TrainedClassifier::load(&a.classifier)?;
    let data = load_dataset(&a.data)?;
    let name = a.name.clone().unwrap_or_else(|| {
        a.data.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into())
    });
    let probs = model.predict_dataset(&data)?;
    let (t, m) = test_labels(&data);
    let model_id = a.classifier.display().to_string();
    let mut rep = evaluate_predictions(&model_id, &name, &probs, &t, &m, a.bootstrap, a.seed)?;
    rep.set_cooccurrence(&cooccurrence(&data.present_matrix()));
    fs::create_dir_all(&a.out)?;
    rep.write_json(&a.out.join("report.json"))?;
    rep.write_label_csv(&a.out.join("labels.csv"))?;
    println!(
        "macro AUROC {:.4} [{:.4}, {:.4}]",
        rep.macro_auroc.point, rep.macro_auroc.lower, rep.macro_auroc.upper
    );
    write_run_record(&a.out, Some(a.seed), &["report.json".into(), "labels.csv".into()])
}

fn experiment_cmd(e: Experiment) -> Result<()> {
    match e {
        Experiment::Init(a) => {
            let mut cfg = ExperimentConfig::desk(a.family.into(), a.checkpoint, a.out.clone());
            if a.full_grid {
                cfg.ratios = (0..=10).map(|k| k * 100).filter(|&r| r > 0 || cfg.family != Family::PureSynthetic).collect();
                cfg.synthesis.pool_replicas = 10;
            }
            if let Some(s) = a.seed {
                apply_seed(&mut cfg, s);
            }
            cfg.validate()?;
            fs::create_dir_all(&a.out)?;
            fs::write(a.out.join("experiment.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
            write_run_record(&a.out, a.seed, &["experiment.json".into()])
        }
        Experiment::Prepare(a) => {
            let cfg: ExperimentConfig = read_json(&a.config)?;
            let data = prepare_data(&cfg.data)?;
            export_data(&data, &a.out)?;
            for (name, d) in data.named() {
                eprintln!("{name}: {} images", d.len());
            }
            write_run_record(&a.out, Some(cfg.data.seed), &data.named().map(|(n, _)| n.to_string()))
        }
        Experiment::Run(a) => {
            let mut cfg: ExperimentConfig = read_json(&a.config)?;
            if let Some(out) = a.out {
                cfg.output_dir = out;
            }
            if let Some(s) = a.seed {
                apply_seed(&mut cfg, s);
            }
            let m = run_experiment_with(&cfg, &mut |msg| eprintln!("{msg}"))?;
            for e in &m.runs {
                let r = EvalReport::read_json(&cfg.output_dir.join(&e.reports[synthsupp::harness::SITE_A_TEST]))?;
                eprintln!("ratio {:>4}% seed {}: siteA-test macro AUROC {:.4}", e.ratio_percent, e.seed, r.macro_auroc.point);
            }
            write_run_record(&cfg.output_dir, a.seed, &[MANIFEST_FILE.into()])
        }
        Experiment::Report(a) => {
            let dirs = if a.runs.is_empty() { discover_runs(&a.out)? } else { a.runs.clone() };
            if dirs.is_empty() {
                bail!("no run manifests found under {}", a.out.display());
            }
            let manifests = dirs.into_iter().map(|d| Ok((d.clone(), RunManifest::read(&d)?))).collect::<Result<Vec<_>>>()?;
            let fig_dir = a.out.join("figures");
            let out = emit_figure_csv(&manifests, &fig_dir)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            let files: Vec<String> = out.files.iter().map(|p| p.display().to_string()).collect();
            for f in &files {
                println!("{f}");
            }
            write_run_record(&fig_dir, None, &files)
        }
    }
}

fn apply_seed(cfg: &mut ExperimentConfig, seed: u64) {
    cfg.data.seed = derive_seed(seed, &[1]);
    cfg.synthesis.seed = derive_seed(seed, &[2]);
    cfg.bootstrap.seed = derive_seed(seed, &[3]);
}

fn discover_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    if root.join(MANIFEST_FILE).is_file() {
        dirs.push(root.to_path_buf());
    }
    if root.is_dir() {
        let mut subs: Vec<PathBuf> = fs::read_dir(root)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        subs.sort();
        dirs.extend(subs.into_iter().filter(|p| p.join(MANIFEST_FILE).is_file()));
    }
    Ok(dirs)
}

fn report_cmd(a: Report) -> Result<()> {
    let reports = a.reports.iter().map(|p| Ok(EvalReport::read_json(p)?)).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&a.out)?;
    let mut w = csv::Writer::from_path(a.out.join("summary.csv"))?;
    w.write_record(["model_id", "dataset_id", "macro_auroc", "ci_lo", "ci_hi"])?;
    for r in &reports {
        w.write_record([
            r.model_id.clone(),
            r.dataset_id.clone(),
            r.macro_auroc.point.to_string(),
            r.macro_auroc.lower.to_string(),
            r.macro_auroc.upper.to_string(),
        ])?;
    }
    w.flush()?;
    let mut outputs = vec!["summary.csv".to_string()];
    if let Some(b) = &a.baseline {
        let base = EvalReport::read_json(b)?;
        let refs: Vec<&EvalReport> = reports.iter().collect();
        let comps = compare_to_baseline(&base, &refs, a.alpha)?;
        for c in &comps {
            println!("{} vs {}: Δ={:+.4} p={:.3e}{}", c.a, c.b, c.mean_difference, c.p_value, if c.significant { " *" } else { "" });
        }
        fs::write(a.out.join("comparisons.json"), serde_json::to_string_pretty(&comps)? + "\n")?;
        outputs.push("comparisons.json".into());
    }
    write_run_record(&a.out, None, &outputs)
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = threads_from_env()? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainDiffusion(a) => train_diffusion_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::TrainClassifier(a) => train_classifier_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Experiment(e) => experiment_cmd(e),
        Command::Report(a) => report_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
