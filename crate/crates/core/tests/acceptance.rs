//! Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned
//! below. Runs the desk end-to-end experiment, which trains a denoiser and
//! about thirty classifiers; expect tens of minutes on a single core.
//!
//! Work files go under `CARGO_TARGET_TMPDIR/acceptance` and are wiped first
//! unless `SYNTHSUPP_ACCEPTANCE_REUSE=1`, in which case cached models are
//! reused and the reported end-to-end runtime covers only uncached work.
//! `--skip-e2e` runs only the fast criteria.

mod common;

use common::{check_classifier, check_denoiser};

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use synthsupp::denoiser::{ConditionVector, Denoiser, DenoiserConfig};
use synthsupp::diffusion::*;
use synthsupp::eval::*;
use synthsupp::harness::*;
use synthsupp::optim::{ema_update, lion_update, LionConfig};
use synthsupp::rng::rng_from_seed;
use synthsupp::schedule::*;
use synthsupp::tensor::{FeatureMap, Image};
use synthsupp::toydata::*;

// Forward process.
const MC_DRAWS: usize = 10_000;
const MC_SIGMAS: f64 = 3.0;
const MC_TIMESTEPS: [usize; 5] = [0, 50, 250, 600, 999];
const MC_X0: [f64; 4] = [-0.8, -0.2, 0.3, 0.9];
/// Two-sample Kolmogorov-Smirnov coefficient for alpha = 0.001.
const KS_C_ALPHA: f64 = 1.949;
const MC_BUDGET: Duration = Duration::from_secs(10);

const ALPHA_BAR_TOL: f64 = 1e-10;
const DDIM_TOL: f64 = 1e-4;
const CFG_RATIO: (f64, f64) = (1.7, 2.3);
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const EMA_TOL: f64 = 1e-9;
const FRECHET_TOL: f64 = 1e-8;
const BOOTSTRAP_COVERAGE: f64 = 0.99;

// Desk experiment.
const SUPPLEMENT_SLACK: f64 = 0.005;
const PURE_SYNTHETIC_BAND: f64 = 0.05;
const E2E_BUDGET: Duration = Duration::from_secs(2 * 3600);
const DIFFUSION_STEPS: usize = 4000;

struct Suite {
    failed: usize,
}

impl Suite {
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed += 1;
        }
    }
}

/// Cosine ᾱ_t computed directly from its defining profile.
fn alpha_bar_oracle(t: usize, total: usize) -> f64 {
    let f = |u: f64| ((u / total as f64 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
    if t == 0 {
        f(0.5) / f(0.0)
    } else {
        f(t as f64) / f(0.0)
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// Mean within 3 SE of √ᾱ·x0 and variance within 3 SE of 1 − ᾱ, where the
/// variance SE is that of a Gaussian sample variance.
fn moments_ok(xs: &[f64], ab: f64, x0: f64) -> bool {
    let (m, v) = mean_var(xs);
    let n = xs.len() as f64;
    let var = 1.0 - ab;
    let se_m = (var / n).sqrt();
    let se_v = var * (2.0 / (n - 1.0)).sqrt();
    (m - ab.sqrt() * x0).abs() <= MC_SIGMAS * se_m && (v - var).abs() <= MC_SIGMAS * se_v
}

fn forward_process(s: &mut Suite) {
    let start = Instant::now();
    let sched = make_schedule(ScheduleKind::Cosine, DEFAULT_TIMESTEPS).unwrap();
    let x0 = FeatureMap::from_vec(1, 1, 4, MC_X0.to_vec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut closed_ok, mut chain_ok, mut ks_ok, mut worst_ks) = (true, true, true, 0.0f64);
    for &t in &MC_TIMESTEPS {
        let ab = alpha_bar_oracle(t, DEFAULT_TIMESTEPS);
        let mut closed: Vec<Vec<f64>> = (0..4).map(|_| Vec::with_capacity(MC_DRAWS)).collect();
        let mut chain: Vec<Vec<f64>> = (0..4).map(|_| Vec::with_capacity(MC_DRAWS)).collect();
        let mut chain_rng = rng_from_seed(7 + t as u64);
        for _ in 0..MC_DRAWS {
            let eps: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
            let eps = FeatureMap::from_vec(1, 1, 4, eps).unwrap();
            let xc = forward_diffuse(&x0, t, &eps, &sched).unwrap();
            let xs = forward_diffuse_stepwise(&x0, t, &mut chain_rng, &sched).unwrap();
            for p in 0..4 {
                closed[p].push(xc.data[p]);
                chain[p].push(xs.data[p]);
            }
        }
        for p in 0..4 {
            closed_ok &= moments_ok(&closed[p], ab, MC_X0[p]);
            chain_ok &= moments_ok(&chain[p], ab, MC_X0[p]);
            let d = ks_statistic(&closed[p], &chain[p]);
            worst_ks = worst_ks.max(d);
            ks_ok &= d <= KS_C_ALPHA * (2.0 / MC_DRAWS as f64).sqrt();
        }
    }
    let elapsed = start.elapsed();
    s.record(
        "forward diffusion closed form and stepwise chain",
        closed_ok && chain_ok && ks_ok && elapsed < MC_BUDGET,
        format!(
            "closed-form moments {}, chain moments {}, worst KS D {worst_ks:.4} (limit {:.4}), {:.1}s (limit {}s)",
            ok(closed_ok),
            ok(chain_ok),
            KS_C_ALPHA * (2.0 / MC_DRAWS as f64).sqrt(),
            elapsed.as_secs_f64(),
            MC_BUDGET.as_secs()
        ),
    );
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "out of tolerance"
    }
}

fn schedule_properties(s: &mut Suite) {
    let mut shape = true;
    for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
        for steps in [10, 100, 1000] {
            let sch = make_schedule(kind, steps).unwrap();
            shape &= sch.betas().iter().all(|&b| b > 0.0 && b < 1.0);
            shape &= sch.alpha_bars().windows(2).all(|w| w[1] < w[0]);
        }
    }
    let got = make_schedule(ScheduleKind::Cosine, 10).unwrap().alpha_bar(5);
    let want = alpha_bar_oracle(5, 10);
    let err = (got - want).abs();
    s.record(
        "schedule properties",
        shape && err < ALPHA_BAR_TOL,
        format!("monotone with betas in (0,1): {}, cosine alpha_bar(5) at T=10 = {got:.15} vs {want:.15}", ok(shape)),
    );
}

/// Knows the clean image and returns the exact noise in `x_t`.
struct OracleDenoiser {
    x0: Vec<f64>,
    sched: NoiseSchedule,
    size: usize,
}

impl NoisePredictor<f64> for OracleDenoiser {
    fn image_size(&self) -> usize {
        self.size
    }

    fn predict(&self, x: &Image<f64>, t: usize, _cond: &ConditionVector) -> synthsupp::Result<Image<f64>> {
        let ab = self.sched.alpha_bar(t);
        let data = x.data.iter().zip(&self.x0).map(|(&xt, &x0)| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt()).collect();
        Image::from_vec(1, self.size, self.size, data)
    }
}

fn ddim_correctness(s: &mut Suite) {
    let size = 8;
    let sched = make_schedule(ScheduleKind::Cosine, DEFAULT_TIMESTEPS).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0: Vec<f64> = (0..size * size).map(|_| rng.random_range(-0.95..0.95)).collect();
    let oracle = OracleDenoiser { x0: x0.clone(), sched: sched.clone(), size };
    let req = SampleRequest::new(ConditionVector::null(), 0.0, 17).with_steps(DEFAULT_TIMESTEPS);
    let out = ddim_sample(&oracle, &req, &sched).unwrap();
    let err = out.data.iter().zip(&x0).map(|(&p, &x)| (p - (x + 1.0) / 2.0).abs()).fold(0.0, f64::max);

    let cfg = DenoiserConfig { image_size: 16, base_channels: 8, ..Default::default() };
    let model = Denoiser::<f32>::init(cfg, 3).unwrap();
    let cond = ConditionVector::new([true, false, true, false, false, false, false, false, false, false, false, false, false, true], 4, 1, 2).unwrap();
    let req = SampleRequest::new(cond, 2.0, 99).with_steps(20);
    let a = ddim_sample(&model, &req, &sched).unwrap();
    let b = ddim_sample(&model, &req, &sched).unwrap();
    let same = a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits());
    s.record(
        "DDIM oracle reconstruction and reproducibility",
        err < DDIM_TOL && same,
        format!("max abs error {err:.2e} (limit {DDIM_TOL:e}) over {} steps, repeated sampling bit-identical: {same}", DEFAULT_TIMESTEPS),
    );
}

fn cfg_cost(s: &mut Suite) {
    let sched = make_schedule(ScheduleKind::Cosine, DEFAULT_TIMESTEPS).unwrap();
    let cfg = DenoiserConfig { base_channels: 16, ..Default::default() };
    let model = CountingPredictor::new(Denoiser::<f32>::init(cfg, 1).unwrap());
    let steps = 25;
    let cond = ConditionVector::new([false; 14], 5, 0, 1).unwrap();
    let mut evals = Vec::new();
    for scale in [0.0, 7.5] {
        model.reset();
        ddim_sample(&model, &SampleRequest::new(cond, scale, 1).with_steps(steps), &sched).unwrap();
        evals.push(model.evaluations());
    }
    // Warm up, then alternate the two scales and take the median ratio of
    // adjacent pairs, which damps drift in machine load.
    let time = |scale: f64, seed: u64| {
        let t = Instant::now();
        ddim_sample(&model, &SampleRequest::new(cond, scale, seed).with_steps(steps), &sched).unwrap();
        t.elapsed().as_secs_f64()
    };
    time(0.0, 0);
    time(7.5, 0);
    let pairs: Vec<(f64, f64)> = (1..=9).map(|i| (time(0.0, i), time(7.5, i))).collect();
    let mut ratios: Vec<f64> = pairs.iter().map(|(a, b)| b / a).collect();
    ratios.sort_by(f64::total_cmp);
    let ratio = ratios[ratios.len() / 2];
    let t0 = pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64;
    let t1 = pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64;
    s.record(
        "guidance cost",
        evals == [steps, 2 * steps] && ratio >= CFG_RATIO.0 && ratio <= CFG_RATIO.1,
        format!(
            "{} and {} evaluations for {steps} steps at scale 0 and 7.5; mean wall-clock {:.3}s vs {:.3}s per image, median ratio {ratio:.2} (band {:?})",
            evals[0], evals[1], t0, t1, CFG_RATIO
        ),
    );
}

fn gradients(s: &mut Suite) {
    let start = Instant::now();
    let dn = [check_denoiser(vec![1], false, 11), check_denoiser(vec![1, 2], false, 12), check_denoiser(vec![1, 2], true, 13)];
    let cl = [check_classifier(21), check_classifier(22)];
    let elapsed = start.elapsed();
    let pass = dn.iter().all(|r| r.ok(20)) && cl.iter().all(|r| r.ok(50)) && elapsed < GRAD_BUDGET;
    let worst = |rs: &[common::GradCheck]| rs.iter().map(|r| r.worst).fold(0.0, f64::max);
    s.record(
        "gradient checks",
        pass,
        format!(
            "denoiser worst relative error {:.2e}, classifier {:.2e} over {} parameters (limit {:e}), {:.1}s",
            worst(&dn),
            worst(&cl),
            cl.iter().map(|r| r.checked).sum::<usize>(),
            common::GRAD_REL_TOL,
            elapsed.as_secs_f64()
        ),
    );
}

fn optimizer_laws(s: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut lion_ok, mut ema_err) = (true, 0.0f64);
    for _ in 0..200 {
        let n = rng.random_range(1..30);
        let theta: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g: Vec<f64> = (0..n).map(|i| if i % 7 == 3 { 0.0 } else { rng.random_range(-1.0..1.0) }).collect();
        let lr = rng.random_range(1e-5..1e-1);
        let mut p = theta.clone();
        lion_update(&mut p, &g, &mut vec![0.0; n], &LionConfig::new(lr, 0.0)).unwrap();
        for i in 0..n {
            let expect = if g[i] == 0.0 { 0.0 } else { lr };
            lion_ok &= ((theta[i] - p[i]).abs() - expect).abs() < 1e-12 && (theta[i] - p[i]) * g[i] >= 0.0;
        }
        let (start, target) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let decay = rng.random_range(0.5..0.999);
        let steps = rng.random_range(1..400);
        let mut e = vec![start];
        for _ in 0..steps {
            ema_update(&mut e, &[target], decay).unwrap();
        }
        ema_err = ema_err.max((e[0] - (target + decay.powi(steps) * (start - target))).abs());
    }
    s.record(
        "Lion and EMA laws",
        lion_ok && ema_err < EMA_TOL,
        format!("sign steps of exactly lr from zero momentum: {lion_ok}; EMA max deviation from closed form {ema_err:.1e}"),
    );
}

fn statistics(s: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut auroc_err = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..40);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
        auroc_err = auroc_err.max((auroc(&scores, &labels, &vec![true; n]).unwrap() - common::brute_auroc(&scores, &labels)).abs());
    }

    let mut fid_err = 0.0f64;
    for _ in 0..50 {
        let d = rng.random_range(1..6);
        let gen = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> Vec<f64> { (0..d).map(|_| rng.random_range(lo..hi)).collect() };
        let (m1, m2, v1, v2) = (gen(&mut rng, -3.0, 3.0), gen(&mut rng, -3.0, 3.0), gen(&mut rng, 0.01, 4.0), gen(&mut rng, 0.01, 4.0));
        let stats = |m: &[f64], v: &[f64]| {
            FeatureStats::new(
                nalgebra::DVector::from_column_slice(m),
                nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(v)),
                10,
            )
            .unwrap()
        };
        let want: f64 = (0..d).map(|i| (m1[i] - m2[i]).powi(2) + v1[i] + v2[i] - 2.0 * (v1[i] * v2[i]).sqrt()).sum();
        fid_err = fid_err.max((frechet_distance(&stats(&m1, &v1), &stats(&m2, &v2)).unwrap() - want).abs());
        fid_err = fid_err.max(frechet_distance(&stats(&m1, &v1), &stats(&m1, &v1)).unwrap().abs());
    }

    // alpha / m = 0.005 for ten comparisons.
    let p = [0.004, 0.005, 0.0049999, 0.0050001, 0.5, 0.9, 0.1, 0.2, 0.3, 0.4];
    let bonf_ok = bonferroni(&p, 0.05) == [true, false, true, false, false, false, false, false, false, false]
        && bonferroni(&[0.0249, 0.025], 0.05) == [true, false];

    let trials = 500;
    let mut inside = 0;
    for t in 0..trials {
        let n = rng.random_range(20..80);
        let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0 || rng.random_bool(0.3)).collect();
        let scores: Vec<f64> = labels.iter().map(|&l| rng.random::<f64>() + if l { 0.3 } else { 0.0 }).collect();
        let ci = bootstrap_ci(&scores, &labels, &vec![true; n], 200, t).unwrap();
        inside += (ci.lower <= ci.point && ci.point <= ci.upper) as usize;
    }
    let coverage = inside as f64 / trials as f64;

    // Three samples: {0,1}, {0}, {1,2}. Hand counts per row condition.
    let row = |on: &[usize]| -> [bool; N_LABELS] { std::array::from_fn(|i| on.contains(&i)) };
    let m = cooccurrence(&[row(&[0, 1]), row(&[0]), row(&[1, 2])]);
    let cooc_ok = m[0][0] == 1.0
        && m[0][1] == 0.5
        && m[0][2] == 0.0
        && m[1][0] == 0.5
        && m[1][2] == 0.5
        && m[2][1] == 1.0
        && m[2][0] == 0.0
        && (3..N_LABELS).all(|r| m[r].iter().all(|v| v.is_nan()));

    s.record(
        "statistics oracles",
        auroc_err < 1e-12 && fid_err < FRECHET_TOL && bonf_ok && coverage >= BOOTSTRAP_COVERAGE && cooc_ok,
        format!(
            "AUROC vs pair counting {auroc_err:.1e} over 200 cases, Fréchet vs closed form {fid_err:.1e}, Bonferroni {}, bootstrap coverage {inside}/{trials}, co-occurrence fixture {}",
            ok(bonf_ok),
            ok(cooc_ok)
        ),
    );
}

fn label_semantics(s: &mut Suite) {
    const STATES: [LabelState; 4] = [LabelState::Present, LabelState::Absent, LabelState::NotMentioned, LabelState::Uncertain];
    let slots = [0usize, 4, 9, 13];
    let (mut cases, mut bad) = (0, 0);
    for fill in STATES {
        for code in 0..256usize {
            let mut st = [fill; N_LABELS];
            for (k, &slot) in slots.iter().enumerate() {
                st[slot] = STATES[(code >> (2 * k)) & 3];
            }
            cases += 1;
            let any_uncertain = st.contains(&LabelState::Uncertain);
            let tr = resolve_labels(&st, LabelMode::Training);
            let te = resolve_labels(&st, LabelMode::Testing);
            let good = tr.keep == !any_uncertain
                && te.keep
                && (0..N_LABELS).all(|i| {
                    let present = st[i] == LabelState::Present;
                    tr.targets[i] == present
                        && te.targets[i] == present
                        && te.mask[i] == (st[i] != LabelState::Uncertain)
                        && (!tr.keep || tr.mask[i])
                });
            bad += !good as usize;
        }
    }
    s.record("label semantics", bad == 0, format!("{} of {cases} state combinations resolved as specified", cases - bad));
}

#[derive(Serialize, Deserialize)]
struct DiffusionRecord {
    seconds: f64,
    final_loss: f64,
}

/// Trains (or, when reusing, loads) the desk denoiser on siteA-train.
/// The flag is true when the checkpoint came from an earlier run.
fn desk_denoiser(work: &Path, data: &DataConfig) -> (PathBuf, DiffusionRecord, bool) {
    let model_cfg = DenoiserConfig { base_channels: 16, ..Default::default() };
    let train_cfg = DiffusionTrainConfig {
        steps: DIFFUSION_STEPS,
        batch_size: 16,
        learning_rate: 3e-4,
        ema_decay: 0.995,
        seed: 1,
        ..Default::default()
    };
    let key = canonical_hash(&(data, &model_cfg, &train_cfg)).unwrap();
    let ckpt = work.join(format!("denoiser-{}.ckpt", &key[..16]));
    let record = ckpt.with_extension("json");
    if ckpt.exists() && record.exists() {
        return (ckpt, serde_json::from_slice(&std::fs::read(&record).unwrap()).unwrap(), true);
    }
    let start = Instant::now();
    let split = prepare_data(data).unwrap();
    let sched = make_schedule(ScheduleKind::Cosine, DEFAULT_TIMESTEPS).unwrap();
    let (model, losses) = train_diffusion(&split.a_train, &model_cfg, &train_cfg, &sched, |step, _| {
        if step % 500 == 0 {
            eprintln!("  denoiser step {step}/{DIFFUSION_STEPS}");
        }
    })
    .unwrap();
    model.save(&ckpt).unwrap();
    let tail = &losses[losses.len().saturating_sub(200)..];
    let rec = DiffusionRecord { seconds: start.elapsed().as_secs_f64(), final_loss: tail.iter().sum::<f64>() / tail.len() as f64 };
    std::fs::write(&record, serde_json::to_vec(&rec).unwrap()).unwrap();
    (ckpt, rec, false)
}

/// Mean over seeds of the siteA-test macro AUROC of the entries at `ratio`.
fn mean_macro(dir: &Path, entries: &[&RunEntry]) -> f64 {
    let vals: Vec<f64> = entries
        .iter()
        .map(|e| EvalReport::read_json(&dir.join(&e.reports[SITE_A_TEST])).unwrap().macro_auroc.point)
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn at_ratio(m: &RunManifest, ratio: u32) -> Vec<&RunEntry> {
    m.runs_at(ratio).collect()
}

fn baseline(m: &RunManifest) -> Vec<&RunEntry> {
    m.baseline.iter().collect()
}

fn end_to_end(s: &mut Suite) {
    let work = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let reuse = std::env::var("SYNTHSUPP_ACCEPTANCE_REUSE").is_ok_and(|v| v == "1");
    if !reuse && work.exists() {
        std::fs::remove_dir_all(&work).unwrap();
    }
    std::fs::create_dir_all(&work).unwrap();
    let start = Instant::now();
    let data = DataConfig::default();
    let (ckpt, diff, cached) = desk_denoiser(&work, &data);
    let diffusion_secs = if cached { diff.seconds } else { 0.0 };
    eprintln!("  denoiser ready, final loss {:.4}", diff.final_loss);

    let cache = work.join("cache");
    let experiment = |family: Family, ratios: Vec<u32>, frechet: Option<FrechetConfig>| {
        let mut cfg = ExperimentConfig::desk(family, ckpt.clone(), work.join(family.regime()));
        cfg.ratios = ratios;
        cfg.synthesis.pool_replicas = 2;
        cfg.frechet = frechet;
        cfg.cache_dir = Some(cache.clone());
        let manifest = run_experiment_with(&cfg, &mut |m| eprintln!("  {m}")).unwrap();
        (cfg.output_dir, manifest)
    };
    let (sup_dir, sup) = experiment(
        Family::SupplementSameOrigin,
        vec![0, 200],
        Some(FrechetConfig { cfg_scales: vec![0.0, 7.5], n_images: 300 }),
    );
    let (pure_dir, pure) = experiment(Family::PureSynthetic, vec![200], None);
    let (cross_dir, cross) = experiment(Family::CrossSiteMix, vec![0, 100], None);
    let total = start.elapsed() + Duration::from_secs_f64(diffusion_secs);

    let base = mean_macro(&sup_dir, &baseline(&sup));
    let supplemented = mean_macro(&sup_dir, &at_ratio(&sup, 200));
    let pure_syn = mean_macro(&pure_dir, &at_ratio(&pure, 200));
    let trend = supplemented >= base - SUPPLEMENT_SLACK && (pure_syn - base).abs() <= PURE_SYNTHETIC_BAND && total <= E2E_BUDGET;
    s.record(
        "desk supplementation trend",
        trend,
        format!(
            "siteA-test macro AUROC over seeds {:?}: baseline {base:.4}, 200% supplemented {supplemented:.4} (floor {:.4}), 200% synthetic only {pure_syn:.4} (band ±{PURE_SYNTHETIC_BAND}); runtime {:.0} min on {} thread(s) (limit {} min)",
            sup.seeds,
            base - SUPPLEMENT_SLACK,
            total.as_secs_f64() / 60.0,
            rayon::current_num_threads(),
            E2E_BUDGET.as_secs() / 60
        ),
    );

    let site_b_only = mean_macro(&cross_dir, &at_ratio(&cross, 0));
    let mixed = mean_macro(&cross_dir, &at_ratio(&cross, 100));
    s.record(
        "cross-site trend",
        mixed - site_b_only > 0.0,
        format!("siteA-test macro AUROC: siteB only {site_b_only:.4}, siteB + 100% siteA synthetic {mixed:.4}, margin {:+.4}", mixed - site_b_only),
    );

    let d: Vec<f64> = sup.frechet.iter().map(|f| f.distance).collect();
    s.record(
        "Fréchet ordering",
        d.len() == 2 && d[0] <= d[1],
        format!("feature Fréchet distance at guidance 0: {:.3}, at 7.5: {:.3}", d[0], d.get(1).copied().unwrap_or(f64::NAN)),
    );
}

fn main() -> ExitCode {
    let mut s = Suite { failed: 0 };
    forward_process(&mut s);
    schedule_properties(&mut s);
    ddim_correctness(&mut s);
    cfg_cost(&mut s);
    gradients(&mut s);
    optimizer_laws(&mut s);
    statistics(&mut s);
    label_semantics(&mut s);
    if std::env::args().any(|a| a == "--skip-e2e") {
        println!("SKIP desk experiment criteria (--skip-e2e)");
    } else {
        end_to_end(&mut s);
    }
    if s.failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{} criteria failed", s.failed);
        ExitCode::FAILURE
    }
}
