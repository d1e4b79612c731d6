//! Oracles shared by the integration and acceptance targets.

#![allow(dead_code)]

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synthsupp::classifier::{masked_bce, ClassifierArch, ClassifierNet};
use synthsupp::denoiser::{ConditionVector, Denoiser, DenoiserConfig};
use synthsupp::params::ModelParams;
use synthsupp::tensor::FeatureMap;

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_REL_TOL: f64 = 1e-3;

/// Probability that a random positive outranks a random negative, ties half.
pub fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (&si, _) in scores.iter().zip(labels).filter(|(_, &l)| l) {
        for (&sj, _) in scores.iter().zip(labels).filter(|(_, &l)| !l) {
            pairs += 1.0;
            wins += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

pub fn tiny_denoiser(mults: Vec<usize>) -> DenoiserConfig {
    DenoiserConfig {
        image_size: 4,
        base_channels: 2,
        channel_multipliers: mults,
        time_embed_dim: 4,
        cond_embed_dim: 6,
        guidance_drop_rate: 0.1,
    }
}

pub fn random_image(rng: &mut ChaCha8Rng, size: usize) -> FeatureMap<f64> {
    FeatureMap::from_vec(1, size, size, (0..size * size).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn sample_cond(rng: &mut ChaCha8Rng) -> ConditionVector {
    let mut p = [false; 14];
    for v in p.iter_mut() {
        *v = rng.random_bool(0.4);
    }
    ConditionVector::new(p, rng.random_range(0..10u8), rng.random_range(0..2u8), rng.random_range(0..5u8)).unwrap()
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn ok(&self, min_checked: usize) -> bool {
        self.checked >= min_checked && self.worst < GRAD_REL_TOL
    }
}

/// Central differences of `loss` at parameter `i`.
fn numeric(p: &mut ModelParams<f64>, i: usize, loss: &dyn Fn(&ModelParams<f64>) -> f64) -> f64 {
    let orig = p.flat_value(i);
    p.set_flat_value(i, orig + FD_STEP);
    let lp = loss(p);
    p.set_flat_value(i, orig - FD_STEP);
    let lm = loss(p);
    p.set_flat_value(i, orig);
    (lp - lm) / (2.0 * FD_STEP)
}

/// Loss `<w, f(x)>` so the output gradient is `w`; 20 random parameters
/// with non-negligible gradient are compared.
pub fn check_denoiser(mults: Vec<usize>, null: bool, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Denoiser::<f64>::init(tiny_denoiser(mults), seed).unwrap();
    let x = random_image(&mut rng, 4);
    let w = random_image(&mut rng, 4);
    let cond = if null { ConditionVector::null() } else { sample_cond(&mut rng) };
    let t = 37;
    let (_, tr) = m.forward_trace(&x, t, &cond).unwrap();
    let mut g = m.params.gradients_like();
    m.backward(&tr, &w, &mut g).unwrap();
    let analytic: Vec<f64> = g.flat().copied().collect();

    let config = m.config.clone();
    let loss = |p: &ModelParams<f64>| {
        let m = Denoiser::from_params(config.clone(), p.clone()).unwrap();
        let y = m.forward(&x, t, &cond).unwrap();
        y.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
    };
    let mut p = m.params.clone();
    let n = p.count();
    let mut out = GradCheck { checked: 0, worst: 0.0 };
    let mut tries = 0;
    while out.checked < 20 && tries < 2000 {
        tries += 1;
        let i = rng.random_range(0..n);
        let num = numeric(&mut p, i, &loss);
        if analytic[i].abs() < 1e-6 && num.abs() < 1e-6 {
            continue;
        }
        out.worst = out.worst.max(rel_err(analytic[i], num));
        out.checked += 1;
    }
    out
}

/// Classifier through the masked BCE loss, every parameter, so the head,
/// pooling and each convolution are covered.
pub fn check_classifier(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = ClassifierArch { image_size: 8, base_channels: 2 };
    let (net, mut p) = ClassifierNet::init::<f64>(arch, seed).unwrap();
    let x = random_image(&mut rng, 8);
    let targets: Vec<bool> = (0..14).map(|_| rng.random_bool(0.3)).collect();
    let mask: Vec<bool> = (0..14).map(|i| i % 5 != 2).collect();
    let loss = |p: &ModelParams<f64>| masked_bce(&net.logits(p, &x).unwrap(), &targets, &mask, 3.0).0;
    let (logits, tr) = net.forward_trace(&p, &x).unwrap();
    let (_, glog) = masked_bce(&logits, &targets, &mask, 3.0);
    let mut g = p.gradients_like();
    net.backward(&p, &tr, &glog, &mut g).unwrap();
    let analytic: Vec<f64> = g.flat().copied().collect();
    let mut out = GradCheck { checked: 0, worst: 0.0 };
    for i in 0..p.count() {
        let num = numeric(&mut p, i, &loss);
        if analytic[i].abs() < 1e-6 && num.abs() < 1e-6 {
            continue;
        }
        out.worst = out.worst.max(rel_err(analytic[i], num));
        out.checked += 1;
    }
    out
}
