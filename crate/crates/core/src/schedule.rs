//! Noise schedules and the forward (noising) diffusion process.

use std::f64::consts::FRAC_PI_2;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;
const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.02;
/// Diffusion length used throughout training and sampling.
pub const DEFAULT_TIMESTEPS: usize = 1000;

/// Precomputed β, α = 1 − β and ᾱ_t = Π_{s≤t} α_s, 0-based. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: Option<ScheduleKind>,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Continuous cosine profile `cos²(((t/T)+s)/(1+s)·π/2)`.
pub fn cosine_profile(t: f64, steps: usize) -> f64 {
    (((t / steps as f64) + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2).cos().powi(2)
}

pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(invalid(format!("schedule needs at least 2 timesteps, got {steps}")));
    }
    let betas = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|t| LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * t as f64 / (steps - 1) as f64)
            .collect(),
        ScheduleKind::Cosine => {
            let f0 = cosine_profile(0.0, steps);
            // ᾱ_t = f(t)/f(0) for t ≥ 1. Taken literally at t = 0 that is 1,
            // i.e. β_0 = 0, so ᾱ_0 is read off the profile half a step in.
            let target = |t: usize| {
                if t == 0 {
                    cosine_profile(0.5, steps) / f0
                } else {
                    cosine_profile(t as f64, steps) / f0
                }
            };
            let mut prev = 1.0;
            (0..steps)
                .map(|t| {
                    let ab = target(t);
                    let beta = (1.0 - ab / prev).min(MAX_BETA);
                    prev = ab;
                    beta
                })
                .collect()
        }
    };
    let mut s = NoiseSchedule::from_betas(betas)?;
    s.kind = Some(kind);
    Ok(s)
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas in `[0, 1)`. Zero betas are
    /// accepted so degenerate fixtures can be expressed.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(invalid("schedule needs at least 2 timesteps"));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(invalid(format!("beta {b} outside [0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut acc = 1.0;
        let alpha_bars = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Ok(Self { kind: None, betas, alphas, alpha_bars })
    }

    pub fn kind(&self) -> Option<ScheduleKind> {
        self.kind
    }

    /// Total number of timesteps T.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(invalid(format!("timestep {t} outside [0, {})", self.len())));
        }
        Ok(())
    }
}

/// Closed-form noising `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_diffuse<F: Scalar>(
    x0: &FeatureMap<F>,
    t: usize,
    eps: &FeatureMap<F>,
    sched: &NoiseSchedule,
) -> Result<FeatureMap<F>> {
    sched.check_t(t)?;
    if !x0.same_shape(eps) {
        return Err(invalid("noise shape differs from image shape"));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (F::lit(ab.sqrt()), F::lit((1.0 - ab).sqrt()));
    let data = x0.data.iter().zip(&eps.data).map(|(&x, &e)| a * x + b * e).collect();
    Ok(FeatureMap { channels: x0.channels, height: x0.height, width: x0.width, data })
}

/// Runs the Markov chain `x_s = √α_s·x_{s−1} + √β_s·ε_s` for `s = 0..=t`
/// with fresh unit Gaussian noise each step.
pub fn forward_diffuse_stepwise<F: Scalar>(
    x0: &FeatureMap<F>,
    t: usize,
    rng: &mut Rng,
    sched: &NoiseSchedule,
) -> Result<FeatureMap<F>> {
    sched.check_t(t)?;
    let mut x = x0.clone();
    for s in 0..=t {
        let (a, b) = (F::lit(sched.alphas[s].sqrt()), F::lit(sched.betas[s].sqrt()));
        for v in x.data.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v = a * *v + b * F::lit(e);
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn rejects_too_short() {
        assert!(make_schedule(ScheduleKind::Cosine, 1).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 0).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 2).is_ok());
    }

    #[test]
    fn cosine_midpoint_matches_profile_ratio() {
        // Oracle evaluated independently of make_schedule.
        let f = |t: f64| (((t / 10.0) + 0.008) / 1.008 * std::f64::consts::PI / 2.0).cos().powi(2);
        let oracle = f(5.0) / f(0.0);
        assert!((oracle - 0.493_843_590_440_637_75).abs() < 1e-15);
        let s = make_schedule(ScheduleKind::Cosine, 10).unwrap();
        assert!((s.alpha_bar(5) - oracle).abs() < 1e-10);
    }

    #[test]
    fn cosine_thousand_endpoints() {
        let s = make_schedule(ScheduleKind::Cosine, 1000).unwrap();
        assert!(s.alpha_bar(0) > 0.9999 && s.alpha_bar(0) < 1.0);
        assert!(s.alpha_bar(999) < 1e-3);
    }

    #[test]
    fn linear_betas_span_range() {
        let s = make_schedule(ScheduleKind::Linear, 1000).unwrap();
        assert_eq!(s.betas()[0], 1e-4);
        assert!((s.betas()[999] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn forward_diffuse_trivial_cases() {
        let s = NoiseSchedule::from_betas(vec![0.0, 0.5, 0.5]).unwrap();
        let x0 = FeatureMap::from_vec(1, 1, 3, vec![0.2f64, -0.4, 0.9]).unwrap();
        let eps = FeatureMap::from_vec(1, 1, 3, vec![1.0f64, 2.0, -1.0]).unwrap();
        assert_eq!(forward_diffuse(&x0, 0, &eps, &s).unwrap(), x0);
        let zero = FeatureMap::zeros(1, 1, 3);
        let out = forward_diffuse(&zero, 2, &eps, &s).unwrap();
        let scale = (1.0f64 - 0.25).sqrt();
        for (o, e) in out.data.iter().zip(&eps.data) {
            assert!((o - scale * e).abs() < 1e-15);
        }
        let bad = FeatureMap::zeros(1, 1, 2);
        assert!(forward_diffuse(&x0, 1, &bad, &s).is_err());
        assert!(forward_diffuse(&x0, 3, &eps, &s).is_err());
    }

    #[test]
    fn stepwise_degenerate_and_single_step() {
        let s = NoiseSchedule::from_betas(vec![0.0; 5]).unwrap();
        let x0 = FeatureMap::from_vec(1, 2, 2, vec![0.1f64, 0.2, 0.3, 0.4]).unwrap();
        let mut rng = rng_from_seed(5);
        assert_eq!(forward_diffuse_stepwise(&x0, 4, &mut rng, &s).unwrap(), x0);

        let s = NoiseSchedule::from_betas(vec![0.36, 0.1]).unwrap();
        let mut a = rng_from_seed(9);
        let out = forward_diffuse_stepwise(&x0, 0, &mut a, &s).unwrap();
        let mut b = rng_from_seed(9);
        for (o, x) in out.data.iter().zip(&x0.data) {
            let e: f64 = StandardNormal.sample(&mut b);
            assert!((o - (0.8 * x + 0.6 * e)).abs() < 1e-15);
        }
    }
}
