//! Procedural site generator. Each label owns one cell of a 4×4 grid and is
//! drawn there as its own shape; demographics shift contrast, brightness and
//! background texture.

use std::f32::consts::PI;

use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::preprocess::{preprocess, RawImage};
use super::{Dataset, Demographics, ImageRecord, LabelState, Provenance, N_LABELS};
use crate::denoiser::{N_AGE_DECADES, N_RACES};
use crate::error::{invalid, Result};
use crate::rng::{derive_seed, rng_from_seed, stream, Rng};

/// Latent correlation between the presence of labels `a` and `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Boost {
    pub a: usize,
    pub b: usize,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    /// Motif intensity is drawn uniformly from this range.
    pub intensity_range: (f32, f32),
    /// Motif center jitter as a fraction of the cell size.
    pub position_jitter: f32,
    /// Background grating frequency in cycles per canvas.
    pub texture_frequency: f32,
    /// Grating orientation in degrees.
    pub texture_angle_deg: f32,
    pub texture_amplitude: f32,
    pub background_level: f32,
    pub noise_std: f32,
    /// Contrast loss from the youngest to the oldest age decade.
    pub age_contrast: f32,
    pub sex_brightness: f32,
    /// Per-race shift of the grating frequency, in cycles per canvas.
    pub race_texture: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub site_name: String,
    pub image_size: usize,
    pub label_prevalences: [f64; N_LABELS],
    pub co_dependency: Vec<Boost>,
    pub render: RenderParams,
    pub n_patients: usize,
    /// Inclusive range, sampled uniformly per patient.
    pub images_per_patient: (u32, u32),
    pub max_images: Option<usize>,
    pub uncertain_rate: f64,
    pub not_mentioned_rate: f64,
    pub age_weights: [f64; N_AGE_DECADES],
    pub female_fraction: f64,
    pub race_weights: [f64; N_RACES],
}

impl SiteSpec {
    /// Outpatient-style site.
    pub fn site_a() -> Self {
        Self {
            site_name: "siteA".into(),
            image_size: 32,
            label_prevalences: [0.18, 0.12, 0.22, 0.10, 0.30, 0.18, 0.12, 0.10, 0.22, 0.10, 0.28, 0.08, 0.10, 0.32],
            co_dependency: vec![
                Boost { a: 2, b: 1, strength: 0.5 },
                Boost { a: 5, b: 10, strength: 0.4 },
                Boost { a: 6, b: 7, strength: 0.5 },
                Boost { a: 4, b: 8, strength: 0.3 },
            ],
            render: RenderParams {
                intensity_range: (0.2, 0.7),
                position_jitter: 0.12,
                texture_frequency: 1.5,
                texture_angle_deg: 30.0,
                texture_amplitude: 0.06,
                background_level: 0.25,
                noise_std: 0.04,
                age_contrast: 0.3,
                sex_brightness: 0.05,
                race_texture: 0.25,
            },
            n_patients: 1500,
            images_per_patient: (1, 3),
            max_images: None,
            uncertain_rate: 0.05,
            not_mentioned_rate: 0.3,
            age_weights: [0.01, 0.04, 0.08, 0.1, 0.14, 0.18, 0.18, 0.15, 0.09, 0.03],
            female_fraction: 0.45,
            race_weights: [0.06, 0.12, 0.05, 0.1, 0.67],
        }
    }

    /// Intensive-care-style site: sicker population, busier background.
    pub fn site_b() -> Self {
        Self {
            site_name: "siteB".into(),
            label_prevalences: [0.08, 0.15, 0.25, 0.08, 0.35, 0.28, 0.15, 0.12, 0.30, 0.08, 0.38, 0.06, 0.06, 0.50],
            co_dependency: vec![
                Boost { a: 2, b: 1, strength: 0.4 },
                Boost { a: 5, b: 10, strength: 0.6 },
                Boost { a: 13, b: 9, strength: 0.3 },
            ],
            render: RenderParams {
                intensity_range: (0.15, 0.6),
                position_jitter: 0.25,
                texture_frequency: 2.5,
                texture_angle_deg: 100.0,
                texture_amplitude: 0.12,
                background_level: 0.35,
                noise_std: 0.07,
                age_contrast: 0.3,
                sex_brightness: 0.05,
                race_texture: 0.4,
            },
            age_weights: [0.0, 0.02, 0.05, 0.08, 0.12, 0.18, 0.22, 0.19, 0.11, 0.03],
            female_fraction: 0.42,
            race_weights: [0.04, 0.2, 0.06, 0.1, 0.6],
            ..Self::site_a()
        }
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "siteA" => Ok(Self::site_a()),
            "siteB" => Ok(Self::site_b()),
            other => Err(invalid(format!("unknown site {other:?} (expected siteA or siteB)"))),
        }
    }

    /// Sets patient count so the expected image count is about `n`, and caps
    /// the corpus at exactly `n` images.
    pub fn with_image_count(mut self, n: usize) -> Self {
        let (lo, hi) = self.images_per_patient;
        let mean = (lo + hi) as f64 / 2.0;
        self.n_patients = ((n as f64 / mean).ceil() as usize + 8).max(1);
        self.max_images = Some(n);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let rate = |p: f64| (0.0..1.0).contains(&p);
        if let Some(i) = self.label_prevalences.iter().position(|&p| !prob(p)) {
            return Err(invalid(format!("prevalence of label {i} is outside [0,1]")));
        }
        if !rate(self.uncertain_rate) || !rate(self.not_mentioned_rate) {
            return Err(invalid("uncertain and not-mentioned rates must lie in [0,1)"));
        }
        if !prob(self.female_fraction) {
            return Err(invalid("female fraction must lie in [0,1]"));
        }
        for b in &self.co_dependency {
            if b.a >= N_LABELS || b.b >= N_LABELS || b.a == b.b || !rate(b.strength) {
                return Err(invalid(format!("bad co-dependency entry {b:?}")));
            }
        }
        let weights_ok = |w: &[f64]| w.iter().all(|&x| x >= 0.0 && x.is_finite()) && w.iter().sum::<f64>() > 0.0;
        if !weights_ok(&self.age_weights) || !weights_ok(&self.race_weights) {
            return Err(invalid("demographic weights must be non-negative with a positive sum"));
        }
        let (lo, hi) = self.images_per_patient;
        if lo == 0 || lo > hi {
            return Err(invalid("images per patient must be a range with 1 <= min <= max"));
        }
        if self.n_patients == 0 {
            return Err(invalid("a site needs at least one patient"));
        }
        if self.image_size < 8 {
            return Err(invalid("image size must be at least 8"));
        }
        let r = &self.render;
        let (i0, i1) = r.intensity_range;
        let finite = [i0, i1, r.position_jitter, r.texture_frequency, r.texture_angle_deg.abs(), r.texture_amplitude, r.background_level, r.noise_std, r.age_contrast, r.sex_brightness, r.race_texture];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) || i0 > i1 || r.age_contrast >= 1.0 {
            return Err(invalid("render parameters must be finite and non-negative, with age contrast below 1"));
        }
        Ok(())
    }

    /// Raw canvas before padding: taller than wide, like a portrait radiograph.
    pub fn canvas_dims(&self) -> (usize, usize) {
        (self.image_size + self.image_size / 8, self.image_size)
    }
}

fn pick_weighted(rng: &mut Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Gaussian-copula draw: marginals equal the prevalences exactly while each
/// boost adds a shared factor to its two labels.
fn sample_presence(spec: &SiteSpec, thresholds: &[f64; N_LABELS], rng: &mut Rng) -> [bool; N_LABELS] {
    let mut z = [0.0f64; N_LABELS];
    let mut var = [1.0f64; N_LABELS];
    for zi in z.iter_mut() {
        *zi = normal(rng);
    }
    for b in &spec.co_dependency {
        let f = normal(rng) * b.strength.sqrt();
        z[b.a] += f;
        z[b.b] += f;
        var[b.a] += b.strength;
        var[b.b] += b.strength;
    }
    std::array::from_fn(|i| z[i] / var[i].sqrt() < thresholds[i])
}

fn thresholds(spec: &SiteSpec) -> [f64; N_LABELS] {
    let n = Normal::standard();
    std::array::from_fn(|i| match spec.label_prevalences[i] {
        p if p <= 0.0 => f64::NEG_INFINITY,
        p if p >= 1.0 => f64::INFINITY,
        p => n.inverse_cdf(p),
    })
}

/// Coverage in [0,1] of shape `label` at local cell coordinates `(u, v)`,
/// both in [-1, 1].
fn motif(label: usize, u: f32, v: f32) -> f32 {
    let r = (u * u + v * v).sqrt();
    let inside = |b: bool| b as u8 as f32;
    match label {
        0 => inside((u.abs() < 0.2 && v.abs() < 0.7) || (v.abs() < 0.2 && u.abs() < 0.7)),
        1 => inside(u.abs() < 0.3 && v.abs() < 0.9),
        2 => inside(r < 0.8),
        3 => inside(r < 0.4),
        4 => inside(u.abs() < 0.7 && v.abs() < 0.7),
        5 => inside(u.abs() < 0.85 && ((v + 0.45).abs() < 0.2 || (v - 0.45).abs() < 0.2)),
        6 => inside((0.45..0.85).contains(&r)),
        7 => inside(((u - v).abs() < 0.3 || (u + v).abs() < 0.3) && r < 0.95),
        8 => inside(v.abs() < 0.3 && u.abs() < 0.9),
        9 => inside(u.abs().max(v.abs()) < 0.85 && u.abs().max(v.abs()) > 0.5),
        10 => inside(v > -0.1 && v < 0.85 && u.abs() < 0.85 * (v + 0.1) / 0.95 + 0.05),
        11 => inside((u - v).abs() < 0.35 && r < 0.95),
        12 => {
            let t = (u + 1.0) * 1.5;
            let zig = 1.2 * 2.0 * (t - t.round()).abs() - 0.6;
            inside((v - zig).abs() < 0.25 && u.abs() < 0.9)
        }
        13 => inside((u.abs() < 0.85 && (v - 0.6).abs() < 0.2) || ((u + 0.65).abs() < 0.2 && v.abs() < 0.85)),
        _ => 0.0,
    }
}

/// Label `i` lives in grid cell `i` (row-major); cells 14 and 15 stay empty.
fn render(spec: &SiteSpec, present: &[bool; N_LABELS], demo: &Demographics, rng: &mut Rng) -> RawImage {
    let r = &spec.render;
    let (h, w) = spec.canvas_dims();
    let (ch, cw) = (h as f32 / 4.0, w as f32 / 4.0);
    let contrast = 1.0 - r.age_contrast * demo.age_decade as f32 / (N_AGE_DECADES - 1) as f32;
    let brightness = r.background_level + r.sex_brightness * demo.sex as f32;
    let freq = r.texture_frequency + r.race_texture * demo.race as f32;
    let phase = rng.random::<f32>() * 2.0 * PI;
    let angle = r.texture_angle_deg.to_radians();
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut data: Vec<f32> = (0..h * w)
        .map(|k| {
            let (y, x) = ((k / w) as f32 / h as f32, (k % w) as f32 / w as f32);
            brightness + r.texture_amplitude * (2.0 * PI * freq * (x * ca + y * sa) + phase).sin()
        })
        .collect();
    for label in (0..N_LABELS).filter(|&i| present[i]) {
        let (gy, gx) = ((label / 4) as f32, (label % 4) as f32);
        let cy = (gy + 0.5) * ch + (rng.random::<f32>() * 2.0 - 1.0) * r.position_jitter * ch;
        let cx = (gx + 0.5) * cw + (rng.random::<f32>() * 2.0 - 1.0) * r.position_jitter * cw;
        let (lo, hi) = r.intensity_range;
        let amp = contrast * (lo + (hi - lo) * rng.random::<f32>());
        let (hy, hx) = (ch / 2.0, cw / 2.0);
        let y0 = (cy - hy).floor().max(0.0) as usize;
        let y1 = ((cy + hy).ceil() as usize).min(h);
        let x0 = (cx - hx).floor().max(0.0) as usize;
        let x1 = ((cx + hx).ceil() as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let v = (y as f32 + 0.5 - cy) / hy;
                let u = (x as f32 + 0.5 - cx) / hx;
                data[y * w + x] += amp * motif(label, u, v);
            }
        }
    }
    for v in data.iter_mut() {
        *v = (*v + r.noise_std * normal(rng) as f32).clamp(0.0, 1.0);
    }
    RawImage { height: h, width: w, data }
}

fn record_states(present: &[bool; N_LABELS], spec: &SiteSpec, rng: &mut Rng) -> [LabelState; N_LABELS] {
    std::array::from_fn(|i| {
        if present[i] {
            if spec.uncertain_rate > 0.0 && rng.random_bool(spec.uncertain_rate) {
                LabelState::Uncertain
            } else {
                LabelState::Present
            }
        } else if spec.not_mentioned_rate > 0.0 && rng.random_bool(spec.not_mentioned_rate) {
            LabelState::NotMentioned
        } else {
            LabelState::Absent
        }
    })
}

struct Draft {
    patient_id: u64,
    pixels: Vec<f32>,
    label_states: [LabelState; N_LABELS],
    demographics: Demographics,
}

fn generate_patient(spec: &SiteSpec, thresholds: &[f64; N_LABELS], seed: u64, patient: u64) -> Result<Vec<Draft>> {
    let mut rng = rng_from_seed(derive_seed(seed, &[stream::DATA, patient]));
    let demographics = Demographics {
        age_decade: pick_weighted(&mut rng, &spec.age_weights) as u8,
        sex: rng.random_bool(spec.female_fraction) as u8,
        race: pick_weighted(&mut rng, &spec.race_weights) as u8,
    };
    let (lo, hi) = spec.images_per_patient;
    let n = rng.random_range(lo..=hi);
    (0..n)
        .map(|_| {
            let present = sample_presence(spec, thresholds, &mut rng);
            let label_states = record_states(&present, spec, &mut rng);
            let raw = render(spec, &present, &demographics, &mut rng);
            Ok(Draft { patient_id: patient, pixels: preprocess(&raw, spec.image_size)?, label_states, demographics })
        })
        .collect()
}

/// Deterministic in `(spec, seed)`; patients are generated in parallel from
/// per-patient seeds and concatenated in patient order.
pub fn generate_site(spec: &SiteSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let th = thresholds(spec);
    let per_patient: Vec<Vec<Draft>> =
        (0..spec.n_patients as u64).into_par_iter().map(|p| generate_patient(spec, &th, seed, p)).collect::<Result<_>>()?;
    let mut records: Vec<ImageRecord> = per_patient
        .into_iter()
        .flatten()
        .enumerate()
        .map(|(id, d)| ImageRecord {
            id: id as u64,
            patient_id: d.patient_id,
            pixels: d.pixels,
            label_states: d.label_states,
            demographics: d.demographics,
            provenance: Provenance::Real,
        })
        .collect();
    if let Some(cap) = spec.max_images {
        records.truncate(cap);
    }
    Ok(Dataset { image_size: spec.image_size, records })
}
