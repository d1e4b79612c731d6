//! Online geometric augmentation by inverse-mapped bilinear sampling.

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::Rng;

/// Ranges are half-widths of symmetric intervals; flips fire with
/// probability one half.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub hflip: bool,
    pub vflip: bool,
    pub rotate_deg: f64,
    pub resize_frac: f64,
    /// Fraction of the image width.
    pub translate_frac: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self { hflip: true, vflip: true, rotate_deg: 60.0, resize_frac: 0.10, translate_frac: 12.0 / 256.0 }
    }
}

impl AugmentSpec {
    pub fn none() -> Self {
        Self { hflip: false, vflip: false, rotate_deg: 0.0, resize_frac: 0.0, translate_frac: 0.0 }
    }

    /// Label position is meaningful in the toy corpora, so flips and large
    /// rotations are off.
    pub fn desk() -> Self {
        Self { hflip: false, vflip: false, rotate_deg: 5.0, resize_frac: 0.05, translate_frac: 12.0 / 256.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(self.rotate_deg) || !ok(self.resize_frac) || !ok(self.translate_frac) || self.resize_frac >= 1.0 {
            return Err(invalid("augmentation ranges must be finite, non-negative, with resize below 1"));
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        *self == Self::none()
    }
}

/// One drawn transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    pub angle_rad: f64,
    pub scale: f64,
    pub shift: (f64, f64),
}

impl AugmentDraw {
    pub fn draw(spec: &AugmentSpec, rng: &mut Rng) -> Self {
        let mut sym = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let angle_rad = sym(spec.rotate_deg).to_radians();
        let scale = 1.0 + sym(spec.resize_frac);
        let shift = (sym(spec.translate_frac), sym(spec.translate_frac));
        let hflip = spec.hflip && rng.random_bool(0.5);
        let vflip = spec.vflip && rng.random_bool(0.5);
        Self { hflip, vflip, angle_rad, scale, shift }
    }

    /// Output pixel `(y, x)` samples the input at the inverse-mapped location.
    pub fn apply(&self, pixels: &[f32], size: usize) -> Vec<f32> {
        let n = size as f64;
        let c = (n - 1.0) / 2.0;
        let (sin, cos) = self.angle_rad.sin_cos();
        let mut out = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let mut u = x as f64 - c - self.shift.0 * n;
                let mut v = y as f64 - c - self.shift.1 * n;
                let (ru, rv) = ((cos * u + sin * v) / self.scale, (-sin * u + cos * v) / self.scale);
                u = if self.hflip { -ru } else { ru };
                v = if self.vflip { -rv } else { rv };
                out.push(bilinear_zero(pixels, size, v + c, u + c).clamp(0.0, 1.0));
            }
        }
        out
    }
}

fn bilinear_zero(p: &[f32], n: usize, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
    let at = |yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= n as f64 || xx >= n as f64 {
            0.0
        } else {
            p[yy as usize * n + xx as usize]
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
    let bot = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Draws and applies one transform. An identity spec returns the input.
pub fn augment(pixels: &[f32], size: usize, spec: &AugmentSpec, rng: &mut Rng) -> Vec<f32> {
    if spec.is_identity() {
        return pixels.to_vec();
    }
    AugmentDraw::draw(spec, rng).apply(pixels, size)
}

pub fn hflip(pixels: &[f32], size: usize) -> Vec<f32> {
    pixels.chunks(size).flat_map(|row| row.iter().rev().copied()).collect()
}
