//! Pad-to-square, bilinear resize and 256-bin histogram equalization.

use crate::error::{invalid, Result};

/// Row-major grayscale grid of arbitrary shape.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("empty image"));
        }
        if data.len() != height * width {
            return Err(invalid(format!("{} values for a {height}x{width} grid", data.len())));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Zero-pads the short side symmetrically (extra row or column goes last).
pub fn pad_to_square(img: &RawImage) -> RawImage {
    let side = img.height.max(img.width);
    let top = (side - img.height) / 2;
    let left = (side - img.width) / 2;
    let mut data = vec![0.0; side * side];
    for y in 0..img.height {
        let dst = (y + top) * side + left;
        data[dst..dst + img.width].copy_from_slice(&img.data[y * img.width..(y + 1) * img.width]);
    }
    RawImage { height: side, width: side, data }
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &RawImage, out_h: usize, out_w: usize) -> RawImage {
    let sy = img.height as f32 / out_h as f32;
    let sx = img.width as f32 / out_w as f32;
    let taps = |o: usize, scale: f32, n: usize| {
        let c = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f32);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f32)
    };
    let mut data = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = taps(oy, sy, img.height);
        for ox in 0..out_w {
            let (x0, x1, fx) = taps(ox, sx, img.width);
            let top = img.at(y0, x0) * (1.0 - fx) + img.at(y0, x1) * fx;
            let bot = img.at(y1, x0) * (1.0 - fx) + img.at(y1, x1) * fx;
            data.push(top * (1.0 - fy) + bot * fy);
        }
    }
    RawImage { height: out_h, width: out_w, data }
}

const BINS: usize = 256;

#[inline]
fn bin_of(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * BINS as f32) as usize).min(BINS - 1)
}

/// Maps each of 256 input bins through the normalized CDF so that the lowest
/// occupied bin lands on 0 and the highest on 1. An image occupying a single
/// bin is returned unchanged.
pub fn equalize_histogram(values: &[f32]) -> Vec<f32> {
    let mut hist = [0usize; BINS];
    for &v in values {
        hist[bin_of(v)] += 1;
    }
    let occupied = hist.iter().filter(|&&c| c > 0).count();
    if occupied <= 1 {
        return values.to_vec();
    }
    let mut cdf = [0usize; BINS];
    let mut acc = 0;
    for (c, h) in cdf.iter_mut().zip(&hist) {
        acc += h;
        *c = acc;
    }
    let cdf_min = hist.iter().copied().find(|&c| c > 0).unwrap_or(0);
    let denom = (values.len() - cdf_min) as f32;
    let lut: Vec<f32> = cdf
        .iter()
        .map(|&c| ((c.saturating_sub(cdf_min)) as f32 / denom * (BINS - 1) as f32).round() / (BINS - 1) as f32)
        .collect();
    values.iter().map(|&v| lut[bin_of(v)]).collect()
}

/// Full pipeline: pad, resize to `size`×`size`, equalize. Output is in `[0, 1]`.
pub fn preprocess(img: &RawImage, size: usize) -> Result<Vec<f32>> {
    if img.height == 0 || img.width == 0 || img.data.is_empty() {
        return Err(invalid("cannot preprocess an empty image"));
    }
    if size == 0 {
        return Err(invalid("output size must be positive"));
    }
    let sq = pad_to_square(img);
    let resized = if sq.height == size { sq } else { resize_bilinear(&sq, size, size) };
    Ok(equalize_histogram(&resized.data).into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}
