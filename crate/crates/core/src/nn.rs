//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Activations are single-sample [`FeatureMap`]s; batching is done by the
//! callers, which differentiate samples independently and reduce gradients
//! in a fixed order.

use crate::params::{Gradients, ModelParams, ParamId};
use crate::rng::Rng;
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache<F> {
    col: Vec<F>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Conv2d {
    /// Declares a square convolution with "same" padding. Weights are drawn
    /// from N(0, gain²/fan_in).
    #[allow(clippy::too_many_arguments)]
    pub fn declare<F: Scalar>(
        params: &mut ModelParams<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let weight = params.add_normal(format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], gain / fan_in.sqrt(), rng);
        let bias = params.add_zeros(format!("{name}.bias"), &[out_ch]);
        Self { weight, bias, in_ch, out_ch, kernel, stride, padding: kernel / 2 }
    }

    pub fn param_count(in_ch: usize, out_ch: usize, kernel: usize) -> usize {
        out_ch * in_ch * kernel * kernel + out_ch
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn im2col<F: Scalar>(&self, x: &FeatureMap<F>, oh: usize, ow: usize) -> Vec<F> {
        let k = self.kernel;
        let p = oh * ow;
        let mut col = vec![F::zero(); self.in_ch * k * k * p];
        let (h, w) = (x.height as isize, x.width as isize);
        let pad = self.padding as isize;
        let s = self.stride as isize;
        for ci in 0..self.in_ch {
            let src = &x.data[ci * x.plane()..(ci + 1) * x.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * p;
                    let dst = &mut col[row..row + p];
                    if self.stride == 1 {
                        let (lo, hi) = valid_span(kx, self.padding, x.width, ow);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as isize + ky as isize - pad;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            let off = (iy * w) as usize + lo + kx - self.padding;
                            dst[oy * ow + lo..oy * ow + hi].copy_from_slice(&src[off..off + (hi - lo)]);
                        }
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - pad;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let srow = &src[(iy * w) as usize..((iy + 1) * w) as usize];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - pad;
                            if ix >= 0 && ix < w {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<F: Scalar>(&self, col: &[F], h: usize, w: usize, oh: usize, ow: usize) -> FeatureMap<F> {
        let k = self.kernel;
        let p = oh * ow;
        let mut out = FeatureMap::zeros(self.in_ch, h, w);
        let pad = self.padding as isize;
        let s = self.stride as isize;
        let (hi, wi) = (h as isize, w as isize);
        for ci in 0..self.in_ch {
            let dst = &mut out.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * p;
                    let src = &col[row..row + p];
                    if self.stride == 1 {
                        let (x0, x1) = valid_span(kx, self.padding, w, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as isize + ky as isize - pad;
                            if iy < 0 || iy >= hi {
                                continue;
                            }
                            let off = (iy as usize) * w + x0 + kx - self.padding;
                            for (d, &v) in dst[off..off + (x1 - x0)].iter_mut().zip(&src[oy * ow + x0..oy * ow + x1]) {
                                *d += v;
                            }
                        }
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - pad;
                        if iy < 0 || iy >= hi {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = ox as isize * s + kx as isize - pad;
                            if ix >= 0 && ix < wi {
                                dst[(iy * wi + ix) as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward<F: Scalar>(&self, params: &ModelParams<F>, x: &FeatureMap<F>) -> (FeatureMap<F>, ConvCache<F>) {
        assert_eq!(x.channels, self.in_ch, "conv input channels");
        let (oh, ow) = self.out_dims(x.height, x.width);
        let p = oh * ow;
        let kk = self.in_ch * self.kernel * self.kernel;
        let col = self.im2col(x, oh, ow);
        let bias = params.get(self.bias);
        let mut out = FeatureMap::zeros(self.out_ch, oh, ow);
        for (co, b) in bias.iter().enumerate() {
            out.data[co * p..(co + 1) * p].iter_mut().for_each(|v| *v = *b);
        }
        gemm(
            F::one(),
            MatRef::row_major(params.get(self.weight), self.out_ch, kk),
            MatRef::row_major(&col, kk, p),
            F::one(),
            &mut out.data,
        );
        (out, ConvCache { col, in_h: x.height, in_w: x.width, out_h: oh, out_w: ow })
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input` is set.
    pub fn backward<F: Scalar>(
        &self,
        params: &ModelParams<F>,
        cache: &ConvCache<F>,
        gout: &FeatureMap<F>,
        grads: &mut Gradients<F>,
        need_input: bool,
    ) -> Option<FeatureMap<F>> {
        let p = cache.out_h * cache.out_w;
        let kk = self.in_ch * self.kernel * self.kernel;
        debug_assert_eq!(gout.data.len(), self.out_ch * p);
        let gb = grads.get_mut(self.bias);
        for (co, g) in gb.iter_mut().enumerate() {
            *g += gout.data[co * p..(co + 1) * p].iter().copied().sum::<F>();
        }
        gemm(
            F::one(),
            MatRef::row_major(&gout.data, self.out_ch, p),
            MatRef::row_major(&cache.col, kk, p).t(),
            F::one(),
            grads.get_mut(self.weight),
        );
        if !need_input {
            return None;
        }
        let mut gcol = vec![F::zero(); kk * p];
        gemm(
            F::one(),
            MatRef::row_major(params.get(self.weight), self.out_ch, kk).t(),
            MatRef::row_major(&gout.data, self.out_ch, p),
            F::zero(),
            &mut gcol,
        );
        Some(self.col2im(&gcol, cache.in_h, cache.in_w, cache.out_h, cache.out_w))
    }
}

/// Output columns `[lo, hi)` whose input column `ox + kx - pad` lies inside `[0, w)` (stride 1).
#[inline]
fn valid_span(kx: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(ow);
    (lo, hi)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn declare<F: Scalar>(
        params: &mut ModelParams<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let weight = params.add_normal(format!("{name}.weight"), &[out_dim, in_dim], gain / (in_dim as f64).sqrt(), rng);
        let bias = bias.then(|| params.add_zeros(format!("{name}.bias"), &[out_dim]));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<F: Scalar>(&self, params: &ModelParams<F>, x: &[F]) -> Vec<F> {
        assert_eq!(x.len(), self.in_dim, "linear input width");
        let w = params.get(self.weight);
        (0..self.out_dim)
            .map(|o| {
                let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
                let b = self.bias.map_or(F::zero(), |b| params.get(b)[o]);
                row.iter().zip(x).fold(b, |acc, (&a, &v)| acc + a * v)
            })
            .collect()
    }

    pub fn backward<F: Scalar>(&self, params: &ModelParams<F>, x: &[F], gout: &[F], grads: &mut Gradients<F>) -> Vec<F> {
        if let Some(b) = self.bias {
            for (g, &d) in grads.get_mut(b).iter_mut().zip(gout) {
                *g += d;
            }
        }
        let gw = grads.get_mut(self.weight);
        for (o, &d) in gout.iter().enumerate() {
            if d == F::zero() {
                continue;
            }
            for (g, &v) in gw[o * self.in_dim..(o + 1) * self.in_dim].iter_mut().zip(x) {
                *g += d * v;
            }
        }
        let w = params.get(self.weight);
        let mut gx = vec![F::zero(); self.in_dim];
        for (o, &d) in gout.iter().enumerate() {
            for (g, &a) in gx.iter_mut().zip(&w[o * self.in_dim..(o + 1) * self.in_dim]) {
                *g += a * d;
            }
        }
        gx
    }
}

#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Subnormals slow float arithmetic by an order of magnitude on common
/// CPUs; strongly negative SiLU inputs produce them in both directions.
#[inline]
fn flush<F: Scalar>(v: F) -> F {
    if v.is_subnormal() {
        F::zero()
    } else {
        v
    }
}

#[inline]
pub fn silu<F: Scalar>(x: F) -> F {
    flush(x * sigmoid(x))
}

#[inline]
pub fn silu_grad<F: Scalar>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

pub fn silu_map<F: Scalar>(x: &FeatureMap<F>) -> FeatureMap<F> {
    x.map(silu)
}

pub fn silu_vec<F: Scalar>(x: &[F]) -> Vec<F> {
    x.iter().map(|&v| silu(v)).collect()
}

/// `g ⊙ silu'(pre)`, in place on `g`.
pub fn silu_backward<F: Scalar>(pre: &[F], g: &mut [F]) {
    for (d, &x) in g.iter_mut().zip(pre) {
        *d = flush(*d * silu_grad(x));
    }
}

pub fn upsample2x<F: Scalar>(x: &FeatureMap<F>) -> FeatureMap<F> {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = FeatureMap::zeros(x.channels, h, w);
    for c in 0..x.channels {
        for y in 0..h {
            for xx in 0..w {
                out.data[(c * h + y) * w + xx] = x.data[(c * x.height + y / 2) * x.width + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<F: Scalar>(g: &FeatureMap<F>) -> FeatureMap<F> {
    let (h, w) = (g.height / 2, g.width / 2);
    let mut out = FeatureMap::zeros(g.channels, h, w);
    for c in 0..g.channels {
        for y in 0..g.height {
            for x in 0..g.width {
                out.data[(c * h + y / 2) * w + x / 2] += g.data[(c * g.height + y) * g.width + x];
            }
        }
    }
    out
}

pub fn concat_channels<F: Scalar>(a: &FeatureMap<F>, b: &FeatureMap<F>) -> FeatureMap<F> {
    assert!(a.height == b.height && a.width == b.width, "concat spatial mismatch");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    FeatureMap { channels: a.channels + b.channels, height: a.height, width: a.width, data }
}

pub fn split_channels<F: Scalar>(g: &FeatureMap<F>, first: usize) -> (FeatureMap<F>, FeatureMap<F>) {
    let cut = first * g.plane();
    (
        FeatureMap { channels: first, height: g.height, width: g.width, data: g.data[..cut].to_vec() },
        FeatureMap { channels: g.channels - first, height: g.height, width: g.width, data: g.data[cut..].to_vec() },
    )
}

pub fn global_avg_pool<F: Scalar>(x: &FeatureMap<F>) -> Vec<F> {
    let n = F::lit(x.plane() as f64);
    x.data.chunks(x.plane()).map(|c| c.iter().copied().sum::<F>() / n).collect()
}

pub fn global_avg_pool_backward<F: Scalar>(g: &[F], channels: usize, h: usize, w: usize) -> FeatureMap<F> {
    let n = F::lit((h * w) as f64);
    let mut out = FeatureMap::zeros(channels, h, w);
    for (c, chunk) in out.data.chunks_mut(h * w).enumerate() {
        chunk.iter_mut().for_each(|v| *v = g[c] / n);
    }
    out
}

/// Transformer-style sinusoidal embedding: `[sin(t·f_i), cos(t·f_i)]` with
/// `f_i = 10000^(-i/half)`.
pub fn sinusoidal_embedding<F: Scalar>(t: f64, dim: usize) -> Vec<F> {
    let half = dim / 2;
    let mut out = vec![F::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = F::lit((t * freq).sin());
        out[half + i] = F::lit((t * freq).cos());
    }
    out
}
