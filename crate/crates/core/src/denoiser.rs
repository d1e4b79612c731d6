//! Conditional noise-prediction network.
//!
//! A small residual encoder–decoder with concatenated skip connections. The
//! timestep enters through a sinusoidal embedding and a two-layer MLP; the
//! condition is a sum of learned rows (one per present pathology, one for the
//! age decade, one for sex, one for race), replaced wholesale by a separate
//! learned null row when the condition is dropped. The sum of both embeddings
//! is projected into every residual block as a per-channel bias.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{
    concat_channels, silu_backward, silu_map, silu_vec, sinusoidal_embedding, split_channels, upsample2x,
    upsample2x_backward, ConvCache, Conv2d, Linear,
};
use crate::params::{read_checkpoint, write_checkpoint, Gradients, ModelParams, ParamId};
use crate::rng::{derive_seed, rng_from_seed, stream, Rng};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Image};

pub const N_PATHOLOGIES: usize = 14;
pub const N_AGE_DECADES: usize = 10;
pub const N_SEXES: usize = 2;
pub const N_RACES: usize = 5;
/// 14 pathologies, 1 age, 2 sexes, 5 races.
pub const N_CONDITION_SLOTS: usize = N_PATHOLOGIES + 1 + N_SEXES + N_RACES;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SSDM1";

/// Conditioning signal for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionVector {
    pub pathologies: [bool; N_PATHOLOGIES],
    pub age_decade: u8,
    pub sex: u8,
    pub race: u8,
    pub is_null: bool,
}

impl ConditionVector {
    pub fn new(pathologies: [bool; N_PATHOLOGIES], age_decade: u8, sex: u8, race: u8) -> Result<Self> {
        let c = Self { pathologies, age_decade, sex, race, is_null: false };
        c.validate()?;
        Ok(c)
    }

    /// The unconditional (dropped) condition.
    pub fn null() -> Self {
        Self { pathologies: [false; N_PATHOLOGIES], age_decade: 0, sex: 0, race: 0, is_null: true }
    }

    pub fn as_null(&self) -> Self {
        Self { is_null: true, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.age_decade as usize >= N_AGE_DECADES {
            return Err(invalid(format!("age decade {} outside 0..=9", self.age_decade)));
        }
        if self.sex as usize >= N_SEXES || self.race as usize >= N_RACES {
            return Err(invalid("sex or race index out of range"));
        }
        Ok(())
    }

    /// The 22-slot encoding; the age slot holds the decade index.
    pub fn slots(&self) -> [f32; N_CONDITION_SLOTS] {
        let mut s = [0.0; N_CONDITION_SLOTS];
        for (i, &p) in self.pathologies.iter().enumerate() {
            s[i] = p as u8 as f32;
        }
        s[N_PATHOLOGIES] = self.age_decade as f32;
        s[N_PATHOLOGIES + 1 + self.sex as usize] = 1.0;
        s[N_PATHOLOGIES + 1 + N_SEXES + self.race as usize] = 1.0;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Width of the sinusoidal timestep features.
    pub time_embed_dim: usize,
    /// Width of the joint time/condition embedding.
    pub cond_embed_dim: usize,
    pub guidance_drop_rate: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 2],
            time_embed_dim: 32,
            cond_embed_dim: 128,
            guidance_drop_rate: 0.1,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_multipliers.len();
        if levels == 0 || self.channel_multipliers.contains(&0) {
            return Err(invalid("channel multipliers must be non-empty and positive"));
        }
        if self.image_size == 0 || self.base_channels == 0 || self.cond_embed_dim == 0 {
            return Err(invalid("image size, channels and embedding width must be positive"));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(invalid("time embedding width must be even and at least 2"));
        }
        let factor = 1usize << (levels - 1);
        if !self.image_size.is_multiple_of(factor) {
            return Err(invalid(format!("image size {} not divisible by {}", self.image_size, factor)));
        }
        if !(0.0..1.0).contains(&self.guidance_drop_rate) {
            return Err(invalid("guidance drop rate must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_multipliers.iter().map(|m| m * self.base_channels).collect()
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    emb: Linear,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct ResTrace<F> {
    x: FeatureMap<F>,
    c1: ConvCache<F>,
    h: FeatureMap<F>,
    c2: ConvCache<F>,
    skip: Option<ConvCache<F>>,
}

impl ResBlock {
    fn declare<F: Scalar>(p: &mut ModelParams<F>, name: &str, cin: usize, cout: usize, emb: usize, rng: &mut Rng) -> Self {
        Self {
            conv1: Conv2d::declare(p, &format!("{name}.conv1"), cin, cout, 3, 1, 1.0, rng),
            emb: Linear::declare(p, &format!("{name}.emb"), emb, cout, true, 1.0, rng),
            conv2: Conv2d::declare(p, &format!("{name}.conv2"), cout, cout, 3, 1, 0.5, rng),
            skip: (cin != cout).then(|| Conv2d::declare(p, &format!("{name}.skip"), cin, cout, 1, 1, 1.0, rng)),
        }
    }

    fn forward<F: Scalar>(&self, p: &ModelParams<F>, x: &FeatureMap<F>, emb_act: &[F]) -> (FeatureMap<F>, ResTrace<F>) {
        let (mut h, c1) = self.conv1.forward(p, &silu_map(x));
        let e = self.emb.forward(p, emb_act);
        let plane = h.plane();
        for (c, &b) in e.iter().enumerate() {
            h.data[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += b);
        }
        let (mut out, c2) = self.conv2.forward(p, &silu_map(&h));
        let skip = match &self.skip {
            Some(s) => {
                let (sx, sc) = s.forward(p, x);
                out.add_assign(&sx);
                Some(sc)
            }
            None => {
                out.add_assign(x);
                None
            }
        };
        (out, ResTrace { x: x.clone(), c1, h, c2, skip })
    }

    /// Returns the input gradient; adds the embedding gradient into `g_emb`.
    fn backward<F: Scalar>(
        &self,
        p: &ModelParams<F>,
        tr: &ResTrace<F>,
        gout: &FeatureMap<F>,
        emb_act: &[F],
        g_emb: &mut [F],
        grads: &mut Gradients<F>,
    ) -> FeatureMap<F> {
        let mut g_h = self.conv2.backward(p, &tr.c2, gout, grads, true).expect("input grad");
        silu_backward(&tr.h.data, &mut g_h.data);
        let plane = g_h.plane();
        let g_e: Vec<F> = g_h.data.chunks(plane).map(|c| c.iter().copied().sum()).collect();
        for (a, b) in g_emb.iter_mut().zip(self.emb.backward(p, emb_act, &g_e, grads)) {
            *a += b;
        }
        let mut g_x = self.conv1.backward(p, &tr.c1, &g_h, grads, true).expect("input grad");
        silu_backward(&tr.x.data, &mut g_x.data);
        match (&self.skip, &tr.skip) {
            (Some(s), Some(sc)) => g_x.add_assign(&s.backward(p, sc, gout, grads, true).expect("input grad")),
            _ => g_x.add_assign(gout),
        }
        g_x
    }
}

#[derive(Debug, Clone)]
struct Arch {
    time1: Linear,
    time2: Linear,
    cond_pathology: ParamId,
    cond_age: ParamId,
    cond_sex: ParamId,
    cond_race: ParamId,
    cond_null: ParamId,
    conv_in: Conv2d,
    /// Learned per-position offset after the input convolution, so motifs
    /// can be placed at absolute locations.
    pos: ParamId,
    enc: Vec<ResBlock>,
    down: Vec<Conv2d>,
    mid: ResBlock,
    /// Deepest level first.
    dec: Vec<ResBlock>,
    conv_out: Conv2d,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct DenoiserTrace<F> {
    sin: Vec<F>,
    t_pre: Vec<F>,
    t_act: Vec<F>,
    emb: Vec<F>,
    emb_act: Vec<F>,
    cond: ConditionVector,
    conv_in: ConvCache<F>,
    enc: Vec<ResTrace<F>>,
    down: Vec<ConvCache<F>>,
    mid: ResTrace<F>,
    dec: Vec<(ResTrace<F>, usize)>,
    out_pre: FeatureMap<F>,
    conv_out: ConvCache<F>,
}

/// Network definition plus its parameters.
#[derive(Debug, Clone)]
pub struct Denoiser<F> {
    pub config: DenoiserConfig,
    pub params: ModelParams<F>,
    arch: Arch,
}

fn declare<F: Scalar>(config: &DenoiserConfig, rng: &mut Rng) -> (Arch, ModelParams<F>) {
    let mut p = ModelParams::new();
    let d = config.cond_embed_dim;
    let chans = config.level_channels();
    let levels = chans.len();
    let time1 = Linear::declare(&mut p, "time.lin1", config.time_embed_dim, d, true, 1.0, rng);
    let time2 = Linear::declare(&mut p, "time.lin2", d, d, true, 1.0, rng);
    let cond_pathology = p.add_normal("cond.pathology", &[N_PATHOLOGIES, d], 0.3, rng);
    let cond_age = p.add_normal("cond.age", &[N_AGE_DECADES, d], 0.3, rng);
    let cond_sex = p.add_normal("cond.sex", &[N_SEXES, d], 0.3, rng);
    let cond_race = p.add_normal("cond.race", &[N_RACES, d], 0.3, rng);
    let cond_null = p.add_normal("cond.null", &[1, d], 0.3, rng);
    let conv_in = Conv2d::declare(&mut p, "conv_in", 1, chans[0], 3, 1, 1.0, rng);
    let pos = p.add_normal("pos_embed", &[chans[0], config.image_size, config.image_size], 0.1, rng);
    let mut enc = Vec::new();
    let mut down = Vec::new();
    let mut prev = chans[0];
    for (l, &c) in chans.iter().enumerate() {
        enc.push(ResBlock::declare(&mut p, &format!("enc{l}"), prev, c, d, rng));
        if l + 1 < levels {
            down.push(Conv2d::declare(&mut p, &format!("down{l}"), c, c, 3, 2, 1.0, rng));
        }
        prev = c;
    }
    let mid = ResBlock::declare(&mut p, "mid", prev, prev, d, rng);
    let mut dec = Vec::new();
    for l in (0..levels).rev() {
        dec.push(ResBlock::declare(&mut p, &format!("dec{l}"), prev + chans[l], chans[l], d, rng));
        prev = chans[l];
    }
    let conv_out = Conv2d::declare(&mut p, "conv_out", chans[0], 1, 3, 1, 0.1, rng);
    let arch = Arch { time1, time2, cond_pathology, cond_age, cond_sex, cond_race, cond_null, conv_in, pos, enc, down, mid, dec, conv_out };
    (arch, p)
}

impl<F: Scalar> Denoiser<F> {
    /// Deterministic initialisation from `seed`.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(derive_seed(seed, &[stream::INIT]));
        let (arch, params) = declare(&config, &mut rng);
        Ok(Self { config, params, arch })
    }

    /// Rebuilds a model around externally supplied parameters (e.g. from a checkpoint).
    pub fn from_params(config: DenoiserConfig, params: ModelParams<F>) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        if !model.params.same_layout(&params) {
            return Err(Error::Format("checkpoint parameters do not match the configured architecture".into()));
        }
        model.params = params;
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn cond_embedding(&self, cond: &ConditionVector) -> Vec<F> {
        let d = self.config.cond_embed_dim;
        let p = &self.params;
        if cond.is_null {
            return p.get(self.arch.cond_null).to_vec();
        }
        let mut e = vec![F::zero(); d];
        let mut add = |id: ParamId, row: usize| {
            for (a, &b) in e.iter_mut().zip(&p.get(id)[row * d..(row + 1) * d]) {
                *a += b;
            }
        };
        for (i, _) in cond.pathologies.iter().enumerate().filter(|(_, &on)| on) {
            add(self.arch.cond_pathology, i);
        }
        add(self.arch.cond_age, cond.age_decade as usize);
        add(self.arch.cond_sex, cond.sex as usize);
        add(self.arch.cond_race, cond.race as usize);
        e
    }

    fn check_input(&self, x: &Image<F>) -> Result<()> {
        let s = self.config.image_size;
        if x.channels != 1 || x.height != s || x.width != s {
            return Err(invalid(format!(
                "expected a 1x{s}x{s} image, got {}x{}x{}",
                x.channels, x.height, x.width
            )));
        }
        Ok(())
    }

    /// Predicts the noise in `x_t`.
    pub fn forward(&self, x: &Image<F>, t: usize, cond: &ConditionVector) -> Result<Image<F>> {
        self.forward_trace(x, t, cond).map(|(y, _)| y)
    }

    pub fn forward_trace(&self, x: &Image<F>, t: usize, cond: &ConditionVector) -> Result<(Image<F>, DenoiserTrace<F>)> {
        self.check_input(x)?;
        if !cond.is_null {
            cond.validate()?;
        }
        let a = &self.arch;
        let p = &self.params;
        let sin = sinusoidal_embedding::<F>(t as f64, self.config.time_embed_dim);
        let t_pre = a.time1.forward(p, &sin);
        let t_act = silu_vec(&t_pre);
        let mut emb = a.time2.forward(p, &t_act);
        for (e, c) in emb.iter_mut().zip(self.cond_embedding(cond)) {
            *e += c;
        }
        let emb_act = silu_vec(&emb);

        let (mut h, conv_in) = a.conv_in.forward(p, x);
        for (v, &e) in h.data.iter_mut().zip(p.get(a.pos)) {
            *v += e;
        }
        let levels = a.enc.len();
        let mut skips = Vec::with_capacity(levels);
        let mut enc = Vec::with_capacity(levels);
        let mut down = Vec::with_capacity(levels);
        for l in 0..levels {
            let (o, tr) = a.enc[l].forward(p, &h, &emb_act);
            enc.push(tr);
            skips.push(o.clone());
            h = o;
            if l + 1 < levels {
                let (o, c) = a.down[l].forward(p, &h);
                down.push(c);
                h = o;
            }
        }
        let (o, mid) = a.mid.forward(p, &h, &emb_act);
        h = o;
        let mut dec = Vec::with_capacity(levels);
        for (i, l) in (0..levels).rev().enumerate() {
            let ch = h.channels;
            let (o, tr) = a.dec[i].forward(p, &concat_channels(&h, &skips[l]), &emb_act);
            dec.push((tr, ch));
            h = if l > 0 { upsample2x(&o) } else { o };
        }
        let (out, conv_out) = a.conv_out.forward(p, &silu_map(&h));
        let trace = DenoiserTrace { sin, t_pre, t_act, emb, emb_act, cond: *cond, conv_in, enc, down, mid, dec, out_pre: h, conv_out };
        Ok((out, trace))
    }

    /// Accumulates parameter gradients of `<gout, f(x)>` into `grads`.
    pub fn backward(&self, trace: &DenoiserTrace<F>, gout: &Image<F>, grads: &mut Gradients<F>) -> Result<()> {
        if gout.data.len() != self.config.image_size * self.config.image_size {
            return Err(invalid("output gradient has the wrong shape"));
        }
        let a = &self.arch;
        let p = &self.params;
        let d = self.config.cond_embed_dim;
        let mut g_emb_act = vec![F::zero(); d];
        let ea = &trace.emb_act;

        let mut g = a.conv_out.backward(p, &trace.conv_out, gout, grads, true).expect("input grad");
        silu_backward(&trace.out_pre.data, &mut g.data);
        let levels = a.enc.len();
        let mut g_skips: Vec<Option<FeatureMap<F>>> = vec![None; levels];
        for l in 0..levels {
            let i = levels - 1 - l;
            if l > 0 {
                g = upsample2x_backward(&g);
            }
            let (tr, ch) = &trace.dec[i];
            let g_cat = a.dec[i].backward(p, tr, &g, ea, &mut g_emb_act, grads);
            let (gh, gs) = split_channels(&g_cat, *ch);
            g = gh;
            g_skips[l] = Some(gs);
        }
        g = a.mid.backward(p, &trace.mid, &g, ea, &mut g_emb_act, grads);
        for l in (0..levels).rev() {
            if l + 1 < levels {
                g = a.down[l].backward(p, &trace.down[l], &g, grads, true).expect("input grad");
            }
            g.add_assign(g_skips[l].as_ref().expect("skip grad"));
            g = a.enc[l].backward(p, &trace.enc[l], &g, ea, &mut g_emb_act, grads);
        }
        for (gp, &gv) in grads.get_mut(a.pos).iter_mut().zip(&g.data) {
            *gp += gv;
        }
        a.conv_in.backward(p, &trace.conv_in, &g, grads, false);

        let mut g_emb = g_emb_act;
        silu_backward(&trace.emb, &mut g_emb);
        let mut g_t = a.time2.backward(p, &trace.t_act, &g_emb, grads);
        silu_backward(&trace.t_pre, &mut g_t);
        a.time1.backward(p, &trace.sin, &g_t, grads);

        let mut add_row = |id: ParamId, row: usize| {
            for (a, &b) in grads.get_mut(id)[row * d..(row + 1) * d].iter_mut().zip(&g_emb) {
                *a += b;
            }
        };
        let c = &trace.cond;
        if c.is_null {
            add_row(a.cond_null, 0);
        } else {
            for (i, _) in c.pathologies.iter().enumerate().filter(|(_, &on)| on) {
                add_row(a.cond_pathology, i);
            }
            add_row(a.cond_age, c.age_decade as usize);
            add_row(a.cond_sex, c.sex as usize);
            add_row(a.cond_race, c.race as usize);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_string(&self.config)?;
        write_checkpoint(BufWriter::new(File::create(path)?), CHECKPOINT_MAGIC, &cfg, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (cfg, params) = read_checkpoint(BufReader::new(File::open(path)?), CHECKPOINT_MAGIC)?;
        let config: DenoiserConfig = serde_json::from_str(&cfg)?;
        Self::from_params(config, params)
    }
}

/// Stateful wrapper enforcing forward-before-backward at runtime.
pub struct DenoiserTape<'a, F: Scalar> {
    model: &'a Denoiser<F>,
    trace: Option<DenoiserTrace<F>>,
}

impl<'a, F: Scalar> DenoiserTape<'a, F> {
    pub fn new(model: &'a Denoiser<F>) -> Self {
        Self { model, trace: None }
    }

    pub fn forward(&mut self, x: &Image<F>, t: usize, cond: &ConditionVector) -> Result<Image<F>> {
        let (y, tr) = self.model.forward_trace(x, t, cond)?;
        self.trace = Some(tr);
        Ok(y)
    }

    /// Consumes the recorded forward pass.
    pub fn backward(&mut self, gout: &Image<F>, grads: &mut Gradients<F>) -> Result<()> {
        let tr = self.trace.take().ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        self.model.backward(&tr, gout, grads)
    }
}
