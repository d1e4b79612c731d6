use rand::seq::SliceRandom;
use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sample::pixels_to_model;
use crate::denoiser::{ConditionVector, Denoiser, DenoiserConfig};
use crate::error::{invalid, Result};
use crate::optim::{ema_update_params, LionConfig, LionState};
use crate::params::{Gradients, ModelParams};
use crate::rng::{derive_seed, rng_from_seed, stream, Rng};
use crate::scalar::Scalar;
use crate::schedule::{forward_diffuse, NoiseSchedule};
use crate::tensor::Image;
use crate::toydata::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub guidance_drop_rate: f64,
    /// 0 disables weight averaging.
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            learning_rate: 2e-4,
            weight_decay: 0.0,
            guidance_drop_rate: 0.1,
            ema_decay: 0.999,
            seed: 0,
        }
    }
}

impl DiffusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.guidance_drop_rate) {
            return Err(invalid("guidance drop rate must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(invalid("ema decay must lie in [0, 1)"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(invalid("learning rate must be positive and weight decay non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingItem<F> {
    /// Clean image in model range `[-1, 1]`.
    pub x0: Image<F>,
    pub cond: ConditionVector,
}

impl<F: Scalar> TrainingItem<F> {
    pub fn from_dataset(data: &Dataset) -> Result<Vec<Self>> {
        data.records
            .iter()
            .map(|r| Ok(Self { x0: pixels_to_model(data.image_size, &r.pixels)?, cond: r.condition() }))
            .collect()
    }
}

/// One optimizer step on the mean squared noise-prediction error. Random
/// draws (timestep, noise, condition dropout) come from `rng` in batch order,
/// per-item gradients are computed in parallel and summed in batch order.
pub fn diffusion_train_step<F: Scalar>(
    model: &mut Denoiser<F>,
    opt: &mut LionState<F>,
    batch: &[&TrainingItem<F>],
    sched: &NoiseSchedule,
    rng: &mut Rng,
    drop_rate: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid("empty training batch"));
    }
    let plane = batch[0].x0.data.len();
    let plan: Vec<(usize, Image<F>, ConditionVector)> = batch
        .iter()
        .map(|item| {
            let t = rng.random_range(0..sched.len());
            let noise = (0..plane).map(|_| F::lit(StandardNormal.sample(rng))).collect();
            let eps = Image { data: noise, ..item.x0.clone() };
            let drop = drop_rate > 0.0 && rng.random_bool(drop_rate);
            (t, eps, if drop { item.cond.as_null() } else { item.cond })
        })
        .collect();
    let scale = F::lit(2.0 / (batch.len() * plane) as f64);
    let net = &*model;
    let per_item: Vec<(f64, Gradients<F>)> = batch
        .par_iter()
        .zip(plan.par_iter())
        .map(|(item, (t, eps, cond))| {
            let xt = forward_diffuse(&item.x0, *t, eps, sched)?;
            let (pred, trace) = net.forward_trace(&xt, *t, cond)?;
            let diff: Vec<F> = pred.data.iter().zip(&eps.data).map(|(&p, &e)| p - e).collect();
            let sq: f64 = diff.iter().map(|d| d.as_f64() * d.as_f64()).sum();
            let gout = Image { data: diff.iter().map(|&d| d * scale).collect(), ..pred };
            let mut g = net.params.gradients_like();
            net.backward(&trace, &gout, &mut g)?;
            Ok((sq, g))
        })
        .collect::<Result<_>>()?;
    let mut total = net.params.gradients_like();
    let mut loss = 0.0;
    for (sq, g) in &per_item {
        loss += sq;
        total.add_assign(g);
    }
    model.params.zero_grad();
    model.params.accumulate_grads(&total);
    opt.step(&mut model.params)?;
    Ok(loss / (batch.len() * plane) as f64)
}

/// Training state: live weights, optimizer, EMA weights and loss history.
pub struct DiffusionTrainer<F: Scalar> {
    pub model: Denoiser<F>,
    pub ema: Option<ModelParams<F>>,
    pub config: DiffusionTrainConfig,
    pub losses: Vec<f64>,
    opt: LionState<F>,
    rng: Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl<F: Scalar> DiffusionTrainer<F> {
    pub fn new(model: Denoiser<F>, config: DiffusionTrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = LionState::new(&model.params, LionConfig::new(config.learning_rate, config.weight_decay));
        let ema = (config.ema_decay > 0.0).then(|| model.params.clone());
        let rng = rng_from_seed(derive_seed(config.seed, &[stream::TRAIN]));
        Ok(Self { model, ema, config, losses: Vec::new(), opt, rng, order: Vec::new(), cursor: 0 })
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.config.batch_size);
        while out.len() < self.config.batch_size {
            if self.cursor == self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// Runs `steps` optimizer steps over `data` (epoch-shuffled), calling
    /// `on_step(step, loss)` after each.
    pub fn fit(
        &mut self,
        data: &[TrainingItem<F>],
        steps: usize,
        sched: &NoiseSchedule,
        on_step: &mut dyn FnMut(usize, f64),
    ) -> Result<()> {
        if data.is_empty() {
            return Err(invalid("no training images"));
        }
        if self.order.len() != data.len() {
            self.order.clear();
            self.cursor = 0;
        }
        for _ in 0..steps {
            let idx = self.next_batch(data.len());
            let batch: Vec<&TrainingItem<F>> = idx.iter().map(|&i| &data[i]).collect();
            let loss =
                diffusion_train_step(&mut self.model, &mut self.opt, &batch, sched, &mut self.rng, self.config.guidance_drop_rate)?;
            if let Some(ema) = self.ema.as_mut() {
                ema_update_params(ema, &self.model.params, self.config.ema_decay)?;
            }
            self.losses.push(loss);
            on_step(self.losses.len(), loss);
        }
        Ok(())
    }

    /// The model to sample from: EMA weights when enabled.
    pub fn finish(self) -> Result<Denoiser<F>> {
        match self.ema {
            Some(ema) => Denoiser::from_params(self.model.config.clone(), ema),
            None => Ok(self.model),
        }
    }
}

/// Initialises a denoiser from `train.seed` and trains it on every record of
/// `data` for `train.steps` steps. Returns the (EMA) model and the losses.
pub fn train_diffusion(
    data: &Dataset,
    model_config: &DenoiserConfig,
    train: &DiffusionTrainConfig,
    sched: &NoiseSchedule,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(Denoiser<f32>, Vec<f64>)> {
    if data.image_size != model_config.image_size {
        return Err(invalid(format!(
            "dataset images are {}px but the model expects {}px",
            data.image_size, model_config.image_size
        )));
    }
    let config = DenoiserConfig { guidance_drop_rate: train.guidance_drop_rate, ..model_config.clone() };
    let items = TrainingItem::<f32>::from_dataset(data)?;
    let mut trainer = DiffusionTrainer::new(Denoiser::init(config, train.seed)?, train.clone())?;
    trainer.fit(&items, train.steps, sched, &mut on_step)?;
    let losses = std::mem::take(&mut trainer.losses);
    Ok((trainer.finish()?, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_schedule, ScheduleKind};

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 8,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            time_embed_dim: 8,
            cond_embed_dim: 16,
            guidance_drop_rate: 0.1,
        }
    }

    fn items(n: usize) -> Vec<TrainingItem<f64>> {
        (0..n)
            .map(|i| {
                let mut p = [false; 14];
                p[i % 14] = true;
                let data = (0..64).map(|k| if k % 8 == i % 8 { 0.8 } else { -0.8 }).collect();
                TrainingItem { x0: Image::from_vec(1, 8, 8, data).unwrap(), cond: ConditionVector::new(p, 3, 0, 1).unwrap() }
            })
            .collect()
    }

    #[test]
    fn empty_batch_is_rejected() {
        let sched = make_schedule(ScheduleKind::Cosine, 100).unwrap();
        let mut m = Denoiser::<f64>::init(tiny(), 1).unwrap();
        let mut opt = LionState::new(&m.params, LionConfig::new(1e-3, 0.0));
        let mut rng = rng_from_seed(1);
        assert!(diffusion_train_step(&mut m, &mut opt, &[], &sched, &mut rng, 0.1).is_err());
    }

    #[test]
    fn loss_is_finite_and_reproducible() {
        let sched = make_schedule(ScheduleKind::Cosine, 100).unwrap();
        let data = items(6);
        let run = || {
            let cfg = DiffusionTrainConfig { steps: 5, batch_size: 3, learning_rate: 1e-3, seed: 9, ..Default::default() };
            let mut tr = DiffusionTrainer::new(Denoiser::<f64>::init(tiny(), 2).unwrap(), cfg).unwrap();
            tr.fit(&data, 5, &sched, &mut |_, _| {}).unwrap();
            tr.losses
        };
        let a = run();
        assert!(a.iter().all(|l| l.is_finite() && *l >= 0.0));
        assert_eq!(a, run());
    }
}
