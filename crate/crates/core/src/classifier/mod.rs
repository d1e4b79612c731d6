//! Multi-label classifier: masked binary cross-entropy, Lion with weight
//! averaging, and lowest-validation-loss snapshot selection.

mod augment;
mod net;

pub use augment::{augment, hflip, AugmentDraw, AugmentSpec};
pub use net::{ClassifierArch, ClassifierNet, ClassifierTrace};

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::sigmoid;
use crate::optim::{ema_update_params, LionConfig, LionState};
use crate::params::{read_checkpoint, write_checkpoint, Gradients, ModelParams};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;
use crate::toydata::{resolve_labels, Dataset, LabelMode, N_LABELS, LABEL_NAMES};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SSCL1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub augmentation: AugmentSpec,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 16,
            learning_rate: 1e-5,
            weight_decay: 3e-4,
            ema_decay: 0.9999,
            batch_size: 32,
            max_epochs: 10,
            augmentation: AugmentSpec::default(),
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    /// Settings for short CPU runs on the toy corpora.
    pub fn desk() -> Self {
        Self { learning_rate: 3e-4, ema_decay: 0.99, batch_size: 16, max_epochs: 8, augmentation: AugmentSpec::desk(), ..Self::default() }
    }

    pub fn arch(&self) -> ClassifierArch {
        ClassifierArch { image_size: self.image_size, base_channels: self.base_channels }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch().validate()?;
        self.augmentation.validate()?;
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(invalid("ema decay must lie in (0, 1)"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(invalid("learning rate must be positive and weight decay non-negative"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(invalid("batch size and epoch count must be positive"));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy over unmasked entries, and its gradient with
/// respect to the logits. Masked entries contribute neither loss nor
/// gradient; a row with no unmasked entries contributes nothing.
pub fn masked_bce<F: Scalar>(logits: &[F], targets: &[bool], mask: &[bool], denom: f64) -> (f64, Vec<F>) {
    let mut loss = 0.0;
    let mut grad = vec![F::zero(); logits.len()];
    for (i, (&z, (&y, &m))) in logits.iter().zip(targets.iter().zip(mask)).enumerate() {
        if !m {
            continue;
        }
        let zf = z.as_f64();
        let yf = y as u8 as f64;
        loss += zf.max(0.0) - zf * yf + (-zf.abs()).exp().ln_1p();
        grad[i] = F::lit((sigmoid(zf) - yf) / denom);
    }
    (loss / denom, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub config: ClassifierConfig,
    pub params: ModelParams<f32>,
    /// Weight-averaged parameters at the best validation epoch; used for inference.
    pub ema: ModelParams<f32>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    pub label_names: Vec<String>,
    net: ClassifierNet,
}

struct Example {
    pixels: Vec<f32>,
    targets: [bool; N_LABELS],
    mask: [bool; N_LABELS],
}

fn examples(data: &Dataset, mode: LabelMode) -> Vec<Example> {
    data.records
        .iter()
        .filter_map(|r| {
            let res = resolve_labels(&r.label_states, mode);
            res.keep.then(|| Example { pixels: r.pixels.clone(), targets: res.targets, mask: res.mask })
        })
        .collect()
}

fn to_input(pixels: &[f32], size: usize) -> Result<FeatureMap<f32>> {
    FeatureMap::from_vec(1, size, size, pixels.iter().map(|&p| 2.0 * p - 1.0).collect())
}

fn batch_denominator(batch: &[&Example]) -> f64 {
    batch.iter().map(|e| e.mask.iter().filter(|&&m| m).count()).sum::<usize>().max(1) as f64
}

/// Masked mean loss of `params` on `data` without augmentation.
fn mean_loss(net: &ClassifierNet, params: &ModelParams<f32>, data: &[Example], size: usize) -> Result<f64> {
    let total: usize = data.iter().map(|e| e.mask.iter().filter(|&&m| m).count()).sum();
    if total == 0 {
        return Err(invalid("validation set has no unmasked labels"));
    }
    let sums: Vec<f64> = data
        .par_iter()
        .map(|e| {
            let logits = net.logits(params, &to_input(&e.pixels, size)?)?;
            Ok(masked_bce(&logits, &e.targets, &e.mask, 1.0).0)
        })
        .collect::<Result<_>>()?;
    Ok(sums.iter().sum::<f64>() / total as f64)
}

/// Trains on `train` (records with any Uncertain label are dropped) and
/// selects the EMA snapshot with the lowest loss on `val`, which must hold
/// only real records (its Uncertain labels are masked).
pub fn train_classifier(
    train: &Dataset,
    val: &Dataset,
    config: &ClassifierConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainedClassifier> {
    config.validate()?;
    if !val.all_real() {
        return Err(Error::ContractViolation("validation set contains synthetic records".into()));
    }
    for d in [train, val] {
        if d.image_size != config.image_size {
            return Err(invalid(format!("dataset images are {}px, classifier expects {}px", d.image_size, config.image_size)));
        }
    }
    let train_ex = examples(train, LabelMode::Training);
    let val_ex = examples(val, LabelMode::Testing);
    if train_ex.is_empty() || val_ex.is_empty() {
        return Err(invalid("training and validation sets must be non-empty after label resolution"));
    }
    let size = config.image_size;
    let (net, mut params) = ClassifierNet::init::<f32>(config.arch(), config.seed)?;
    let mut ema = params.clone();
    let mut opt = LionState::new(&params, LionConfig::new(config.learning_rate, config.weight_decay));
    let mut order_rng = rng_from_seed(derive_seed(config.seed, &[stream::TRAIN]));
    let mut best: Option<(f64, usize, ModelParams<f32>, ModelParams<f32>)> = None;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_ex[i]).collect();
            let denom = batch_denominator(&batch);
            let per_item: Vec<(f64, Gradients<f32>)> = batch
                .par_iter()
                .enumerate()
                .map(|(j, e)| {
                    let mut rng = rng_from_seed(derive_seed(config.seed, &[stream::AUGMENT, epoch as u64, b as u64, j as u64]));
                    let px = augment(&e.pixels, size, &config.augmentation, &mut rng);
                    let (logits, trace) = net.forward_trace(&params, &to_input(&px, size)?)?;
                    let (loss, glog) = masked_bce(&logits, &e.targets, &e.mask, denom);
                    let mut g = params.gradients_like();
                    net.backward(&params, &trace, &glog, &mut g)?;
                    Ok((loss, g))
                })
                .collect::<Result<_>>()?;
            let mut total = params.gradients_like();
            for (l, g) in &per_item {
                epoch_loss += l;
                total.add_assign(g);
            }
            batches += 1;
            params.zero_grad();
            params.accumulate_grads(&total);
            opt.step(&mut params)?;
            ema_update_params(&mut ema, &params, config.ema_decay)?;
        }
        let val_loss = mean_loss(&net, &ema, &val_ex, size)?;
        let log = EpochLog { epoch, train_loss: epoch_loss / batches as f64, val_loss };
        on_epoch(&log);
        history.push(log);
        if best.as_ref().is_none_or(|(v, ..)| val_loss < *v) {
            best = Some((val_loss, epoch, params.clone(), ema.clone()));
        }
    }
    let (best_val_loss, best_epoch, params, ema) = best.expect("at least one epoch");
    Ok(TrainedClassifier {
        config: config.clone(),
        params,
        ema,
        best_val_loss,
        best_epoch,
        history,
        label_names: LABEL_NAMES.iter().map(|s| s.to_string()).collect(),
        net,
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ClassifierConfig,
    best_val_loss: f64,
    best_epoch: usize,
    history: Vec<EpochLog>,
    label_names: Vec<String>,
}

impl TrainedClassifier {
    /// Sigmoid probabilities for the 14 labels, from the EMA weights.
    pub fn predict(&self, pixels: &[f32]) -> Result<[f32; N_LABELS]> {
        let logits = self.net.logits(&self.ema, &self.input(pixels)?)?;
        Ok(std::array::from_fn(|i| sigmoid(logits[i])))
    }

    pub fn predict_dataset(&self, data: &Dataset) -> Result<Vec<[f32; N_LABELS]>> {
        data.records.par_iter().map(|r| self.predict(&r.pixels)).collect()
    }

    /// Globally pooled activations feeding the output head.
    pub fn penultimate_features(&self, pixels: &[f32]) -> Result<Vec<f32>> {
        self.net.features(&self.ema, &self.input(pixels)?)
    }

    pub fn feature_dim(&self) -> usize {
        self.config.arch().feature_dim()
    }

    fn input(&self, pixels: &[f32]) -> Result<FeatureMap<f32>> {
        let s = self.config.image_size;
        if pixels.len() != s * s {
            return Err(invalid(format!("expected {} pixels, got {}", s * s, pixels.len())));
        }
        to_input(pixels, s)
    }

    /// Raw and EMA tensors are stored under `raw.` and `ema.` prefixes.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            best_val_loss: self.best_val_loss,
            best_epoch: self.best_epoch,
            history: self.history.clone(),
            label_names: self.label_names.clone(),
        };
        let mut all = ModelParams::<f32>::new();
        for (prefix, set) in [("raw.", &self.params), ("ema.", &self.ema)] {
            for t in set.tensors() {
                all.add(format!("{prefix}{}", t.name), &t.shape, t.value.clone());
            }
        }
        write_checkpoint(BufWriter::new(File::create(path)?), CHECKPOINT_MAGIC, &serde_json::to_string(&meta)?, &all)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (json, all) = read_checkpoint::<f32, _>(BufReader::new(File::open(path)?), CHECKPOINT_MAGIC)?;
        let meta: CheckpointMeta = serde_json::from_str(&json)?;
        let mut raw = ModelParams::new();
        let mut ema = ModelParams::new();
        for t in all.tensors() {
            match (t.name.strip_prefix("raw."), t.name.strip_prefix("ema.")) {
                (Some(n), _) => raw.add(n, &t.shape, t.value.clone()),
                (_, Some(n)) => ema.add(n, &t.shape, t.value.clone()),
                _ => return Err(Error::Format(format!("unexpected tensor {:?} in classifier checkpoint", t.name))),
            };
        }
        let net = ClassifierNet::for_params(meta.config.arch(), &ema)?;
        if !raw.same_layout(&ema) {
            return Err(Error::Format("raw and averaged parameters differ in layout".into()));
        }
        Ok(Self {
            config: meta.config,
            params: raw,
            ema,
            best_val_loss: meta.best_val_loss,
            best_epoch: meta.best_epoch,
            history: meta.history,
            label_names: meta.label_names,
            net,
        })
    }
}
