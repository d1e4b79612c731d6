//! Three-stage convolutional backbone with global average pooling and a
//! linear multi-label head.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{global_avg_pool, global_avg_pool_backward, silu_backward, silu_map, Conv2d, ConvCache, Linear};
use crate::params::{Gradients, ModelParams};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;
use crate::toydata::N_LABELS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub image_size: usize,
    pub base_channels: usize,
}

impl ClassifierArch {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.image_size < 4 || !self.image_size.is_multiple_of(4) {
            return Err(invalid("classifier needs positive width and an image size divisible by 4"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        4 * self.base_channels
    }
}

/// Layer handles; the parameters live in a separate [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ClassifierNet {
    pub arch: ClassifierArch,
    convs: Vec<Conv2d>,
    head: Linear,
}

pub struct ClassifierTrace<F> {
    caches: Vec<ConvCache<F>>,
    pre: Vec<FeatureMap<F>>,
    features: Vec<F>,
}

impl ClassifierNet {
    /// Declares the layers and draws initial weights from `seed`.
    pub fn init<F: Scalar>(arch: ClassifierArch, seed: u64) -> Result<(Self, ModelParams<F>)> {
        arch.validate()?;
        let mut rng = rng_from_seed(derive_seed(seed, &[stream::INIT]));
        let mut p = ModelParams::new();
        let c = arch.base_channels;
        let layout = [(1, c, 1), (c, c, 1), (c, 2 * c, 2), (2 * c, 2 * c, 1), (2 * c, 4 * c, 2), (4 * c, 4 * c, 1)];
        let convs = layout
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| Conv2d::declare(&mut p, &format!("conv{i}"), cin, cout, 3, stride, 1.4, &mut rng))
            .collect();
        let head = Linear::declare(&mut p, "head", 4 * c, N_LABELS, true, 1.0, &mut rng);
        Ok((Self { arch, convs, head }, p))
    }

    /// Rebuilds the layer handles for `arch` and checks `params` against them.
    pub fn for_params<F: Scalar>(arch: ClassifierArch, params: &ModelParams<F>) -> Result<Self> {
        let (net, fresh) = Self::init::<F>(arch, 0)?;
        if !fresh.same_layout(params) {
            return Err(crate::Error::Format("classifier parameters do not match the architecture".into()));
        }
        Ok(net)
    }

    fn check(&self, x: &FeatureMap<impl Scalar>) -> Result<()> {
        let s = self.arch.image_size;
        if x.channels != 1 || x.height != s || x.width != s {
            return Err(invalid(format!("expected a 1x{s}x{s} image, got {}x{}x{}", x.channels, x.height, x.width)));
        }
        Ok(())
    }

    /// Returns the 14 logits and the trace needed for backward.
    pub fn forward_trace<F: Scalar>(&self, p: &ModelParams<F>, x: &FeatureMap<F>) -> Result<(Vec<F>, ClassifierTrace<F>)> {
        self.check(x)?;
        let mut caches = Vec::with_capacity(self.convs.len());
        let mut pre = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for conv in &self.convs {
            let (z, cache) = conv.forward(p, &h);
            h = silu_map(&z);
            caches.push(cache);
            pre.push(z);
        }
        let features = global_avg_pool(&h);
        let logits = self.head.forward(p, &features);
        Ok((logits, ClassifierTrace { caches, pre, features }))
    }

    pub fn logits<F: Scalar>(&self, p: &ModelParams<F>, x: &FeatureMap<F>) -> Result<Vec<F>> {
        self.forward_trace(p, x).map(|(l, _)| l)
    }

    pub fn features<F: Scalar>(&self, p: &ModelParams<F>, x: &FeatureMap<F>) -> Result<Vec<F>> {
        self.forward_trace(p, x).map(|(_, t)| t.features)
    }

    /// Accumulates parameter gradients for upstream logit gradients `glogits`.
    pub fn backward<F: Scalar>(&self, p: &ModelParams<F>, trace: &ClassifierTrace<F>, glogits: &[F], grads: &mut Gradients<F>) -> Result<()> {
        if glogits.len() != N_LABELS {
            return Err(invalid("logit gradient must have 14 entries"));
        }
        let gfeat = self.head.backward(p, &trace.features, glogits, grads);
        let last = trace.pre.last().expect("at least one conv");
        let mut g = global_avg_pool_backward(&gfeat, last.channels, last.height, last.width);
        for (i, conv) in self.convs.iter().enumerate().rev() {
            silu_backward(&trace.pre[i].data, &mut g.data);
            match conv.backward(p, &trace.caches[i], &g, grads, i > 0) {
                Some(gi) => g = gi,
                None => break,
            }
        }
        Ok(())
    }
}
