use std::ops::RangeInclusive;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionVector, Denoiser};
use crate::error::{invalid, Result};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::Image;
use crate::toydata::{Dataset, ImageRecord, Provenance};

pub const DEFAULT_SAMPLING_STEPS: usize = 200;

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor<F: Scalar>: Sync {
    fn image_size(&self) -> usize;
    fn predict(&self, x: &Image<F>, t: usize, cond: &ConditionVector) -> Result<Image<F>>;
}

impl<F: Scalar> NoisePredictor<F> for Denoiser<F> {
    fn image_size(&self) -> usize {
        self.config.image_size
    }

    fn predict(&self, x: &Image<F>, t: usize, cond: &ConditionVector) -> Result<Image<F>> {
        self.forward(x, t, cond)
    }
}

impl<F: Scalar, P: NoisePredictor<F> + ?Sized> NoisePredictor<F> for &P {
    fn image_size(&self) -> usize {
        (**self).image_size()
    }

    fn predict(&self, x: &Image<F>, t: usize, cond: &ConditionVector) -> Result<Image<F>> {
        (**self).predict(x, t, cond)
    }
}

/// Wraps a predictor and counts network evaluations.
pub struct CountingPredictor<P> {
    pub inner: P,
    count: AtomicUsize,
}

impl<P> CountingPredictor<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, count: AtomicUsize::new(0) }
    }

    pub fn evaluations(&self) -> usize {
        self.count.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.count.store(0, Ordering::Relaxed);
    }
}

impl<F: Scalar, P: NoisePredictor<F>> NoisePredictor<F> for CountingPredictor<P> {
    fn image_size(&self) -> usize {
        self.inner.image_size()
    }

    fn predict(&self, x: &Image<F>, t: usize, cond: &ConditionVector) -> Result<Image<F>> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.predict(x, t, cond)
    }
}

/// `s = 0` is a single conditional pass; otherwise `ε_c + s·(ε_c − ε_u)`
/// with `ε_u` from the null embedding.
pub fn guided_epsilon<F: Scalar, P: NoisePredictor<F> + ?Sized>(
    model: &P,
    x: &Image<F>,
    t: usize,
    cond: &ConditionVector,
    s: f64,
) -> Result<Image<F>> {
    if !(s >= 0.0 && s.is_finite()) {
        return Err(invalid(format!("cfg scale {s} must be finite and non-negative")));
    }
    let ec = model.predict(x, t, cond)?;
    if s == 0.0 {
        return Ok(ec);
    }
    let eu = model.predict(x, t, &cond.as_null())?;
    let s = F::lit(s);
    Ok(Image { data: ec.data.iter().zip(&eu.data).map(|(&c, &u)| c + s * (c - u)).collect(), ..ec })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub cond: ConditionVector,
    pub cfg_scale: f64,
    pub n_steps: usize,
    pub seed: u64,
}

impl SampleRequest {
    pub fn new(cond: ConditionVector, cfg_scale: f64, seed: u64) -> Self {
        Self { cond, cfg_scale, n_steps: DEFAULT_SAMPLING_STEPS, seed }
    }

    pub fn with_steps(mut self, n_steps: usize) -> Self {
        self.n_steps = n_steps;
        self
    }
}

/// Uniformly strided timesteps `⌊i·T/n⌋`, `i = 0..n`, in descending order.
pub fn ddim_timesteps(total: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > total {
        return Err(invalid(format!("sampling steps {n_steps} must lie in [1, {total}]")));
    }
    Ok((0..n_steps).rev().map(|i| i * total / n_steps).collect())
}

/// Pixel range `[0, 1]` to model range `[-1, 1]`.
pub fn pixels_to_model<F: Scalar>(size: usize, pixels: &[f32]) -> Result<Image<F>> {
    Image::from_pixels(size, pixels).map(|im| im.map(|p| F::lit(2.0) * p - F::one()))
}

/// Deterministic (η = 0) DDIM from a given `x_T`. `observe` sees
/// `(step, t, x̂0)` after clipping; returns the final `x̂0` in model range.
pub fn ddim_sample_observed<F: Scalar, P: NoisePredictor<F> + ?Sized>(
    model: &P,
    x_start: Image<F>,
    req: &SampleRequest,
    sched: &NoiseSchedule,
    mut observe: impl FnMut(usize, usize, &Image<F>),
) -> Result<Image<F>> {
    req.cond.validate()?;
    let ts = ddim_timesteps(sched.len(), req.n_steps)?;
    let (one, lo) = (F::one(), -F::one());
    let mut x = x_start;
    let mut x0 = x.clone();
    for (i, &t) in ts.iter().enumerate() {
        let eps = guided_epsilon(model, &x, t, &req.cond, req.cfg_scale)?;
        let ab = sched.alpha_bar(t);
        let ab_prev = ts.get(i + 1).map_or(1.0, |&tp| sched.alpha_bar(tp));
        let (sa, sb) = (F::lit(ab.sqrt()), F::lit((1.0 - ab).sqrt()));
        let (pa, pb) = (F::lit(ab_prev.sqrt()), F::lit((1.0 - ab_prev).sqrt()));
        for ((x0v, &xv), &ev) in x0.data.iter_mut().zip(&x.data).zip(&eps.data) {
            *x0v = ((xv - sb * ev) / sa).max(lo).min(one);
        }
        observe(i, t, &x0);
        for ((xv, &x0v), &ev) in x.data.iter_mut().zip(&x0.data).zip(&eps.data) {
            *xv = pa * x0v + pb * ev;
        }
    }
    Ok(x0)
}

/// Samples one image in pixel range `[0, 1]`, starting from unit Gaussian
/// noise seeded by `req.seed`.
pub fn ddim_sample<F: Scalar, P: NoisePredictor<F> + ?Sized>(
    model: &P,
    req: &SampleRequest,
    sched: &NoiseSchedule,
) -> Result<Image<F>> {
    let n = model.image_size();
    let mut rng = rng_from_seed(derive_seed(req.seed, &[stream::SAMPLE]));
    let noise = (0..n * n).map(|_| F::lit(StandardNormal.sample(&mut rng))).collect();
    let x0 = ddim_sample_observed(model, Image::from_vec(1, n, n, noise)?, req, sched, |_, _, _| {})?;
    let half = F::lit(0.5);
    Ok(x0.map(|v| ((v + F::one()) * half).max(F::zero()).min(F::one())))
}

/// Independent requests sampled in parallel; output order matches input.
pub fn sample_batch<F: Scalar, P: NoisePredictor<F> + ?Sized>(
    model: &P,
    reqs: &[SampleRequest],
    sched: &NoiseSchedule,
) -> Result<Vec<Image<F>>> {
    reqs.par_iter().map(|r| ddim_sample(model, r, sched)).collect()
}

/// `n_replicas` synthetic copies of every source record, replica-major:
/// all records of replica 1 first, then replica 2, and so on. Labels and
/// demographics are copied verbatim; the sampling seed for record `r` and
/// replica `k` is derived from `(base_seed, r.id, k)`.
pub fn generate_replicas<F: Scalar, P: NoisePredictor<F> + ?Sized>(
    model: &P,
    source: &Dataset,
    n_replicas: u32,
    cfg_scale: f64,
    n_steps: usize,
    base_seed: u64,
    sched: &NoiseSchedule,
) -> Result<Dataset> {
    if n_replicas == 0 {
        return Err(invalid("at least one replica is required"));
    }
    generate_replica_range(model, source, 1..=n_replicas, cfg_scale, n_steps, base_seed, sched)
}

/// Replicas `range` only. Seeds depend on the replica index, never on the
/// range, so a pool can be extended without regenerating earlier replicas.
pub fn generate_replica_range<F: Scalar, P: NoisePredictor<F> + ?Sized>(
    model: &P,
    source: &Dataset,
    range: RangeInclusive<u32>,
    cfg_scale: f64,
    n_steps: usize,
    base_seed: u64,
    sched: &NoiseSchedule,
) -> Result<Dataset> {
    if *range.start() == 0 {
        return Err(invalid("replica indices start at 1"));
    }
    if source.image_size != model.image_size() {
        return Err(invalid(format!(
            "source images are {}px but the model generates {}px",
            source.image_size,
            model.image_size()
        )));
    }
    let n = source.len() as u64;
    let jobs: Vec<(u32, usize, &ImageRecord)> =
        range.flat_map(|k| source.records.iter().enumerate().map(move |(i, r)| (k, i, r))).collect();
    let records = jobs
        .par_iter()
        .map(|&(k, i, r)| {
            let seed = derive_seed(base_seed, &[stream::REPLICA, r.id, k as u64]);
            let req = SampleRequest { cond: r.condition(), cfg_scale, n_steps, seed };
            let img = ddim_sample(model, &req, sched)?;
            Ok(ImageRecord {
                id: (k as u64 - 1) * n + i as u64,
                patient_id: r.patient_id,
                pixels: img.to_f32(),
                label_states: r.label_states,
                demographics: r.demographics,
                provenance: Provenance::Synthetic { seed, cfg_scale, replica: k, source_id: r.id },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { image_size: source.image_size, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_schedule, ScheduleKind};

    /// Returns `v` for conditional calls and `u` for null calls.
    struct Fixed {
        v: f64,
        u: f64,
    }

    impl NoisePredictor<f64> for Fixed {
        fn image_size(&self) -> usize {
            2
        }

        fn predict(&self, _x: &Image<f64>, _t: usize, cond: &ConditionVector) -> Result<Image<f64>> {
            let c = if cond.is_null { self.u } else { self.v };
            Ok(Image { channels: 1, height: 2, width: 2, data: vec![c; 4] })
        }
    }

    fn cond() -> ConditionVector {
        ConditionVector::new([false; 14], 5, 1, 2).unwrap()
    }

    #[test]
    fn guidance_formula() {
        let x = Image::zeros(1, 2, 2);
        let m = CountingPredictor::new(Fixed { v: 0.3, u: 0.0 });
        assert_eq!(guided_epsilon(&m, &x, 0, &cond(), 0.0).unwrap().data, vec![0.3; 4]);
        assert_eq!(m.evaluations(), 1);
        let g = guided_epsilon(&m, &x, 0, &cond(), 4.0).unwrap();
        assert!(g.data.iter().all(|&v| (v - 1.5).abs() < 1e-12));
        assert_eq!(m.evaluations(), 3);
        let same = Fixed { v: -0.7, u: -0.7 };
        for s in [0.0, 1.0, 7.5] {
            assert_eq!(guided_epsilon(&same, &x, 0, &cond(), s).unwrap().data, vec![-0.7; 4]);
        }
        assert!(guided_epsilon(&same, &x, 0, &cond(), -1.0).is_err());
    }

    #[test]
    fn timesteps_descend_to_zero() {
        assert_eq!(ddim_timesteps(1000, 4).unwrap(), vec![750, 500, 250, 0]);
        assert_eq!(ddim_timesteps(10, 10).unwrap(), (0..10).rev().collect::<Vec<_>>());
        assert_eq!(ddim_timesteps(1000, 200).unwrap().len(), 200);
        assert!(ddim_timesteps(10, 11).is_err());
        assert!(ddim_timesteps(10, 0).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_counts_passes() {
        let sched = make_schedule(ScheduleKind::Cosine, 50).unwrap();
        let m = CountingPredictor::new(Fixed { v: 0.1, u: -0.1 });
        let req = SampleRequest::new(cond(), 0.0, 3).with_steps(10);
        let a = ddim_sample(&m, &req, &sched).unwrap();
        assert_eq!(m.evaluations(), 10);
        assert_eq!(a, ddim_sample(&m, &req, &sched).unwrap());
        m.reset();
        ddim_sample(&m, &SampleRequest { cfg_scale: 4.0, ..req }, &sched).unwrap();
        assert_eq!(m.evaluations(), 20);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(ddim_sample(&m, &req.with_steps(51), &sched).is_err());
    }

    #[test]
    fn replica_ranges_extend_a_pool() {
        use crate::toydata::{Demographics, LabelState, N_LABELS};
        let sched = make_schedule(ScheduleKind::Cosine, 20).unwrap();
        let rec = |id| ImageRecord {
            id,
            patient_id: id,
            pixels: vec![0.5; 4],
            label_states: [LabelState::Absent; N_LABELS],
            demographics: Demographics { age_decade: 4, sex: 0, race: 1 },
            provenance: Provenance::Real,
        };
        let src = Dataset::new(2, vec![rec(10), rec(11)]);
        let m = Fixed { v: 0.2, u: 0.0 };
        let full = generate_replicas(&m, &src, 3, 0.0, 5, 1, &sched).unwrap();
        let tail = generate_replica_range(&m, &src, 2..=3, 0.0, 5, 1, &sched).unwrap();
        assert_eq!(full.records[2..], tail.records[..]);
        assert!(generate_replica_range(&m, &src, 0..=1, 0.0, 5, 1, &sched).is_err());
    }
}
