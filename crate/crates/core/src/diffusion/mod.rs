//! Noise-prediction training with condition dropout, guided DDIM sampling and
//! replica generation.

mod sample;
mod train;

pub use sample::{
    ddim_sample, ddim_sample_observed, ddim_timesteps, generate_replica_range, generate_replicas, guided_epsilon, pixels_to_model,
    sample_batch, CountingPredictor, NoisePredictor, SampleRequest, DEFAULT_SAMPLING_STEPS,
};
pub use train::{diffusion_train_step, train_diffusion, DiffusionTrainConfig, DiffusionTrainer, TrainingItem};
