//! Forward noising, denoising losses, training, and sampling.

pub mod loss;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use loss::{
    diffusion_loss, forward_noise, loss_value, per_pair_losses, sample_pairs, sample_pairs_with,
    NoisePair, NoiseSharing,
};
pub use sampler::ancestral_sample;
pub use schedule::{NoiseSchedule, ScheduleKind};
pub use train::{one_hot, train_diffusion, DiffusionTrainConfig};

use crate::tensor::Scalar;

/// Maps pixel intensities in `[0, 1]` to the denoiser's `[-1, 1]` range.
pub fn to_model_space<F: Scalar>(x: &[F]) -> Vec<F> {
    let two = F::of(2.0);
    x.iter().map(|&v| two * v - F::one()).collect()
}

/// Inverse of [`to_model_space`], clipped to `[0, 1]`.
pub fn from_model_space<F: Scalar>(x: &[F]) -> Vec<F> {
    let half = F::of(0.5);
    x.iter()
        .map(|&v| ((v + F::one()) * half).max(F::zero()).min(F::one()))
        .collect()
}
