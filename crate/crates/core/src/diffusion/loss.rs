use rand::Rng as _;

use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{Binding, Denoiser};
use crate::rng::{normal_vec, Rng};
use crate::tensor::{Graph, Scalar, Var};

/// A timestep and the Gaussian noise drawn for it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePair<F> {
    pub t: usize,
    pub eps: Vec<F>,
}

/// How the noise vectors of a pair batch relate to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseSharing {
    /// Fresh noise for every pair.
    #[default]
    Independent,
    /// One noise vector reused by every timestep in the batch.
    Shared,
}

/// Draws `count` pairs with `t ~ U{1..T}` and `ε ~ N(0, I)` of length `dim`.
pub fn sample_pairs<F: Scalar>(
    rng: &mut Rng,
    count: usize,
    schedule: &NoiseSchedule,
    dim: usize,
) -> Vec<NoisePair<F>> {
    sample_pairs_with(rng, count, schedule, dim, NoiseSharing::Independent)
}

pub fn sample_pairs_with<F: Scalar>(
    rng: &mut Rng,
    count: usize,
    schedule: &NoiseSchedule,
    dim: usize,
    sharing: NoiseSharing,
) -> Vec<NoisePair<F>> {
    let steps = schedule.steps();
    let mut shared: Option<Vec<F>> = None;
    (0..count)
        .map(|_| {
            let t = rng.random_range(1..=steps);
            let eps = match sharing {
                NoiseSharing::Independent => normal_vec(rng, dim),
                NoiseSharing::Shared => shared.get_or_insert_with(|| normal_vec(rng, dim)).clone(),
            };
            NoisePair { t, eps }
        })
        .collect()
}

/// `x_t = √ᾱ_t · x + √(1 − ᾱ_t) · ε`.
pub fn forward_noise<F: Scalar>(schedule: &NoiseSchedule, x: &[F], pair: &NoisePair<F>) -> Vec<F> {
    let ab = schedule.alpha_bar(pair.t);
    let (a, b) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
    x.iter().zip(&pair.eps).map(|(&xi, &ei)| a * xi + b * ei).collect()
}

/// Stacks noisy inputs, noise targets, and timesteps for a pair batch.
/// `x` holds either one image shared by every pair or one image per pair.
fn noisy_batch<F: Scalar>(
    schedule: &NoiseSchedule,
    x: &[F],
    dim: usize,
    pairs: &[NoisePair<F>],
) -> Result<(Vec<F>, Vec<F>, Vec<usize>)> {
    if pairs.is_empty() {
        return Err(Error::contract("diffusion loss needs at least one noise pair"));
    }
    let images = x.len().checked_div(dim).unwrap_or(0);
    if dim == 0 || !x.len().is_multiple_of(dim) || (images != 1 && images != pairs.len()) {
        return Err(Error::shape(
            "diffusion_loss",
            format!("{} values for {} pairs of dim {dim}", x.len(), pairs.len()),
        ));
    }
    let mut xt = Vec::with_capacity(pairs.len() * dim);
    let mut eps = Vec::with_capacity(pairs.len() * dim);
    let mut ts = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        schedule.check_timestep(p.t)?;
        if p.eps.len() != dim {
            return Err(Error::shape(
                "diffusion_loss",
                format!("noise of length {} for image dim {dim}", p.eps.len()),
            ));
        }
        let img = if images == 1 { x } else { &x[i * dim..(i + 1) * dim] };
        xt.extend(forward_noise(schedule, img, p));
        eps.extend_from_slice(&p.eps);
        ts.push(p.t);
    }
    Ok((xt, eps, ts))
}

/// Denoising loss: mean over pairs and elements of `(ε̂(x_t, c, t) − ε)²`.
/// Differentiable with respect to `cond` and to the denoiser's parameters.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss<F: Scalar, D: Denoiser<F> + ?Sized>(
    g: &mut Graph<F>,
    bound: &Binding,
    schedule: &NoiseSchedule,
    denoiser: &D,
    x: &[F],
    cond: Var,
    pairs: &[NoisePair<F>],
) -> Result<Var> {
    let dim = denoiser.image_dim();
    let (xt, eps, ts) = noisy_batch(schedule, x, dim, pairs)?;
    let xt = g.constant(vec![pairs.len(), dim], xt)?;
    let target = g.constant(vec![pairs.len(), dim], eps)?;
    let pred = denoiser.denoise(g, bound, xt, &ts, cond)?;
    g.mse(pred, target)
}

/// Per-pair mean-squared errors, without building gradients.
pub fn per_pair_losses<F: Scalar, D: Denoiser<F> + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    x: &[F],
    cond: &[F],
    pairs: &[NoisePair<F>],
) -> Result<Vec<f64>> {
    let dim = denoiser.image_dim();
    let (xt, eps, ts) = noisy_batch(schedule, x, dim, pairs)?;
    let mut g = Graph::new();
    let bound = denoiser.bind_frozen(&mut g);
    let cd = denoiser.cond_dim();
    let rows = cond.len().checked_div(cd).unwrap_or(0);
    let cond = g.constant(vec![rows, cd], cond.to_vec())?;
    let xt = g.constant(vec![pairs.len(), dim], xt)?;
    let pred = denoiser.denoise(&mut g, &bound, xt, &ts, cond)?;
    Ok(g
        .value(pred)
        .chunks(dim)
        .zip(eps.chunks(dim))
        .map(|(p, e)| {
            p.iter()
                .zip(e)
                .map(|(&a, &b)| (a - b).as_f64().powi(2))
                .sum::<f64>()
                / dim as f64
        })
        .collect())
}

/// Scalar loss value for a fixed condition.
pub fn loss_value<F: Scalar, D: Denoiser<F> + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    x: &[F],
    cond: &[F],
    pairs: &[NoisePair<F>],
) -> Result<f64> {
    let per = per_pair_losses(schedule, denoiser, x, cond, pairs)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}
