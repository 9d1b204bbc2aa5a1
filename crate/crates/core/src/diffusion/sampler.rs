use crate::diffusion::from_model_space;
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{ClassEmbeddingTable, Denoiser};
use crate::rng::{normal_vec, Rng};
use crate::tensor::{Graph, Scalar};

/// DDPM ancestral sampling conditioned on class `class`, with posterior
/// variance `β_t`. Returns an image in `[0, 1]`.
pub fn ancestral_sample<F: Scalar, D: Denoiser<F> + ?Sized>(
    denoiser: &D,
    table: &ClassEmbeddingTable<F>,
    schedule: &NoiseSchedule,
    class: usize,
    rng: &mut Rng,
) -> Result<Vec<F>> {
    if class >= table.classes() {
        return Err(Error::contract(format!(
            "class {class} outside [0, {})",
            table.classes()
        )));
    }
    let dim = denoiser.image_dim();
    let mut x: Vec<F> = normal_vec(rng, dim);
    for t in (1..=schedule.steps()).rev() {
        let mut g = Graph::new();
        let bound = denoiser.bind(&mut g);
        let cond = g.constant(vec![1, table.dim()], table.row(class).to_vec())?;
        let xt = g.constant(vec![1, dim], x.clone())?;
        let eps = denoiser.denoise(&mut g, &bound, xt, &[t], cond)?;
        let (alpha, beta, ab) = (schedule.alpha(t), schedule.beta(t), schedule.alpha_bar(t));
        let coef = F::of(beta / (1.0 - ab).sqrt());
        let inv = F::of(1.0 / alpha.sqrt());
        let sigma = F::of(beta.sqrt());
        let noise: Vec<F> = if t > 1 {
            normal_vec(rng, dim)
        } else {
            vec![F::zero(); dim]
        };
        x = x
            .iter()
            .zip(g.value(eps))
            .zip(&noise)
            .map(|((&xi, &ei), &zi)| inv * (xi - coef * ei) + sigma * zi)
            .collect();
    }
    Ok(from_model_space(&x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{EpsNetConfig, EpsilonNet};
    use crate::rng::seeded;

    #[test]
    fn untrained_net_gives_finite_image() {
        let schedule = NoiseSchedule::linear(50).unwrap();
        let mut cfg = EpsNetConfig::mlp(9, 4, 50);
        cfg.hidden = vec![16];
        let net = EpsilonNet::<f32>::new(cfg, &mut seeded(0)).unwrap();
        let table = ClassEmbeddingTable::new(3, 4, &mut seeded(1)).unwrap();
        let img = ancestral_sample(&net, &table, &schedule, 2, &mut seeded(2)).unwrap();
        assert_eq!(img.len(), 9);
        assert!(img.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        assert!(ancestral_sample(&net, &table, &schedule, 3, &mut seeded(2)).is_err());
    }
}
