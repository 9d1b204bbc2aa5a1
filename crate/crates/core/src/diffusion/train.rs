use rand::seq::SliceRandom;

use crate::diffusion::loss::{diffusion_loss, sample_pairs};
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{ClassEmbeddingTable, Denoiser, EpsilonNet, Optimizer, OptimizerConfig};
use crate::rng::seeded;
use crate::tensor::{Graph, Scalar};
use crate::tta::condition::build_condition_classification;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            epochs: 300,
            batch: 64,
            optimizer: OptimizerConfig::adam().with_lr(1e-3),
            seed: 0,
        }
    }
}

/// One-hot rows for `labels` over `classes`.
pub fn one_hot<F: Scalar>(labels: &[usize], classes: usize) -> Vec<F> {
    let mut out = vec![F::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        out[i * classes + l] = F::one();
    }
    out
}

/// Fits the denoiser and class embeddings jointly on labelled images
/// (already in model space). Every sample gets one fresh `(t, ε)` pair per
/// epoch and its ground-truth class embedding as condition.
///
/// Returns the mean training loss of each epoch.
pub fn train_diffusion<F: Scalar>(
    images: &[F],
    labels: &[usize],
    epsnet: &mut EpsilonNet<F>,
    table: &mut ClassEmbeddingTable<F>,
    schedule: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
) -> Result<Vec<f64>> {
    let dim = epsnet.image_dim();
    let classes = table.classes();
    if images.len() != labels.len() * dim {
        return Err(Error::shape(
            "train_diffusion",
            format!("{} values for {} labels of dim {dim}", images.len(), labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::contract(format!("label {bad} outside [0, {classes})")));
    }
    let mut rng = seeded(cfg.seed);
    let mut eps_opt = Optimizer::new(cfg.optimizer);
    let mut table_opt = Optimizer::new(cfg.optimizer);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let x: Vec<F> = chunk
                .iter()
                .flat_map(|&i| images[i * dim..(i + 1) * dim].iter().copied())
                .collect();
            let pairs = sample_pairs::<F>(&mut rng, chunk.len(), schedule, dim);
            let mut g = Graph::new();
            let eps_bound = epsnet.bind(&mut g);
            let (table_bound, table_var) = table.bind(&mut g);
            let y = g.constant(vec![chunk.len(), classes], one_hot(&batch_labels, classes))?;
            let c = build_condition_classification(&mut g, y, table_var)?;
            let loss = diffusion_loss(&mut g, &eps_bound, schedule, &*epsnet, &x, c.var(), &pairs)?;
            let value = g.item(loss).as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    step: epoch,
                    timesteps: pairs.iter().map(|p| p.t).collect(),
                });
            }
            let grads = g.backward(loss)?;
            epsnet.store.zero_grad();
            table.store.zero_grad();
            epsnet.store.accumulate(&eps_bound, &grads)?;
            table.store.accumulate(&table_bound, &grads)?;
            eps_opt.step(&mut epsnet.store)?;
            table_opt.step(&mut table.store)?;
            total += value * chunk.len() as f64;
            seen += chunk.len();
        }
        curve.push(total / seen.max(1) as f64);
    }
    epsnet.store.clear_grads();
    table.store.clear_grads();
    Ok(curve)
}
