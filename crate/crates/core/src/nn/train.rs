use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::classifier::{argmax, Classifier};
use crate::nn::optim::{Optimizer, OptimizerConfig};
use crate::rng::seeded;
use crate::tensor::{Graph, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            epochs: 15,
            batch: 32,
            optimizer: OptimizerConfig::adam().with_lr(1e-3),
            seed: 0,
        }
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy<F: Scalar>(g: &mut Graph<F>, logits: Var, labels: &[usize]) -> Result<Var> {
    let classes = g.shape(logits)[1];
    let mut onehot = vec![F::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * classes + l] = F::one();
    }
    let target = g.constant(vec![labels.len(), classes], onehot)?;
    let logp = g.log_softmax(logits);
    let picked = g.mul(logp, target)?;
    let total = g.sum(picked);
    Ok(g.mul_scalar(total, -F::one() / F::of(labels.len() as f64)))
}

/// Minibatch cross-entropy training. Returns the mean loss of every epoch.
pub fn train_classifier<F: Scalar>(
    images: &[F],
    labels: &[usize],
    classifier: &mut Classifier<F>,
    cfg: &ClassifierTrainConfig,
) -> Result<Vec<f64>> {
    let dim = classifier.config.input_dim;
    if images.len() != labels.len() * dim {
        return Err(Error::shape(
            "train_classifier",
            format!("{} values for {} labels", images.len(), labels.len()),
        ));
    }
    let mut rng = seeded(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let x: Vec<F> = chunk
                .iter()
                .flat_map(|&i| images[i * dim..(i + 1) * dim].iter().copied())
                .collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let bound = classifier.store.bind(&mut g);
            let xv = g.constant(vec![chunk.len(), dim], x)?;
            let logits = classifier.logits(&mut g, &bound, xv)?;
            let loss = cross_entropy(&mut g, logits, &y)?;
            let value = g.item(loss).as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    step: epoch,
                    timesteps: vec![],
                });
            }
            let grads = g.backward(loss)?;
            classifier.store.zero_grad();
            classifier.store.accumulate(&bound, &grads)?;
            opt.step(&mut classifier.store)?;
            total += value * chunk.len() as f64;
        }
        curve.push(total / labels.len().max(1) as f64);
    }
    classifier.store.clear_grads();
    Ok(curve)
}

/// Fraction of `images` whose argmax prediction equals the label.
pub fn accuracy<F: Scalar>(classifier: &Classifier<F>, images: &[F], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let probs = classifier.predict(images)?;
    let l = classifier.classes();
    let correct = probs
        .chunks(l)
        .zip(labels)
        .filter(|(row, &lab)| argmax(row) == lab)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}
