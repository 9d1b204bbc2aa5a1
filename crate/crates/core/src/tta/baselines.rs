//! Comparison methods: entropy minimisation, free-logit adaptation,
//! ensembling, and zero-shot diffusion classification.

use std::time::Instant;

use crate::diffusion::{diffusion_loss, per_pair_losses, sample_pairs_with, to_model_space, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{
    argmax, select_subset, ClassEmbeddingTable, Classifier, Denoiser, Optimizer, ParamStore,
    ParamSubset,
};
use crate::rng::{seeded, Rng};
use crate::tensor::{Graph, Scalar, Tensor};
use crate::tta::adapt::{check_finite, record, AdaptationReport, TtaConfig};
use crate::tta::condition::build_condition_classification;

const LOGITS_PATH: &str = "tta/logits";

/// Entropy minimisation of the classifier's own prediction, updating only
/// the normalisation parameters. The classifier is left untouched.
pub fn baseline_entropy_tta<F: Scalar>(
    x: &[F],
    classifier: &Classifier<F>,
    cfg: &TtaConfig,
) -> Result<AdaptationReport> {
    let start = Instant::now();
    let mut model = classifier.clone();
    let mask = select_subset(&model.store, ParamSubset::NormLayers)?;
    model.store.apply_mask(&mask)?;
    let digest_before = model.store.frozen_digest();
    let mut opt = Optimizer::new(cfg.optimizer);
    let dim = model.config.input_dim;
    let mut steps = vec![record(0, None, &model.predict(x)?)];
    for step in 1..=cfg.steps {
        model.store.zero_grad();
        let mut g = Graph::new();
        let bound = model.store.bind(&mut g);
        let xv = g.constant(vec![1, dim], x.to_vec())?;
        let logits = model.logits(&mut g, &bound, xv)?;
        let logp = g.log_softmax(logits);
        let p = g.softmax(logits);
        let plogp = g.mul(p, logp)?;
        let s = g.sum(plogp);
        let entropy = g.neg(s);
        let value = g.item(entropy).as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite { step, timesteps: Vec::new() });
        }
        let grads = g.backward(entropy)?;
        model.store.accumulate(&bound, &grads)?;
        opt.step(&mut model.store)?;
        steps.push(record(step, Some(value), &model.predict(x)?));
    }
    Ok(AdaptationReport {
        steps,
        wall_clock: start.elapsed(),
        frozen_digest_before: digest_before,
        frozen_digest_after: model.store.frozen_digest(),
    })
}

/// Optimises a free logit vector `z` (initialised to zero, so `y` starts
/// uniform) through the diffusion loss. The denoiser and embeddings are
/// only read.
pub fn baseline_adapt_logits<F: Scalar, D: Denoiser<F> + ?Sized>(
    x: &[F],
    epsnet: &D,
    table: &ClassEmbeddingTable<F>,
    schedule: &NoiseSchedule,
    cfg: &TtaConfig,
) -> Result<AdaptationReport> {
    cfg.validate()?;
    let start = Instant::now();
    let digest_before = table.store.digest();

    let classes = table.classes();
    let mut z = ParamStore::new();
    z.insert(LOGITS_PATH, Tensor::zeros(vec![1, classes]))?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let x_model = to_model_space(x);
    let mut rng = seeded(cfg.seed);

    let probs = |z: &ParamStore<F>| -> Result<Vec<F>> {
        let mut g = Graph::new();
        let v = g.leaf(z.tensor(LOGITS_PATH)?);
        let y = g.softmax(v);
        Ok(g.value(y).to_vec())
    };
    let mut steps = vec![record(0, None, &probs(&z)?)];
    for step in 1..=cfg.steps {
        let pairs = sample_pairs_with::<F>(&mut rng, cfg.batch, schedule, epsnet.image_dim(), cfg.noise);
        z.zero_grad();
        let mut total = 0.0;
        for chunk in pairs.chunks(cfg.micro_batch) {
            let mut g = Graph::new();
            let zb = z.bind(&mut g);
            let eb = epsnet.bind_frozen(&mut g);
            let tv = g.constant(table.tensor().shape().to_vec(), table.tensor().data().to_vec())?;
            let zv = zb.get(LOGITS_PATH)?;
            let y = g.softmax(zv);
            check_finite(&g, y, step, chunk)?;
            let c = build_condition_classification(&mut g, y, tv)?;
            let loss = diffusion_loss(&mut g, &eb, schedule, epsnet, &x_model, c.var(), chunk)?;
            let weighted = g.mul_scalar(loss, F::of(chunk.len() as f64 / cfg.batch as f64));
            let value = g.item(weighted).as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    timesteps: chunk.iter().map(|p| p.t).collect(),
                });
            }
            total += value;
            let grads = g.backward(weighted)?;
            z.accumulate(&zb, &grads)?;
        }
        opt.step(&mut z)?;
        steps.push(record(step, Some(total), &probs(&z)?));
    }
    Ok(AdaptationReport {
        steps,
        wall_clock: start.elapsed(),
        frozen_digest_before: digest_before,
        frozen_digest_after: table.store.digest(),
    })
}

/// Averages a discriminative and a generative class distribution.
pub fn baseline_ensemble(y_disc: &[f64], y_gen: &[f64]) -> Result<Vec<f64>> {
    if y_disc.len() != y_gen.len() {
        return Err(Error::shape(
            "ensemble",
            format!("{} classes vs {} classes", y_disc.len(), y_gen.len()),
        ));
    }
    Ok(y_disc.iter().zip(y_gen).map(|(a, b)| 0.5 * (a + b)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionClassification {
    pub prediction: usize,
    /// Mean denoising error under each class condition.
    pub losses: Vec<f64>,
}

/// Zero-shot classification: the class whose embedding gives the lowest
/// denoising error. Every class is scored on the same pairs.
pub fn diffusion_classifier<F: Scalar, D: Denoiser<F> + ?Sized>(
    x: &[F],
    epsnet: &D,
    table: &ClassEmbeddingTable<F>,
    schedule: &NoiseSchedule,
    pairs_per_class: usize,
    rng: &mut Rng,
) -> Result<DiffusionClassification> {
    if pairs_per_class == 0 {
        return Err(Error::contract("diffusion classifier needs at least one pair"));
    }
    let pairs = sample_pairs_with::<F>(rng, pairs_per_class, schedule, epsnet.image_dim(), Default::default());
    let x_model = to_model_space(x);
    let losses = (0..table.classes())
        .map(|j| {
            let per = per_pair_losses(schedule, epsnet, &x_model, table.row(j), &pairs)?;
            Ok(per.iter().sum::<f64>() / per.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let neg: Vec<f64> = losses.iter().map(|l| -l).collect();
    Ok(DiffusionClassification { prediction: argmax(&neg), losses })
}
