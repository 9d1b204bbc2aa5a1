use std::time::{Duration, Instant};

use crate::diffusion::{
    diffusion_loss, sample_pairs_with, to_model_space, NoisePair, NoiseSchedule, NoiseSharing,
};
use crate::error::{Error, Result};
use crate::nn::{
    argmax, select_subset, ClassEmbeddingTable, Classifier, Denoiser, EpsilonNet, Optimizer,
    OptimizerConfig, ParamSubset,
};
use crate::rng::{seeded, Rng};
use crate::tensor::{Graph, Scalar, Var};
use crate::tta::condition::build_condition_classification;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TtaMode {
    /// Weights are restored after every example.
    SingleSample,
    /// Weights persist across a stream of examples. The diffusion weights
    /// are never reset either.
    Online,
}

/// Settings for one adaptation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtaConfig {
    /// Adaptation steps `N`.
    pub steps: usize,
    /// Noise/timestep pairs per step `B`.
    pub batch: usize,
    /// Pairs per backward pass; `batch / micro_batch` passes are accumulated.
    pub micro_batch: usize,
    pub optimizer: OptimizerConfig,
    pub subset: ParamSubset,
    /// Also update the denoiser and class embeddings.
    pub adapt_phi: bool,
    pub mode: TtaMode,
    pub noise: NoiseSharing,
    pub seed: u64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            steps: 5,
            batch: 180,
            micro_batch: 20,
            optimizer: OptimizerConfig::sgd_momentum(),
            subset: ParamSubset::All,
            adapt_phi: true,
            mode: TtaMode::SingleSample,
            noise: NoiseSharing::Independent,
            seed: 0,
        }
    }
}

impl TtaConfig {
    pub fn accumulation(&self) -> usize {
        self.batch / self.micro_batch.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.micro_batch == 0 || !self.batch.is_multiple_of(self.micro_batch) {
            return Err(Error::contract(format!(
                "micro batch {} must divide batch {}",
                self.micro_batch, self.batch
            )));
        }
        Ok(())
    }
}

/// State after step `step` (step 0 is the unadapted model).
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Objective evaluated at the start of this step; `None` for step 0.
    pub loss: Option<f64>,
    pub probs: Vec<f64>,
    pub prediction: usize,
}

#[derive(Debug, Clone)]
pub struct AdaptationReport {
    /// `N + 1` records: the initial state, then one per step.
    pub steps: Vec<StepRecord>,
    pub wall_clock: Duration,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
}

/// Reports compare equal when everything but the wall-clock time matches.
impl PartialEq for AdaptationReport {
    fn eq(&self, other: &Self) -> bool {
        self.steps == other.steps
            && self.frozen_digest_before == other.frozen_digest_before
            && self.frozen_digest_after == other.frozen_digest_after
    }
}

impl AdaptationReport {
    pub fn initial(&self) -> &StepRecord {
        &self.steps[0]
    }

    pub fn last(&self) -> &StepRecord {
        self.steps.last().expect("report has an initial record")
    }

    pub fn final_prediction(&self) -> usize {
        self.last().prediction
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().filter_map(|s| s.loss).collect()
    }
}

/// The discriminative model, denoiser, and class embeddings adapted together.
#[derive(Debug, Clone, PartialEq)]
pub struct Models<F> {
    pub classifier: Classifier<F>,
    pub epsnet: EpsilonNet<F>,
    pub table: ClassEmbeddingTable<F>,
}

impl<F: Scalar> Models<F> {
    pub fn frozen_digest(&self) -> String {
        format!(
            "{}-{}-{}",
            self.classifier.store.frozen_digest(),
            self.epsnet.store.frozen_digest(),
            self.table.store.frozen_digest()
        )
    }

    /// Applies the freeze masks implied by `subset` and `adapt_phi`.
    pub fn apply_subset(&mut self, subset: ParamSubset, adapt_phi: bool) -> Result<()> {
        let mask = select_subset(&self.classifier.store, subset)?;
        self.classifier.store.apply_mask(&mask)?;
        self.epsnet.store.freeze_all(!adapt_phi);
        self.table.store.freeze_all(!adapt_phi);
        Ok(())
    }

    fn clear_grads(&mut self) {
        self.classifier.store.clear_grads();
        self.epsnet.store.clear_grads();
        self.table.store.clear_grads();
    }

    fn zero_grads(&mut self) {
        self.classifier.store.zero_grad();
        self.epsnet.store.zero_grad();
        self.table.store.zero_grad();
    }
}

pub(crate) fn to_f64<F: Scalar>(v: &[F]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

pub(crate) fn record<F: Scalar>(step: usize, loss: Option<f64>, probs: &[F]) -> StepRecord {
    StepRecord {
        step,
        loss,
        probs: to_f64(probs),
        prediction: argmax(probs),
    }
}

/// A diverged classifier shows up as a non-finite prediction before the loss.
pub(crate) fn check_finite<F: Scalar>(g: &Graph<F>, y: Var, step: usize, chunk: &[NoisePair<F>]) -> Result<()> {
    if g.value(y).iter().all(|v| v.as_f64().is_finite()) {
        return Ok(());
    }
    Err(Error::NonFinite {
        step,
        timesteps: chunk.iter().map(|p| p.t).collect(),
    })
}

/// Optimizers that live as long as the adapted weights do.
#[derive(Debug, Clone)]
pub(crate) struct AdaptState<F> {
    classifier: Optimizer<F>,
    epsnet: Optimizer<F>,
    table: Optimizer<F>,
}

impl<F: Scalar> AdaptState<F> {
    pub(crate) fn new(cfg: OptimizerConfig) -> Self {
        AdaptState {
            classifier: Optimizer::new(cfg),
            epsnet: Optimizer::new(cfg),
            table: Optimizer::new(cfg),
        }
    }
}

/// Runs the adaptation loop on one image, mutating `models` in place.
pub(crate) fn adapt_in_place<F: Scalar>(
    x: &[F],
    models: &mut Models<F>,
    schedule: &NoiseSchedule,
    cfg: &TtaConfig,
    rng: &mut Rng,
    state: &mut AdaptState<F>,
) -> Result<AdaptationReport> {
    cfg.validate()?;
    let start = Instant::now();
    models.apply_subset(cfg.subset, cfg.adapt_phi)?;
    let digest_before = models.frozen_digest();
    let x_model = to_model_space(x);
    let dim = models.classifier.config.input_dim;
    let mut probs = models.classifier.predict(x)?;
    let mut steps = vec![record(0, None, &probs)];

    for step in 1..=cfg.steps {
        let pairs = sample_pairs_with::<F>(rng, cfg.batch, schedule, models.epsnet.image_dim(), cfg.noise);
        models.zero_grads();
        let mut total = 0.0;
        for chunk in pairs.chunks(cfg.micro_batch) {
            let mut g = Graph::new();
            let cls_bound = models.classifier.store.bind(&mut g);
            let eps_bound = models.epsnet.bind(&mut g);
            let (table_bound, table_var) = models.table.bind(&mut g);
            let xv = g.constant(vec![1, dim], x.to_vec())?;
            let y = models.classifier.forward(&mut g, &cls_bound, xv)?;
            check_finite(&g, y, step, chunk)?;
            let c = build_condition_classification(&mut g, y, table_var)?;
            let loss = diffusion_loss(&mut g, &eps_bound, schedule, &models.epsnet, &x_model, c.var(), chunk)?;
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
            models.classifier.store.accumulate(&cls_bound, &grads)?;
            models.epsnet.store.accumulate(&eps_bound, &grads)?;
            models.table.store.accumulate(&table_bound, &grads)?;
        }
        state.classifier.step(&mut models.classifier.store)?;
        if cfg.adapt_phi {
            state.epsnet.step(&mut models.epsnet.store)?;
            state.table.step(&mut models.table.store)?;
        }
        probs = models.classifier.predict(x)?;
        steps.push(record(step, Some(total), &probs));
    }
    models.clear_grads();
    Ok(AdaptationReport {
        steps,
        wall_clock: start.elapsed(),
        frozen_digest_before: digest_before,
        frozen_digest_after: models.frozen_digest(),
    })
}

/// Adapts to a single image. In single-sample mode `models` is restored to
/// its pre-call state before returning; in online mode the adapted weights
/// are kept.
pub fn adapt<F: Scalar>(
    x: &[F],
    models: &mut Models<F>,
    schedule: &NoiseSchedule,
    cfg: &TtaConfig,
) -> Result<AdaptationReport> {
    if cfg.subset == ParamSubset::LogitsOnly {
        return crate::tta::baselines::baseline_adapt_logits(x, &models.epsnet, &models.table, schedule, cfg);
    }
    let mut rng = seeded(cfg.seed);
    let mut state = AdaptState::new(cfg.optimizer);
    match cfg.mode {
        TtaMode::SingleSample => {
            let snapshot = models.clone();
            let report = adapt_in_place(x, models, schedule, cfg, &mut rng, &mut state);
            *models = snapshot;
            report
        }
        TtaMode::Online => adapt_in_place(x, models, schedule, cfg, &mut rng, &mut state),
    }
}

/// Online adaptation over `stream`, in order. Weights and optimizer state
/// persist across examples and pairs come from one seeded stream, so
/// report `i` reflects the weights after examples `0..i`.
pub fn adapt_online<'a, F: Scalar>(
    stream: impl IntoIterator<Item = &'a [F]>,
    models: &mut Models<F>,
    schedule: &NoiseSchedule,
    cfg: &TtaConfig,
) -> Result<Vec<AdaptationReport>> {
    if cfg.mode != TtaMode::Online {
        return Err(Error::contract("adapt_online requires online mode"));
    }
    if cfg.subset == ParamSubset::LogitsOnly {
        return Err(Error::UnsupportedSubset {
            subset: cfg.subset.name().into(),
            reason: "free logits have no weights to carry across a stream".into(),
        });
    }
    let mut rng = seeded(cfg.seed);
    let mut state = AdaptState::new(cfg.optimizer);
    stream
        .into_iter()
        .map(|x| adapt_in_place(x, models, schedule, cfg, &mut rng, &mut state))
        .collect()
}
