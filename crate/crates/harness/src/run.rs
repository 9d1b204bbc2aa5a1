//! The `train`, `tta`, `ablate` and `replay` subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use dtta_core::data::{corrupt, generate, Dataset};
use dtta_core::diffusion::{to_model_space, train_diffusion, DiffusionTrainConfig, NoiseSchedule, NoiseSharing};
use dtta_core::nn::{
    argmax, load_checkpoint, save_checkpoint, split_store, train_classifier, ClassEmbeddingTable, Classifier,
    ClassifierTrainConfig, EpsilonNet, OptimizerConfig, ParamStore, ParamSubset,
};
use dtta_core::rng::{derive, seeded};
use dtta_core::tta::{
    adapt, adapt_online, baseline_adapt_logits, baseline_ensemble, baseline_entropy_tta, diffusion_classifier,
    Models, StepRecord, TtaConfig, TtaMode,
};

use crate::config::{ExperimentConfig, Method, Paths};
use crate::error::{HarnessError, Result};
use crate::results::{preamble, read_preamble, write_atomic, write_results, ResultRow};

/// Experiments run in single precision.
pub type F = f32;

pub const CLASSIFIER_FILE: &str = "classifier.dtta";
pub const DIFFUSION_FILE: &str = "diffusion.dtta";
pub const TRAINING_FILE: &str = "training.csv";
pub const TTA_FILE: &str = "tta.csv";
pub const ABLATE_FILE: &str = "ablate.csv";

// rng stream labels under a seed
const PICK: u64 = 11;
const CORRUPT: u64 = 12;
const PAIRS: u64 = 13;
const RANDOM_INIT: u64 = 14;
const ADAPTERS: u64 = 15;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Write one JSON line per adapted example next to the CSV.
    pub dump_reports: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub classifier_curve: Vec<f64>,
    pub diffusion_curve: Vec<f64>,
    pub clean_accuracy: f64,
}

fn schedule(cfg: &ExperimentConfig) -> Result<NoiseSchedule> {
    Ok(NoiseSchedule::linear(cfg.model.timesteps)?)
}

fn non_finite(step: usize) -> HarnessError {
    dtta_core::Error::NonFinite {
        step,
        timesteps: vec![],
    }
    .into()
}

/// Fresh, untrained models drawn from `model.init_seed`.
pub fn init_models(cfg: &ExperimentConfig) -> Result<Models<F>> {
    let mut rng = seeded(cfg.model.init_seed);
    let classifier = Classifier::new(cfg.classifier_config(), &mut rng)?;
    let epsnet = EpsilonNet::new(cfg.epsnet_config(), &mut rng)?;
    let table = ClassEmbeddingTable::new(cfg.data.classes, cfg.model.cond_dim, &mut rng)?;
    Ok(Models {
        classifier,
        epsnet,
        table,
    })
}

pub fn train(cfg: &ExperimentConfig, paths: &Paths) -> Result<TrainOutcome> {
    let data = generate::<F>(&cfg.spec())?;
    let mut models = init_models(cfg)?;
    let m = &cfg.model;

    let classifier_curve = train_classifier(
        &data.train.images,
        &data.train.labels,
        &mut models.classifier,
        &ClassifierTrainConfig {
            epochs: m.classifier_epochs,
            batch: m.classifier_batch,
            optimizer: OptimizerConfig::adam().with_lr(m.classifier_lr),
            seed: m.train_seed,
        },
    )?;
    if let Some(e) = classifier_curve.iter().position(|v| !v.is_finite()) {
        return Err(non_finite(e));
    }
    let diffusion_curve = train_diffusion(
        &to_model_space(&data.train.images),
        &data.train.labels,
        &mut models.epsnet,
        &mut models.table,
        &schedule(cfg)?,
        &DiffusionTrainConfig {
            epochs: m.diffusion_epochs,
            batch: m.diffusion_batch,
            optimizer: OptimizerConfig::adam().with_lr(m.diffusion_lr),
            seed: m.train_seed,
        },
    )?;

    let mut diffusion = ParamStore::new();
    for (path, p) in models.epsnet.store.iter().chain(models.table.store.iter()) {
        diffusion.insert(path, p.tensor.clone())?;
    }
    write_atomic(&paths.checkpoints.join(CLASSIFIER_FILE), &save_checkpoint(&models.classifier.store))?;
    write_atomic(&paths.checkpoints.join(DIFFUSION_FILE), &save_checkpoint(&diffusion))?;

    let mut curve = preamble("train", cfg);
    curve.push_str("model,epoch,loss\n");
    for (name, values) in [("classifier", &classifier_curve), ("diffusion", &diffusion_curve)] {
        for (e, v) in values.iter().enumerate() {
            curve.push_str(&format!("{name},{},{v}\n", e + 1));
        }
    }
    write_atomic(&paths.checkpoints.join(TRAINING_FILE), curve.as_bytes())?;

    let clean_accuracy = dtta_core::nn::accuracy(&models.classifier, &data.test.images, &data.test.labels)?;
    Ok(TrainOutcome {
        classifier_curve,
        diffusion_curve,
        clean_accuracy,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| HarnessError::io(path, e))
}

/// Loads the checkpoints written by [`train`] for this config.
pub fn load_models(cfg: &ExperimentConfig, paths: &Paths) -> Result<Models<F>> {
    let classifier_store = load_checkpoint::<F>(&read(&paths.checkpoints.join(CLASSIFIER_FILE))?)?;
    let diffusion = load_checkpoint::<F>(&read(&paths.checkpoints.join(DIFFUSION_FILE))?)?;
    let (table, eps) = split_store(diffusion, "embed/")?;
    let mut classifier = Classifier::from_store(cfg.classifier_config(), classifier_store)?;
    if cfg.model.adapter_rank > 0 {
        classifier.add_adapters(cfg.model.adapter_rank, &mut seeded(derive(cfg.model.init_seed, ADAPTERS)))?;
    }
    Ok(Models {
        classifier,
        epsnet: EpsilonNet::from_store(cfg.epsnet_config(), eps)?,
        table: ClassEmbeddingTable::from_store(table)?,
    })
}

/// The corrupted test images one seed evaluates on.
pub struct Episode {
    pub indices: Vec<usize>,
    pub images: Vec<Vec<F>>,
    pub labels: Vec<usize>,
    /// Pair-stream seed of each example.
    pub seeds: Vec<u64>,
}

impl Episode {
    pub fn draw(cfg: &ExperimentConfig, test: &Dataset<F>, seed: u64) -> Result<Episode> {
        use rand::seq::SliceRandom;
        let corruption = cfg.corruption()?;
        let mut order: Vec<usize> = (0..test.len()).collect();
        order.shuffle(&mut seeded(derive(seed, PICK)));
        order.truncate(cfg.tta.examples);
        let images = order
            .iter()
            .map(|&i| {
                let mut rng = seeded(derive(derive(seed, CORRUPT), i as u64));
                corrupt(test.image(i), cfg.data.side, corruption, &mut rng)
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(Episode {
            labels: order.iter().map(|&i| test.labels[i]).collect(),
            seeds: order.iter().map(|&i| derive(derive(seed, PAIRS), i as u64)).collect(),
            indices: order,
            images,
        })
    }

    fn accuracy(&self, predictions: &[usize]) -> f64 {
        let hits = predictions.iter().zip(&self.labels).filter(|(p, l)| p == l).count();
        hits as f64 / self.labels.len() as f64
    }
}

/// What one method did to one example.
#[derive(Debug, Clone)]
struct ExampleOutcome {
    prediction: usize,
    losses: Vec<f64>,
    steps: Vec<StepRecord>,
}

impl ExampleOutcome {
    fn plain(prediction: usize) -> Self {
        ExampleOutcome {
            prediction,
            losses: Vec::new(),
            steps: Vec::new(),
        }
    }
}

fn predict_one(classifier: &Classifier<F>, x: &[F]) -> Result<Vec<f64>> {
    Ok(classifier.predict(x)?.into_iter().map(f64::from).collect())
}

fn run_example(
    method: Method,
    cfg: &ExperimentConfig,
    tta: &TtaConfig,
    models: &mut Models<F>,
    schedule: &NoiseSchedule,
    x: &[F],
    seed: u64,
) -> Result<ExampleOutcome> {
    let tta = TtaConfig { seed, ..*tta };
    let from_report = |r: dtta_core::tta::AdaptationReport| ExampleOutcome {
        prediction: r.final_prediction(),
        losses: r.losses(),
        steps: r.steps,
    };
    Ok(match method {
        Method::None => ExampleOutcome::plain(argmax(&predict_one(&models.classifier, x)?)),
        Method::DiffusionTta => from_report(adapt(x, models, schedule, &tta)?),
        Method::Entropy => from_report(baseline_entropy_tta(x, &models.classifier, &tta)?),
        Method::AdaptLogits => from_report(baseline_adapt_logits(x, &models.epsnet, &models.table, schedule, &tta)?),
        Method::AdaptLogitsEnsemble => {
            let report = baseline_adapt_logits(x, &models.epsnet, &models.table, schedule, &tta)?;
            let ens = baseline_ensemble(&predict_one(&models.classifier, x)?, &report.last().probs)?;
            ExampleOutcome {
                prediction: argmax(&ens),
                ..from_report(report)
            }
        }
        Method::DiffusionClassifier => {
            let dc = diffusion_classifier(x, &models.epsnet, &models.table, schedule, cfg.tta.dc_pairs, &mut seeded(seed))?;
            ExampleOutcome {
                prediction: dc.prediction,
                losses: dc.losses,
                steps: Vec::new(),
            }
        }
    })
}

fn pool(cfg: &ExperimentConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.experiment.threads)
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))
}

fn run_method(
    method: Method,
    cfg: &ExperimentConfig,
    tta: &TtaConfig,
    models: &Models<F>,
    schedule: &NoiseSchedule,
    ep: &Episode,
    pool: &rayon::ThreadPool,
) -> Result<Vec<ExampleOutcome>> {
    if method == Method::DiffusionTta && tta.mode == TtaMode::Online {
        // one pass over the stream in episode order; the stream seed is the first example's
        let mut m = models.clone();
        let stream_cfg = TtaConfig { seed: ep.seeds[0], ..*tta };
        let reports = adapt_online(ep.images.iter().map(|x| x.as_slice()), &mut m, schedule, &stream_cfg)?;
        return Ok(reports
            .into_iter()
            .map(|r| ExampleOutcome {
                prediction: r.final_prediction(),
                losses: r.losses(),
                steps: r.steps,
            })
            .collect());
    }
    let single = TtaConfig {
        mode: TtaMode::SingleSample,
        ..*tta
    };
    pool.install(|| {
        ep.images
            .par_iter()
            .zip(ep.seeds.par_iter())
            .map_init(
                || models.clone(),
                |m, (x, &seed)| run_example(method, cfg, &single, m, schedule, x, seed),
            )
            .collect()
    })
}

fn mean_trajectory(outcomes: &[ExampleOutcome], method: Method) -> Vec<f64> {
    if method == Method::DiffusionClassifier || outcomes.is_empty() {
        return Vec::new();
    }
    let len = outcomes[0].losses.len();
    (0..len)
        .map(|s| outcomes.iter().map(|o| o.losses[s]).sum::<f64>() / outcomes.len() as f64)
        .collect()
}

/// One row of the grid: a method plus the settings it runs under.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub method: Method,
    pub tta: TtaConfig,
    /// Evaluate a freshly initialised classifier instead of the trained one.
    pub random_init: bool,
}

impl Cell {
    fn subset_label(&self) -> &'static str {
        match self.method {
            Method::None | Method::DiffusionClassifier => "none",
            Method::Entropy => ParamSubset::NormLayers.name(),
            Method::AdaptLogits | Method::AdaptLogitsEnsemble => ParamSubset::LogitsOnly.name(),
            Method::DiffusionTta => self.tta.subset.name(),
        }
    }

    fn adapt_phi(&self) -> bool {
        self.method == Method::DiffusionTta && self.tta.adapt_phi
    }
}

/// Cells for `tta`: each configured method under the configured settings.
pub fn method_cells(cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    let tta = cfg.tta_config(0)?;
    Ok(cfg
        .experiment
        .methods
        .iter()
        .map(|&method| Cell {
            name: "default".into(),
            method,
            tta,
            random_init: false,
        })
        .collect())
}

/// Names of the ablation grid, in output order. The first four add one
/// component at a time: a single pair, a batch of timesteps sharing one
/// noise draw, independent noise per pair, then adapting the diffusion
/// weights. The rest vary what is adapted.
pub const GRID: [&str; 9] = [
    "single_pair",
    "timestep_aug",
    "noise_aug",
    "adapt_phi",
    "random_init",
    "adapt_logits",
    "adapt_logits_ensemble",
    "norm_layers",
    "last_layer",
];

pub fn grid_cells(cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    let base = TtaConfig {
        adapt_phi: false,
        noise: NoiseSharing::Independent,
        ..cfg.tta_config(0)?
    };
    let wanted = &cfg.experiment.cells;
    if let Some(bad) = wanted.iter().find(|c| !GRID.contains(&c.as_str())) {
        return Err(HarnessError::Config(format!("unknown ablation cell {bad:?}")));
    }
    let cell = |name: &str, method, tta, random_init| Cell {
        name: name.into(),
        method,
        tta,
        random_init,
    };
    let all = vec![
        cell(
            "single_pair",
            Method::DiffusionTta,
            TtaConfig {
                batch: 1,
                micro_batch: 1,
                ..base
            },
            false,
        ),
        cell(
            "timestep_aug",
            Method::DiffusionTta,
            TtaConfig {
                noise: NoiseSharing::Shared,
                ..base
            },
            false,
        ),
        cell("noise_aug", Method::DiffusionTta, base, false),
        cell(
            "adapt_phi",
            Method::DiffusionTta,
            TtaConfig {
                adapt_phi: true,
                ..base
            },
            false,
        ),
        cell("random_init", Method::DiffusionTta, base, true),
        cell("adapt_logits", Method::AdaptLogits, base, false),
        cell("adapt_logits_ensemble", Method::AdaptLogitsEnsemble, base, false),
        cell(
            "norm_layers",
            Method::DiffusionTta,
            TtaConfig {
                subset: ParamSubset::NormLayers,
                ..base
            },
            false,
        ),
        cell(
            "last_layer",
            Method::DiffusionTta,
            TtaConfig {
                subset: ParamSubset::LastLayer,
                ..base
            },
            false,
        ),
    ];
    Ok(all
        .into_iter()
        .filter(|c| wanted.is_empty() || wanted.contains(&c.name))
        .collect())
}

#[derive(Serialize)]
struct DumpLine<'a> {
    method: &'a str,
    condition: &'a str,
    seed: u64,
    index: usize,
    label: usize,
    prediction: usize,
    losses: &'a [f64],
    probs: Vec<&'a [f64]>,
}

/// Runs `cells` over every seed. Rows come out seed-major, cells in order.
pub fn run_cells(
    cfg: &ExperimentConfig,
    paths: &Paths,
    cells: &[Cell],
    opts: &RunOptions,
    dump: Option<&Path>,
) -> Result<Vec<ResultRow>> {
    let data = generate::<F>(&cfg.spec())?;
    let models = load_models(cfg, paths)?;
    let schedule = schedule(cfg)?;
    let corruption = cfg.corruption()?.to_string();
    let pool = pool(cfg)?;
    let mut rows = Vec::new();
    let mut dumped = String::new();
    for &seed in &cfg.experiment.seeds {
        let ep = Episode::draw(cfg, &data.test, seed)?;
        let stacked: Vec<F> = ep.images.concat();
        let before_of = |c: &Classifier<F>| -> Result<f64> {
            let probs = c.predict(&stacked)?;
            let preds: Vec<usize> = probs.chunks(cfg.data.classes).map(argmax).collect();
            Ok(ep.accuracy(&preds))
        };
        let trained_before = before_of(&models.classifier)?;
        for cell in cells {
            let start = Instant::now();
            let (m, before) = if cell.random_init {
                let mut m = models.clone();
                m.classifier = Classifier::new(cfg.classifier_config(), &mut seeded(derive(seed, RANDOM_INIT)))?;
                let before = before_of(&m.classifier)?;
                (m, before)
            } else {
                (models.clone(), trained_before)
            };
            let outcomes = run_method(cell.method, cfg, &cell.tta, &m, &schedule, &ep, &pool)?;
            let preds: Vec<usize> = outcomes.iter().map(|o| o.prediction).collect();
            let after = if cell.method == Method::None { before } else { ep.accuracy(&preds) };
            rows.push(ResultRow::new(
                cell.method.name(),
                &cell.name,
                cell.subset_label(),
                cell.adapt_phi(),
                &corruption,
                seed,
                ep.labels.len(),
                before,
                after,
                mean_trajectory(&outcomes, cell.method),
                start.elapsed(),
            ));
            if opts.dump_reports {
                for (k, o) in outcomes.iter().enumerate() {
                    let line = DumpLine {
                        method: cell.method.name(),
                        condition: &cell.name,
                        seed,
                        index: ep.indices[k],
                        label: ep.labels[k],
                        prediction: o.prediction,
                        losses: &o.losses,
                        probs: o.steps.iter().map(|s| s.probs.as_slice()).collect(),
                    };
                    dumped.push_str(&serde_json::to_string(&line).expect("dump line serialises"));
                    dumped.push('\n');
                }
            }
        }
    }
    if let Some(path) = dump.filter(|_| opts.dump_reports) {
        write_atomic(path, dumped.as_bytes())?;
    }
    Ok(rows)
}

fn run_table(cfg: &ExperimentConfig, paths: &Paths, opts: &RunOptions, command: &str) -> Result<(PathBuf, Vec<ResultRow>)> {
    let (cells, file) = match command {
        "tta" => (method_cells(cfg)?, TTA_FILE),
        "ablate" => (grid_cells(cfg)?, ABLATE_FILE),
        other => return Err(HarnessError::Config(format!("{other} does not produce a result table"))),
    };
    let csv = paths.output.join(file);
    let dump = csv.with_file_name(format!("{command}_reports.jsonl"));
    let rows = run_cells(cfg, paths, &cells, opts, Some(&dump))?;
    write_results(&csv, command, cfg, &rows)?;
    Ok((csv, rows))
}

pub fn tta(cfg: &ExperimentConfig, paths: &Paths, opts: &RunOptions) -> Result<(PathBuf, Vec<ResultRow>)> {
    run_table(cfg, paths, opts, "tta")
}

pub fn ablate(cfg: &ExperimentConfig, paths: &Paths, opts: &RunOptions) -> Result<(PathBuf, Vec<ResultRow>)> {
    run_table(cfg, paths, opts, "ablate")
}

/// Reruns the command embedded in `file`, writing into `out`, and checks
/// the new file is byte-identical. Checkpoints are read from the original
/// run's location unless the file itself came from `train`.
pub fn replay(file: &Path, root: &Path, out: &Path) -> Result<PathBuf> {
    let (command, cfg) = read_preamble(file)?;
    let mut paths = Paths::resolve(&cfg, root);
    paths.output = out.to_path_buf();
    let produced = match command.as_str() {
        "train" => {
            paths.checkpoints = out.to_path_buf();
            train(&cfg, &paths)?;
            out.join(TRAINING_FILE)
        }
        "tta" | "ablate" => run_table(&cfg, &paths, &RunOptions::default(), &command)?.0,
        other => return Err(HarnessError::Config(format!("cannot replay command {other:?}"))),
    };
    if read(&produced)? != read(file)? {
        return Err(HarnessError::ReplayMismatch(file.to_path_buf()));
    }
    Ok(produced)
}
