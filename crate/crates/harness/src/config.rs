//! Experiment configuration. The on-disk form is TOML with one table per
//! section and scalar or array values only; every field has a default, so
//! an empty file is a valid config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dtta_core::data::{Corruption, SyntheticSpec};
use dtta_core::diffusion::NoiseSharing;
use dtta_core::nn::{ClassifierConfig, EpsNetConfig, OptimizerConfig, ParamSubset};
use dtta_core::tta::{TtaConfig, TtaMode};

use crate::error::{HarnessError, Result};

/// Environment variable naming the directory relative paths resolve against.
pub const OUTPUT_ROOT_VAR: &str = "DTTA_OUTPUT_ROOT";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub corruption: CorruptionSection,
    pub model: ModelSection,
    pub tta: TtaSection,
    pub experiment: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub side: usize,
    pub classes: usize,
    pub jitter: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSection {
    pub kind: String,
    pub severity: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub classifier_hidden: Vec<usize>,
    pub layer_norm: bool,
    pub classifier_epochs: usize,
    pub classifier_batch: usize,
    pub classifier_lr: f64,
    pub epsnet_hidden: Vec<usize>,
    pub cond_dim: usize,
    pub timesteps: usize,
    pub diffusion_epochs: usize,
    pub diffusion_batch: usize,
    pub diffusion_lr: f64,
    /// Seeds weight initialisation of all three models, in order.
    pub init_seed: u64,
    /// Seeds minibatch order and training noise.
    pub train_seed: u64,
    /// Low-rank adapters added to the classifier at load time; 0 for none.
    pub adapter_rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    SingleSample,
    Online,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseName {
    Independent,
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaSection {
    pub steps: usize,
    pub batch: usize,
    pub micro_batch: usize,
    pub optimizer: OptimizerName,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub subset: String,
    pub adapt_phi: bool,
    pub mode: ModeName,
    pub noise: NoiseName,
    /// Test images drawn per seed.
    pub examples: usize,
    /// Pairs per class for the diffusion classifier baseline.
    pub dc_pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    None,
    DiffusionTta,
    Entropy,
    AdaptLogits,
    AdaptLogitsEnsemble,
    DiffusionClassifier,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::DiffusionTta => "diffusion_tta",
            Method::Entropy => "entropy",
            Method::AdaptLogits => "adapt_logits",
            Method::AdaptLogitsEnsemble => "adapt_logits_ensemble",
            Method::DiffusionClassifier => "diffusion_classifier",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Ablation cells to run; empty means the whole grid.
    pub cells: Vec<String>,
    pub checkpoints: String,
    pub output: String,
    /// Worker threads for single-sample runs; 0 lets the pool decide.
    pub threads: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        DataSection {
            side: s.side,
            classes: s.classes,
            jitter: s.jitter,
            train_count: s.train_count,
            test_count: s.test_count,
            seed: s.seed,
        }
    }
}

impl Default for CorruptionSection {
    fn default() -> Self {
        CorruptionSection {
            kind: "gaussian_noise".into(),
            severity: 5,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            classifier_hidden: vec![128, 128],
            layer_norm: true,
            classifier_epochs: 15,
            classifier_batch: 32,
            classifier_lr: 1e-3,
            epsnet_hidden: vec![512, 512],
            cond_dim: 32,
            timesteps: 1000,
            diffusion_epochs: 300,
            diffusion_batch: 64,
            diffusion_lr: 1e-3,
            init_seed: 1,
            train_seed: 0,
            adapter_rank: 0,
        }
    }
}

impl Default for TtaSection {
    fn default() -> Self {
        TtaSection {
            steps: 5,
            batch: 64,
            micro_batch: 64,
            optimizer: OptimizerName::SgdMomentum,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            subset: "all".into(),
            adapt_phi: false,
            mode: ModeName::SingleSample,
            noise: NoiseName::Independent,
            examples: 200,
            dc_pairs: 64,
        }
    }
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            methods: vec![Method::None, Method::DiffusionTta],
            seeds: vec![1, 2, 3, 4, 5],
            cells: Vec::new(),
            checkpoints: "checkpoints".into(),
            output: "results".into(),
            threads: 0,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(e.to_string())
}

/// Parses `text`, then applies `key=value` overrides such as `tta.lr=0.2`.
/// Values use TOML syntax; anything that does not parse as TOML is taken
/// as a bare string.
pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = text.parse().map_err(config_err)?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("override {item:?} is not key=value")))?;
        let (section, field) = key
            .trim()
            .split_once('.')
            .ok_or_else(|| HarnessError::Config(format!("override key {key:?} needs section.field")))?;
        let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.trim().to_string()),
        };
        let entry = table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        match entry {
            toml::Value::Table(t) => {
                t.insert(field.to_string(), value);
            }
            _ => return Err(HarnessError::Config(format!("{section} is not a section"))),
        }
    }
    let cfg: ExperimentConfig = table.try_into().map_err(config_err)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| HarnessError::io(p, e))?,
        None => String::new(),
    };
    parse_with_overrides(&text, overrides)
}

impl ExperimentConfig {
    /// Canonical text form; this is what result files embed.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.corruption()?;
        self.tta_config(0)?.validate()?;
        self.subset()?;
        if self.tta.examples == 0 || self.tta.examples > self.data.test_count {
            return Err(HarnessError::Config(format!(
                "tta.examples {} must lie in 1..={}",
                self.tta.examples, self.data.test_count
            )));
        }
        if self.experiment.seeds.is_empty() {
            return Err(HarnessError::Config("experiment.seeds is empty".into()));
        }
        Ok(())
    }

    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            side: self.data.side,
            classes: self.data.classes,
            jitter: self.data.jitter,
            train_count: self.data.train_count,
            test_count: self.data.test_count,
            seed: self.data.seed,
        }
    }

    pub fn corruption(&self) -> Result<Corruption> {
        Ok(Corruption::new(self.corruption.kind.parse()?, self.corruption.severity)?)
    }

    pub fn subset(&self) -> Result<ParamSubset> {
        Ok(self.tta.subset.parse()?)
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            input_dim: self.data.side * self.data.side,
            hidden: self.model.classifier_hidden.clone(),
            classes: self.data.classes,
            layer_norm: self.model.layer_norm,
        }
    }

    pub fn epsnet_config(&self) -> EpsNetConfig {
        EpsNetConfig {
            image_dim: self.data.side * self.data.side,
            cond_dim: self.model.cond_dim,
            hidden: self.model.epsnet_hidden.clone(),
            timesteps: self.model.timesteps,
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        let base = match self.tta.optimizer {
            OptimizerName::SgdMomentum => OptimizerConfig::sgd_momentum(),
            OptimizerName::Adam => OptimizerConfig::adam(),
        };
        OptimizerConfig {
            weight_decay: self.tta.weight_decay,
            ..base.with_lr(self.tta.lr).with_momentum(self.tta.momentum)
        }
    }

    /// Core adaptation settings for one example; `seed` is its pair stream.
    pub fn tta_config(&self, seed: u64) -> Result<TtaConfig> {
        Ok(TtaConfig {
            steps: self.tta.steps,
            batch: self.tta.batch,
            micro_batch: self.tta.micro_batch,
            optimizer: self.optimizer(),
            subset: self.subset()?,
            adapt_phi: self.tta.adapt_phi,
            mode: match self.tta.mode {
                ModeName::SingleSample => TtaMode::SingleSample,
                ModeName::Online => TtaMode::Online,
            },
            noise: match self.tta.noise {
                NoiseName::Independent => NoiseSharing::Independent,
                NoiseName::Shared => NoiseSharing::Shared,
            },
            seed,
        })
    }
}

/// Resolved locations for one run. Relative config paths hang off the
/// output root.
#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

impl Paths {
    pub fn resolve(cfg: &ExperimentConfig, root: &Path) -> Paths {
        Paths {
            checkpoints: root.join(&cfg.experiment.checkpoints),
            output: root.join(&cfg.experiment.output),
        }
    }
}

/// The output root: `$DTTA_OUTPUT_ROOT`, else the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}
