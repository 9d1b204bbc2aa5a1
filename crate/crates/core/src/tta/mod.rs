//! Test-time adaptation through the diffusion loss, and baselines.

pub mod adapt;
pub mod baselines;
pub mod condition;

pub use adapt::{adapt, adapt_online, AdaptationReport, Models, StepRecord, TtaConfig, TtaMode};
pub use baselines::{
    baseline_adapt_logits, baseline_ensemble, baseline_entropy_tta, diffusion_classifier,
    DiffusionClassification,
};
pub use condition::{
    build_condition_classification, build_condition_depth, build_condition_pixel, Condition,
};
