//! Synthetic benchmark data and distribution-shift corruptions.

pub mod corrupt;
pub mod synthetic;

pub use corrupt::{corrupt, Corruption, CorruptionKind};
pub use synthetic::{generate, generate_split, Dataset, SyntheticData, SyntheticSpec};
