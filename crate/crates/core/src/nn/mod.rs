//! Networks, parameter stores, optimizers, and checkpoints.

pub mod checkpoint;
pub mod classifier;
pub mod epsnet;
pub mod layers;
pub mod optim;
pub mod params;
pub mod subset;
pub mod train;

pub use checkpoint::{decode, encode, load_checkpoint, save_checkpoint, split_store, Record, RecordData};
pub use classifier::{argmax, Classifier, ClassifierConfig};
pub use epsnet::{time_embedding, ClassEmbeddingTable, Denoiser, EpsNetConfig, EpsilonNet};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{Binding, FreezeMask, Param, ParamKind, ParamStore};
pub use subset::{select_subset, ParamSubset};
pub use train::{accuracy, cross_entropy, train_classifier, ClassifierTrainConfig};
