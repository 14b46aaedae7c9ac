//! Selective fine-tuning of small models: scoring heuristics, incremental
//! top-k mask selection, masked SGD, sparse checkpoints and diagnostics.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod heuristics;
pub mod mask_store;
pub mod model;
pub mod rng;
pub mod selection;
pub mod tensor;
pub mod trainer;

mod codec;

pub use data::{Dataset, GeneratorSpec, TaskData};
pub use error::{Error, Result};
pub use heuristics::{HeuristicConfig, HeuristicKind, ScoreField};
pub use mask_store::SparseCheckpoint;
pub use model::{Activation, Model, ModelConfig, ParamId, ParamKind};
pub use selection::{MaskSelector, MaskSet, Strategy, StrategyConfig};
pub use tensor::{Tape, Tensor};
pub use trainer::{DenseConfig, FinetuneOutcome, TrainConfig, TrainReport};
