//! Semantic anchor regularization at desk scale.
//!
//! Fixed class anchors are projected into feature space by a small embedding
//! head, kept separable by the model's own classifier through a reweighted
//! auxiliary cross-entropy, smoothed by EMA, and used as stop-gradient pull
//! targets for the learned features. A feature-mean prototype regularizer is
//! included as the comparison arm.

pub mod anchors;
pub mod data;
pub mod error;
pub mod grad;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod proto;
mod rng;
pub mod sar;
pub mod tensor;
pub mod train;

pub use anchors::{generate_anchors, AnchorSet, AnchorSource};
pub use data::{GmmSpec, LongTailDataset};
pub use error::{Error, Result};
pub use grad::{OptimizerState, SgdConfig, Tape, Var};
pub use metrics::{ConsistencyScore, MetricsReport};
pub use model::ClassifierModel;
pub use proto::PrototypeState;
pub use sar::{EmbeddingHead, SarConfig, SemanticAnchorState};
pub use tensor::Tensor2D;
pub use train::{Mode, TrainConfig, TrainLog, TrainOutput, Trainer};
