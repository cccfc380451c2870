//! Evolved model-agnostic loss learning: a small reverse-mode autodiff
//! engine, a genetic-programming search over symbolic losses, unrolled
//! optimization of loss weights, filtered fitness evaluation and an
//! analytic label-smoothing loss family.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod evolution;
pub mod expr;
pub mod fitness;
pub mod gp;
pub mod learner;
pub mod losses;
pub mod meta;
pub mod network;
pub mod primitive;
pub mod smoothing;
pub mod train;

pub use autodiff::{Graph, NodeId, Tensor};
pub use config::RunConfig;
pub use data::{DatasetSpec, SplitPreset, TaskDataset, TaskKind};
pub use error::{Error, Result};
pub use evolution::{EvolutionConfig, EvolutionRun, RunManifest};
pub use expr::{ExprTree, Symbol};
pub use fitness::{Disposition, FilterConfig, Fitness};
pub use gp::GpConfig;
pub use learner::{LearnerSpec, Mlp, Model};
pub use losses::{BuiltinLoss, PredictionLoss, Scaled};
pub use meta::{optimize_loss, MetaTrainConfig};
pub use network::{Activation, LossDocument, MetaLossNetwork};
pub use primitive::Primitive;
pub use smoothing::{SmoothingLoss, SmoothingParams};
pub use train::{train_at_meta_test, TrainConfig, TrainReport};
