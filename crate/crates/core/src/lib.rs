//! Circuit ablation and faithfulness measurement for small transformers.
//!
//! The crate provides:
//! - a reverse-mode autodiff tape over dense `f64` tensors ([`tensor`]),
//! - a factorized transformer computation graph with edge-level activation
//!   patching ([`graph`]),
//! - the full ablation methodology space: component granularity, donor
//!   value, token positions, direction, and target set ([`ablation`]),
//! - faithfulness metrics with explicit averaging-order control
//!   ([`metrics`]),
//! - circuit discovery by greedy edge pruning, differentiable masking, and
//!   attribution scores ([`discovery`]),
//! - analytically constructed toy models with known ground-truth circuits
//!   ([`forge`], [`rasp`]),
//! - ROC analysis against ground truth ([`roc`]) and file formats
//!   ([`serial`]).

pub mod ablation;
pub mod data;
pub mod discovery;
pub mod error;
pub mod forge;
pub mod graph;
pub mod metrics;
pub mod rasp;
pub mod roc;
pub mod serial;
pub mod tensor;
pub mod testkit;

pub use ablation::{AblationSpec, AblationValue, Component, Direction, TargetSet, TokenPositions};
pub use data::{AnswerSpec, PromptPair, PromptPairBatch, TokenAnswer};
pub use error::{AblateError, Result};
pub use graph::{build_model, Circuit, Edge, Granularity, ModelSpec, NodeId, PatchableModel, Positions};
pub use metrics::{AveragingOrder, DistributionStats, FaithfulnessReport};
pub use tensor::{Tape, Tensor, Var};
