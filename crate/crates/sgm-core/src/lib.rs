//! Scene-graph matching for relationship-aware image–text retrieval.
//!
//! The crate implements the full SGM pipeline at desk scale:
//!
//! * [`tape`] — a minimal reverse-mode autodiff engine (flat tape, f64).
//! * [`graph`] — visual/textual scene-graph data model and validation.
//! * [`vsg`] / [`tsg`] — the two encoders: label-embedding fusion plus a
//!   multi-modal GCN on the visual side; word and path bi-GRUs on the
//!   textual side. Both project into a joint D-dimensional space.
//! * [`matching`] — object- and relationship-level similarity and the
//!   triplet ranking losses (sum-over-negatives and hardest-negative).
//! * [`trainer`] / [`adam`] — seeded, bitwise-reproducible mini-batch
//!   training.
//! * [`eval`] — R@k and Medr retrieval metrics in both directions.
//! * [`synth`] — deterministic synthetic corpora, including a
//!   relation-only flavor where object information alone cannot
//!   distinguish pairs.
//! * [`io`] — corpus files, checkpoints, and score-matrix dumps.
//! * [`gradcheck`] — finite-difference verification of every operation
//!   and of the assembled pipelines.
//!
//! Ablation [`model::Mode`]s gate relationship and context processing:
//! parameters outside the active mode never join the loss graph and
//! therefore receive exactly zero gradient.

pub mod adam;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod matching;
pub mod model;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod tsg;
pub mod vsg;

pub use error::{Result, SgmError};
pub use eval::{evaluate, evaluate_both, Direction, ReportSummary, RetrievalReport};
pub use graph::{Corpus, ObjectNode, RelationshipNode, TextualSceneGraph, VisualSceneGraph};
pub use matching::{score_pair, SimilarityBreakdown};
pub use model::{Mode, ModelConfig, SgmModel};
pub use synth::{generate_synthetic, SynthSpec};
pub use tensor::Tensor;
pub use trainer::{train, train_with, Checkpoint, TrainConfig, TrainOutcome};
