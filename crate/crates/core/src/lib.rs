//! Multi-aspect dense retrieval with aspect-content mutual-prediction
//! pre-training.
//!
//! The crate covers the whole pipeline: data ([`corpus`]), tokenization and
//! masking ([`textproc`]), a small transformer with reverse-mode autodiff
//! ([`neural`]), the pre-training and fine-tuning losses ([`objectives`]),
//! optimization loops ([`training`]), retrieval and metrics ([`eval`]) and
//! experiment orchestration ([`pipeline`]).

pub mod corpus;
pub mod error;
pub mod eval;
pub mod neural;
pub mod objectives;
pub mod pipeline;
pub mod textproc;
pub mod training;

pub use corpus::{AspectSchema, Label, Qrel, Qrels, Record, RecordKind, SplitSpec};
pub use error::{Error, Result};
pub use neural::{Checkpoint, Model, ModelConfig, Tensor};
pub use objectives::{PretrainMode, PretrainScheme};
pub use textproc::{EncoderInput, MaskingPlan, TemplateMode, Vocabulary};
