//! Memory-assisted sub-prototype mining for universal domain adaptation.
//!
//! The engine operates on embedding vectors. A frozen encoder produces a
//! query `z`; a learnable memory of `N` items × `S` sub-prototypes is
//! addressed by cosine attention, each item contributes its best-matching
//! sub-prototype, an adaptive top-K threshold drops all but the most relevant
//! items, and the retrieved task-oriented embedding `ẑ` feeds a classifier and
//! a reconstruction decoder. Target clusters that find no mutual match among
//! the source classes are rejected as unknown.

// `!(x > y)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adaptation;
pub mod checkpoint;
pub mod data;
mod error;
pub mod evaluation;
pub mod inspect;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod pipeline;

pub use adaptation::{LossWeights, PseudoLabeling, TrainConfig};
pub use data::{Domain, EmbeddingDataset, SyntheticSpec};
pub use error::{Error, Result};
pub use evaluation::{LabelSplit, Metrics, Prediction, Scenario};
pub use memory::{AddressingResult, MemoryBank, MemoryConfig};
pub use model::{EncoderSpec, Model, ModelConfig};
pub use numerics::{ParamStore, RealMatrix, SgdConfig};
