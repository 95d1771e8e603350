//! Decider-guided dynamic token merging (D³ToM) on a toy masked-diffusion
//! transformer, with an analytical FLOPs model of the same computation.
//!
//! - [`numkernel`]: deterministic dense kernels.
//! - [`toymodel`]: seeded bidirectional transformer and its weight file.
//! - [`diffusion`]: the masked-diffusion decoding loop and decider sets.
//! - [`merge`]: importance scoring, kept/merged partition, similarity merge
//!   and the merge-ratio schedules.
//! - [`streamscore`]: tiled attention and decider scores in bounded memory.
//! - [`kvcache`]: prefix K/V cache with decider-guided cache merging.
//! - [`costmodel`]: closed-form FLOPs for the baseline, D³ToM and the
//!   pruning methods it is compared against.

pub mod costmodel;
pub mod diffusion;
pub mod error;
pub mod kvcache;
pub mod merge;
pub mod numkernel;
pub mod streamscore;
pub mod toymodel;

pub use costmodel::{CostParams, CostReport, Method};
pub use diffusion::{run_decode, DeciderSet, DecodeOutput, SequenceState, StepTrace};
pub use error::{Error, Result};
pub use merge::{MergePlan, MergeSchedule, MergeTrace};
pub use numkernel::Matrix;
pub use streamscore::BlockSpec;
pub use toymodel::{init_weights, ModelConfig, Prompt, Weights};
