//! Graph-convolutional recommendation engine fusing collaborative and
//! multimodal signals.
//!
//! The pipeline: interactions and precomputed modality features are loaded
//! and k-core filtered (`dataset`), the normalized bipartite and item-item
//! similarity graphs are built (`graphs`), item embeddings start from a
//! whitening of the modality features with users mean-pooled on top
//! (`init`), the forward pass runs a per-dimension stepwise graph
//! convolution (`stepwise`), and training applies BPR loss with AdamW
//! whose item-side descent directions are transformed through the
//! similarity graph (`training`). Ranking metrics and the behavior
//! uncertainty analysis live in `eval`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod graphs;
pub mod init;
pub mod mat;
pub mod rng;
pub mod stepwise;
pub mod synth;
pub mod training;

pub use config::RunConfig;
pub use dataset::{InteractionDataset, ModalityFeatures};
pub use error::{Error, Result};
pub use graphs::SparsePropagationGraph;
pub use init::EmbeddingTable;
pub use mat::Mat;
pub use stepwise::{Direction, StepwiseSchedule};
