//! Cross-sensor masked autoencoders (CSMAE) for multi-modal image retrieval.
//!
//! The crate trains ViT encoder–decoder models on pairs of co-registered
//! images from two sensors. Patches from both images are masked, the visible
//! patches are encoded into a shared latent space, and lightweight decoders
//! reconstruct the masked patches of either sensor from either latent —
//! uni-modal and cross-modal reconstruction. Optional similarity losses pull
//! the pooled latents of paired images together. The resulting encoders embed
//! whole images for sensor-agnostic content-based retrieval, evaluated with
//! cosine k-NN and multi-label F1.
//!
//! Module map:
//! - [`masking`]: patchification and masked-index plans for both sensors.
//! - [`autograd`]: the reverse-mode tape that powers training.
//! - [`backbone`]: model configuration, parameter counting, encode/decode.
//! - [`objectives`]: reconstruction and latent-similarity losses.
//! - [`training`]: AdamW loop, LR schedule, metrics, checkpoints.
//! - [`retrieval`]: embedding indexes, k-NN queries, F1@k reports.
//! - [`datasets`]: synthetic pair generation, manifests, rasters, resampling.
//! - [`config`]: run configuration file schema and dotted-key overrides.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod masking;
pub mod objectives;
pub mod retrieval;
pub mod rngutil;
pub mod training;

pub use backbone::{CsmaeModel, Modality, ModelConfig, Pooling, Variant};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use datasets::{ArchiveManifest, MultiModalPair, Split};
pub use error::{Error, Result};
pub use masking::{CorrespondenceMode, MaskPlan, MaskingOptions, PatchGrid};
pub use objectives::{LossBreakdown, LossFlags, LossOptions, LossWeights, MimDenominator};
pub use retrieval::{EmbeddingRecord, RetrievalReport, RetrievalTask};
pub use training::{TrainConfig, TrainOutcome, TrainState};
