//! Closed-form parameter accounting.
//!
//! [`count_parameters`] computes the exact scalar-parameter total of a
//! configuration without instantiating any tensor, broken down by
//! architectural partition. A model built from the same configuration
//! allocates exactly these counts (covered by a test in `model.rs`), so the
//! arithmetic here is the single source of truth for model sizing.

use serde::Serialize;

use super::{ModelConfig, Modality};
use crate::error::Result;

/// Architectural partition of the parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    /// Per-modality affine patch embeddings.
    PatchEmbeds,
    /// Sensor-path transformer layers (duplicated for specific encoders).
    SensorPath,
    /// Shared cross-sensor transformer layers.
    CrossPath,
    /// Decoder stacks: latent projection, transformer blocks, final norm.
    Decoders,
    /// Per-modality pixel reconstruction heads.
    Heads,
    /// Mask token(s), class token(s), and the encoder's final norm.
    TokensAndNorms,
}

/// Scalar parameter counts per partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub patch_embeds: u64,
    pub sensor_path: u64,
    pub cross_path: u64,
    pub decoders: u64,
    pub heads: u64,
    pub tokens_and_norms: u64,
}

impl ParamBreakdown {
    pub fn total(&self) -> u64 {
        self.patch_embeds
            + self.sensor_path
            + self.cross_path
            + self.decoders
            + self.heads
            + self.tokens_and_norms
    }

    pub fn get(&self, p: Partition) -> u64 {
        match p {
            Partition::PatchEmbeds => self.patch_embeds,
            Partition::SensorPath => self.sensor_path,
            Partition::CrossPath => self.cross_path,
            Partition::Decoders => self.decoders,
            Partition::Heads => self.heads,
            Partition::TokensAndNorms => self.tokens_and_norms,
        }
    }
}

/// Parameters of one pre-norm transformer layer at width `d` with MLP ratio 4:
/// two norms (2d each), QKV projection (3d² + 3d), attention output projection
/// (d² + d), and the two MLP linears (4d² + 4d and 4d² + d) — 12d² + 13d.
fn layer_params(d: u64) -> u64 {
    12 * d * d + 13 * d
}

/// Affine map from `input` to `output` features: weight + bias.
fn affine(input: u64, output: u64) -> u64 {
    input * output + output
}

/// Count every scalar parameter of `cfg`, by partition.
pub fn count_parameters(cfg: &ModelConfig) -> Result<ParamBreakdown> {
    cfg.validate()?;
    let d = cfg.vit.dim as u64;
    let dd = cfg.decoder.dim as u64;
    let p1 = cfg.patch_len(Modality::S1) as u64;
    let p2 = cfg.patch_len(Modality::S2) as u64;

    let patch_embeds = affine(p1, d) + affine(p2, d);

    let encoder_stacks = if cfg.variant.shared_encoder() { 1 } else { 2 };
    let sensor_path = encoder_stacks * cfg.sensor_depth() as u64 * layer_params(d);
    let cross_path = cfg.cross_depth as u64 * layer_params(d);

    let decoder_stacks = if cfg.variant.shared_decoder() { 1 } else { 2 };
    let one_decoder = affine(d, dd) + cfg.decoder.blocks as u64 * layer_params(dd) + 2 * dd;
    let decoders = decoder_stacks * one_decoder;

    let heads = affine(dd, p1) + affine(dd, p2);

    let mask_tokens = if cfg.per_modality_mask_token { 2 } else { 1 } * dd;
    let cls_tokens = match cfg.pooling {
        super::Pooling::Cls => encoder_stacks * d,
        super::Pooling::Gap => 0,
    };
    let encoder_norm = 2 * d;
    let tokens_and_norms = mask_tokens + cls_tokens + encoder_norm;

    Ok(ParamBreakdown {
        patch_embeds,
        sensor_path,
        cross_path,
        decoders,
        heads,
        tokens_and_norms,
    })
}
