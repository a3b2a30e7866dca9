//! Model state: named parameter tensors and their deterministic
//! initialization.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

use super::count::Partition;
use super::{ModelConfig, Modality, Pooling};
use crate::error::{Error, Result};
use crate::rngutil::{derive_seed, truncated_normal, SeedDomain};

/// One parameter tensor. Vectors (biases, tokens, norm gains) are stored as
/// 1×d matrices so the whole parameter set is uniformly two-dimensional.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Array2<f64>,
}

/// A full model: configuration plus every parameter tensor in a canonical
/// order. Tensor names are stable across runs and releases, so checkpoints
/// are diffable and the optimizer state can be keyed positionally.
#[derive(Debug, Clone)]
pub struct CsmaeModel {
    config: ModelConfig,
    params: Vec<NamedTensor>,
    index: HashMap<String, usize>,
}

/// How each named tensor is initialized.
enum Init {
    /// Truncated normal, σ = 0.02, resampled beyond ±2σ.
    TruncNormal,
    Zeros,
    Ones,
}

/// The canonical tensor schema for a configuration: (name, rows, cols, init).
/// Construction, checkpoint loading, and the parameter-count cross-check all
/// derive from this single listing.
fn tensor_schema(cfg: &ModelConfig) -> Vec<(String, usize, usize, Init)> {
    let d = cfg.vit.dim;
    let dd = cfg.decoder.dim;
    let mut schema: Vec<(String, usize, usize, Init)> = Vec::new();

    let linear = |schema: &mut Vec<(String, usize, usize, Init)>,
                  prefix: &str,
                  rows: usize,
                  cols: usize| {
        schema.push((format!("{prefix}.weight"), rows, cols, Init::TruncNormal));
        schema.push((format!("{prefix}.bias"), 1, cols, Init::Zeros));
    };
    let norm = |schema: &mut Vec<(String, usize, usize, Init)>, prefix: &str, width: usize| {
        schema.push((format!("{prefix}.gain"), 1, width, Init::Ones));
        schema.push((format!("{prefix}.bias"), 1, width, Init::Zeros));
    };
    let layer = |schema: &mut Vec<(String, usize, usize, Init)>, prefix: &str, width: usize| {
        norm(schema, &format!("{prefix}.norm1"), width);
        schema.push((format!("{prefix}.attn.qkv.weight"), width, 3 * width, Init::TruncNormal));
        schema.push((format!("{prefix}.attn.qkv.bias"), 1, 3 * width, Init::Zeros));
        schema.push((format!("{prefix}.attn.proj.weight"), width, width, Init::TruncNormal));
        schema.push((format!("{prefix}.attn.proj.bias"), 1, width, Init::Zeros));
        norm(schema, &format!("{prefix}.norm2"), width);
        schema.push((format!("{prefix}.mlp.fc1.weight"), width, 4 * width, Init::TruncNormal));
        schema.push((format!("{prefix}.mlp.fc1.bias"), 1, 4 * width, Init::Zeros));
        schema.push((format!("{prefix}.mlp.fc2.weight"), 4 * width, width, Init::TruncNormal));
        schema.push((format!("{prefix}.mlp.fc2.bias"), 1, width, Init::Zeros));
    };

    for m in Modality::BOTH {
        linear(&mut schema, &format!("patch_embed.{}", m.key()), cfg.patch_len(m), d);
    }

    if cfg.pooling == Pooling::Cls {
        if cfg.variant.shared_encoder() {
            schema.push(("cls.shared".into(), 1, d, Init::TruncNormal));
        } else {
            for m in Modality::BOTH {
                schema.push((format!("cls.{}", m.key()), 1, d, Init::TruncNormal));
            }
        }
    }

    let sensor_stacks: Vec<String> = if cfg.variant.shared_encoder() {
        vec!["sensor.shared".into()]
    } else {
        Modality::BOTH.iter().map(|m| format!("sensor.{}", m.key())).collect()
    };
    for stack in &sensor_stacks {
        for l in 0..cfg.sensor_depth() {
            layer(&mut schema, &format!("{stack}.layer{l:02}"), d);
        }
    }
    for l in 0..cfg.cross_depth {
        layer(&mut schema, &format!("cross.layer{l:02}"), d);
    }
    norm(&mut schema, "encoder_norm", d);

    if cfg.per_modality_mask_token {
        for m in Modality::BOTH {
            schema.push((format!("mask_token.{}", m.key()), 1, dd, Init::TruncNormal));
        }
    } else {
        schema.push(("mask_token.shared".into(), 1, dd, Init::TruncNormal));
    }

    let decoder_stacks: Vec<String> = if cfg.variant.shared_decoder() {
        vec!["decoder.shared".into()]
    } else {
        Modality::BOTH.iter().map(|m| format!("decoder.{}", m.key())).collect()
    };
    for stack in &decoder_stacks {
        linear(&mut schema, &format!("{stack}.embed"), d, dd);
        for l in 0..cfg.decoder.blocks {
            layer(&mut schema, &format!("{stack}.layer{l:02}"), dd);
        }
        norm(&mut schema, &format!("{stack}.norm"), dd);
    }

    for m in Modality::BOTH {
        linear(&mut schema, &format!("head.{}", m.key()), dd, cfg.patch_len(m));
    }

    schema
}

/// Partition a tensor belongs to, by name prefix.
pub fn partition_of(name: &str) -> Partition {
    if name.starts_with("patch_embed.") {
        Partition::PatchEmbeds
    } else if name.starts_with("sensor.") {
        Partition::SensorPath
    } else if name.starts_with("cross.") {
        Partition::CrossPath
    } else if name.starts_with("decoder.") {
        Partition::Decoders
    } else if name.starts_with("head.") {
        Partition::Heads
    } else {
        // cls.*, mask_token.*, encoder_norm.*
        Partition::TokensAndNorms
    }
}

impl CsmaeModel {
    /// Build a model with freshly initialized parameters. The same
    /// `(config, seed)` always produces bit-identical tensors.
    pub fn init(config: ModelConfig, seed: u64) -> Result<CsmaeModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedDomain::ParamInit, 0));
        let mut params = Vec::new();
        for (name, rows, cols, init) in tensor_schema(&config) {
            let value = match init {
                Init::TruncNormal => {
                    Array2::from_shape_fn((rows, cols), |_| truncated_normal(&mut rng, 0.02))
                }
                Init::Zeros => Array2::zeros((rows, cols)),
                Init::Ones => Array2::ones((rows, cols)),
            };
            params.push(NamedTensor { name, value });
        }
        Ok(Self::assemble(config, params))
    }

    /// Reassemble a model from stored tensors (checkpoint loading). The
    /// tensor list must match the configuration's schema exactly: same names,
    /// same order, same shapes.
    pub fn from_parts(config: ModelConfig, params: Vec<NamedTensor>) -> Result<CsmaeModel> {
        config.validate()?;
        let schema = tensor_schema(&config);
        if schema.len() != params.len() {
            return Err(Error::data(format!(
                "checkpoint has {} tensors, config needs {}",
                params.len(),
                schema.len()
            )));
        }
        for ((name, rows, cols, _), tensor) in schema.iter().zip(&params) {
            if *name != tensor.name {
                return Err(Error::data(format!(
                    "checkpoint tensor '{}' where '{}' was expected",
                    tensor.name, name
                )));
            }
            if tensor.value.dim() != (*rows, *cols) {
                return Err(Error::data(format!(
                    "tensor '{}' has shape {:?}, expected ({rows}, {cols})",
                    name,
                    tensor.value.dim()
                )));
            }
        }
        Ok(Self::assemble(config, params))
    }

    fn assemble(config: ModelConfig, params: Vec<NamedTensor>) -> CsmaeModel {
        let index = params.iter().enumerate().map(|(i, t)| (t.name.clone(), i)).collect();
        CsmaeModel { config, params, index }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// All tensors in canonical order.
    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    /// Look up a tensor by name.
    pub fn param(&self, name: &str) -> Option<&Array2<f64>> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub(crate) fn param_position(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("internal: unknown parameter '{name}'"))
    }

    /// Total scalar parameters actually allocated.
    pub fn n_scalar_params(&self) -> u64 {
        self.params.iter().map(|t| t.value.len() as u64).sum()
    }
}
