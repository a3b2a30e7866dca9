//! Run configuration: the sectioned TOML schema the CLI consumes, dotted-key
//! overrides, and conversion into the trainer's configuration.
//!
//! A run file has five sections — `[model]`, `[masking]`, `[losses]`,
//! `[optimizer]`, `[data]` — and every field has a default, so any subset may
//! be given. Command-line overrides use dotted keys (`masking.mode=disjoint`)
//! and win over file values; unknown keys anywhere are rejected. The resolved
//! configuration serializes back to TOML, and that snapshot alone reproduces
//! the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{DecoderSpec, ModelConfig, PerModality, Pooling, Variant, VitSpec};
use crate::error::{Error, Result};
use crate::masking::MaskingOptions;
use crate::objectives::{LossFlags, LossOptions, LossWeights, MimDenominator};
use crate::training::TrainConfig;

/// `[model]` section: architecture knobs. `vit_variant` names a preset;
/// `vit_dim`/`vit_depth`/`vit_heads` override individual preset values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Variant,
    pub vit_variant: String,
    pub vit_dim: Option<usize>,
    pub vit_depth: Option<usize>,
    pub vit_heads: Option<usize>,
    pub cross_depth: usize,
    pub patch_size: usize,
    pub image_side: usize,
    pub channels1: usize,
    pub channels2: usize,
    pub pooling: Pooling,
    pub per_modality_mask_token: bool,
    pub decoder_blocks: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let base = ModelConfig::base();
        ModelSection {
            variant: base.variant,
            vit_variant: base.vit.name.clone(),
            vit_dim: None,
            vit_depth: None,
            vit_heads: None,
            cross_depth: base.cross_depth,
            patch_size: base.patch_size,
            image_side: base.image_side,
            channels1: base.channels.s1,
            channels2: base.channels.s2,
            pooling: base.pooling,
            per_modality_mask_token: base.per_modality_mask_token,
            decoder_blocks: base.decoder.blocks,
            decoder_dim: base.decoder.dim,
            decoder_heads: base.decoder.heads,
        }
    }
}

impl ModelSection {
    /// Resolves the preset plus overrides into a full model configuration.
    pub fn to_model_config(&self) -> Result<ModelConfig> {
        let mut vit = VitSpec::preset(&self.vit_variant).ok_or_else(|| {
            Error::config(format!(
                "unknown vit_variant `{}` (available: {})",
                self.vit_variant,
                VitSpec::PRESET_NAMES.join(", ")
            ))
        })?;
        if self.vit_dim.is_some() || self.vit_depth.is_some() || self.vit_heads.is_some() {
            vit.name = format!("{}-custom", self.vit_variant);
        }
        if let Some(dim) = self.vit_dim {
            vit.dim = dim;
        }
        if let Some(depth) = self.vit_depth {
            vit.depth = depth;
        }
        if let Some(heads) = self.vit_heads {
            vit.heads = heads;
        }
        Ok(ModelConfig {
            variant: self.variant,
            vit,
            cross_depth: self.cross_depth,
            decoder: DecoderSpec {
                blocks: self.decoder_blocks,
                dim: self.decoder_dim,
                heads: self.decoder_heads,
            },
            patch_size: self.patch_size,
            image_side: self.image_side,
            channels: PerModality::new(self.channels1, self.channels2),
            pooling: self.pooling,
            per_modality_mask_token: self.per_modality_mask_token,
        })
    }
}

/// `[losses]` section: which objectives run, their weights, and the
/// contrastive temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub use_umr: bool,
    pub use_cmr: bool,
    pub use_mde: bool,
    pub use_mim: bool,
    pub weight_umr: f64,
    pub weight_cmr: f64,
    pub weight_mde: f64,
    pub weight_mim: f64,
    pub tau: f64,
    pub mim_denominator: MimDenominator,
}

impl Default for LossSection {
    fn default() -> Self {
        let opts = LossOptions::default();
        LossSection {
            use_umr: opts.flags.use_umr,
            use_cmr: opts.flags.use_cmr,
            use_mde: opts.flags.use_mde,
            use_mim: opts.flags.use_mim,
            weight_umr: opts.weights.umr,
            weight_cmr: opts.weights.cmr,
            weight_mde: opts.weights.mde,
            weight_mim: opts.weights.mim,
            tau: opts.tau,
            mim_denominator: opts.mim_denominator,
        }
    }
}

impl LossSection {
    pub fn to_loss_options(&self) -> LossOptions {
        LossOptions {
            flags: LossFlags {
                use_umr: self.use_umr,
                use_cmr: self.use_cmr,
                use_mde: self.use_mde,
                use_mim: self.use_mim,
            },
            weights: LossWeights {
                umr: self.weight_umr,
                cmr: self.weight_cmr,
                mde: self.weight_mde,
                mim: self.weight_mim,
            },
            tau: self.tau,
            mim_denominator: self.mim_denominator,
        }
    }
}

/// `[optimizer]` section: run length, schedule, and AdamW knobs. Field names
/// match the trainer's configuration one for one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let tc = TrainConfig::default();
        OptimizerSection {
            epochs: tc.epochs,
            batch_size: tc.batch_size,
            base_lr: tc.base_lr,
            warmup_epochs: tc.warmup_epochs,
            betas: tc.betas,
            weight_decay: tc.weight_decay,
            eps: tc.eps,
            grad_clip: tc.grad_clip,
            seed: tc.seed,
            checkpoint_every: tc.checkpoint_every,
        }
    }
}

/// `[data]` section: either a manifest path (prepared archive) or the
/// synthetic-generation knobs. The synthetic image side comes from
/// `model.image_side`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Manifest of a prepared dataset; when absent, commands that need data
    /// generate it synthetically.
    pub manifest: Option<PathBuf>,
    pub n_pairs: usize,
    pub n_classes: usize,
    /// Dataset seed, independent of the training seed.
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { manifest: None, n_pairs: 96, n_classes: 5, seed: 7 }
    }
}

/// A complete run description, as read from the config file plus overrides.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub masking: MaskingOptions,
    pub losses: LossSection,
    pub optimizer: OptimizerSection,
    pub data: DataSection,
}

impl RunConfig {
    /// Assembles and validates the trainer's configuration.
    pub fn to_train_config(&self) -> Result<TrainConfig> {
        let opt = &self.optimizer;
        let cfg = TrainConfig {
            epochs: opt.epochs,
            batch_size: opt.batch_size,
            base_lr: opt.base_lr,
            warmup_epochs: opt.warmup_epochs,
            betas: opt.betas,
            weight_decay: opt.weight_decay,
            eps: opt.eps,
            grad_clip: opt.grad_clip,
            seed: opt.seed,
            checkpoint_every: opt.checkpoint_every,
            model: self.model.to_model_config()?,
            masking: self.masking,
            loss: self.losses.to_loss_options(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes the fully resolved configuration; parsing the result gives
    /// back an identical `RunConfig`.
    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string(self)
            .map_err(|e| Error::config(format!("cannot serialize configuration: {e}")))
    }
}

/// Parses config text and applies `key=value` overrides (dotted keys,
/// overrides win). Unknown keys — in the file or in overrides — are rejected.
pub fn parse_run_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut doc: toml::Table = text
        .parse()
        .map_err(|e| Error::config(format!("config is not valid TOML: {e}")))?;
    for spec in overrides {
        apply_override(&mut doc, spec)?;
    }
    toml::Value::Table(doc)
        .try_into()
        .map_err(|e| Error::config(format!("invalid configuration: {e}")))
}

/// Reads the config file (all defaults when `None`) and applies overrides.
pub fn load_run_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_run_config(&text, overrides)
}

/// Applies one `section.key=value` override to the parsed document. The value
/// is interpreted as a TOML literal when it parses as one (numbers, booleans,
/// arrays), and as a bare string otherwise.
fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{spec}` must look like key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let segments: Vec<&str> = key.split('.').collect();
    if key.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(Error::config(format!("override `{spec}` has an empty key segment")));
    }

    let value = parse_override_value(raw)
        .ok_or_else(|| Error::config(format!("override `{spec}` has an unparsable value")))?;

    let mut table = doc;
    for segment in &segments[..segments.len() - 1] {
        table = table
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::config(format!("override `{spec}` descends into a non-table value"))
            })?;
    }
    let last = segments.last().expect("nonempty segments");
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_override_value(raw: &str) -> Option<toml::Value> {
    if let Ok(doc) = format!("v = {raw}").parse::<toml::Table>() {
        if let Some(v) = doc.get("v") {
            return Some(v.clone());
        }
    }
    // Not a TOML literal: treat it as a string.
    let escaped = raw.replace('\\', "\\\\").replace('"', "\\\"");
    let doc = format!("v = \"{escaped}\"").parse::<toml::Table>().ok()?;
    doc.get("v").cloned()
}
