//! Model configuration: variants, ViT presets, and validation.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use super::Modality;
use crate::error::{Error, Result};

/// Something stored once per modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerModality<T> {
    pub s1: T,
    pub s2: T,
}

impl<T> PerModality<T> {
    pub fn new(s1: T, s2: T) -> Self {
        PerModality { s1, s2 }
    }

    pub fn get(&self, m: Modality) -> &T {
        match m {
            Modality::S1 => &self.s1,
            Modality::S2 => &self.s2,
        }
    }
}

/// The four model variants: sensor path and decoder each either shared
/// ("common") across modalities or duplicated per modality ("specific").
///
/// The first letter pair names the encoder's sensor path, the second the
/// decoder: `Secd` = specific-encoder, common-decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "cecd")]
    Cecd,
    #[serde(rename = "cesd")]
    Cesd,
    #[serde(rename = "secd")]
    Secd,
    #[serde(rename = "sesd")]
    Sesd,
}

impl Variant {
    /// One sensor-path stack shared by both modalities?
    pub fn shared_encoder(self) -> bool {
        matches!(self, Variant::Cecd | Variant::Cesd)
    }

    /// One decoder stack shared by both modalities?
    pub fn shared_decoder(self) -> bool {
        matches!(self, Variant::Cecd | Variant::Secd)
    }

    pub const ALL: [Variant; 4] = [Variant::Cecd, Variant::Cesd, Variant::Secd, Variant::Sesd];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Cecd => "cecd",
            Variant::Cesd => "cesd",
            Variant::Secd => "secd",
            Variant::Sesd => "sesd",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cecd" => Ok(Variant::Cecd),
            "cesd" => Ok(Variant::Cesd),
            "secd" => Ok(Variant::Secd),
            "sesd" => Ok(Variant::Sesd),
            other => Err(Error::config(format!(
                "unknown variant '{other}' (expected cecd|cesd|secd|sesd)"
            ))),
        }
    }
}

/// Encoder transformer dimensions. `depth` counts *all* encoder layers; the
/// last `cross_depth` of them (configured on [`ModelConfig`]) form the shared
/// cross-sensor path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitSpec {
    pub name: String,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
}

impl VitSpec {
    /// Built-in sizes. `vit_l24`'s published totals correspond to twelve
    /// layers at width 1024, so that is what the preset uses.
    pub fn preset(name: &str) -> Option<VitSpec> {
        let (dim, depth, heads) = match name {
            "vit_ti12" => (192, 12, 3),
            "vit_s12" => (384, 12, 6),
            "vit_b12" => (768, 12, 12),
            "vit_l24" => (1024, 12, 16),
            _ => return None,
        };
        Some(VitSpec { name: name.to_string(), dim, depth, heads })
    }

    pub const PRESET_NAMES: [&'static str; 4] = ["vit_ti12", "vit_s12", "vit_b12", "vit_l24"];
}

/// Decoder transformer dimensions (shared by all decoder stacks).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        DecoderSpec { blocks: 8, dim: 512, heads: 16 }
    }
}

/// How a whole-image feature is pooled from encoder latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    /// Arithmetic mean over patch latents (class token excluded).
    #[serde(rename = "gap")]
    Gap,
    /// A learnable class token prepended to the encoder input.
    #[serde(rename = "cls")]
    Cls,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Gap => "gap",
            Pooling::Cls => "cls",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gap" => Ok(Pooling::Gap),
            "cls" => Ok(Pooling::Cls),
            other => Err(Error::config(format!("unknown pooling '{other}' (expected gap|cls)"))),
        }
    }
}

/// Complete architectural description of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub vit: VitSpec,
    /// Number of trailing encoder layers forming the shared cross-sensor
    /// path; the remaining `depth - cross_depth` layers form the sensor path.
    pub cross_depth: usize,
    pub decoder: DecoderSpec,
    pub patch_size: usize,
    pub image_side: usize,
    /// Input channels per modality.
    pub channels: PerModality<usize>,
    pub pooling: Pooling,
    /// When set, each modality gets its own decoder mask token; otherwise one
    /// token is shared.
    pub per_modality_mask_token: bool,
}

impl ModelConfig {
    /// The published base configuration: CECD on ViT-B12 with a cross-sensor
    /// depth of 2, 15×15 patches on 120×120 inputs (2- and 10-channel
    /// modalities), GAP pooling, and an 8-block decoder at width 512.
    pub fn base() -> ModelConfig {
        ModelConfig {
            variant: Variant::Cecd,
            vit: VitSpec::preset("vit_b12").unwrap(),
            cross_depth: 2,
            decoder: DecoderSpec::default(),
            patch_size: 15,
            image_side: 120,
            channels: PerModality::new(2, 10),
            pooling: Pooling::Gap,
            per_modality_mask_token: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = &self.vit;
        if v.dim == 0 || v.depth == 0 || v.heads == 0 {
            return Err(Error::config("vit dim/depth/heads must be positive"));
        }
        if v.dim % v.heads != 0 {
            return Err(Error::config(format!(
                "vit dim {} not divisible by heads {}",
                v.dim, v.heads
            )));
        }
        if v.dim % 2 != 0 {
            return Err(Error::config("vit dim must be even for sinusoidal positions"));
        }
        if self.cross_depth == 0 || self.cross_depth > v.depth {
            return Err(Error::config(format!(
                "cross_depth {} must be in 1..=depth ({})",
                self.cross_depth, v.depth
            )));
        }
        let d = &self.decoder;
        if d.dim == 0 || d.blocks == 0 || d.heads == 0 {
            return Err(Error::config("decoder dim/blocks/heads must be positive"));
        }
        if d.dim % d.heads != 0 {
            return Err(Error::config(format!(
                "decoder dim {} not divisible by heads {}",
                d.dim, d.heads
            )));
        }
        if d.dim % 2 != 0 {
            return Err(Error::config("decoder dim must be even for sinusoidal positions"));
        }
        if self.patch_size == 0 || self.image_side == 0 || self.image_side % self.patch_size != 0 {
            return Err(Error::config(format!(
                "patch size {} must divide image side {}",
                self.patch_size, self.image_side
            )));
        }
        if self.channels.s1 == 0 || self.channels.s2 == 0 {
            return Err(Error::config("each modality needs at least one channel"));
        }
        Ok(())
    }

    /// Patches per image side.
    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_size
    }

    /// Total patches N per image.
    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Flattened pixel length of one patch for `m`.
    pub fn patch_len(&self, m: Modality) -> usize {
        self.patch_size * self.patch_size * self.channels.get(m)
    }

    /// Layers in the sensor path (per stack).
    pub fn sensor_depth(&self) -> usize {
        self.vit.depth - self.cross_depth
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_config_is_valid() {
        let cfg = ModelConfig::base();
        cfg.validate().unwrap();
        assert_eq!(cfg.n_patches(), 64);
        assert_eq!(cfg.patch_len(Modality::S1), 450);
        assert_eq!(cfg.patch_len(Modality::S2), 2250);
        assert_eq!(cfg.sensor_depth(), 10);
    }

    #[test]
    fn presets_resolve() {
        for name in VitSpec::PRESET_NAMES {
            let spec = VitSpec::preset(name).unwrap();
            assert!(spec.dim % spec.heads == 0);
        }
        assert!(VitSpec::preset("vit_xxl").is_none());
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = ModelConfig::base();
        cfg.vit.heads = 7;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::base();
        cfg.cross_depth = 13;
        assert!(cfg.validate().is_err());
        cfg.cross_depth = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::base();
        cfg.patch_size = 7;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::base();
        cfg.channels.s1 = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::base();
        cfg.decoder.heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn variant_string_round_trip() {
        for v in Variant::ALL {
            let s = v.to_string();
            assert_eq!(s.parse::<Variant>().unwrap(), v);
        }
        assert!("cxcd".parse::<Variant>().is_err());
    }
}
