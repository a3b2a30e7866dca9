//! Model architecture: configuration, parameter accounting, and the
//! encoder/decoder forward passes.
//!
//! The model embeds each modality's patches with its own affine projection,
//! adds a shared sinusoidal positional encoding, and feeds the visible tokens
//! through a sensor path (shared or per-modality transformer layers) followed
//! by a shared cross-sensor path that defines the common embedding space.
//! Decoding projects latents into a narrower decoder width, re-inserts a
//! learnable mask token at the hidden positions, adds a decoder-width
//! positional encoding, runs a decoder stack (shared or per-modality), and
//! maps every position back to pixel space through the target modality's
//! linear head.

mod config;
mod count;
mod forward;
mod model;

pub use config::{DecoderSpec, ModelConfig, PerModality, Pooling, Variant, VitSpec};
pub use count::{count_parameters, ParamBreakdown, Partition};
pub use forward::{positional_encoding, EncodeArrays, EncodeOutput, ModelSession};
pub use model::{partition_of, CsmaeModel, NamedTensor};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Which sensor an image or embedding came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "s1")]
    S1,
    #[serde(rename = "s2")]
    S2,
}

impl Modality {
    /// Lowercase key used in parameter names and file columns.
    pub fn key(self) -> &'static str {
        match self {
            Modality::S1 => "s1",
            Modality::S2 => "s2",
        }
    }

    /// The paired modality.
    pub fn other(self) -> Modality {
        match self {
            Modality::S1 => Modality::S2,
            Modality::S2 => Modality::S1,
        }
    }

    pub const BOTH: [Modality; 2] = [Modality::S1, Modality::S2];
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::S1 => "S1",
            Modality::S2 => "S2",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "s1" | "S1" => Ok(Modality::S1),
            "s2" | "S2" => Ok(Modality::S2),
            other => Err(Error::config(format!("unknown modality '{other}' (expected s1|s2)"))),
        }
    }
}
