//! Shared fixtures for the criterion benches: a desk-sized model and seeded
//! random inputs, kept here so every bench measures the same shapes.

use csmae_core::backbone::{DecoderSpec, PerModality, VitSpec};
use csmae_core::{CsmaeModel, EmbeddingRecord, Modality, ModelConfig, Pooling, Variant};
use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// A small SESD whose forwards run in microseconds, for hot-loop benches.
pub fn tiny_model() -> CsmaeModel {
    let cfg = ModelConfig {
        variant: Variant::Sesd,
        vit: VitSpec { name: "tiny".into(), dim: 64, depth: 4, heads: 4 },
        cross_depth: 2,
        decoder: DecoderSpec { blocks: 2, dim: 64, heads: 4 },
        patch_size: 8,
        image_side: 32,
        channels: PerModality::new(2, 10),
        pooling: Pooling::Gap,
        per_modality_mask_token: false,
    };
    CsmaeModel::init(cfg, 3).expect("valid bench config")
}

pub fn random_image(side: usize, channels: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((side, side, channels), |_| rng.random::<f64>() - 0.5)
}

/// `n` single-modality embedding records of width `dim`.
pub fn random_records(n: usize, dim: usize, seed: u64) -> Vec<EmbeddingRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| EmbeddingRecord {
            image_id: format!("img_{i:05}"),
            modality: Modality::S1,
            vector: (0..dim).map(|_| rng.random::<f64>() - 0.5).collect(),
        })
        .collect()
}
