//! Benchmarks for the paths that dominate training and evaluation time:
//! masking, resampling, patchify, the model forward, one loss forward +
//! backward, brute-force retrieval, and parameter counting.

use std::collections::BTreeSet;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use csmae_bench::{random_image, random_records, tiny_model};
use csmae_core::backbone::count_parameters;
use csmae_core::datasets::resample_bicubic;
use csmae_core::masking::{make_mask_plan, patchify};
use csmae_core::objectives::{build_batch_loss, LossOptions};
use csmae_core::retrieval::query_topk;
use csmae_core::{CorrespondenceMode, Modality, ModelConfig};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_masking(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    c.bench_function("mask_plan_random_64", |b| {
        b.iter(|| make_mask_plan(black_box(64), 0.5, CorrespondenceMode::Random, &mut rng))
    });
    c.bench_function("mask_plan_disjoint_64", |b| {
        b.iter(|| make_mask_plan(black_box(64), 0.45, CorrespondenceMode::Disjoint, &mut rng))
    });
}

fn bench_resampling(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let band = Array2::from_shape_fn((60, 60), |_| rand::Rng::random::<f64>(&mut rng));
    c.bench_function("bicubic_upsample_60_to_120", |b| {
        b.iter(|| resample_bicubic(black_box(&band), 2))
    });
}

fn bench_patchify(c: &mut Criterion) {
    let image = random_image(120, 10, 3);
    c.bench_function("patchify_120x120x10_k15", |b| {
        b.iter(|| patchify(black_box(&image), 15))
    });
}

fn bench_forward(c: &mut Criterion) {
    let model = tiny_model();
    let image = random_image(32, 2, 4);
    c.bench_function("extract_feature_tiny_s1", |b| {
        b.iter(|| model.extract_feature(black_box(&image), Modality::S1))
    });
}

fn bench_loss_step(c: &mut Criterion) {
    let model = tiny_model();
    let pairs: Vec<_> =
        (0..2u64).map(|i| (random_image(32, 2, 10 + i), random_image(32, 10, 20 + i))).collect();
    let batch: Vec<_> = pairs.iter().map(|(a, b)| (a, b)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = model.config().n_patches();
    let plans: Vec<_> = (0..2)
        .map(|_| make_mask_plan(n, 0.5, CorrespondenceMode::Random, &mut rng).unwrap())
        .collect();
    let opts = LossOptions::default();
    c.bench_function("loss_forward_backward_tiny_batch2", |b| {
        b.iter(|| {
            let mut built = build_batch_loss(&model, black_box(&batch), &plans, &opts).unwrap();
            black_box(built.session.graph_mut().backward(built.total));
        })
    });
}

fn bench_retrieval(c: &mut Criterion) {
    let records = random_records(1000, 64, 6);
    let query: Vec<f64> = records[0].vector.clone();
    let exclude = BTreeSet::new();
    c.bench_function("query_topk_1000x64_k10", |b| {
        b.iter(|| query_topk(black_box(&records), &query, 10, &exclude))
    });
}

fn bench_param_count(c: &mut Criterion) {
    let cfg = ModelConfig::base();
    c.bench_function("count_parameters_base", |b| {
        b.iter(|| count_parameters(black_box(&cfg)))
    });
}

criterion_group!(
    benches,
    bench_masking,
    bench_resampling,
    bench_patchify,
    bench_forward,
    bench_loss_step,
    bench_retrieval,
    bench_param_count
);
criterion_main!(benches);
