use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use synthsight_bench::{pack, rng};
use synthsight_core::embedding::{embed_text, EmbeddingCache, HashTextEncoder};
use synthsight_core::evaluation::{compute_metrics, Prediction, PredictionSet};
use synthsight_core::fusion::{FusionConfig, FusionHead, FusionMechanism};
use synthsight_core::generation::{preset_params, stub_generate};
use synthsight_core::prompting::{extract_keywords, PromptSpec, Strategy, NEGATIVE_PROMPT};

const REVIEW: &str = "This new coffee machine is absolutely fantastic! It brews a perfect cup every time, is super easy to clean, and its sleek black design looks stunning on my kitchen counter. Definitely a 5-star product.";

fn head(mechanism: FusionMechanism) -> FusionHead<f32> {
    let cfg = FusionConfig {
        mechanism,
        model_dim: 64,
        heads: 4,
        num_classes: 4,
        hidden_dim: 128,
        ..FusionConfig::default()
    };
    FusionHead::build(cfg, 128, 128, 0).unwrap()
}

fn fusion(c: &mut Criterion) {
    let mut r = rng(3);
    let packs: Vec<_> = (0..16).map(|_| pack(32, 16, 128, &mut r)).collect();
    let labels: Vec<usize> = (0..16).map(|i| i % 4).collect();
    let refs: Vec<_> = packs.iter().collect();
    let mut forward = c.benchmark_group("fusion forward");
    for m in FusionMechanism::ALL {
        let h = head(m);
        forward.bench_with_input(BenchmarkId::from_parameter(format!("{m:?}")), &m, |b, _| {
            b.iter(|| h.logits(black_box(&packs[0])).unwrap())
        });
    }
    forward.finish();
    let mut backward = c.benchmark_group("fusion loss+grad batch16");
    for m in FusionMechanism::ALL {
        let mut h = head(m);
        backward.bench_with_input(BenchmarkId::from_parameter(format!("{m:?}")), &m, |b, _| {
            b.iter(|| h.loss_and_grad(black_box(&refs), &labels, None).unwrap())
        });
    }
    backward.finish();
}

fn metrics(c: &mut Criterion) {
    let mut r = rng(5);
    let items = (0..5000)
        .map(|i| Prediction {
            sample_id: format!("s{i}"),
            truth: r.random_range(0..5),
            predicted: r.random_range(0..5),
            logits: vec![],
        })
        .collect();
    let set = PredictionSet::new((0..5).map(|c| format!("c{c}")).collect(), items).unwrap();
    c.bench_function("compute_metrics 5000x5", |b| {
        b.iter(|| compute_metrics(black_box(&set)).unwrap())
    });
}

fn text_side(c: &mut Criterion) {
    c.bench_function("extract_keywords review", |b| {
        b.iter(|| extract_keywords(black_box(REVIEW), None, 8).unwrap())
    });
    let enc = HashTextEncoder::new("hash-text", 256);
    let cache = EmbeddingCache::disabled();
    c.bench_function("hash embed_text review", |b| {
        b.iter(|| embed_text(black_box(REVIEW), &enc, &cache).unwrap())
    });
    let prompt = PromptSpec {
        sample_id: "s0".into(),
        strategy: Strategy::P2,
        positive: "A photorealistic, high-quality image of coffee machine, kitchen counter".into(),
        negative: NEGATIVE_PROMPT.into(),
        keywords: vec![],
        style_tags: vec![],
        elaborator_id: None,
        fallback: false,
    };
    let params = preset_params("flux-schnell").unwrap();
    c.bench_function("stub_generate", |b| {
        b.iter(|| stub_generate(black_box(&prompt), &params))
    });
}

criterion_group!(benches, fusion, metrics, text_side);
criterion_main!(benches);
