use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kvevict::scoring::score_model;
use kvevict::selection::{normalize_layer_scores, select_global};
use kvevict::{compress, AttentionStack, KvCache, LayerActivations, Policy, PolicyConfig, SeededRng, StackShape};

const WINDOW: usize = 32;

fn prefilled(seq_len: usize) -> (AttentionStack, Vec<LayerActivations>) {
    let mut rng = SeededRng::new(0);
    let shape = StackShape::new(4, 8, 2, 16).unwrap();
    let stack = AttentionStack::build(shape, &mut rng).unwrap();
    let x = rng.normal_matrix(seq_len, shape.model_dim(), 1.0);
    let acts = stack.prefill(&x).unwrap();
    (stack, acts)
}

fn prefill(c: &mut Criterion) {
    let mut group = c.benchmark_group("prefill");
    for t in [256, 1024] {
        let mut rng = SeededRng::new(1);
        let shape = StackShape::new(4, 8, 2, 16).unwrap();
        let stack = AttentionStack::build(shape, &mut rng).unwrap();
        let x = rng.normal_matrix(t, shape.model_dim(), 1.0);
        group.bench_with_input(BenchmarkId::from_parameter(t), &x, |b, x| {
            b.iter(|| {
                let acts = stack.prefill(black_box(x)).unwrap();
                KvCache::from_prefill(stack.shape(), &acts).unwrap()
            })
        });
    }
    group.finish();
}

fn scoring(c: &mut Criterion) {
    let mut group = c.benchmark_group("score_model");
    for t in [256, 1024] {
        let (stack, acts) = prefilled(t);
        for policy in [Policy::Laprox, Policy::Snapkv] {
            let cfg = PolicyConfig::new(policy).with_window(WINDOW);
            group.bench_with_input(BenchmarkId::new(policy.name(), t), &acts, |b, acts| {
                b.iter(|| score_model(black_box(acts), &stack, &cfg).unwrap())
            });
        }
    }
    group.finish();
}

fn selection(c: &mut Criterion) {
    let (stack, acts) = prefilled(1024);
    let cfg = PolicyConfig::new(Policy::Laprox).with_window(WINDOW);
    let scores = score_model(&acts, &stack, &cfg).unwrap();
    let shape = *stack.shape();
    let k = 128 * shape.heads * shape.layers;
    c.bench_function("normalize_and_select_global/1024", |b| {
        b.iter(|| {
            let norm = normalize_layer_scores(black_box(&scores)).unwrap();
            select_global(&norm, k).unwrap()
        })
    });

    let mut group = c.benchmark_group("compress");
    for policy in [Policy::Laprox, Policy::Snapkv, Policy::Adakv, Policy::Cake] {
        let cfg = PolicyConfig::new(policy).with_window(WINDOW);
        group.bench_function(BenchmarkId::new(policy.name(), 1024), |b| {
            b.iter(|| compress(&stack, black_box(&acts), &cfg, 128).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, prefill, scoring, selection);
criterion_main!(benches);
