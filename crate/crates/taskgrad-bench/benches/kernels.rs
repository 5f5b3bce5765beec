//! Benchmarks for the hot kernels: the matrix exponential, each gradient
//! combiner, and a full training step.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use taskgrad::combine::{CombinerKind, CombinerState};
use taskgrad::linalg::{expm, skew_expand};
use taskgrad_bench::{convex_state, gradient_set, skew};

fn bench_expm(c: &mut Criterion) {
    let mut group = c.benchmark_group("expm");
    for dim in [2usize, 8, 16] {
        let a = skew_expand(&skew(dim, 42));
        group.bench_with_input(BenchmarkId::from_parameter(dim), &a, |b, a| {
            b.iter(|| expm(black_box(a)).expect("square input"));
        });
    }
    group.finish();
}

fn bench_combiners(c: &mut Criterion) {
    let grads = gradient_set(4, 16, 32, 7);
    let losses = vec![1.0, 0.8, 1.3, 0.5];
    let kinds: Vec<(&str, CombinerKind)> = vec![
        ("vanilla", CombinerKind::Vanilla),
        ("scale_only", CombinerKind::ScaleOnly),
        ("pcgrad", CombinerKind::PcGrad),
        ("graddrop", CombinerKind::GradDrop { leak: 0.0 }),
        ("gradnorm", CombinerKind::GradNorm { alpha: 1.0 }),
        ("mgda_ub", CombinerKind::mgda_ub_default()),
        ("imtl_g", CombinerKind::ImtlG),
    ];
    let mut group = c.benchmark_group("combine");
    for (name, kind) in kinds {
        group.bench_function(name, |b| {
            let rng = ChaCha8Rng::seed_from_u64(5);
            let mut state = CombinerState::new(kind, grads.len(), rng).expect("valid kind");
            b.iter(|| state.combine(black_box(&grads), black_box(&losses), 0.01).expect("combines"));
        });
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    c.bench_function("train_step/convex_pair_rotations", |b| {
        let (mut state, batch) = convex_state(11);
        b.iter(|| state.train_step(black_box(&batch)).expect("steps"));
    });
}

criterion_group!(benches, bench_expm, bench_combiners, bench_train_step);
criterion_main!(benches);
