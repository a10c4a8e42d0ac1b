use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use jfa_core::adapt::{
    adapt_alternating, adapt_closed_form, assemble_joint_system, assemble_pair,
    row_col_l1_bound, similarity, AoOptions,
};
use jfa_core::{DMatrix, DVector, OmegaParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(
    feat_dim: usize,
    attr_dim: usize,
) -> (DMatrix<f64>, OmegaParams, DVector<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = DMatrix::from_fn(feat_dim, attr_dim, |_, _| rng.random_range(-1.0..1.0));
    let s = 1.05 * row_col_l1_bound(&w);
    let omega = OmegaParams::new(0.5 * s, 0.5 * s, 0.5 * s, 0.5 * s).unwrap();
    let features = DVector::from_fn(feat_dim, |_, _| rng.random_range(-1.0..1.0));
    let attributes = DVector::from_fn(attr_dim, |_, _| rng.random_range(-1.0..1.0));
    (w, omega, features, attributes)
}

fn bench_adapt(c: &mut Criterion) {
    let (w, omega, features, attributes) = setup(64, 32);

    c.bench_function("assemble_joint_system_96", |b| {
        b.iter(|| assemble_joint_system(black_box(&w), black_box(&omega)).unwrap())
    });

    let system = assemble_joint_system(&w, &omega).unwrap();
    let pair = assemble_pair(&features, &attributes, &omega);

    // One factorization is shared across pairs; the per-pair score is a
    // single triangular solve.
    c.bench_function("similarity_per_pair_96", |b| {
        b.iter(|| similarity(black_box(&system), black_box(&pair)).unwrap())
    });

    c.bench_function("adapt_closed_form_96", |b| {
        b.iter(|| adapt_closed_form(black_box(&system), black_box(&pair)).unwrap())
    });

    c.bench_function("adapt_alternating_96", |b| {
        b.iter(|| {
            adapt_alternating(
                black_box(&w),
                black_box(&omega),
                black_box(&features),
                black_box(&attributes),
                &AoOptions::default(),
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, bench_adapt);
criterion_main!(benches);
