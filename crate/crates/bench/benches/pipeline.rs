use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use triport_core::elements::qft_multiport;
use triport_core::elements::{reck_decompose, recompose};
use triport_core::fock::{FockState, ModeLabel, ModeRegister};
use triport_core::protocol::{run_teleport, ElementSet, QuditState, Variant};
use triport_core::random_unitary;

fn fourier_evolution(c: &mut Criterion) {
    let register = Arc::new(ModeRegister::with_ports(&[("b", 4, 1), ("x", 3, 1)]).unwrap());
    let state = FockState::basis(
        &register,
        &[
            (ModeLabel::new("b", 0), 2),
            (ModeLabel::new("b", 1), 1),
            (ModeLabel::new("x", 2), 1),
        ],
    )
    .unwrap();
    let unitary = qft_multiport(3).unwrap();
    let targets = [
        ModeLabel::new("b", 0),
        ModeLabel::new("b", 1),
        ModeLabel::new("x", 2),
    ];
    c.bench_function("fourier_multiport_four_photons", |b| {
        b.iter(|| state.apply_unitary(&unitary, &targets).unwrap())
    });
}

fn teleport_variants(c: &mut Criterion) {
    let input = QuditState::computational(0, 3).unwrap();
    c.bench_function("teleport_main", |b| {
        b.iter(|| run_teleport(&input, Variant::Main, ElementSet::Ideal).unwrap())
    });
    c.bench_function("teleport_feedforward", |b| {
        b.iter(|| run_teleport(&input, Variant::FeedForward, ElementSet::Ideal).unwrap())
    });
}

fn reck_roundtrip(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let unitary = triport_core::elements::ModeUnitary::new(random_unitary(6, &mut rng)).unwrap();
    c.bench_function("reck_roundtrip_six_modes", |b| {
        b.iter(|| {
            let plan = reck_decompose(&unitary);
            recompose(&plan).unwrap()
        })
    });
}

criterion_group!(
    benches,
    fourier_evolution,
    teleport_variants,
    reck_roundtrip
);
criterion_main!(benches);
