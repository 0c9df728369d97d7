use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use unravel_core::gaussian::{assemble_kernel_matrix, build_augmented_covariance, BosonEnvironment};
use unravel_core::model::{CanonicalModel, LiouvillianBuilder, SpinBosonParams};
use unravel_core::qops::{choi_spectrum, kraus_decompose, reshuffle, sigma_minus, CMatrix};
use unravel_core::{Superoperator, TimeGrid};

fn bench_liouvillian(c: &mut Criterion) {
    let m = CanonicalModel::spin_boson(SpinBosonParams { delta: 0.4, g: 0.4 });
    let builder = LiouvillianBuilder::from_model(&m);
    let mut buf = CMatrix::zeros(4, 4);
    c.bench_function("liouvillian_eval_2level", |b| {
        let mut t = 0.0;
        b.iter(|| {
            t += 1e-3;
            builder.eval_clipped_into(t, 1e3, &mut buf);
        })
    });
}

fn bench_choi(c: &mut Criterion) {
    let m = CanonicalModel::spin_boson(SpinBosonParams { delta: 0.4, g: 0.4 });
    let s = unravel_core::model::build_liouvillian(&m, 1.0).unwrap();
    let dt = unravel_core::qops::cr(1e-3);
    let map =
        Superoperator::new(2, CMatrix::identity(4, 4) + s.matrix().map(|e| e * dt)).unwrap();
    c.bench_function("reshuffle_4x4", |b| b.iter(|| reshuffle(&map)));
    c.bench_function("choi_spectrum_4x4", |b| b.iter(|| choi_spectrum(&map).unwrap()));
    c.bench_function("kraus_decompose_4x4", |b| b.iter(|| kraus_decompose(&map).unwrap()));
}

fn bench_covariance(c: &mut Criterion) {
    let env = BosonEnvironment::single_vacuum_mode(1.4, 0.4, sigma_minus());
    let grid = TimeGrid::new(0.0, 2.0, 32).unwrap();
    c.bench_function("dgs_covariance_build_n32", |b| {
        b.iter_batched(
            || assemble_kernel_matrix(&env, &grid).unwrap(),
            |table| build_augmented_covariance(&table).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_liouvillian, bench_choi, bench_covariance);
criterion_main!(benches);
