//! Throughput comparison of the data-parallel worker pool against
//! single-threaded execution on the three heavy code paths: coset-grid
//! construction, spherical integration, and batch path simulation.
//!
//! With the default `parallel` feature each workload runs twice — once on
//! a pool sized to the machine and once on a one-thread pool (rayon's
//! scoped pools route the same code through either). Built with
//! `--no-default-features` the library's sequential fallback is compiled
//! in and the suite benches that single arm.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use padic_spherical::distributions::{
    pairing_components, CValue, HomogeneousDistribution, Quasicharacter, SExponent,
    UnitCharacter,
};
use padic_spherical::field::FieldContext;
use padic_spherical::haar::{
    random_cylinder_function, spherical_integrate, FiniteLevelAngular, SphericalAtlas,
};
use padic_spherical::levy::{simulate_batch, JumpLaw, LevyModel};

/// Run a closure on a pool of the requested width (parallel builds), or
/// directly on the calling thread (sequential builds).
fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("scoped pool")
            .install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

fn arms() -> Vec<(&'static str, usize)> {
    #[cfg(feature = "parallel")]
    {
        let width = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1);
        vec![("worker_pool", width), ("single_thread", 1)]
    }
    #[cfg(not(feature = "parallel"))]
    {
        vec![("sequential", 1)]
    }
}

/// Building the level-3 coset grid from scratch: Teichmueller lifts and
/// norm-one projections for every unit class mod p^3.
fn grid_construction(c: &mut Criterion) {
    let ctx = FieldContext::new(5, 2, 8).unwrap();
    let mut group = c.benchmark_group("level3_grid_construction");
    group.sample_size(10);
    for (label, threads) in arms() {
        group.bench_function(label, |b| {
            b.iter(|| {
                with_threads(threads, || {
                    let atlas = SphericalAtlas::new(&ctx);
                    atlas.level(3).unwrap().grid().len()
                })
            })
        });
    }
    group.finish();
}

/// Spherical integration of a random exact test function over prebuilt
/// grids: the per-shell sums are the parallel section.
fn spherical_integration(c: &mut Criterion) {
    let ctx = FieldContext::new(5, 2, 8).unwrap();
    let atlas = SphericalAtlas::new(&ctx);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = random_cylinder_function(&ctx, &mut rng, 2, 6)
        .unwrap()
        .map_values(|r| CValue::rational(r.clone()));
    // Pre-warm the cached levels so the bench isolates the summation.
    spherical_integrate(&atlas, &f).unwrap();
    let mut group = c.benchmark_group("spherical_integration");
    group.sample_size(10);
    for (label, threads) in arms() {
        group.bench_function(label, |b| {
            b.iter(|| with_threads(threads, || spherical_integrate(&atlas, &f).unwrap()))
        });
    }
    group.finish();
}

/// The exponential-polynomial skeleton of a distribution pairing: one
/// grid sum per radial shell meeting the support.
fn pairing_skeleton(c: &mut Criterion) {
    let ctx = FieldContext::new(3, 2, 8).unwrap();
    let atlas = SphericalAtlas::new(&ctx);
    let pi = Quasicharacter::new(&ctx, SExponent::Integer(1), UnitCharacter::trivial());
    let table =
        FiniteLevelAngular::constant(&atlas, 2, CValue::from_int(1)).unwrap();
    let h = HomogeneousDistribution::new(pi, table);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let phi = random_cylinder_function(&ctx, &mut rng, 2, 6)
        .unwrap()
        .map_values(|r| CValue::rational(r.clone()));
    pairing_components(&atlas, &h, &phi).unwrap();
    let mut group = c.benchmark_group("pairing_skeleton");
    group.sample_size(10);
    for (label, threads) in arms() {
        group.bench_function(label, |b| {
            b.iter(|| {
                with_threads(threads, || pairing_components(&atlas, &h, &phi).unwrap())
            })
        });
    }
    group.finish();
}

/// Independent path simulation, the embarrassingly parallel workload.
fn path_simulation(c: &mut Criterion) {
    let ctx = FieldContext::new(3, 2, 8).unwrap();
    let model = LevyModel::new(&ctx, 1.0, -2, 2, 2.0).unwrap();
    let x0 = ctx.one();
    let mut group = c.benchmark_group("simulate_2000_paths");
    group.sample_size(10);
    for (label, threads) in arms() {
        group.bench_function(label, |b| {
            b.iter(|| {
                with_threads(threads, || {
                    simulate_batch(
                        &model,
                        &ctx,
                        JumpLaw::RotationInvariant,
                        &x0,
                        0.75,
                        2_000,
                        7,
                        0,
                    )
                    .unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    grid_construction,
    spherical_integration,
    pairing_skeleton,
    path_simulation
);
criterion_main!(benches);
