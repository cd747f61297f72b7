//! Compares sequential and rayon-parallel execution of a scheme sweep.
//! The parallel group only exists with the `parallel` feature (default).

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use migsim::runner;
use migsim::schemes::{run_scheme, SchemeId, SimParams};
use migsim::trace::{generate, Generator, SyntheticSpec, TraceRecord};

fn sweep_trace() -> Vec<TraceRecord> {
    let spec = SyntheticSpec {
        generator: Generator::Zipf,
        footprint_pages: 512,
        zipf_exponent: 1.0,
        write_fraction: 0.3,
        records: 30_000,
        gap_cycles: 150,
        num_cores: 4,
        seed: 42,
        phases: 1,
    };
    generate(&spec).unwrap()
}

fn cells() -> (Vec<(SchemeId, u64)>, SimParams) {
    let mut params = SimParams::default();
    params.migrant_capacity_bytes = 1 << 20;
    params.hw_cache_seq.capacity_bytes = 1 << 20;
    params.hw_cache_par.capacity_bytes = 1 << 20;
    let schemes = [
        SchemeId::PcmBase,
        SchemeId::PcmOnly,
        SchemeId::DramIdeal,
        SchemeId::HwCacheSeq,
        SchemeId::MigrantStore,
    ];
    let cells = (1u64..=2)
        .flat_map(|seed| schemes.iter().map(move |&s| (s, seed)))
        .collect();
    (cells, params)
}

fn bench_sweep(c: &mut Criterion) {
    let trace = sweep_trace();
    let (cells, params) = cells();
    let mut group = c.benchmark_group("sweep");
    group.sample_size(10);

    group.bench_with_input(
        BenchmarkId::new("sequential", cells.len()),
        &cells,
        |b, cells| {
            b.iter(|| {
                runner::run_cells_sequential(cells.len(), &|i| {
                    let (scheme, seed) = cells[i];
                    run_scheme(scheme, &trace, &params, seed)
                        .unwrap()
                        .total_cycles
                })
            })
        },
    );

    #[cfg(feature = "parallel")]
    group.bench_with_input(
        BenchmarkId::new("parallel", cells.len()),
        &cells,
        |b, cells| {
            b.iter(|| {
                runner::run_cells_parallel(0, cells.len(), &|i| {
                    let (scheme, seed) = cells[i];
                    run_scheme(scheme, &trace, &params, seed)
                        .unwrap()
                        .total_cycles
                })
            })
        },
    );

    group.finish();
}

criterion_group!(benches, bench_sweep);
criterion_main!(benches);
