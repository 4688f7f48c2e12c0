//! Benchmark: edge-patched forward runtime as a function of patch-set size.
//!
//! The engine always iterates every edge and selects the clean or donor row
//! per (edge, position), so runtime should be flat in the number of patched
//! edges. Run with `cargo bench -p ablate-bench`.

use ablate_bench::patching_fixture;
use ablate_core::ablation::run_ablated;
use ablate_core::graph::Circuit;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn bench_patch_sizes(c: &mut Criterion) {
    let fx = patching_fixture();
    let mut group = c.benchmark_group("edge_patching");
    for &k in &[1usize, 5, 11, 22] {
        let circuit = Circuit::edges(0..k);
        group.bench_with_input(BenchmarkId::from_parameter(k), &circuit, |b, circuit| {
            b.iter(|| {
                run_ablated(&fx.model, circuit, &fx.spec, &fx.batch, &fx.donors).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_patch_sizes);
criterion_main!(benches);
