//! Sequential vs rayon execution of the embarrassingly parallel sweeps.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use slowman::harness::{compare_regions, order_of_accuracy, RegionSpec, StepSpec, SweepSpec};
use slowman::par::Exec;
use slowman::stability::{raster_region, RasterMode, RasterSpec};
use slowman::systems::SystemSpec;

const EXECS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn raster(c: &mut Criterion) {
    let mut g = c.benchmark_group("raster_region");
    for n in [64, 256] {
        let spec = RasterSpec {
            m: 2,
            mode: RasterMode::Differenced { eta: 1.0 },
            theta_range: (std::f64::consts::FRAC_PI_2, 1.5 * std::f64::consts::PI),
            step_range: (0.0, 3.0),
            resolution: (n, n),
        };
        for (name, exec) in EXECS {
            g.bench_with_input(BenchmarkId::new(name, n), &spec, |b, s| b.iter(|| raster_region(black_box(s), exec)));
        }
    }
    g.finish();
}

fn regions(c: &mut Criterion) {
    let mut g = c.benchmark_group("compare_regions");
    g.sample_size(10);
    let spec = RegionSpec::new(1, 1.0, (32, 32));
    for (name, exec) in EXECS {
        g.bench_function(name, |b| b.iter(|| compare_regions(black_box(&spec), exec)));
    }
    g.finish();
}

fn sweep(c: &mut Criterion) {
    let mut g = c.benchmark_group("order_of_accuracy");
    g.sample_size(10);
    let spec = SweepSpec {
        system: SystemSpec::new("mm").param("eps", 0.01),
        epsilons: vec![1e-2, 5e-3, 2e-3, 1e-3, 5e-4, 2e-4],
        m_values: vec![1],
        x0: vec![1.0],
        y_seed: Some(vec![0.5]),
        step: StepSpec::Differenced {
            h_hat_over_eps: 0.5,
            eta: 0.5,
        },
        tol: Some(1e-12),
        max_iters: None,
    };
    for (name, exec) in EXECS {
        g.bench_function(name, |b| b.iter(|| order_of_accuracy(black_box(&spec), 1, exec)));
    }
    g.finish();
}

criterion_group!(benches, raster, regions, sweep);
criterion_main!(benches);
