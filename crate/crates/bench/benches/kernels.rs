use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use manyserver_bench::kernels::{conv_trap, volterra_plus};
use manyserver_bench::queue::{run_queue, InitialState, QueueConfig};
use manyserver_bench::tables::correlate;
use manyserver_bench::{diffusion_fixture, BuildOptions, GridTables, RenewalKernel, ServiceDistribution};

fn kernels(c: &mut Criterion) {
    let d = ServiceDistribution::lomax(3.0, 2.0).unwrap();
    let mut g = c.benchmark_group("kernels");
    for &n in &[1_000usize, 4_000] {
        let dt = 10.0 / n as f64;
        let tables = GridTables::new(&d, dt, n + 1);
        let f: Vec<f64> = (0..=n).map(|i| (i as f64 * dt).sin()).collect();
        g.bench_with_input(BenchmarkId::new("conv_trap", n), &n, |b, &n| {
            b.iter(|| conv_trap(black_box(&f), &tables.dens, dt, n + 1))
        });
        g.bench_with_input(BenchmarkId::new("correlate", n), &n, |b, &n| {
            b.iter(|| correlate(black_box(&f), &tables.bar, n + 1))
        });
        let kernel = RenewalKernel::from_tables(&tables, n);
        g.bench_with_input(BenchmarkId::new("renewal_solve", n), &n, |b, _| b.iter(|| kernel.solve(black_box(&f))));
        g.bench_with_input(BenchmarkId::new("volterra_plus", n), &n, |b, _| {
            b.iter(|| volterra_plus(black_box(&f), &tables.dens, dt).unwrap())
        });
    }
    g.finish();
}

fn diffusion(c: &mut Criterion) {
    let (model, y0, b, m) = diffusion_fixture(0.01, 5.0, 10.0, 3);
    let opts = BuildOptions::only(Vec::new());
    c.bench_function("diffusion_build_500x1000", |bch| {
        bch.iter(|| model.build(&y0, b.clone(), m.clone(), &opts).unwrap())
    });
}

fn queue(c: &mut Criterion) {
    let cfg = QueueConfig {
        n: 400,
        beta: 1.0,
        arrival_rate: None,
        interarrival: ServiceDistribution::exponential(1.0).unwrap(),
        service: ServiceDistribution::lomax(3.0, 2.0).unwrap(),
        t_max: 10.0,
        seed: 1,
        initial: InitialState::Fluid,
        sample_times: vec![10.0],
        dr: 0.1,
        n_r: 10,
        burn_in: 0.0,
    };
    c.bench_function("queue_n400_t10", |b| b.iter(|| run_queue(black_box(&cfg)).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kernels, diffusion, queue
}
criterion_main!(benches);
