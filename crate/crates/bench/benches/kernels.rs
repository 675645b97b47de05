use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use std::hint::black_box;

use kwscale::simulator::{EpisodeContext, Simulator};
use kwscale::stationary::SolverKind;
use kwscale::{
    build_generator, run_episode, CostWeights, ModelParams, Oracle, PolicyKind, PolicySpec, RngStream,
    SolverOptions, StateSpace, SystemState,
};

fn generator(c: &mut Criterion) {
    let mut group = c.benchmark_group("generator");
    for n in [10u32, 20] {
        let params = ModelParams::reference(0.3, n);
        let space = StateSpace::enumerate(n);
        group.throughput(Throughput::Elements(space.len() as u64));
        group.bench_function(format!("build_n{n}"), |b| {
            b.iter(|| build_generator(&PolicySpec::simplified(black_box(5.5)), &params, &space))
        });
    }
    group.bench_function("enumerate_n30", |b| b.iter(|| StateSpace::enumerate(black_box(30))));
    group.finish();
}

fn stationary(c: &mut Criterion) {
    let mut group = c.benchmark_group("stationary");
    group.sample_size(10);
    let oracle = Oracle::new(ModelParams::reference(0.3, 20), CostWeights::default(), PolicyKind::Simplified)
        .unwrap();
    for kind in [SolverKind::GaussSeidel, SolverKind::Dense] {
        let o = oracle.clone().with_options(SolverOptions::with_kind(kind));
        group.bench_function(format!("{kind:?}_n20"), |b| b.iter(|| o.evaluate(black_box(3.5)).unwrap()));
    }
    group.finish();
}

fn simulation(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulation");
    let params = ModelParams::reference(0.3, 50);
    let sim = Simulator::new(&params, &PolicySpec::simplified(5.5));
    let steps = 100_000u64;
    group.throughput(Throughput::Elements(steps));
    group.bench_function("steps_n50", |b| {
        b.iter_batched(
            || RngStream::new(1, 0).rng(),
            |mut rng| sim.run(SystemState::EMPTY, steps, &mut rng, |_| ()),
            BatchSize::SmallInput,
        )
    });
    let ctx = EpisodeContext {
        params,
        kind: PolicyKind::Simplified,
        weights: CostWeights::default(),
        penalty: None,
        x_start: SystemState::EMPTY,
        seed: 1,
    };
    group.throughput(Throughput::Elements(4 * 25_000));
    group.bench_function("episode_k2_tau25k", |b| {
        b.iter(|| run_episode(&ctx, black_box(7), 5.5, 0.3, 25_000, 2, None))
    });
    group.finish();
}

criterion_group!(benches, generator, stationary, simulation);
criterion_main!(benches);
