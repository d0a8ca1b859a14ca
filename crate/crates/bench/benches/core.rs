use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rcm_vio::eval::run_simulation;
use rcm_vio::geometry::{exp_se3, log_se3, ominus};
use rcm_vio::odometry::{pnp_ransac, RansacConfig};
use rcm_vio::optimizer::{dense_step, solve, sparse_step, LmConfig};
use rcm_vio::simulator::generate;
use rcm_vio::{OdometryConfig, OptimizerConfig, Scenario, Transform, Twist, VariantConfig, Vec3};
use rcm_vio_bench::{graph, noiseless_sim, perturbed_window, pnp_problem};
use std::hint::black_box;

fn lie(c: &mut Criterion) {
    let xi = Twist::new(Vec3::new(0.3, -0.2, 0.1), Vec3::new(0.05, 0.01, -0.02));
    let t = exp_se3(&xi);
    let u = exp_se3(&Twist::new(Vec3::new(-0.1, 0.4, 0.2), Vec3::new(0.0, 0.03, 0.01)));
    c.bench_function("exp_se3", |b| b.iter(|| exp_se3(black_box(&xi))));
    c.bench_function("log_se3", |b| b.iter(|| log_se3(black_box(&t))));
    c.bench_function("ominus", |b| b.iter(|| ominus(black_box(&t), black_box(&u))));
}

fn steps(c: &mut Criterion) {
    let sim = noiseless_sim(6.0);
    let g = graph(&sim);
    let (problem, poses) = perturbed_window(&g, 10);
    c.bench_function("sparse_step_10", |b| b.iter(|| sparse_step(&problem, black_box(&poses), 1e-4)));
    c.bench_function("dense_step_10", |b| b.iter(|| dense_step(&problem, black_box(&poses), 1e-4)));
    let mut p = problem.clone();
    p.poses = poses.clone();
    c.bench_function("lm_solve_10", |b| b.iter(|| solve(black_box(&p), &LmConfig::default())));
}

fn pnp(c: &mut Criterion) {
    let (rig, pose, corr) = pnp_problem(150, 0.3, 3);
    let init: Transform = pose.retract(&Twist::new(Vec3::new(0.01, 0.0, -0.01), Vec3::new(0.002, 0.0, 0.0)));
    let cfg = RansacConfig::default();
    c.bench_function("pnp_ransac_150", |b| {
        b.iter_batched(
            || ChaCha8Rng::seed_from_u64(1),
            |mut rng| pnp_ransac(&corr, &init, &rig, &cfg, &mut rng),
            BatchSize::SmallInput,
        )
    });
}

fn tracker(c: &mut Criterion) {
    let sc = Scenario {
        duration: 20.0,
        ..Scenario::preset("standard").expect("preset")
    };
    let sim = generate(&sc).expect("scenario");
    let cfg = OdometryConfig::default();
    let opt = OptimizerConfig::default();
    let mut group = c.benchmark_group("tracker_20s");
    group.sample_size(10);
    for (name, v) in [("V3", VariantConfig::V3), ("V3+opt", VariantConfig::V3.with_optimization(true))] {
        group.bench_function(name, |b| b.iter(|| run_simulation(&sim, v, &cfg, &opt)));
    }
    group.finish();
}

criterion_group!(benches, lie, steps, pnp, tracker);
criterion_main!(benches);
