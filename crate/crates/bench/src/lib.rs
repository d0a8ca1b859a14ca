//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcm_vio::camera::Lens;
use rcm_vio::eval::ground_truth_graph;
use rcm_vio::odometry::Correspondence;
use rcm_vio::optimizer::{build_problem, WindowProblem};
use rcm_vio::simulator::{default_rig, generate, Scenario, Simulation};
use rcm_vio::{KeyframeGraph, StereoRig, Transform, Twist, Vec3, Weights};

/// Standard scenario of `secs` seconds without noise.
pub fn noiseless_sim(secs: f64) -> Simulation {
    let sc = Scenario {
        duration: secs,
        ..Scenario::preset("standard").expect("preset")
    };
    generate(&sc.noiseless()).expect("scenario")
}

pub fn graph(sim: &Simulation) -> KeyframeGraph {
    ground_truth_graph(sim, 6).expect("stride")
}

/// A window of `len` keyframes starting at keyframe 1, with its poses
/// perturbed by about 2° and 5 mm.
pub fn perturbed_window(graph: &KeyframeGraph, len: usize) -> (WindowProblem, Vec<Transform>) {
    let problem = build_problem(graph, (1, len), &Weights::default()).expect("window");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut unit = || {
        Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize()
    };
    let poses = problem
        .poses
        .iter()
        .zip(&problem.fixed)
        .map(|(p, &fixed)| {
            if fixed {
                *p
            } else {
                p.retract(&Twist::new(unit() * 2f64.to_radians(), unit() * 5e-3))
            }
        })
        .collect();
    (problem, poses)
}

/// `n` correspondences seen from `pose`, a fraction `outliers` of them
/// replaced by random pixels, with 1 px noise on the rest.
pub fn pnp_problem(n: usize, outliers: f64, seed: u64) -> (StereoRig, Transform, Vec<Correspondence>) {
    let rig = default_rig();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = Transform::new(
        rcm_vio::geometry::exp_so3(&Vec3::new(0.1, -0.2, 0.05)),
        Vec3::new(0.08, 0.0, 0.0),
    );
    let body_from_left = rig.lens_from_camera(Lens::Left).inverse();
    let world = pose.inverse();
    let mut corr = Vec::with_capacity(n);
    while corr.len() < n {
        let z = rng.random_range(0.08..0.3);
        let x = body_from_left.act(&Vec3::new(rng.random_range(-0.3..0.3) * z, rng.random_range(-0.2..0.2) * z, z));
        let lens = if corr.len() % 2 == 0 { Lens::Left } else { Lens::Right };
        let Ok(mut pixel) = rig.project(lens, &x) else { continue };
        if rng.random_bool(outliers) {
            pixel.u = rng.random_range(0.0..rig.intrinsics(lens).width as f64);
            pixel.v = rng.random_range(0.0..rig.intrinsics(lens).height as f64);
        } else {
            pixel.u += rng.random_range(-1.0..1.0);
            pixel.v += rng.random_range(-1.0..1.0);
        }
        corr.push(Correspondence {
            point: world.act(&x),
            lens,
            pixel,
        });
    }
    (rig, pose, corr)
}
