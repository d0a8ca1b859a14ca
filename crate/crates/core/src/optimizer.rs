//! Windowed robust least squares over keyframe poses.
//!
//! Levenberg–Marquardt with right-multiplied twist updates. The normal
//! equations are accumulated in 6×6 pose blocks and factored with a block
//! sparse Cholesky; a dense path exists as a cross-check.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix3x6, Matrix6, Vector6};
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::StereoRig;
use crate::geometry::{Transform, Twist, Vec3};
use crate::odometry::KeyframeGraph;
use crate::residuals::{
    beta, robustifier_for, scale_factor, BlockEvaluation, Measurement, ResidualBlock,
    ResidualContext, ResidualError, ResidualKind, ResidualStatistics, DEFAULT_HUBER_DELTA,
};
use crate::sensors::WorldReferences;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("window {first}..={last} is empty or outside the {count} keyframes")]
    EmptyWindow {
        first: usize,
        last: usize,
        count: usize,
    },
    #[error("cost is not finite at the start ({0})")]
    NonFiniteCost(f64),
    #[error("expected {expected} poses, got {got}")]
    PoseCount { expected: usize, got: usize },
    #[error("normal equations are not positive definite")]
    NotPositiveDefinite,
    #[error("invalid optimizer configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Residual(#[from] ResidualError),
}

/// Normalization and robustification settings shared by all blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub stats: ResidualStatistics,
    /// Gyro versus reprojection trade-off.
    pub gamma: f64,
    pub huber_delta: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            stats: ResidualStatistics::reference(),
            gamma: 0.4,
            huber_delta: DEFAULT_HUBER_DELTA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub g_tol: f64,
    pub f_tol: f64,
    pub max_iterations: usize,
    pub max_lambda: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            initial_lambda: 1e-4,
            lambda_up: 2.0,
            lambda_down: 1.0 / 3.0,
            g_tol: 1e-10,
            f_tol: 1e-9,
            max_iterations: 50,
            max_lambda: 1e16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub weights: Weights,
    /// Solve every `trigger` keyframes.
    pub trigger: usize,
    /// Number of keyframes in each window.
    pub window: usize,
    pub lm: LmConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            weights: Weights::default(),
            trigger: 10,
            window: 10,
            lm: LmConfig::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        let w = &self.weights;
        if !(0.0..=1.0).contains(&w.gamma) {
            return Err(OptimizerError::Config(format!("gamma must lie in [0, 1], got {}", w.gamma)));
        }
        if !(w.huber_delta > 0.0) {
            return Err(OptimizerError::Config("huber delta must be positive".into()));
        }
        if self.trigger == 0 || self.window == 0 {
            return Err(OptimizerError::Config("trigger and window must be at least 1".into()));
        }
        let lm = &self.lm;
        if !(lm.initial_lambda > 0.0 && lm.lambda_up > 1.0 && lm.lambda_down > 0.0 && lm.lambda_down < 1.0) {
            return Err(OptimizerError::Config("damping factors out of range".into()));
        }
        w.stats.validate()?;
        Ok(())
    }
}

/// One measurement of a keyframe graph with the keyframe ids it touches.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphMeasurement {
    /// Keyframe that owns the measurement (the observer for reprojection).
    pub owner: usize,
    pub keyframes: Vec<usize>,
    pub measurement: Measurement,
}

/// All measurements owned by keyframes `first..=last`.
pub fn enumerate_measurements(graph: &KeyframeGraph, first: usize, last: usize) -> Vec<GraphMeasurement> {
    let mut out = Vec::new();
    for kf in &graph.keyframes[first..=last] {
        let unary = |m| GraphMeasurement {
            owner: kf.id,
            keyframes: vec![kf.id],
            measurement: m,
        };
        out.push(unary(Measurement::Pivot(graph.pivot)));
        out.push(unary(Measurement::Accel(kf.accel)));
        out.push(unary(Measurement::Mag(kf.mag)));
        for o in &kf.observations {
            let Some(lm) = graph.landmarks.get(&o.landmark) else {
                continue;
            };
            out.push(GraphMeasurement {
                owner: kf.id,
                keyframes: vec![lm.anchor, kf.id],
                measurement: Measurement::Reproj {
                    landmark: lm.id,
                    point_in_anchor: lm.position,
                    pixel: o.pixel,
                    lens: o.lens,
                },
            });
        }
        if kf.id > first {
            out.push(GraphMeasurement {
                owner: kf.id,
                keyframes: vec![kf.id - 1, kf.id],
                measurement: Measurement::Gyro(kf.gyro.delta),
            });
        }
    }
    out
}

/// Poses, blocks and gauge of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowProblem {
    /// Keyframe id of each pose slot; window keyframes first, then anchors
    /// outside the window.
    pub keyframes: Vec<usize>,
    pub poses: Vec<Transform>,
    pub fixed: Vec<bool>,
    /// Blocks whose `poses` are slot indices.
    pub blocks: Vec<ResidualBlock>,
    /// Inclusive keyframe id range.
    pub window: (usize, usize),
    pub rig: StereoRig,
    pub refs: WorldReferences,
}

pub fn build_problem(
    graph: &KeyframeGraph,
    window: (usize, usize),
    weights: &Weights,
) -> Result<WindowProblem, OptimizerError> {
    let (first, last) = window;
    if first > last || last >= graph.keyframes.len() {
        return Err(OptimizerError::EmptyWindow {
            first,
            last,
            count: graph.keyframes.len(),
        });
    }
    let measurements = enumerate_measurements(graph, first, last);
    let mut slot_of: BTreeMap<usize, usize> = (first..=last).map(|id| (id, id - first)).collect();
    let mut keyframes: Vec<usize> = (first..=last).collect();
    for m in &measurements {
        for &id in &m.keyframes {
            if let std::collections::btree_map::Entry::Vacant(e) = slot_of.entry(id) {
                e.insert(keyframes.len());
                keyframes.push(id);
            }
        }
    }
    let poses: Vec<Transform> = keyframes.iter().map(|&id| graph.keyframes[id].pose).collect();
    let fixed: Vec<bool> = (0..keyframes.len()).map(|s| s == 0 || s > last - first).collect();

    let mut reproj_count: BTreeMap<usize, usize> = BTreeMap::new();
    for m in &measurements {
        if m.measurement.kind() == ResidualKind::Reproj {
            *reproj_count.entry(m.owner).or_default() += 1;
        }
    }
    let ctx = ResidualContext {
        rig: &graph.rig,
        refs: &graph.refs,
    };
    let mut blocks = Vec::with_capacity(measurements.len());
    for m in measurements {
        let kind = m.measurement.kind();
        let count = if kind == ResidualKind::Reproj {
            reproj_count[&m.owner]
        } else {
            1
        };
        let variance = weights.stats.get(kind).variance;
        let alpha = scale_factor(variance, count, beta(kind, weights.gamma))?;
        let robust = robustifier_for(kind, weights.huber_delta, alpha, variance);
        let slots: Vec<usize> = m.keyframes.iter().map(|id| slot_of[id]).collect();
        let block = ResidualBlock::new(slots, m.measurement, alpha, robust)?;
        // drop reprojections that cannot be evaluated at the start
        let refs: Vec<&Transform> = block.poses.iter().map(|&s| &poses[s]).collect();
        if kind == ResidualKind::Reproj && block.residual(&refs, &ctx).is_err() {
            continue;
        }
        blocks.push(block);
    }
    Ok(WindowProblem {
        keyframes,
        poses,
        fixed,
        blocks,
        window,
        rig: graph.rig,
        refs: graph.refs,
    })
}

/// Per-kind robustified costs; `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostBreakdown {
    pub per_kind: [f64; 5],
    pub total: f64,
}

impl CostBreakdown {
    fn from_parts(per_kind: [f64; 5]) -> Self {
        Self {
            per_kind,
            total: per_kind.iter().sum(),
        }
    }

    pub fn get(&self, kind: ResidualKind) -> f64 {
        self.per_kind[kind.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Gradient,
    CostTolerance,
    MaxIterations,
    DampingOverflow,
    NoVariables,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub window: (usize, usize),
    /// Accepted steps.
    pub iterations: usize,
    /// Cost at the start and after every accepted step.
    pub history: Vec<CostBreakdown>,
    pub before: CostBreakdown,
    pub after: CostBreakdown,
    pub termination: Termination,
    pub final_lambda: f64,
}

impl SolveReport {
    /// `f_k(after) − f_k(before)`.
    pub fn delta_f(&self) -> [f64; 5] {
        std::array::from_fn(|k| self.after.per_kind[k] - self.before.per_kind[k])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,total_cost,f_pivot,f_accel,f_mag,f_reproj,f_gyro\n");
        for (i, c) in self.history.iter().enumerate() {
            let _ = write!(out, "{i},{}", c.total);
            for v in c.per_kind {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Linearization of one block: weighted residual rows and Jacobians per slot.
struct Linearized {
    cost: f64,
    /// `√w α r`.
    residual: Vec3,
    /// `(slot, √w α J)`, slots distinct.
    jacobians: Vec<(usize, Matrix3x6<f64>)>,
}

impl WindowProblem {
    fn ctx(&self) -> ResidualContext<'_> {
        ResidualContext {
            rig: &self.rig,
            refs: &self.refs,
        }
    }

    pub fn variable_count(&self) -> usize {
        self.fixed.iter().filter(|f| !**f).count()
    }

    /// Variable index of each slot.
    fn variable_index(&self) -> Vec<Option<usize>> {
        let mut next = 0;
        self.fixed
            .iter()
            .map(|&f| {
                if f {
                    None
                } else {
                    next += 1;
                    Some(next - 1)
                }
            })
            .collect()
    }

    fn check_poses(&self, poses: &[Transform]) -> Result<(), OptimizerError> {
        if poses.len() != self.poses.len() {
            return Err(OptimizerError::PoseCount {
                expected: self.poses.len(),
                got: poses.len(),
            });
        }
        Ok(())
    }

    pub fn cost_breakdown(&self, poses: &[Transform]) -> Result<CostBreakdown, OptimizerError> {
        self.check_poses(poses)?;
        let ctx = self.ctx();
        let costs: Vec<(ResidualKind, f64)> = self
            .blocks
            .par_iter()
            .map(|b| {
                let refs: Vec<&Transform> = b.poses.iter().map(|&s| &poses[s]).collect();
                b.cost(&refs, &ctx).map(|c| (b.kind(), c))
            })
            .collect::<Result<_, _>>()?;
        let mut per_kind = [0.0; 5];
        for (kind, c) in costs {
            per_kind[kind.index()] += c;
        }
        Ok(CostBreakdown::from_parts(per_kind))
    }

    fn linearize(&self, poses: &[Transform]) -> Result<Vec<Linearized>, OptimizerError> {
        let ctx = self.ctx();
        self.blocks
            .par_iter()
            .map(|b| {
                let refs: Vec<&Transform> = b.poses.iter().map(|&s| &poses[s]).collect();
                let BlockEvaluation {
                    residual, jacobians, ..
                } = b.evaluate(&refs, &ctx)?;
                let x = b.scale * residual.norm();
                let sw = b.robustifier.weight(x).sqrt() * b.scale;
                let mut js: Vec<(usize, Matrix3x6<f64>)> = Vec::with_capacity(2);
                for (k, &slot) in b.poses.iter().enumerate() {
                    match js.iter_mut().find(|(s, _)| *s == slot) {
                        Some((_, j)) => *j += jacobians[k] * sw,
                        None => js.push((slot, jacobians[k] * sw)),
                    }
                }
                Ok(Linearized {
                    cost: b.robustifier.cost(x),
                    residual: residual * sw,
                    jacobians: js,
                })
            })
            .collect()
    }

    /// Copies the window poses back into the graph.
    pub fn write_back(&self, poses: &[Transform], graph: &mut KeyframeGraph) {
        for (slot, &id) in self.keyframes.iter().enumerate() {
            if !self.fixed[slot] {
                graph.keyframes[id].pose = poses[slot];
            }
        }
    }
}

pub fn cost_breakdown(problem: &WindowProblem, poses: &[Transform]) -> Result<CostBreakdown, OptimizerError> {
    problem.cost_breakdown(poses)
}

/// Per-kind `f_k(after) − f_k(before)`.
pub fn delta_f(
    problem: &WindowProblem,
    before: &[Transform],
    after: &[Transform],
) -> Result<[f64; 5], OptimizerError> {
    let (b, a) = (problem.cost_breakdown(before)?, problem.cost_breakdown(after)?);
    Ok(std::array::from_fn(|k| a.per_kind[k] - b.per_kind[k]))
}

// ---------------------------------------------------------------------------
// block sparse normal equations

/// Symmetric block matrix: diagonal blocks plus strictly lower blocks by row.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSystem {
    pub diag: Vec<Matrix6<f64>>,
    /// `lower[i][j]` for `j < i`.
    pub lower: Vec<BTreeMap<usize, Matrix6<f64>>>,
    pub gradient: Vec<Vector6<f64>>,
    pub cost: f64,
}

impl BlockSystem {
    fn new(n: usize) -> Self {
        Self {
            diag: vec![Matrix6::zeros(); n],
            lower: vec![BTreeMap::new(); n],
            gradient: vec![Vector6::zeros(); n],
            cost: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn gradient_norm_inf(&self) -> f64 {
        self.gradient.iter().map(|g| g.amax()).fold(0.0, f64::max)
    }

    /// Marquardt scaling with a floor so unconstrained directions still get
    /// damped.
    fn damping_diagonal(&self) -> Vec<Vector6<f64>> {
        let max = self
            .diag
            .iter()
            .flat_map(|d| d.diagonal().iter().copied().collect::<Vec<_>>())
            .fold(0.0, f64::max);
        let floor = (max * 1e-9).max(1e-12);
        self.diag.iter().map(|d| d.diagonal().map(|v| v.max(floor))).collect()
    }

    /// Solves `(H + λ D) δ = −g` by block Cholesky.
    pub fn solve(&self, lambda: f64) -> Option<Vec<Vector6<f64>>> {
        let n = self.len();
        let damp = self.damping_diagonal();
        let mut l_diag: Vec<Matrix6<f64>> = Vec::with_capacity(n);
        let mut l_low: Vec<BTreeMap<usize, Matrix6<f64>>> = vec![BTreeMap::new(); n];
        for i in 0..n {
            let start = self.lower[i].keys().next().copied().unwrap_or(i);
            for j in start..i {
                let mut s = self.lower[i].get(&j).copied();
                for (&k, lik) in l_low[i].range(..j) {
                    if let Some(ljk) = l_low[j].get(&k) {
                        *s.get_or_insert_with(Matrix6::zeros) -= lik * ljk.transpose();
                    }
                }
                if let Some(s) = s {
                    // L_ij L_jjᵀ = S
                    let lij = l_diag[j].solve_lower_triangular(&s.transpose())?.transpose();
                    l_low[i].insert(j, lij);
                }
            }
            let mut a = self.diag[i] + Matrix6::from_diagonal(&(damp[i] * lambda));
            for lik in l_low[i].values() {
                a -= lik * lik.transpose();
            }
            l_diag.push(a.cholesky()?.l());
        }
        let mut y: Vec<Vector6<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut b = -self.gradient[i];
            for (&j, lij) in &l_low[i] {
                b -= lij * y[j];
            }
            y.push(l_diag[i].solve_lower_triangular(&b)?);
        }
        let mut x = vec![Vector6::zeros(); n];
        for i in (0..n).rev() {
            let mut b = y[i];
            for (k, row) in l_low.iter().enumerate().skip(i + 1) {
                if let Some(lki) = row.get(&i) {
                    b -= lki.transpose() * x[k];
                }
            }
            x[i] = l_diag[i].transpose().solve_upper_triangular(&b)?;
        }
        Some(x)
    }
}

fn assemble(problem: &WindowProblem, lin: &[Linearized]) -> BlockSystem {
    let var = problem.variable_index();
    let mut sys = BlockSystem::new(problem.variable_count());
    for l in lin {
        sys.cost += l.cost;
        for (a, (sa, ja)) in l.jacobians.iter().enumerate() {
            let Some(ia) = var[*sa] else { continue };
            sys.gradient[ia] += ja.transpose() * l.residual;
            sys.diag[ia] += ja.transpose() * ja;
            for (sb, jb) in &l.jacobians[a + 1..] {
                let Some(ib) = var[*sb] else { continue };
                let (hi, lo, m) = if ia > ib {
                    (ia, ib, ja.transpose() * jb)
                } else {
                    (ib, ia, jb.transpose() * ja)
                };
                *sys.lower[hi].entry(lo).or_insert_with(Matrix6::zeros) += m;
            }
        }
    }
    sys
}

/// The damped Gauss–Newton step at `poses`, from the block sparse path.
pub fn sparse_step(
    problem: &WindowProblem,
    poses: &[Transform],
    lambda: f64,
) -> Result<Vec<Vector6<f64>>, OptimizerError> {
    problem.check_poses(poses)?;
    let sys = assemble(problem, &problem.linearize(poses)?);
    sys.solve(lambda).ok_or(OptimizerError::NotPositiveDefinite)
}

/// The same step from an explicitly stacked dense Jacobian.
pub fn dense_step(
    problem: &WindowProblem,
    poses: &[Transform],
    lambda: f64,
) -> Result<Vec<Vector6<f64>>, OptimizerError> {
    problem.check_poses(poses)?;
    let var = problem.variable_index();
    let n = 6 * problem.variable_count();
    let lin = problem.linearize(poses)?;
    let rows = 3 * lin.len();
    let mut j = DMatrix::<f64>::zeros(rows, n);
    let mut r = DVector::<f64>::zeros(rows);
    for (b, l) in lin.iter().enumerate() {
        r.fixed_rows_mut::<3>(3 * b).copy_from(&l.residual);
        for (slot, jac) in &l.jacobians {
            if let Some(v) = var[*slot] {
                j.fixed_view_mut::<3, 6>(3 * b, 6 * v).copy_from(jac);
            }
        }
    }
    let h = j.transpose() * &j;
    let g = j.transpose() * &r;
    let max = h.diagonal().max().max(0.0);
    let floor = (max * 1e-9).max(1e-12);
    let mut damped = h.clone();
    for i in 0..n {
        damped[(i, i)] += lambda * h[(i, i)].max(floor);
    }
    let x = damped.lu().solve(&(-g)).ok_or(OptimizerError::NotPositiveDefinite)?;
    Ok((0..n / 6).map(|v| x.fixed_rows::<6>(6 * v).into_owned()).collect())
}

/// Minimum eigenvalue of the undamped reduced normal matrix.
pub fn min_normal_eigenvalue(problem: &WindowProblem, poses: &[Transform]) -> Result<f64, OptimizerError> {
    let n = 6 * problem.variable_count();
    let sys = assemble(problem, &problem.linearize(poses)?);
    let mut h = DMatrix::<f64>::zeros(n, n);
    for (i, d) in sys.diag.iter().enumerate() {
        h.fixed_view_mut::<6, 6>(6 * i, 6 * i).copy_from(d);
    }
    for (i, row) in sys.lower.iter().enumerate() {
        for (&k, m) in row {
            h.fixed_view_mut::<6, 6>(6 * i, 6 * k).copy_from(m);
            h.fixed_view_mut::<6, 6>(6 * k, 6 * i).copy_from(&m.transpose());
        }
    }
    Ok(h.symmetric_eigenvalues().min())
}

fn retract_all(problem: &WindowProblem, poses: &[Transform], step: &[Vector6<f64>]) -> Vec<Transform> {
    let var = problem.variable_index();
    poses
        .iter()
        .zip(&var)
        .map(|(p, v)| match v {
            Some(i) => p.retract(&Twist::from_vector(&step[*i])),
            None => *p,
        })
        .collect()
}

/// Levenberg–Marquardt from the problem's poses.
pub fn solve(problem: &WindowProblem, cfg: &LmConfig) -> Result<(Vec<Transform>, SolveReport), OptimizerError> {
    let mut poses = problem.poses.clone();
    let before = problem.cost_breakdown(&poses)?;
    if !before.total.is_finite() {
        return Err(OptimizerError::NonFiniteCost(before.total));
    }
    let mut current = before;
    let mut history = vec![before];
    let mut lambda = cfg.initial_lambda;
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;
    if problem.variable_count() == 0 {
        termination = Termination::NoVariables;
    }
    while termination == Termination::MaxIterations && iterations < cfg.max_iterations {
        let lin = problem.linearize(&poses)?;
        let sys = assemble(problem, &lin);
        if sys.gradient_norm_inf() < cfg.g_tol {
            termination = Termination::Gradient;
            break;
        }
        loop {
            if lambda > cfg.max_lambda {
                termination = Termination::DampingOverflow;
                break;
            }
            let Some(step) = sys.solve(lambda) else {
                lambda *= cfg.lambda_up;
                continue;
            };
            let trial = retract_all(problem, &poses, &step);
            let cost = problem
                .cost_breakdown(&trial)
                .unwrap_or(CostBreakdown::from_parts([f64::INFINITY; 5]));
            if cost.total.is_finite() && cost.total < current.total {
                let rel = (current.total - cost.total) / current.total;
                poses = trial;
                current = cost;
                history.push(cost);
                iterations += 1;
                lambda *= cfg.lambda_down;
                if rel < cfg.f_tol {
                    termination = Termination::CostTolerance;
                }
                break;
            }
            lambda *= cfg.lambda_up;
        }
    }
    Ok((
        poses,
        SolveReport {
            window: problem.window,
            iterations,
            history,
            before,
            after: current,
            termination,
            final_lambda: lambda,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Lens, PixelPoint};
    use crate::eval::{ground_truth_graph, simulation_input};
    use crate::geometry::{ominus, Frame};
    use crate::odometry::{run, OdometryConfig, VariantConfig};
    use crate::residuals::{huber, Robustifier};
    use crate::simulator::{default_rig, generate, Scenario, Simulation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noiseless_sim(secs: f64) -> Simulation {
        let sc = Scenario {
            duration: secs,
            ..Scenario::preset("standard").unwrap()
        };
        generate(&sc.noiseless()).unwrap()
    }

    fn perturb(problem: &WindowProblem, rng: &mut ChaCha8Rng) -> Vec<Transform> {
        problem
            .poses
            .iter()
            .zip(&problem.fixed)
            .map(|(p, &f)| {
                if f {
                    return *p;
                }
                let dir = |rng: &mut ChaCha8Rng| {
                    Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                        .normalize()
                };
                p.retract(&Twist::new(dir(rng) * 2f64.to_radians(), dir(rng) * 5e-3))
            })
            .collect()
    }

    #[test]
    fn block_counts_match_the_graph() {
        let sim = noiseless_sim(4.0);
        let graph = ground_truth_graph(&sim, 6).unwrap();
        let w = Weights::default();
        let single = build_problem(&graph, (3, 3), &w).unwrap();
        let mut counts = [0usize; 5];
        for b in &single.blocks {
            counts[b.kind().index()] += 1;
        }
        assert_eq!(counts, [1, 1, 1, graph.keyframes[3].observations.len(), 0]);

        let (first, last) = (2, 8);
        let window = build_problem(&graph, (first, last), &w).unwrap();
        let mut counts = [0usize; 5];
        for b in &window.blocks {
            counts[b.kind().index()] += 1;
        }
        let n = last - first + 1;
        let obs: usize = graph.keyframes[first..=last].iter().map(|k| k.observations.len()).sum();
        assert_eq!(counts, [n, n, n, obs, n - 1]);
        // anchors before the window enter as fixed slots
        assert!(window.keyframes.len() > n);
        assert!(window.fixed[0] && !window.fixed[1] && window.fixed[n..].iter().all(|f| *f));
        assert_eq!(window.variable_count(), n - 1);
    }

    #[test]
    fn empty_window_is_an_error() {
        let sim = noiseless_sim(1.0);
        let graph = ground_truth_graph(&sim, 6).unwrap();
        let w = Weights::default();
        assert!(matches!(build_problem(&graph, (3, 2), &w), Err(OptimizerError::EmptyWindow { .. })));
        assert!(matches!(build_problem(&graph, (0, 99), &w), Err(OptimizerError::EmptyWindow { .. })));
    }

    #[test]
    fn ground_truth_is_already_optimal() {
        let sim = noiseless_sim(4.0);
        let graph = ground_truth_graph(&sim, 6).unwrap();
        let problem = build_problem(&graph, (0, 9), &Weights::default()).unwrap();
        let (poses, report) = solve(&problem, &LmConfig::default()).unwrap();
        assert!(report.iterations <= 1);
        assert!(report.after.total < 1e-12);
        for (a, b) in poses.iter().zip(&problem.poses) {
            assert!(ominus(a, b).unwrap().norm() < 1e-9);
        }
    }

    #[test]
    fn perturbed_poses_are_recovered() {
        let sim = noiseless_sim(4.0);
        let graph = ground_truth_graph(&sim, 6).unwrap();
        let mut problem = build_problem(&graph, (0, 9), &Weights::default()).unwrap();
        let truth = problem.poses.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        problem.poses = perturb(&problem, &mut rng);
        let (poses, report) = solve(&problem, &LmConfig::default()).unwrap();
        for (a, b) in poses.iter().zip(&truth) {
            let e = ominus(a, b).unwrap();
            assert!(e.omega.norm() < 1e-6 && e.upsilon.norm() < 1e-7, "{e:?}");
        }
        let totals: Vec<f64> = report.history.iter().map(|c| c.total).collect();
        assert!(totals.windows(2).all(|w| w[1] <= w[0]));
        assert!(report.delta_f().iter().sum::<f64>() < 0.0);
        // quadratic tail
        let n = totals.len();
        assert!(n >= 3);
        assert!(totals[n - 1] / totals[n - 2] < 1e-2 || totals[n - 1] < 1e-20);
    }

    #[test]
    fn sparse_and_dense_steps_agree() {
        let sim = noiseless_sim(4.0);
        let graph = ground_truth_graph(&sim, 6).unwrap();
        let mut problem = build_problem(&graph, (4, 8), &Weights::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        problem.poses = perturb(&problem, &mut rng);
        for lambda in [0.0, 1e-4, 1.0] {
            let s = sparse_step(&problem, &problem.poses, lambda).unwrap();
            let d = dense_step(&problem, &problem.poses, lambda).unwrap();
            let scale = d.iter().map(|v| v.amax()).fold(1.0, f64::max);
            for (a, b) in s.iter().zip(&d) {
                assert!((a - b).amax() < 1e-10 * scale, "lambda {lambda}: {:e}", (a - b).amax());
            }
        }
    }

    #[test]
    fn gauge_fixed_normal_matrix_is_positive_definite() {
        let sim = noiseless_sim(3.0);
        let graph = ground_truth_graph(&sim, 6).unwrap();
        for window in [(0, 3), (2, 6)] {
            let problem = build_problem(&graph, window, &Weights::default()).unwrap();
            assert!(min_normal_eigenvalue(&problem, &problem.poses).unwrap() > 0.0);
        }
    }

    #[test]
    fn cost_bookkeeping() {
        let sim = noiseless_sim(3.0);
        let graph = ground_truth_graph(&sim, 6).unwrap();
        let mut problem = build_problem(&graph, (0, 5), &Weights::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        problem.poses = perturb(&problem, &mut rng);
        let c = cost_breakdown(&problem, &problem.poses).unwrap();
        assert!((c.per_kind.iter().sum::<f64>() - c.total).abs() <= 1e-12 * c.total);
        let lin = problem.linearize(&problem.poses).unwrap();
        let internal: f64 = lin.iter().map(|l| l.cost).sum();
        assert!((internal - c.total).abs() <= 1e-12 * c.total.max(1.0));
        assert_eq!(delta_f(&problem, &problem.poses, &problem.poses).unwrap(), [0.0; 5]);
        let truth = build_problem(&graph, (0, 5), &Weights::default()).unwrap();
        assert!(cost_breakdown(&truth, &truth.poses).unwrap().per_kind.iter().all(|f| *f < 1e-20));
    }

    #[test]
    fn huber_block_cost() {
        let rig = default_rig();
        let pose = Transform::identity().with_frames(Frame::Camera, Frame::World);
        let x = rig.lens_from_camera(Lens::Left).inverse().act(&Vec3::new(0.01, -0.005, 0.1));
        let p = rig.project(Lens::Left, &x).unwrap();
        let block = ResidualBlock::new(
            vec![0, 0],
            Measurement::Reproj {
                landmark: 0,
                point_in_anchor: x,
                pixel: PixelPoint::new(p.u + 3.0, p.v),
                lens: Lens::Left,
            },
            1.0,
            robustifier_for(ResidualKind::Reproj, DEFAULT_HUBER_DELTA, 1.0, 1.0),
        )
        .unwrap();
        assert_eq!(block.robustifier, Robustifier::Huber(1.345));
        let problem = WindowProblem {
            keyframes: vec![0],
            poses: vec![pose],
            fixed: vec![true],
            blocks: vec![block],
            window: (0, 0),
            rig,
            refs: WorldReferences::default(),
        };
        let c = cost_breakdown(&problem, &problem.poses).unwrap();
        let expected = 1.345 * (3.0 - 0.6725);
        assert!((c.get(ResidualKind::Reproj) - expected).abs() < 1e-9);
        assert!((huber(3.0, 1.345) - expected).abs() < 1e-15);
        let (_, report) = solve(&problem, &LmConfig::default()).unwrap();
        assert_eq!(report.termination, Termination::NoVariables);
    }

    #[test]
    fn solves_follow_the_trigger() {
        let sim = noiseless_sim(12.0);
        let opt = OptimizerConfig::default();
        let out = run(
            simulation_input(&sim),
            VariantConfig::V3.with_optimization(true),
            &OdometryConfig::default(),
            &opt,
        )
        .unwrap();
        let n = out.graph.keyframes.len();
        assert!(n >= 20, "{n} keyframes");
        assert_eq!(out.reports.len(), n / 10);
        for (i, r) in out.reports.iter().enumerate() {
            assert_eq!(r.window, (10 * i, 10 * i + 9));
            let totals: Vec<f64> = r.history.iter().map(|c| c.total).collect();
            assert!(totals.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn report_csv_layout() {
        let sim = noiseless_sim(3.0);
        let graph = ground_truth_graph(&sim, 6).unwrap();
        let mut problem = build_problem(&graph, (0, 4), &Weights::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        problem.poses = perturb(&problem, &mut rng);
        let (_, report) = solve(&problem, &LmConfig::default()).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "iteration,total_cost,f_pivot,f_accel,f_mag,f_reproj,f_gyro");
        assert_eq!(lines.len(), report.history.len() + 1);
    }

    #[test]
    fn config_validation() {
        let mut c = OptimizerConfig::default();
        assert!(c.validate().is_ok());
        c.weights.gamma = 1.5;
        assert!(c.validate().is_err());
        let c = OptimizerConfig { trigger: 0, ..OptimizerConfig::default() };
        assert!(c.validate().is_err());
    }
}
