//! Backward generation of optimal trajectories with region control.
//!
//! Each trajectory is produced by integrating the time-reversed Hamiltonian
//! system from the terminal point (the target, with zero heading error) for a
//! prescribed duration. The terminal costate is the free parameter; the state
//! transition matrix of the reversed flow gives the sensitivity of the
//! generated initial state to that costate, which is used both to predict the
//! costate for the next grid node and to correct it with Newton iterations.

use log::{debug, warn};
use nalgebra::{Matrix2, Matrix4, SVector, Vector2, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::dataset::{Dataset, Sample};
use crate::dynamics::{
    clip_control, conserved_hamiltonian, min_terminal_time, min_turn_radius, reduced_rhs,
    Costate, EngagementState,
};
use crate::error::{Error, Result};
use crate::ode::rk4_step;

/// Component magnitude treated as a numerical blow-up.
pub const BLOWUP_LIMIT: f64 = 1e8;
/// Smallest `|det S|` accepted when inverting the sensitivity block.
pub const SINGULAR_DET: f64 = 1e-12;
/// Fraction of the backward horizon, next to the terminal point, integrated
/// with refined steps.
pub const TERMINAL_FRACTION: f64 = 0.01;
/// Refinement factor inside [`TERMINAL_FRACTION`].
pub const TERMINAL_SUBSTEPS: usize = 10;
/// Maximum fraction of grid nodes that may be skipped.
pub const MAX_SKIP_FRACTION: f64 = 0.05;

/// Augmented vector `[r, sigma, p_r, p_sigma]` of the reversed system.
pub type Augmented = Vector4<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub r_min: f64,
    pub r_max: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Lower terminal-time bound as a multiple of the minimum flight time.
    pub t_min: f64,
    pub t_max: f64,
    pub dr: f64,
    pub dsigma: f64,
    pub dtf: f64,
    pub u_m: f64,
    pub dt: f64,
    pub eps_r: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Keep every `store_stride`-th integration step in the dataset.
    pub store_stride: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self::full_region()
    }
}

impl GenerationConfig {
    /// Full region: r in [0.8, 1.2], sigma in [0, pi/2], t_f in [1.2, 2] T.
    pub fn full_region() -> Self {
        Self {
            r_min: 0.8,
            r_max: 1.2,
            sigma_min: 0.0,
            sigma_max: FRAC_PI_2,
            t_min: 1.2,
            t_max: 2.0,
            dr: 0.05,
            dsigma: 0.05,
            dtf: 0.04,
            u_m: 5.0,
            dt: 1e-3,
            eps_r: 1e-3,
            newton_tol: 1e-6,
            newton_max_iter: 30,
            store_stride: 1,
        }
    }

    /// Same region as [`Self::full_region`] on a coarser grid.
    pub fn reduced() -> Self {
        Self {
            dr: 0.1,
            dsigma: 0.2,
            dtf: 0.2,
            ..Self::full_region()
        }
    }

    /// Interior grid shifted by half a step along every axis. Its nodes fall
    /// between the nodes of `self`, so it serves as a held-out set.
    pub fn staggered(&self) -> Self {
        Self {
            r_min: self.r_min + 0.5 * self.dr,
            r_max: self.r_max - 0.5 * self.dr,
            sigma_min: self.sigma_min + 0.5 * self.dsigma,
            t_min: self.t_min + 0.5 * self.dtf,
            t_max: self.t_max - 0.5 * self.dtf,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.r_min < self.r_max) {
            return bad("r_min must be below r_max");
        }
        if !(self.sigma_min < self.sigma_max) {
            return bad("sigma_min must be below sigma_max");
        }
        if !(self.t_min < self.t_max) {
            return bad("t_min must be below t_max");
        }
        if self.t_min < 1.0 {
            return bad("t_min below 1 is shorter than the minimum flight time");
        }
        if !(self.dr > 0.0 && self.dsigma > 0.0 && self.dtf > 0.0 && self.dt > 0.0) {
            return bad("grid and integration steps must be positive");
        }
        if !(self.u_m > 0.0 && self.eps_r > 0.0 && self.newton_tol > 0.0) {
            return bad("u_m, eps_r and newton_tol must be positive");
        }
        if self.r_min <= 0.0 {
            return bad("r_min must be positive");
        }
        if self.newton_max_iter == 0 || self.store_stride == 0 {
            return bad("newton_max_iter and store_stride must be at least 1");
        }
        Ok(())
    }

    fn axis_count(lo: f64, hi: f64, step: f64) -> usize {
        ((hi - lo) / step + 1e-9).floor() as usize + 1
    }

    /// Node counts along (r, sigma, t_f).
    pub fn grid_shape(&self) -> (usize, usize, usize) {
        (
            Self::axis_count(self.r_min, self.r_max, self.dr),
            Self::axis_count(self.sigma_min, self.sigma_max, self.dsigma),
            Self::axis_count(self.t_min, self.t_max, self.dtf),
        )
    }

    pub fn min_time(&self, state: EngagementState) -> Result<f64> {
        min_terminal_time(state, min_turn_radius(self.u_m))
    }
}

/// One target of the region walk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridNode {
    pub index: (usize, usize, usize),
    pub r: f64,
    pub sigma: f64,
    /// Terminal time as a multiple of the minimum flight time.
    pub t_mult: f64,
    /// Terminal time (nondimensional).
    pub t_d: f64,
}

impl GridNode {
    pub fn target(&self) -> Vector2<f64> {
        Vector2::new(self.r, self.sigma)
    }
}

/// Boustrophedon walk over the (r, sigma, t_f) grid: t_f outermost, sigma
/// reversing every slab, r reversing every row.
pub fn serpentine_order(cfg: &GenerationConfig) -> Result<Vec<GridNode>> {
    let (nr, ns, nt) = cfg.grid_shape();
    let mut nodes = Vec::with_capacity(nr * ns * nt);
    let mut row = 0usize;
    for it in 0..nt {
        for js in 0..ns {
            let is = if it % 2 == 0 { js } else { ns - 1 - js };
            for jr in 0..nr {
                let ir = if row.is_multiple_of(2) { jr } else { nr - 1 - jr };
                let r = cfg.r_min + ir as f64 * cfg.dr;
                let sigma = cfg.sigma_min + is as f64 * cfg.dsigma;
                let t_mult = cfg.t_min + it as f64 * cfg.dtf;
                let t_d = t_mult * cfg.min_time(EngagementState::new(r, sigma))?;
                nodes.push(GridNode {
                    index: (ir, is, it),
                    r,
                    sigma,
                    t_mult,
                    t_d,
                });
            }
            row += 1;
        }
    }
    Ok(nodes)
}

/// Right-hand side of the reversed (parameterized) system.
pub fn parameterized_rhs(z: &Augmented, u_m: f64) -> Result<Augmented> {
    let (r, sigma, p_r, p_s) = (z[0], z[1], z[2], z[3]);
    if r <= 0.0 {
        return Err(Error::NonPositiveRadius(r));
    }
    let (s, c) = sigma.sin_cos();
    let u = clip_control(p_s, u_m);
    Ok(Vector4::new(
        c,
        -(u + s / r),
        -p_s * s / (r * r),
        p_r * s + p_s * c / r,
    ))
}

/// Analytic Jacobian of [`parameterized_rhs`]. On the saturation boundary the
/// clipped command is treated as saturated.
pub fn jacobian_fz(z: &Augmented, u_m: f64) -> Result<Matrix4<f64>> {
    let (r, sigma, p_r, p_s) = (z[0], z[1], z[2], z[3]);
    if r <= 0.0 {
        return Err(Error::NonPositiveRadius(r));
    }
    let (s, c) = sigma.sin_cos();
    let r2 = r * r;
    let du = if p_s.abs() < u_m { 1.0 } else { 0.0 };
    #[rustfmt::skip]
    let m = Matrix4::new(
        0.0,                    -s,                      0.0, 0.0,
        s / r2,                 -c / r,                  0.0, -du,
        2.0 * p_s * s / (r2 * r), -p_s * c / r2,         0.0, -s / r2,
        -p_s * c / r2,          p_r * c - p_s * s / r,   s,   c / r,
    );
    Ok(m)
}

/// `dX(t_f) / dP(t_0)`: the state rows and costate columns of the STM.
pub fn sensitivity_block(phi: &Matrix4<f64>) -> Matrix2<f64> {
    phi.fixed_view::<2, 2>(0, 2).into_owned()
}

/// Costate predictor for a move of the generated state by `dx_desired` and of
/// the terminal time by `dt_desired`.
///
/// `xdot_end` is the rate of change of the generated state in forward
/// (engagement) time, i.e. the reduced dynamics evaluated there.
pub fn costate_step(
    p_prev: Costate,
    s: &Matrix2<f64>,
    xdot_end: Vector2<f64>,
    dx_desired: Vector2<f64>,
    dt_desired: f64,
) -> Result<Costate> {
    let det = s.determinant();
    if det.abs() <= SINGULAR_DET {
        return Err(Error::SingularSensitivity(det.abs()));
    }
    let inv = s.try_inverse().ok_or(Error::SingularSensitivity(det.abs()))?;
    let dp = inv * dx_desired + inv * xdot_end * dt_desired;
    Ok(Costate::new(p_prev.p_r + dp[0], p_prev.p_sigma + dp[1]))
}

/// Recorded samples of one backward integration.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    /// Elapsed backward time, i.e. time-to-go of the engagement.
    pub t_go: Vec<f64>,
    pub states: Vec<EngagementState>,
    pub costates: Vec<Costate>,
    pub commands: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t_go.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_go.is_empty()
    }

    fn push(&mut self, t: f64, z: &Augmented, u_m: f64) {
        self.t_go.push(t);
        self.states.push(EngagementState::new(z[0], z[1]));
        self.costates.push(Costate::new(z[2], z[3]));
        self.commands.push(clip_control(z[3], u_m));
    }

    /// Largest deviation of the conserved Hamiltonian from its terminal value.
    pub fn hamiltonian_drift(&self) -> Result<f64> {
        let mut h0 = None;
        let mut drift: f64 = 0.0;
        for ((st, co), &u) in self.states.iter().zip(&self.costates).zip(&self.commands) {
            let h = conserved_hamiltonian(*st, *co, u)?;
            let h0 = *h0.get_or_insert(h);
            drift = drift.max((h - h0).abs());
        }
        Ok(drift)
    }
}

/// Result of one backward integration.
#[derive(Debug, Clone)]
pub struct BackwardRun {
    pub costate0: Costate,
    pub t_d: f64,
    /// Augmented vector at the end of the backward horizon.
    pub z_end: Augmented,
    /// State transition matrix `Phi(t_d, 0)`.
    pub phi: Matrix4<f64>,
    /// Energy cost `integral u^2 / 2` over the trajectory.
    pub effort: f64,
    pub trajectory: Trajectory,
}

impl BackwardRun {
    /// Generated initial state of the engagement.
    pub fn initial_state(&self) -> Vector2<f64> {
        Vector2::new(self.z_end[0], self.z_end[1])
    }

    pub fn sensitivity(&self) -> Matrix2<f64> {
        sensitivity_block(&self.phi)
    }

    /// Forward-time rate of the generated initial state.
    pub fn forward_rate(&self, u_m: f64) -> Result<Vector2<f64>> {
        let st = EngagementState::new(self.z_end[0], self.z_end[1]);
        let d = reduced_rhs(st, clip_control(self.z_end[3], u_m))?;
        Ok(Vector2::new(d.r, d.sigma))
    }

    /// Dataset rows for this trajectory, honouring the storage stride.
    pub fn samples(&self, traj_id: usize, stride: usize) -> Vec<Sample> {
        let tr = &self.trajectory;
        (0..tr.len())
            .step_by(stride.max(1))
            .map(|k| Sample {
                traj_id,
                r: tr.states[k].r,
                sigma: tr.states[k].sigma,
                t_go: tr.t_go[k],
                u: tr.commands[k],
            })
            .collect()
    }
}

type Flow = SVector<f64, 21>;

fn flow_rhs(y: &Flow, u_m: f64) -> Result<Flow> {
    let z = Vector4::new(y[0], y[1], y[2], y[3]);
    let dz = parameterized_rhs(&z, u_m)?;
    let fz = jacobian_fz(&z, u_m)?;
    let phi = Matrix4::from_column_slice(&y.as_slice()[4..20]);
    let dphi = fz * phi;
    let u = clip_control(z[3], u_m);
    let mut out = Flow::zeros();
    out.fixed_rows_mut::<4>(0).copy_from(&dz);
    out.as_mut_slice()[4..20].copy_from_slice(dphi.as_slice());
    out[20] = 0.5 * u * u;
    Ok(out)
}

fn check_blowup(y: &Flow) -> Result<()> {
    let m = y.amax();
    if !m.is_finite() || m > BLOWUP_LIMIT {
        return Err(Error::NumericalBlowup(m));
    }
    Ok(())
}

/// Integrates the reversed system and its STM from the terminal point for
/// duration `t_d`, starting from terminal costate `p0`.
///
/// The step is `t_d / ceil(t_d / dt)`, so the horizon is hit exactly; the
/// first [`TERMINAL_FRACTION`] of the horizon is integrated with
/// [`TERMINAL_SUBSTEPS`] substeps per step. A sample is recorded at every step.
pub fn integrate_backward(p0: Costate, t_d: f64, cfg: &GenerationConfig) -> Result<BackwardRun> {
    propagate(p0, t_d, cfg, true)
}

fn propagate(p0: Costate, t_d: f64, cfg: &GenerationConfig, record: bool) -> Result<BackwardRun> {
    if !(t_d > 0.0) {
        return Err(Error::InvalidConfig(format!("duration must be positive, got {t_d}")));
    }
    if !p0.is_finite() {
        return Err(Error::NumericalBlowup(f64::INFINITY));
    }
    let u_m = cfg.u_m;
    let n = ((t_d / cfg.dt) - 1e-9).ceil().max(1.0) as usize;
    let h = t_d / n as f64;
    let mut y = Flow::zeros();
    y[0] = cfg.eps_r;
    y[2] = p0.p_r;
    y[3] = p0.p_sigma;
    for i in 0..4 {
        y[4 + i * 5] = 1.0;
    }
    let mut f = |y: &Flow| flow_rhs(y, u_m);
    let mut traj = Trajectory::default();
    let z_of = |y: &Flow| Vector4::new(y[0], y[1], y[2], y[3]);
    if record {
        traj.push(0.0, &z_of(&y), u_m);
    }
    let fine_until = TERMINAL_FRACTION * t_d;
    for k in 0..n {
        let t = k as f64 * h;
        if t < fine_until {
            let hs = h / TERMINAL_SUBSTEPS as f64;
            for _ in 0..TERMINAL_SUBSTEPS {
                y = rk4_step(&mut f, &y, hs)?;
            }
        } else {
            y = rk4_step(&mut f, &y, h)?;
        }
        check_blowup(&y)?;
        if record {
            traj.push((k + 1) as f64 * h, &z_of(&y), u_m);
        }
    }
    Ok(BackwardRun {
        costate0: p0,
        t_d,
        z_end: z_of(&y),
        phi: Matrix4::from_column_slice(&y.as_slice()[4..20]),
        effort: y[20],
        trajectory: traj,
    })
}

/// Converged costate for one target.
#[derive(Debug, Clone)]
pub struct Refined {
    pub costate: Costate,
    pub iterations: usize,
    pub residual: f64,
    pub run: BackwardRun,
}

fn residual(target: &Vector2<f64>, run: &BackwardRun) -> f64 {
    (target - run.initial_state()).amax()
}

/// Newton step `S^{-1} e`, falling back to a Levenberg-Marquardt step when the
/// sensitivity is (near) singular, e.g. on the invariant head-on manifold.
fn newton_direction(s: &Matrix2<f64>, e: &Vector2<f64>) -> Vector2<f64> {
    let det = s.determinant();
    let scale = s.norm_squared();
    if det.abs() > SINGULAR_DET && det.abs() > 1e-10 * scale {
        if let Some(inv) = s.try_inverse() {
            return inv * e;
        }
    }
    let mu = 1e-8 * scale.max(1e-300) + 1e-14;
    let a = s.transpose() * s + Matrix2::identity() * mu;
    a.try_inverse().map(|ai| ai * s.transpose() * e).unwrap_or_else(Vector2::zeros)
}

/// Damped Newton corrector on the terminal costate so that the generated
/// initial state matches `target` after a backward horizon `t_d`.
pub fn refine_costate(
    target: Vector2<f64>,
    t_d: f64,
    guess: Costate,
    cfg: &GenerationConfig,
) -> Result<Refined> {
    if !guess.is_finite() {
        return Err(Error::InvalidConfig("costate guess must be finite".into()));
    }
    let mut p = guess;
    let mut run = propagate(p, t_d, cfg, false)?;
    let mut res = residual(&target, &run);
    let mut iterations = 0;
    while res > cfg.newton_tol {
        if iterations == cfg.newton_max_iter {
            return Err(Error::NoConvergence { iterations, residual: res });
        }
        iterations += 1;
        let e = target - run.initial_state();
        let dir = newton_direction(&run.sensitivity(), &e);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let trial = Costate::new(p.p_r + step * dir[0], p.p_sigma + step * dir[1]);
            if let Ok(trial_run) = propagate(trial, t_d, cfg, false) {
                let trial_res = residual(&target, &trial_run);
                if trial_res < res {
                    p = trial;
                    run = trial_run;
                    res = trial_res;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::NoConvergence { iterations, residual: res });
        }
    }
    let run = propagate(p, t_d, cfg, true)?;
    Ok(Refined {
        costate: p,
        iterations,
        residual: res,
        run,
    })
}

/// Per-node outcome recorded in the generation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeRecord {
    pub order: usize,
    pub traj_id: usize,
    pub node: GridNode,
    pub p_r: f64,
    pub p_sigma: f64,
    pub iterations: usize,
    pub residual: f64,
    pub effort: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkippedNode {
    pub order: usize,
    pub node: GridNode,
    pub reason: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NewtonStats {
    pub total_iterations: usize,
    pub max_iterations: usize,
    pub mean_iterations: f64,
    /// `histogram[k]` counts nodes that converged in `k` iterations.
    pub histogram: Vec<usize>,
    pub max_residual: f64,
    /// Nodes that needed continuation sub-steps after a failed direct solve.
    pub continuation_nodes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationReport {
    pub node_count: usize,
    pub converged: usize,
    pub sample_count: usize,
    pub skipped: Vec<SkippedNode>,
    pub newton: NewtonStats,
    pub nodes: Vec<NodeRecord>,
}

#[derive(Debug, Clone)]
pub struct GenerationOutput {
    pub dataset: Dataset,
    pub report: GenerationReport,
}

/// Continuation from a solved node to `node`: the target and horizon are moved
/// in `parts` equal increments, correcting at each one.
fn continuation(
    from: &Refined,
    from_node: &GridNode,
    node: &GridNode,
    parts: usize,
    cfg: &GenerationConfig,
) -> Result<Refined> {
    let mut cur = from.clone();
    let mut cur_x = from_node.target();
    let mut cur_t = from_node.t_d;
    for k in 1..=parts {
        let w = k as f64 / parts as f64;
        let x = from_node.target() * (1.0 - w) + node.target() * w;
        let t = from_node.t_d * (1.0 - w) + node.t_d * w;
        let guess = predict(&cur, cur_x, cur_t, x, t, cfg).unwrap_or(cur.costate);
        cur = refine_costate(x, t, guess, cfg)?;
        cur_x = x;
        cur_t = t;
    }
    Ok(cur)
}

fn predict(
    prev: &Refined,
    prev_x: Vector2<f64>,
    prev_t: f64,
    x: Vector2<f64>,
    t: f64,
    cfg: &GenerationConfig,
) -> Result<Costate> {
    let xdot = prev.run.forward_rate(cfg.u_m)?;
    costate_step(prev.costate, &prev.run.sensitivity(), xdot, x - prev_x, t - prev_t)
}

/// Cold-start costate for the first grid node: on the head-on manifold.
pub const COLD_START: Costate = Costate { p_r: -1.0, p_sigma: 0.0 };

/// Guesses tried in order when no solved node is available. The head-on
/// manifold `sigma = p_sigma = 0` is invariant and its sensitivity is
/// singular, so the later guesses break the mirror symmetry towards
/// positive heading errors (negative `p_sigma`).
pub fn cold_start_guesses(cfg: &GenerationConfig) -> Vec<Costate> {
    let mut out = vec![COLD_START];
    for p_r in [-1.0, 1.0] {
        for k in [1.0, 5.0, 20.0] {
            out.push(Costate::new(p_r, -k * cfg.eps_r));
        }
    }
    out
}

fn cold_start(node: &GridNode, cfg: &GenerationConfig) -> Result<Refined> {
    let mut last = None;
    for guess in cold_start_guesses(cfg) {
        match refine_costate(node.target(), node.t_d, guess, cfg) {
            Ok(r) => return Ok(r),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one guess"))
}

fn solve_node(
    node: &GridNode,
    prev: Option<(&Refined, &GridNode)>,
    cfg: &GenerationConfig,
) -> (Result<Refined>, bool) {
    let Some((prev, prev_node)) = prev else {
        return (cold_start(node, cfg), false);
    };
    let guess = predict(prev, prev_node.target(), prev_node.t_d, node.target(), node.t_d, cfg)
        .unwrap_or(prev.costate);
    let first = refine_costate(node.target(), node.t_d, guess, cfg);
    if first.is_ok() {
        return (first, false);
    }
    let mut last = first;
    for parts in [2usize, 4, 8, 16] {
        last = continuation(prev, prev_node, node, parts, cfg);
        if last.is_ok() {
            return (last, true);
        }
    }
    (last, true)
}

/// Walks the configured grid along the serpentine route, generating one
/// optimal trajectory per node whose initial state lands on the node.
pub fn generate_region(cfg: &GenerationConfig) -> Result<GenerationOutput> {
    cfg.validate()?;
    let nodes = serpentine_order(cfg)?;
    let mut samples = Vec::new();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut stats = NewtonStats::default();
    let mut last: Option<(Refined, GridNode)> = None;
    for (order, node) in nodes.iter().enumerate() {
        let (outcome, used_continuation) =
            solve_node(node, last.as_ref().map(|(r, n)| (r, n)), cfg);
        match outcome {
            Ok(refined) => {
                let traj_id = records.len();
                samples.extend(refined.run.samples(traj_id, cfg.store_stride));
                if stats.histogram.len() <= refined.iterations {
                    stats.histogram.resize(refined.iterations + 1, 0);
                }
                stats.histogram[refined.iterations] += 1;
                stats.total_iterations += refined.iterations;
                stats.max_iterations = stats.max_iterations.max(refined.iterations);
                stats.max_residual = stats.max_residual.max(refined.residual);
                stats.continuation_nodes += used_continuation as usize;
                records.push(NodeRecord {
                    order,
                    traj_id,
                    node: *node,
                    p_r: refined.costate.p_r,
                    p_sigma: refined.costate.p_sigma,
                    iterations: refined.iterations,
                    residual: refined.residual,
                    effort: refined.run.effort,
                });
                debug!(
                    "node {order} (r={:.3}, sigma={:.3}, t={:.3}T) converged in {} iterations",
                    node.r, node.sigma, node.t_mult, refined.iterations
                );
                // Only the costate, STM and end state are needed downstream.
                let mut refined = refined;
                refined.run.trajectory = Trajectory::default();
                last = Some((refined, *node));
            }
            Err(e) => {
                warn!(
                    "skipping node {order} (r={:.3}, sigma={:.3}, t={:.3}T): {e}",
                    node.r, node.sigma, node.t_mult
                );
                skipped.push(SkippedNode {
                    order,
                    node: *node,
                    reason: e.to_string(),
                });
            }
        }
    }
    if !records.is_empty() {
        stats.mean_iterations = stats.total_iterations as f64 / records.len() as f64;
    }
    if skipped.len() as f64 > MAX_SKIP_FRACTION * nodes.len() as f64 {
        return Err(Error::TooManySkipped {
            skipped: skipped.len(),
            total: nodes.len(),
        });
    }
    let report = GenerationReport {
        node_count: nodes.len(),
        converged: records.len(),
        sample_count: samples.len(),
        skipped,
        newton: stats,
        nodes: records,
    };
    Ok(GenerationOutput {
        dataset: Dataset {
            samples,
            provenance: Some(cfg.clone()),
        },
        report,
    })
}

/// Forward replay of a generated trajectory: integrates the reduced dynamics
/// from its initial state using the recorded command sequence, interpolated
/// with local cubics between samples. Returns the state at the end of the
/// horizon.
pub fn forward_replay(traj: &Trajectory, substeps: usize) -> Result<EngagementState> {
    let n = traj.len();
    if n < 4 {
        return Err(Error::EmptyDataset);
    }
    let t_d = traj.t_go[n - 1];
    let command = |t_go: f64| -> f64 {
        // Bracketing interval in the (increasing) t_go grid.
        let k = match traj.t_go.binary_search_by(|v| v.partial_cmp(&t_go).unwrap()) {
            Ok(k) => return traj.commands[k],
            Err(k) => k.clamp(1, n - 1),
        };
        let lo = k.saturating_sub(2).min(n - 4);
        let xs = &traj.t_go[lo..lo + 4];
        let ys = &traj.commands[lo..lo + 4];
        lagrange4(xs, ys, t_go)
    };
    let mut y = Vector2::new(traj.states[n - 1].r, traj.states[n - 1].sigma);
    let f_at = |y: &Vector2<f64>, t: f64| -> Result<Vector2<f64>> {
        let d = reduced_rhs(EngagementState::new(y[0], y[1]), command(t_d - t))?;
        Ok(Vector2::new(d.r, d.sigma))
    };
    let substeps = substeps.max(1);
    let mut t = 0.0;
    for k in (1..n).rev() {
        let h = (traj.t_go[k] - traj.t_go[k - 1]) / substeps as f64;
        for _ in 0..substeps {
            let k1 = f_at(&y, t)?;
            let k2 = f_at(&(y + k1 * (0.5 * h)), t + 0.5 * h)?;
            let k3 = f_at(&(y + k2 * (0.5 * h)), t + 0.5 * h)?;
            let k4 = f_at(&(y + k3 * h), t + h)?;
            y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            t += h;
        }
    }
    Ok(EngagementState::new(y[0], y[1]))
}

fn lagrange4(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..4 {
        let mut w = 1.0;
        for j in 0..4 {
            if i != j {
                w *= (x - xs[j]) / (xs[i] - xs[j]);
            }
        }
        acc += w * ys[i];
    }
    acc
}

/// Achieved initial state of a trajectory generated without region control.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BaselinePoint {
    pub costate: Costate,
    pub t_d: f64,
    pub r: f64,
    pub sigma: f64,
}

/// Plain backward generation: terminal costates drawn uniformly from the box
/// `[p_lo, p_hi]`, horizons drawn from `horizons`. Runs that leave the domain
/// are dropped.
pub fn bgoe_baseline(
    p_lo: Costate,
    p_hi: Costate,
    horizons: &[f64],
    count: usize,
    seed: u64,
    cfg: &GenerationConfig,
) -> Vec<BaselinePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    if horizons.is_empty() {
        return out;
    }
    for _ in 0..count {
        let p = Costate::new(
            rng.gen_range(p_lo.p_r..=p_hi.p_r),
            rng.gen_range(p_lo.p_sigma..=p_hi.p_sigma),
        );
        let t_d = horizons[rng.gen_range(0..horizons.len())];
        if let Ok(run) = propagate(p, t_d, cfg, false) {
            out.push(BaselinePoint {
                costate: p,
                t_d,
                r: run.z_end[0],
                sigma: run.z_end[1],
            });
        }
    }
    out
}
