//! Confidence-weighted closed-loop guidance.
//!
//! At every control step the learned model predicts the optimal command
//! `mu*` with standard deviation `sigma*`, the analytical impact-time law
//! gives `a_p`, and the two are blended with a confidence weight `rho`:
//! `a_n = rho * mu* + (1 - rho) * a_p`.

use log::{debug, warn};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use crate::dataset::Dataset;
use crate::dynamics::{
    analytical_command, clip_control, full_rhs, min_terminal_time, min_turn_radius, FullState,
    ItcgParams,
};
use crate::error::{Error, Result};
use crate::gpr::{Prediction, TrainedGpModel};
use crate::ode::rk4_step;

pub const TRACE_HEADER: [&str; 9] = ["t", "r", "lambda", "sigma", "u", "mu_star", "sigma_star", "a_p", "rho"];

/// Smallest `sigma*` handed to the literal confidence formula, which is
/// undefined at zero.
const LITERAL_SIGMA_FLOOR: f64 = 1e-12;

/// A run is declared receding only after it came within this many hit radii.
pub const PASS_RADIUS_FACTOR: f64 = 25.0;

/// `1 - N(a_p; mu*, sigma*)` with the density normalized by
/// `1 / sqrt(2 pi sigma*)`, clamped to `[0, 1]`.
pub fn confidence_literal(a_p: f64, mu_star: f64, sigma_star: f64) -> Result<f64> {
    if !(sigma_star > 0.0) {
        return Err(Error::NonPositiveSigma(sigma_star));
    }
    let density = (-(a_p - mu_star).powi(2) / (2.0 * sigma_star * sigma_star)).exp()
        / (2.0 * PI * sigma_star).sqrt();
    Ok((1.0 - density).clamp(0.0, 1.0))
}

/// `sigma_ref^2 / (sigma_ref^2 + sigma*^2)`: one at zero variance, one half
/// at `sigma* = sigma_ref`, vanishing as the variance grows.
pub fn confidence_variance(sigma_star: f64, sigma_ref: f64) -> f64 {
    1.0 / (1.0 + (sigma_star / sigma_ref).powi(2))
}

pub fn blended_command(rho: f64, mu_star: f64, a_p: f64, u_m: f64) -> f64 {
    clip_control(rho * mu_star + (1.0 - rho) * a_p, u_m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    /// The confidence formula exactly as printed.
    Literal,
    /// Confidence decreasing with the predictive standard deviation.
    Variance,
    /// Learned command only (`rho = 1`).
    PureGpr,
    /// Analytical law only (`rho = 0`).
    PureAnalytical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendConfig {
    pub mode: BlendMode,
    pub sigma_ref: f64,
}

impl BlendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_ref > 0.0) || !self.sigma_ref.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "sigma_ref must be positive, got {}",
                self.sigma_ref
            )));
        }
        Ok(())
    }

    pub fn confidence(&self, a_p: f64, pred: &Prediction) -> Result<f64> {
        Ok(match self.mode {
            BlendMode::Literal => {
                confidence_literal(a_p, pred.mu_star, pred.sigma_star().max(LITERAL_SIGMA_FLOOR))?
            }
            BlendMode::Variance => confidence_variance(pred.sigma_star(), self.sigma_ref),
            BlendMode::PureGpr => 1.0,
            BlendMode::PureAnalytical => 0.0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub initial: FullState,
    pub t_f: f64,
    pub dt: f64,
    pub u_m: f64,
    pub itcg: ItcgParams,
    pub blend: BlendConfig,
    /// Range below which the target counts as hit.
    pub r_hit: f64,
    /// Time past `t_f` after which the run is declared a miss.
    pub timeout: f64,
}

impl SimConfig {
    pub fn new(initial: FullState, t_f: f64, blend: BlendConfig) -> Self {
        Self {
            initial,
            t_f,
            dt: 1e-3,
            u_m: 5.0,
            itcg: ItcgParams::default(),
            blend,
            r_hit: 2e-3,
            timeout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.itcg.validate()?;
        self.blend.validate()?;
        if !(self.dt > 0.0) || !(self.r_hit > 0.0) || !(self.timeout > 0.0) || !(self.u_m > 0.0) {
            return Err(Error::InvalidConfig("dt, r_hit, timeout and u_m must be positive".into()));
        }
        let t_min = min_terminal_time(self.initial.reduced(), min_turn_radius(self.u_m))?;
        if !(self.t_f >= t_min * (1.0 - 1e-9)) {
            return Err(Error::InvalidConfig(format!(
                "t_f = {} is below the minimum flight time {t_min}",
                self.t_f
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t: f64,
    pub r: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub u: f64,
    pub mu_star: f64,
    pub sigma_star: f64,
    pub a_p: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Hit,
    Timeout,
    Receding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub trace: Vec<TracePoint>,
    /// Final range on a hit, closest approach otherwise.
    pub miss_distance: f64,
    /// `|t_hit - t_f|`, with the hit time extrapolated to zero range; for a
    /// miss, the time of closest approach is used.
    pub impact_time_error: f64,
    pub effort: f64,
    pub hit: bool,
    pub termination: Termination,
}

impl SimResult {
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(TRACE_HEADER)?;
        for p in &self.trace {
            out.write_record(
                [p.t, p.r, p.lambda, p.sigma, p.u, p.mu_star, p.sigma_star, p.a_p, p.rho]
                    .iter()
                    .map(f64::to_string),
            )?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_trace(&self, path: &Path) -> Result<()> {
        self.write_trace_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

fn as_vec(s: &FullState) -> Vector3<f64> {
    Vector3::new(s.r, s.lambda, s.sigma)
}

fn as_state(v: &Vector3<f64>) -> FullState {
    FullState::new(v[0], v[1], v[2])
}

/// Closed-loop engagement with the command held constant over each step.
pub fn simulate(model: &TrainedGpModel, cfg: &SimConfig) -> Result<SimResult> {
    cfg.validate()?;
    let mut y = as_vec(&cfg.initial);
    let mut t = 0.0;
    let mut effort = 0.0;
    let mut trace = Vec::with_capacity((cfg.t_f / cfg.dt) as usize + 16);
    let mut closest = (y[0], 0.0);
    let itcg = ItcgParams { u_m: cfg.u_m, ..cfg.itcg };
    loop {
        let state = as_state(&y);
        let reduced = state.reduced();
        let pred = model.predict(&[reduced.r, reduced.sigma, cfg.t_f - t]);
        let a_p = analytical_command(reduced, t, cfg.t_f, &itcg)?;
        let rho = cfg.blend.confidence(a_p, &pred)?;
        let u = blended_command(rho, pred.mu_star, a_p, cfg.u_m);
        trace.push(TracePoint {
            t,
            r: state.r,
            lambda: state.lambda,
            sigma: reduced.sigma,
            u,
            mu_star: pred.mu_star,
            sigma_star: pred.sigma_star(),
            a_p,
            rho,
        });
        let mut f = |v: &Vector3<f64>| full_rhs(as_state(v), u).map(|d| as_vec(&d));
        let next = rk4_step(&mut f, &y, cfg.dt)?;
        effort += 0.5 * u * u * cfg.dt;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalBlowup(next.amax()));
        }
        let (r0, r1) = (y[0], next[0]);
        y = next;
        t += cfg.dt;
        if r1 < closest.0 {
            closest = (r1, t);
        }
        if r1 < cfg.r_hit {
            // Extrapolate the last step's closing rate down to zero range.
            let rate = (r0 - r1) / cfg.dt;
            let t_hit = if rate > 0.0 { t - cfg.dt + r0 / rate } else { t };
            return Ok(finish(trace, y, t, u, cfg, effort, r1, t_hit, Termination::Hit));
        }
        // Only a near pass counts: the range may legitimately grow while the
        // missile turns or spends surplus time.
        if closest.0 < PASS_RADIUS_FACTOR * cfg.r_hit && r1 > closest.0 + 10.0 * cfg.r_hit {
            debug!("receding from closest approach {:.4} at t = {:.3}", closest.0, closest.1);
            return Ok(finish(trace, y, t, u, cfg, effort, closest.0, closest.1, Termination::Receding));
        }
        if t > cfg.t_f + cfg.timeout {
            return Ok(finish(trace, y, t, u, cfg, effort, closest.0, closest.1, Termination::Timeout));
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    mut trace: Vec<TracePoint>,
    y: Vector3<f64>,
    t: f64,
    u: f64,
    cfg: &SimConfig,
    effort: f64,
    miss_distance: f64,
    t_event: f64,
    termination: Termination,
) -> SimResult {
    let last = trace.last().copied();
    trace.push(TracePoint {
        t,
        r: y[0],
        lambda: y[1],
        sigma: crate::dynamics::wrap_angle(y[2]),
        u,
        ..last.expect("at least one step was taken")
    });
    SimResult {
        trace,
        miss_distance,
        impact_time_error: (t_event - cfg.t_f).abs(),
        effort,
        hit: termination == Termination::Hit,
        termination,
    }
}

/// Median predictive standard deviation at the model's own training inputs.
pub fn sigma_ref_from_training(model: &TrainedGpModel) -> f64 {
    let mut s: Vec<f64> = model
        .train_inputs
        .iter()
        .map(|x| model.predict_standardized(x).sigma_star())
        .collect();
    s.sort_by(|a, b| a.total_cmp(b));
    s.get(s.len() / 2).copied().unwrap_or(0.0)
}

/// Quantile `q` of the predictive standard deviation over `probe`, typically
/// held-out samples from inside the training region.
pub fn sigma_ref_from_probe(model: &TrainedGpModel, probe: &Dataset, q: f64) -> Result<f64> {
    if probe.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut s: Vec<f64> = probe.samples.iter().map(|p| model.predict(&p.psi()).sigma_star()).collect();
    s.sort_by(|a, b| a.total_cmp(b));
    let k = ((s.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
    Ok(s[k])
}

/// Reference deviation at which probe quantile `q` of `sigma*` receives
/// confidence `rho_at_q` in variance mode.
pub fn calibrate_sigma_ref(model: &TrainedGpModel, probe: &Dataset, q: f64, rho_at_q: f64) -> Result<f64> {
    if !(rho_at_q > 0.0 && rho_at_q < 1.0) {
        return Err(Error::InvalidConfig(format!("rho_at_q must lie in (0, 1), got {rho_at_q}")));
    }
    let s = sigma_ref_from_probe(model, probe, q)?;
    Ok(s * (rho_at_q / (1.0 - rho_at_q)).sqrt())
}

/// Metrics of one case in a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: usize,
    pub r0: f64,
    pub sigma0: f64,
    pub t_f: f64,
    pub hit: bool,
    pub miss_distance: f64,
    pub impact_time_error: f64,
    pub effort: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub cases: usize,
    pub hits: usize,
    pub failures: usize,
    pub max_miss_distance: f64,
    pub max_impact_time_error: f64,
    pub mean_effort: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub rows: Vec<CaseMetrics>,
    pub summary: BatchSummary,
}

pub const METRICS_HEADER: [&str; 9] =
    ["case", "r0", "sigma0", "t_f", "hit", "miss_distance", "impact_time_error", "effort", "error"];

impl BatchResult {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(METRICS_HEADER)?;
        for r in &self.rows {
            out.write_record([
                r.case.to_string(),
                r.r0.to_string(),
                r.sigma0.to_string(),
                r.t_f.to_string(),
                r.hit.to_string(),
                r.miss_distance.to_string(),
                r.impact_time_error.to_string(),
                r.effort.to_string(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn metrics_of(case: usize, cfg: &SimConfig, res: &Result<SimResult>) -> CaseMetrics {
    let base = CaseMetrics {
        case,
        r0: cfg.initial.r,
        sigma0: cfg.initial.sigma,
        t_f: cfg.t_f,
        hit: false,
        miss_distance: f64::NAN,
        impact_time_error: f64::NAN,
        effort: f64::NAN,
        error: None,
    };
    match res {
        Ok(r) => CaseMetrics {
            hit: r.hit,
            miss_distance: r.miss_distance,
            impact_time_error: r.impact_time_error,
            effort: r.effort,
            ..base
        },
        Err(e) => CaseMetrics { error: Some(e.to_string()), ..base },
    }
}

/// Runs every case, on up to `jobs` threads. Per-case errors are recorded in
/// the table; the full results are returned alongside in case order.
pub fn evaluate_batch(
    model: &TrainedGpModel,
    cases: &[SimConfig],
    jobs: usize,
) -> (BatchResult, Vec<Result<SimResult>>) {
    let jobs = jobs.clamp(1, cases.len().max(1));
    let mut results: Vec<Option<Result<SimResult>>> = (0..cases.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (w, slot) in results.chunks_mut(cases.len().div_ceil(jobs).max(1)).enumerate() {
            let start = w * cases.len().div_ceil(jobs).max(1);
            scope.spawn(move || {
                for (k, s) in slot.iter_mut().enumerate() {
                    *s = Some(simulate(model, &cases[start + k]));
                }
            });
        }
    });
    let results: Vec<Result<SimResult>> =
        results.into_iter().map(|r| r.expect("every case was run")).collect();
    let rows: Vec<CaseMetrics> =
        cases.iter().zip(&results).enumerate().map(|(i, (c, r))| metrics_of(i, c, r)).collect();
    let ok: Vec<&CaseMetrics> = rows.iter().filter(|r| r.error.is_none()).collect();
    let failures = rows.len() - ok.len();
    if failures > 0 {
        warn!("{failures} of {} cases failed", rows.len());
    }
    let summary = BatchSummary {
        cases: rows.len(),
        hits: ok.iter().filter(|r| r.hit).count(),
        failures,
        max_miss_distance: ok.iter().map(|r| r.miss_distance).fold(0.0, f64::max),
        max_impact_time_error: ok.iter().map(|r| r.impact_time_error).fold(0.0, f64::max),
        mean_effort: if ok.is_empty() {
            0.0
        } else {
            ok.iter().map(|r| r.effort).sum::<f64>() / ok.len() as f64
        },
    };
    (BatchResult { rows, summary }, results)
}
