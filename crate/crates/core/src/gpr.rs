//! Exact Gaussian-process regression of the optimal command.
//!
//! Squared-exponential kernel with one lengthscale per input dimension and a
//! constant mean. Inputs are standardized by the model itself, so callers
//! pass raw `(r, sigma, t_go)`.

use log::{debug, info, warn};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

use crate::dataset::{Dataset, Standardizer};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
/// Number of hyperparameters: mean, three log-lengthscales, log signal and
/// log noise variance.
pub const N_PARAMS: usize = 6;

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;
const LOG_LENGTHSCALE_BOUNDS: (f64, f64) = (-9.0, 9.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    pub mean_const: f64,
    pub log_lengthscales: [f64; 3],
    pub log_signal_var: f64,
    pub log_noise_var: f64,
}

impl GpHyperparams {
    /// Unit lengthscales, signal variance from the targets, small noise.
    pub fn initial(targets: &[f64]) -> Self {
        let n = targets.len().max(1) as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = (targets.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / n).max(1e-12);
        Self {
            mean_const: mean,
            log_lengthscales: [0.0; 3],
            log_signal_var: var.ln(),
            log_noise_var: (1e-4 * var).ln(),
        }
    }

    pub fn signal_var(&self) -> f64 {
        self.log_signal_var.exp()
    }

    pub fn noise_var(&self) -> f64 {
        self.log_noise_var.exp()
    }

    pub fn lengthscales(&self) -> [f64; 3] {
        self.log_lengthscales.map(f64::exp)
    }

    pub fn to_array(&self) -> [f64; N_PARAMS] {
        let l = self.log_lengthscales;
        [self.mean_const, l[0], l[1], l[2], self.log_signal_var, self.log_noise_var]
    }

    pub fn from_array(p: &[f64; N_PARAMS]) -> Self {
        Self {
            mean_const: p[0],
            log_lengthscales: [p[1], p[2], p[3]],
            log_signal_var: p[4],
            log_noise_var: p[5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("non-finite hyperparameters {self:?}")))
        }
    }
}

pub fn kernel(a: &[f64; 3], b: &[f64; 3], hyper: &GpHyperparams) -> f64 {
    let l = hyper.lengthscales();
    let q: f64 = (0..3).map(|d| ((a[d] - b[d]) / l[d]).powi(2)).sum();
    hyper.signal_var() * (-0.5 * q).exp()
}

/// Noise-free Gram matrix.
pub fn gram(inputs: &[[f64; 3]], hyper: &GpHyperparams) -> DMatrix<f64> {
    let n = inputs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hyper.signal_var();
        for j in 0..i {
            let v = kernel(&inputs[i], &inputs[j], hyper);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky factor of `K + noise I`, escalating diagonal jitter on failure.
/// Returns the factor and the jitter that was added.
pub fn factorize(inputs: &[[f64; 3]], hyper: &GpHyperparams) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut k = gram(inputs, hyper);
    for i in 0..inputs.len() {
        k[(i, i)] += hyper.noise_var();
    }
    let sf2 = hyper.signal_var();
    let mut jitter = 0.0;
    loop {
        let mut kj = k.clone();
        for i in 0..inputs.len() {
            kj[(i, i)] += jitter;
        }
        if let Some(chol) = kj.cholesky() {
            if jitter > 0.0 {
                debug!("Gram matrix needed jitter {jitter:e}");
            }
            return Ok((chol, jitter));
        }
        jitter = if jitter == 0.0 { JITTER_START * sf2 } else { jitter * 10.0 };
        if jitter > JITTER_MAX * sf2 * (1.0 + 1e-9) {
            return Err(Error::NotPositiveDefinite);
        }
    }
}

fn check_data(inputs: &[[f64; 3]], targets: &[f64]) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if inputs.len() != targets.len() {
        return Err(Error::InvalidConfig("inputs and targets differ in length".into()));
    }
    Ok(())
}

fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Log marginal likelihood for standardized `inputs`.
pub fn log_marginal_likelihood(hyper: &GpHyperparams, inputs: &[[f64; 3]], targets: &[f64]) -> Result<f64> {
    check_data(inputs, targets)?;
    let (chol, _) = factorize(inputs, hyper)?;
    let resid = DVector::from_iterator(targets.len(), targets.iter().map(|u| u - hyper.mean_const));
    let alpha = chol.solve(&resid);
    let n = targets.len() as f64;
    Ok(-0.5 * resid.dot(&alpha) - 0.5 * log_det(&chol) - 0.5 * n * (2.0 * PI).ln())
}

/// Log marginal likelihood and its gradient with respect to
/// [`GpHyperparams::to_array`].
pub fn lml_gradient(
    hyper: &GpHyperparams,
    inputs: &[[f64; 3]],
    targets: &[f64],
) -> Result<(f64, [f64; N_PARAMS])> {
    check_data(inputs, targets)?;
    let n = inputs.len();
    let (chol, _) = factorize(inputs, hyper)?;
    let resid = DVector::from_iterator(n, targets.iter().map(|u| u - hyper.mean_const));
    let alpha = chol.solve(&resid);
    let lml = -0.5 * resid.dot(&alpha) - 0.5 * log_det(&chol) - 0.5 * n as f64 * (2.0 * PI).ln();
    let k_inv = chol.inverse();
    let l = hyper.lengthscales();
    let mut grad = [0.0; N_PARAMS];
    grad[0] = alpha.sum();
    // dL/dtheta = 1/2 tr((alpha alpha^T - K^-1) dK/dtheta); W is symmetric so
    // the lower triangle is visited once and off-diagonal terms doubled.
    let mut g_len = [0.0; 3];
    let mut g_sig = 0.0;
    let mut trace_w = 0.0;
    for i in 0..n {
        let w_ii = alpha[i] * alpha[i] - k_inv[(i, i)];
        trace_w += w_ii;
        g_sig += w_ii * hyper.signal_var();
        for j in 0..i {
            let w = 2.0 * (alpha[i] * alpha[j] - k_inv[(i, j)]);
            let (a, b) = (&inputs[i], &inputs[j]);
            let s = [
                ((a[0] - b[0]) / l[0]).powi(2),
                ((a[1] - b[1]) / l[1]).powi(2),
                ((a[2] - b[2]) / l[2]).powi(2),
            ];
            let kf = hyper.signal_var() * (-0.5 * (s[0] + s[1] + s[2])).exp();
            let wk = w * kf;
            g_sig += wk;
            for d in 0..3 {
                g_len[d] += wk * s[d];
            }
        }
    }
    grad[1] = 0.5 * g_len[0];
    grad[2] = 0.5 * g_len[1];
    grad[3] = 0.5 * g_len[2];
    grad[4] = 0.5 * g_sig;
    grad[5] = 0.5 * trace_w * hyper.noise_var();
    Ok((lml, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub iters: usize,
    /// Initial step of every log-domain parameter.
    pub initial_step: f64,
    pub grad_tol: f64,
    /// Lower bound on the noise variance relative to the signal variance.
    pub min_noise_ratio: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { iters: 100, initial_step: 0.1, grad_tol: 1e-6, min_noise_ratio: 1e-8 }
    }
}

/// Trace of an optimization run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    /// LML after every accepted step, starting with the initial point.
    pub accepted_lml: Vec<f64>,
    pub rejected: usize,
    pub final_grad_norm: f64,
}

fn project(p: &mut [f64; N_PARAMS], min_noise_ratio: f64) {
    for v in &mut p[1..4] {
        *v = v.clamp(LOG_LENGTHSCALE_BOUNDS.0, LOG_LENGTHSCALE_BOUNDS.1);
    }
    let floor = p[4] + min_noise_ratio.ln();
    if p[5] < floor {
        p[5] = floor;
    }
}

/// Gradient ascent on the log marginal likelihood with per-parameter step
/// sizes: a step grows by 1.2 while its gradient keeps its sign and halves
/// when the sign flips. A move that lowers the likelihood (or breaks the
/// factorization) is rejected and all steps are halved, so the accepted
/// likelihood sequence never decreases.
pub fn optimize(
    init: GpHyperparams,
    inputs: &[[f64; 3]],
    targets: &[f64],
    opts: &FitOptions,
) -> Result<(GpHyperparams, FitTrace)> {
    init.validate()?;
    let mut p = init.to_array();
    project(&mut p, opts.min_noise_ratio);
    let (mut lml, mut grad) = lml_gradient(&GpHyperparams::from_array(&p), inputs, targets)?;
    let mut trace = FitTrace { accepted_lml: vec![lml], ..Default::default() };
    // The mean moves in units of the signal standard deviation.
    let mean_unit = (0.5 * p[4]).exp();
    let mut steps = [opts.initial_step; N_PARAMS];
    steps[0] *= mean_unit;
    let mut prev_sign = [0.0; N_PARAMS];
    for _ in 0..opts.iters {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        trace.final_grad_norm = norm;
        if norm < opts.grad_tol || steps.iter().all(|s| *s < 1e-10) {
            break;
        }
        let mut cand = p;
        let mut sign = [0.0; N_PARAMS];
        for i in 0..N_PARAMS {
            let s = grad[i].signum() * f64::from(grad[i] != 0.0);
            if s * prev_sign[i] > 0.0 {
                steps[i] *= 1.2;
            } else if s * prev_sign[i] < 0.0 {
                steps[i] *= 0.5;
            }
            sign[i] = s;
            cand[i] += s * steps[i];
        }
        project(&mut cand, opts.min_noise_ratio);
        match lml_gradient(&GpHyperparams::from_array(&cand), inputs, targets) {
            Ok((l, g)) if l >= lml => {
                p = cand;
                lml = l;
                grad = g;
                prev_sign = sign;
                trace.accepted_lml.push(l);
            }
            Ok(_) | Err(Error::NotPositiveDefinite) => {
                trace.rejected += 1;
                steps.iter_mut().for_each(|s| *s *= 0.5);
                prev_sign = [0.0; N_PARAMS];
            }
            Err(e) => return Err(e),
        }
    }
    debug!(
        "optimize: {} accepted, {} rejected, LML {lml:.4}, |g| {:.3e}",
        trace.accepted_lml.len() - 1,
        trace.rejected,
        trace.final_grad_norm
    );
    Ok((GpHyperparams::from_array(&p), trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mu_star: f64,
    /// Latent (noise-free) posterior variance.
    pub var_star: f64,
}

impl Prediction {
    pub fn sigma_star(&self) -> f64 {
        self.var_star.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    hyper: GpHyperparams,
    standardizer: Standardizer,
    train_inputs: Vec<[f64; 3]>,
    train_targets: Vec<f64>,
    #[serde(default)]
    provenance: Option<Provenance>,
}

/// Conditioned model: hyperparameters, training data and cached solves.
#[derive(Debug, Clone)]
pub struct TrainedGpModel {
    pub hyper: GpHyperparams,
    pub standardizer: Standardizer,
    /// Standardized training inputs.
    pub train_inputs: Vec<[f64; 3]>,
    pub train_targets: Vec<f64>,
    pub provenance: Option<Provenance>,
    pub jitter: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

impl TrainedGpModel {
    /// Conditions on `train_inputs` (already standardized by `standardizer`).
    pub fn condition(
        hyper: GpHyperparams,
        standardizer: Standardizer,
        train_inputs: Vec<[f64; 3]>,
        train_targets: Vec<f64>,
    ) -> Result<Self> {
        hyper.validate()?;
        check_data(&train_inputs, &train_targets)?;
        let (chol, jitter) = factorize(&train_inputs, &hyper)?;
        let resid = DVector::from_iterator(
            train_targets.len(),
            train_targets.iter().map(|u| u - hyper.mean_const),
        );
        let alpha = chol.solve(&resid);
        Ok(Self { hyper, standardizer, train_inputs, train_targets, provenance: None, jitter, chol, alpha })
    }

    pub fn len(&self) -> usize {
        self.train_targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_targets.is_empty()
    }

    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Prediction at a raw (unstandardized) input.
    pub fn predict(&self, psi: &[f64; 3]) -> Prediction {
        self.predict_standardized(&self.standardizer.apply(psi))
    }

    pub fn predict_standardized(&self, x: &[f64; 3]) -> Prediction {
        let n = self.len();
        let k_star = DVector::from_iterator(n, self.train_inputs.iter().map(|t| kernel(t, x, &self.hyper)));
        let mu_star = self.hyper.mean_const + k_star.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&k_star)
            .expect("Cholesky factor has a positive diagonal");
        let var_star = (self.hyper.signal_var() - v.norm_squared()).max(0.0);
        Prediction { mu_star, var_star }
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let resid = DVector::from_iterator(
            self.len(),
            self.train_targets.iter().map(|u| u - self.hyper.mean_const),
        );
        let n = self.len() as f64;
        -0.5 * resid.dot(&self.alpha) - 0.5 * log_det(&self.chol) - 0.5 * n * (2.0 * PI).ln()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            schema_version: SCHEMA_VERSION,
            hyper: self.hyper,
            standardizer: self.standardizer,
            train_inputs: self.train_inputs.clone(),
            train_targets: self.train_targets.clone(),
            provenance: self.provenance.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported model schema_version {} (expected {SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        let mut model =
            Self::condition(file.hyper, file.standardizer, file.train_inputs, file.train_targets)?;
        model.provenance = file.provenance;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Fits hyperparameters on `inputs` and conditions on the same data.
pub fn fit(
    inputs: &[[f64; 3]],
    targets: &[f64],
    init: Option<GpHyperparams>,
    opts: &FitOptions,
    max_train_size: usize,
) -> Result<(TrainedGpModel, FitTrace)> {
    check_data(inputs, targets)?;
    if inputs.len() > max_train_size {
        return Err(Error::DataTooLarge { n: inputs.len(), max: max_train_size });
    }
    let standardizer = Standardizer::fit(inputs);
    let x = standardizer.apply_all(inputs);
    let init = init.unwrap_or_else(|| GpHyperparams::initial(targets));
    let (hyper, trace) = optimize(init, &x, targets, opts)?;
    let model = TrainedGpModel::condition(hyper, standardizer, x, targets.to_vec())?;
    Ok((model, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Samples used for hyperparameter optimization.
    pub hyper_train_size: usize,
    /// Samples the final model is conditioned on.
    pub train_size: usize,
    pub max_train_size: usize,
    /// Draw uniform random subsets when the data exceed the sizes above.
    pub subsample: bool,
    /// Always condition on the largest-`t_go` sample of every trajectory.
    /// These lie on the outer boundary of the sampled region, where a
    /// uniform draw is sparsest.
    pub anchor_starts: bool,
    pub fit: FitOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hyper_train_size: 600,
            train_size: 2000,
            max_train_size: 4000,
            subsample: true,
            anchor_starts: true,
            fit: FitOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hyper_train_size == 0 || self.train_size == 0 {
            return Err(Error::InvalidConfig("training sizes must be positive".into()));
        }
        if self.train_size > self.max_train_size {
            return Err(Error::InvalidConfig("train_size exceeds max_train_size".into()));
        }
        Ok(())
    }
}

/// Sorted uniform random subset of `0..n` of size `min(n, k)`.
pub fn subsample_indices(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut idx = sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Index of the largest-`t_go` sample of each trajectory, in order of
/// first appearance.
pub fn trajectory_starts(dataset: &Dataset) -> Vec<usize> {
    let mut best: std::collections::BTreeMap<usize, usize> = Default::default();
    for (i, s) in dataset.samples.iter().enumerate() {
        let e = best.entry(s.traj_id).or_insert(i);
        if s.t_go > dataset.samples[*e].t_go {
            *e = i;
        }
    }
    let mut out: Vec<usize> = best.into_values().collect();
    out.sort_unstable();
    out
}

/// Sorted subset of size `min(n, k)`: the anchors first (randomly thinned if
/// they alone exceed `k`), then a uniform draw from the rest.
pub fn select_training_indices(n: usize, k: usize, anchors: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    if anchors.len() >= k {
        let mut idx: Vec<usize> = subsample_indices(anchors.len(), k, rng).into_iter().map(|j| anchors[j]).collect();
        idx.sort_unstable();
        return idx;
    }
    let mut taken = vec![false; n];
    anchors.iter().for_each(|&i| taken[i] = true);
    let rest: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
    let mut idx: Vec<usize> = anchors.to_vec();
    idx.extend(subsample_indices(rest.len(), k - anchors.len(), rng).into_iter().map(|j| rest[j]));
    idx.sort_unstable();
    idx
}

/// Trains on a dataset: hyperparameters on a small random subset, then the
/// final conditioning on a larger one drawn from the same stream.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<(TrainedGpModel, FitTrace)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = dataset.len();
    if n > cfg.max_train_size && !cfg.subsample {
        return Err(Error::DataTooLarge { n, max: cfg.max_train_size });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = dataset.inputs();
    let targets = dataset.targets();
    let anchors = if cfg.anchor_starts { trajectory_starts(dataset) } else { Vec::new() };
    let final_idx = select_training_indices(n, cfg.train_size.min(cfg.max_train_size), &anchors, &mut rng);
    let hyper_idx = subsample_indices(final_idx.len(), cfg.hyper_train_size, &mut rng);
    let pick = |idx: &[usize]| -> (Vec<[f64; 3]>, Vec<f64>) {
        (idx.iter().map(|&i| inputs[i]).collect(), idx.iter().map(|&i| targets[i]).collect())
    };
    let (fx, fy) = pick(&final_idx);
    let (hx, hy) = pick(&hyper_idx.iter().map(|&k| final_idx[k]).collect::<Vec<_>>());
    let standardizer = Standardizer::fit(&fx);
    let hx = standardizer.apply_all(&hx);
    let (hyper, trace) = optimize(GpHyperparams::initial(&hy), &hx, &hy, &cfg.fit)?;
    info!(
        "trained: lengthscales {:?}, signal var {:.3e}, noise var {:.3e}, {} points",
        hyper.lengthscales(),
        hyper.signal_var(),
        hyper.noise_var(),
        fx.len()
    );
    let model = TrainedGpModel::condition(hyper, standardizer, standardizer.apply_all(&fx), fy)?;
    if model.jitter > 0.0 {
        warn!("final Gram matrix needed jitter {:e}", model.jitter);
    }
    Ok((model, trace))
}

/// Mean and maximum squared error of the posterior mean over a dataset.
pub fn squared_errors(model: &TrainedGpModel, data: &Dataset) -> (f64, f64) {
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for s in &data.samples {
        let e = (model.predict(&s.psi()).mu_star - s.u).powi(2);
        sum += e;
        max = max.max(e);
    }
    (sum / data.len().max(1) as f64, max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn hyper(mean: f64, l: [f64; 3], sf2: f64, sn2: f64) -> GpHyperparams {
        GpHyperparams {
            mean_const: mean,
            log_lengthscales: l.map(f64::ln),
            log_signal_var: sf2.ln(),
            log_noise_var: sn2.ln(),
        }
    }

    #[test]
    fn kernel_basics() {
        let h = hyper(0.0, [0.5, 1.0, 2.0], 3.0, 1e-3);
        let a = [0.1, -0.4, 1.2];
        let b = [0.7, 0.2, -0.3];
        assert_eq!(kernel(&a, &a, &h), h.signal_var());
        assert_relative_eq!(h.signal_var(), 3.0, max_relative = 1e-15);
        assert_eq!(kernel(&a, &b, &h), kernel(&b, &a, &h));
        let mut prev = f64::INFINITY;
        for k in 0..20 {
            let far = [a[0] + k as f64, a[1], a[2]];
            let v = kernel(&a, &far, &h);
            assert!(v <= prev);
            prev = v;
        }
        assert!(prev < 1e-100);
    }

    #[test]
    fn scalar_lml() {
        // K = sf2 + sn2 = 1 with a tiny noise share.
        let h = hyper(0.0, [1.0; 3], 1.0 - 1e-15, 1e-15);
        let x = [[0.0; 3]];
        let l0 = log_marginal_likelihood(&h, &x, &[0.0]).unwrap();
        assert_relative_eq!(l0, -0.5 * (2.0 * PI).ln(), epsilon = 1e-12);
        let l2 = log_marginal_likelihood(&h, &x, &[2.0]).unwrap();
        assert_relative_eq!(l2, -2.0 - 0.5 * (2.0 * PI).ln(), epsilon = 1e-12);
        let (_, g) = lml_gradient(&hyper(3.0, [1.0; 3], 1.0, 0.1), &x, &[3.0]).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn jitter_rescues_duplicates() {
        let h = hyper(0.0, [1.0; 3], 1.0, 1e-300);
        let x = vec![[0.3, 0.2, 0.1]; 4];
        let (_, jitter) = factorize(&x, &h).unwrap();
        assert!(jitter > 0.0 && jitter <= 1e-4);
    }

    #[test]
    fn prior_reversion_and_interpolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<[f64; 3]> = (0..30).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let y: Vec<f64> = x.iter().map(|p| (3.0 * p[0]).sin() + p[1] * p[2]).collect();
        let h = hyper(0.25, [0.7, 0.9, 1.1], 1.5, 1e-12);
        let m = TrainedGpModel::condition(h, Standardizer::identity(), x.clone(), y.clone()).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            let p = m.predict(xi);
            assert!((p.mu_star - yi).abs() < 1e-5);
            assert!(p.var_star < 1e-6);
        }
        let far = m.predict(&[50.0, 50.0, 50.0]);
        assert_relative_eq!(far.mu_star, 0.25, epsilon = 1e-12);
        assert_relative_eq!(far.var_star, 1.5, epsilon = 1e-12);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw: Vec<[f64; 3]> = (0..40).map(|_| [rng.gen(), rng.gen::<f64>() * 2.0, rng.gen()]).collect();
        let y: Vec<f64> = raw.iter().map(|p| p[0] - p[1] * p[2]).collect();
        let st = Standardizer::fit(&raw);
        let h = hyper(0.1, [0.8, 1.3, 0.6], 0.9, 1e-6);
        let mut m = TrainedGpModel::condition(h, st, st.apply_all(&raw), y).unwrap();
        m.provenance = Some(Provenance { config_hash: "abc".into(), seed: 9 });
        let back = TrainedGpModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.provenance, m.provenance);
        for q in [[0.3, 0.4, 0.5], [2.0, -1.0, 0.0]] {
            assert_eq!(back.predict(&q), m.predict(&q));
        }
        let bad = m.to_json().unwrap().replace("\"schema_version\": 1", "\"schema_version\": 99");
        assert!(TrainedGpModel::from_json(&bad).is_err());
    }

    #[test]
    fn optimizer_is_monotone_and_respects_size_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<[f64; 3]> = (0..60).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let y: Vec<f64> = x.iter().map(|p| (2.0 * p[0]).cos() + 0.3 * p[2]).collect();
        let (m, trace) = fit(&x, &y, None, &FitOptions { iters: 60, ..Default::default() }, 100).unwrap();
        assert!(trace.accepted_lml.windows(2).all(|w| w[1] >= w[0]));
        assert!(trace.accepted_lml.last().unwrap() > &trace.accepted_lml[0]);
        assert_relative_eq!(m.log_marginal_likelihood(), *trace.accepted_lml.last().unwrap(), max_relative = 1e-9);
        assert!(matches!(
            fit(&x, &y, None, &FitOptions::default(), 10),
            Err(Error::DataTooLarge { n: 60, max: 10 })
        ));
    }

    #[test]
    fn anchored_selection() {
        let samples = (0..30)
            .map(|i| crate::dataset::Sample { traj_id: i / 10, r: 1.0, sigma: 0.0, t_go: (i % 10) as f64, u: 0.0 })
            .collect();
        let ds = Dataset::new(samples);
        let starts = trajectory_starts(&ds);
        assert_eq!(starts, vec![9, 19, 29]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let idx = select_training_indices(30, 8, &starts, &mut rng);
        assert_eq!(idx.len(), 8);
        assert!(starts.iter().all(|s| idx.contains(s)));
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(select_training_indices(30, 2, &starts, &mut rng).len(), 2);
        assert_eq!(select_training_indices(30, 40, &starts, &mut rng), (0..30).collect::<Vec<_>>());
    }
}
