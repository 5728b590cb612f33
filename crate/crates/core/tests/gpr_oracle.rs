use nalgebra::{DMatrix, DVector};
use optiguide::dataset::Standardizer;
use optiguide::gpr::{
    lml_gradient, log_marginal_likelihood, optimize, FitOptions, GpHyperparams, TrainedGpModel, N_PARAMS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

fn hyper(mean: f64, l: [f64; 3], sf2: f64, sn2: f64) -> GpHyperparams {
    GpHyperparams {
        mean_const: mean,
        log_lengthscales: l.map(f64::ln),
        log_signal_var: sf2.ln(),
        log_noise_var: sn2.ln(),
    }
}

fn random_data(n: usize, seed: u64) -> (Vec<[f64; 3]>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
    let y = x.iter().map(|p| (1.3 * p[0]).sin() + 0.4 * p[1] * p[2] + 0.05 * rng.gen_range(-1.0..1.0)).collect();
    (x, y)
}

/// Squared-exponential covariance written out independently of the library.
fn dense_cov(a: &[f64; 3], b: &[f64; 3], h: &GpHyperparams) -> f64 {
    let l = h.log_lengthscales.map(f64::exp);
    let d2: f64 = (0..3).map(|d| ((a[d] - b[d]) / l[d]).powi(2)).sum();
    h.log_signal_var.exp() * (-0.5 * d2).exp()
}

struct Dense {
    k_inv: DMatrix<f64>,
    log_det: f64,
    resid: DVector<f64>,
}

fn dense(x: &[[f64; 3]], y: &[f64], h: &GpHyperparams) -> Dense {
    let n = x.len();
    let k = DMatrix::from_fn(n, n, |i, j| dense_cov(&x[i], &x[j], h) + if i == j { h.log_noise_var.exp() } else { 0.0 });
    let k_inv = k.clone().try_inverse().expect("invertible Gram matrix");
    let log_det = k.lu().determinant().ln();
    let resid = DVector::from_iterator(n, y.iter().map(|u| u - h.mean_const));
    Dense { k_inv, log_det, resid }
}

fn dense_lml(x: &[[f64; 3]], y: &[f64], h: &GpHyperparams) -> f64 {
    let d = dense(x, y, h);
    let n = x.len() as f64;
    -0.5 * (d.resid.transpose() * &d.k_inv * &d.resid)[(0, 0)] - 0.5 * d.log_det - 0.5 * n * (2.0 * PI).ln()
}

#[test]
fn posterior_and_lml_match_dense_inverse() {
    let (x, y) = random_data(50, 11);
    let h = hyper(0.2, [0.9, 1.4, 0.7], 1.5, 0.02);
    let model = TrainedGpModel::condition(h, Standardizer::identity(), x.clone(), y.clone()).unwrap();
    assert_eq!(model.jitter, 0.0);
    let d = dense(&x, &y, &h);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..40 {
        let q = [rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5)];
        let ks = DVector::from_iterator(x.len(), x.iter().map(|p| dense_cov(p, &q, &h)));
        let mu = h.mean_const + (ks.transpose() * &d.k_inv * &d.resid)[(0, 0)];
        let var = dense_cov(&q, &q, &h) - (ks.transpose() * &d.k_inv * &ks)[(0, 0)];
        let p = model.predict(&q);
        assert!((p.mu_star - mu).abs() < 1e-8, "mean {} vs {}", p.mu_star, mu);
        assert!((p.var_star - var.max(0.0)).abs() < 1e-8, "variance {} vs {}", p.var_star, var);
        assert!(p.var_star <= h.signal_var() + 1e-10);
    }
    let lml = dense_lml(&x, &y, &h);
    assert!((log_marginal_likelihood(&h, &x, &y).unwrap() - lml).abs() < 1e-8);
    assert!((model.log_marginal_likelihood() - lml).abs() < 1e-8);
}

#[test]
fn factorized_and_dense_agree_up_to_200_points() {
    let (x, y) = random_data(200, 12);
    let h = hyper(-0.1, [1.1, 0.8, 1.7], 0.9, 0.05);
    let got = log_marginal_likelihood(&h, &x, &y).unwrap();
    let want = dense_lml(&x, &y, &h);
    assert!((got - want).abs() < 1e-8 * want.abs().max(1.0), "{got} vs {want}");
}

#[test]
fn gradient_matches_central_differences() {
    let (x, y) = random_data(30, 13);
    let h = hyper(0.3, [0.8, 1.2, 1.6], 1.2, 0.03);
    let (_, grad) = lml_gradient(&h, &x, &y).unwrap();
    let base = h.to_array();
    let step = 1e-6;
    for k in 0..N_PARAMS {
        let (mut hi, mut lo) = (base, base);
        hi[k] += step;
        lo[k] -= step;
        let fd = (dense_lml(&x, &y, &GpHyperparams::from_array(&hi)) - dense_lml(&x, &y, &GpHyperparams::from_array(&lo)))
            / (2.0 * step);
        let rel = (grad[k] - fd).abs() / fd.abs().max(1e-3);
        assert!(rel < 1e-5, "parameter {k}: analytic {} vs fd {fd}", grad[k]);
    }
}

#[test]
fn mean_gradient_vanishes_at_gls_mean() {
    let (x, y) = random_data(40, 14);
    let h = hyper(0.0, [1.0, 0.9, 1.3], 1.0, 0.01);
    let d = dense(&x, &y, &h);
    let ones = DVector::from_element(x.len(), 1.0);
    let u = DVector::from_column_slice(&y);
    let gls = (ones.transpose() * &d.k_inv * &u)[(0, 0)] / (ones.transpose() * &d.k_inv * &ones)[(0, 0)];
    let at_gls = GpHyperparams { mean_const: gls, ..h };
    let (_, grad) = lml_gradient(&at_gls, &x, &y).unwrap();
    assert!(grad[0].abs() < 1e-8, "d lml / d mean = {}", grad[0]);
    let (_, off) = lml_gradient(&GpHyperparams { mean_const: gls + 0.5, ..h }, &x, &y).unwrap();
    assert!(off[0] < -1e-3);
}

#[test]
fn single_point_at_mean_has_zero_mean_gradient() {
    let h = hyper(0.7, [1.0; 3], 1.0, 1e-6);
    let (_, grad) = lml_gradient(&h, &[[0.0; 3]], &[0.7]).unwrap();
    assert_eq!(grad[0], 0.0);
}

#[test]
fn recovers_lengthscales_of_prior_samples() {
    let truth = hyper(0.0, [0.6, 1.0, 1.5], 1.0, 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 500;
    let x: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]).collect();
    let k = DMatrix::from_fn(n, n, |i, j| dense_cov(&x[i], &x[j], &truth) + if i == j { truth.noise_var() } else { 0.0 });
    let l = k.cholesky().unwrap().l();
    let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let y: Vec<f64> = (l * z).iter().copied().collect();
    let opts = FitOptions { iters: 200, ..FitOptions::default() };
    let (fitted, trace) = optimize(GpHyperparams::initial(&y), &x, &y, &opts).unwrap();
    assert!(trace.accepted_lml.windows(2).all(|w| w[1] >= w[0]));
    for (got, want) in fitted.lengthscales().iter().zip(truth.lengthscales()) {
        assert!((got / want - 1.0).abs() < 0.3, "lengthscale {got} vs {want}");
    }
}

#[test]
fn adding_a_point_never_raises_variance() {
    let (x, y) = random_data(60, 15);
    let h = hyper(0.0, [0.7, 0.9, 1.1], 1.0, 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let queries: Vec<[f64; 3]> = (0..10).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
    for n in [5, 20, 59] {
        let small = TrainedGpModel::condition(h, Standardizer::identity(), x[..n].to_vec(), y[..n].to_vec()).unwrap();
        let big = TrainedGpModel::condition(h, Standardizer::identity(), x[..n + 1].to_vec(), y[..n + 1].to_vec()).unwrap();
        for q in &queries {
            assert!(big.predict(q).var_star <= small.predict(q).var_star + 1e-12);
        }
    }
}

#[test]
fn prediction_is_bitwise_deterministic() {
    let (x, y) = random_data(50, 16);
    let h = hyper(0.0, [1.0; 3], 1.0, 1e-3);
    let a = TrainedGpModel::condition(h, Standardizer::identity(), x.clone(), y.clone()).unwrap();
    let b = TrainedGpModel::from_json(&a.to_json().unwrap()).unwrap();
    for q in &x {
        assert_eq!(a.predict(q), a.predict(q));
        assert_eq!(a.predict(q), b.predict(q));
    }
}
