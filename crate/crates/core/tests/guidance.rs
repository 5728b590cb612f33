use optiguide::datagen::{generate_region, GenerationConfig};
use optiguide::dynamics::{min_terminal_time, min_turn_radius, EngagementState, FullState};
use optiguide::gpr::{train, TrainConfig, TrainedGpModel};
use optiguide::guidance_sim::*;
use std::sync::OnceLock;

fn model() -> &'static TrainedGpModel {
    static MODEL: OnceLock<TrainedGpModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let gen = GenerationConfig { dr: 0.2, dsigma: 0.4, dtf: 0.4, store_stride: 10, ..GenerationConfig::full_region() };
        let ds = generate_region(&gen).unwrap().dataset;
        let cfg = TrainConfig { hyper_train_size: 200, train_size: 600, ..TrainConfig::default() };
        train(&ds, &cfg, 7).unwrap().0
    })
}

fn case(r0: f64, sigma0: f64, mult: f64, mode: BlendMode, sigma_ref: f64) -> SimConfig {
    let t_min = min_terminal_time(EngagementState::new(r0, sigma0), min_turn_radius(5.0)).unwrap();
    SimConfig::new(FullState::new(r0, 0.0, sigma0), mult * t_min, BlendConfig { mode, sigma_ref })
}

fn check_invariants(cfg: &SimConfig, res: &SimResult) {
    assert!(res.effort >= 0.0);
    assert!(res.trace.windows(2).all(|w| w[1].t > w[0].t));
    for p in &res.trace {
        assert!(p.u.abs() <= cfg.u_m);
        assert!((0.0..=1.0).contains(&p.rho));
    }
    if res.hit {
        let t_end = res.trace.last().unwrap().t;
        let tail: Vec<f64> = res.trace.iter().filter(|p| p.t >= 0.9 * t_end).map(|p| p.r).collect();
        assert!(tail.windows(2).all(|w| w[1] < w[0]), "range not decreasing near the end");
    }
}

#[test]
fn head_on_analytical_flight_hits_on_time() {
    let cfg = case(1.0, 0.0, 1.0, BlendMode::PureAnalytical, 1.0);
    let res = simulate(model(), &cfg).unwrap();
    check_invariants(&cfg, &res);
    assert!(res.hit);
    assert!(res.impact_time_error < 5e-3, "{}", res.impact_time_error);
    assert!(res.effort < 1e-12);
    assert!(res.trace.iter().all(|p| p.rho == 0.0));
}

#[test]
fn in_distribution_case_hits() {
    let cfg = case(1.0, 0.5, 1.6, BlendMode::Variance, 0.05);
    let res = simulate(model(), &cfg).unwrap();
    check_invariants(&cfg, &res);
    assert!(res.hit && res.termination == Termination::Hit);
    assert!(res.miss_distance <= 1e-2);
    assert!(res.impact_time_error <= 0.01 * cfg.t_f);
}

#[test]
fn variance_mode_limits() {
    let m = model();
    let to_gpr = simulate(m, &case(0.9, 0.8, 1.5, BlendMode::Variance, 1e300)).unwrap();
    let gpr = simulate(m, &case(0.9, 0.8, 1.5, BlendMode::PureGpr, 1.0)).unwrap();
    assert_eq!(to_gpr.trace.iter().map(|p| p.u).collect::<Vec<_>>(), gpr.trace.iter().map(|p| p.u).collect::<Vec<_>>());
    let to_analytical = simulate(m, &case(0.9, 0.8, 1.5, BlendMode::Variance, 1e-300)).unwrap();
    let analytical = simulate(m, &case(0.9, 0.8, 1.5, BlendMode::PureAnalytical, 1.0)).unwrap();
    assert_eq!(
        to_analytical.trace.iter().map(|p| p.u).collect::<Vec<_>>(),
        analytical.trace.iter().map(|p| p.u).collect::<Vec<_>>()
    );
}

#[test]
fn literal_mode_respects_bounds() {
    let cfg = case(1.1, 1.0, 1.4, BlendMode::Literal, 1.0);
    let res = simulate(model(), &cfg).unwrap();
    check_invariants(&cfg, &res);
}

#[test]
fn batch_is_deterministic_and_handles_empty_grids() {
    let m = model();
    let (empty, results) = evaluate_batch(m, &[], 4);
    assert!(empty.rows.is_empty() && results.is_empty());
    assert_eq!(empty.summary.cases, 0);

    let cases = vec![
        case(0.9, 0.3, 1.4, BlendMode::Variance, 0.05),
        case(1.1, 1.2, 1.8, BlendMode::Variance, 0.05),
        SimConfig { t_f: 0.1, ..case(1.0, 0.5, 1.5, BlendMode::Variance, 0.05) },
    ];
    let (a, _) = evaluate_batch(m, &cases, 1);
    let (b, _) = evaluate_batch(m, &cases, 3);
    assert_eq!(a.summary.failures, 1);
    assert!(a.rows[2].error.is_some());
    let (mut x, mut y) = (Vec::new(), Vec::new());
    a.write_csv(&mut x).unwrap();
    b.write_csv(&mut y).unwrap();
    assert_eq!(x, y);
    assert!(String::from_utf8(x).unwrap().starts_with("case,r0,sigma0,t_f,hit,miss_distance,impact_time_error,effort,error\n"));
}

#[test]
fn trace_csv_has_fixed_header() {
    let res = simulate(model(), &case(1.0, 0.0, 1.0, BlendMode::PureAnalytical, 1.0)).unwrap();
    let mut buf = Vec::new();
    res.write_trace_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("t,r,lambda,sigma,u,mu_star,sigma_star,a_p,rho\n"));
    assert_eq!(text.lines().count(), res.trace.len() + 1);
}
