//! Planar engagement model in nondimensional form.
//!
//! Distances are measured in units of the initial range `r0`, time in units of
//! `r0 / v` and lateral acceleration in units of `v^2 / r0`, so the missile
//! flies at unit speed. The reduced state `(r, sigma)` drops the line-of-sight
//! angle, which only matters when reconstructing Cartesian trajectories.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Floor applied to `|sin sigma|` in the analytical law's time-error term.
pub const SIN_SIGMA_FLOOR: f64 = 1e-3;

/// Reduced engagement state: range and heading error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngagementState {
    pub r: f64,
    pub sigma: f64,
}

impl EngagementState {
    pub fn new(r: f64, sigma: f64) -> Self {
        Self { r, sigma }
    }

    fn check_radius(&self) -> Result<()> {
        if self.r > 0.0 {
            Ok(())
        } else {
            Err(Error::NonPositiveRadius(self.r))
        }
    }
}

/// Full planar state including the line-of-sight angle.
///
/// The flight path angle is recovered as `theta = sigma + lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FullState {
    pub r: f64,
    pub lambda: f64,
    pub sigma: f64,
}

impl FullState {
    pub fn new(r: f64, lambda: f64, sigma: f64) -> Self {
        Self { r, lambda, sigma }
    }

    pub fn reduced(&self) -> EngagementState {
        EngagementState::new(self.r, wrap_angle(self.sigma))
    }

    pub fn flight_path_angle(&self) -> f64 {
        self.sigma + self.lambda
    }

    /// Missile position with the target at the origin.
    ///
    /// `lambda` is the bearing of the target as seen from the missile, so the
    /// missile sits at `-r (cos lambda, sin lambda)`.
    pub fn position(&self) -> (f64, f64) {
        (-self.r * self.lambda.cos(), -self.r * self.lambda.sin())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Costate {
    pub p_r: f64,
    pub p_sigma: f64,
}

impl Costate {
    pub fn new(p_r: f64, p_sigma: f64) -> Self {
        Self { p_r, p_sigma }
    }

    pub fn is_finite(&self) -> bool {
        self.p_r.is_finite() && self.p_sigma.is_finite()
    }
}

impl std::ops::Neg for Costate {
    type Output = Costate;

    fn neg(self) -> Costate {
        Costate::new(-self.p_r, -self.p_sigma)
    }
}

/// Reference scales for converting between physical and nondimensional units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scales {
    /// Initial range in metres.
    pub r0: f64,
    /// Missile speed in m/s.
    pub v: f64,
}

impl Scales {
    pub fn new(r0: f64, v: f64) -> Result<Self> {
        if !(r0 > 0.0 && v > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "scales need r0 > 0 and v > 0 (got r0 = {r0}, v = {v})"
            )));
        }
        Ok(Self { r0, v })
    }

    pub fn length(&self) -> f64 {
        self.r0
    }

    pub fn time(&self) -> f64 {
        self.r0 / self.v
    }

    /// Held constant at `v^2 / r0` for the whole engagement.
    pub fn acceleration(&self) -> f64 {
        self.v * self.v / self.r0
    }

    pub fn nondimensionalize(&self, state: &PhysicalState) -> FullState {
        FullState::new(state.r / self.length(), state.lambda, state.sigma)
    }

    pub fn redimensionalize(&self, state: &FullState) -> PhysicalState {
        PhysicalState {
            r: state.r * self.length(),
            lambda: state.lambda,
            sigma: state.sigma,
        }
    }

    pub fn time_to_nondim(&self, t: f64) -> f64 {
        t / self.time()
    }

    pub fn time_to_physical(&self, t: f64) -> f64 {
        t * self.time()
    }

    pub fn accel_to_nondim(&self, a: f64) -> f64 {
        a / self.acceleration()
    }

    pub fn accel_to_physical(&self, u: f64) -> f64 {
        u * self.acceleration()
    }
}

/// Engagement state in physical units (metres, radians).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalState {
    pub r: f64,
    pub lambda: f64,
    pub sigma: f64,
}

/// Gains of the analytical impact-time law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItcgParams {
    /// Navigation gain.
    pub n: f64,
    /// Time-error feedback gain.
    pub k: f64,
    /// Nondimensional acceleration bound.
    pub u_m: f64,
}

impl Default for ItcgParams {
    fn default() -> Self {
        Self {
            n: 3.0,
            k: 9.0,
            u_m: 5.0,
        }
    }
}

impl ItcgParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.n > 0.5 && self.k > 0.0 && self.u_m > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "ITCG gains need N > 1/2, K > 0, u_m > 0 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Time derivative of the reduced state under command `u`.
pub fn reduced_rhs(state: EngagementState, u: f64) -> Result<EngagementState> {
    state.check_radius()?;
    let (s, c) = state.sigma.sin_cos();
    Ok(EngagementState::new(-c, u + s / state.r))
}

/// Time derivative of the full polar state under command `u`.
pub fn full_rhs(state: FullState, u: f64) -> Result<FullState> {
    if state.r <= 0.0 {
        return Err(Error::NonPositiveRadius(state.r));
    }
    let (s, c) = state.sigma.sin_cos();
    let los_rate = s / state.r;
    Ok(FullState::new(-c, -los_rate, u + los_rate))
}

pub fn costate_rhs(state: EngagementState, costate: Costate) -> Result<Costate> {
    state.check_radius()?;
    let (s, c) = state.sigma.sin_cos();
    let r = state.r;
    Ok(Costate::new(
        costate.p_sigma * s / (r * r),
        -costate.p_r * s - costate.p_sigma * c / r,
    ))
}

/// Optimal command for a given heading-error costate under the bound `u_m`.
pub fn clip_control(p_sigma: f64, u_m: f64) -> f64 {
    if p_sigma > u_m {
        u_m
    } else if p_sigma < -u_m {
        -u_m
    } else {
        p_sigma
    }
}

pub fn hamiltonian(state: EngagementState, costate: Costate, u: f64) -> Result<f64> {
    state.check_radius()?;
    let (s, c) = state.sigma.sin_cos();
    Ok(0.5 * u * u - costate.p_r * c + costate.p_sigma * (u + s / state.r))
}

/// Hamiltonian in the sign convention under which `u = clip(p_sigma)` is the
/// pointwise minimiser, i.e. `hamiltonian(state, -costate, u)`.
///
/// The costate equations are linear in the costate, so flipping its sign maps
/// extremals onto extremals; this is the quantity that stays constant along
/// generated trajectories.
pub fn conserved_hamiltonian(state: EngagementState, costate: Costate, u: f64) -> Result<f64> {
    hamiltonian(state, -costate, u)
}

/// Time-to-go estimate `r (1 + sin^2 sigma / (2 (2N - 1)))`.
pub fn tgo_estimate(state: EngagementState, n: f64) -> f64 {
    let s = state.sigma.sin();
    state.r * (1.0 + s * s / (2.0 * (2.0 * n - 1.0)))
}

fn heading_shape(sigma: f64) -> f64 {
    1.0 - (2.0 * sigma / PI).abs().sqrt()
}

/// Analytical impact-time-control command, clamped to the acceleration bound.
///
/// `t` is the elapsed time and `t_f` the commanded impact time.
pub fn analytical_command(
    state: EngagementState,
    t: f64,
    t_f: f64,
    params: &ItcgParams,
) -> Result<f64> {
    state.check_radius()?;
    let n = params.n;
    let t_go = tgo_estimate(state, n);
    if t_go <= 0.0 {
        return Err(Error::NonPositiveTgo(t_go));
    }
    let time_error = t_f - (t + t_go);
    let s = state.sigma.sin();
    let s_floored = if s.abs() < SIN_SIGMA_FLOOR {
        SIN_SIGMA_FLOOR.copysign(s)
    } else {
        s
    };
    let pn_term = -n * s / state.r;
    let time_term = params.k * heading_shape(state.sigma) * (2.0 * n - 1.0) * time_error
        / (state.r * t_go * s_floored);
    Ok(clip_control(pn_term + time_term, params.u_m))
}

/// Minimum turning radius for unit speed and bound `u_m`.
pub fn min_turn_radius(u_m: f64) -> f64 {
    1.0 / u_m
}

/// Shortest flight time to the target with turn radius bounded below by
/// `r_min`: a maximum-rate turn followed by a straight dash.
pub fn min_terminal_time(state: EngagementState, r_min: f64) -> Result<f64> {
    state.check_radius()?;
    let r = state.r;
    let sigma = state.sigma.abs();
    let disc = r * r - 2.0 * r * r_min * sigma.sin();
    if disc < 0.0 {
        return Err(Error::InfeasibleGeometry {
            r,
            sigma: state.sigma,
            r_min,
        });
    }
    if sigma == 0.0 {
        return Ok(r);
    }
    let (s, c) = sigma.sin_cos();
    // tan(alpha) = (r c - sqrt(disc)) / (2 r_min - r s); multiplying through by
    // (r c + sqrt(disc)) removes the 0/0 at r s = 2 r_min.
    let alpha = (r * s).atan2(r * c + disc.sqrt());
    let sin_2a = (2.0 * alpha).sin();
    if sin_2a == 0.0 {
        return Ok(r);
    }
    Ok(2.0 * r_min * alpha + r * s / sin_2a - r_min * alpha.tan())
}

/// `true` when `sigma` lies in the principal interval `(-pi, pi]`.
pub fn is_principal_angle(sigma: f64) -> bool {
    sigma > -PI && sigma <= PI
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn reduced_rhs_examples() {
        let d = reduced_rhs(EngagementState::new(1.0, 0.0), 0.0).unwrap();
        assert_eq!((d.r, d.sigma), (-1.0, 0.0));
        let d = reduced_rhs(EngagementState::new(0.5, FRAC_PI_2), 0.0).unwrap();
        assert_abs_diff_eq!(d.r, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.sigma, 2.0, epsilon = 1e-15);
        let d = reduced_rhs(EngagementState::new(0.5, FRAC_PI_2), 1.0).unwrap();
        assert_abs_diff_eq!(d.sigma, 3.0, epsilon = 1e-15);
        assert!(matches!(
            reduced_rhs(EngagementState::new(0.0, 0.1), 0.0),
            Err(Error::NonPositiveRadius(_))
        ));
    }

    #[test]
    fn full_rhs_examples() {
        let d = full_rhs(FullState::new(1.0, 0.0, 0.0), 0.0).unwrap();
        assert_eq!((d.r, d.lambda, d.sigma), (-1.0, 0.0, 0.0));
        let d = full_rhs(FullState::new(1.0, 0.3, FRAC_PI_2), 0.0).unwrap();
        assert_abs_diff_eq!(d.r, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.lambda, -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.sigma, 1.0, epsilon = 1e-15);
        assert!(full_rhs(FullState::new(-1.0, 0.0, 0.0), 0.0).is_err());
    }

    proptest! {
        #[test]
        fn los_rate_cancels_heading_rate(r in 0.01f64..5.0, lam in -3.0f64..3.0, sig in -3.0f64..3.0, u in -5.0f64..5.0) {
            let d = full_rhs(FullState::new(r, lam, sig), u).unwrap();
            prop_assert!((d.lambda + (d.sigma - u)).abs() < 1e-12);
        }

        #[test]
        fn clip_is_odd_and_idempotent(p in -20.0f64..20.0, um in 0.1f64..10.0) {
            let c = clip_control(p, um);
            prop_assert_eq!(clip_control(-p, um), -c);
            prop_assert_eq!(clip_control(c, um), c);
            prop_assert!(c.abs() <= um);
        }

        #[test]
        fn scales_round_trip(r in 1.0f64..1e5, lam in -3.0f64..3.0, sig in -3.0f64..3.0,
                             r0 in 100.0f64..1e5, v in 10.0f64..2000.0, t in 0.0f64..500.0) {
            let sc = Scales::new(r0, v).unwrap();
            let p = PhysicalState { r, lambda: lam, sigma: sig };
            let back = sc.redimensionalize(&sc.nondimensionalize(&p));
            prop_assert!((back.r - r).abs() <= 1e-12 * r);
            prop_assert_eq!(back.lambda, lam);
            prop_assert!((sc.time_to_physical(sc.time_to_nondim(t)) - t).abs() <= 1e-12 * t.max(1.0));
            prop_assert!((sc.accel_to_physical(sc.accel_to_nondim(t)) - t).abs() <= 1e-12 * t.max(1.0));
        }
    }

    #[test]
    fn costate_rhs_examples() {
        let d = costate_rhs(EngagementState::new(1.0, 0.0), Costate::new(1.0, 1.0)).unwrap();
        assert_abs_diff_eq!(d.p_r, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.p_sigma, -1.0, epsilon = 1e-15);
        let d = costate_rhs(EngagementState::new(2.0, FRAC_PI_2), Costate::new(0.0, 4.0)).unwrap();
        assert_abs_diff_eq!(d.p_r, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.p_sigma, 0.0, epsilon = 1e-15);
        let d = costate_rhs(EngagementState::new(0.7, 1.1), Costate::new(0.0, 0.0)).unwrap();
        assert_eq!((d.p_r, d.p_sigma), (0.0, 0.0));
    }

    #[test]
    fn clip_branches() {
        assert_eq!(clip_control(0.3, 5.0), 0.3);
        assert_eq!(clip_control(7.0, 5.0), 5.0);
        assert_eq!(clip_control(-9.0, 5.0), -5.0);
    }

    #[test]
    fn hamiltonian_examples() {
        let h = hamiltonian(EngagementState::new(1.0, 0.0), Costate::new(1.0, 0.0), 0.0).unwrap();
        assert_abs_diff_eq!(h, -1.0, epsilon = 1e-15);
        let h = hamiltonian(EngagementState::new(1.0, 0.0), Costate::new(0.0, 2.0), 3.0).unwrap();
        assert_abs_diff_eq!(h, 10.5, epsilon = 1e-15);
    }

    #[test]
    fn tgo_examples() {
        assert_eq!(tgo_estimate(EngagementState::new(1.0, 0.0), 3.0), 1.0);
        assert_abs_diff_eq!(
            tgo_estimate(EngagementState::new(1.0, FRAC_PI_2), 3.0),
            1.1,
            epsilon = 1e-15
        );
        assert_eq!(tgo_estimate(EngagementState::new(2.0, 0.0), 3.0), 2.0);
    }

    #[test]
    fn analytical_command_without_time_error() {
        let p = ItcgParams::default();
        let st = EngagementState::new(1.0, PI / 6.0);
        let tgo = tgo_estimate(st, p.n);
        let a = analytical_command(st, 0.2, 0.2 + tgo, &p).unwrap();
        assert_abs_diff_eq!(a, -1.5, epsilon = 1e-12);
        let st = EngagementState::new(1.0, 0.0);
        let a = analytical_command(st, 0.0, 1.0, &p).unwrap();
        assert_abs_diff_eq!(a, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn analytical_command_transcription_check() {
        // r = 1, sigma = pi/4, t = 0, t_f = 1.5, N = 3, K = 9, evaluated term by term.
        let s = (PI / 4.0).sin();
        let tgo = 1.0 + s * s / 10.0; // 1.05
        let eps_t = 1.5 - tgo; // 0.45
        let phi = 1.0 - 0.5f64.sqrt();
        let expected = -3.0 * s + 9.0 * phi * 5.0 * eps_t / (tgo * s);
        let p = ItcgParams { n: 3.0, k: 9.0, u_m: 100.0 };
        let a = analytical_command(EngagementState::new(1.0, PI / 4.0), 0.0, 1.5, &p).unwrap();
        assert_abs_diff_eq!(a, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(a, 5.867084073635761, epsilon = 1e-12);
        // Clamped under the default bound.
        let p = ItcgParams::default();
        let a = analytical_command(EngagementState::new(0.2, 0.01), 0.0, 5.0, &p).unwrap();
        assert_eq!(a.abs(), p.u_m);
    }

    #[test]
    fn analytical_command_floors_sine() {
        let p = ItcgParams { n: 3.0, k: 9.0, u_m: 1e9 };
        let st = EngagementState::new(1.0, 1e-9);
        let a = analytical_command(st, 0.0, 2.0, &p).unwrap();
        assert!(a.is_finite());
        let a_floor = analytical_command(EngagementState::new(1.0, 1e-12), 0.0, 2.0, &p).unwrap();
        assert!((a - a_floor).abs() / a.abs() < 1e-3);
        assert!(analytical_command(EngagementState::new(0.0, 0.1), 0.0, 2.0, &p).is_err());
    }

    /// Length of the shortest path (max-rate turn then tangent line) built
    /// directly from the turn circle geometry.
    fn arc_tangent_oracle(r: f64, sigma: f64, rmin: f64) -> f64 {
        // Missile at the origin heading `sigma` from +x, target at (r, 0).
        // Turning toward the target is clockwise for sigma > 0.
        let (s, c) = sigma.sin_cos();
        let center = (rmin * s, -rmin * c);
        let (dx, dy) = (r - center.0, -center.1);
        let d = (dx * dx + dy * dy).sqrt();
        let tangent = (d * d - rmin * rmin).sqrt();
        let to_target = dy.atan2(dx);
        let offset = (rmin / d).asin();
        let mut best = f64::INFINITY;
        for h in [to_target + offset, to_target - offset] {
            let tp = (r - tangent * h.cos(), -tangent * h.sin());
            // clockwise velocity at tp is ((tp - c).y, -(tp - c).x) / rmin
            let v = ((tp.1 - center.1) / rmin, -(tp.0 - center.0) / rmin);
            if (v.0 - h.cos()).abs() < 1e-9 && (v.1 - h.sin()).abs() < 1e-9 {
                let turn = (sigma - h).rem_euclid(2.0 * PI);
                best = best.min(rmin * turn + tangent);
            }
        }
        best
    }

    #[test]
    fn min_time_examples() {
        assert_eq!(min_turn_radius(5.0), 0.2);
        let t = min_terminal_time(EngagementState::new(1.0, 0.0), 0.2).unwrap();
        assert_eq!(t, 1.0);
        let t = min_terminal_time(EngagementState::new(1.0, FRAC_PI_2), 0.2).unwrap();
        let oracle = arc_tangent_oracle(1.0, FRAC_PI_2, 0.2);
        assert_abs_diff_eq!(oracle, 1.139291985628879, epsilon = 1e-12);
        assert_abs_diff_eq!(t, oracle, epsilon = 1e-6);
    }

    #[test]
    fn min_time_matches_geometry_on_grid() {
        for &r in &[0.8, 1.0, 1.2, 2.6, 3.2] {
            for k in 1..=24 {
                let sigma = k as f64 * 0.1;
                let Ok(t) = min_terminal_time(EngagementState::new(r, sigma), 0.2) else {
                    continue;
                };
                let oracle = arc_tangent_oracle(r, sigma, 0.2);
                assert!((t - oracle).abs() < 1e-9, "r={r} sigma={sigma}: {t} vs {oracle}");
                let mirrored = min_terminal_time(EngagementState::new(r, -sigma), 0.2).unwrap();
                assert_eq!(mirrored, t);
            }
        }
    }

    #[test]
    fn min_time_monotone_in_heading() {
        let mut prev = 0.0;
        for k in 0..=400 {
            let sigma = FRAC_PI_2 * k as f64 / 400.0;
            let t = min_terminal_time(EngagementState::new(1.0, sigma), 0.2).unwrap();
            assert!(t >= prev - 1e-14);
            prev = t;
        }
    }

    #[test]
    fn min_time_infeasible() {
        let err = min_terminal_time(EngagementState::new(0.1, FRAC_PI_2), 0.2).unwrap_err();
        assert!(matches!(err, Error::InfeasibleGeometry { .. }));
    }

    #[test]
    fn nondimensional_examples() {
        let sc = Scales::new(10_000.0, 500.0).unwrap();
        let s = sc.nondimensionalize(&PhysicalState { r: 10_000.0, lambda: 0.0, sigma: 0.0 });
        assert_eq!(s.r, 1.0);
        assert_eq!(sc.time_to_nondim(20.0), 1.0);
        assert_eq!(sc.acceleration(), 25.0);
        assert!(Scales::new(0.0, 1.0).is_err());
    }

    #[test]
    fn wrap_angle_principal() {
        assert_eq!(wrap_angle(PI), PI);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -FRAC_PI_2, epsilon = 1e-12);
        assert!(is_principal_angle(wrap_angle(7.3)));
    }
}
