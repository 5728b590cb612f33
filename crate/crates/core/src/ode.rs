//! Fixed-step classical Runge-Kutta for small autonomous systems.

use nalgebra::SVector;

/// One RK4 step of `y' = f(y)` with step `h`.
///
/// The right-hand side may fail (e.g. when a trajectory leaves the domain);
/// the first error aborts the step.
pub fn rk4_step<const N: usize, E>(
    f: &mut impl FnMut(&SVector<f64, N>) -> Result<SVector<f64, N>, E>,
    y: &SVector<f64, N>,
    h: f64,
) -> Result<SVector<f64, N>, E> {
    let k1 = f(y)?;
    let k2 = f(&(y + k1 * (0.5 * h)))?;
    let k3 = f(&(y + k2 * (0.5 * h)))?;
    let k4 = f(&(y + k3 * h))?;
    Ok(y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;

    #[test]
    fn harmonic_oscillator_fourth_order() {
        // y'' = -y, exact solution cos(t); halving h shrinks the error ~16x.
        let err = |n: usize| {
            let h = 1.0 / n as f64;
            let mut y = Vector2::new(1.0, 0.0);
            let mut f = |y: &Vector2<f64>| Ok::<_, ()>(Vector2::new(y[1], -y[0]));
            for _ in 0..n {
                y = rk4_step(&mut f, &y, h).unwrap();
            }
            (y[0] - 1f64.cos()).abs()
        };
        let ratio = err(20) / err(40);
        assert!(ratio > 14.0 && ratio < 18.0, "ratio {ratio}");
    }

    #[test]
    fn error_propagates() {
        let mut f = |y: &Vector2<f64>| if y[0] > 1.05 { Err("out") } else { Ok(Vector2::new(1.0, 0.0)) };
        assert_eq!(rk4_step(&mut f, &Vector2::new(1.0, 0.0), 0.2), Err("out"));
    }
}
