//! Dormand–Prince 5(4) embedded Runge–Kutta with adaptive step control.

use nalgebra::SVector;

use crate::{Result, ShfError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorTolerances {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for IntegratorTolerances {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-12,
            max_steps: 200_000,
        }
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Integrates `y' = f(t, y)` from `t0` to `t1` (either direction).
///
/// Returns the final state and the number of accepted steps. `h_init` seeds
/// the first step magnitude.
pub fn integrate_dopri<const N: usize, F>(
    mut f: F,
    t0: f64,
    y0: SVector<f64, N>,
    t1: f64,
    tol: &IntegratorTolerances,
    h_init: Option<f64>,
) -> Result<(SVector<f64, N>, usize)>
where
    F: FnMut(f64, &SVector<f64, N>) -> SVector<f64, N>,
{
    let span = t1 - t0;
    if span == 0.0 {
        return Ok((y0, 0));
    }
    let dir = span.signum();
    let mut t = t0;
    let mut y = y0;
    let mut k1 = f(t, &y);
    let mut h = h_init.map(f64::abs).unwrap_or_else(|| initial_step(&y, &k1, tol)).min(span.abs());
    let mut steps = 0usize;
    let mut attempts = 0usize;
    loop {
        let remaining = (t1 - t) * dir;
        if remaining <= 0.0 {
            break;
        }
        let last = h >= remaining;
        let h_try = if last { remaining } else { h };
        let hs = h_try * dir;
        let k2 = f(t + C2 * hs, &(y + k1 * (A21 * hs)));
        let k3 = f(t + C3 * hs, &(y + (k1 * A31 + k2 * A32) * hs));
        let k4 = f(t + C4 * hs, &(y + (k1 * A41 + k2 * A42 + k3 * A43) * hs));
        let k5 = f(t + C5 * hs, &(y + (k1 * A51 + k2 * A52 + k3 * A53 + k4 * A54) * hs));
        let k6 = f(t + hs, &(y + (k1 * A61 + k2 * A62 + k3 * A63 + k4 * A64 + k5 * A65) * hs));
        let y_new = y + (k1 * A71 + k3 * A73 + k4 * A74 + k5 * A75 + k6 * A76) * hs;
        let t_new = if last { t1 } else { t + hs };
        let k7 = f(t_new, &y_new);
        let err_vec = (k1 * E1 + k3 * E3 + k4 * E4 + k5 * E5 + k6 * E6 + k7 * E7) * hs;
        let mut acc = 0.0;
        for i in 0..N {
            let sc = tol.atol + tol.rtol * y[i].abs().max(y_new[i].abs());
            let e = err_vec[i] / sc;
            acc += e * e;
        }
        let err = (acc / N as f64).sqrt();
        attempts += 1;
        if !err.is_finite() {
            return Err(ShfError::Propagation {
                last_epoch: t,
                reason: "non-finite derivative".into(),
            });
        }
        if err <= 1.0 {
            t = t_new;
            y = y_new;
            k1 = k7;
            steps += 1;
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            if !last {
                h = h_try * factor;
            }
        } else {
            h = h_try * (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
        }
        if h < 1e-10 * t.abs().max(1.0) * f64::EPSILON.sqrt() || h < 1e-9 {
            return Err(ShfError::Propagation {
                last_epoch: t,
                reason: "step size underflow".into(),
            });
        }
        if attempts > tol.max_steps {
            return Err(ShfError::Propagation {
                last_epoch: t,
                reason: "maximum step count exceeded".into(),
            });
        }
    }
    Ok((y, steps))
}

fn initial_step<const N: usize>(y: &SVector<f64, N>, dy: &SVector<f64, N>, tol: &IntegratorTolerances) -> f64 {
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for i in 0..N {
        let sc = tol.atol + tol.rtol * y[i].abs();
        d0 += (y[i] / sc).powi(2);
        d1 += (dy[i] / sc).powi(2);
    }
    let d0 = (d0 / N as f64).sqrt();
    let d1 = (d1 / N as f64).sqrt();
    if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;

    #[test]
    fn harmonic_oscillator() {
        let f = |_t: f64, y: &Vector2<f64>| Vector2::new(y[1], -y[0]);
        let tol = IntegratorTolerances::default();
        let (y, _) = integrate_dopri(f, 0.0, Vector2::new(1.0, 0.0), 10.0, &tol, None).unwrap();
        assert!((y[0] - 10f64.cos()).abs() < 1e-9);
        assert!((y[1] + 10f64.sin()).abs() < 1e-9);
        let (back, _) = integrate_dopri(f, 10.0, y, 0.0, &tol, None).unwrap();
        assert!((back[0] - 1.0).abs() < 1e-9 && back[1].abs() < 1e-9);
    }

    #[test]
    fn exponential_growth() {
        let f = |_t: f64, y: &SVector<f64, 1>| *y;
        let tol = IntegratorTolerances::default();
        let (y, steps) = integrate_dopri(f, 0.0, SVector::<f64, 1>::new(1.0), 2.0, &tol, Some(0.1)).unwrap();
        assert!((y[0] - 2f64.exp()).abs() < 1e-9 * 2f64.exp());
        assert!(steps > 5);
    }

    #[test]
    fn blowup_reports_epoch() {
        let f = |_t: f64, y: &SVector<f64, 1>| SVector::<f64, 1>::new(y[0] * y[0]);
        let tol = IntegratorTolerances::default();
        let err = integrate_dopri(f, 0.0, SVector::<f64, 1>::new(1.0), 2.0, &tol, None).unwrap_err();
        match err {
            ShfError::Propagation { last_epoch, .. } => assert!(last_epoch > 0.9 && last_epoch < 1.0),
            other => panic!("unexpected {other:?}"),
        }
    }
}
