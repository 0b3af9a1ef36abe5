use nalgebra::{Matrix6x3, SVector, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::forces::{perturbing_acceleration, ForceModelConfig};
use super::integrator::{integrate_dopri, IntegratorTolerances};
use super::{mee_to_cart, rtn_frame, MeeState, MU_EARTH};
use crate::Result;

/// Gauss variational matrix of the MEE: d(p,f,g,h,k,L)/dt = A a_rtn + b.
///
/// Columns are radial, transverse and normal acceleration components.
pub fn sensitivity_matrix(state: &MeeState) -> Matrix6x3<f64> {
    let MeeState { p, f, g, h, k, l, .. } = *state;
    let (sl, cl) = l.sin_cos();
    let q = 1.0 + f * cl + g * sl;
    let s2 = 1.0 + h * h + k * k;
    let sq = (p / MU_EARTH).sqrt();
    let hk = h * sl - k * cl;
    Matrix6x3::new(
        0.0,
        2.0 * p / q * sq,
        0.0,
        sq * sl,
        sq * ((q + 1.0) * cl + f) / q,
        -sq * g * hk / q,
        -sq * cl,
        sq * ((q + 1.0) * sl + g) / q,
        sq * f * hk / q,
        0.0,
        0.0,
        sq * s2 * cl / (2.0 * q),
        0.0,
        0.0,
        sq * s2 * sl / (2.0 * q),
        0.0,
        0.0,
        sq * hk / q,
    )
}

/// Full MEE time derivative under the given perturbing RTN acceleration.
pub fn mee_derivative(state: &MeeState, accel_rtn: &Vector3<f64>) -> Vector6<f64> {
    let (sl, cl) = state.l.sin_cos();
    let q = 1.0 + state.f * cl + state.g * sl;
    let mut d = sensitivity_matrix(state) * accel_rtn;
    d[5] += (MU_EARTH * state.p).sqrt() * (q / state.p).powi(2);
    d
}

fn derivative(
    t: f64,
    y: &Vector6<f64>,
    srp_coeff: f64,
    cfg: &ForceModelConfig,
    noise_rtn: &Vector3<f64>,
) -> Vector6<f64> {
    let state = MeeState::from_vector(y, srp_coeff, t);
    let mut a_rtn = *noise_rtn;
    if !cfg.is_two_body() {
        let cart = mee_to_cart(&state);
        let a = perturbing_acceleration(&cart.position, t, srp_coeff, cfg);
        a_rtn += rtn_frame(&cart.position, &cart.velocity) * a;
    }
    mee_derivative(&state, &a_rtn)
}

/// Numerically integrated propagation over `dt` seconds.
///
/// With `noise_seed` set and process noise configured, a piecewise-constant
/// random RTN acceleration is applied on a macro-step grid anchored at the
/// initial epoch; the result is reproducible for a fixed seed.
pub fn perturbed_propagate(state: &MeeState, dt: f64, cfg: &ForceModelConfig, noise_seed: Option<u64>) -> Result<MeeState> {
    perturbed_propagate_with(state, dt, cfg, noise_seed, &IntegratorTolerances::default())
}

pub fn perturbed_propagate_with(
    state: &MeeState,
    dt: f64,
    cfg: &ForceModelConfig,
    noise_seed: Option<u64>,
    tol: &IntegratorTolerances,
) -> Result<MeeState> {
    if dt == 0.0 {
        return Ok(*state);
    }
    let y0 = state.elements();
    let b = state.srp_coeff;
    let h_hint = (state.period() / 64.0).min(dt.abs());
    let noise = match (noise_seed, cfg.process_noise) {
        (Some(seed), Some(pn)) if pn.accel_psd_sqrt.iter().any(|q| *q > 0.0) => Some((seed, pn)),
        _ => None,
    };
    let y = match noise {
        None => {
            let zero = Vector3::zeros();
            let (y, _) = integrate_dopri(
                |t, y: &SVector<f64, 6>| derivative(t, y, b, cfg, &zero),
                state.epoch,
                y0,
                state.epoch + dt,
                tol,
                Some(h_hint),
            )?;
            y
        }
        Some((seed, pn)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n_seg = (dt.abs() / pn.macro_step_s).ceil().max(1.0) as usize;
            let seg = dt / n_seg as f64;
            let mut y = y0;
            let mut t = state.epoch;
            for i in 0..n_seg {
                let sigma_scale = 1.0 / seg.abs().sqrt();
                let mut a = Vector3::zeros();
                for axis in 0..3 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    a[axis] = z * pn.accel_psd_sqrt[axis] * sigma_scale;
                }
                let t_end = if i + 1 == n_seg { state.epoch + dt } else { t + seg };
                let (y_next, _) = integrate_dopri(
                    |tt, yy: &SVector<f64, 6>| derivative(tt, yy, b, cfg, &a),
                    t,
                    y,
                    t_end,
                    tol,
                    Some(h_hint.min(seg.abs())),
                )?;
                y = y_next;
                t = t_end;
            }
            y
        }
    };
    let out = MeeState::from_vector(&y, b, state.epoch + dt);
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orbits::{apply_impulse, cart_to_mee_near, kepler_propagate, ProcessNoise, J_ZONAL, R_EARTH};
    use rand::Rng;

    fn geo_state(incl_deg: f64, raan: f64, l: f64) -> MeeState {
        let t = (incl_deg.to_radians() / 2.0).tan();
        MeeState {
            p: 42_164.17,
            f: 2e-4,
            g: -1e-4,
            h: t * raan.cos(),
            k: t * raan.sin(),
            l,
            srp_coeff: 0.02,
            epoch: 5.0e8,
        }
    }

    #[test]
    fn two_body_matches_kepler() {
        let s = geo_state(2.0, 0.4, 1.0);
        let cfg = ForceModelConfig::two_body();
        for dt in [3600.0, 86_400.0, 3.3 * 86_400.0] {
            let num = perturbed_propagate(&s, dt, &cfg, None).unwrap();
            let ana = kepler_propagate(&s, dt);
            let a = num.elements();
            let b = ana.elements();
            for i in 0..5 {
                assert!((a[i] - b[i]).abs() <= 1e-9 * b[i].abs().max(1e-9));
            }
            assert!((a[5] - b[5]).abs() < 1e-8, "L mismatch {}", a[5] - b[5]);
        }
    }

    #[test]
    fn j2_raan_drift() {
        let s = geo_state(10.0, 0.3, 0.0);
        let cfg = ForceModelConfig::zonal(2);
        // one orbital period averages out the short-period terms
        let dt = s.period();
        let out = perturbed_propagate(&s, dt, &cfg, None).unwrap();
        let drift = crate::orbits::wrap_pi(out.raan() - s.raan()) / dt;
        let n = s.mean_motion();
        let expected = -1.5 * J_ZONAL[0] * n * (R_EARTH / s.p).powi(2) * s.inclination().cos();
        assert!((drift / expected - 1.0).abs() < 0.01, "{drift} vs {expected}");
    }

    #[test]
    fn two_body_conserves_energy_and_momentum() {
        let s = MeeState {
            p: 20_000.0,
            f: 0.3,
            g: 0.2,
            h: 0.2,
            k: 0.1,
            l: 0.5,
            srp_coeff: 0.0,
            epoch: 0.0,
        };
        let out = perturbed_propagate(&s, 10.0 * s.period(), &ForceModelConfig::two_body(), None).unwrap();
        let c0 = mee_to_cart(&s);
        let c1 = mee_to_cart(&out);
        assert!((c1.energy() / c0.energy() - 1.0).abs() < 1e-10);
        let h0 = c0.position.cross(&c0.velocity).norm();
        let h1 = c1.position.cross(&c1.velocity).norm();
        assert!((h1 / h0 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn time_reversible() {
        let s = geo_state(2.0, 1.0, 0.2);
        let cfg = ForceModelConfig::geo_standard();
        let fwd = perturbed_propagate(&s, 2.0 * 86_400.0, &cfg, None).unwrap();
        let back = perturbed_propagate(&fwd, -2.0 * 86_400.0, &cfg, None).unwrap();
        let a = mee_to_cart(&s);
        let b = mee_to_cart(&back);
        assert!((a.position - b.position).norm() / a.position.norm() < 1e-8);
        assert!((a.velocity - b.velocity).norm() / a.velocity.norm() < 1e-8);
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let s = geo_state(2.0, 1.0, 0.2);
        let mut cfg = ForceModelConfig::geo_standard();
        cfg.process_noise = Some(ProcessNoise {
            accel_psd_sqrt: [1e-9, 1e-9, 1e-9],
            macro_step_s: 3600.0,
        });
        let a = perturbed_propagate(&s, 86_400.0, &cfg, Some(7)).unwrap();
        let b = perturbed_propagate(&s, 86_400.0, &cfg, Some(7)).unwrap();
        assert_eq!(a, b);
        let c = perturbed_propagate(&s, 86_400.0, &cfg, Some(8)).unwrap();
        assert_ne!(a, c);
        let quiet = perturbed_propagate(&s, 86_400.0, &cfg, None).unwrap();
        assert_ne!(a, quiet);
    }

    fn fd_column(s: &MeeState, axis: usize, dv: f64) -> Vector6<f64> {
        let cart = mee_to_cart(s);
        let mut imp = Vector3::zeros();
        imp[axis] = dv;
        let plus = cart_to_mee_near(&apply_impulse(&cart, &imp), s.l).unwrap();
        imp[axis] = -dv;
        let minus = cart_to_mee_near(&apply_impulse(&cart, &imp), s.l).unwrap();
        (plus.elements() - minus.elements()) / (2.0 * dv)
    }

    #[test]
    fn radial_burn_leaves_p_unchanged() {
        let s = MeeState {
            f: 0.0,
            g: 0.0,
            h: 0.0,
            k: 0.0,
            ..geo_state(0.0, 0.0, 0.3)
        };
        assert_eq!(sensitivity_matrix(&s)[(0, 0)], 0.0);
    }

    #[test]
    fn tangential_burn_matches_finite_difference() {
        let s = geo_state(2.0, 0.5, 0.9);
        let a = sensitivity_matrix(&s);
        let fd = fd_column(&s, 1, 1e-6);
        for i in 0..6 {
            let tol = 1e-6 * a[(i, 1)].abs().max(1e-6 * a.column(1).norm());
            assert!((fd[i] - a[(i, 1)]).abs() < tol, "row {i}: {} vs {}", fd[i], a[(i, 1)]);
        }
    }

    #[test]
    fn normal_burn_at_node_is_pure_plane_change() {
        let raan = 0.7;
        let s = geo_state(2.0, raan, raan);
        let fd = fd_column(&s, 2, 1e-6);
        let a = sensitivity_matrix(&s);
        assert!(fd[0].abs() < 1e-6 * a.column(2).norm());
        assert!(fd[1].abs() < 1e-6 && fd[2].abs() < 1e-6);
        assert!(fd.fixed_rows::<2>(3).norm() > 0.1);
        for i in 3..5 {
            assert!((fd[i] - a[(i, 2)]).abs() < 1e-6 * a[(i, 2)].abs().max(1e-8));
        }
    }

    #[test]
    fn sensitivity_matches_central_differences_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let e: f64 = rng.random_range(0.0..0.5);
            let w: f64 = rng.random_range(0.0..6.28);
            let inc: f64 = rng.random_range(0.01f64..1.2);
            let raan: f64 = rng.random_range(0.0..6.28);
            let s = MeeState {
                p: rng.random_range(8000.0..50_000.0),
                f: e * w.cos(),
                g: e * w.sin(),
                h: (inc / 2.0).tan() * raan.cos(),
                k: (inc / 2.0).tan() * raan.sin(),
                l: rng.random_range(0.0..6.28),
                srp_coeff: 0.0,
                epoch: 0.0,
            };
            let a = sensitivity_matrix(&s);
            for axis in 0..3 {
                let fd = fd_column(&s, axis, 1e-7);
                let scale = a.column(axis).norm();
                for i in 0..6 {
                    // entries much smaller than the column scale are below FD resolution
                    if a[(i, axis)].abs() > 1e-3 * scale {
                        let rel = (fd[i] - a[(i, axis)]).abs() / a[(i, axis)].abs();
                        assert!(rel < 1e-4, "row {i} axis {axis}: rel {rel}");
                    }
                }
            }
        }
    }
}
