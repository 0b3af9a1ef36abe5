use std::f64::consts::PI;

use super::MeeState;

const TWO_PI: f64 = 2.0 * PI;

/// Unwrapped true anomaly -> unwrapped mean anomaly.
fn true_to_mean(nu: f64, e: f64) -> f64 {
    let k = (nu / TWO_PI).round();
    let nu_w = nu - k * TWO_PI;
    let (s, c) = nu_w.sin_cos();
    let ecc_anom = ((1.0 - e * e).sqrt() * s).atan2(e + c);
    k * TWO_PI + ecc_anom - e * ecc_anom.sin()
}

/// Unwrapped mean anomaly -> unwrapped true anomaly.
fn mean_to_true(m: f64, e: f64) -> f64 {
    let k = (m / TWO_PI).round();
    let m_w = m - k * TWO_PI;
    let mut ecc_anom = if e < 0.8 { m_w } else { PI.copysign(m_w) };
    for _ in 0..50 {
        let f = ecc_anom - e * ecc_anom.sin() - m_w;
        let fp = 1.0 - e * ecc_anom.cos();
        let step = f / fp;
        ecc_anom -= step;
        if step.abs() < 1e-15 {
            break;
        }
    }
    let half = 0.5 * ecc_anom;
    let nu_w = 2.0 * ((1.0 + e).sqrt() * half.sin()).atan2((1.0 - e).sqrt() * half.cos());
    k * TWO_PI + nu_w
}

/// Two-body propagation: the orbit geometry (p, f, g, h, k) is untouched and
/// `L` advances along the unwrapped branch.
pub fn kepler_propagate(state: &MeeState, dt: f64) -> MeeState {
    if dt == 0.0 {
        return *state;
    }
    let e = state.eccentricity();
    let varpi = state.g.atan2(state.f);
    let nu0 = state.l - varpi;
    let m1 = true_to_mean(nu0, e) + state.mean_motion() * dt;
    let nu1 = mean_to_true(m1, e);
    MeeState {
        l: state.l + (nu1 - nu0),
        epoch: state.epoch + dt,
        ..*state
    }
}

/// Two-body flight time from true longitude `l_from` to `l_to` on the orbit
/// geometry of `state` (negative when `l_to < l_from`).
pub fn time_between_longitudes(state: &MeeState, l_from: f64, l_to: f64) -> f64 {
    let e = state.eccentricity();
    let varpi = state.g.atan2(state.f);
    let m0 = true_to_mean(l_from - varpi, e);
    let m1 = true_to_mean(l_to - varpi, e);
    (m1 - m0) / state.mean_motion()
}
