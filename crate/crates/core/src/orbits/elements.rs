use nalgebra::Vector3;

use super::{wrap_pi, CartesianState, MeeState, MU_EARTH};
use crate::{Result, ShfError};

/// Converts an inertial Cartesian state to MEE, with `L` in (-pi, pi].
pub fn cart_to_mee(state: &CartesianState) -> Result<MeeState> {
    let r = state.position;
    let v = state.velocity;
    let rmag = r.norm();
    if !(rmag > 0.0) || !v.iter().all(|x| x.is_finite()) {
        return Err(ShfError::InvalidState("degenerate Cartesian state".into()));
    }
    let hvec = r.cross(&v);
    let hmag = hvec.norm();
    if !(hmag > 0.0) {
        return Err(ShfError::InvalidState("zero angular momentum".into()));
    }
    let ecc_vec = v.cross(&hvec) / MU_EARTH - r / rmag;
    let ecc = ecc_vec.norm();
    if !(ecc < 1.0) || state.energy() >= 0.0 {
        return Err(ShfError::NonElliptic { eccentricity: ecc });
    }
    let h_hat = hvec / hmag;
    let cos_i = h_hat.z;
    // i = pi within 1e-9 rad <=> 1 + cos i < ~5e-19
    if 1.0 + cos_i <= 0.5e-18 {
        return Err(ShfError::RetrogradeSingularity);
    }
    let p = hmag * hmag / MU_EARTH;
    let denom = 1.0 + h_hat.z;
    let hh = -h_hat.y / denom;
    let kk = h_hat.x / denom;
    let (f_hat, g_hat) = equinoctial_basis(hh, kk);
    let f = ecc_vec.dot(&f_hat);
    let g = ecc_vec.dot(&g_hat);
    let l = r.dot(&g_hat).atan2(r.dot(&f_hat));
    Ok(MeeState {
        p,
        f,
        g,
        h: hh,
        k: kk,
        l,
        srp_coeff: state.srp_coeff,
        epoch: state.epoch,
    })
}

/// Like [`cart_to_mee`] but places `L` on the branch nearest `l_ref`.
pub fn cart_to_mee_near(state: &CartesianState, l_ref: f64) -> Result<MeeState> {
    let mut mee = cart_to_mee(state)?;
    mee.l = l_ref + wrap_pi(mee.l - l_ref);
    Ok(mee)
}

fn equinoctial_basis(h: f64, k: f64) -> (Vector3<f64>, Vector3<f64>) {
    let s2 = 1.0 + h * h + k * k;
    let f_hat = Vector3::new(1.0 - k * k + h * h, 2.0 * h * k, -2.0 * k) / s2;
    let g_hat = Vector3::new(2.0 * h * k, 1.0 + k * k - h * h, 2.0 * h) / s2;
    (f_hat, g_hat)
}

pub fn mee_to_cart(state: &MeeState) -> CartesianState {
    let MeeState { p, f, g, h, k, l, .. } = *state;
    let (sl, cl) = l.sin_cos();
    let w = 1.0 + f * cl + g * sl;
    let r = p / w;
    let s2 = 1.0 + h * h + k * k;
    let alpha2 = h * h - k * k;
    let hk2 = 2.0 * h * k;
    let position = Vector3::new(
        cl + alpha2 * cl + hk2 * sl,
        sl - alpha2 * sl + hk2 * cl,
        2.0 * (h * sl - k * cl),
    ) * (r / s2);
    let sq = (MU_EARTH / p).sqrt();
    let velocity = Vector3::new(
        sl + alpha2 * sl - hk2 * cl + g - 2.0 * f * h * k + alpha2 * g,
        -cl + alpha2 * cl + hk2 * sl - f + 2.0 * g * h * k + alpha2 * f,
        -2.0 * (h * cl + k * sl + f * h + g * k),
    ) * (-sq / s2);
    CartesianState {
        position,
        velocity,
        srp_coeff: state.srp_coeff,
        epoch: state.epoch,
    }
}

/// Osculating semi-major axis, eccentricity and inclination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeplerianAei {
    pub a: f64,
    pub e: f64,
    pub i: f64,
}

pub fn keplerian_aei(state: &MeeState) -> KeplerianAei {
    KeplerianAei {
        a: state.semi_major_axis(),
        e: state.eccentricity(),
        i: state.inclination(),
    }
}
