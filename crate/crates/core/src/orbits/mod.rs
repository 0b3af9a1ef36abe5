//! Orbital state representations and propagation.
//!
//! The filter works natively in Modified Equinoctial Elements (MEE), which
//! stay regular for the circular, near-equatorial orbits of the geostationary
//! belt. Cartesian states are used for measurement geometry and force
//! evaluation.

mod elements;
mod ephemeris;
mod forces;
mod integrator;
mod kepler;
mod propagate;

use std::f64::consts::PI;

pub use elements::{cart_to_mee, cart_to_mee_near, keplerian_aei, mee_to_cart, KeplerianAei};
pub use ephemeris::{moon_position, sun_position};
pub use forces::{perturbing_acceleration, shadow_fraction_conical, ForceModelConfig, ProcessNoise, ThirdBodies, EclipseModel};
pub use integrator::{integrate_dopri, IntegratorTolerances};
pub use kepler::{kepler_propagate, time_between_longitudes};
pub use propagate::{mee_derivative, perturbed_propagate, perturbed_propagate_with, sensitivity_matrix};

/// Earth gravitational parameter (km^3/s^2).
pub const MU_EARTH: f64 = 398_600.441_8;
/// Earth equatorial radius (km).
pub const R_EARTH: f64 = 6378.137;
/// WGS-84 flattening.
pub const EARTH_FLATTENING: f64 = 1.0 / 298.257_223_563;
/// Unnormalized zonal coefficients J2..J6.
pub const J_ZONAL: [f64; 5] = [
    1.082_626_68e-3,
    -2.532_656_485_3e-6,
    -1.619_621_591_3e-6,
    -2.272_960_828_7e-7,
    5.406_812_391_5e-7,
];
/// Earth rotation rate (rad/s).
pub const EARTH_ROTATION_RATE: f64 = 7.292_115_0e-5;
/// Earth rotation angle at the reference epoch (rad).
pub const EARTH_ROTATION_ANGLE_J2000: f64 = 2.0 * PI * 0.779_057_273_264;
pub const SECONDS_PER_DAY: f64 = 86_400.0;
pub const AU_KM: f64 = 149_597_870.7;

/// Earth rotation angle at `epoch` (seconds past J2000, continuous scale).
pub fn earth_rotation_angle(epoch: f64) -> f64 {
    (EARTH_ROTATION_ANGLE_J2000 + EARTH_ROTATION_RATE * epoch).rem_euclid(2.0 * PI)
}

/// Wraps an angle to (-pi, pi].
pub fn wrap_pi(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CartesianState {
    /// km, Earth-centered inertial
    pub position: nalgebra::Vector3<f64>,
    /// km/s
    pub velocity: nalgebra::Vector3<f64>,
    pub srp_coeff: f64,
    /// seconds past J2000
    pub epoch: f64,
}

impl CartesianState {
    pub fn new(
        position: nalgebra::Vector3<f64>,
        velocity: nalgebra::Vector3<f64>,
        srp_coeff: f64,
        epoch: f64,
    ) -> Self {
        Self {
            position,
            velocity,
            srp_coeff,
            epoch,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if !(self.position.norm() > R_EARTH) {
            return Err(crate::ShfError::InvalidState(format!(
                "position magnitude {} km below Earth radius",
                self.position.norm()
            )));
        }
        if !(self.srp_coeff >= 0.0) {
            return Err(crate::ShfError::InvalidState("negative SRP coefficient".into()));
        }
        Ok(())
    }

    /// Specific orbital energy (km^2/s^2).
    pub fn energy(&self) -> f64 {
        0.5 * self.velocity.norm_squared() - MU_EARTH / self.position.norm()
    }
}

/// Modified Equinoctial Elements plus the SRP coefficient.
///
/// `l` is the true longitude, kept unwrapped so that propagated populations
/// stay on a single branch.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MeeState {
    pub p: f64,
    pub f: f64,
    pub g: f64,
    pub h: f64,
    pub k: f64,
    pub l: f64,
    pub srp_coeff: f64,
    pub epoch: f64,
}

impl MeeState {
    pub fn from_vector(v: &nalgebra::Vector6<f64>, srp_coeff: f64, epoch: f64) -> Self {
        Self {
            p: v[0],
            f: v[1],
            g: v[2],
            h: v[3],
            k: v[4],
            l: v[5],
            srp_coeff,
            epoch,
        }
    }

    pub fn elements(&self) -> nalgebra::Vector6<f64> {
        nalgebra::Vector6::new(self.p, self.f, self.g, self.h, self.k, self.l)
    }

    /// (p, f, g, h, k, L, B)
    pub fn to_vector7(&self) -> nalgebra::SVector<f64, 7> {
        nalgebra::SVector::<f64, 7>::from_column_slice(&[
            self.p,
            self.f,
            self.g,
            self.h,
            self.k,
            self.l,
            self.srp_coeff,
        ])
    }

    pub fn from_vector7(v: &nalgebra::SVector<f64, 7>, epoch: f64) -> Self {
        Self {
            p: v[0],
            f: v[1],
            g: v[2],
            h: v[3],
            k: v[4],
            l: v[5],
            srp_coeff: v[6],
            epoch,
        }
    }

    pub fn eccentricity(&self) -> f64 {
        self.f.hypot(self.g)
    }

    pub fn semi_major_axis(&self) -> f64 {
        self.p / (1.0 - self.f * self.f - self.g * self.g)
    }

    pub fn inclination(&self) -> f64 {
        2.0 * self.h.hypot(self.k).atan()
    }

    pub fn raan(&self) -> f64 {
        self.k.atan2(self.h)
    }

    /// Mean motion (rad/s).
    pub fn mean_motion(&self) -> f64 {
        let a = self.semi_major_axis();
        (MU_EARTH / (a * a * a)).sqrt()
    }

    pub fn period(&self) -> f64 {
        2.0 * PI / self.mean_motion()
    }

    pub fn validate(&self) -> crate::Result<()> {
        if !(self.p > 0.0) {
            return Err(crate::ShfError::InvalidState(format!(
                "semi-latus rectum must be positive, got {}",
                self.p
            )));
        }
        let e2 = self.f * self.f + self.g * self.g;
        if !(e2 < 1.0) {
            return Err(crate::ShfError::NonElliptic {
                eccentricity: e2.sqrt(),
            });
        }
        if !(self.h.is_finite() && self.k.is_finite() && self.l.is_finite()) {
            return Err(crate::ShfError::InvalidState("non-finite elements".into()));
        }
        Ok(())
    }
}

/// Radial / transverse / normal frame of a Cartesian state, as rows.
pub fn rtn_frame(position: &nalgebra::Vector3<f64>, velocity: &nalgebra::Vector3<f64>) -> nalgebra::Matrix3<f64> {
    let r_hat = position.normalize();
    let n_hat = position.cross(velocity).normalize();
    let t_hat = n_hat.cross(&r_hat);
    nalgebra::Matrix3::from_rows(&[r_hat.transpose(), t_hat.transpose(), n_hat.transpose()])
}

/// Applies an instantaneous velocity change given in the RTN frame.
pub fn apply_impulse(state: &CartesianState, dv_rtn: &nalgebra::Vector3<f64>) -> CartesianState {
    let frame = rtn_frame(&state.position, &state.velocity);
    let dv = frame.transpose() * dv_rtn;
    CartesianState {
        velocity: state.velocity + dv,
        ..*state
    }
}

/// Earth-fixed longitude of the sub-satellite point, wrapped to (-pi, pi].
pub fn geo_mean_longitude(state: &MeeState) -> f64 {
    let cart = mee_to_cart(state);
    let inertial_lon = cart.position.y.atan2(cart.position.x);
    wrap_pi(inertial_lon - earth_rotation_angle(state.epoch))
}

/// Radius of a circular orbit with the given period.
pub fn circular_radius_for_period(period: f64) -> f64 {
    (MU_EARTH * period * period / (4.0 * PI * PI)).cbrt()
}
