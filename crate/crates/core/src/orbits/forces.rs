use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{ephemeris, AU_KM, J_ZONAL, MU_EARTH, R_EARTH};
use crate::{Result, ShfError};

pub const MU_SUN: f64 = 1.327_124_400_18e11;
pub const MU_MOON: f64 = 4902.800_066;
pub const R_SUN: f64 = 696_000.0;
/// Solar radiation pressure at 1 AU (N/m^2).
pub const SOLAR_PRESSURE_1AU: f64 = 4.56e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EclipseModel {
    #[default]
    None,
    Conical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ThirdBodies {
    #[serde(default)]
    pub sun: bool,
    #[serde(default)]
    pub moon: bool,
}

/// Piecewise-constant random RTN acceleration, redrawn every `macro_step_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessNoise {
    /// Square root of the per-axis acceleration PSD (km/s^1.5), RTN order.
    pub accel_psd_sqrt: [f64; 3],
    pub macro_step_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceModelConfig {
    /// 0 for two-body, 2..=6 enables J2..Jn.
    pub zonal_degree: u8,
    #[serde(default)]
    pub third_bodies: ThirdBodies,
    #[serde(default)]
    pub srp_enabled: bool,
    #[serde(default)]
    pub eclipse_model: EclipseModel,
    #[serde(default)]
    pub process_noise: Option<ProcessNoise>,
}

impl Default for ForceModelConfig {
    fn default() -> Self {
        Self::two_body()
    }
}

impl ForceModelConfig {
    pub fn two_body() -> Self {
        Self {
            zonal_degree: 0,
            third_bodies: ThirdBodies::default(),
            srp_enabled: false,
            eclipse_model: EclipseModel::None,
            process_noise: None,
        }
    }

    pub fn zonal(degree: u8) -> Self {
        Self {
            zonal_degree: degree,
            ..Self::two_body()
        }
    }

    /// J2 + Sun + Moon + SRP with conical eclipses.
    pub fn geo_standard() -> Self {
        Self {
            zonal_degree: 2,
            third_bodies: ThirdBodies { sun: true, moon: true },
            srp_enabled: true,
            eclipse_model: EclipseModel::Conical,
            process_noise: None,
        }
    }

    pub fn is_two_body(&self) -> bool {
        self.zonal_degree == 0 && !self.third_bodies.sun && !self.third_bodies.moon && !self.srp_enabled
    }

    pub fn without_noise(&self) -> Self {
        Self {
            process_noise: None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.zonal_degree, 0 | 2..=6) {
            return Err(ShfError::Config(format!(
                "zonal_degree must be 0 or 2..=6, got {}",
                self.zonal_degree
            )));
        }
        if let Some(noise) = &self.process_noise {
            if !(noise.macro_step_s > 0.0) || noise.accel_psd_sqrt.iter().any(|q| !(*q >= 0.0)) {
                return Err(ShfError::Config("invalid process noise description".into()));
            }
        }
        Ok(())
    }
}

/// Zonal harmonics J2..J`degree` acceleration.
fn zonal_acceleration(r: &Vector3<f64>, degree: u8) -> Vector3<f64> {
    let rmag = r.norm();
    let u = r.z / rmag;
    let r_hat = r / rmag;
    // Legendre polynomials and derivatives by recursion
    let mut p = [0.0; 7];
    let mut dp = [0.0; 7];
    p[0] = 1.0;
    p[1] = u;
    dp[1] = 1.0;
    for n in 1..6 {
        let nf = n as f64;
        p[n + 1] = ((2.0 * nf + 1.0) * u * p[n] - nf * p[n - 1]) / (nf + 1.0);
        dp[n + 1] = dp[n - 1] + (2.0 * nf + 1.0) * p[n];
    }
    let mut radial = 0.0;
    let mut polar = 0.0;
    let ratio = R_EARTH / rmag;
    let mut ratio_n = ratio;
    for n in 2..=degree as usize {
        ratio_n *= ratio;
        let coef = MU_EARTH * J_ZONAL[n - 2] * ratio_n / (rmag * rmag);
        radial += coef * ((n as f64 + 1.0) * p[n] + u * dp[n]);
        polar -= coef * dp[n];
    }
    r_hat * radial + Vector3::z() * polar
}

fn third_body(r: &Vector3<f64>, body: &Vector3<f64>, mu: f64) -> Vector3<f64> {
    let d = body - r;
    mu * (d / d.norm().powi(3) - body / body.norm().powi(3))
}

/// Fraction of the solar disk visible from `r` (1 = full sunlight).
pub fn shadow_fraction_conical(r: &Vector3<f64>, sun: &Vector3<f64>) -> f64 {
    let to_sun = sun - r;
    let dsun = to_sun.norm();
    let rmag = r.norm();
    let a = (R_SUN / dsun).asin();
    let b = (R_EARTH / rmag).asin();
    let c = ((-r).dot(&to_sun) / (rmag * dsun)).clamp(-1.0, 1.0).acos();
    if c >= a + b {
        1.0
    } else if c < b - a {
        0.0
    } else if c < a - b {
        1.0 - (b * b) / (a * a)
    } else {
        let x = (c * c + a * a - b * b) / (2.0 * c);
        let y = (a * a - x * x).max(0.0).sqrt();
        let area = a * a * (x / a).clamp(-1.0, 1.0).acos() + b * b * ((c - x) / b).clamp(-1.0, 1.0).acos() - c * y;
        (1.0 - area / (PI * a * a)).clamp(0.0, 1.0)
    }
}

/// Inertial perturbing acceleration (km/s^2), excluding the central term and
/// any process noise.
pub fn perturbing_acceleration(r: &Vector3<f64>, epoch: f64, srp_coeff: f64, cfg: &ForceModelConfig) -> Vector3<f64> {
    let mut acc = Vector3::zeros();
    if cfg.zonal_degree >= 2 {
        acc += zonal_acceleration(r, cfg.zonal_degree);
    }
    let needs_sun = cfg.third_bodies.sun || cfg.srp_enabled;
    let sun = if needs_sun {
        ephemeris::sun_position(epoch)
    } else {
        Vector3::zeros()
    };
    if cfg.third_bodies.sun {
        acc += third_body(r, &sun, MU_SUN);
    }
    if cfg.third_bodies.moon {
        acc += third_body(r, &ephemeris::moon_position(epoch), MU_MOON);
    }
    if cfg.srp_enabled && srp_coeff != 0.0 {
        let from_sun = r - sun;
        let d = from_sun.norm();
        let illum = match cfg.eclipse_model {
            EclipseModel::None => 1.0,
            EclipseModel::Conical => shadow_fraction_conical(r, &sun),
        };
        if illum > 0.0 {
            // B in m^2/kg, pressure in N/m^2 -> m/s^2 -> km/s^2
            let mag = illum * srp_coeff * SOLAR_PRESSURE_1AU * (AU_KM / d).powi(2) * 1e-3;
            acc += from_sun * (mag / d);
        }
    }
    acc
}
