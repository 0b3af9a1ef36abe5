//! Optical sensor geometry and the attributable measurement model.
//!
//! An attributable z = (alpha, delta, alpha_rate, delta_rate) condenses a
//! short track of topocentric angles into a value and a rate at the track's
//! mean epoch. Together with range and range-rate it fixes a full state.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix4, Vector3, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::orbits::{
    earth_rotation_angle, mee_to_cart, perturbed_propagate, wrap_pi, ForceModelConfig, CartesianState, MeeState, EARTH_FLATTENING, EARTH_ROTATION_RATE,
    R_EARTH,
};
use crate::{Result, ShfError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSite {
    pub name: String,
    /// geodetic latitude, rad
    pub latitude: f64,
    pub longitude: f64,
    /// km above the ellipsoid
    pub altitude: f64,
    pub elevation_mask: f64,
    /// per-angle 1-sigma noise, rad
    pub noise_sigma: f64,
}

impl SensorSite {
    pub fn validate(&self) -> Result<()> {
        if !(self.latitude.abs() <= FRAC_PI_2) {
            return Err(ShfError::Config(format!("site {}: latitude out of range", self.name)));
        }
        if !(self.elevation_mask >= 0.0 && self.elevation_mask < FRAC_PI_2) {
            return Err(ShfError::Config(format!("site {}: elevation mask out of range", self.name)));
        }
        if !(self.noise_sigma > 0.0) {
            return Err(ShfError::Config(format!("site {}: noise sigma must be positive", self.name)));
        }
        Ok(())
    }

    /// Earth-fixed position (km) on the WGS-84 ellipsoid.
    pub fn ecef(&self) -> Vector3<f64> {
        let e2 = EARTH_FLATTENING * (2.0 - EARTH_FLATTENING);
        let (sp, cp) = self.latitude.sin_cos();
        let (sl, cl) = self.longitude.sin_cos();
        let n = R_EARTH / (1.0 - e2 * sp * sp).sqrt();
        Vector3::new(
            (n + self.altitude) * cp * cl,
            (n + self.altitude) * cp * sl,
            (n * (1.0 - e2) + self.altitude) * sp,
        )
    }

    /// Inertial position and velocity of the site at `epoch`.
    pub fn inertial(&self, epoch: f64) -> (Vector3<f64>, Vector3<f64>) {
        let theta = earth_rotation_angle(epoch);
        let (s, c) = theta.sin_cos();
        let e = self.ecef();
        let r = Vector3::new(c * e.x - s * e.y, s * e.x + c * e.y, e.z);
        let v = Vector3::new(-EARTH_ROTATION_RATE * r.y, EARTH_ROTATION_RATE * r.x, 0.0);
        (r, v)
    }

    /// Inertial unit vector along the local geodetic vertical.
    pub fn zenith(&self, epoch: f64) -> Vector3<f64> {
        let lon = self.longitude + earth_rotation_angle(epoch);
        let (sp, cp) = self.latitude.sin_cos();
        Vector3::new(cp * lon.cos(), cp * lon.sin(), sp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attributable {
    pub alpha: f64,
    pub delta: f64,
    pub alpha_rate: f64,
    pub delta_rate: f64,
    pub epoch: f64,
    pub site: SensorSite,
    /// ordered (alpha, delta, alpha_rate, delta_rate)
    pub covariance: Matrix4<f64>,
}

impl Attributable {
    pub fn z(&self) -> Vector4<f64> {
        Vector4::new(self.alpha, self.delta, self.alpha_rate, self.delta_rate)
    }

    pub fn with_z(&self, z: &Vector4<f64>) -> Self {
        Self {
            alpha: z[0],
            delta: z[1],
            alpha_rate: z[2],
            delta_rate: z[3],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta.abs() <= FRAC_PI_2) {
            return Err(ShfError::InvalidState("declination outside [-pi/2, pi/2]".into()));
        }
        if (self.covariance - self.covariance.transpose()).abs().max() > 1e-12 * self.covariance.abs().max() {
            return Err(ShfError::InvalidState("attributable covariance is not symmetric".into()));
        }
        if self.covariance.cholesky().is_none() {
            return Err(ShfError::InvalidState("attributable covariance is not positive definite".into()));
        }
        Ok(())
    }

    /// Gaussian likelihood model N(z; h, R) built once per attributable.
    pub fn likelihood(&self) -> Result<MeasurementLikelihood> {
        let chol = self
            .covariance
            .cholesky()
            .ok_or_else(|| ShfError::InvalidState("attributable covariance is not positive definite".into()))?;
        let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        Ok(MeasurementLikelihood {
            z: self.z(),
            r_inv: chol.inverse(),
            log_norm: -0.5 * (log_det + 4.0 * (2.0 * std::f64::consts::PI).ln()),
        })
    }
}

/// Innovation `z - h` with the right-ascension difference wrapped.
pub fn innovation(z: &Vector4<f64>, h: &Vector4<f64>) -> Vector4<f64> {
    let mut r = z - h;
    r[0] = wrap_pi(r[0]);
    r
}

#[derive(Debug, Clone)]
pub struct MeasurementLikelihood {
    pub z: Vector4<f64>,
    pub r_inv: Matrix4<f64>,
    log_norm: f64,
}

impl MeasurementLikelihood {
    /// Squared Mahalanobis distance of a predicted measurement.
    pub fn mahalanobis_sq(&self, h: &Vector4<f64>) -> f64 {
        let r = innovation(&self.z, h);
        (r.transpose() * self.r_inv * r)[(0, 0)]
    }

    pub fn log_pdf(&self, h: &Vector4<f64>) -> f64 {
        self.log_norm - 0.5 * self.mahalanobis_sq(h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub site: SensorSite,
    /// (epoch, alpha, delta)
    pub points: Vec<(f64, f64, f64)>,
}

impl Track {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 3 {
            return Err(ShfError::InsufficientData(format!(
                "track has {} points, need at least 3",
                self.points.len()
            )));
        }
        if self.points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(ShfError::InvalidState("track epochs must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn mean_epoch(&self) -> f64 {
        self.points.iter().map(|p| p.0).sum::<f64>() / self.points.len() as f64
    }
}

/// Unit line-of-sight vector and its time derivative.
pub fn line_of_sight(attr: &Attributable) -> (Vector3<f64>, Vector3<f64>) {
    let (sa, ca) = attr.alpha.sin_cos();
    let (sd, cd) = attr.delta.sin_cos();
    let w = Vector3::new(cd * ca, cd * sa, sd);
    let w_dot = Vector3::new(-cd * sa, cd * ca, 0.0) * attr.alpha_rate
        + Vector3::new(-sd * ca, -sd * sa, cd) * attr.delta_rate;
    (w, w_dot)
}

/// Noise-free attributable of `state` seen from `site` at `epoch`, plus the
/// topocentric range and range-rate.
pub fn measure_with_range(state: &CartesianState, site: &SensorSite, epoch: f64) -> Result<(Attributable, f64, f64)> {
    let (rs, vs) = site.inertial(epoch);
    let rho_vec = state.position - rs;
    let rho_dot_vec = state.velocity - vs;
    let rho = rho_vec.norm();
    if !(rho > 1e-9) {
        return Err(ShfError::DegenerateGeometry("object coincides with the observing site".into()));
    }
    let w = rho_vec / rho;
    let rho_rate = w.dot(&rho_dot_vec);
    let w_dot = (rho_dot_vec - w * rho_rate) / rho;
    let alpha = w.y.atan2(w.x);
    let delta = w.z.clamp(-1.0, 1.0).asin();
    let cxy = w.x * w.x + w.y * w.y;
    let (alpha_rate, delta_rate) = if cxy > 1e-24 {
        ((w.x * w_dot.y - w.y * w_dot.x) / cxy, w_dot.z / cxy.sqrt())
    } else {
        (0.0, 0.0)
    };
    let attr = Attributable {
        alpha,
        delta,
        alpha_rate,
        delta_rate,
        epoch,
        site: site.clone(),
        covariance: Matrix4::identity() * (site.noise_sigma * site.noise_sigma),
    };
    Ok((attr, rho, rho_rate))
}

/// The measurement function h(x); the returned covariance is a placeholder.
pub fn measure(state: &CartesianState, site: &SensorSite, epoch: f64) -> Result<Attributable> {
    measure_with_range(state, site, epoch).map(|(a, _, _)| a)
}

/// h(x) evaluated directly on an MEE state (at the state's own epoch).
pub fn predicted_observables(state: &MeeState, site: &SensorSite) -> Result<Vector4<f64>> {
    let cart = mee_to_cart(state);
    measure(&cart, site, state.epoch).map(|a| a.z())
}

/// Noisy angle-only track of `state` sampled at `epochs` (ascending, all at or
/// after the state's epoch), with per-angle noise of the site's sigma.
pub fn simulate_track<R: Rng + ?Sized>(
    state: &MeeState,
    site: &SensorSite,
    epochs: &[f64],
    cfg: &ForceModelConfig,
    rng: &mut R,
) -> Result<Track> {
    let noise = Normal::new(0.0, site.noise_sigma.max(0.0))
        .map_err(|e| ShfError::Config(format!("site {}: {e}", site.name)))?;
    let cfg = cfg.without_noise();
    let mut current = *state;
    let mut points = Vec::with_capacity(epochs.len());
    for &t in epochs {
        current = perturbed_propagate(&current, t - current.epoch, &cfg, None)?;
        let a = measure(&mee_to_cart(&current), site, t)?;
        points.push((t, wrap_pi(a.alpha + noise.sample(rng)), a.delta + noise.sample(rng)));
    }
    let track = Track {
        site: site.clone(),
        points,
    };
    track.validate()?;
    Ok(track)
}

pub fn state_from_range(attr: &Attributable, rho: f64, rho_rate: f64, srp_coeff: f64) -> CartesianState {
    let (rs, vs) = attr.site.inertial(attr.epoch);
    let (w, w_dot) = line_of_sight(attr);
    CartesianState {
        position: rs + w * rho,
        velocity: vs + w_dot * rho + w * rho_rate,
        srp_coeff,
        epoch: attr.epoch,
    }
}

/// Least-squares attributable from a track using polynomial fits of the given
/// degree (>= 1) in time about the mean epoch.
pub fn attributable_from_track(track: &Track, degree: usize) -> Result<Attributable> {
    track.validate()?;
    let n = track.points.len();
    let degree = degree.max(1);
    if n < degree + 2 {
        return Err(ShfError::InsufficientData(format!(
            "{n} points cannot support a degree-{degree} fit"
        )));
    }
    let t_mean = track.mean_epoch();
    // unwrap right ascension along the track
    let a0 = track.points[0].1;
    let alpha: Vec<f64> = track.points.iter().map(|p| a0 + wrap_pi(p.1 - a0)).collect();
    let delta: Vec<f64> = track.points.iter().map(|p| p.2).collect();
    // scale time to keep the normal matrix well conditioned
    let half_span = 0.5 * (track.points[n - 1].0 - track.points[0].0);
    let x = DMatrix::from_fn(n, degree + 1, |i, j| ((track.points[i].0 - t_mean) / half_span).powi(j as i32));
    let xtx = x.transpose() * &x;
    let xtx_inv = xtx
        .clone()
        .cholesky()
        .ok_or_else(|| ShfError::Numerical("degenerate track timing".into()))?
        .inverse();
    let fit = |y: &[f64]| -> DVector<f64> { &xtx_inv * (x.transpose() * DVector::from_column_slice(y)) };
    let ca = fit(&alpha);
    let cd = fit(&delta);
    let var = track.site.noise_sigma * track.site.noise_sigma;
    let (c00, c01, c11) = (
        var * xtx_inv[(0, 0)],
        var * xtx_inv[(0, 1)] / half_span,
        var * xtx_inv[(1, 1)] / (half_span * half_span),
    );
    let mut cov = Matrix4::zeros();
    cov[(0, 0)] = c00;
    cov[(1, 1)] = c00;
    cov[(2, 2)] = c11;
    cov[(3, 3)] = c11;
    cov[(0, 2)] = c01;
    cov[(2, 0)] = c01;
    cov[(1, 3)] = c01;
    cov[(3, 1)] = c01;
    Ok(Attributable {
        alpha: wrap_pi(ca[0]),
        delta: cd[0],
        alpha_rate: ca[1] / half_span,
        delta_rate: cd[1] / half_span,
        epoch: t_mean,
        site: track.site.clone(),
        covariance: cov,
    })
}

/// Sun elevation above the local horizon at the site.
pub fn sun_elevation(site: &SensorSite, sun_position: &Vector3<f64>, epoch: f64) -> f64 {
    let (rs, _) = site.inertial(epoch);
    let to_sun = (sun_position - rs).normalize();
    to_sun.dot(&site.zenith(epoch)).clamp(-1.0, 1.0).asin()
}

pub fn in_cylindrical_shadow(position: &Vector3<f64>, sun_position: &Vector3<f64>) -> bool {
    let s = sun_position.normalize();
    let along = position.dot(&s);
    along < 0.0 && (position - s * along).norm() < R_EARTH
}

/// Optical visibility: above the elevation mask, phase angle within 90 deg,
/// object sunlit, and the site in astronomical darkness.
pub fn visibility(state: &CartesianState, site: &SensorSite, sun_position: &Vector3<f64>, epoch: f64) -> bool {
    let (rs, _) = site.inertial(epoch);
    let los = state.position - rs;
    let elevation = (los.normalize().dot(&site.zenith(epoch))).clamp(-1.0, 1.0).asin();
    if elevation <= site.elevation_mask {
        return false;
    }
    let to_sun = sun_position - state.position;
    let to_obs = -los;
    let phase = (to_sun.dot(&to_obs) / (to_sun.norm() * to_obs.norm())).clamp(-1.0, 1.0).acos();
    if phase > FRAC_PI_2 {
        return false;
    }
    if in_cylindrical_shadow(&state.position, sun_position) {
        return false;
    }
    sun_elevation(site, sun_position, epoch) < (-10f64).to_radians()
}

const COV_HEADERS: [&str; 16] = [
    "cov_00", "cov_01", "cov_02", "cov_03", "cov_10", "cov_11", "cov_12", "cov_13", "cov_20", "cov_21", "cov_22",
    "cov_23", "cov_30", "cov_31", "cov_32", "cov_33",
];

pub fn write_attributables_csv(path: &Path, attrs: &[Attributable]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec![
        "epoch_s",
        "alpha_rad",
        "delta_rad",
        "alpha_rate_rad_s",
        "delta_rate_rad_s",
        "site",
    ];
    header.extend(COV_HEADERS);
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for a in attrs {
        let mut rec = vec![
            format!("{:.6}", a.epoch),
            format!("{:.15e}", a.alpha),
            format!("{:.15e}", a.delta),
            format!("{:.15e}", a.alpha_rate),
            format!("{:.15e}", a.delta_rate),
            a.site.name.clone(),
        ];
        for i in 0..4 {
            for j in 0..4 {
                rec.push(format!("{:.15e}", a.covariance[(i, j)]));
            }
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| ShfError::io(path, e))
}

/// Reads attributables; covariance columns may be the full row-major 4x4 or
/// the 10-entry upper triangle. Site names are resolved against `sites`.
pub fn read_attributables_csv(path: &Path, sites: &[SensorSite]) -> Result<Vec<Attributable>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let n_cov = headers.iter().filter(|h| h.starts_with("cov_")).count();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| ShfError::Parse(format!("{}: missing column {i}", path.display())))?
                .trim()
                .parse::<f64>()
                .map_err(|e| ShfError::Parse(format!("{}: {e}", path.display())))
        };
        let site_name = rec.get(5).unwrap_or_default();
        let site = sites
            .iter()
            .find(|s| s.name == site_name)
            .ok_or_else(|| ShfError::Parse(format!("unknown site {site_name:?}")))?
            .clone();
        let mut cov = Matrix4::zeros();
        match n_cov {
            16 => {
                for k in 0..16 {
                    cov[(k / 4, k % 4)] = num(6 + k)?;
                }
            }
            10 => {
                let mut k = 6;
                for i in 0..4 {
                    for j in i..4 {
                        cov[(i, j)] = num(k)?;
                        cov[(j, i)] = cov[(i, j)];
                        k += 1;
                    }
                }
            }
            other => return Err(ShfError::Parse(format!("expected 10 or 16 covariance columns, found {other}"))),
        }
        let cov = 0.5 * (cov + cov.transpose());
        out.push(Attributable {
            epoch: num(0)?,
            alpha: num(1)?,
            delta: num(2)?,
            alpha_rate: num(3)?,
            delta_rate: num(4)?,
            site,
            covariance: cov,
        });
    }
    Ok(out)
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> ShfError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => ShfError::io(path, io),
        other => ShfError::Parse(format!("{}: {other:?}", path.display())),
    }
}
