//! Patterns of life: a Gaussian-mixture density over past maneuvers in
//! (delta a, delta e, delta i).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::orbits::MeeState;
use crate::{Result, ShfError};

/// Osculating (a, e, i) of `post` minus those of `pre`.
pub fn xi_between(pre: &MeeState, post: &MeeState) -> Vector3<f64> {
    Vector3::new(
        post.semi_major_axis() - pre.semi_major_axis(),
        post.eccentricity() - pre.eccentricity(),
        post.inclination() - pre.inclination(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManeuverRecord {
    /// (delta a km, delta e, delta i rad)
    pub xi_mean: Vector3<f64>,
    pub xi_cov: Matrix3<f64>,
    /// pre-maneuver geographic longitude and inclination, rad
    pub lon_pre: f64,
    pub inc_pre: f64,
    pub detection_epoch: f64,
    pub first_track_index: usize,
    /// the covariance needed the eigenvalue floor
    pub floored: bool,
}

impl ManeuverRecord {
    pub fn validate(&self) -> Result<()> {
        if self.xi_cov.cholesky().is_none() {
            return Err(ShfError::InvalidState("maneuver covariance is not positive definite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Component {
    mean: Vector3<f64>,
    inv: Matrix3<f64>,
    log_norm: f64,
}

/// Equal-weight mixture of N(xi_j, Xi_j) over the stored records.
#[derive(Debug, Clone, Default)]
pub struct HeuristicKde {
    records: Vec<ManeuverRecord>,
    components: Vec<Component>,
}

impl HeuristicKde {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: ManeuverRecord) -> Result<()> {
        let chol = record
            .xi_cov
            .cholesky()
            .ok_or_else(|| ShfError::InvalidState("maneuver covariance is not positive definite".into()))?;
        let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        self.components.push(Component {
            mean: record.xi_mean,
            inv: chol.inverse(),
            log_norm: -0.5 * (3.0 * (2.0 * std::f64::consts::PI).ln() + log_det),
        });
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[ManeuverRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// log M(xi), accumulated with log-sum-exp.
    pub fn log_density(&self, xi: &Vector3<f64>) -> Result<f64> {
        if self.components.is_empty() {
            return Err(ShfError::Config("heuristic KDE has no maneuver records".into()));
        }
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let d = xi - c.mean;
                c.log_norm - 0.5 * (d.transpose() * c.inv * d)[(0, 0)]
            })
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Ok(f64::NEG_INFINITY);
        }
        let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
        Ok(max + (sum / terms.len() as f64).ln())
    }

    /// Upper bound of log M: the largest component peak.
    pub fn log_peak_bound(&self) -> f64 {
        self.components.iter().map(|c| c.log_norm).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn density(&self, xi: &Vector3<f64>) -> Result<f64> {
        self.log_density(xi).map(f64::exp)
    }
}
