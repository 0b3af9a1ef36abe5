//! Moving-horizon batch least squares: the operational baseline the hybrid
//! filter is benchmarked against.

use nalgebra::{DVector, Matrix4, Matrix6, Vector4, Vector6};

use crate::admissible_region::{x_opt, ControlReference};
use crate::observation::{innovation, predicted_observables, state_from_range, Attributable};
use crate::optim::levenberg_marquardt;
use crate::orbits::{cart_to_mee_near, perturbed_propagate, ForceModelConfig, MeeState};
use crate::{Result, ShfError};

pub const MAX_WINDOW: usize = 6;
/// One m/s of control distance weighs like a 1-sigma residual.
pub const DEFAULT_C_P: f64 = 1.0e6;

const GN_STEP_TOL: f64 = 1e-4;
const GN_MAX_ITER: usize = 25;

/// Attributables with their whitening factors, ordered by epoch.
#[derive(Debug, Clone)]
pub struct TrackSet {
    attrs: Vec<Attributable>,
    whiten: Vec<Matrix4<f64>>,
}

impl TrackSet {
    pub fn new(attrs: &[Attributable]) -> Result<Self> {
        let mut attrs = attrs.to_vec();
        attrs.sort_by(|a, b| a.epoch.total_cmp(&b.epoch));
        let whiten = attrs
            .iter()
            .map(|a| {
                a.covariance
                    .cholesky()
                    .map(|c| c.l().try_inverse().expect("triangular factor of an SPD matrix is invertible"))
                    .ok_or_else(|| ShfError::InvalidState("attributable covariance is not positive definite".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { attrs, whiten })
    }

    pub fn attrs(&self) -> &[Attributable] {
        &self.attrs
    }

    pub fn len(&self) -> usize {
        self.attrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attrs.is_empty()
    }

    /// Whitened residuals L^-1 (z - h(x(t_j))) for every track, stacked; the
    /// state is propagated forward through the epochs in order.
    pub fn residuals(&self, state: &MeeState, cfg: &ForceModelConfig) -> Option<DVector<f64>> {
        let mut out = DVector::zeros(4 * self.attrs.len());
        let mut s = *state;
        for (j, (a, w)) in self.attrs.iter().zip(&self.whiten).enumerate() {
            s = perturbed_propagate(&s, a.epoch - s.epoch, cfg, None).ok()?;
            let h = predicted_observables(&s, &a.site).ok()?;
            let r = w * innovation(&a.z(), &h);
            out.rows_mut(4 * j, 4).copy_from(&r);
        }
        out.iter().all(|v| v.is_finite()).then_some(out)
    }

    /// Per-track d'^2 of a state.
    pub fn chi2_each(&self, state: &MeeState, cfg: &ForceModelConfig) -> Option<Vec<f64>> {
        let r = self.residuals(state, cfg)?;
        Some((0..self.len()).map(|j| r.rows(4 * j, 4).norm_squared()).collect())
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    /// estimate at the epoch of the earliest track in the window
    pub state: MeeState,
    /// (J^T R^-1 J)^-1 over the six MEE
    pub covariance: Matrix6<f64>,
    /// sum of d'^2 over the window (without any control penalty)
    pub chi2: f64,
    pub n_tracks: usize,
    pub iterations: usize,
    pub converged: bool,
}

fn mee_steps(state: &MeeState) -> Vector6<f64> {
    Vector6::new(1e-7 * state.p, 1e-7, 1e-7, 1e-7, 1e-7, 1e-7)
}

/// Batch least squares over a window of tracks, solving for the six MEE at
/// the earliest track epoch with B held at the guess value.
pub fn fit_window(window: &[Attributable], guess: &MeeState, cfg: &ForceModelConfig) -> Result<FitReport> {
    if window.len() < 2 {
        return Err(ShfError::InsufficientData(format!(
            "a window fit needs at least 2 tracks, got {}",
            window.len()
        )));
    }
    let tracks = TrackSet::new(window)?;
    let cfg = cfg.without_noise();
    let t0 = tracks.attrs()[0].epoch;
    let start = perturbed_propagate(guess, t0 - guess.epoch, &cfg, None)?;
    let b = start.srp_coeff;
    let f = |x: &Vector6<f64>| tracks.residuals(&MeeState::from_vector(x, b, t0), &cfg);
    let fit = levenberg_marquardt(f, start.elements(), mee_steps(&start), GN_STEP_TOL, GN_MAX_ITER)
        .ok_or_else(|| ShfError::Numerical("window residuals undefined at the initial guess".into()))?;
    let covariance = fit.jtj.try_inverse().ok_or(ShfError::RankDeficient)?;
    if covariance.diagonal().iter().any(|v| !(*v > 0.0)) {
        return Err(ShfError::RankDeficient);
    }
    Ok(FitReport {
        state: MeeState::from_vector(&fit.x, b, t0),
        covariance,
        chi2: 2.0 * fit.cost,
        n_tracks: tracks.len(),
        iterations: fit.iterations,
        converged: fit.converged,
    })
}

/// Post-maneuver estimate from the tracks after a detection: measurement loss
/// plus `c_p`·P² to the pre-maneuver orbit. Solved in (observables, rho,
/// rho_rate) at the first post track; a single track gives x_opt.
pub fn post_maneuver_fit(
    pre_orbit: &MeeState,
    post_tracks: &[Attributable],
    c_p: f64,
    cfg: &ForceModelConfig,
) -> Result<FitReport> {
    post_fit_from(pre_orbit, post_tracks, c_p, cfg, None).map(|r| r.0)
}

/// `start` replaces the x_opt search with a known (observables, rho,
/// rho_rate) point, typically the previous solution for the same first track.
fn post_fit_from(
    pre_orbit: &MeeState,
    post_tracks: &[Attributable],
    c_p: f64,
    cfg: &ForceModelConfig,
    start: Option<Vector6<f64>>,
) -> Result<(FitReport, Vector6<f64>)> {
    if post_tracks.is_empty() {
        return Err(ShfError::InsufficientData("no post-maneuver tracks".into()));
    }
    if !(c_p >= 0.0) {
        return Err(ShfError::Config(format!("c_P must be nonnegative, got {c_p}")));
    }
    let tracks = TrackSet::new(post_tracks)?;
    let cfg = cfg.without_noise();
    let first = tracks.attrs()[0].clone();
    let reference = ControlReference::new(pre_orbit, first.epoch, &cfg)?;
    let x0 = match start {
        Some(x) => x,
        None => {
            let ballistic_range = crate::observation::measure_with_range(
                &crate::orbits::mee_to_cart(&reference.ballistic),
                &first.site,
                first.epoch,
            )?;
            let opt = x_opt(&reference, &first, None, (ballistic_range.1, ballistic_range.2))?;
            Vector6::new(first.alpha, first.delta, first.alpha_rate, first.delta_rate, opt.rho, opt.rho_rate)
        }
    };
    let b = pre_orbit.srp_coeff;
    let materialize = |x: &Vector6<f64>| -> Option<MeeState> {
        let attr = first.with_z(&Vector4::new(x[0], x[1], x[2], x[3]));
        cart_to_mee_near(&state_from_range(&attr, x[4], x[5], b), reference.ballistic.l).ok()
    };
    if tracks.len() == 1 {
        let state = materialize(&x0).ok_or_else(|| ShfError::Numerical("x_opt is not a valid orbit".into()))?;
        let report = FitReport {
            state,
            covariance: Matrix6::from_diagonal_element(f64::INFINITY),
            chi2: 0.0,
            n_tracks: 1,
            iterations: 0,
            converged: true,
        };
        return Ok((report, x0));
    }
    let sqrt_cp = c_p.sqrt();
    let f = |x: &Vector6<f64>| -> Option<DVector<f64>> {
        let state = materialize(x)?;
        let r = tracks.residuals(&state, &cfg)?;
        if sqrt_cp == 0.0 {
            return Some(r);
        }
        let attr = first.with_z(&Vector4::new(x[0], x[1], x[2], x[3]));
        let p = reference.distance_at(&attr, x[4], x[5]);
        p.is_finite().then(|| r.push(sqrt_cp * p))
    };
    let sigma = first.covariance.diagonal().map(f64::sqrt);
    let h = Vector6::new(1e-3 * sigma[0], 1e-3 * sigma[1], 1e-3 * sigma[2], 1e-3 * sigma[3], 1e-4, 1e-8);
    let fit = levenberg_marquardt(f, x0, h, GN_STEP_TOL, GN_MAX_ITER)
        .ok_or_else(|| ShfError::Numerical("post-maneuver residuals undefined at x_opt".into()))?;
    let state = materialize(&fit.x).ok_or_else(|| ShfError::Numerical("fitted state is not a valid orbit".into()))?;
    let chi2 = tracks.residuals(&state, &cfg).map(|r| r.norm_squared()).unwrap_or(f64::INFINITY);
    // covariance in MEE from the measurement part alone
    let mee_cov = fit_covariance_mee(&tracks, &state, &cfg).unwrap_or(Matrix6::from_diagonal_element(f64::INFINITY));
    let report = FitReport {
        state,
        covariance: mee_cov,
        chi2,
        n_tracks: tracks.len(),
        iterations: fit.iterations,
        converged: fit.converged,
    };
    Ok((report, fit.x))
}

fn fit_covariance_mee(tracks: &TrackSet, state: &MeeState, cfg: &ForceModelConfig) -> Option<Matrix6<f64>> {
    let b = state.srp_coeff;
    let t0 = state.epoch;
    let f = |x: &Vector6<f64>| tracks.residuals(&MeeState::from_vector(x, b, t0), cfg);
    let j = crate::optim::jacobian(&f, &state.elements(), &mee_steps(state))?;
    let jtj = j.transpose() * &j;
    Matrix6::from_iterator(jtj.iter().copied()).try_inverse()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MheVariant {
    /// detection by gating and the admissible region
    Detecting,
    /// windows reset at injected truth maneuver epochs
    TruthEpochs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MheOutcome {
    Associated,
    ManeuverDetected,
    Uncorrelated,
}

#[derive(Debug, Clone)]
pub struct MheTrackReport {
    pub track_index: usize,
    pub epoch: f64,
    pub d2: f64,
    pub outcome: MheOutcome,
    /// estimate at the track epoch after processing
    pub estimate: Option<MeeState>,
    pub covariance: Option<Matrix6<f64>>,
}

/// Sliding-window estimator over a track stream.
#[derive(Debug, Clone)]
pub struct MheSession {
    pub variant: MheVariant,
    pub cfg: ForceModelConfig,
    pub gate: f64,
    pub c_p: f64,
    pub thresholds: crate::admissible_region::RegionThresholds,
    window: Vec<Attributable>,
    estimate: MeeState,
    covariance: Matrix6<f64>,
    pre_orbit: Option<MeeState>,
    /// last post-maneuver solution, reused as the next starting point
    post_x: Option<Vector6<f64>>,
    next_index: usize,
}

impl MheSession {
    /// Starts from an orbit determined beforehand (at any epoch).
    pub fn new(
        variant: MheVariant,
        initial: MeeState,
        covariance: Matrix6<f64>,
        cfg: &ForceModelConfig,
        gate: f64,
        thresholds: crate::admissible_region::RegionThresholds,
    ) -> Self {
        Self {
            variant,
            cfg: cfg.without_noise(),
            gate,
            c_p: DEFAULT_C_P,
            thresholds,
            window: Vec::new(),
            estimate: initial,
            covariance,
            pre_orbit: None,
            post_x: None,
            next_index: 0,
        }
    }

    /// Seeds the window with the tracks behind the initial estimate (the
    /// latest `MAX_WINDOW` are kept).
    pub fn with_window(mut self, tracks: &[Attributable]) -> Self {
        let skip = tracks.len().saturating_sub(MAX_WINDOW);
        self.window = tracks[skip..].to_vec();
        self
    }

    pub fn estimate(&self) -> (&MeeState, &Matrix6<f64>) {
        (&self.estimate, &self.covariance)
    }

    fn refit(&mut self) -> Result<()> {
        let report = match &self.pre_orbit {
            Some(pre) => {
                let (report, x) = post_fit_from(pre, &self.window, self.c_p, &self.cfg, self.post_x)?;
                self.post_x = Some(x);
                report
            }
            None if self.window.len() >= 2 => fit_window(&self.window, &self.estimate, &self.cfg)?,
            None => return Ok(()),
        };
        self.estimate = report.state;
        if report.covariance.iter().all(|v| v.is_finite()) {
            self.covariance = report.covariance;
        }
        Ok(())
    }

    /// d'^2 of the prediction, weighted by R plus the estimate's own
    /// uncertainty mapped into the observables (R alone when that is unknown).
    fn predicted_d2(&self, attr: &Attributable) -> Result<f64> {
        let predict = |x: &MeeState| -> Result<Vector4<f64>> {
            let s = perturbed_propagate(x, attr.epoch - x.epoch, &self.cfg, None)?;
            predicted_observables(&s, &attr.site)
        };
        let h = predict(&self.estimate)?;
        let r = innovation(&attr.z(), &h);
        let mut s_mat = attr.covariance;
        if self.covariance.iter().all(|v| v.is_finite()) {
            let steps = mee_steps(&self.estimate);
            let mut jac = nalgebra::Matrix4x6::zeros();
            for i in 0..6 {
                let mut up = self.estimate.elements();
                let mut down = up;
                up[i] += steps[i];
                down[i] -= steps[i];
                let hu = predict(&MeeState::from_vector(&up, self.estimate.srp_coeff, self.estimate.epoch))?;
                let hd = predict(&MeeState::from_vector(&down, self.estimate.srp_coeff, self.estimate.epoch))?;
                jac.set_column(i, &(innovation(&hu, &hd) / (2.0 * steps[i])));
            }
            s_mat += jac * self.covariance * jac.transpose();
        }
        let chol = s_mat
            .cholesky()
            .ok_or_else(|| ShfError::Numerical("innovation covariance is not positive definite".into()))?;
        Ok(r.dot(&chol.solve(&r)))
    }

    fn post_fit_consistent(&self, pre: &MeeState, attr: &Attributable) -> bool {
        let mut trial = self.window.clone();
        trial.push(attr.clone());
        let Ok((fit, _)) = post_fit_from(pre, &trial, self.c_p, &self.cfg, self.post_x) else {
            return false;
        };
        let Ok(tracks) = TrackSet::new(&trial) else { return false };
        tracks
            .chi2_each(&fit.state, &self.cfg)
            .is_some_and(|d| d.iter().all(|v| *v <= self.gate))
    }

    /// The pre-maneuver orbit is taken at the last associated track, so the
    /// transfer spans the whole gap to the new one.
    fn start_maneuver(&mut self, attr: &Attributable) -> Result<()> {
        let last = self.window.last().map_or(self.estimate.epoch, |a| a.epoch);
        let pre = perturbed_propagate(&self.estimate, last - self.estimate.epoch, &self.cfg, None)?;
        self.pre_orbit = Some(pre);
        self.post_x = None;
        self.window = vec![attr.clone()];
        self.refit()
    }

    /// `maneuver_before` is only consulted by the truth-epoch variant: true
    /// when a truth maneuver happened since the previous track.
    pub fn process_track(&mut self, attr: &Attributable, maneuver_before: bool) -> Result<MheTrackReport> {
        let track_index = self.next_index;
        self.next_index += 1;
        let d2 = self.predicted_d2(attr)?;
        let outcome = match self.variant {
            MheVariant::TruthEpochs if maneuver_before => {
                self.start_maneuver(attr)?;
                MheOutcome::ManeuverDetected
            }
            MheVariant::TruthEpochs => {
                self.associate(attr)?;
                MheOutcome::Associated
            }
            MheVariant::Detecting => {
                let young = self.pre_orbit.is_some() && self.window.len() < 3;
                let associated = if d2 <= self.gate {
                    true
                } else if young {
                    let pre = self.pre_orbit.expect("young windows follow a detection");
                    self.post_fit_consistent(&pre, attr)
                } else {
                    false
                };
                if associated {
                    self.associate(attr)?;
                    MheOutcome::Associated
                } else {
                    let reference = ControlReference::new(&self.estimate, attr.epoch, &self.cfg)?;
                    match crate::admissible_region::build_region(&reference, attr, &self.thresholds) {
                        Ok(_) => {
                            self.start_maneuver(attr)?;
                            MheOutcome::ManeuverDetected
                        }
                        Err(ShfError::Domain(_))
                        | Err(ShfError::CentroidFailure(_))
                        | Err(ShfError::Numerical(_))
                        | Err(ShfError::DegenerateGeometry(_))
                        | Err(ShfError::NonElliptic { .. }) => MheOutcome::Uncorrelated,
                        Err(e) => return Err(e),
                    }
                }
            }
        };
        let (estimate, covariance) = if outcome == MheOutcome::Uncorrelated {
            (None, None)
        } else {
            let s = perturbed_propagate(&self.estimate, attr.epoch - self.estimate.epoch, &self.cfg, None)?;
            (Some(s), Some(self.covariance))
        };
        Ok(MheTrackReport {
            track_index,
            epoch: attr.epoch,
            d2,
            outcome,
            estimate,
            covariance,
        })
    }

    fn associate(&mut self, attr: &Attributable) -> Result<()> {
        self.window.push(attr.clone());
        if self.window.len() > MAX_WINDOW {
            self.window.remove(0);
            // the window no longer starts at the first post-maneuver track
            self.pre_orbit = None;
            self.post_x = None;
        }
        match self.refit() {
            Ok(()) => Ok(()),
            Err(ShfError::RankDeficient) | Err(ShfError::Numerical(_)) => Ok(()),
            Err(e) => Err(e),
        }
    }
}
