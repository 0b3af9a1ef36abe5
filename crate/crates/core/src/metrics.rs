//! Evaluation: estimation error grouped by tracks since the last maneuver,
//! the posterior Cramér–Rao bound, and d² consistency statistics.

use std::path::Path;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::filters::stream_rng;
use crate::observation::{csv_err, innovation, predicted_observables, Attributable};
use crate::orbits::{apply_impulse, cart_to_mee_near, mee_to_cart, perturbed_propagate, sensitivity_matrix, wrap_pi, ForceModelConfig, MeeState};
use crate::{Result, ShfError};

pub type Matrix7 = SMatrix<f64, 7, 7>;
pub type Vector7 = SVector<f64, 7>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub n_tracks: usize,
    pub pos_rmse_km: f64,
    pub vel_rmse_km_s: f64,
    pub count: usize,
}

/// RMSE of the estimates grouped by the number of tracks since the most
/// recent maneuver (the first post-maneuver track has n_T = 1). Estimates
/// before the first maneuver are not counted.
pub fn rmse_by_elapsed_tracks(estimates: &[MeeState], truths: &[MeeState], maneuver_epochs: &[f64]) -> Result<Vec<RmseRow>> {
    if estimates.len() != truths.len() {
        return Err(ShfError::Domain(format!("{} estimates against {} truths", estimates.len(), truths.len())));
    }
    let mut groups: Vec<(f64, f64, usize)> = Vec::new();
    for (k, (est, truth)) in estimates.iter().zip(truths).enumerate() {
        if (est.epoch - truth.epoch).abs() > 1e-6 {
            return Err(ShfError::Domain(format!("estimate {k} at {} but truth at {}", est.epoch, truth.epoch)));
        }
        let Some(last) = maneuver_epochs.iter().copied().filter(|m| *m < est.epoch).reduce(f64::max) else {
            continue;
        };
        let n_t = estimates[..=k].iter().filter(|e| e.epoch > last).count();
        let (a, b) = (mee_to_cart(est), mee_to_cart(truth));
        if groups.len() < n_t {
            groups.resize(n_t, (0.0, 0.0, 0));
        }
        let g = &mut groups[n_t - 1];
        g.0 += (a.position - b.position).norm_squared();
        g.1 += (a.velocity - b.velocity).norm_squared();
        g.2 += 1;
    }
    Ok(groups
        .into_iter()
        .enumerate()
        .filter(|(_, g)| g.2 > 0)
        .map(|(i, (p, v, n))| RmseRow {
            n_tracks: i + 1,
            pos_rmse_km: (p / n as f64).sqrt(),
            vel_rmse_km_s: (v / n as f64).sqrt(),
            count: n,
        })
        .collect())
}

/// (x - x̂)ᵀ C (x - x̂). With six or more components the sixth is the true
/// longitude and its difference is wrapped to the nearest branch.
pub fn d2<const N: usize>(estimate: &SVector<f64, N>, truth: &SVector<f64, N>, c: &SMatrix<f64, N, N>) -> f64 {
    let mut d = truth - estimate;
    if N >= 6 {
        d[5] = wrap_pi(d[5]);
    }
    (d.transpose() * c * d)[(0, 0)]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Chi2Consistency {
    pub ks_statistic: f64,
    pub p_value: f64,
    /// third central moment over the reference variance^(3/2), minus the
    /// chi-square skewness sqrt(8/dof)
    pub skewness_excess: f64,
    pub n: usize,
}

/// Asymptotic Kolmogorov p-value of a one-sample statistic `d` over `n`
/// points, with Stephens' finite-n correction.
pub fn kolmogorov_p(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut q = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        q += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    q.clamp(0.0, 1.0)
}

pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut u: Vec<f64> = samples.iter().map(|x| cdf(*x)).collect();
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    u.iter()
        .enumerate()
        .map(|(i, v)| ((i + 1) as f64 / n - v).max(v - i as f64 / n))
        .fold(0.0, f64::max)
}

pub fn chi2_consistency(samples: &[f64], dof: f64) -> Result<Chi2Consistency> {
    if samples.len() < 30 {
        return Err(ShfError::InsufficientData(format!("{} d2 samples, need at least 30", samples.len())));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(ShfError::Domain("non-finite d2 sample".into()));
    }
    let chi2 = ChiSquared::new(dof).map_err(|e| ShfError::Config(format!("chi-square dof {dof}: {e}")))?;
    let ks = ks_statistic(samples, |x| chi2.cdf(x));
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let m3 = samples.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    Ok(Chi2Consistency {
        ks_statistic: ks,
        p_value: kolmogorov_p(ks, samples.len()),
        // standardized by the reference spread, not the sample's, so an
        // over-dispersed (optimistic) d2 shows up as excess skew
        skewness_excess: m3 / (2.0 * dof).powf(1.5) - (8.0 / dof).sqrt(),
        n: samples.len(),
    })
}

/// One interval of the information recursion.
#[derive(Debug, Clone)]
pub struct PcrbStep<const N: usize> {
    /// transition Jacobians at the Monte Carlo truth draws
    pub transitions: Vec<SMatrix<f64, N, N>>,
    /// process-noise covariance over the interval; `None` when deterministic
    pub q: Option<SMatrix<f64, N, N>>,
    /// E[Hᵀ R⁻¹ H] at the end of the interval, zero without a measurement
    pub measurement_info: SMatrix<f64, N, N>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcrbState<const N: usize> {
    pub j: SMatrix<f64, N, N>,
    pub epoch: f64,
    /// ‖J − Jᵀ‖ before symmetrization
    pub asymmetry: f64,
    /// an inverse needed the ridge
    pub regularized: bool,
}

const PCRB_RIDGE: f64 = 1e-12;

fn spd_inverse<const N: usize>(m: &SMatrix<f64, N, N>) -> Option<(SMatrix<f64, N, N>, bool)> {
    if let Some(c) = m.cholesky() {
        return Some((c.inverse(), false));
    }
    let scale = m.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    (m + SMatrix::<f64, N, N>::identity() * (PCRB_RIDGE * scale)).cholesky().map(|c| (c.inverse(), true))
}

fn mean_of<const N: usize>(ms: &[SMatrix<f64, N, N>]) -> SMatrix<f64, N, N> {
    ms.iter().sum::<SMatrix<f64, N, N>>() / ms.len() as f64
}

/// J_{k+1} from J_k. With an invertible Q this is the D-term recursion
/// J' = D²² − D²¹(J + D¹¹)⁻¹D¹²; with singular or no process noise the
/// limit form J' = (F̄ J⁻¹ F̄ᵀ + Q)⁻¹ + E[Hᵀ R⁻¹ H] is used.
pub fn pcrb_step<const N: usize>(j: &SMatrix<f64, N, N>, step: &PcrbStep<N>) -> Result<(SMatrix<f64, N, N>, f64, bool)> {
    if step.transitions.is_empty() {
        return Err(ShfError::InsufficientData("PCRB step without transition samples".into()));
    }
    let q_inv = step.q.as_ref().and_then(|q| q.cholesky()).map(|c| c.inverse());
    let (next, regularized) = match q_inv {
        Some(qi) => {
            let d11 = mean_of(&step.transitions.iter().map(|f| f.transpose() * qi * f).collect::<Vec<_>>());
            let d12 = -mean_of(&step.transitions).transpose() * qi;
            let d22 = qi + step.measurement_info;
            let (a_inv, reg) = spd_inverse(&(j + d11))
                .ok_or_else(|| ShfError::Numerical("J + D11 is not invertible even with a ridge".into()))?;
            (d22 - d12.transpose() * a_inv * d12, reg)
        }
        None => {
            let (p, reg1) = spd_inverse(j).ok_or_else(|| ShfError::Numerical("information matrix is not invertible".into()))?;
            let f = mean_of(&step.transitions);
            let mut pred = f * p * f.transpose();
            if let Some(q) = &step.q {
                pred += q;
            }
            let pred = (pred + pred.transpose()) * 0.5;
            let (info, reg2) = spd_inverse(&pred).ok_or_else(|| ShfError::Numerical("predicted covariance is not invertible".into()))?;
            (info + step.measurement_info, reg1 || reg2)
        }
    };
    let asymmetry = (next - next.transpose()).norm();
    Ok(((next + next.transpose()) * 0.5, asymmetry, regularized))
}

pub fn pcrb_recursion<const N: usize>(j0: &SMatrix<f64, N, N>, steps: &[(f64, PcrbStep<N>)]) -> Result<Vec<PcrbState<N>>> {
    let mut j = *j0;
    let mut out = Vec::with_capacity(steps.len());
    for (epoch, step) in steps {
        let (next, asymmetry, regularized) = pcrb_step(&j, step)?;
        j = next;
        out.push(PcrbState {
            j,
            epoch: *epoch,
            asymmetry,
            regularized,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcrbConfig {
    pub n_mc: usize,
    /// relative finite-difference step of the transition Jacobian
    pub fd_rel_step: f64,
    pub seed: u64,
}

impl Default for PcrbConfig {
    fn default() -> Self {
        Self {
            n_mc: 500,
            fd_rel_step: 1e-7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcrbPoint {
    pub epoch: f64,
    pub j: Matrix7,
    pub sigma_pos_km: f64,
    pub sigma_vel_km_s: f64,
    pub regularized: bool,
}

/// An impulsive maneuver of the truth: epoch and RTN delta-v (km/s).
pub type Impulse = (f64, Vector3<f64>);

/// Propagates `x` to `t`, applying the impulses dated in (x.epoch, t].
pub fn flow(x: &MeeState, t: f64, impulses: &[Impulse], force: &ForceModelConfig) -> Result<MeeState> {
    let mut s = *x;
    for (te, dv) in impulses.iter().filter(|(te, _)| *te > x.epoch && *te <= t) {
        s = perturbed_propagate(&s, te - s.epoch, force, None)?;
        s = cart_to_mee_near(&apply_impulse(&mee_to_cart(&s), dv), s.l)?;
    }
    perturbed_propagate(&s, t - s.epoch, force, None)
}

fn fd_steps(x: &Vector7, rel: f64) -> Vector7 {
    // floors: 1 km in p, unit for the dimensionless elements and L, and a
    // larger floor for B whose effect over a day is tiny
    let floor = Vector7::from([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1e3]);
    Vector7::from_fn(|i, _| rel * x[i].abs().max(floor[i]))
}

fn transition_jacobian(x: &MeeState, t: f64, impulses: &[Impulse], force: &ForceModelConfig, rel: f64) -> Result<Matrix7> {
    let v = x.to_vector7();
    let h = fd_steps(&v, rel);
    let mut jac = Matrix7::zeros();
    for i in 0..7 {
        let mut plus = v;
        let mut minus = v;
        plus[i] += h[i];
        minus[i] -= h[i];
        let a = flow(&MeeState::from_vector7(&plus, x.epoch), t, impulses, force)?.to_vector7();
        let b = flow(&MeeState::from_vector7(&minus, x.epoch), t, impulses, force)?.to_vector7();
        jac.set_column(i, &((a - b) / (2.0 * h[i])));
    }
    Ok(jac)
}

fn measurement_jacobian(x: &MeeState, attr: &Attributable) -> Result<SMatrix<f64, 4, 7>> {
    let v = x.to_vector7();
    let h = fd_steps(&v, 1e-7);
    let mut jac = SMatrix::<f64, 4, 7>::zeros();
    for i in 0..6 {
        let mut plus = v;
        let mut minus = v;
        plus[i] += h[i];
        minus[i] -= h[i];
        let a = predicted_observables(&MeeState::from_vector7(&plus, x.epoch), &attr.site)?;
        let b = predicted_observables(&MeeState::from_vector7(&minus, x.epoch), &attr.site)?;
        jac.set_column(i, &(innovation(&a, &b) / (2.0 * h[i])));
    }
    Ok(jac)
}

/// Position and velocity sigma (root of the trace of each 3×3 block) of a
/// 7-D MEE covariance, linearized at `x`.
pub fn cartesian_sigmas(x: &MeeState, cov: &Matrix7) -> (f64, f64) {
    let v = x.to_vector7();
    let h = fd_steps(&v, 1e-7);
    let mut g = SMatrix::<f64, 6, 7>::zeros();
    for i in 0..6 {
        let mut plus = v;
        let mut minus = v;
        plus[i] += h[i];
        minus[i] -= h[i];
        let a = mee_to_cart(&MeeState::from_vector7(&plus, x.epoch));
        let b = mee_to_cart(&MeeState::from_vector7(&minus, x.epoch));
        let mut col = SVector::<f64, 6>::zeros();
        col.fixed_rows_mut::<3>(0).copy_from(&((a.position - b.position) / (2.0 * h[i])));
        col.fixed_rows_mut::<3>(3).copy_from(&((a.velocity - b.velocity) / (2.0 * h[i])));
        g.set_column(i, &col);
    }
    let c = g * cov * g.transpose();
    let pos = (c[(0, 0)] + c[(1, 1)] + c[(2, 2)]).max(0.0).sqrt();
    let vel = (c[(3, 3)] + c[(4, 4)] + c[(5, 5)]).max(0.0).sqrt();
    (pos, vel)
}

fn padded(m: &nalgebra::Matrix6<f64>) -> Matrix7 {
    let mut out = Matrix7::zeros();
    out.fixed_view_mut::<6, 6>(0, 0).copy_from(m);
    out
}

/// Bound on (MEE, B) at every track epoch for a truth starting from
/// N(initial, initial_cov). Truth draws follow the noise-free flow with the
/// scheduled impulses; an interval containing an impulse gets the process
/// noise of a delta-v with covariance `dv_cov` (RTN) at that burn.
pub fn orbit_pcrb(
    initial: &MeeState,
    initial_cov: &Matrix7,
    tracks: &[Attributable],
    impulses: &[Impulse],
    dv_cov: &Matrix3<f64>,
    force: &ForceModelConfig,
    cfg: &PcrbConfig,
) -> Result<Vec<PcrbPoint>> {
    if cfg.n_mc < 100 {
        return Err(ShfError::Config(format!("PCRB needs at least 100 Monte Carlo draws, got {}", cfg.n_mc)));
    }
    let force = force.without_noise();
    let root = initial_cov
        .cholesky()
        .ok_or_else(|| ShfError::Config("initial PCRB covariance is not positive definite".into()))?
        .l();
    let mut draws: Vec<MeeState> = (0..cfg.n_mc)
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, 0, i as u64);
            let n = Vector7::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            MeeState::from_vector7(&(initial.to_vector7() + root * n), initial.epoch)
        })
        .collect();
    let mut nominal = *initial;
    let mut j = initial_cov
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| ShfError::Numerical("initial covariance is not invertible".into()))?;
    let mut out = Vec::with_capacity(tracks.len());
    for attr in tracks {
        let t = attr.epoch;
        let r_inv = attr
            .covariance
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| ShfError::Numerical("attributable covariance is not invertible".into()))?;
        let per_draw: Vec<Result<(MeeState, Matrix7, Matrix7)>> = draws
            .par_iter()
            .map(|x| {
                let f = transition_jacobian(x, t, impulses, &force, cfg.fd_rel_step)?;
                let next = flow(x, t, impulses, &force)?;
                let hj = measurement_jacobian(&next, attr)?;
                Ok((next, f, hj.transpose() * r_inv * hj))
            })
            .collect();
        let per_draw = per_draw.into_iter().collect::<Result<Vec<_>>>()?;
        let burns: Vec<Impulse> = impulses.iter().copied().filter(|(te, _)| *te > nominal.epoch && *te <= t).collect();
        let q = if burns.is_empty() {
            None
        } else {
            let mut q = Matrix7::zeros();
            for (te, _) in &burns {
                let at = flow(&nominal, *te, impulses, &force)?;
                let g = sensitivity_matrix(&at);
                let after = padded(&(g * dv_cov * g.transpose()));
                let phi = transition_jacobian(&at, t, impulses, &force, cfg.fd_rel_step)?;
                q += phi * after * phi.transpose();
            }
            Some(q)
        };
        let step = PcrbStep {
            transitions: per_draw.iter().map(|d| d.1).collect(),
            q,
            measurement_info: mean_of(&per_draw.iter().map(|d| d.2).collect::<Vec<_>>()),
        };
        let (next, _, regularized) = pcrb_step(&j, &step)?;
        j = next;
        draws = per_draw.into_iter().map(|d| d.0).collect();
        nominal = flow(&nominal, t, impulses, &force)?;
        let (cov, _) = spd_inverse(&j).ok_or_else(|| ShfError::Numerical("information matrix is not invertible".into()))?;
        let (sigma_pos_km, sigma_vel_km_s) = cartesian_sigmas(&nominal, &cov);
        out.push(PcrbPoint {
            epoch: t,
            j,
            sigma_pos_km,
            sigma_vel_km_s,
            regularized,
        });
    }
    Ok(out)
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        // ties share the mean of their positions
        let mean = 0.5 * (i + j) as f64 + 1.0;
        for &k in &order[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` for fewer than two pairs or a constant
/// sequence.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct D2Sample {
    pub track_index: usize,
    pub epoch_s: f64,
    /// against the filter's own covariance
    pub d2_filter: f64,
    /// against the bound (C = J)
    pub d2_pcrb: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize)]
struct PcrbRow {
    epoch_s: f64,
    sigma_pos_km: f64,
    sigma_vel_km_s: f64,
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| ShfError::io(path, e))
}

pub fn write_rmse_csv(path: &Path, rows: &[RmseRow]) -> Result<()> {
    write_rows(path, rows.iter().copied())
}

pub fn read_rmse_csv(path: &Path) -> Result<Vec<RmseRow>> {
    read_rows(path)
}

pub fn write_pcrb_csv(path: &Path, points: &[PcrbPoint]) -> Result<()> {
    write_rows(
        path,
        points.iter().map(|p| PcrbRow {
            epoch_s: p.epoch,
            sigma_pos_km: p.sigma_pos_km,
            sigma_vel_km_s: p.sigma_vel_km_s,
        }),
    )
}

pub fn write_d2_csv(path: &Path, samples: &[D2Sample]) -> Result<()> {
    write_rows(path, samples.iter().copied())
}

pub fn read_d2_csv(path: &Path) -> Result<Vec<D2Sample>> {
    read_rows(path)
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}
