//! Maneuver hypotheses: spawning from the admissible region, the per-track
//! assessment (predict, gate, update) and maneuver characterization.
//!
//! A freshly spawned hypothesis is spread over the whole admissible region,
//! which after a day of propagation is hundreds of km wide while a track pins
//! the state to a fraction of a km. Until it has `refine_tracks` tracks, the
//! hypothesis is therefore re-derived at every track from its posterior in
//! spawn-epoch sampling coordinates (Laplace fit, then importance sampling);
//! afterwards it is an ordinary regularized particle filter.

use nalgebra::{Matrix3, Matrix4, SMatrix, SVector, Vector4, Vector6};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kde::{xi_between, HeuristicKde, ManeuverRecord};
use super::session::FilterConfig;
use crate::admissible_region::{build_region, ControlReference};
use crate::baseline_mhe::TrackSet;
use crate::filters::{
    predict, regularized_resample, reweight, stream_rng, stream_seed, systematic_indices_n, weighted_mean_cov, ParticlePopulation,
};
use crate::mcmc::{default_kappa, run_region_chains, ChainConfig, LogPosterior, PosteriorMode};
use crate::observation::{innovation, predicted_observables, Attributable, MeasurementLikelihood};
use crate::optim::levenberg_marquardt;
use crate::orbits::{geo_mean_longitude, perturbed_propagate, ForceModelConfig, MeeState};
use crate::{Result, ShfError};

/// Time unit of the fading-memory exponent.
pub const MEMORY_TIME_UNIT: f64 = 86_400.0;
/// Proposal covariance inflation (in standard deviations) for the refit.
const PROPOSAL_SCALE: f64 = 1.5;
const REFIT_STEP_TOL: f64 = 1e-4;
const REFIT_MAX_ITER: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypothesisKind {
    Ballistic,
    ManeuverControl,
    ManeuverHeuristic,
}

impl HypothesisKind {
    pub fn is_maneuver(self) -> bool {
        self != HypothesisKind::Ballistic
    }
}

/// Batch state of a young hypothesis: particle i of the population is the
/// materialization of `thetas[i]`.
#[derive(Debug, Clone)]
pub(crate) struct Refinement {
    posterior: LogPosterior,
    thetas: Vec<Vector6<f64>>,
    weights: Vec<f64>,
    /// associated tracks after the spawn track
    tracks: Vec<Attributable>,
    /// log of the unnormalized-prior evidence of everything associated so far
    log_z: f64,
}

#[derive(Debug, Clone)]
pub struct ManeuverHypothesis {
    pub id: u64,
    pub kind: HypothesisKind,
    /// population at the epoch of the last associated track
    pub population: ParticlePopulation,
    /// log L(r), the log of the fading-memory sum of predictive densities
    pub log_score: f64,
    pub spawn_epoch: f64,
    pub spawn_track_index: usize,
    pub parent_id: Option<u64>,
    /// (epoch, log predictive density) of every track the hypothesis has seen
    pub evidence: Vec<(f64, f64)>,
    pub lead_streak: usize,
    pub has_led: bool,
    pub tracks_since_spawn: usize,
    pub(crate) refinement: Option<Refinement>,
}

impl ManeuverHypothesis {
    pub fn ballistic(id: u64, population: ParticlePopulation, track_index: usize) -> Self {
        Self {
            id,
            kind: HypothesisKind::Ballistic,
            spawn_epoch: population.epoch(),
            population,
            log_score: f64::NEG_INFINITY,
            spawn_track_index: track_index,
            parent_id: None,
            evidence: Vec::new(),
            lead_streak: 0,
            has_led: false,
            tracks_since_spawn: 0,
            refinement: None,
        }
    }

    pub fn is_refining(&self) -> bool {
        self.refinement.is_some()
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn log_mean_exp(xs: &[f64]) -> f64 {
    log_sum_exp(xs.iter().copied()) - (xs.len() as f64).ln()
}

/// log sum_j phi^((t - t_j)/day) p_j over an evidence history.
pub fn log_score(evidence: &[(f64, f64)], epoch: f64, phi: f64) -> f64 {
    let lphi = phi.ln();
    log_sum_exp(evidence.iter().map(|(t, e)| (epoch - t) / MEMORY_TIME_UNIT * lphi + e))
}

/// d'^2 of an attributable against a single state at its epoch.
pub fn d_prime_sq(state: &MeeState, attr: &Attributable) -> Result<f64> {
    let h = predicted_observables(state, &attr.site)?;
    Ok(attr.likelihood()?.mahalanobis_sq(&h))
}

/// d'^2 at the population's weighted-mean state, which must sit at the
/// attributable epoch, and whether it passes `threshold`. The weighting
/// matrix is R plus the spread of the particles' predicted observables, so
/// a point population gives the plain measurement-only distance.
pub fn gate(population: &ParticlePopulation, attr: &Attributable, threshold: f64) -> Result<(f64, bool)> {
    if (population.epoch() - attr.epoch).abs() > 1e-6 {
        return Err(ShfError::Domain("gate needs the population at the attributable epoch".into()));
    }
    let hs = predicted_all(population, attr);
    let d2 = mean_d2(population, attr, &hs);
    Ok((d2, d2 <= threshold))
}

fn predicted_all(pop: &ParticlePopulation, attr: &Attributable) -> Vec<Option<Vector4<f64>>> {
    pop.particles.par_iter().map(|x| predicted_observables(x, &attr.site).ok()).collect()
}

fn mean_d2(pop: &ParticlePopulation, attr: &Attributable, hs: &[Option<Vector4<f64>>]) -> f64 {
    let Ok(h_bar) = predicted_observables(&pop.mean_state(), &attr.site) else {
        return f64::INFINITY;
    };
    let mut spread = Matrix4::zeros();
    let mut total = 0.0;
    for (h, w) in hs.iter().zip(&pop.weights) {
        if let (Some(h), true) = (h, *w > 0.0) {
            let d = innovation(h, &h_bar);
            spread += *w * d * d.transpose();
            total += w;
        }
    }
    if total <= 0.0 {
        return f64::INFINITY;
    }
    let s = attr.covariance + spread / total;
    let r = innovation(&attr.z(), &h_bar);
    match s.cholesky() {
        Some(c) => r.dot(&c.solve(&r)),
        None => f64::INFINITY,
    }
}
struct Gaussian<const D: usize> {
    mean: SVector<f64, D>,
    l: SMatrix<f64, D, D>,
    inv_l: SMatrix<f64, D, D>,
    log_norm: f64,
}

impl<const D: usize> Gaussian<D> {
    fn new(mean: SVector<f64, D>, cov: &SMatrix<f64, D, D>) -> Option<Self> {
        let l = cov.cholesky()?.l();
        let inv_l = l.try_inverse()?;
        let log_det: f64 = l.diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        Some(Self {
            mean,
            l,
            inv_l,
            log_norm: -0.5 * (D as f64 * (2.0 * std::f64::consts::PI).ln() + log_det),
        })
    }

    /// Retries with a growing relative ridge on the diagonal.
    fn with_ridge(mean: SVector<f64, D>, cov: &SMatrix<f64, D, D>) -> Option<Self> {
        if !cov.iter().all(|v| v.is_finite()) {
            return None;
        }
        std::iter::once(0.0).chain([1e-9, 1e-6, 1e-3]).find_map(|ridge| {
            let mut c = 0.5 * (cov + cov.transpose());
            for i in 0..D {
                c[(i, i)] += ridge * c[(i, i)].abs();
            }
            Self::new(mean, &c)
        })
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SVector<f64, D> {
        self.mean + self.l * SVector::<f64, D>::from_fn(|_, _| rng.sample(StandardNormal))
    }

    fn log_pdf(&self, x: &SVector<f64, D>) -> f64 {
        self.log_norm - 0.5 * (self.inv_l * (x - self.mean)).norm_squared()
    }
}

/// Outcome of offering one track to one hypothesis; nothing is committed.
#[derive(Debug, Clone)]
pub struct Assessment {
    /// d'^2 at the weighted mean (predicted, or refit for young hypotheses)
    pub d2: f64,
    /// smallest d'^2 over the particles
    pub best_d2: f64,
    pub log_evidence: f64,
    pub pass: bool,
    /// population at the track epoch (updated when the gate passed)
    pub at_track: ParticlePopulation,
    pub(crate) refinement: Option<Refinement>,
}

impl Assessment {
    fn failed(population: ParticlePopulation) -> Self {
        Self {
            d2: f64::INFINITY,
            best_d2: f64::INFINITY,
            log_evidence: f64::NEG_INFINITY,
            pass: false,
            at_track: population,
            refinement: None,
        }
    }
}

pub fn assess(h: &ManeuverHypothesis, attr: &Attributable, cfg: &FilterConfig, force: &ForceModelConfig, gate_q: f64) -> Result<Assessment> {
    if attr.epoch <= h.population.epoch() {
        return Err(ShfError::Domain(format!(
            "track at {} does not follow hypothesis epoch {}",
            attr.epoch,
            h.population.epoch()
        )));
    }
    match &h.refinement {
        None => assess_particles(h, attr, cfg, force, gate_q),
        Some(r) => assess_refined(h, r, attr, cfg, force, gate_q),
    }
}

fn particle_d2(hs: &[Option<Vector4<f64>>], like: &MeasurementLikelihood) -> Vec<f64> {
    hs.iter().map(|h| h.map_or(f64::INFINITY, |h| like.mahalanobis_sq(&h))).collect()
}

fn best_of(d2: &[f64], weights: &[f64]) -> f64 {
    d2.iter().zip(weights).filter(|(_, w)| **w > 0.0).map(|(d, _)| *d).fold(f64::INFINITY, f64::min)
}

fn assess_particles(h: &ManeuverHypothesis, attr: &Attributable, cfg: &FilterConfig, force: &ForceModelConfig, gate_q: f64) -> Result<Assessment> {
    let pred = match predict(&h.population, attr.epoch - h.population.epoch(), force) {
        Ok(p) => p,
        Err(ShfError::Propagation { .. }) => return Ok(Assessment::failed(h.population.clone())),
        Err(e) => return Err(e),
    };
    let like = attr.likelihood()?;
    let hs = predicted_all(&pred, attr);
    let d2s = particle_d2(&hs, &like);
    let c = like.log_pdf(&attr.z());
    let ll: Vec<f64> = d2s.iter().map(|d| c - 0.5 * d).collect();
    let best_d2 = best_of(&d2s, &pred.weights);
    let d2 = mean_d2(&pred, attr, &hs);
    let mut weights = pred.weights.clone();
    let log_evidence = reweight(&mut weights, &ll).unwrap_or(f64::NEG_INFINITY);
    let pass = d2 <= gate_q && log_evidence.is_finite();
    let at_track = if pass {
        regularized_resample(&ParticlePopulation { weights, ..pred }, cfg.ess_min)
    } else {
        pred
    };
    Ok(Assessment {
        d2,
        best_d2,
        log_evidence,
        pass,
        at_track,
        refinement: None,
    })
}

/// log prior + log likelihood of every associated track, and the state at
/// the last track.
fn joint_log_density(
    posterior: &LogPosterior,
    tracks: &[Attributable],
    likes: &[MeasurementLikelihood],
    theta: &Vector6<f64>,
    cfg: &ForceModelConfig,
) -> (f64, Option<MeeState>) {
    let t0 = posterior.eval(theta);
    if !t0.is_finite() {
        return (f64::NEG_INFINITY, None);
    }
    let Ok(mut s) = posterior.materialize(theta) else {
        return (f64::NEG_INFINITY, None);
    };
    let mut total = t0;
    for (a, like) in tracks.iter().zip(likes) {
        let Ok(next) = perturbed_propagate(&s, a.epoch - s.epoch, cfg, None) else {
            return (f64::NEG_INFINITY, None);
        };
        s = next;
        match predicted_observables(&s, &a.site) {
            Ok(h) => total += like.log_pdf(&h),
            Err(_) => return (f64::NEG_INFINITY, None),
        }
    }
    (total, Some(s))
}

/// Mode and Laplace covariance of the batch posterior, by least squares on
/// whitened residuals plus the prior written as a residual.
fn refit(posterior: &LogPosterior, set: &TrackSet, theta0: Vector6<f64>, cfg: &ForceModelConfig) -> Option<(Vector6<f64>, SMatrix<f64, 6, 6>)> {
    let spawn = &posterior.region.attributable;
    let peak = match &posterior.mode {
        PosteriorMode::Heuristic { kde, .. } => kde.log_peak_bound(),
        PosteriorMode::Control { .. } => 0.0,
    };
    let prior_residual = |theta: &Vector6<f64>, state: &MeeState| -> Option<f64> {
        match &posterior.mode {
            PosteriorMode::Control { kappa } if *kappa == 0.0 => Some(0.0),
            PosteriorMode::Control { kappa } => {
                let attr = spawn.with_z(&Vector4::new(theta[0], theta[1], theta[2], theta[3]));
                let p = posterior.reference.distance_at(&attr, theta[4], theta[5]);
                p.is_finite().then(|| (2.0 * kappa * p).sqrt())
            }
            PosteriorMode::Heuristic { kde, .. } => {
                let lm = kde.log_density(&xi_between(&posterior.reference.ballistic, state)).ok()?;
                Some((2.0 * (peak - lm)).max(0.0).sqrt())
            }
        }
    };
    let f = |theta: &Vector6<f64>| {
        let state = posterior.materialize(theta).ok()?;
        let r = set.residuals(&state, cfg)?;
        let p = prior_residual(theta, &state)?;
        Some(r.push(p))
    };
    let sigma = spawn.covariance.diagonal().map(f64::sqrt);
    let h = Vector6::new(1e-3 * sigma[0], 1e-3 * sigma[1], 1e-3 * sigma[2], 1e-3 * sigma[3], 1e-4, 1e-8);
    let fit = levenberg_marquardt(f, theta0, h, REFIT_STEP_TOL, REFIT_MAX_ITER)?;
    let cov = fit.jtj.try_inverse()?;
    cov.diagonal().iter().all(|v| *v > 0.0 && v.is_finite()).then_some((fit.x, cov))
}

fn assess_refined(
    h: &ManeuverHypothesis,
    r: &Refinement,
    attr: &Attributable,
    cfg: &FilterConfig,
    force: &ForceModelConfig,
    gate_q: f64,
) -> Result<Assessment> {
    let nf = force.without_noise();
    let like = attr.likelihood()?;
    let n = h.population.len();
    // start the refit from the particle that best explains the new track
    let dt = attr.epoch - h.population.epoch();
    let seed_scores: Vec<f64> = h
        .population
        .particles
        .par_iter()
        .zip(&h.population.weights)
        .map(|(x, w)| {
            if *w <= 0.0 {
                return f64::NEG_INFINITY;
            }
            perturbed_propagate(x, dt, &nf, None)
                .ok()
                .and_then(|s| predicted_observables(&s, &attr.site).ok())
                .map_or(f64::NEG_INFINITY, |hh| w.ln() + like.log_pdf(&hh))
        })
        .collect();
    let best = (0..n).fold(0, |b, i| if seed_scores[i] > seed_scores[b] { i } else { b });
    let mut tracks = r.tracks.clone();
    tracks.push(attr.clone());
    let mut all = vec![r.posterior.region.attributable.clone()];
    all.extend(tracks.iter().cloned());
    let set = TrackSet::new(&all)?;
    let theta0 = r.thetas[best];
    let scale2 = PROPOSAL_SCALE * PROPOSAL_SCALE;
    let proposal = refit(&r.posterior, &set, theta0, &nf)
        .and_then(|(c, cov)| Gaussian::with_ridge(c, &(cov * scale2)))
        .or_else(|| {
            let (_, cov) = weighted_mean_cov(&r.thetas, &r.weights);
            Gaussian::with_ridge(theta0, &(cov * scale2))
        });
    let Some(proposal) = proposal else {
        return Ok(Assessment::failed(h.population.clone()));
    };
    let likes = tracks.iter().map(|a| a.likelihood()).collect::<Result<Vec<_>>>()?;
    let generation = h.population.generation + 1;
    let samples: Vec<(Vector6<f64>, f64, Option<MeeState>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(h.population.rng_seed, generation, i as u64);
            let theta = proposal.sample(&mut rng);
            let (t, state) = joint_log_density(&r.posterior, &tracks, &likes, &theta, &nf);
            (theta, t - proposal.log_pdf(&theta), state)
        })
        .collect();
    let log_w: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let log_z = log_mean_exp(&log_w);
    let Some(fallback) = samples.iter().find_map(|s| s.2) else {
        return Ok(Assessment::failed(h.population.clone()));
    };
    if !log_z.is_finite() {
        return Ok(Assessment::failed(h.population.clone()));
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let failed: Vec<usize> = samples.iter().enumerate().filter(|(_, s)| s.2.is_none()).map(|(i, _)| i).collect();
    let particles: Vec<MeeState> = samples
        .iter()
        .zip(&h.population.particles)
        .map(|(s, x)| MeeState {
            srp_coeff: x.srp_coeff,
            ..s.2.unwrap_or(fallback)
        })
        .collect();
    let thetas: Vec<Vector6<f64>> = samples.iter().map(|s| s.0).collect();
    let pop = ParticlePopulation {
        particles,
        weights,
        generation,
        failed,
        ..h.population.clone()
    };
    let hs = predicted_all(&pop, attr);
    let best_d2 = best_of(&particle_d2(&hs, &like), &pop.weights);
    let d2 = mean_d2(&pop, attr, &hs);
    let pass = d2 <= gate_q;
    let refinement = Refinement {
        posterior: r.posterior.clone(),
        thetas,
        weights: pop.weights.clone(),
        tracks,
        log_z,
    };
    let graduate = refinement.tracks.len() + 1 >= cfg.refine_tracks;
    let (at_track, refinement) = if pass && graduate {
        (regularized_resample(&pop, cfg.ess_min), None)
    } else {
        (pop, Some(refinement))
    };
    Ok(Assessment {
        d2,
        best_d2,
        log_evidence: log_z - r.log_z,
        pass,
        at_track,
        refinement,
    })
}

/// log of the integral of prior x spawn-track likelihood over the region,
/// with the unnormalized prior of the posterior. Defensive importance
/// sampling: half the proposals come from N(z, R) x uniform(rho box), half
/// from a Gaussian fitted to the chain draws.
fn spawn_log_z(lp: &LogPosterior, thetas: &[Vector6<f64>], n: usize, seed: u64) -> f64 {
    let attr = &lp.region.attributable;
    let Some(obs) = Gaussian::<4>::new(attr.z(), &attr.covariance) else {
        return f64::NEG_INFINITY;
    };
    let (lo, hi) = lp.bounds();
    let log_area = ((hi[4] - lo[4]) * (hi[5] - lo[5])).ln();
    let uniform = vec![1.0 / thetas.len() as f64; thetas.len()];
    let (m, c) = weighted_mean_cov(thetas, &uniform);
    let fitted = Gaussian::with_ridge(m, &(c * (PROPOSAL_SCALE * PROPOSAL_SCALE)));
    let half = 0.5f64.ln();
    let logs: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, 0, i as u64);
            let from_box = fitted.is_none() || rng.random::<f64>() < 0.5;
            let theta = match (&fitted, from_box) {
                (Some(g), false) => g.sample(&mut rng),
                _ => {
                    let o = obs.sample(&mut rng);
                    let (u, v): (f64, f64) = (rng.random(), rng.random());
                    Vector6::new(o[0], o[1], o[2], o[3], lo[4] + u * (hi[4] - lo[4]), lo[5] + v * (hi[5] - lo[5]))
                }
            };
            let in_rho_box = theta[4] >= lo[4] && theta[4] <= hi[4] && theta[5] >= lo[5] && theta[5] <= hi[5];
            let lq_box = if in_rho_box {
                obs.log_pdf(&Vector4::new(theta[0], theta[1], theta[2], theta[3])) - log_area
            } else {
                f64::NEG_INFINITY
            };
            let lq = match &fitted {
                Some(g) => log_sum_exp([half + lq_box, half + g.log_pdf(&theta)].into_iter()),
                None => lq_box,
            };
            lp.eval(&theta) - lq
        })
        .collect();
    log_mean_exp(&logs)
}

/// Control-mode (and, with a nonempty KDE, heuristic-mode) hypotheses for a
/// track that `pre` failed to explain. `first_id` numbers the children.
pub fn spawn_hypotheses(
    pre: &ManeuverHypothesis,
    attr: &Attributable,
    track_index: usize,
    kde: Option<&HeuristicKde>,
    cfg: &FilterConfig,
    force: &ForceModelConfig,
    first_id: u64,
) -> Result<Vec<ManeuverHypothesis>> {
    let nf = force.without_noise();
    let pre_mean = pre.population.mean_state();
    if attr.epoch <= pre_mean.epoch {
        return Err(ShfError::Domain("spawn track precedes the pre-maneuver estimate".into()));
    }
    let reference = ControlReference::new(&pre_mean, attr.epoch, &nf)?;
    let region = build_region(&reference, attr, &cfg.thresholds)?;
    let kappa = cfg.kappa.unwrap_or_else(|| default_kappa(region.p_adm));
    let mut modes = vec![(PosteriorMode::Control { kappa }, HypothesisKind::ManeuverControl)];
    if let Some(kde) = kde.filter(|k| cfg.heuristics && !k.is_empty()) {
        modes.push((
            PosteriorMode::Heuristic {
                kappa_h: cfg.kappa_h,
                kde: kde.clone(),
            },
            HypothesisKind::ManeuverHeuristic,
        ));
    }
    // predictive density of the spawn track: uniform over the observable box
    let width = region.width();
    let occam = -(0..4).map(|i| width[i].ln()).sum::<f64>();
    let inherited: Vec<(f64, f64)> = pre.evidence.iter().filter(|(t, _)| *t < attr.epoch).copied().collect();
    let chains = ChainConfig {
        n_draws: cfg.n_h,
        ..cfg.chains
    };
    modes
        .into_par_iter()
        .enumerate()
        .map(|(m, (mode, kind))| {
            let id = first_id + m as u64;
            let lp = LogPosterior::new(mode, region.clone(), reference.clone())?;
            let out = run_region_chains(&lp, &chains, stream_seed(cfg.seed, id, 1))?;
            let pairs: Vec<(Vector6<f64>, MeeState)> =
                out.draws.iter().filter_map(|d| lp.materialize(d).ok().map(|s| (*d, s))).collect();
            if pairs.is_empty() {
                return Err(ShfError::Numerical("no chain draw is a valid orbit".into()));
            }
            let pairs: Vec<(Vector6<f64>, MeeState)> = if pairs.len() == cfg.n_h {
                pairs
            } else {
                let u = stream_rng(cfg.seed, id, 4).random::<f64>();
                systematic_indices_n(&vec![1.0; pairs.len()], cfg.n_h, u).into_iter().map(|i| pairs[i]).collect()
            };
            let thetas: Vec<Vector6<f64>> = pairs.iter().map(|p| p.0).collect();
            // a burn leaves B alone: children inherit it from the parent population
            let u = stream_rng(cfg.seed, id, 5).random::<f64>();
            let parents = systematic_indices_n(&pre.population.weights, cfg.n_h, u);
            let particles = pairs
                .iter()
                .zip(&parents)
                .map(|(p, &j)| MeeState {
                    srp_coeff: pre.population.particles[j].srp_coeff,
                    ..p.1
                })
                .collect();
            let population = ParticlePopulation::new(particles, id, stream_seed(cfg.seed, id, 3))?;
            let refinement = (cfg.refine_tracks > 1).then(|| Refinement {
                log_z: spawn_log_z(&lp, &thetas, cfg.n_h, stream_seed(cfg.seed, id, 2)),
                posterior: lp,
                weights: vec![1.0 / thetas.len() as f64; thetas.len()],
                thetas,
                tracks: Vec::new(),
            });
            let mut evidence = inherited.clone();
            evidence.push((attr.epoch, occam));
            Ok(ManeuverHypothesis {
                id,
                kind,
                population,
                log_score: f64::NEG_INFINITY,
                spawn_epoch: attr.epoch,
                spawn_track_index: track_index,
                parent_id: Some(pre.id),
                evidence,
                lead_streak: 0,
                has_led: false,
                tracks_since_spawn: 0,
                refinement,
            })
        })
        .collect()
}

/// Noise-free propagation of every particle to `epoch` (either direction).
pub fn propagate_population(pop: &ParticlePopulation, epoch: f64, cfg: &ForceModelConfig) -> Result<ParticlePopulation> {
    let nf = cfg.without_noise();
    let dt = epoch - pop.epoch();
    let moved: Vec<Option<MeeState>> = pop.particles.par_iter().map(|x| perturbed_propagate(x, dt, &nf, None).ok()).collect();
    let mut weights = pop.weights.clone();
    let mut failed = Vec::new();
    let particles = moved
        .iter()
        .enumerate()
        .map(|(i, m)| {
            m.unwrap_or_else(|| {
                failed.push(i);
                weights[i] = 0.0;
                MeeState {
                    epoch,
                    ..pop.particles[i]
                }
            })
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(ShfError::Propagation {
            last_epoch: pop.epoch(),
            reason: "no particle could be propagated".into(),
        });
    }
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(ParticlePopulation {
        particles,
        weights,
        failed,
        ..pop.clone()
    })
}

/// Pairwise (delta a, delta e, delta i) between two populations at the same
/// epoch. Both are resampled to a common size and paired at random.
pub fn characterize_maneuver(
    pre: &ParticlePopulation,
    post: &ParticlePopulation,
    first_track_index: usize,
    detection_epoch: f64,
    seed: u64,
) -> Result<ManeuverRecord> {
    if pre.is_empty() || post.is_empty() {
        return Err(ShfError::InvalidState("characterization needs two nonempty populations".into()));
    }
    if (pre.epoch() - post.epoch()).abs() > 1e-6 {
        return Err(ShfError::Domain(format!(
            "populations at different epochs: {} vs {}",
            pre.epoch(),
            post.epoch()
        )));
    }
    let n = pre.len().max(post.len());
    let mut rng = stream_rng(seed, 0, 0);
    let ia = systematic_indices_n(&pre.weights, n, rng.random());
    let mut ib = systematic_indices_n(&post.weights, n, rng.random());
    ib.shuffle(&mut rng);
    let xi: Vec<SVector<f64, 3>> = ia
        .iter()
        .zip(&ib)
        .map(|(&a, &b)| xi_between(&pre.particles[a], &post.particles[b]))
        .collect();
    let (mean, cov) = weighted_mean_cov(&xi, &vec![1.0 / n as f64; n]);
    let eig = (0.5 * (cov + cov.transpose())).symmetric_eigen();
    let floored = eig.eigenvalues.iter().any(|l| *l < 1e-12);
    let xi_cov = if floored {
        let vals = eig.eigenvalues.map(|l| l.max(1e-12));
        eig.eigenvectors * Matrix3::from_diagonal(&vals) * eig.eigenvectors.transpose()
    } else {
        cov
    };
    let pre_mean = pre.mean_state();
    Ok(ManeuverRecord {
        xi_mean: mean,
        xi_cov,
        lon_pre: geo_mean_longitude(&pre_mean),
        inc_pre: pre_mean.inclination(),
        detection_epoch,
        first_track_index,
        floored,
    })
}
