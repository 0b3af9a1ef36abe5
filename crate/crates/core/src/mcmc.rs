//! Posterior sampling over an admissible region: a Metropolis–Hastings
//! kernel and a differential-evolution multi-chain sampler.
//!
//! Sampling coordinates are (alpha, delta, alpha_rate, delta_rate, rho,
//! rho_rate). A point maps to an orbit through `state_from_range` with the
//! point's own observables.

use std::path::Path;

use nalgebra::{SMatrix, SVector, Vector4, Vector6};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::admissible_region::{AdmissibleRegion, ControlReference};
use crate::filters::stream_rng;
use crate::observation::{state_from_range, MeasurementLikelihood};
use crate::orbits::{cart_to_mee_near, MeeState};
use crate::shf::{xi_between, HeuristicKde};
use crate::{Result, ShfError};

/// An unnormalized log-density; -inf marks excluded points.
pub trait LogTarget<const D: usize>: Sync {
    fn log_density(&self, x: &SVector<f64, D>) -> f64;
}

impl<const D: usize, F> LogTarget<D> for F
where
    F: Fn(&SVector<f64, D>) -> f64 + Sync,
{
    fn log_density(&self, x: &SVector<f64, D>) -> f64 {
        self(x)
    }
}

#[derive(Debug, Clone)]
pub enum PosteriorMode {
    /// log p(z|x) - kappa * P(x)
    Control { kappa: f64 },
    /// log p(z|x) + log(kappa_h * M(xi(x)))
    Heuristic { kappa_h: f64, kde: HeuristicKde },
}

/// Posterior of the post-maneuver state over an admissible region.
#[derive(Debug, Clone)]
pub struct LogPosterior {
    pub mode: PosteriorMode,
    pub region: AdmissibleRegion,
    pub reference: ControlReference,
    likelihood: MeasurementLikelihood,
}

/// One decade of density penalty at the admissible boundary.
pub fn default_kappa(p_adm: f64) -> f64 {
    10f64.ln() / p_adm
}

impl LogPosterior {
    pub fn new(mode: PosteriorMode, region: AdmissibleRegion, reference: ControlReference) -> Result<Self> {
        match &mode {
            PosteriorMode::Control { kappa } if !(*kappa >= 0.0) => {
                return Err(ShfError::Config(format!("kappa must be nonnegative, got {kappa}")));
            }
            PosteriorMode::Heuristic { kappa_h, kde } => {
                if !(*kappa_h > 0.0) {
                    return Err(ShfError::Config(format!("kappa_h must be positive, got {kappa_h}")));
                }
                if kde.is_empty() {
                    return Err(ShfError::Config("heuristic posterior needs a nonempty KDE".into()));
                }
            }
            _ => {}
        }
        let likelihood = region.attributable.likelihood()?;
        Ok(Self {
            mode,
            region,
            reference,
            likelihood,
        })
    }

    pub fn bounds(&self) -> (Vector6<f64>, Vector6<f64>) {
        (self.region.lo, self.region.hi)
    }

    /// Orbit implied by a sampling point.
    pub fn materialize(&self, x: &Vector6<f64>) -> Result<MeeState> {
        let attr = self.region.attributable.with_z(&Vector4::new(x[0], x[1], x[2], x[3]));
        let cart = state_from_range(&attr, x[4], x[5], self.reference.initial.srp_coeff);
        cart_to_mee_near(&cart, self.reference.ballistic.l)
    }

    /// Measurement term alone: the point's observables are exactly h(x).
    pub fn log_likelihood(&self, x: &Vector6<f64>) -> f64 {
        self.likelihood.log_pdf(&Vector4::new(x[0], x[1], x[2], x[3]))
    }

    pub fn eval(&self, x: &Vector6<f64>) -> f64 {
        if !self.region.contains_point(x) {
            return f64::NEG_INFINITY;
        }
        let ll = self.log_likelihood(x);
        match &self.mode {
            PosteriorMode::Control { kappa } => {
                let attr = self.region.attributable.with_z(&Vector4::new(x[0], x[1], x[2], x[3]));
                if *kappa == 0.0 {
                    return ll;
                }
                ll - kappa * self.reference.distance_at(&attr, x[4], x[5])
            }
            PosteriorMode::Heuristic { kappa_h, kde } => {
                let Ok(post) = self.materialize(x) else {
                    return f64::NEG_INFINITY;
                };
                let xi = xi_between(&self.reference.ballistic, &post);
                match kde.log_density(&xi) {
                    Ok(m) => ll + kappa_h.ln() + m,
                    Err(_) => f64::NEG_INFINITY,
                }
            }
        }
    }
}

impl LogTarget<6> for LogPosterior {
    fn log_density(&self, x: &Vector6<f64>) -> f64 {
        self.eval(x)
    }
}

/// Random-walk Metropolis step with proposal N(x, L L^T) for the given
/// Cholesky factor. Returns (state, log-density, accepted).
pub fn mh_step<const D: usize, T: LogTarget<D> + ?Sized>(
    x: &SVector<f64, D>,
    log_density: f64,
    proposal_chol: &SMatrix<f64, D, D>,
    target: &T,
    rng: &mut ChaCha8Rng,
) -> (SVector<f64, D>, f64, bool) {
    let step = proposal_chol * SVector::<f64, D>::from_fn(|_, _| rng.sample(StandardNormal));
    let y = x + step;
    let ly = target.log_density(&y);
    let u: f64 = rng.random();
    if accept(u, ly, log_density) {
        (y, ly, true)
    } else {
        (*x, log_density, false)
    }
}

fn accept(u: f64, proposed: f64, current: f64) -> bool {
    if proposed == f64::NEG_INFINITY {
        return false;
    }
    if current == f64::NEG_INFINITY {
        return true;
    }
    u.ln() <= proposed - current
}

/// Multi-chain state: one point per chain plus bookkeeping.
#[derive(Debug, Clone)]
pub struct ChainEnsemble<const D: usize> {
    pub states: Vec<SVector<f64, D>>,
    pub log_densities: Vec<f64>,
    pub generation: u64,
    pub accepted: Vec<u64>,
    pub proposed: Vec<u64>,
    pub rng_seed: u64,
    pub lo: SVector<f64, D>,
    pub hi: SVector<f64, D>,
}

impl<const D: usize> ChainEnsemble<D> {
    /// Chains drawn uniformly in the box; starts with -inf density are redrawn
    /// a bounded number of times.
    pub fn uniform<T: LogTarget<D> + ?Sized>(
        target: &T,
        lo: SVector<f64, D>,
        hi: SVector<f64, D>,
        n_chains: usize,
        rng_seed: u64,
    ) -> Result<Self> {
        if n_chains < 8 {
            return Err(ShfError::Config(format!("need at least 8 chains, got {n_chains}")));
        }
        if (0..D).any(|i| !(hi[i] > lo[i])) {
            return Err(ShfError::Domain("sampling box has an empty dimension".into()));
        }
        let init: Vec<(SVector<f64, D>, f64)> = (0..n_chains)
            .into_par_iter()
            .map(|c| {
                let mut rng = stream_rng(rng_seed, 0, c as u64);
                let mut best = (lo, f64::NEG_INFINITY);
                for _ in 0..100 {
                    let x = SVector::<f64, D>::from_fn(|i, _| lo[i] + (hi[i] - lo[i]) * rng.random::<f64>());
                    let l = target.log_density(&x);
                    best = (x, l);
                    if l.is_finite() {
                        break;
                    }
                }
                best
            })
            .collect();
        Ok(Self {
            states: init.iter().map(|s| s.0).collect(),
            log_densities: init.iter().map(|s| s.1).collect(),
            generation: 0,
            accepted: vec![0; n_chains],
            proposed: vec![0; n_chains],
            rng_seed,
            lo,
            hi,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn acceptance_rate(&self) -> f64 {
        let p: u64 = self.proposed.iter().sum();
        if p == 0 {
            0.0
        } else {
            self.accepted.iter().sum::<u64>() as f64 / p as f64
        }
    }

    /// Jump scale for the current generation: every 10th uses 1.
    pub fn gamma(&self, gamma_scale: f64) -> f64 {
        if (self.generation + 1) % 10 == 0 {
            1.0
        } else {
            gamma_scale * 2.38 / (2.0 * D as f64).sqrt()
        }
    }
}

/// x_i + gamma (x_r1 - x_r2) + e with r1 != r2 != i drawn from the ensemble.
pub fn demc_propose<const D: usize>(
    ensemble: &ChainEnsemble<D>,
    chain_index: usize,
    gamma_scale: f64,
    rng: &mut ChaCha8Rng,
) -> SVector<f64, D> {
    let n = ensemble.len();
    let picks = sample(rng, n - 1, 2);
    let shift = |k: usize| if k >= chain_index { k + 1 } else { k };
    let (r1, r2) = (shift(picks.index(0)), shift(picks.index(1)));
    let gamma = ensemble.gamma(gamma_scale);
    let jitter = SVector::<f64, D>::from_fn(|i, _| {
        1e-6 * (ensemble.hi[i] - ensemble.lo[i]) * rng.sample::<f64, _>(StandardNormal)
    });
    ensemble.states[chain_index] + (ensemble.states[r1] - ensemble.states[r2]) * gamma + jitter
}

/// One generation: chains move in index order, each proposing from the
/// ensemble as already updated by the chains before it. Proposing every chain
/// against a frozen snapshot and committing together looks parallel-friendly
/// but does not leave the product target invariant (the variance of a flat
/// box comes out ~10% low), so the sweep is sequential.
pub fn demc_generation<const D: usize, T: LogTarget<D> + ?Sized>(
    ensemble: &mut ChainEnsemble<D>,
    target: &T,
    gamma_scale: f64,
) -> Vec<bool> {
    let mut flags = Vec::with_capacity(ensemble.len());
    for c in 0..ensemble.len() {
        let mut rng = stream_rng(ensemble.rng_seed, ensemble.generation + 1, c as u64);
        let y = demc_propose(ensemble, c, gamma_scale, &mut rng);
        let inside = (0..D).all(|i| y[i] >= ensemble.lo[i] && y[i] <= ensemble.hi[i]);
        let ly = if inside { target.log_density(&y) } else { f64::NEG_INFINITY };
        let u: f64 = rng.random();
        let ok = accept(u, ly, ensemble.log_densities[c]);
        if ok {
            ensemble.states[c] = y;
            ensemble.log_densities[c] = ly;
            ensemble.accepted[c] += 1;
        }
        ensemble.proposed[c] += 1;
        flags.push(ok);
    }
    ensemble.generation += 1;
    flags
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainConfig {
    pub n_chains: usize,
    pub n_generations: usize,
    pub burn_in_fraction: f64,
    /// pooled draws returned after thinning
    pub n_draws: usize,
    pub gamma_scale: f64,
    pub record_trace: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_chains: 16,
            n_generations: 400,
            burn_in_fraction: 0.5,
            n_draws: 1000,
            gamma_scale: 1.0,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub generation: u64,
    pub chain: usize,
    pub logpost: f64,
    pub alpha: f64,
    pub delta: f64,
    pub alpha_rate: f64,
    pub delta_rate: f64,
    pub rho: f64,
    pub rho_rate: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct ChainOutput<const D: usize> {
    pub draws: Vec<SVector<f64, D>>,
    pub log_densities: Vec<f64>,
    /// acceptance over the post-burn-in generations
    pub acceptance_rate: f64,
    pub convergence_warning: bool,
    /// split-chain potential scale reduction per dimension
    pub r_hat: SVector<f64, D>,
    pub trace: Vec<(u64, usize, f64, SVector<f64, D>, bool)>,
}

/// DE-MC over the box [lo, hi]: uniform initialization, `n_generations`
/// generations, pooled post-burn-in draws thinned to `n_draws`.
pub fn run_chains<const D: usize, T: LogTarget<D> + ?Sized>(
    target: &T,
    lo: SVector<f64, D>,
    hi: SVector<f64, D>,
    cfg: &ChainConfig,
    rng_seed: u64,
) -> Result<ChainOutput<D>> {
    if cfg.n_generations < 100 {
        return Err(ShfError::Config(format!("need at least 100 generations, got {}", cfg.n_generations)));
    }
    if !(0.0..1.0).contains(&cfg.burn_in_fraction) {
        return Err(ShfError::Config("burn-in fraction must lie in [0, 1)".into()));
    }
    let mut ens = ChainEnsemble::uniform(target, lo, hi, cfg.n_chains, rng_seed)?;
    let burn = (cfg.n_generations as f64 * cfg.burn_in_fraction).floor() as usize;
    let kept = cfg.n_generations - burn;
    // history[g][c] over the kept generations
    let mut history: Vec<Vec<(SVector<f64, D>, f64)>> = Vec::with_capacity(kept);
    let mut trace = Vec::new();
    let (mut acc, mut prop) = (0u64, 0u64);
    for g in 0..cfg.n_generations {
        let flags = demc_generation(&mut ens, target, cfg.gamma_scale);
        if cfg.record_trace {
            for (c, ok) in flags.iter().enumerate() {
                trace.push((ens.generation, c, ens.log_densities[c], ens.states[c], *ok));
            }
        }
        if g >= burn {
            acc += flags.iter().filter(|f| **f).count() as u64;
            prop += flags.len() as u64;
            history.push(ens.states.iter().copied().zip(ens.log_densities.iter().copied()).collect());
        }
    }
    let acceptance_rate = if prop > 0 { acc as f64 / prop as f64 } else { 0.0 };
    let r_hat = split_r_hat(&history);
    // thin by whole generations so every chain contributes equally
    let n_want = cfg.n_draws.max(1);
    let n_gen = n_want.div_ceil(ens.len()).min(history.len());
    let pooled: Vec<(SVector<f64, D>, f64)> = (0..n_gen)
        .map(|k| k * history.len() / n_gen)
        .flat_map(|g| history[g].iter().copied())
        .filter(|(_, l)| l.is_finite())
        .take(n_want)
        .collect();
    if pooled.is_empty() {
        return Err(ShfError::Numerical("no chain reached a finite log-density".into()));
    }
    Ok(ChainOutput {
        draws: pooled.iter().map(|p| p.0).collect(),
        log_densities: pooled.iter().map(|p| p.1).collect(),
        acceptance_rate,
        convergence_warning: acceptance_rate < 0.02,
        r_hat,
        trace,
    })
}

/// DE-MC over a posterior's admissible region.
pub fn run_region_chains(lp: &LogPosterior, cfg: &ChainConfig, rng_seed: u64) -> Result<ChainOutput<6>> {
    let (lo, hi) = lp.bounds();
    run_chains(lp, lo, hi, cfg, rng_seed)
}

/// Split-chain Gelman–Rubin statistic from history[generation][chain].
pub fn split_r_hat<const D: usize>(history: &[Vec<(SVector<f64, D>, f64)>]) -> SVector<f64, D> {
    let n_gen = history.len();
    let half = n_gen / 2;
    if half < 2 || history[0].is_empty() {
        return SVector::<f64, D>::from_element(f64::INFINITY);
    }
    let n_chains = history[0].len();
    SVector::<f64, D>::from_fn(|d, _| {
        let mut means = Vec::with_capacity(2 * n_chains);
        let mut vars = Vec::with_capacity(2 * n_chains);
        for c in 0..n_chains {
            for part in [&history[..half], &history[n_gen - half..]] {
                let xs: Vec<f64> = part.iter().map(|g| g[c].0[d]).collect();
                let m = xs.iter().sum::<f64>() / half as f64;
                let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (half as f64 - 1.0);
                means.push(m);
                vars.push(v);
            }
        }
        let k = means.len() as f64;
        let n = half as f64;
        let grand = means.iter().sum::<f64>() / k;
        let b = n * means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (k - 1.0);
        let w = vars.iter().sum::<f64>() / k;
        if w == 0.0 {
            return if b == 0.0 { 1.0 } else { f64::INFINITY };
        }
        let var_plus = (n - 1.0) / n * w + b / n;
        (var_plus / w).sqrt()
    })
}

pub fn write_trace_csv(path: &Path, output: &ChainOutput<6>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::observation::csv_err(path, e))?;
    for (generation, chain, logpost, x, accepted) in &output.trace {
        w.serialize(TraceRow {
            generation: *generation,
            chain: *chain,
            logpost: *logpost,
            alpha: x[0],
            delta: x[1],
            alpha_rate: x[2],
            delta_rate: x[3],
            rho: x[4],
            rho_rate: x[5],
            accepted: *accepted,
        })
        .map_err(|e| crate::observation::csv_err(path, e))?;
    }
    w.flush().map_err(|e| ShfError::io(path, e))?;
    Ok(())
}
