//! Weighted particle populations: bootstrap prediction and update, ESS and
//! regularized resampling.
//!
//! The weight arithmetic, systematic resampling and kernel sizing are generic
//! over the state dimension so that the same code drives the orbital filter
//! and small linear test systems.

use std::path::Path;

use nalgebra::{SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::observation::{predicted_observables, Attributable};
use crate::orbits::{perturbed_propagate, ForceModelConfig, MeeState};
use crate::{Result, ShfError};

/// Deterministic sub-stream seed for item `index` of draw `generation`.
pub fn stream_seed(seed: u64, generation: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a simple combination of the three keys
    let mut z = seed
        .wrapping_add(generation.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, generation: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, generation, index))
}

/// Multiplies prior weights by exp(log_lik) in log space and renormalizes.
/// Returns the log-evidence log sum_i w_i p(z|x_i).
pub fn reweight(weights: &mut [f64], log_lik: &[f64]) -> Result<f64> {
    debug_assert_eq!(weights.len(), log_lik.len());
    let logs: Vec<f64> = weights
        .iter()
        .zip(log_lik)
        .map(|(w, l)| if *w > 0.0 { w.ln() + l } else { f64::NEG_INFINITY })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(ShfError::DegenerateUpdate);
    }
    let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    for (w, l) in weights.iter_mut().zip(&logs) {
        *w = (l - max).exp() / sum;
    }
    renormalize(weights);
    Ok(max + sum.ln())
}

/// Second pass that brings the sum to 1 within a couple of ulps.
fn renormalize(weights: &mut [f64]) {
    let s: f64 = weights.iter().sum();
    if s > 0.0 {
        weights.iter_mut().for_each(|w| *w /= s);
    }
}

pub fn effective_sample_size(weights: &[f64]) -> f64 {
    // equal weights give N exactly; the sum of squares would round
    if weights.iter().all(|w| *w == weights[0]) && weights[0] > 0.0 {
        return weights.len() as f64;
    }
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Systematic resampling: indices selected by the comb u/N, (u+1)/N, ...
/// against the cumulative weights, for a single `u` in [0, 1).
pub fn systematic_indices(weights: &[f64], u: f64) -> Vec<usize> {
    systematic_indices_n(weights, weights.len(), u)
}

/// Systematic resampling to `n_out` indices.
pub fn systematic_indices_n(weights: &[f64], n_out: usize, u: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n_out);
    let total: f64 = weights.iter().sum();
    let mut cum = weights[0] / total;
    let mut i = 0;
    for k in 0..n_out {
        let target = (u + k as f64) / n_out as f64;
        while cum < target && i + 1 < n {
            i += 1;
            cum += weights[i] / total;
        }
        out.push(i);
    }
    out
}

pub fn weighted_mean_cov<const D: usize>(points: &[SVector<f64, D>], weights: &[f64]) -> (SVector<f64, D>, SMatrix<f64, D, D>) {
    let mean = points
        .iter()
        .zip(weights)
        .fold(SVector::<f64, D>::zeros(), |acc, (x, w)| acc + x * *w);
    let mut cov = SMatrix::<f64, D, D>::zeros();
    for (x, w) in points.iter().zip(weights) {
        let d = x - mean;
        cov += d * d.transpose() * *w;
    }
    (mean, cov)
}

/// Silverman's rule for a Gaussian kernel in `dim` dimensions.
pub fn silverman_bandwidth(n: usize, dim: usize) -> f64 {
    (4.0 / (n as f64 * (dim as f64 + 2.0))).powf(1.0 / (dim as f64 + 4.0))
}

/// Symmetric square root of a covariance; eigen-directions with variance
/// below 1e-14 receive no jitter.
pub fn covariance_sqrt<const D: usize>(cov: &SMatrix<f64, D, D>) -> SMatrix<f64, D, D> {
    let sym = nalgebra::DMatrix::from_fn(D, D, |i, j| 0.5 * (cov[(i, j)] + cov[(j, i)]));
    let eig = sym.symmetric_eigen();
    let sqrt = eig.eigenvalues.map(|l| if l > 1e-14 { l.sqrt() } else { 0.0 });
    let root = &eig.eigenvectors * nalgebra::DMatrix::from_diagonal(&sqrt) * eig.eigenvectors.transpose();
    SMatrix::<f64, D, D>::from_fn(|i, j| root[(i, j)])
}

/// Resamples `points` systematically and, when `bandwidth > 0`, jitters each
/// copy with N(0, bandwidth^2 * Cov). Weights become uniform.
pub fn regularized_resample_points<const D: usize>(
    points: &[SVector<f64, D>],
    weights: &[f64],
    bandwidth: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<SVector<f64, D>> {
    let idx = systematic_indices(weights, rng.random::<f64>());
    if bandwidth <= 0.0 {
        return idx.iter().map(|&i| points[i]).collect();
    }
    let (_, cov) = weighted_mean_cov(points, weights);
    let root = covariance_sqrt(&cov) * bandwidth;
    idx.iter()
        .map(|&i| points[i] + root * SVector::<f64, D>::from_fn(|_, _| rng.sample(StandardNormal)))
        .collect()
}

/// A weighted set of orbit samples, all at the same epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticlePopulation {
    pub particles: Vec<MeeState>,
    pub weights: Vec<f64>,
    pub hypothesis_tag: u64,
    pub rng_seed: u64,
    /// advances on every stochastic operation so each draws fresh streams
    pub generation: u64,
    /// indices whose propagation failed during the last prediction
    pub failed: Vec<usize>,
}

/// Result of a measurement update.
#[derive(Debug, Clone)]
pub struct WeightUpdate {
    pub population: ParticlePopulation,
    pub log_evidence: f64,
}

impl ParticlePopulation {
    pub fn new(particles: Vec<MeeState>, hypothesis_tag: u64, rng_seed: u64) -> Result<Self> {
        if particles.is_empty() {
            return Err(ShfError::InvalidState("a population needs at least one particle".into()));
        }
        let n = particles.len();
        Ok(Self {
            particles,
            weights: vec![1.0 / n as f64; n],
            hypothesis_tag,
            rng_seed,
            generation: 0,
            failed: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn epoch(&self) -> f64 {
        self.particles[0].epoch
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles.is_empty() || self.particles.len() != self.weights.len() {
            return Err(ShfError::InvalidState("particle and weight counts differ".into()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(ShfError::InvalidState("negative or NaN weight".into()));
        }
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(ShfError::InvalidState(format!("weights sum to {s}")));
        }
        Ok(())
    }

    /// 7-vectors (p, f, g, h, k, L, B).
    pub fn vectors(&self) -> Vec<SVector<f64, 7>> {
        self.particles.iter().map(|p| p.to_vector7()).collect()
    }

    pub fn mean_and_covariance(&self) -> (SVector<f64, 7>, SMatrix<f64, 7, 7>) {
        weighted_mean_cov(&self.vectors(), &self.weights)
    }

    /// Weighted mean state (L averaged on its unwrapped branch).
    pub fn mean_state(&self) -> MeeState {
        let (m, _) = self.mean_and_covariance();
        MeeState::from_vector7(&m, self.epoch())
    }

    pub fn ess(&self) -> f64 {
        effective_sample_size(&self.weights)
    }
}

/// Propagates every particle by `dt` with its own process-noise stream.
pub fn predict(pop: &ParticlePopulation, dt: f64, cfg: &ForceModelConfig) -> Result<ParticlePopulation> {
    if !(dt >= 0.0) {
        return Err(ShfError::Domain(format!("prediction interval must be nonnegative, got {dt}")));
    }
    if dt == 0.0 {
        return Ok(pop.clone());
    }
    let generation = pop.generation + 1;
    let noisy = cfg.process_noise.is_some();
    let results: Vec<Result<MeeState>> = pop
        .particles
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let seed = noisy.then(|| stream_seed(pop.rng_seed, generation, i as u64));
            perturbed_propagate(x, dt, cfg, seed)
        })
        .collect();
    let mut particles = Vec::with_capacity(pop.len());
    let mut weights = pop.weights.clone();
    let mut failed = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(x) => particles.push(x),
            Err(_) => {
                failed.push(i);
                weights[i] = 0.0;
                particles.push(MeeState {
                    epoch: pop.particles[i].epoch + dt,
                    ..pop.particles[i]
                });
            }
        }
    }
    if failed.len() == pop.len() {
        return Err(ShfError::Propagation {
            last_epoch: pop.epoch(),
            reason: "every particle failed to propagate".into(),
        });
    }
    if !failed.is_empty() {
        if weights.iter().sum::<f64>() <= 0.0 {
            // the survivors all carried zero weight; restart them uniformly
            for (i, w) in weights.iter_mut().enumerate() {
                *w = if failed.contains(&i) { 0.0 } else { 1.0 };
            }
        }
        renormalize(&mut weights);
    }
    Ok(ParticlePopulation {
        particles,
        weights,
        generation,
        failed,
        ..pop.clone()
    })
}

/// Per-particle log-likelihoods of an attributable (particles must sit at
/// the attributable epoch).
pub fn log_likelihoods(pop: &ParticlePopulation, attr: &Attributable) -> Result<Vec<f64>> {
    let like = attr.likelihood()?;
    Ok(pop
        .particles
        .par_iter()
        .map(|x| match predicted_observables(x, &attr.site) {
            Ok(h) => like.log_pdf(&h),
            Err(_) => f64::NEG_INFINITY,
        })
        .collect())
}

pub fn update_weights(pop: &ParticlePopulation, attr: &Attributable) -> Result<WeightUpdate> {
    if (pop.epoch() - attr.epoch).abs() > 1e-6 {
        return Err(ShfError::Domain(format!(
            "population epoch {} differs from attributable epoch {}",
            pop.epoch(),
            attr.epoch
        )));
    }
    let ll = log_likelihoods(pop, attr)?;
    let mut weights = pop.weights.clone();
    let log_evidence = reweight(&mut weights, &ll)?;
    Ok(WeightUpdate {
        population: ParticlePopulation {
            weights,
            ..pop.clone()
        },
        log_evidence,
    })
}

pub fn ess(pop: &ParticlePopulation) -> f64 {
    pop.ess()
}

/// Systematic resampling plus Gaussian-kernel jitter when the ESS is at or
/// below `ess_min`; returns an identical copy otherwise.
pub fn regularized_resample(pop: &ParticlePopulation, ess_min: f64) -> ParticlePopulation {
    if pop.ess() > ess_min {
        return pop.clone();
    }
    let n = pop.len();
    let generation = pop.generation + 1;
    let mut rng = stream_rng(pop.rng_seed, generation, u64::MAX);
    let elements: Vec<SVector<f64, 6>> = pop.particles.iter().map(|p| p.elements()).collect();
    let idx = systematic_indices(&pop.weights, rng.random::<f64>());
    let h = silverman_bandwidth(n, 6);
    let (_, cov) = weighted_mean_cov(&elements, &pop.weights);
    let root = covariance_sqrt(&cov) * h;
    // the area-to-mass coefficient gets its own one-dimensional kernel
    let b: Vec<SVector<f64, 1>> = pop.particles.iter().map(|p| SVector::<f64, 1>::new(p.srp_coeff)).collect();
    let (_, b_var) = weighted_mean_cov(&b, &pop.weights);
    let b_sd = if b_var[(0, 0)] > 1e-14 { b_var[(0, 0)].sqrt() * silverman_bandwidth(n, 1) } else { 0.0 };
    let epoch = pop.epoch();
    let particles = idx
        .iter()
        .map(|&i| {
            let jitter = root * SVector::<f64, 6>::from_fn(|_, _| rng.sample(StandardNormal));
            let srp = pop.particles[i].srp_coeff + b_sd * rng.sample::<f64, _>(StandardNormal);
            MeeState::from_vector(&(elements[i] + jitter), srp, epoch)
        })
        .collect();
    ParticlePopulation {
        particles,
        weights: vec![1.0 / n as f64; n],
        generation,
        failed: Vec::new(),
        ..pop.clone()
    }
}

#[derive(Debug, Serialize)]
struct PopulationRow {
    particle_id: usize,
    weight: f64,
    p: f64,
    f: f64,
    g: f64,
    h: f64,
    k: f64,
    #[serde(rename = "L")]
    l: f64,
    #[serde(rename = "B")]
    b: f64,
}

pub fn write_population_csv(path: &Path, pop: &ParticlePopulation) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::observation::csv_err(path, e))?;
    for (i, (x, wt)) in pop.particles.iter().zip(&pop.weights).enumerate() {
        w.serialize(PopulationRow {
            particle_id: i,
            weight: *wt,
            p: x.p,
            f: x.f,
            g: x.g,
            h: x.h,
            k: x.k,
            l: x.l,
            b: x.srp_coeff,
        })
        .map_err(|e| crate::observation::csv_err(path, e))?;
    }
    w.flush().map_err(|e| ShfError::io(path, e))?;
    Ok(())
}
