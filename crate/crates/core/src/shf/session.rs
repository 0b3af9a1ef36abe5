//! The filter session: one object, a set of competing hypotheses, and the
//! per-track cycle of gating, spawning, scoring, pruning and promotion.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix6, SMatrix};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::hypothesis::{
    assess, characterize_maneuver, d_prime_sq, gate, log_score, propagate_population, spawn_hypotheses, Assessment, HypothesisKind,
    ManeuverHypothesis,
};
use super::kde::{HeuristicKde, ManeuverRecord};
use crate::admissible_region::RegionThresholds;
use crate::filters::{covariance_sqrt, stream_rng, stream_seed, ParticlePopulation};
use crate::mcmc::ChainConfig;
use crate::observation::Attributable;
use crate::orbits::{perturbed_propagate, ForceModelConfig, MeeState};
use crate::{Result, ShfError};

/// Tracks whose populations are kept for locating the first post-maneuver
/// track after a promotion.
pub const RETAINED_TRACKS: usize = 6;
/// A maneuver hypothesis must lead this many consecutive tracks.
pub const PROMOTION_PERSISTENCE: usize = 2;
/// Maneuver hypotheses that never lead within this many tracks are dropped.
pub const RETIRE_AFTER: usize = 6;

/// Two-sided normal probability mass within `n_sigma`.
pub fn sigma_equivalent_probability(n_sigma: f64) -> f64 {
    statrs::function::erf::erf(n_sigma / std::f64::consts::SQRT_2)
}

pub fn chi2_quantile(dof: f64, p: f64) -> f64 {
    ChiSquared::new(dof).expect("positive degrees of freedom").inverse_cdf(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub thresholds: RegionThresholds,
    /// chi2(4) probability of the association gate
    pub gate_probability: f64,
    /// chi2(4) probability of the prune gate on the best particle
    pub prune_probability: f64,
    pub phi: f64,
    pub n_h: usize,
    /// control-mode kappa; `None` uses ln 10 / P_adm of each region
    pub kappa: Option<f64>,
    pub kappa_h: f64,
    /// resample when the ESS drops to this many particles
    pub ess_min: f64,
    /// spawn heuristic-mode hypotheses once the KDE has records
    pub heuristics: bool,
    pub chains: ChainConfig,
    /// tracks (spawn included) over which a new hypothesis is refit in batch
    pub refine_tracks: usize,
    pub max_maneuver_hypotheses: usize,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            thresholds: RegionThresholds::default(),
            gate_probability: sigma_equivalent_probability(3.0),
            prune_probability: sigma_equivalent_probability(5.0),
            phi: 0.95,
            n_h: 1000,
            kappa: None,
            kappa_h: 1.0,
            ess_min: 500.0,
            heuristics: true,
            chains: ChainConfig::default(),
            refine_tracks: 3,
            max_maneuver_hypotheses: 4,
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        let prob = |p: f64| p > 0.0 && p < 1.0;
        if !(self.phi > 0.0 && self.phi < 1.0) {
            return Err(ShfError::Config(format!("phi must lie in (0, 1), got {}", self.phi)));
        }
        if !(prob(self.gate_probability) && prob(self.prune_probability) && self.gate_probability <= self.prune_probability) {
            return Err(ShfError::Config("gate probabilities must satisfy 0 < gate <= prune < 1".into()));
        }
        if self.n_h < 10 {
            return Err(ShfError::Config(format!("N_H must be at least 10, got {}", self.n_h)));
        }
        if !(self.kappa_h > 0.0) || self.kappa.is_some_and(|k| !(k >= 0.0)) {
            return Err(ShfError::Config("kappa must be nonnegative and kappa_h positive".into()));
        }
        if self.refine_tracks == 0 || self.max_maneuver_hypotheses == 0 {
            return Err(ShfError::Config("refine_tracks and max_maneuver_hypotheses must be positive".into()));
        }
        Ok(())
    }

    pub fn gate_quantile(&self) -> f64 {
        chi2_quantile(4.0, self.gate_probability)
    }

    pub fn prune_quantile(&self) -> f64 {
        chi2_quantile(4.0, self.prune_probability)
    }
}

/// Gaussian population around an orbit estimate; B gets its own spread.
pub fn initial_population(mean: &MeeState, cov: &Matrix6<f64>, srp_sd: f64, n: usize, tag: u64, seed: u64) -> Result<ParticlePopulation> {
    let root = cov.cholesky().map(|c| c.l()).unwrap_or_else(|| covariance_sqrt(cov));
    let particles = (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, 0, i as u64);
            let dx = root * nalgebra::Vector6::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            let b = mean.srp_coeff + srp_sd * rng.sample::<f64, _>(StandardNormal);
            MeeState::from_vector(&(mean.elements() + dx), b, mean.epoch)
        })
        .collect();
    ParticlePopulation::new(particles, tag, stream_seed(seed, tag, 3))
}

/// Index of the maximum log score; scores within 1e-12 go to the lower id.
pub fn leader_index(scores: &[(u64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, &(id, s)) in scores.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let (bid, bs) = scores[b];
                s > bs + 1e-12 || ((s - bs).abs() <= 1e-12 && id < bid)
            }
        };
        if better {
            best = Some(k);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Spawn,
    Prune,
    Promote,
    Uncorrelated,
}

/// One line of the event log. Non-finite scores and distances are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    #[serde(rename = "type")]
    pub kind: EventKind,
    pub track_index: usize,
    pub epoch_s: f64,
    pub hypothesis_id: Option<u64>,
    pub parent_id: Option<u64>,
    pub score: Option<f64>,
    pub d2: Option<f64>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackOutcome {
    Associated,
    ManeuverDetected,
    Uncorrelated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSummary {
    pub id: u64,
    pub kind: HypothesisKind,
    pub d2: f64,
    pub log_evidence: f64,
    pub log_score: f64,
    pub passed: bool,
    pub spawned: bool,
    pub pruned: bool,
}

#[derive(Debug, Clone)]
pub struct TrackReport {
    pub track_index: usize,
    pub epoch: f64,
    pub outcome: TrackOutcome,
    pub hypotheses: Vec<HypothesisSummary>,
    /// hypothesis holding the maximum score after the track
    pub leader: Option<u64>,
    /// leader estimate at the track epoch, with its (MEE, B) covariance
    pub estimate: Option<MeeState>,
    pub covariance: Option<SMatrix<f64, 7, 7>>,
    pub record: Option<ManeuverRecord>,
    pub events: Vec<SessionEvent>,
}

impl TrackReport {
    pub fn maneuver_detected(&self) -> bool {
        self.outcome == TrackOutcome::ManeuverDetected
    }
}

#[derive(Debug, Clone)]
struct TrackRecord {
    index: usize,
    epoch: f64,
    attr: Attributable,
    /// d'^2 of the ballistic hypothesis that faced this track
    ballistic_d2: f64,
    /// the ballistic population after the track
    ballistic: Option<ParticlePopulation>,
}

struct Slot {
    h: ManeuverHypothesis,
    d2: f64,
    best_d2: f64,
    log_evidence: f64,
    passed: bool,
    spawned: bool,
    at_track: ParticlePopulation,
}

#[derive(Debug, Clone)]
pub struct ShfSession {
    pub cfg: FilterConfig,
    pub force: ForceModelConfig,
    hypotheses: Vec<ManeuverHypothesis>,
    retired: Option<ManeuverHypothesis>,
    kde: HeuristicKde,
    history: VecDeque<TrackRecord>,
    events: Vec<SessionEvent>,
    uncorrelated: Vec<(usize, Attributable)>,
    next_id: u64,
    next_index: usize,
    last_epoch: f64,
    last_leader: Option<u64>,
    gate_q: f64,
    prune_q: f64,
}

impl ShfSession {
    /// Starts with a single ballistic hypothesis; tracks are numbered from
    /// `first_track_index`.
    pub fn new(initial: ParticlePopulation, force: &ForceModelConfig, cfg: FilterConfig, first_track_index: usize) -> Result<Self> {
        cfg.validate()?;
        initial.validate()?;
        let last_epoch = initial.epoch();
        Ok(Self {
            gate_q: cfg.gate_quantile(),
            prune_q: cfg.prune_quantile(),
            hypotheses: vec![ManeuverHypothesis::ballistic(0, initial, first_track_index)],
            retired: None,
            kde: HeuristicKde::new(),
            history: VecDeque::new(),
            events: Vec::new(),
            uncorrelated: Vec::new(),
            next_id: 1,
            next_index: first_track_index,
            last_epoch,
            last_leader: Some(0),
            force: force.clone(),
            cfg,
        })
    }

    pub fn hypotheses(&self) -> &[ManeuverHypothesis] {
        &self.hypotheses
    }

    pub fn kde(&self) -> &HeuristicKde {
        &self.kde
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    pub fn uncorrelated(&self) -> &[(usize, Attributable)] {
        &self.uncorrelated
    }

    pub fn in_reacquisition(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn gate_quantile(&self) -> f64 {
        self.gate_q
    }

    pub fn total_particles(&self) -> usize {
        self.hypotheses.iter().map(|h| h.population.len()).sum()
    }

    pub fn process_track(&mut self, attr: &Attributable) -> Result<TrackReport> {
        attr.validate()?;
        if attr.epoch <= self.last_epoch {
            return Err(ShfError::Domain(format!(
                "track at {} does not follow the last processed epoch {}",
                attr.epoch, self.last_epoch
            )));
        }
        let index = self.next_index;
        self.next_index += 1;
        self.last_epoch = attr.epoch;

        let (cfg, force, gate_q) = (&self.cfg, &self.force, self.gate_q);
        let assessments: Vec<Assessment> = self
            .hypotheses
            .par_iter()
            .map(|h| assess(h, attr, cfg, force, gate_q))
            .collect::<Result<_>>()?;
        let any_pass = assessments.iter().any(|a| a.pass);
        let ballistic = self.hypotheses.iter().position(|h| h.kind == HypothesisKind::Ballistic);
        let need_spawn = ballistic.map_or(!any_pass, |i| !assessments[i].pass);
        let mut spawned = Vec::new();
        if need_spawn {
            let source = ballistic.map(|i| &self.hypotheses[i]).or(self.retired.as_ref());
            if let Some(src) = source {
                let kde = cfg.heuristics.then_some(&self.kde);
                match spawn_hypotheses(src, attr, index, kde, cfg, force, self.next_id) {
                    Ok(v) => spawned = v,
                    Err(
                        ShfError::Domain(_)
                        | ShfError::CentroidFailure(_)
                        | ShfError::Numerical(_)
                        | ShfError::DegenerateGeometry(_)
                        | ShfError::NonElliptic { .. },
                    ) => {}
                    Err(e) => return Err(e),
                }
            }
        }

        if !any_pass && spawned.is_empty() {
            let event = SessionEvent {
                kind: EventKind::Uncorrelated,
                track_index: index,
                epoch_s: attr.epoch,
                hypothesis_id: None,
                parent_id: None,
                score: None,
                d2: finite(assessments.iter().map(|a| a.d2).fold(f64::INFINITY, f64::min)),
            };
            self.events.push(event.clone());
            self.uncorrelated.push((index, attr.clone()));
            let hypotheses = self
                .hypotheses
                .iter()
                .zip(&assessments)
                .map(|(h, a)| HypothesisSummary {
                    id: h.id,
                    kind: h.kind,
                    d2: a.d2,
                    log_evidence: a.log_evidence,
                    log_score: h.log_score,
                    passed: false,
                    spawned: false,
                    pruned: false,
                })
                .collect();
            return Ok(TrackReport {
                track_index: index,
                epoch: attr.epoch,
                outcome: TrackOutcome::Uncorrelated,
                hypotheses,
                leader: None,
                estimate: None,
                covariance: None,
                record: None,
                events: vec![event],
            });
        }
        self.next_id += spawned.len() as u64;
        let ballistic_d2 = ballistic.map_or(f64::INFINITY, |i| assessments[i].d2);

        // commit
        let mut slots: Vec<Slot> = std::mem::take(&mut self.hypotheses)
            .into_iter()
            .zip(assessments)
            .map(|(mut h, a)| {
                h.evidence.push((attr.epoch, a.log_evidence));
                h.tracks_since_spawn += 1;
                if a.pass {
                    h.population = a.at_track.clone();
                    h.refinement = a.refinement;
                }
                Slot {
                    h,
                    d2: a.d2,
                    best_d2: a.best_d2,
                    log_evidence: a.log_evidence,
                    passed: a.pass,
                    spawned: false,
                    at_track: a.at_track,
                }
            })
            .collect();
        for c in spawned {
            let d2 = d_prime_sq(&c.population.mean_state(), attr).unwrap_or(f64::INFINITY);
            let log_evidence = c.evidence.last().map_or(f64::NEG_INFINITY, |e| e.1);
            slots.push(Slot {
                at_track: c.population.clone(),
                h: c,
                d2,
                best_d2: 0.0,
                log_evidence,
                passed: true,
                spawned: true,
            });
        }
        let phi = self.cfg.phi;
        for s in &mut slots {
            s.h.log_score = log_score(&s.h.evidence, attr.epoch, phi);
        }
        let mut events = Vec::new();
        let event = |kind, s: &Slot| SessionEvent {
            kind,
            track_index: index,
            epoch_s: attr.epoch,
            hypothesis_id: Some(s.h.id),
            parent_id: s.h.parent_id,
            score: finite(s.h.log_score),
            d2: finite(s.d2),
        };
        for s in slots.iter().filter(|s| s.spawned) {
            events.push(event(EventKind::Spawn, s));
        }

        // prune
        let mut pruned = vec![false; slots.len()];
        for (k, s) in slots.iter().enumerate() {
            let stale = s.h.kind.is_maneuver() && !s.h.has_led && s.h.tracks_since_spawn >= RETIRE_AFTER;
            pruned[k] = !s.spawned && (s.best_d2 > self.prune_q || stale);
        }
        let mut live: Vec<usize> = (0..slots.len()).filter(|k| !pruned[*k]).collect();
        let n_maneuver = live.iter().filter(|k| slots[**k].h.kind.is_maneuver()).count();
        if n_maneuver > self.cfg.max_maneuver_hypotheses {
            let mut by_score: Vec<usize> = live.iter().copied().filter(|k| slots[*k].h.kind.is_maneuver()).collect();
            by_score.sort_by(|a, b| slots[*a].h.log_score.total_cmp(&slots[*b].h.log_score).then(slots[*b].h.id.cmp(&slots[*a].h.id)));
            for k in by_score.into_iter().take(n_maneuver - self.cfg.max_maneuver_hypotheses) {
                pruned[k] = true;
            }
            live.retain(|k| !pruned[*k]);
        }

        let scored: Vec<(u64, f64)> = live.iter().map(|k| (slots[*k].h.id, slots[*k].h.log_score)).collect();
        let leader = leader_index(&scored).map(|i| live[i]);
        for &k in &live {
            if Some(k) == leader {
                let s = &mut slots[k].h;
                s.lead_streak = if self.last_leader == Some(s.id) { s.lead_streak + 1 } else { 1 };
                s.has_led = true;
            } else {
                slots[k].h.lead_streak = 0;
            }
        }
        self.last_leader = leader.map(|k| slots[k].h.id);

        // promotion
        let mut record = None;
        if let Some(l) = leader {
            if slots[l].h.kind.is_maneuver() && slots[l].h.lead_streak >= PROMOTION_PERSISTENCE {
                let rec = self.characterize(&slots[l].h, &slots, &pruned)?;
                self.kde.push(rec.clone())?;
                record = Some(rec);
                for &k in &live {
                    if k != l {
                        pruned[k] = true;
                    }
                }
                slots[l].h.kind = HypothesisKind::Ballistic;
            }
        }
        for (k, s) in slots.iter().enumerate() {
            if pruned[k] {
                events.push(event(EventKind::Prune, s));
            }
        }
        if record.is_some() {
            let l = leader.expect("promotion has a leader");
            events.push(event(EventKind::Promote, &slots[l]));
        }

        let summaries: Vec<HypothesisSummary> = slots
            .iter()
            .enumerate()
            .map(|(k, s)| HypothesisSummary {
                id: s.h.id,
                kind: s.h.kind,
                d2: s.d2,
                log_evidence: s.log_evidence,
                log_score: s.h.log_score,
                passed: s.passed,
                spawned: s.spawned,
                pruned: pruned[k],
            })
            .collect();
        let (estimate, covariance) = match leader {
            Some(l) => {
                let pop = &slots[l].at_track;
                let mean = pop.mean_state();
                let est = perturbed_propagate(&mean, attr.epoch - mean.epoch, &self.force.without_noise(), None).ok();
                (est, Some(pop.mean_and_covariance().1))
            }
            None => (None, None),
        };
        let leader_id = leader.map(|l| slots[l].h.id);

        // hand back the survivors; a ballistic that leaves becomes the
        // reacquisition source
        for (k, s) in slots.into_iter().enumerate() {
            if pruned[k] {
                if s.h.kind == HypothesisKind::Ballistic {
                    self.retired = Some(s.h);
                }
            } else {
                self.hypotheses.push(s.h);
            }
        }
        let ballistic_pop = self
            .hypotheses
            .iter()
            .find(|h| h.kind == HypothesisKind::Ballistic)
            .map(|h| h.population.clone());
        self.history.push_back(TrackRecord {
            index,
            epoch: attr.epoch,
            attr: attr.clone(),
            ballistic_d2,
            ballistic: ballistic_pop,
        });
        while self.history.len() > RETAINED_TRACKS {
            self.history.pop_front();
        }
        self.events.extend(events.iter().cloned());
        Ok(TrackReport {
            track_index: index,
            epoch: attr.epoch,
            outcome: if record.is_some() {
                TrackOutcome::ManeuverDetected
            } else {
                TrackOutcome::Associated
            },
            hypotheses: summaries,
            leader: leader_id,
            estimate,
            covariance,
            record,
            events,
        })
    }

    /// First post-maneuver track: walking back from the spawn track over the
    /// retained tracks, every track the promoted orbit explains (within the
    /// gate and better than the ballistic hypothesis did) is post-maneuver.
    fn first_post_track(&self, post: &ManeuverHypothesis) -> (usize, f64) {
        let mut first = (post.spawn_track_index, post.spawn_epoch);
        for rec in self.history.iter().rev().filter(|r| r.index < post.spawn_track_index) {
            let d2 = propagate_population(&post.population, rec.epoch, &self.force)
                .and_then(|p| gate(&p, &rec.attr, self.gate_q))
                .map_or(f64::INFINITY, |g| g.0);
            if d2 <= self.gate_q && d2 < rec.ballistic_d2 {
                first = (rec.index, rec.epoch);
            } else {
                break;
            }
        }
        first
    }

    fn characterize(&self, post: &ManeuverHypothesis, slots: &[Slot], pruned: &[bool]) -> Result<ManeuverRecord> {
        let (first, t_first) = self.first_post_track(post);
        let from_history = self
            .history
            .iter()
            .rev()
            .filter(|r| r.index < first)
            .find_map(|r| r.ballistic.clone());
        let alive = slots
            .iter()
            .zip(pruned)
            .find(|(s, _)| s.h.kind == HypothesisKind::Ballistic)
            .map(|(s, _)| s.h.population.clone());
        let pre = from_history
            .or_else(|| self.retired.as_ref().map(|h| h.population.clone()))
            .or(alive)
            .ok_or_else(|| ShfError::InvalidState("no pre-maneuver population to characterize against".into()))?;
        let pre_at = propagate_population(&pre, t_first, &self.force)?;
        let post_at = propagate_population(&post.population, t_first, &self.force)?;
        characterize_maneuver(&pre_at, &post_at, first, post.spawn_epoch, stream_seed(self.cfg.seed, post.id, 5))
    }
}

pub fn write_event_log(path: &Path, events: &[SessionEvent]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| ShfError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for e in events {
        let line = serde_json::to_string(e).map_err(|e| ShfError::Parse(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| ShfError::io(path, e))?;
    }
    w.flush().map_err(|e| ShfError::io(path, e))
}

pub fn read_event_log(path: &Path) -> Result<Vec<SessionEvent>> {
    let text = std::fs::read_to_string(path).map_err(|e| ShfError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| ShfError::Parse(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Debug, Serialize)]
struct RecordRow {
    epoch_s: f64,
    da_km: f64,
    de: f64,
    di_rad: f64,
    cov_aa: f64,
    cov_ae: f64,
    cov_ai: f64,
    cov_ee: f64,
    cov_ei: f64,
    cov_ii: f64,
    lon_pre_rad: f64,
    inc_pre_rad: f64,
}

pub fn write_maneuver_records_csv(path: &Path, records: &[ManeuverRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::observation::csv_err(path, e))?;
    for r in records {
        let c = &r.xi_cov;
        w.serialize(RecordRow {
            epoch_s: r.detection_epoch,
            da_km: r.xi_mean[0],
            de: r.xi_mean[1],
            di_rad: r.xi_mean[2],
            cov_aa: c[(0, 0)],
            cov_ae: c[(0, 1)],
            cov_ai: c[(0, 2)],
            cov_ee: c[(1, 1)],
            cov_ei: c[(1, 2)],
            cov_ii: c[(2, 2)],
            lon_pre_rad: r.lon_pre,
            inc_pre_rad: r.inc_pre,
        })
        .map_err(|e| crate::observation::csv_err(path, e))?;
    }
    w.flush().map_err(|e| ShfError::io(path, e))
}
