use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{Matrix3, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::tracks::{generate_tracks, TrackGeneration};
use super::truth::{simulate_truth, BJump, ManeuverEvent, ManeuverKind, Truth};
use crate::baseline_mhe::{fit_window, MheOutcome, MheSession, MheVariant};
use crate::metrics::{d2, orbit_pcrb, rmse_by_elapsed_tracks, D2Sample, Matrix7, PcrbConfig, PcrbPoint, RmseRow};
use crate::orbits::{mee_to_cart, MeeState};
use crate::shf::{chi2_quantile, initial_population, EventKind, ManeuverRecord, SessionEvent, ShfSession, TrackOutcome};
use crate::{Result, ShfError};

/// A detection up to this many tracks late still counts as delayed.
pub const DELAY_TRACKS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mhe,
    Mhe2,
    Shf,
    Shf2,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Mhe, Method::Mhe2, Method::Shf, Method::Shf2];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Mhe => "mhe",
            Method::Mhe2 => "mhe2",
            Method::Shf => "shf",
            Method::Shf2 => "shf2",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = ShfError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| ShfError::Config(format!("unknown method {s:?}; expected mhe, mhe2, shf or shf2")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionClass {
    Correct,
    Delayed,
    False,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManeuverOutcome {
    Correct,
    Delayed,
    Missed,
    /// no track between this maneuver and the next one
    Undetectable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// track at which the estimator declared the maneuver
    pub track_index: usize,
    pub epoch_s: f64,
    /// the estimator's first post-maneuver track
    pub first_post_track: usize,
    pub class: DetectionClass,
    pub group: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthManeuver {
    pub group: usize,
    pub kind: ManeuverKind,
    pub first_epoch_s: f64,
    pub last_epoch_s: f64,
    pub dv_total_mps: f64,
    pub first_post_track: Option<usize>,
    pub outcome: ManeuverOutcome,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub correct: usize,
    pub delayed: usize,
    #[serde(rename = "false")]
    pub false_detections: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub track_index: usize,
    pub epoch_s: f64,
    pub outcome: TrackOutcome,
    pub p_km: f64,
    pub f: f64,
    pub g: f64,
    pub h: f64,
    pub k: f64,
    pub l_rad: f64,
    pub srp_coeff: f64,
    pub pos_err_km: f64,
    pub vel_err_km_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub n_tracks: usize,
    pub n_maneuvers: usize,
    pub detections: DetectionCounts,
    pub runtime_s: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    pub n_tracks: usize,
    /// index of the first track the estimator processed
    pub first_track: usize,
    pub truth_events: Vec<ManeuverEvent>,
    pub b_jumps: Vec<BJump>,
    pub maneuvers: Vec<TruthManeuver>,
    pub detections: Vec<Detection>,
    pub estimates: Vec<EstimateRow>,
    pub rmse: Vec<RmseRow>,
    pub d2: Vec<D2Sample>,
    pub pcrb: Vec<PcrbPoint>,
    pub records: Vec<ManeuverRecord>,
    pub events: Vec<SessionEvent>,
    /// estimator wall-clock time
    pub runtime_s: f64,
    pub reobservation_days: Option<f64>,
    /// set when the estimator stopped early; the report covers the tracks before
    pub failure: Option<String>,
}

impl RunReport {
    pub fn empty(method: Method, seed: u64) -> Self {
        Self {
            method,
            seed,
            n_tracks: 0,
            first_track: 0,
            truth_events: Vec::new(),
            b_jumps: Vec::new(),
            maneuvers: Vec::new(),
            detections: Vec::new(),
            estimates: Vec::new(),
            rmse: Vec::new(),
            d2: Vec::new(),
            pcrb: Vec::new(),
            records: Vec::new(),
            events: Vec::new(),
            runtime_s: 0.0,
            reobservation_days: None,
            failure: None,
        }
    }

    pub fn counts(&self) -> DetectionCounts {
        let mut c = DetectionCounts::default();
        for d in &self.detections {
            match d.class {
                DetectionClass::Correct => c.correct += 1,
                DetectionClass::Delayed => c.delayed += 1,
                DetectionClass::False => c.false_detections += 1,
            }
        }
        c
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            method: self.method,
            n_tracks: self.n_tracks,
            n_maneuvers: self.maneuvers.len(),
            detections: self.counts(),
            runtime_s: self.runtime_s,
            seed: self.seed,
        }
    }

    pub fn detectable(&self) -> usize {
        self.maneuvers.iter().filter(|m| m.outcome != ManeuverOutcome::Undetectable).count()
    }

    pub fn missed(&self) -> usize {
        self.maneuvers.iter().filter(|m| m.outcome == ManeuverOutcome::Missed).count()
    }
}

/// Matches declared first post-maneuver tracks against the truth ones (`None`
/// for undetectable maneuvers). Each truth maneuver takes at most one
/// detection; the rest are false.
pub fn classify_detections(declared: &[usize], truth: &[Option<usize>]) -> (Vec<(DetectionClass, Option<usize>)>, Vec<ManeuverOutcome>) {
    let mut outcomes: Vec<ManeuverOutcome> = truth
        .iter()
        .map(|t| if t.is_some() { ManeuverOutcome::Missed } else { ManeuverOutcome::Undetectable })
        .collect();
    let classes = declared
        .iter()
        .map(|&d| {
            let hit = truth
                .iter()
                .enumerate()
                .filter(|(m, t)| outcomes[*m] == ManeuverOutcome::Missed && t.is_some_and(|t| t <= d && d <= t + DELAY_TRACKS))
                .max_by_key(|(_, t)| t.expect("detectable"));
            match hit {
                Some((m, t)) if *t == Some(d) => {
                    outcomes[m] = ManeuverOutcome::Correct;
                    (DetectionClass::Correct, Some(m))
                }
                Some((m, _)) => {
                    outcomes[m] = ManeuverOutcome::Delayed;
                    (DetectionClass::Delayed, Some(m))
                }
                None => (DetectionClass::False, None),
            }
        })
        .collect();
    (classes, outcomes)
}

/// First processed track after each truth correction starts, when it comes
/// before the next correction.
fn truth_first_posts(truth: &Truth, attrs: &[crate::observation::Attributable], first_track: usize) -> Vec<Option<usize>> {
    let groups = truth.groups();
    groups
        .iter()
        .enumerate()
        .map(|(g, m)| {
            let next = groups.get(g + 1).map_or(f64::INFINITY, |n| n.first_epoch);
            (first_track..attrs.len()).find(|&k| attrs[k].epoch > m.first_epoch && attrs[k].epoch < next)
        })
        .collect()
}

fn block6(c: &Matrix7) -> Matrix6<f64> {
    c.fixed_view::<6, 6>(0, 0).into_owned()
}

fn information6(cov: &Matrix6<f64>) -> Option<Matrix6<f64>> {
    cov.cholesky().map(|c| c.inverse())
}

struct Step {
    index: usize,
    outcome: TrackOutcome,
    estimate: Option<MeeState>,
    covariance: Option<Matrix6<f64>>,
    /// first post-maneuver track of a detection made here
    detection: Option<usize>,
}

enum Estimator {
    Mhe(MheSession),
    Shf(Box<ShfSession>),
}

fn mhe_outcome(o: MheOutcome) -> TrackOutcome {
    match o {
        MheOutcome::Associated => TrackOutcome::Associated,
        MheOutcome::ManeuverDetected => TrackOutcome::ManeuverDetected,
        MheOutcome::Uncorrelated => TrackOutcome::Uncorrelated,
    }
}

/// Runs one estimator over tracks already generated from `truth`.
pub fn run_method(cfg: &ScenarioConfig, method: Method, truth: &Truth, tracks: &TrackGeneration) -> Result<RunReport> {
    let attrs = &tracks.attributables;
    let init = cfg.filter.init_tracks;
    let mut report = RunReport::empty(method, cfg.seed);
    report.n_tracks = attrs.len();
    report.first_track = init;
    report.truth_events = truth.events.clone();
    report.b_jumps = truth.b_jumps.clone();
    report.reobservation_days = tracks.mean_reobservation_days();
    if attrs.len() <= init {
        return Err(ShfError::InsufficientData(format!(
            "{} tracks generated, the estimators need more than {init}",
            attrs.len()
        )));
    }
    if truth.events.first().is_some_and(|e| e.epoch < attrs[init - 1].epoch) {
        return Err(ShfError::Config(
            "a maneuver falls inside the initial orbit determination window; raise planner.quiet_start_days".into(),
        ));
    }

    let clock = Instant::now();
    let nominal = MeeState {
        srp_coeff: cfg.initial.srp_coeff,
        ..truth.state_at(attrs[0].epoch)?
    };
    let fit = fit_window(&attrs[..init], &nominal, &cfg.filter_force)?;
    let gate = chi2_quantile(4.0, cfg.filter_config(true).gate_probability);
    let mut estimator = match method {
        Method::Mhe | Method::Mhe2 => {
            let variant = if method == Method::Mhe { MheVariant::Detecting } else { MheVariant::TruthEpochs };
            Estimator::Mhe(
                MheSession::new(variant, fit.state, fit.covariance, &cfg.filter_force, gate, cfg.thresholds())
                    .with_window(&attrs[..init]),
            )
        }
        Method::Shf | Method::Shf2 => {
            let fcfg = cfg.filter_config(method == Method::Shf2);
            let pop = initial_population(&fit.state, &fit.covariance, cfg.filter.srp_sd, fcfg.n_h, 0, cfg.seed)?;
            Estimator::Shf(Box::new(ShfSession::new(pop, &cfg.filter_force, fcfg, init)?))
        }
    };

    let mut steps = Vec::new();
    let mut synthesized = Vec::new();
    for (k, attr) in attrs.iter().enumerate().skip(init) {
        let step = match &mut estimator {
            Estimator::Mhe(session) => {
                let previous = attrs[k - 1].epoch;
                let maneuver_before = truth.events.iter().any(|e| e.epoch > previous && e.epoch <= attr.epoch);
                session.process_track(attr, maneuver_before).map(|r| {
                    let outcome = mhe_outcome(r.outcome);
                    if outcome == TrackOutcome::ManeuverDetected {
                        synthesized.push(SessionEvent {
                            kind: EventKind::Promote,
                            track_index: k,
                            epoch_s: attr.epoch,
                            hypothesis_id: None,
                            parent_id: None,
                            score: None,
                            d2: r.d2.is_finite().then_some(r.d2),
                        });
                    }
                    Step {
                        index: k,
                        outcome,
                        estimate: r.estimate,
                        covariance: r.covariance,
                        detection: (outcome == TrackOutcome::ManeuverDetected).then_some(k),
                    }
                })
            }
            Estimator::Shf(session) => session.process_track(attr).map(|r| Step {
                index: k,
                outcome: r.outcome,
                estimate: r.estimate,
                covariance: r.covariance.as_ref().map(block6),
                detection: r
                    .maneuver_detected()
                    .then(|| r.record.as_ref().map_or(k, |rec| rec.first_track_index)),
            }),
        };
        match step {
            Ok(s) => steps.push(s),
            Err(e) => {
                report.failure = Some(format!("track {k}: {e}"));
                break;
            }
        }
    }
    report.runtime_s = clock.elapsed().as_secs_f64();
    match &estimator {
        Estimator::Mhe(_) => report.events = synthesized,
        Estimator::Shf(session) => {
            report.events = session.events().to_vec();
            report.records = session.kde().records().to_vec();
        }
    }

    // detection bookkeeping
    let truth_posts = truth_first_posts(truth, attrs, init);
    let declared: Vec<(usize, usize)> = steps.iter().filter_map(|s| s.detection.map(|d| (s.index, d))).collect();
    let (classes, outcomes) = classify_detections(&declared.iter().map(|d| d.1).collect::<Vec<_>>(), &truth_posts);
    let groups = truth.groups();
    report.detections = declared
        .iter()
        .zip(&classes)
        .map(|(&(track_index, first_post_track), &(class, m))| Detection {
            track_index,
            epoch_s: attrs[track_index].epoch,
            first_post_track,
            class,
            group: m.map(|m| groups[m].group),
        })
        .collect();
    report.maneuvers = groups
        .iter()
        .zip(truth_posts.iter().zip(&outcomes))
        .map(|(g, (post, outcome))| TruthManeuver {
            group: g.group,
            kind: g.kind,
            first_epoch_s: g.first_epoch,
            last_epoch_s: g.last_epoch,
            dv_total_mps: g.dv_total * 1e3,
            first_post_track: *post,
            outcome: *outcome,
        })
        .collect();

    // accuracy
    let mut estimates = Vec::new();
    let mut truths = Vec::new();
    let mut covs = Vec::new();
    for s in &steps {
        let Some(est) = s.estimate else { continue };
        let t = truth.state_at(est.epoch)?;
        let (a, b) = (mee_to_cart(&est), mee_to_cart(&t));
        report.estimates.push(EstimateRow {
            track_index: s.index,
            epoch_s: est.epoch,
            outcome: s.outcome,
            p_km: est.p,
            f: est.f,
            g: est.g,
            h: est.h,
            k: est.k,
            l_rad: est.l,
            srp_coeff: est.srp_coeff,
            pos_err_km: (a.position - b.position).norm(),
            vel_err_km_s: (a.velocity - b.velocity).norm(),
        });
        estimates.push(est);
        truths.push(t);
        covs.push((s.index, s.covariance));
    }
    let burn_epochs: Vec<f64> = truth.events.iter().map(|e| e.epoch).collect();
    report.rmse = rmse_by_elapsed_tracks(&estimates, &truths, &burn_epochs)?;

    if cfg.metrics.pcrb_samples > 0 {
        let start = truth.state_at(attrs[0].epoch)?;
        let mut cov0 = Matrix7::zeros();
        cov0.fixed_view_mut::<6, 6>(0, 0).copy_from(&fit.covariance);
        cov0[(6, 6)] = cfg.filter.srp_sd * cfg.filter.srp_sd;
        let sd = cfg.metrics.pcrb_dv_sigma_mps * 1e-3;
        let pcfg = PcrbConfig {
            n_mc: cfg.metrics.pcrb_samples,
            seed: cfg.seed,
            ..PcrbConfig::default()
        };
        report.pcrb = orbit_pcrb(
            &start,
            &cov0,
            &attrs[init..],
            &truth.impulses(),
            &Matrix3::from_diagonal_element(sd * sd),
            &truth.force,
            &pcfg,
        )?;
    }
    for ((est, t), (index, cov)) in estimates.iter().zip(&truths).zip(&covs) {
        let x: Vector6<f64> = est.elements();
        let y: Vector6<f64> = t.elements();
        let Some(info) = cov.as_ref().and_then(information6) else { continue };
        let bound = report
            .pcrb
            .get(index - init)
            .and_then(|p| p.j.cholesky().map(|c| c.inverse()))
            .and_then(|c| information6(&block6(&c)));
        report.d2.push(D2Sample {
            track_index: *index,
            epoch_s: est.epoch,
            d2_filter: d2(&x, &y, &info),
            d2_pcrb: bound.map(|b| d2(&x, &y, &b)),
        });
    }
    Ok(report)
}

/// Truth, tracks and one estimator run from the configuration alone.
pub fn run_end_to_end(cfg: &ScenarioConfig, method: Method) -> Result<RunReport> {
    let truth = simulate_truth(cfg)?;
    let tracks = generate_tracks(&truth, &cfg.sites(), &cfg.tracks, cfg.seed)?;
    run_method(cfg, method, &truth, &tracks)
}
