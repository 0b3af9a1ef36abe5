use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::Vector3;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use crate::filters::stream_rng;
use crate::orbits::{
    apply_impulse, cart_to_mee_near, geo_mean_longitude, mee_to_cart, perturbed_propagate, sensitivity_matrix, sun_position,
    wrap_pi, ForceModelConfig, MeeState, EARTH_ROTATION_RATE, SECONDS_PER_DAY,
};
use crate::{Result, ShfError};

/// Largest impulse the planner may command, km/s.
pub const MAX_DV: f64 = 0.05;

/// Relative angular rate of a geostationary satellite and the Sun.
const SOLAR_DAY_RATE: f64 = 2.0 * PI / SECONDS_PER_DAY;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManeuverKind {
    Nssk,
    EwskBurn1,
    EwskBurn2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManeuverEvent {
    pub epoch: f64,
    pub kind: ManeuverKind,
    /// RTN, km/s
    pub dv: Vector3<f64>,
    /// burns of one station-keeping correction share a group
    pub group: usize,
}

impl ManeuverEvent {
    pub fn validate(&self) -> Result<()> {
        if !(self.dv.norm() <= MAX_DV) {
            return Err(ShfError::Planning(format!(
                "impulse of {:.4} km/s at {} exceeds {MAX_DV} km/s",
                self.dv.norm(),
                self.epoch
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BJump {
    pub epoch: f64,
    pub delta: f64,
    pub srp_after: f64,
}

/// One station-keeping correction: a single NSSK burn or an EWSK pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManeuverGroup {
    pub group: usize,
    pub kind: ManeuverKind,
    pub first_epoch: f64,
    pub last_epoch: f64,
    pub dv_total: f64,
}

#[derive(Debug, Clone)]
pub struct Truth {
    /// states after every event and at every planner check, by epoch
    pub checkpoints: Vec<MeeState>,
    pub events: Vec<ManeuverEvent>,
    pub b_jumps: Vec<BJump>,
    pub force: ForceModelConfig,
    pub start: f64,
    pub end: f64,
}

impl Truth {
    pub fn state_at(&self, t: f64) -> Result<MeeState> {
        let k = self.checkpoints.partition_point(|c| c.epoch <= t).max(1) - 1;
        let c = &self.checkpoints[k];
        perturbed_propagate(c, t - c.epoch, &self.force, None)
    }

    pub fn groups(&self) -> Vec<ManeuverGroup> {
        let mut out: Vec<ManeuverGroup> = Vec::new();
        for e in &self.events {
            match out.last_mut() {
                Some(g) if g.group == e.group => {
                    g.last_epoch = e.epoch;
                    g.dv_total += e.dv.norm();
                }
                _ => out.push(ManeuverGroup {
                    group: e.group,
                    kind: e.kind,
                    first_epoch: e.epoch,
                    last_epoch: e.epoch,
                    dv_total: e.dv.norm(),
                }),
            }
        }
        out
    }

    pub fn impulses(&self) -> Vec<(f64, Vector3<f64>)> {
        self.events.iter().map(|e| (e.epoch, e.dv)).collect()
    }
}

fn argument_of_latitude(s: &MeeState) -> f64 {
    s.l - s.k.atan2(s.h)
}

/// Satellite local solar time as an angle: 0 at local midnight.
fn local_time_angle(s: &MeeState) -> f64 {
    let r = mee_to_cart(s).position;
    let sun = sun_position(s.epoch);
    wrap_pi(r.y.atan2(r.x) - sun.y.atan2(sun.x) + PI)
}

/// Refines `t` so that `residual(state(t))` (an angle advancing at `rate`)
/// reaches zero.
fn solve_epoch(
    from: &MeeState,
    mut t: f64,
    rate: f64,
    force: &ForceModelConfig,
    residual: impl Fn(&MeeState) -> f64,
) -> Result<MeeState> {
    let mut s = perturbed_propagate(from, t - from.epoch, force, None)?;
    for _ in 0..3 {
        t -= residual(&s) / rate;
        s = perturbed_propagate(from, t - from.epoch, force, None)?;
    }
    Ok(s)
}

fn nssk(cfg: &ScenarioConfig, now: &MeeState, force: &ForceModelConfig) -> Result<Vec<ManeuverEvent>> {
    let n = now.mean_motion();
    let u = argument_of_latitude(now);
    let mut wait = (PI - u.rem_euclid(PI)) / n;
    if wait < 3600.0 {
        wait += PI / n;
    }
    let node = solve_epoch(now, now.epoch + wait, n, force, |s| {
        let u = argument_of_latitude(s);
        u - PI * (u / PI).round()
    })?;
    let di = cfg.slot.inclination_center_deg.to_radians() - node.inclination();
    let v = mee_to_cart(&node).velocity.norm();
    let sign = di.signum() * argument_of_latitude(&node).cos().signum();
    let dv = Vector3::new(0.0, 0.0, sign * 2.0 * v * (di.abs() / 2.0).sin());
    Ok(vec![ManeuverEvent {
        epoch: node.epoch,
        kind: ManeuverKind::Nssk,
        dv,
        group: 0,
    }])
}

fn ewsk(cfg: &ScenarioConfig, now: &MeeState, drift: f64, force: &ForceModelConfig) -> Result<Vec<ManeuverEvent>> {
    let target_angle = (cfg.planner.ewsk_local_hour / 24.0) * 2.0 * PI;
    let rate = EARTH_ROTATION_RATE - (2.0 * PI / (365.25 * SECONDS_PER_DAY));
    let mut wait = (target_angle - local_time_angle(now)).rem_euclid(2.0 * PI) / rate;
    if wait < 3600.0 {
        wait += 2.0 * PI / rate;
    }
    let first = solve_epoch(now, now.epoch + wait, SOLAR_DAY_RATE, force, |s| {
        wrap_pi(local_time_angle(s) - target_angle)
    })?;
    let lon = geo_mean_longitude(now);
    let center = cfg.slot.longitude_center_deg.to_radians();
    let min_drift = cfg.planner.min_drift_deg_per_day.to_radians() / SECONDS_PER_DAY;
    let target = wrap_pi(center - lon).signum() * drift.abs().max(min_drift);
    let a = first.semi_major_axis();
    let n = first.mean_motion();
    // drift rate = -3/2 (n / a) delta-a
    let da = -(target - drift) * a / (1.5 * n);
    let g = sensitivity_matrix(&first);
    let dv_t = da / (2.0 * g[(0, 1)]);
    let second_epoch = first.epoch + PI / n;
    Ok(vec![
        ManeuverEvent {
            epoch: first.epoch,
            kind: ManeuverKind::EwskBurn1,
            dv: Vector3::new(0.0, dv_t, 0.0),
            group: 0,
        },
        ManeuverEvent {
            epoch: second_epoch,
            kind: ManeuverKind::EwskBurn2,
            dv: Vector3::new(0.0, dv_t, 0.0),
            group: 0,
        },
    ])
}

/// Next station-keeping correction given the current truth state and the
/// state one planner interval earlier. East-west corrections take priority;
/// an empty list means the object stays in its slot.
pub fn plan_station_keeping(cfg: &ScenarioConfig, now: &MeeState, previous: &MeeState) -> Result<Vec<ManeuverEvent>> {
    let force = cfg.truth_force.without_noise();
    let slot = &cfg.slot;
    let lon = geo_mean_longitude(now);
    let dt = now.epoch - previous.epoch;
    let drift = if dt > 0.0 {
        wrap_pi(lon - geo_mean_longitude(previous)) / dt
    } else {
        0.0
    };
    let center = slot.longitude_center_deg.to_radians();
    let half = slot.longitude_halfwidth_deg.to_radians();
    // distance still to go to the edge the object drifts toward
    let ahead = half - drift.signum() * wrap_pi(lon - center) - drift.abs() * cfg.planner.lead_days * SECONDS_PER_DAY;
    // an inclination correction is started early enough that a following
    // east-west pair cannot hold it off until the object leaves the band
    let di = now.inclination() - slot.inclination_center_deg.to_radians();
    let di_rate = if dt > 0.0 {
        (now.inclination() - previous.inclination()) / dt
    } else {
        0.0
    };
    let horizon = (cfg.planner.lead_days + cfg.planner.min_separation_days) * SECONDS_PER_DAY;
    let i_half = slot.inclination_halfwidth_deg.to_radians();
    let plan = if drift != 0.0 && ahead <= cfg.planner.edge_fraction * half {
        ewsk(cfg, now, drift, &force)?
    } else if di.abs() > i_half || (di + di_rate * horizon).abs() > i_half {
        nssk(cfg, now, &force)?
    } else {
        Vec::new()
    };
    for e in &plan {
        e.validate()?;
    }
    Ok(plan)
}

fn apply(state: &MeeState, dv: &Vector3<f64>) -> Result<MeeState> {
    cart_to_mee_near(&apply_impulse(&mee_to_cart(state), dv), state.l)
}

/// Truth trajectory over the scenario with planned maneuvers and B jumps.
pub fn simulate_truth(cfg: &ScenarioConfig) -> Result<Truth> {
    cfg.validate()?;
    let force = cfg.truth_force.without_noise();
    let (start, end) = (cfg.start(), cfg.end());
    let interval = cfg.planner.check_interval_days * SECONDS_PER_DAY;
    let mut jump_rng = stream_rng(cfg.seed, 7, 0);
    let jumps = cfg
        .b_jumps
        .as_ref()
        .filter(|b| b.mean_interval_days.is_finite())
        .map(|b| {
            (
                Exp::new(1.0 / (b.mean_interval_days * SECONDS_PER_DAY)).expect("positive rate"),
                Normal::new(0.0, b.sigma).expect("nonnegative sigma"),
            )
        });
    let mut next_jump = match &jumps {
        Some((exp, _)) => start + exp.sample(&mut jump_rng),
        None => f64::INFINITY,
    };

    let mut state = cfg.initial_state();
    let mut checkpoints = vec![state];
    let mut events = Vec::new();
    let mut b_jumps = Vec::new();
    let mut pending: VecDeque<ManeuverEvent> = VecDeque::new();
    let mut previous_check = state;
    let mut next_check = start + interval;
    let mut last_group_end = start - f64::INFINITY;
    let quiet_until = start + cfg.planner.quiet_start_days * SECONDS_PER_DAY;
    let mut group = 0;
    loop {
        let next_burn = pending.front().map_or(f64::INFINITY, |e| e.epoch);
        let t = next_burn.min(next_jump).min(next_check).min(end);
        state = perturbed_propagate(&state, t - state.epoch, &force, None)?;
        if t == next_burn {
            let e = pending.pop_front().expect("pending burn");
            state = apply(&state, &e.dv)?;
            last_group_end = e.epoch;
            events.push(e);
        } else if t == next_jump {
            let (exp, normal) = jumps.as_ref().expect("jumps are configured");
            let delta = normal.sample(&mut jump_rng);
            state.srp_coeff = (state.srp_coeff + delta).abs();
            b_jumps.push(BJump {
                epoch: t,
                delta,
                srp_after: state.srp_coeff,
            });
            next_jump = t + exp.sample(&mut jump_rng);
        } else if t == next_check && t < end {
            let spaced = t - last_group_end >= cfg.planner.min_separation_days * SECONDS_PER_DAY;
            if pending.is_empty() && spaced && t >= quiet_until {
                let plan = plan_station_keeping(cfg, &state, &previous_check)?;
                // a correction that cannot finish inside the scenario is not started
                if plan.last().is_some_and(|e| e.epoch < end) {
                    for mut e in plan {
                        e.group = group;
                        pending.push_back(e);
                    }
                    group += 1;
                }
            }
            previous_check = state;
            next_check += interval;
        }
        checkpoints.push(state);
        if t >= end {
            break;
        }
    }
    Ok(Truth {
        checkpoints,
        events,
        b_jumps,
        force,
        start,
        end,
    })
}
