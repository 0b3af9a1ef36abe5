use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrackConfig;
use super::truth::Truth;
use crate::filters::stream_rng;
use crate::observation::{attributable_from_track, simulate_track, visibility, Attributable, SensorSite};
use crate::orbits::{mee_to_cart, sun_position, SECONDS_PER_DAY};
use crate::Result;

/// Visibility window of one site, [start, end] at scan resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub site: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone)]
pub struct TrackGeneration {
    pub attributables: Vec<Attributable>,
    pub windows: Vec<Window>,
    /// mean interval between consecutive tracks of each site, days
    pub reobservation_days: Vec<(String, Option<f64>)>,
}

impl TrackGeneration {
    pub fn mean_reobservation_days(&self) -> Option<f64> {
        let known: Vec<f64> = self.reobservation_days.iter().filter_map(|r| r.1).collect();
        (!known.is_empty()).then(|| known.iter().sum::<f64>() / known.len() as f64)
    }
}

pub fn is_visible(truth: &Truth, site: &SensorSite, t: f64) -> Result<bool> {
    let state = mee_to_cart(&truth.state_at(t)?);
    Ok(visibility(&state, site, &sun_position(t), t))
}

pub fn visibility_windows(truth: &Truth, sites: &[SensorSite], step: f64) -> Result<Vec<Window>> {
    let n = ((truth.end - truth.start) / step).floor() as usize + 1;
    let mut out = Vec::new();
    for (k, site) in sites.iter().enumerate() {
        let flags = (0..n)
            .into_par_iter()
            .map(|j| is_visible(truth, site, truth.start + j as f64 * step))
            .collect::<Result<Vec<bool>>>()?;
        let mut open: Option<usize> = None;
        for (j, &v) in flags.iter().chain(std::iter::once(&false)).enumerate() {
            match (open, v) {
                (None, true) => open = Some(j),
                (Some(first), false) => {
                    out.push(Window {
                        site: k,
                        start: truth.start + first as f64 * step,
                        end: truth.start + (j - 1) as f64 * step,
                    });
                    open = None;
                }
                _ => {}
            }
        }
    }
    Ok(out)
}

fn track_in_window(truth: &Truth, sites: &[SensorSite], w: &Window, index: usize, cfg: &TrackConfig, seed: u64) -> Result<Option<Attributable>> {
    let mut rng = stream_rng(seed, 100 + w.site as u64, index as u64);
    if !rng.random_bool(cfg.observe_probability) {
        return Ok(None);
    }
    let span = w.end - w.start;
    let length = (rng.random_range(cfg.min_length_min..=cfg.max_length_min) * 60.0).min(span);
    if length < cfg.min_length_min * 60.0 {
        return Ok(None);
    }
    let t0 = w.start + rng.random::<f64>() * (span - length);
    let n = (length / cfg.cadence_s).floor() as usize + 1;
    let epochs: Vec<f64> = (0..n).map(|i| t0 + i as f64 * cfg.cadence_s).collect();
    let site = &sites[w.site];
    let state = truth.state_at(t0)?;
    let mut track = if cfg.noiseless {
        let quiet = SensorSite {
            noise_sigma: 0.0,
            ..site.clone()
        };
        simulate_track(&state, &quiet, &epochs, &truth.force, &mut rng)?
    } else {
        simulate_track(&state, site, &epochs, &truth.force, &mut rng)?
    };
    track.site = site.clone();
    let attr = attributable_from_track(&track, cfg.fit_degree)?;
    // window edges are only known to the scan resolution
    if !is_visible(truth, site, attr.epoch)? {
        return Ok(None);
    }
    Ok(Some(attr))
}

/// At most one track per visibility window, kept with the configured
/// probability; attributables are returned in epoch order.
pub fn generate_tracks(truth: &Truth, sites: &[SensorSite], cfg: &TrackConfig, seed: u64) -> Result<TrackGeneration> {
    let windows = visibility_windows(truth, sites, cfg.scan_step_s)?;
    let found = windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| track_in_window(truth, sites, w, i, cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut attributables: Vec<Attributable> = found.into_iter().flatten().collect();
    attributables.sort_by(|a, b| a.epoch.total_cmp(&b.epoch));
    // two sites may observe at almost the same moment; keep the first
    attributables.dedup_by(|b, a| b.epoch - a.epoch < 1.0);
    let reobservation_days = sites
        .iter()
        .map(|s| {
            let epochs: Vec<f64> = attributables.iter().filter(|a| a.site.name == s.name).map(|a| a.epoch).collect();
            let mean = (epochs.len() >= 2)
                .then(|| (epochs[epochs.len() - 1] - epochs[0]) / (epochs.len() - 1) as f64 / SECONDS_PER_DAY);
            (s.name.clone(), mean)
        })
        .collect();
    Ok(TrackGeneration {
        attributables,
        windows,
        reobservation_days,
    })
}
