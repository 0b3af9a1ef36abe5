use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::run::{Detection, EstimateRow, RunReport, RunSummary, TruthManeuver};
use super::tracks::TrackGeneration;
use super::truth::{BJump, ManeuverEvent, ManeuverKind, Truth};
use crate::metrics::{write_d2_csv, write_pcrb_csv, write_rmse_csv};
use crate::observation::{csv_err, write_attributables_csv};
use crate::shf::{write_event_log, write_maneuver_records_csv};
use crate::{Result, ShfError};

pub const SUMMARY_FILE: &str = "summary.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const ESTIMATES_FILE: &str = "estimates.csv";
pub const RMSE_FILE: &str = "rmse_by_tracks.csv";
pub const PCRB_FILE: &str = "pcrb_timeline.csv";
pub const D2_FILE: &str = "d2_samples.csv";
pub const RECORDS_FILE: &str = "maneuver_records.csv";
pub const DETECTIONS_FILE: &str = "detections.csv";
pub const TRUTH_MANEUVERS_FILE: &str = "truth_maneuvers.csv";
pub const TRUTH_EVENTS_FILE: &str = "truth_events.csv";
pub const ATTRIBUTABLES_FILE: &str = "attributables.csv";
pub const TRUTH_STATES_FILE: &str = "truth_states.csv";
pub const B_JUMPS_FILE: &str = "b_jumps.csv";

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EventRow {
    pub epoch_s: f64,
    pub kind: ManeuverKind,
    pub group: usize,
    pub dv_r_km_s: f64,
    pub dv_t_km_s: f64,
    pub dv_n_km_s: f64,
}

impl From<&ManeuverEvent> for EventRow {
    fn from(e: &ManeuverEvent) -> Self {
        Self {
            epoch_s: e.epoch,
            kind: e.kind,
            group: e.group,
            dv_r_km_s: e.dv[0],
            dv_t_km_s: e.dv[1],
            dv_n_km_s: e.dv[2],
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
struct StateRow {
    epoch_s: f64,
    p_km: f64,
    f: f64,
    g: f64,
    h: f64,
    k: f64,
    l_rad: f64,
    srp_coeff: f64,
    longitude_deg: f64,
    inclination_deg: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| ShfError::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn prepare(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ShfError::io(dir, e))
}

fn write_summary(dir: &Path, summary: &RunSummary) -> Result<()> {
    let path = dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(summary).map_err(|e| ShfError::Parse(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| ShfError::io(path, e))
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| ShfError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| ShfError::Parse(format!("{}: {e}", path.display())))
}

/// Writes the run directory and returns the files written. A report without
/// tracks gets only its summary.
pub fn emit_reports(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    prepare(dir)?;
    write_summary(dir, &report.summary())?;
    let mut written = vec![dir.join(SUMMARY_FILE)];
    if report.n_tracks == 0 {
        return Ok(written);
    }
    let mut file = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };
    write_event_log(&file(EVENTS_FILE), &report.events)?;
    write_csv::<&EstimateRow>(&file(ESTIMATES_FILE), &report.estimates)?;
    write_rmse_csv(&file(RMSE_FILE), &report.rmse)?;
    write_d2_csv(&file(D2_FILE), &report.d2)?;
    if !report.pcrb.is_empty() {
        write_pcrb_csv(&file(PCRB_FILE), &report.pcrb)?;
    }
    write_maneuver_records_csv(&file(RECORDS_FILE), &report.records)?;
    write_csv::<&Detection>(&file(DETECTIONS_FILE), &report.detections)?;
    write_csv::<&TruthManeuver>(&file(TRUTH_MANEUVERS_FILE), &report.maneuvers)?;
    write_csv(&file(TRUTH_EVENTS_FILE), report.truth_events.iter().map(EventRow::from))?;
    Ok(written)
}

/// Truth and measurement products of `simulate`.
pub fn write_simulation(truth: &Truth, tracks: &TrackGeneration, dir: &Path) -> Result<Vec<PathBuf>> {
    prepare(dir)?;
    let paths: Vec<PathBuf> = [TRUTH_EVENTS_FILE, B_JUMPS_FILE, TRUTH_STATES_FILE, ATTRIBUTABLES_FILE]
        .iter()
        .map(|n| dir.join(n))
        .collect();
    write_csv(&paths[0], truth.events.iter().map(EventRow::from))?;
    write_csv::<&BJump>(&paths[1], &truth.b_jumps)?;
    write_csv(
        &paths[2],
        truth.checkpoints.iter().map(|s| StateRow {
            epoch_s: s.epoch,
            p_km: s.p,
            f: s.f,
            g: s.g,
            h: s.h,
            k: s.k,
            l_rad: s.l,
            srp_coeff: s.srp_coeff,
            longitude_deg: crate::orbits::geo_mean_longitude(s).to_degrees(),
            inclination_deg: s.inclination().to_degrees(),
        }),
    )?;
    write_attributables_csv(&paths[3], &tracks.attributables)?;
    Ok(paths)
}
