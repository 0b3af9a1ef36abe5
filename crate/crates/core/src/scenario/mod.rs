//! Synthetic GEO station-keeping scenarios: truth with planned maneuvers,
//! optical tracks from ground sites, and end-to-end estimator runs.

mod config;
mod report;
mod run;
mod tracks;
mod truth;

pub use config::{
    BJumpConfig, FilterSettings, InitialOrbit, MetricsConfig, PlannerConfig, ScenarioConfig, SensorConfig, SlotConfig,
    TrackConfig,
};
pub use report::{
    emit_reports, read_csv, read_summary, write_csv, write_simulation, EventRow, ATTRIBUTABLES_FILE, B_JUMPS_FILE,
    D2_FILE, DETECTIONS_FILE, ESTIMATES_FILE, EVENTS_FILE, PCRB_FILE, RECORDS_FILE, RMSE_FILE, SUMMARY_FILE,
    TRUTH_EVENTS_FILE, TRUTH_MANEUVERS_FILE, TRUTH_STATES_FILE,
};
pub use run::{
    classify_detections, run_end_to_end, run_method, Detection, DetectionClass, DetectionCounts, EstimateRow,
    ManeuverOutcome, Method, RunReport, RunSummary, TruthManeuver, DELAY_TRACKS,
};
pub use tracks::{generate_tracks, is_visible, visibility_windows, TrackGeneration, Window};
pub use truth::{plan_station_keeping, simulate_truth, BJump, ManeuverEvent, ManeuverGroup, ManeuverKind, Truth, MAX_DV};
