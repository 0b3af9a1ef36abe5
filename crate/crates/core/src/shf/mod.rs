//! The stochastic hybrid filter: gating, hypothesis lifecycle and maneuver
//! characterization.

mod hypothesis;
mod kde;
mod session;

pub use hypothesis::{
    assess, characterize_maneuver, d_prime_sq, gate, log_score, propagate_population, spawn_hypotheses, Assessment, HypothesisKind,
    ManeuverHypothesis, MEMORY_TIME_UNIT,
};
pub use kde::{xi_between, HeuristicKde, ManeuverRecord};
pub use session::{
    chi2_quantile, initial_population, leader_index, read_event_log, sigma_equivalent_probability, write_event_log, write_maneuver_records_csv,
    EventKind, FilterConfig, HypothesisSummary, SessionEvent, ShfSession, TrackOutcome, TrackReport, PROMOTION_PERSISTENCE,
    RETAINED_TRACKS, RETIRE_AFTER,
};
