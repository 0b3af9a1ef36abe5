mod error;
pub mod admissible_region;
pub mod baseline_mhe;
pub mod control_metric;
pub mod filters;
pub mod mcmc;
pub mod metrics;
pub mod observation;
pub mod optim;
pub mod orbits;
pub mod scenario;
pub mod shf;

pub use error::{Result, ShfError};
