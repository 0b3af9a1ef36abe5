use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::admissible_region::RegionThresholds;
use crate::mcmc::ChainConfig;
use crate::observation::SensorSite;
use crate::orbits::{
    circular_radius_for_period, earth_rotation_angle, ForceModelConfig, MeeState, EARTH_ROTATION_RATE, SECONDS_PER_DAY,
};
use crate::shf::{sigma_equivalent_probability, FilterConfig};
use crate::{Result, ShfError};

const ARCSEC: f64 = std::f64::consts::PI / (180.0 * 3600.0);

/// Full scenario description. Angles are degrees, lengths km, speeds m/s
/// where the field name says so.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    #[serde(default = "default_duration")]
    pub duration_days: f64,
    /// seconds past J2000
    pub start_epoch_s: f64,
    pub initial: InitialOrbit,
    pub slot: SlotConfig,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default = "ForceModelConfig::geo_standard")]
    pub truth_force: ForceModelConfig,
    #[serde(default = "ForceModelConfig::geo_standard")]
    pub filter_force: ForceModelConfig,
    pub sensors: Vec<SensorConfig>,
    #[serde(default)]
    pub b_jumps: Option<BJumpConfig>,
    #[serde(default)]
    pub tracks: TrackConfig,
    #[serde(default)]
    pub filter: FilterSettings,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

fn default_duration() -> f64 {
    60.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialOrbit {
    pub longitude_deg: f64,
    pub inclination_deg: f64,
    pub raan_deg: f64,
    /// semi-major axis above the geosynchronous radius
    #[serde(default)]
    pub sma_offset_km: f64,
    #[serde(default)]
    pub eccentricity: f64,
    #[serde(default)]
    pub perigee_longitude_deg: f64,
    #[serde(default = "default_srp")]
    pub srp_coeff: f64,
}

fn default_srp() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotConfig {
    pub longitude_center_deg: f64,
    pub longitude_halfwidth_deg: f64,
    pub inclination_center_deg: f64,
    pub inclination_halfwidth_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub check_interval_days: f64,
    /// east-west correction starts this close to an edge, as a fraction of
    /// the halfwidth
    pub edge_fraction: f64,
    /// drift assumed to elapse before a planned correction takes effect
    pub lead_days: f64,
    /// smallest drift rate commanded by a correction
    pub min_drift_deg_per_day: f64,
    /// satellite local solar time of the first east-west burn
    pub ewsk_local_hour: f64,
    /// no maneuver starts within this many days of the previous one
    pub min_separation_days: f64,
    /// no maneuver during the initial orbit determination
    pub quiet_start_days: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            check_interval_days: 1.0,
            edge_fraction: 0.1,
            lead_days: 1.5,
            min_drift_deg_per_day: 0.01,
            ewsk_local_hour: 6.0,
            min_separation_days: 2.0,
            quiet_start_days: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub name: String,
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    #[serde(default)]
    pub altitude_km: f64,
    #[serde(default = "default_mask")]
    pub elevation_mask_deg: f64,
    #[serde(default = "default_noise")]
    pub noise_arcsec: f64,
}

fn default_mask() -> f64 {
    20.0
}

fn default_noise() -> f64 {
    1.0
}

impl SensorConfig {
    pub fn site(&self) -> SensorSite {
        SensorSite {
            name: self.name.clone(),
            latitude: self.latitude_deg.to_radians(),
            longitude: self.longitude_deg.to_radians(),
            altitude: self.altitude_km,
            elevation_mask: self.elevation_mask_deg.to_radians(),
            noise_sigma: self.noise_arcsec * ARCSEC,
        }
    }
}

/// Poisson process of jumps in the SRP coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BJumpConfig {
    /// mean time between jumps; `inf` disables them
    pub mean_interval_days: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackConfig {
    pub min_length_min: f64,
    pub max_length_min: f64,
    pub cadence_s: f64,
    /// chance that a visibility window yields a track
    pub observe_probability: f64,
    pub scan_step_s: f64,
    pub fit_degree: usize,
    /// simulate without measurement noise (covariances still use the site sigma)
    pub noiseless: bool,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            min_length_min: 2.0,
            max_length_min: 10.0,
            cadence_s: 30.0,
            observe_probability: 0.5,
            scan_step_s: 600.0,
            fit_degree: 2,
            noiseless: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSettings {
    pub n_h: usize,
    pub phi: f64,
    pub p_max_mps: f64,
    pub p_min_mps: f64,
    pub k_p: f64,
    pub gate_sigma: f64,
    pub prune_sigma: f64,
    pub kappa: Option<f64>,
    pub kappa_h: f64,
    pub ess_min: f64,
    pub n_chains: usize,
    pub n_generations: usize,
    pub n_draws: usize,
    pub refine_tracks: usize,
    pub max_maneuver_hypotheses: usize,
    /// tracks fitted in batch to start every estimator
    pub init_tracks: usize,
    /// spread of the SRP coefficient in the initial population
    pub srp_sd: f64,
}

impl Default for FilterSettings {
    fn default() -> Self {
        let chains = ChainConfig::default();
        Self {
            n_h: 1000,
            phi: 0.95,
            p_max_mps: 10.0,
            p_min_mps: 1.0,
            k_p: 3.0,
            gate_sigma: 3.0,
            prune_sigma: 5.0,
            kappa: None,
            kappa_h: 1.0,
            ess_min: 500.0,
            n_chains: chains.n_chains,
            n_generations: chains.n_generations,
            n_draws: chains.n_draws,
            refine_tracks: 3,
            max_maneuver_hypotheses: 4,
            init_tracks: 3,
            srp_sd: 0.002,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Monte Carlo draws of the bound; 0 skips it
    pub pcrb_samples: usize,
    /// per-axis delta-v spread assumed at the truth burns
    pub pcrb_dv_sigma_mps: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            pcrb_samples: 100,
            pcrb_dv_sigma_mps: 1.0,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ShfError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ShfError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ShfError::Config(m) => ShfError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario config serializes")
    }

    /// Two European-longitude optical sites, narrow station-keeping bands, matched truth
    /// and filter models.
    pub fn desk() -> Self {
        Self {
            seed: 2024,
            duration_days: 60.0,
            start_epoch_s: 300.0 * SECONDS_PER_DAY,
            initial: InitialOrbit {
                longitude_deg: -4.95,
                inclination_deg: 2.0,
                raan_deg: 60.0,
                sma_offset_km: 1.5,
                eccentricity: 2e-4,
                perigee_longitude_deg: 30.0,
                srp_coeff: 0.02,
            },
            slot: SlotConfig {
                longitude_center_deg: -4.8,
                longitude_halfwidth_deg: 0.2,
                inclination_center_deg: 2.0,
                inclination_halfwidth_deg: 0.05,
            },
            planner: PlannerConfig::default(),
            truth_force: ForceModelConfig::geo_standard(),
            filter_force: ForceModelConfig::geo_standard(),
            sensors: vec![
                SensorConfig {
                    name: "zimmerwald".into(),
                    latitude_deg: 46.877,
                    longitude_deg: 7.465,
                    altitude_km: 0.951,
                    elevation_mask_deg: 20.0,
                    noise_arcsec: 1.0,
                },
                SensorConfig {
                    name: "tenerife".into(),
                    latitude_deg: 28.301,
                    longitude_deg: -16.512,
                    altitude_km: 2.39,
                    elevation_mask_deg: 20.0,
                    noise_arcsec: 1.0,
                },
            ],
            b_jumps: None,
            tracks: TrackConfig::default(),
            filter: FilterSettings::default(),
            metrics: MetricsConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ShfError::Config(m));
        if !(self.duration_days > 0.0 && self.duration_days.is_finite()) {
            return bad(format!("duration_days must be positive, got {}", self.duration_days));
        }
        if !self.start_epoch_s.is_finite() {
            return bad("start_epoch_s must be finite".into());
        }
        let s = &self.slot;
        if !(s.longitude_halfwidth_deg > 0.0 && s.inclination_halfwidth_deg > 0.0) {
            return bad("slot halfwidths must be positive".into());
        }
        let i = &self.initial;
        if !(i.eccentricity >= 0.0 && i.eccentricity < 0.1) || !(i.srp_coeff >= 0.0) {
            return bad("initial orbit needs 0 <= e < 0.1 and a nonnegative SRP coefficient".into());
        }
        if !(i.inclination_deg >= 0.0 && i.inclination_deg < 90.0) {
            return bad(format!("initial inclination must lie in [0, 90) deg, got {}", i.inclination_deg));
        }
        let p = &self.planner;
        if !(p.check_interval_days > 0.0 && p.edge_fraction >= 0.0 && p.edge_fraction < 1.0 && p.lead_days >= 0.0) {
            return bad("planner needs a positive check interval and an edge fraction in [0, 1)".into());
        }
        if !(p.min_drift_deg_per_day > 0.0 && p.min_separation_days >= 0.0 && p.quiet_start_days >= 0.0) {
            return bad("planner drift and spacing settings must be positive".into());
        }
        self.truth_force.validate()?;
        self.filter_force.validate()?;
        if self.sensors.is_empty() {
            return bad("at least one sensor is required".into());
        }
        for sensor in &self.sensors {
            if !(sensor.noise_arcsec > 0.0) {
                return bad(format!("sensor {} needs a positive noise sigma", sensor.name));
            }
            sensor.site().validate()?;
        }
        if let Some(b) = &self.b_jumps {
            if !(b.mean_interval_days > 0.0) || !(b.sigma >= 0.0) {
                return bad("B jumps need a positive mean interval and a nonnegative sigma".into());
            }
        }
        let t = &self.tracks;
        if !(t.min_length_min > 0.0 && t.max_length_min >= t.min_length_min && t.cadence_s > 0.0 && t.scan_step_s > 0.0) {
            return bad("track lengths, cadence and scan step must be positive and ordered".into());
        }
        if !(0.0..=1.0).contains(&t.observe_probability) || t.fit_degree == 0 {
            return bad("observe_probability must lie in [0, 1] and fit_degree be positive".into());
        }
        if (t.min_length_min * 60.0 / t.cadence_s).floor() as usize + 1 < t.fit_degree + 2 {
            return bad("the shortest track has too few points for the fit degree".into());
        }
        if self.filter.init_tracks < 2 {
            return bad("init_tracks must be at least 2".into());
        }
        if !(self.metrics.pcrb_samples == 0 || self.metrics.pcrb_samples >= 100) || !(self.metrics.pcrb_dv_sigma_mps > 0.0) {
            return bad("pcrb_samples must be 0 or at least 100, and the delta-v sigma positive".into());
        }
        self.filter_config(true).validate()
    }

    pub fn thresholds(&self) -> RegionThresholds {
        RegionThresholds {
            p_max: self.filter.p_max_mps * 1e-3,
            p_min: self.filter.p_min_mps * 1e-3,
            k_p: self.filter.k_p,
        }
    }

    pub fn filter_config(&self, heuristics: bool) -> FilterConfig {
        let f = &self.filter;
        FilterConfig {
            thresholds: self.thresholds(),
            gate_probability: sigma_equivalent_probability(f.gate_sigma),
            prune_probability: sigma_equivalent_probability(f.prune_sigma),
            phi: f.phi,
            n_h: f.n_h,
            kappa: f.kappa,
            kappa_h: f.kappa_h,
            ess_min: f.ess_min,
            heuristics,
            chains: ChainConfig {
                n_chains: f.n_chains,
                n_generations: f.n_generations,
                n_draws: f.n_draws,
                ..ChainConfig::default()
            },
            refine_tracks: f.refine_tracks,
            max_maneuver_hypotheses: f.max_maneuver_hypotheses,
            seed: self.seed,
        }
    }

    pub fn sites(&self) -> Vec<SensorSite> {
        self.sensors.iter().map(SensorConfig::site).collect()
    }

    pub fn start(&self) -> f64 {
        self.start_epoch_s
    }

    pub fn end(&self) -> f64 {
        self.start_epoch_s + self.duration_days * SECONDS_PER_DAY
    }

    pub fn initial_state(&self) -> MeeState {
        let i = &self.initial;
        let a = circular_radius_for_period(2.0 * std::f64::consts::PI / EARTH_ROTATION_RATE) + i.sma_offset_km;
        let e = i.eccentricity;
        let varpi = i.perigee_longitude_deg.to_radians();
        let t = (i.inclination_deg.to_radians() / 2.0).tan();
        let raan = i.raan_deg.to_radians();
        MeeState {
            p: a * (1.0 - e * e),
            f: e * varpi.cos(),
            g: e * varpi.sin(),
            h: t * raan.cos(),
            k: t * raan.sin(),
            l: i.longitude_deg.to_radians() + earth_rotation_angle(self.start_epoch_s),
            srp_coeff: i.srp_coeff,
            epoch: self.start_epoch_s,
        }
    }
}
