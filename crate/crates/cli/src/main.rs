use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use shf_core::admissible_region::{build_region, ControlReference};
use shf_core::metrics::{chi2_consistency, spearman, D2Sample, RmseRow};
use shf_core::scenario::{
    emit_reports, generate_tracks, read_csv, read_summary, run_end_to_end, simulate_truth, write_csv, write_simulation,
    Method, ScenarioConfig, D2_FILE, RMSE_FILE,
};
use shf_core::ShfError;

/// Maneuver detection on simulated GEO optical tracks.
#[derive(Parser)]
#[command(name = "shf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the truth trajectory and the optical tracks.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one estimator end to end and write its report.
    Track {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample the control distance over the admissible region of one track.
    Region {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        track_index: usize,
        #[arg(long, default_value_t = 101)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Consistency and trend statistics of a finished run.
    Metrics {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Detection and RMSE table over several runs.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        run_dirs: Vec<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ShfError> for Failure {
    fn from(e: ShfError) -> Self {
        match e {
            ShfError::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn load(path: &Path) -> Result<ScenarioConfig, Failure> {
    // an unreadable config file is a configuration problem too
    ScenarioConfig::load(path).map_err(|e| match e {
        ShfError::Io { .. } | ShfError::Config(_) => Failure::Config(e.to_string()),
        other => other.into(),
    })
}

fn print(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("JSON values serialize"));
}

fn simulate(config: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = load(config)?;
    let truth = simulate_truth(&cfg)?;
    let tracks = generate_tracks(&truth, &cfg.sites(), &cfg.tracks, cfg.seed)?;
    write_simulation(&truth, &tracks, out)?;
    print(&json!({
        "maneuver_groups": truth.groups().len(),
        "burns": truth.events.len(),
        "b_jumps": truth.b_jumps.len(),
        "tracks": tracks.attributables.len(),
        "reobservation_days": tracks.reobservation_days,
    }));
    Ok(())
}

fn track(config: &Path, method: Method, out: &Path) -> Result<(), Failure> {
    let cfg = load(config)?;
    let report = run_end_to_end(&cfg, method)?;
    emit_reports(&report, out)?;
    print(&serde_json::to_value(report.summary()).expect("summary serializes"));
    match &report.failure {
        Some(reason) => Err(Failure::Runtime(format!("estimator stopped early: {reason}"))),
        None => Ok(()),
    }
}

fn region(config: &Path, k: usize, grid: usize, out: &Path) -> Result<(), Failure> {
    let cfg = load(config)?;
    if grid < 2 {
        return Err(Failure::Config("configuration error: --grid needs at least 2 points per axis".into()));
    }
    let truth = simulate_truth(&cfg)?;
    let tracks = generate_tracks(&truth, &cfg.sites(), &cfg.tracks, cfg.seed)?;
    let attrs = &tracks.attributables;
    if k == 0 || k >= attrs.len() {
        return Err(Failure::Config(format!(
            "configuration error: --track-index must lie in 1..{} (the previous track fixes the prior orbit)",
            attrs.len()
        )));
    }
    let pre = truth.state_at(attrs[k - 1].epoch)?;
    let attr = &attrs[k];
    let reference = ControlReference::new(&pre, attr.epoch, &cfg.filter_force)?;
    let r = build_region(&reference, attr, &cfg.thresholds())?;
    let axis = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (grid - 1) as f64;
    let rows: Vec<(f64, f64, f64)> = {
        use rayon::prelude::*;
        (0..grid * grid)
            .into_par_iter()
            .map(|n| {
                let rho = axis(r.lo[4], r.hi[4], n / grid);
                let rate = axis(r.lo[5], r.hi[5], n % grid);
                (rho, rate, reference.distance_at(attr, rho, rate))
            })
            .collect()
    };
    std::fs::create_dir_all(out).map_err(|e| ShfError::io(out, e))?;
    #[derive(serde::Serialize)]
    struct Row {
        rho_km: f64,
        rho_rate_km_s: f64,
        #[serde(rename = "P_km_s")]
        p_km_s: f64,
    }
    write_csv(
        &out.join("region_grid.csv"),
        rows.iter().map(|&(rho_km, rho_rate_km_s, p_km_s)| Row {
            rho_km,
            rho_rate_km_s,
            p_km_s,
        }),
    )?;
    let summary = json!({
        "track_index": k,
        "epoch_s": attr.epoch,
        "p_centroid_km_s": r.p_centroid,
        "p_adm_km_s": r.p_adm,
        "rho_star_km": r.rho_star,
        "rho_rate_star_km_s": r.rho_rate_star,
        "rho_km": [r.lo[4], r.hi[4]],
        "rho_rate_km_s": [r.lo[5], r.hi[5]],
        "capped": r.capped,
    });
    let path = out.join("region.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary).expect("JSON values serialize") + "\n")
        .map_err(|e| ShfError::io(&path, e))?;
    print(&summary);
    Ok(())
}

fn consistency(samples: &[f64]) -> serde_json::Value {
    match chi2_consistency(samples, 6.0) {
        Ok(c) => json!({
            "n": c.n,
            "ks_statistic": c.ks_statistic,
            "p_value": c.p_value,
            "skewness_excess": c.skewness_excess,
        }),
        Err(e) => json!({ "n": samples.len(), "error": e.to_string() }),
    }
}

fn rmse_trend(rmse: &[RmseRow]) -> Option<f64> {
    let first: Vec<&RmseRow> = rmse.iter().filter(|r| (1..=5).contains(&r.n_tracks)).collect();
    let n: Vec<f64> = first.iter().map(|r| r.n_tracks as f64).collect();
    let e: Vec<f64> = first.iter().map(|r| r.pos_rmse_km).collect();
    spearman(&n, &e)
}

fn metrics(dir: &Path) -> Result<(), Failure> {
    let summary = read_summary(dir)?;
    let d2: Vec<D2Sample> = read_csv(&dir.join(D2_FILE))?;
    let rmse: Vec<RmseRow> = read_csv(&dir.join(RMSE_FILE))?;
    let filter: Vec<f64> = d2.iter().map(|s| s.d2_filter).filter(|v| v.is_finite()).collect();
    let bound: Vec<f64> = d2.iter().filter_map(|s| s.d2_pcrb).filter(|v| v.is_finite()).collect();
    let value = json!({
        "method": summary.method,
        "d2_filter": consistency(&filter),
        "d2_pcrb": if bound.is_empty() { serde_json::Value::Null } else { consistency(&bound) },
        "rmse_spearman_n1_5": rmse_trend(&rmse),
        "rmse_km": rmse.iter().map(|r| (r.n_tracks, r.pos_rmse_km)).collect::<Vec<_>>(),
    });
    let path = dir.join("metrics.json");
    std::fs::write(&path, serde_json::to_string_pretty(&value).expect("JSON values serialize") + "\n")
        .map_err(|e| ShfError::io(&path, e))?;
    print(&value);
    Ok(())
}

fn compare(dirs: &[PathBuf]) -> Result<(), Failure> {
    println!(
        "{:<28} {:>6} {:>6} {:>8} {:>8} {:>6} {:>9}  {}",
        "run", "method", "tracks", "correct", "delayed", "false", "time_s", "RMSE km at n_T = 1..5"
    );
    for dir in dirs {
        let s = read_summary(dir)?;
        let rmse: Vec<RmseRow> = read_csv(&dir.join(RMSE_FILE)).unwrap_or_default();
        let cells: Vec<String> = (1..=5)
            .map(|n| {
                rmse.iter()
                    .find(|r| r.n_tracks == n)
                    .map_or("-".into(), |r| format!("{:.3}", r.pos_rmse_km))
            })
            .collect();
        println!(
            "{:<28} {:>6} {:>6} {:>8} {:>8} {:>6} {:>9.1}  {}",
            dir.display(),
            s.method,
            s.n_tracks,
            s.detections.correct,
            s.detections.delayed,
            s.detections.false_detections,
            s.runtime_s,
            cells.join(" ")
        );
    }
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("SHF_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::Config(format!("configuration error: SHF_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Simulate { config, out } => simulate(config, out),
        Command::Track { config, method, out } => track(config, *method, out),
        Command::Region {
            config,
            track_index,
            grid,
            out,
        } => region(config, *track_index, *grid, out),
        Command::Metrics { run_dir } => metrics(run_dir),
        Command::Compare { run_dirs } => compare(run_dirs),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("{m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
