use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rangepose::config::ProblemConfig;
use rangepose::io;
use rangepose::sim::{self, Scenario, SweepCell, SweepSpec};
use rangepose::{evaluate, Alignment, Error, EstimationMode, Result};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "rangepose",
    version,
    about = "Continuous-time range-only pose estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario: writes measurements.jsonl and truth.jsonl.
    Simulate {
        /// Scenario JSON.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate a trajectory from range measurements.
    Estimate {
        /// Problem configuration JSON (a scenario file also works).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long, default_value = "batch")]
        mode: EstimationMode,
        /// Results JSONL. In fls mode the lag-smoothed stream goes next to it
        /// as `<stem>.smoothed.jsonl`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare estimates against ground truth.
    Evaluate {
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value = "none")]
        alignment: Alignment,
        /// Write the full report here; stdout then gets the summary only.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lever-arm / noise grid of simulate + batch estimate + evaluate.
    Sweep {
        /// Sweep spec JSON: {"scenario": {...}, "levers": [...], "noises": [...], "runs": n}.
        #[arg(long)]
        config: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the base seed of the scenario.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        runs: Option<usize>,
    },
}

/// One CSV row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GridRow {
    lever_m: f64,
    sigma_m: f64,
    pos_rmse_mean: f64,
    pos_rmse_std: f64,
    ori_rmse_mean: f64,
    ori_rmse_std: f64,
    runs: usize,
}

impl From<&SweepCell> for GridRow {
    fn from(c: &SweepCell) -> Self {
        GridRow {
            lever_m: c.lever_m,
            sigma_m: c.sigma_m,
            pos_rmse_mean: c.pos_rmse_mean,
            pos_rmse_std: c.pos_rmse_std,
            ori_rmse_mean: c.ori_rmse_mean,
            ori_rmse_std: c.ori_rmse_std,
            runs: c.runs,
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn simulate(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut scenario =
        Scenario::from_json(&read_text(config)?).map_err(|e| with_path(config, e))?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let run = sim::simulate(&scenario)?;
    std::fs::create_dir_all(out)?;
    io::write_measurements(&out.join("measurements.jsonl"), &run.measurements)?;
    let times: Vec<f64> = run.measurements.iter().map(|m| m.time).collect();
    io::write_states(&out.join("truth.jsonl"), &run.truth.export_samples(&times))?;
    println!(
        "simulated {:.1} s, {} measurements (seed {}) -> {}",
        scenario.duration,
        run.measurements.len(),
        scenario.seed,
        out.display()
    );
    Ok(())
}

fn smoothed_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "estimates".into());
    out.with_file_name(format!("{stem}.smoothed.jsonl"))
}

fn estimate(config: &Path, measurements: &Path, mode: EstimationMode, out: &Path) -> Result<()> {
    let config = ProblemConfig::load(config)?;
    let meas = io::read_measurements(measurements)?;
    let result = rangepose::estimate(&meas, &config, mode)?;
    io::write_estimates(out, &result.estimates)?;
    let name = match mode {
        EstimationMode::Batch => "batch",
        EstimationMode::Fls => "fls",
    };
    println!("mode: {name}");
    println!(
        "measurements: {} ({} rejected)",
        meas.len(),
        result.rejected
    );
    if let Some(r) = &result.report {
        println!("knots: {}", result.estimates.len());
        println!("status: {:?} after {} iterations", r.status, r.iterations);
        println!(
            "initial cost: {:.6e}",
            r.costs.first().copied().unwrap_or(r.final_cost)
        );
        println!("final cost: {:.6e}", r.final_cost);
        if let Some(m) = &r.message {
            println!("note: {m}");
        }
    } else {
        io::write_estimates(&smoothed_path(out), &result.smoothed)?;
        println!("updates: {}", result.estimates.len());
        println!("unconverged updates: {}", result.unconverged);
        println!("dropped (out of order): {}", result.dropped);
        println!("smoothed knots: {}", result.smoothed.len());
    }
    if let Some(init) = &result.init {
        if init.fallback {
            println!("initialization fell back to the anchor centroid");
        }
    }
    println!("runtime: {:.3} s", result.runtime_seconds);
    Ok(())
}

fn evaluate_cmd(
    estimates: &Path,
    truth: &Path,
    alignment: Alignment,
    out: Option<&Path>,
) -> Result<()> {
    let est = io::read_estimates(estimates)?;
    let truth = io::read_states(truth)?;
    let report = evaluate(&est, &truth, alignment)?;
    match out {
        Some(path) => {
            io::write_atomic(path, serde_json::to_string_pretty(&report)?.as_bytes())?;
            let summary = serde_json::json!({
                "samples": report.samples,
                "position_rmse": report.position_rmse,
                "orientation_rmse": report.orientation_rmse,
                "axis_coverage": report.axis_coverage,
                "coverage": report.coverage,
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn grid_csv(cells: &[SweepCell]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in cells {
        w.serialize(GridRow::from(c))
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

fn sweep(config: &Path, out: &Path, seed: Option<u64>, runs: Option<usize>) -> Result<()> {
    let mut spec: SweepSpec = serde_json::from_str(&read_text(config)?)
        .map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    if let Some(s) = seed {
        spec.scenario.seed = s;
    }
    if let Some(r) = runs {
        spec.runs = r;
    }
    let cells = sim::sweep(&spec.scenario, &spec.levers, &spec.noises, spec.runs)?;
    io::write_atomic(out, &grid_csv(&cells)?)?;
    for c in &cells {
        if let Some(n) = &c.note {
            println!(
                "cell lever={} sigma={}: {} failed, {} unconverged ({n})",
                c.lever_m, c.sigma_m, c.failures, c.unconverged
            );
        }
    }
    println!("sigma_m  spearman(ori, lever)  ori_ratio(min/max lever)  pos_spread");
    for t in sim::trends(&cells) {
        println!(
            "{:<8} {:>21.3} {:>25.2} {:>11.2}",
            t.sigma_m, t.orientation_spearman, t.orientation_ratio, t.position_spread
        );
    }
    println!("wrote {} cells -> {}", cells.len(), out.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Parse(_) | Error::Format(_) => 2,
        Error::Unobservable { .. } => 3,
        Error::Numerical(_) => 4,
        Error::Io(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RANGEPOSE_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { config, out, seed } => simulate(config, out, *seed),
        Command::Estimate {
            config,
            measurements,
            mode,
            out,
        } => estimate(config, measurements, *mode, out),
        Command::Evaluate {
            estimates,
            truth,
            alignment,
            out,
        } => evaluate_cmd(estimates, truth, *alignment, out.as_deref()),
        Command::Sweep {
            config,
            out,
            seed,
            runs,
        } => sweep(config, out, *seed, *runs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Unobservable { .. } = e {
                eprintln!("hint: set \"allow_unobservable\": true to run anyway");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Format("x".into())), 2);
        assert_eq!(exit_code(&Error::Unobservable { null_dim: 3 }), 3);
        assert_eq!(exit_code(&Error::Numerical("x".into())), 4);
    }

    #[test]
    fn smoothed_path_sits_next_to_output() {
        assert_eq!(
            smoothed_path(Path::new("/tmp/run/est.jsonl")),
            PathBuf::from("/tmp/run/est.smoothed.jsonl")
        );
    }
}
