//! Command implementations behind the `uwb-autocalib` binary. Each command
//! returns its process exit status.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autocalib::{calibrate, write_result_json, DistanceStatsMatrix};
use crate::error::Error;
use crate::geometry::Point2;
use crate::ranging::{fit_model, load_samples_csv, RangingModel};
use crate::sim::{run_scenario, summarize, ScenarioConfig, SimulationTrace, Trigger};
use crate::{fmt_sig, round_sig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_FIT: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;
pub const EXIT_GEOMETRY: i32 = 5;

const AFTER_HELP: &str = "\
Exit status: 0 success, 2 input error, 3 fit failure, 4 non-convergence, 5 geometry failure.";

#[derive(Debug, Parser)]
#[command(name = "uwb-autocalib", version, about = "UWB anchor autocalibration and deployment simulation")]
#[command(after_help = AFTER_HELP)]
pub struct Cli {
    /// Override the seed of any scenario that is run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a linear ranging-bias model to measured distances.
    #[command(after_help = "\
Input CSV: header `true_m,measured_m`, one sample per row.
Output JSON: {\"slope\", \"intercept_m\", \"noise_std_m\", \"n_samples\"}.")]
    FitModel(FitModelArgs),

    /// Estimate anchor positions from inter-anchor distance statistics.
    #[command(after_help = "\
Input CSV: header `i,j,mean_m,std_m,count`, one row per directed pair; every
ordered pair of anchors must be present. The prior is a JSON file with a
`positions` array of {\"x\", \"y\"} objects, as written by this command.
Output JSON: {\"positions\", \"rms_residual_m\", \"iterations\", \"converged\"}.")]
    Calibrate(CalibrateArgs),

    /// Run a moving-deployment scenario.
    #[command(after_help = "\
Scenario JSON: any ScenarioConfig fields; absent fields take their defaults
and unknown keys are rejected. Writes config.json (effective configuration),
trace.csv (`step,node_kind,node_id,true_x,true_y,est_x,est_y,error_m,
rotation_error_rad,calibrated`) and summary.json to the output directory.")]
    Simulate(SimulateArgs),

    /// Print error quartiles of a simulation trace as JSON.
    #[command(after_help = "Input: a trace.csv written by `simulate`.")]
    Summarize(SummarizeArgs),
}

#[derive(Debug, Args)]
pub struct FitModelArgs {
    /// Measurement CSV.
    #[arg(long)]
    pub input: PathBuf,
    /// Model JSON to write.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Distance statistics CSV.
    #[arg(long)]
    pub input: PathBuf,
    /// Ranging model JSON used for bias correction. Without it distances are
    /// taken as unbiased.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Previous anchor estimates to start from.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Result JSON to write.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario JSON. Defaults are used when omitted.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub output: PathBuf,
    /// `periodic` or `threshold:<m>`.
    #[arg(long)]
    pub trigger: Option<Trigger>,
    /// Feed raw biased ranges to the solvers.
    #[arg(long)]
    pub no_bias_correction: bool,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    /// Trace CSV.
    #[arg(long)]
    pub input: PathBuf,
}

/// Exit status for an error raised while running `command`.
pub fn exit_code(err: &Error, command: &str) -> i32 {
    match err {
        Error::DegenerateFit(_) => EXIT_FIT,
        Error::InsufficientData(_) if command == "fit-model" => EXIT_FIT,
        Error::CalibrationNotConverged(_) | Error::FixNotConverged(_) | Error::SingularUpdate => EXIT_NOT_CONVERGED,
        Error::DegenerateGeometry { .. } | Error::CollinearAnchors { .. } => EXIT_GEOMETRY,
        _ => EXIT_INPUT,
    }
}

fn fail(err: &Error, command: &str) -> i32 {
    eprintln!("{command}: {err}");
    exit_code(err, command)
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::InvalidValue(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> crate::Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_error(path, e))
}

pub fn load_model(path: &Path) -> crate::Result<RangingModel> {
    let file = File::open(path).map_err(|e| io_error(path, e))?;
    let model: RangingModel = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::InvalidValue(format!("{}: {e}", path.display())))?;
    model.validate()?;
    Ok(model)
}

pub fn write_model_json<W: Write>(model: &RangingModel, w: W) -> crate::Result<()> {
    let value = serde_json::json!({
        "slope": round_sig(model.slope),
        "intercept_m": round_sig(model.intercept),
        "noise_std_m": round_sig(model.noise_std),
        "n_samples": model.n_samples,
    });
    serde_json::to_writer_pretty(w, &value).map_err(|e| Error::InvalidValue(e.to_string()))
}

/// Reads the `positions` array of a calibration result.
pub fn load_prior(path: &Path) -> crate::Result<Vec<Point2>> {
    #[derive(serde::Deserialize)]
    struct Prior {
        positions: Vec<Point2>,
    }
    let file = File::open(path).map_err(|e| io_error(path, e))?;
    let prior: Prior = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::InvalidValue(format!("{}: {e}", path.display())))?;
    if let Some(p) = prior.positions.iter().find(|p| !p.is_finite()) {
        return Err(Error::InvalidValue(format!("non-finite prior position ({}, {})", p.x, p.y)));
    }
    Ok(prior.positions)
}

pub fn cmd_fit_model(args: &FitModelArgs) -> i32 {
    let run = || -> crate::Result<RangingModel> {
        let samples = load_samples_csv(&args.input)?;
        let model = fit_model(&samples)?;
        let mut out = create(&args.output)?;
        write_model_json(&model, &mut out)?;
        writeln!(out).and_then(|_| out.flush()).map_err(|e| io_error(&args.output, e))?;
        Ok(model)
    };
    match run() {
        Ok(m) => {
            println!(
                "slope {} intercept {} m noise_std {} m from {} samples",
                fmt_sig(m.slope),
                fmt_sig(m.intercept),
                fmt_sig(m.noise_std),
                m.n_samples
            );
            EXIT_OK
        }
        Err(e) => fail(&e, "fit-model"),
    }
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> i32 {
    let run = || -> crate::Result<i32> {
        let stats = DistanceStatsMatrix::load_csv(&args.input)?;
        if let Some((i, j)) = stats.first_missing_directed_pair() {
            return Err(Error::MissingPair(i, j));
        }
        let model = match &args.model {
            Some(p) => load_model(p)?,
            None => RangingModel::identity(),
        };
        let prior = args.prior.as_deref().map(load_prior).transpose()?;
        let (result, status) = match calibrate(&stats, &model, prior.as_deref()) {
            Ok(r) => (r, EXIT_OK),
            Err(Error::CalibrationNotConverged(r)) => {
                eprintln!("calibrate: did not converge after {} iterations", r.iterations);
                (*r, EXIT_NOT_CONVERGED)
            }
            Err(e) => return Err(e),
        };
        let mut out = create(&args.output)?;
        write_result_json(&result, &mut out)?;
        writeln!(out).and_then(|_| out.flush()).map_err(|e| io_error(&args.output, e))?;
        println!(
            "{} anchors, rms residual {} m, {} iterations",
            result.positions.len(),
            fmt_sig(result.rms_residual),
            result.iterations
        );
        Ok(status)
    };
    run().unwrap_or_else(|e| fail(&e, "calibrate"))
}

/// Resolves the effective scenario from the file and command-line overrides.
pub fn resolve_scenario(args: &SimulateArgs, seed: Option<u64>) -> crate::Result<ScenarioConfig> {
    let mut cfg = match &args.input {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(t) = args.trigger {
        cfg.trigger = t;
    }
    if args.no_bias_correction {
        cfg.bias_correction = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_simulate(args: &SimulateArgs, seed: Option<u64>) -> i32 {
    let run = || -> crate::Result<()> {
        let cfg = resolve_scenario(args, seed)?;
        let config_json = cfg.to_json();
        println!("{config_json}");
        std::fs::create_dir_all(&args.output).map_err(|e| io_error(&args.output, e))?;
        let trace = run_scenario(&cfg)?;
        for r in &trace.records {
            for d in &r.diagnostics {
                eprintln!("simulate: {d}");
            }
        }
        let write = |name: &str, f: &dyn Fn(&mut BufWriter<File>) -> std::io::Result<()>| -> crate::Result<()> {
            let path = args.output.join(name);
            let mut out = create(&path)?;
            f(&mut out).and_then(|_| out.flush()).map_err(|e| io_error(&path, e))
        };
        write("config.json", &|w| writeln!(w, "{config_json}"))?;
        write("trace.csv", &|w| trace.write_csv(w))?;
        let summary = summarize(&trace)?.to_json();
        write("summary.json", &|w| writeln!(w, "{summary}"))?;
        Ok(())
    };
    match run() {
        Ok(()) => EXIT_OK,
        Err(Error::InvalidConfig(problems)) => {
            eprintln!("simulate: invalid scenario");
            for p in &problems {
                eprintln!("  {p}");
            }
            EXIT_INPUT
        }
        Err(e) => fail(&e, "simulate"),
    }
}

pub fn cmd_summarize(args: &SummarizeArgs) -> i32 {
    let run = || -> crate::Result<String> {
        let trace = SimulationTrace::load_csv(&args.input)?;
        Ok(summarize(&trace)?.to_json())
    };
    match run() {
        Ok(json) => {
            println!("{json}");
            EXIT_OK
        }
        Err(e) => fail(&e, "summarize"),
    }
}

pub fn run(cli: &Cli) -> i32 {
    match &cli.command {
        Command::FitModel(a) => cmd_fit_model(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Simulate(a) => cmd_simulate(a, cli.seed),
        Command::Summarize(a) => cmd_summarize(a),
    }
}
