mod config;
mod error;
mod io;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use slipgaze::calibrate::{calibrate_dataset, CalibrationProfile};
use slipgaze::estimate::CenterMode;
use slipgaze::gaze::{evaluate, rows_to_csv, CenterSource, PipelineOptions};
use slipgaze::sim::Dataset;

use config::RunConfig;
use error::CliError;
use run::SweepAxis;

#[derive(Parser)]
#[command(name = "slipgaze", version, about = "Simulate, calibrate and evaluate slippage-robust gaze estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one session file per subject (features plus ground truth).
    Simulate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Fit a calibration profile from a session's recording 0.
    Calibrate {
        #[arg(long)]
        dataset: PathBuf,
        /// Profile output path [default: <dataset>.profile.json]
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Score a profile on a session's test recordings; writes the report CSV.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        /// Report CSV path [default: stdout]
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Run config supplying pipeline defaults
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Rerun the whole pipeline over a grid of one scenario parameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated grid values (pixels for noise, mm for slip)
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
    },
    /// Simulate, calibrate and evaluate every subject; writes datasets,
    /// profiles, report.csv and summary.json.
    Report {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run config (JSON); defaults are used when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (or file for sweep) [default: config out_dir, else ./out]
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct PipelineArgs {
    /// Disable the slippage term in the gaze mapping
    #[arg(long)]
    no_correction: bool,
    /// Rotation center used for the slippage term
    #[arg(long, value_enum)]
    center_mode: Option<CenterArg>,
    /// Batch center objective
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    L2,
    L1,
}

#[derive(Clone, Copy, ValueEnum)]
enum CenterArg {
    Batch,
    Frame,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Noise,
    Slip,
}

impl From<ModeArg> for CenterMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::L2 => CenterMode::LeastSquares,
            ModeArg::L1 => CenterMode::L1,
        }
    }
}

impl PipelineArgs {
    fn apply(&self, opts: &mut PipelineOptions) {
        if self.no_correction {
            opts.correct_slippage = false;
        }
        if let Some(c) = self.center_mode {
            opts.center_source = match c {
                CenterArg::Batch => CenterSource::Batch,
                CenterArg::Frame => CenterSource::Frame,
            };
        }
        if let Some(m) = self.mode {
            opts.center_mode = m.into();
        }
    }
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        self.pipeline.apply(&mut cfg.pipeline);
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn session_name(index: usize) -> String {
    format!("subject_{index:02}")
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    Ok(Dataset::from_jsonl(&io::read(path)?)?)
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => io::write_atomic(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_simulate(args: &RunArgs) -> Result<(), CliError> {
    let cfg = args.config()?;
    let dir = args.out_dir(&cfg);
    for i in 0..cfg.scenario.subject_count {
        let ds = run::simulate_subject(&cfg, i)?;
        let path = dir.join(format!("{}.jsonl", session_name(i)));
        io::write_atomic(&path, &ds.to_jsonl())?;
        let per_rec: Vec<String> = (0..=slipgaze::sim::TEST_RECORDINGS).map(|r| ds.recording(r).count().to_string()).collect();
        println!("{}: {} frames (recordings 0-3: {})", path.display(), ds.frames.len(), per_rec.join("/"));
    }
    Ok(())
}

fn cmd_calibrate(dataset: &Path, out: Option<&Path>, mode: Option<ModeArg>) -> Result<(), CliError> {
    let ds = load_dataset(dataset)?;
    let mode = mode.map(CenterMode::from).unwrap_or_default();
    let profile = calibrate_dataset(&ds, mode)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| dataset.with_extension("profile.json"));
    io::write_atomic(&out, &profile.to_json())?;
    for (name, cal) in [("left", &profile.left), ("right", &profile.right)] {
        let d = &cal.diagnostics;
        println!(
            "{name}: {} frames ({} skipped), k1 {:.4} k2 {:.4}, center rms {:.4} mm, kappa rms {:.4} deg",
            d.frames_used, d.frames_skipped, cal.k1, cal.k2, d.center_rms_mm, d.kappa_rms_deg
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_evaluate(dataset: &Path, profile: &Path, out: Option<&Path>, pipeline: &PipelineArgs, config: Option<&Path>) -> Result<(), CliError> {
    let ds = load_dataset(dataset)?;
    let profile = CalibrationProfile::from_json(&io::read(profile)?)?;
    let mut opts = match config {
        Some(_) => RunConfig::load(config)?.pipeline,
        None => PipelineOptions { center_mode: profile.center_mode, ..Default::default() },
    };
    pipeline.apply(&mut opts);
    let ev = evaluate(&ds, &profile, &opts)?;
    emit(out, &rows_to_csv(&ev.rows))?;
    if out.is_some() {
        let all = ev.rows.last().expect("evaluate emits an aggregate row");
        println!("{}: left {:.3} right {:.3} bino {:.3} deg over {} frames", run::options_line(&opts), all.left_mean_deg, all.right_mean_deg, all.bino_mean_deg, all.frames);
    }
    Ok(())
}

fn cmd_sweep(args: &RunArgs, axis: AxisArg, grid: &[f64]) -> Result<(), CliError> {
    let cfg = args.config()?;
    let axis = match axis {
        AxisArg::Noise => SweepAxis::Noise,
        AxisArg::Slip => SweepAxis::Slip,
    };
    let rows = run::sweep(&cfg, axis, grid)?;
    emit(args.out.as_deref(), &run::sweep_csv(&rows))
}

fn cmd_report(args: &RunArgs) -> Result<(), CliError> {
    let cfg = args.config()?;
    let dir = args.out_dir(&cfg);
    let mut evals = Vec::new();
    for i in 0..cfg.scenario.subject_count {
        let r = run::run_subject(&cfg, i)?;
        let name = session_name(i);
        io::write_atomic(&dir.join("datasets").join(format!("{name}.jsonl")), &r.dataset.to_jsonl())?;
        io::write_atomic(&dir.join("profiles").join(format!("{name}.profile.json")), &r.profile.to_json())?;
        evals.push(r.evaluation);
    }
    let rows = run::report_rows(&evals);
    io::write_atomic(&dir.join("report.csv"), &rows_to_csv(&rows))?;
    io::write_atomic(&dir.join("summary.json"), &run::pipeline_summary(&evals, rows.clone()))?;
    let all = rows.last().expect("report has an aggregate row");
    println!(
        "{} subjects, {}: left {:.3} right {:.3} bino {:.3} deg; wrote {}",
        evals.len(),
        run::options_line(&cfg.pipeline),
        all.left_mean_deg,
        all.right_mean_deg,
        all.bino_mean_deg,
        dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { run } => cmd_simulate(run),
        Command::Calibrate { dataset, out, mode } => cmd_calibrate(dataset, out.as_deref(), *mode),
        Command::Evaluate { dataset, profile, out, pipeline, config } => cmd_evaluate(dataset, profile, out.as_deref(), pipeline, config.as_deref()),
        Command::Sweep { run, axis, grid } => cmd_sweep(run, *axis, grid),
        Command::Report { run } => cmd_report(run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
