use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fes_sim::pipeline::{cmd_analyze, cmd_calibrate, cmd_run, PipelineError, RunConfig};

/// Closed-loop FES gait simulation: calibration, scenario sweeps and
/// gait-cycle statistics, reproducible from a single config and seed.
#[derive(Parser, Debug)]
#[command(name = "fes-sim", version, about)]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory override.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Recording duration override in seconds (all cells).
    #[arg(long, global = true)]
    duration: Option<f64>,

    /// Only process cells whose name contains one of these substrings,
    /// e.g. `--cells 0.7_0` or `--cells FES_CL`.
    #[arg(long, global = true, value_delimiter = ',')]
    cells: Option<Vec<String>>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Identify u_thr/u_max for all four muscles and write calibration.json.
    Calibrate,
    /// Simulate the scenario grid and write per-cell trace/stim/cycle CSVs.
    Run,
    /// Compute statistics over existing traces: summary.json + figure CSVs.
    Analyze,
    /// Calibrate, run and analyze in one go.
    All,
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        config.out_dir = dir.clone();
    }
    if let Some(duration) = cli.duration {
        config.duration_s = Some(duration);
    }
    if let Some(cells) = &cli.cells {
        config.cells_filter = Some(cells.clone());
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let config = load_config(cli)?;
    match cli.command {
        Command::Calibrate => {
            let calib = cmd_calibrate(&config)?;
            println!("calibration written to {}", config.calibration_path().display());
            for (leg, c) in [("left", &calib.left), ("right", &calib.right)] {
                println!(
                    "  {leg}: TA [{}, {}] us (OL peak {}), GS [{}, {}] us (FD peak {})",
                    c.ta.u_thr_us, c.ta.u_max_us, c.ta_ol_peak_us,
                    c.gs.u_thr_us, c.gs.u_max_us, c.gs_fd_peak_us
                );
            }
        }
        Command::Run => {
            let cells = cmd_run(&config)?;
            println!("simulated {} cells into {}", cells.len(), config.out_dir.join("cells").display());
        }
        Command::Analyze => {
            let summary = cmd_analyze(&config)?;
            report(&summary)?;
        }
        Command::All => {
            cmd_calibrate(&config)?;
            let cells = cmd_run(&config)?;
            println!("simulated {} cells", cells.len());
            let summary = cmd_analyze(&config)?;
            report(&summary)?;
        }
    }
    Ok(())
}

fn report(summary: &fes_sim::pipeline::Summary) -> Result<(), PipelineError> {
    let mut failures = 0;
    for group in &summary.groups {
        let head = format!("{} m/s, {} deg:", group.speed_m_s, group.incline_deg);
        match (&group.error, &group.stimulation) {
            (Some(err), _) => {
                failures += 1;
                println!("{head} ERROR {err}");
            }
            (None, Some(stim)) => println!(
                "{head} charge CL {:.2} mC vs OL {:.2} mC, reduction {:.1}% (floor bound {:.1}%)",
                stim.reduction.cl_total_mc,
                stim.reduction.ol_total_mc,
                100.0 * stim.reduction.reduction,
                100.0 * stim.reduction.floor_bound,
            ),
            (None, None) => println!("{head} ok (no stimulated conditions)"),
        }
    }
    if failures > 0 {
        Err(PipelineError::Analysis(format!(
            "{failures} group(s) failed; see summary.json"
        )))
    } else {
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
