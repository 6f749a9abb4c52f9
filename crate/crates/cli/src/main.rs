use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ofo_cli::commands::{analysis_text, analyze, cmd_bisect, cmd_compare, cmd_run, write_analysis};
use ofo_cli::manifest::{Overrides, RunManifest};
use ofo_cli::{CliError, CliResult};
use ofo_core::operators::MONOTONICITY_MARGIN;
use ofo_core::scenario::ScenarioTimeline;
use ofo_core::solvers::BisectOptions;

/// Online feedback optimization with heterogeneous step sizes.
#[derive(Parser)]
#[command(name = "ofo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the manifest's configuration and write trajectory, tracking and
    /// plot-data files.
    Run(ManifestArgs),
    /// Run every named configuration of the manifest's comparison set
    /// concurrently and write side-by-side metrics.
    Compare(ManifestArgs),
    /// Report the saddle matrix, monotonicity, recommended regularization,
    /// oracle drift and a stable step size for one scenario.
    Analyze(AnalyzeArgs),
    /// Bisect the largest stable common step size for a manifest.
    BisectAlpha(BisectArgs),
}

#[derive(Args)]
struct ManifestArgs {
    /// Run manifest (TOML).
    manifest: PathBuf,
    /// Scenario file, replacing the manifest's.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Output directory, replacing the manifest's.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Run only this measurement-noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Fixed common step size, replacing the manifest's step-size choice.
    #[arg(long)]
    alpha: Option<f64>,
}

impl ManifestArgs {
    fn load(&self) -> CliResult<RunManifest> {
        RunManifest::load(
            &self.manifest,
            &Overrides {
                scenario: self.scenario.clone(),
                output_dir: self.output.clone(),
                seed: self.seed,
                alpha: self.alpha,
            },
        )
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Primal step sizes, comma separated (default all ones).
    #[arg(long, value_delimiter = ',')]
    gamma_x: Option<Vec<f64>>,
    /// Dual step sizes, comma separated (default all ones).
    #[arg(long, value_delimiter = ',')]
    gamma_lambda: Option<Vec<f64>>,
    /// Time step to analyze.
    #[arg(long, default_value_t = 0)]
    k: usize,
    /// Margin added above the negative eigenvalue.
    #[arg(long, default_value_t = MONOTONICITY_MARGIN)]
    margin: f64,
    /// Directory for analysis.csv.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BisectArgs {
    #[command(flatten)]
    manifest: ManifestArgs,
    #[arg(long, default_value_t = BisectOptions::default().lo)]
    lo: f64,
    #[arg(long, default_value_t = BisectOptions::default().hi)]
    hi: f64,
    /// Exact steps per stability probe.
    #[arg(long, default_value_t = BisectOptions::default().probe_steps)]
    probe_steps: usize,
    /// Step at which the scenario is frozen.
    #[arg(long, default_value_t = 0)]
    k: usize,
}

fn run_analyze(args: &AnalyzeArgs) -> CliResult<()> {
    if !args.scenario.is_file() {
        return Err(CliError::config(format!(
            "scenario file {} not found",
            args.scenario.display()
        )));
    }
    let text = std::fs::read_to_string(&args.scenario)?;
    let scenario = ScenarioTimeline::from_toml_str(&text)?;
    let mut gammas = scenario.default_groups(1.0)?;
    if let Some(g) = &args.gamma_x {
        if g.len() != gammas.n() {
            return Err(CliError::config("gamma-x length does not match the inputs"));
        }
        gammas.gamma_x = g.clone().into();
    }
    if let Some(g) = &args.gamma_lambda {
        if g.len() != gammas.m() {
            return Err(CliError::config("gamma-lambda length does not match the constraints"));
        }
        gammas.gamma_lambda = g.clone().into();
    }
    gammas.validate()?;
    let a = analyze(&scenario, &gammas, args.k, args.margin)?;
    print!("{}", analysis_text(&scenario.name, args.k, &a));
    if let Some(dir) = &args.output {
        std::fs::create_dir_all(dir)?;
        let hash = {
            use sha2::{Digest, Sha256};
            let mut h = Sha256::new();
            h.update(text.as_bytes());
            h.update(format!("\ngamma_x={:?}\ngamma_lambda={:?}\nk={}\nmargin={}", args.gamma_x, args.gamma_lambda, args.k, args.margin));
            hex::encode(h.finalize())
        };
        write_analysis(&dir.join("analysis.csv"), &hash, &scenario.name, args.k, &a)?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run(args) => cmd_run(&args.load()?).map(|_| ()),
        Command::Compare(args) => cmd_compare(&args.load()?).map(|_| ()),
        Command::Analyze(args) => run_analyze(&args),
        Command::BisectAlpha(args) => {
            let manifest = args.manifest.load()?;
            let opts = BisectOptions {
                lo: args.lo,
                hi: args.hi,
                probe_steps: args.probe_steps,
                k: args.k,
                ..BisectOptions::default()
            };
            let (bar, unstable) = cmd_bisect(&manifest, &opts)?;
            println!("alpha_bar: {bar:.6e}");
            match unstable {
                Some(u) => println!("smallest unstable: {u:.6e}"),
                None => println!("smallest unstable: none up to {:.6e}", opts.hi),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ofo: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
