use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use thinobs::config::{parse_config, CheckName, RunConfig};
use thinobs::runner::{run_oracle_compare, run_solve, run_sweep, run_verify, RunError, RunManifest, SweepAxis};

/// Thin obstacle (Signorini) solver and regularity verification harness.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (flat TOML with dotted keys).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for every pseudorandom draw; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve and write the field, sigma and the contact decomposition.
    Solve(Common),
    /// Solve, then run the verification checks.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Run only these checks (repeatable); overrides `verify.checks`.
        #[arg(long = "check", value_name = "NAME")]
        checks: Vec<String>,
    },
    /// Convergence table over the penalty or mesh schedule.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Compare the marching Signorini solve with the brute-force oracle.
    OracleCompare(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    #[value(name = "penalty_k")]
    PenaltyK,
    #[value(name = "mesh_h")]
    MeshH,
}

fn load(common: &Common) -> Result<RunConfig, String> {
    let text = std::fs::read_to_string(&common.config).map_err(|e| format!("{}: {e}", common.config.display()))?;
    let mut cfg = parse_config(&text).map_err(|e| format!("{}: {e}", common.config.display()))?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn report(manifest: &RunManifest, dir: &std::path::Path) -> ExitCode {
    println!("{}: {} files written to {}", manifest.command, manifest.files.len(), dir.display());
    for c in &manifest.checks {
        println!("  {:<20} {:?}  {}", c.name, c.status, c.detail);
    }
    let failed = manifest.failed_checks();
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("failed checks: {}", failed.join(", "));
        ExitCode::from(1)
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    let show = |e: RunError| e.to_string();
    match cli.command {
        Command::Solve(common) => {
            let cfg = load(&common)?;
            Ok(report(&run_solve(&cfg).map_err(show)?, &cfg.output_dir))
        }
        Command::Verify { common, checks } => {
            let mut cfg = load(&common)?;
            if !checks.is_empty() {
                cfg.verify.checks = checks
                    .iter()
                    .map(|c| CheckName::from_name(c).ok_or_else(|| format!("unknown check `{c}`")))
                    .collect::<Result<_, _>>()?;
            }
            let (manifest, _) = run_verify(&cfg).map_err(show)?;
            Ok(report(&manifest, &cfg.output_dir))
        }
        Command::Sweep { common, axis } => {
            let cfg = load(&common)?;
            let axis = match axis {
                Axis::PenaltyK => SweepAxis::PenaltyK,
                Axis::MeshH => SweepAxis::MeshH,
            };
            Ok(report(&run_sweep(&cfg, axis).map_err(show)?, &cfg.output_dir))
        }
        Command::OracleCompare(common) => {
            let cfg = load(&common)?;
            Ok(report(&run_oracle_compare(&cfg).map_err(show)?, &cfg.output_dir))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
