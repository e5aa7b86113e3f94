use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use filippov_core::scenarios::{Scenario, SCENARIO_NAMES};
use filippov_harness::run::MANIFEST_FILE;
use filippov_harness::{run, HarnessError, RunKind, ScenarioConfig};

/// Simulate Filippov systems: single orbits, explosion bundles, ensembles and
/// grazing scans.
///
/// Settings are taken from the config file, then from each `--set`, then
/// from `--out` and `--seed`; later sources win.
#[derive(Parser)]
#[command(name = "filippov", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set integrator.t_end=20` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for random branch selection.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the run described by the config.
    Run(Common),
    /// Bisect a scenario parameter for a grazing orbit.
    Scan {
        #[command(flatten)]
        common: Common,
        /// Parameter to vary; defaults to `[scan].parameter`.
        #[arg(long)]
        param: Option<String>,
        #[arg(long)]
        lo: Option<f64>,
        #[arg(long)]
        hi: Option<f64>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Print the built-in scenarios and their parameters.
    ListScenarios,
}

fn load(common: &Common) -> Result<ScenarioConfig, HarnessError> {
    let mut c = ScenarioConfig::load(&common.config, &common.sets)?;
    if let Some(out) = &common.out {
        c.output.dir = out.clone();
    }
    if let Some(seed) = common.seed {
        c.seed = seed;
    }
    Ok(c)
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run(common) => {
            let manifest = run(&load(&common)?)?;
            println!(
                "wrote {} files to {} ({} in {:.3} s)",
                manifest.files.len() + 1,
                manifest.config.output.dir.display(),
                MANIFEST_FILE,
                manifest.wall_clock_seconds
            );
        }
        Command::Scan {
            common,
            param,
            lo,
            hi,
            tol,
        } => {
            let mut c = load(&common)?;
            let mut scan = c.scan.clone();
            match (&mut scan, param, lo, hi) {
                (Some(s), param, lo, hi) => {
                    s.parameter = param.unwrap_or(s.parameter.clone());
                    s.lo = lo.unwrap_or(s.lo);
                    s.hi = hi.unwrap_or(s.hi);
                    s.tol = tol.unwrap_or(s.tol);
                }
                (None, Some(parameter), Some(lo), Some(hi)) => {
                    scan = Some(filippov_harness::config::ScanConfig {
                        parameter,
                        lo,
                        hi,
                        tol: tol.unwrap_or(1e-6),
                    });
                }
                (None, ..) => {
                    return Err(HarnessError::Config(
                        "scan needs --param, --lo and --hi or a [scan] section".into(),
                    ))
                }
            }
            c.scan = scan;
            c.kind = RunKind::Scan;
            let manifest = run(&c)?;
            let m = &manifest.summary;
            println!(
                "{} = {} (indicator {}, {} bisections)",
                m["parameter"].as_str().unwrap_or("?"),
                m["critical"],
                m["indicator_at_critical"],
                m["iterations"]
            );
        }
        Command::ListScenarios => {
            for name in SCENARIO_NAMES {
                let s = Scenario::from_name(name, &Default::default())?;
                let params: Vec<String> =
                    s.params().iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!("{name}: {}", s.description());
                if !params.is_empty() {
                    println!("    {}", params.join(" "));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("filippov: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
