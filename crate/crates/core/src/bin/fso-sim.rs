use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use fso_sim::config::{parse_config_with, ExperimentPlan, Scenario};
use fso_sim::runner::{rerun_manifest, run_experiment, RunnerError};

/// Run FSO simulation experiments and write CSV/JSON results with a reproducibility manifest.
#[derive(Debug, Parser)]
#[command(name = "fso-sim", version)]
struct Cli {
    /// Experiment plan (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// falls, city or fire. Required without --config.
    #[arg(long)]
    scenario: Option<Scenario>,
    /// First seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds.
    #[arg(long)]
    seeds: Option<u64>,
    /// Output directory.
    #[arg(long, env = "FSO_SIM_OUT")]
    out: Option<PathBuf>,
    /// Ticks per run.
    #[arg(long)]
    ticks: Option<u64>,
    /// Override any plan key, e.g. `--set falls.p_fall=0.002` or `--set sweep.devices=[1]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved default plan for the scenario and exit.
    #[arg(long)]
    list_defaults: bool,
    /// Rerun the plan recorded in a manifest.
    #[arg(long, conflicts_with_all = ["config", "scenario", "seed", "seeds", "ticks", "set", "list_defaults"])]
    from_manifest: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let RunnerError::Runs(failed) = &e {
                for (run, err) in failed {
                    eprintln!("  {run}: {err}");
                }
            }
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), RunnerError> {
    if let Some(manifest) = &cli.from_manifest {
        let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        let m = rerun_manifest(manifest, &out)?;
        println!("wrote {} files to {}", m.files.len(), out.display());
        return Ok(());
    }

    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| RunnerError::Io {
            path: path.clone(),
            reason: e.to_string(),
        })?,
        None => {
            let scenario = match (cli.scenario, cli.list_defaults) {
                (Some(s), _) => s,
                (None, true) => Scenario::Falls,
                (None, false) => {
                    return Err(RunnerError::Config(fso_sim::config::ConfigError::Validation {
                        field: "scenario".into(),
                        reason: "give --scenario or --config".into(),
                    }))
                }
            };
            format!("scenario = \"{scenario}\"\n")
        }
    };

    let mut overrides: Vec<(String, String)> = Vec::new();
    if let Some(s) = cli.scenario {
        overrides.push(("scenario".into(), format!("\"{s}\"")));
    }
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
        if cli.seeds.is_none() && text_has_seed_list(&text) {
            overrides.push(("seeds".into(), "1".into()));
        }
    }
    if let Some(n) = cli.seeds {
        overrides.push(("seeds".into(), n.to_string()));
    }
    if let Some(t) = cli.ticks {
        overrides.push(("world.ticks".into(), t.to_string()));
    }
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            RunnerError::Config(fso_sim::config::ConfigError::Validation {
                field: kv.clone(),
                reason: "expected KEY=VALUE".into(),
            })
        })?;
        overrides.push((k.trim().to_owned(), v.trim().to_owned()));
    }

    let plan: ExperimentPlan = parse_config_with(&text, &overrides)?;
    if cli.list_defaults {
        print!("{}", plan.to_toml());
        return Ok(());
    }
    let out = cli
        .out
        .or_else(|| plan.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let m = run_experiment(&plan, &out)?;
    println!(
        "{} scenario: {} files, manifest {}",
        plan.scenario,
        m.files.len(),
        out.join(fso_sim::runner::MANIFEST_NAME).display()
    );
    Ok(())
}

fn text_has_seed_list(text: &str) -> bool {
    text.parse::<toml::Table>()
        .ok()
        .and_then(|t| t.get("seeds").map(|v| v.is_array()))
        .unwrap_or(false)
}
