//! Running experiments: single simulations, whole plans in parallel, output files and manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::city::{CityConfig, CityEvent, CityModel, HealthStrategy};
use crate::config::{ConfigError, ExperimentPlan, Scenario};
use crate::engine::{EngineError, EventLog, World, WorldConfig};
use crate::falls::{FallsConfig, FallsEvent, FallsModel};
use crate::metrics::{
    summarize_city_run, summarize_falls_run, write_csv, write_json, CityRunInfo, CitySummary,
    FallsRunInfo, FallsSummary, MetricsError, CITY_COLUMNS, FALLS_COLUMNS,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid model configuration: {0}")]
    Model(String),
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{} run(s) failed; first: {}: {}", .0.len(), .0[0].0, .0[0].1)]
    Runs(Vec<(String, RunError)>),
    #[error(transparent)]
    Output(#[from] MetricsError),
    #[error("i/o failure on {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("bad manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunnerError {
    RunnerError::Io {
        path: path.to_owned(),
        reason: e.to_string(),
    }
}

/// Run the falls model to the end and return it with its event log.
pub fn simulate_falls(
    world: WorldConfig,
    config: &FallsConfig,
) -> Result<(FallsModel, EventLog<FallsEvent>), RunError> {
    config.validate().map_err(|e| RunError::Model(e.to_string()))?;
    let mut w = World::build(world, |arena, rng| FallsModel::new(config.clone(), arena, rng))?;
    w.run_to_end();
    Ok(w.into_parts())
}

/// Run the city model to the end and return it with its event log.
pub fn simulate_city(
    world: WorldConfig,
    config: &CityConfig,
) -> Result<(CityModel, EventLog<CityEvent>), RunError> {
    config.validate().map_err(|e| RunError::Model(e.to_string()))?;
    let mut w = World::build(world, |arena, rng| CityModel::new(config.clone(), arena, rng))?;
    w.run_to_end();
    Ok(w.into_parts())
}

pub fn run_falls(world: WorldConfig, config: &FallsConfig) -> Result<FallsSummary, RunError> {
    let (_, log) = simulate_falls(world, config)?;
    Ok(summarize_falls_run(
        &log,
        FallsRunInfo {
            scenario: config.scenario_tag(),
            informal_carers: config.informal_carers,
            seed: world.master_seed,
        },
    )?)
}

pub fn run_city(world: WorldConfig, config: &CityConfig) -> Result<CitySummary, RunError> {
    let (_, log) = simulate_city(world, config)?;
    Ok(summarize_city_run(
        &log,
        CityRunInfo {
            strategy: config.strategy,
            threshold: config.threshold,
            individuals: config.individuals,
            fire_collaboration: config.fire_collaboration,
            seed: world.master_seed,
        },
    )?)
}

/// One simulation of a plan.
#[derive(Debug, Clone, PartialEq)]
pub enum RunSpec {
    Falls { config: FallsConfig, seed: u64 },
    City { config: CityConfig, seed: u64 },
}

impl RunSpec {
    pub fn label(&self) -> String {
        match self {
            RunSpec::Falls { config, seed } => format!(
                "falls {} ic={} seed={seed}",
                config.scenario_tag(),
                config.informal_carers
            ),
            RunSpec::City { config, seed } => format!(
                "city {} t={} n={} fire_collaboration={} seed={seed}",
                config.strategy, config.threshold, config.individuals, config.fire_collaboration
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutput {
    Falls(FallsSummary),
    City(CitySummary),
}

/// Every (parameter point, seed) pair of a plan, in a fixed order.
pub fn expand(plan: &ExperimentPlan) -> Vec<RunSpec> {
    let mut runs = Vec::new();
    match plan.scenario {
        Scenario::Falls => {
            let base = plan.falls.clone().unwrap_or_default();
            for &d in &plan.sweep.devices {
                for &ic in &plan.sweep.informal_carers {
                    for &seed in &plan.seeds {
                        let config = FallsConfig {
                            devices_per_elderly: d,
                            informal_carers: ic,
                            ..base.clone()
                        };
                        runs.push(RunSpec::Falls { config, seed });
                    }
                }
            }
        }
        Scenario::City => {
            let base = plan.city.clone().unwrap_or_default();
            for &strategy in &plan.sweep.strategies {
                for &threshold in &plan.sweep.thresholds {
                    for &individuals in &plan.sweep.individuals {
                        for &seed in &plan.seeds {
                            let config = CityConfig {
                                strategy,
                                threshold,
                                individuals,
                                ..base.clone()
                            };
                            runs.push(RunSpec::City { config, seed });
                        }
                    }
                }
            }
        }
        Scenario::Fire => {
            let base = plan.city.clone().unwrap_or_else(CityConfig::fire_experiment);
            for &fire_collaboration in &plan.sweep.fire_collaboration {
                for &seed in &plan.seeds {
                    let config = CityConfig {
                        fire_collaboration,
                        ..base.clone()
                    };
                    runs.push(RunSpec::City { config, seed });
                }
            }
        }
    }
    runs
}

/// Run every simulation of the plan. Runs are independent and execute in parallel;
/// results come back in [`expand`] order whatever the scheduling.
pub fn run_plan(plan: &ExperimentPlan) -> Result<Vec<RunOutput>, RunnerError> {
    plan.validate()?;
    let runs = expand(plan);
    let results: Vec<Result<RunOutput, RunError>> = runs
        .par_iter()
        .map(|spec| match spec {
            RunSpec::Falls { config, seed } => {
                run_falls(plan.world.for_seed(*seed), config).map(RunOutput::Falls)
            }
            RunSpec::City { config, seed } => {
                run_city(plan.world.for_seed(*seed), config).map(RunOutput::City)
            }
        })
        .collect();
    let mut out = Vec::with_capacity(results.len());
    let mut failed = Vec::new();
    for (spec, r) in runs.iter().zip(results) {
        match r {
            Ok(o) => out.push(o),
            Err(e) => failed.push((spec.label(), e)),
        }
    }
    if failed.is_empty() {
        Ok(out)
    } else {
        Err(RunnerError::Runs(failed))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub name: String,
    pub sha256: String,
}

/// Everything needed to regenerate an experiment's outputs byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub plan_sha256: String,
    pub seeds: Vec<u64>,
    pub plan: ExperimentPlan,
    pub files: Vec<FileDigest>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Hash of the plan's canonical JSON form (without the output directory).
pub fn plan_hash(plan: &ExperimentPlan) -> String {
    let mut p = plan.clone();
    p.out = None;
    sha256_hex(&serde_json::to_vec(&p).expect("plans serialize"))
}

#[derive(Serialize)]
struct Sidecar<'a, C: Serialize> {
    scenario: Scenario,
    seed: u64,
    world: WorldConfig,
    swept: &'a str,
    values: Vec<u64>,
    config: &'a C,
}

/// Write one CSV (plus JSON sidecar) per sweep series and seed, then the manifest.
///
/// Series files are named `<scenario>_<strategy-or-S#>_<param>_<seed>.csv`.
pub fn write_outputs(
    plan: &ExperimentPlan,
    outputs: &[RunOutput],
    out_dir: &Path,
) -> Result<Manifest, RunnerError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut names = Vec::new();
    match plan.scenario {
        Scenario::Falls => {
            let base = plan.falls.clone().unwrap_or_default();
            let ics = &plan.sweep.informal_carers;
            let span = format!(
                "ic{}-{}",
                ics.iter().min().copied().unwrap_or(0),
                ics.iter().max().copied().unwrap_or(0)
            );
            let mut series: BTreeMap<(u8, u64), Vec<FallsSummary>> = BTreeMap::new();
            for d in &plan.sweep.devices {
                for s in &plan.seeds {
                    series.entry((*d, *s)).or_default();
                }
            }
            for o in outputs {
                if let RunOutput::Falls(s) = o {
                    let d = s.scenario[1..].parse().unwrap_or(1);
                    series.entry((d, s.seed)).or_default().push(s.clone());
                }
            }
            for ((d, seed), mut rows) in series {
                rows.sort_by_key(|r| r.informal_carers);
                let name = format!("falls_S{d}_{span}_{seed}");
                let config = FallsConfig {
                    devices_per_elderly: d,
                    ..base.clone()
                };
                write_series(out_dir, &name, &rows, &FALLS_COLUMNS)?;
                write_sidecar(
                    out_dir,
                    &name,
                    plan,
                    seed,
                    "informal_carers",
                    ics.iter().map(|&v| u64::from(v)).collect(),
                    &config,
                )?;
                names.push(name);
            }
        }
        Scenario::City => {
            let base = plan.city.clone().unwrap_or_default();
            let mut series: BTreeMap<(HealthStrategy, u64, u64), Vec<CitySummary>> = BTreeMap::new();
            for st in &plan.sweep.strategies {
                for t in &plan.sweep.thresholds {
                    for s in &plan.seeds {
                        series.entry((*st, *t, *s)).or_default();
                    }
                }
            }
            for o in outputs {
                if let RunOutput::City(s) = o {
                    series
                        .entry((s.strategy, s.threshold, s.seed))
                        .or_default()
                        .push(s.clone());
                }
            }
            for ((strategy, threshold, seed), mut rows) in series {
                rows.sort_by_key(|r| r.individuals);
                let name = format!("city_{strategy}_t{threshold}_{seed}");
                let config = CityConfig {
                    strategy,
                    threshold,
                    ..base.clone()
                };
                write_series(out_dir, &name, &rows, &CITY_COLUMNS)?;
                write_sidecar(
                    out_dir,
                    &name,
                    plan,
                    seed,
                    "individuals",
                    plan.sweep.individuals.iter().map(|&v| u64::from(v)).collect(),
                    &config,
                )?;
                names.push(name);
            }
        }
        Scenario::Fire => {
            let base = plan.city.clone().unwrap_or_else(CityConfig::fire_experiment);
            let mut series: BTreeMap<(bool, u64), Vec<CitySummary>> = BTreeMap::new();
            for c in &plan.sweep.fire_collaboration {
                for s in &plan.seeds {
                    series.entry((*c, *s)).or_default();
                }
            }
            for o in outputs {
                if let RunOutput::City(s) = o {
                    series
                        .entry((s.fire_collaboration, s.seed))
                        .or_default()
                        .push(s.clone());
                }
            }
            for ((collab, seed), rows) in series.into_iter().rev() {
                let tag = if collab { "fso" } else { "nofso" };
                let name = format!("fire_{tag}_h{}_{seed}", base.houses);
                let config = CityConfig {
                    fire_collaboration: collab,
                    ..base.clone()
                };
                write_series(out_dir, &name, &rows, &CITY_COLUMNS)?;
                write_sidecar(
                    out_dir,
                    &name,
                    plan,
                    seed,
                    "houses",
                    vec![u64::from(base.houses)],
                    &config,
                )?;
                names.push(name);
            }
        }
    }

    let mut files = Vec::new();
    for name in names {
        for ext in ["csv", "json"] {
            let file = format!("{name}.{ext}");
            let path = out_dir.join(&file);
            let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
            files.push(FileDigest {
                name: file,
                sha256: sha256_hex(&bytes),
            });
        }
    }
    let mut stored = plan.clone();
    stored.out = None;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_owned(),
        version: env!("CARGO_PKG_VERSION").to_owned(),
        plan_sha256: plan_hash(plan),
        seeds: plan.seeds.clone(),
        plan: stored,
        files,
    };
    write_json(&out_dir.join(MANIFEST_NAME), &manifest)?;
    Ok(manifest)
}

fn write_series<T: Serialize>(
    out_dir: &Path,
    name: &str,
    rows: &[T],
    columns: &[&str],
) -> Result<(), RunnerError> {
    Ok(write_csv(&out_dir.join(format!("{name}.csv")), rows, columns)?)
}

fn write_sidecar<C: Serialize>(
    out_dir: &Path,
    name: &str,
    plan: &ExperimentPlan,
    seed: u64,
    swept: &str,
    values: Vec<u64>,
    config: &C,
) -> Result<(), RunnerError> {
    let sidecar = Sidecar {
        scenario: plan.scenario,
        seed,
        world: plan.world.for_seed(seed),
        swept,
        values,
        config,
    };
    Ok(write_json(&out_dir.join(format!("{name}.json")), &sidecar)?)
}

/// Run a plan and write its outputs.
pub fn run_experiment(plan: &ExperimentPlan, out_dir: &Path) -> Result<Manifest, RunnerError> {
    let outputs = run_plan(plan)?;
    write_outputs(plan, &outputs, out_dir)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, RunnerError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| RunnerError::Manifest {
        path: path.to_owned(),
        reason: e.to_string(),
    })?;
    if plan_hash(&manifest.plan) != manifest.plan_sha256 {
        return Err(RunnerError::Manifest {
            path: path.to_owned(),
            reason: "plan does not match its recorded hash".into(),
        });
    }
    manifest.plan.validate()?;
    Ok(manifest)
}

/// Rerun the plan recorded in a manifest into `out_dir`.
pub fn rerun_manifest(path: &Path, out_dir: &Path) -> Result<Manifest, RunnerError> {
    let manifest = read_manifest(path)?;
    run_experiment(&manifest.plan, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    #[test]
    fn falls_plan_cardinality() {
        let plan = parse_config("scenario = \"falls\"\nseeds = 5\n[sweep]\ndevices = 1\n").unwrap();
        assert_eq!(expand(&plan).len(), 45);
    }

    #[test]
    fn city_plan_cardinality() {
        let plan = parse_config("scenario = \"city\"\nseeds = 1\n").unwrap();
        assert_eq!(expand(&plan).len(), 45);
    }

    #[test]
    fn hex_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn empty_outputs_give_header_only_files() {
        let plan = parse_config("scenario = \"falls\"\nseeds = [1]\n[sweep]\ndevices = 1\n").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = write_outputs(&plan, &[], dir.path()).unwrap();
        assert_eq!(m.files.len(), 2);
        let csv = fs::read_to_string(dir.path().join("falls_S1_ic0-40_1.csv")).unwrap();
        assert_eq!(csv, format!("{}\n", FALLS_COLUMNS.join(",")));
    }
}
