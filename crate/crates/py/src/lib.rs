//! Python bindings: single runs, whole plans, and manifest-backed experiments.
//!
//! Results cross the boundary as JSON and come out as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use fso_sim::city::{CityConfig, HealthStrategy};
use fso_sim::config::{parse_config_with, ExperimentPlan, Scenario};
use fso_sim::engine::WorldConfig;
use fso_sim::falls::FallsConfig;
use fso_sim::runner::{self, RunOutput};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn from_json(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_strategy(name: &str) -> Result<HealthStrategy, String> {
    serde_json::from_value(serde_json::Value::String(name.to_owned()))
        .map_err(|_| format!("unknown strategy {name:?}; expected fso, perfect_oracle or traditional"))
}

fn falls_json(seed: u64, informal_carers: u32, devices: u8, ticks: u64) -> Result<String, String> {
    let config = FallsConfig {
        informal_carers,
        devices_per_elderly: devices,
        ..FallsConfig::default()
    };
    let world = WorldConfig {
        max_ticks: ticks,
        master_seed: seed,
        ..WorldConfig::default()
    };
    let summary = runner::run_falls(world, &config).map_err(|e| e.to_string())?;
    serde_json::to_string(&summary).map_err(|e| e.to_string())
}

fn city_json(seed: u64, config: CityConfig, ticks: u64) -> Result<String, String> {
    let world = WorldConfig {
        max_ticks: ticks,
        master_seed: seed,
        ..WorldConfig::default()
    };
    let summary = runner::run_city(world, &config).map_err(|e| e.to_string())?;
    serde_json::to_string(&summary).map_err(|e| e.to_string())
}

fn plan_from(config: &str, overrides: Vec<(String, String)>) -> Result<ExperimentPlan, String> {
    parse_config_with(config, &overrides).map_err(|e| e.to_string())
}

fn outputs_json(outputs: &[RunOutput]) -> Result<String, String> {
    let rows: Vec<serde_json::Value> = outputs
        .iter()
        .map(|o| match o {
            RunOutput::Falls(s) => serde_json::to_value(s),
            RunOutput::City(s) => serde_json::to_value(s),
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    serde_json::to_string(&rows).map_err(|e| e.to_string())
}

/// One falls run. Returns the summary row as a dict.
#[pyfunction]
#[pyo3(signature = (seed, informal_carers = 0, devices = 1, ticks = 10_000))]
fn run_falls(
    py: Python<'_>,
    seed: u64,
    informal_carers: u32,
    devices: u8,
    ticks: u64,
) -> PyResult<Py<PyAny>> {
    let json = py
        .detach(|| falls_json(seed, informal_carers, devices, ticks))
        .map_err(value_err)?;
    from_json(py, &json)
}

/// One city run. `houses > 0` turns on the house fires.
#[pyfunction]
#[pyo3(signature = (
    seed,
    strategy = "fso",
    threshold = 150,
    individuals = 140,
    ticks = 3000,
    houses = 0,
    fire_collaboration = true,
))]
#[allow(clippy::too_many_arguments)]
fn run_city(
    py: Python<'_>,
    seed: u64,
    strategy: &str,
    threshold: u64,
    individuals: u32,
    ticks: u64,
    houses: u32,
    fire_collaboration: bool,
) -> PyResult<Py<PyAny>> {
    let config = CityConfig {
        strategy: parse_strategy(strategy).map_err(value_err)?,
        threshold,
        individuals,
        houses,
        fire_collaboration,
        ..CityConfig::default()
    };
    let json = py.detach(|| city_json(seed, config, ticks)).map_err(value_err)?;
    from_json(py, &json)
}

/// Run every point of a TOML plan in memory. Returns one dict per run.
#[pyfunction]
#[pyo3(signature = (config, overrides = Vec::new()))]
fn run_plan(py: Python<'_>, config: &str, overrides: Vec<(String, String)>) -> PyResult<Py<PyAny>> {
    let plan = plan_from(config, overrides).map_err(value_err)?;
    let json = py
        .detach(|| {
            runner::run_plan(&plan)
                .map_err(|e| e.to_string())
                .and_then(|o| outputs_json(&o))
        })
        .map_err(runtime_err)?;
    from_json(py, &json)
}

/// Run a TOML plan and write CSV, JSON and the manifest to `out_dir`. Returns the manifest.
#[pyfunction]
#[pyo3(signature = (config, out_dir, overrides = Vec::new()))]
fn run_experiment(
    py: Python<'_>,
    config: &str,
    out_dir: PathBuf,
    overrides: Vec<(String, String)>,
) -> PyResult<Py<PyAny>> {
    let plan = plan_from(config, overrides).map_err(value_err)?;
    let manifest = py
        .detach(|| runner::run_experiment(&plan, &out_dir))
        .map_err(runtime_err)?;
    from_json(py, &serde_json::to_string(&manifest).map_err(runtime_err)?)
}

/// Regenerate the outputs recorded in a manifest into `out_dir`.
#[pyfunction]
fn rerun_manifest(py: Python<'_>, manifest: PathBuf, out_dir: PathBuf) -> PyResult<Py<PyAny>> {
    let m = py
        .detach(|| runner::rerun_manifest(&manifest, &out_dir))
        .map_err(runtime_err)?;
    from_json(py, &serde_json::to_string(&m).map_err(runtime_err)?)
}

/// The fully resolved default plan for `scenario`, as TOML.
#[pyfunction]
fn default_plan(scenario: &str) -> PyResult<String> {
    let s: Scenario = scenario.parse().map_err(value_err)?;
    Ok(ExperimentPlan::defaults(s).to_toml())
}

#[pymodule]
fn fso_sim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(run_falls, m)?)?;
    m.add_function(wrap_pyfunction!(run_city, m)?)?;
    m.add_function(wrap_pyfunction!(run_plan, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(rerun_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(default_plan, m)?)?;
    Ok(())
}
