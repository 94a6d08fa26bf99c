//! Experiment plans: which scenario, which parameter sweep, which seeds.
//!
//! Plans are written in TOML. A minimal falls plan is
//!
//! ```toml
//! scenario = "falls"
//! seed = 7
//! ```
//!
//! and everything else takes its default. The full grammar:
//!
//! ```toml
//! scenario = "falls"          # falls | city | fire
//! seed = 1                    # first seed
//! seeds = 20                  # how many consecutive seeds, or an explicit list [3, 9, 27]
//! out = "results"             # optional output directory
//!
//! [world]
//! width = 41
//! height = 41
//! ticks = 10000               # 10000 for falls, 3000 for city and fire
//!
//! [sweep]
//! informal_carers = "0..40 step 5"   # falls; a number, a list, or an inclusive range
//! devices = [1, 2]                   # falls
//! strategies = ["fso", "perfect_oracle", "traditional"]   # city
//! thresholds = [100, 150, 200]       # city
//! individuals = "60..140 step 20"    # city
//! fire_collaboration = [true, false] # fire
//!
//! [falls]                     # any FallsConfig field
//! p_fall = 0.0016666666666666668
//!
//! [city]                      # any CityConfig field, also for the fire scenario
//! treatment_min = 100
//! ```
//!
//! Unknown keys anywhere are errors.

use std::fmt;
use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::city::{CityConfig, HealthStrategy};
use crate::engine::{Tick, WorldConfig};
use crate::falls::FallsConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{field}: {reason}")]
    Validation { field: String, reason: String },
}

impl ConfigError {
    fn invalid(field: impl Into<String>, reason: impl fmt::Display) -> Self {
        ConfigError::Validation {
            field: field.into(),
            reason: reason.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Falls,
    City,
    Fire,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Falls => "falls",
            Scenario::City => "city",
            Scenario::Fire => "fire",
        })
    }
}

impl std::str::FromStr for Scenario {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "falls" => Ok(Scenario::Falls),
            "city" => Ok(Scenario::City),
            "fire" => Ok(Scenario::Fire),
            other => Err(ConfigError::invalid(
                "scenario",
                format!("expected falls, city or fire, got {other:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldPlan {
    pub width: u32,
    pub height: u32,
    pub ticks: Tick,
}

impl WorldPlan {
    pub fn for_seed(&self, seed: u64) -> WorldConfig {
        WorldConfig {
            width: self.width,
            height: self.height,
            max_ticks: self.ticks,
            master_seed: seed,
        }
    }
}

/// Parameter values to sweep. Only the lists that belong to the plan's scenario are filled.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub informal_carers: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub devices: Vec<u8>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub strategies: Vec<HealthStrategy>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub thresholds: Vec<Tick>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub individuals: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fire_collaboration: Vec<bool>,
}

/// A fully resolved plan: every default is filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub world: WorldPlan,
    pub sweep: Sweep,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub falls: Option<FallsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub city: Option<CityConfig>,
}

pub const DEFAULT_SEED_COUNT: u64 = 20;

/// An integer sweep as written: one value, a list, or `"a..b"` / `"a..b step s"`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
enum IntSweep {
    One(u64),
    List(Vec<u64>),
    Range(String),
}

/// Expand `"a..b step s"` (both ends included, step defaults to 1).
pub fn parse_range(text: &str) -> Result<Vec<u64>, String> {
    let (range, step) = match text.split_once("step") {
        Some((r, s)) => (
            r.trim(),
            s.trim()
                .parse::<u64>()
                .map_err(|e| format!("bad step in {text:?}: {e}"))?,
        ),
        None => (text.trim(), 1),
    };
    let (a, b) = range
        .split_once("..")
        .ok_or_else(|| format!("expected \"a..b\" or \"a..b step s\", got {text:?}"))?;
    let a: u64 = a.trim().parse().map_err(|e| format!("bad start in {text:?}: {e}"))?;
    let b: u64 = b.trim().parse().map_err(|e| format!("bad end in {text:?}: {e}"))?;
    if step == 0 {
        return Err(format!("step must be positive in {text:?}"));
    }
    if a > b {
        return Err(format!("empty range {text:?}"));
    }
    Ok((a..=b).step_by(step as usize).collect())
}

impl IntSweep {
    fn values(&self) -> Result<Vec<u64>, String> {
        match self {
            IntSweep::One(v) => Ok(vec![*v]),
            IntSweep::List(v) => Ok(v.clone()),
            IntSweep::Range(s) => parse_range(s),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SeedSpec {
    Count(u64),
    List(Vec<u64>),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWorld {
    width: Option<u32>,
    height: Option<u32>,
    ticks: Option<Tick>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    informal_carers: Option<IntSweep>,
    devices: Option<IntSweep>,
    strategies: Option<Vec<HealthStrategy>>,
    thresholds: Option<IntSweep>,
    individuals: Option<IntSweep>,
    fire_collaboration: Option<Vec<bool>>,
}

/// Typed view used to catch unknown keys and wrong types with a line number.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlan {
    scenario: Scenario,
    seed: Option<u64>,
    seeds: Option<SeedSpec>,
    out: Option<PathBuf>,
    #[serde(default)]
    world: RawWorld,
    #[serde(default)]
    sweep: RawSweep,
    #[allow(dead_code)]
    falls: Option<FallsConfig>,
    #[allow(dead_code)]
    city: Option<CityConfig>,
}

fn line_of(text: &str, err: &toml::de::Error) -> usize {
    err.span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0)
}

fn parse_error(text: &str, err: toml::de::Error) -> ConfigError {
    ConfigError::Parse {
        line: line_of(text, &err),
        message: err.message().trim().to_owned(),
    }
}

/// Parse and validate a plan.
pub fn parse_config(text: &str) -> Result<ExperimentPlan, ConfigError> {
    parse_config_with(text, &[])
}

/// Parse a plan after applying `key=value` overrides (dotted keys, TOML values;
/// anything that is not a TOML value is taken as a string).
pub fn parse_config_with(
    text: &str,
    overrides: &[(String, String)],
) -> Result<ExperimentPlan, ConfigError> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| parse_error(text, e))?;
    let text = if overrides.is_empty() {
        text.to_owned()
    } else {
        for (key, value) in overrides {
            apply_override(&mut table, key, value)?;
        }
        toml::to_string(&table).map_err(|e| ConfigError::invalid("overrides", e))?
    };
    let raw: RawPlan = toml::from_str(&text).map_err(|e| parse_error(&text, e))?;
    resolve(raw, &table)
}

fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<(), ConfigError> {
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_owned()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| {
        ConfigError::invalid(key, "empty override key")
    })?;
    let mut at = table;
    for p in parts {
        at = at
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::invalid(key, format!("{p} is not a section")))?;
    }
    at.insert(last.to_owned(), parsed);
    Ok(())
}

/// Overlay a TOML section on top of a default value.
fn overlay<T: Serialize + DeserializeOwned>(
    base: &T,
    patch: Option<&toml::Value>,
    section: &str,
) -> Result<T, ConfigError> {
    let mut merged = toml::Table::try_from(base).map_err(|e| ConfigError::invalid(section, e))?;
    if let Some(p) = patch {
        let p = p
            .as_table()
            .ok_or_else(|| ConfigError::invalid(section, "expected a section"))?;
        for (k, v) in p {
            merged.insert(k.clone(), v.clone());
        }
    }
    merged
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::invalid(section, e.message().trim()))
}

fn sweep_values<T: TryFrom<u64> + Clone>(
    field: &str,
    given: Option<&IntSweep>,
    default: &[T],
) -> Result<Vec<T>, ConfigError> {
    let Some(given) = given else {
        return Ok(default.to_vec());
    };
    given
        .values()
        .map_err(|r| ConfigError::invalid(format!("sweep.{field}"), r))?
        .into_iter()
        .map(|v| {
            T::try_from(v).map_err(|_| ConfigError::invalid(format!("sweep.{field}"), format!("{v} is out of range")))
        })
        .collect()
}

fn resolve(raw: RawPlan, table: &toml::Table) -> Result<ExperimentPlan, ConfigError> {
    let scenario = raw.scenario;
    let seeds = match raw.seeds {
        Some(SeedSpec::List(list)) => {
            if raw.seed.is_some() {
                return Err(ConfigError::invalid(
                    "seed",
                    "give either a first seed with a count, or a seed list",
                ));
            }
            list
        }
        Some(SeedSpec::Count(n)) => {
            let base = raw.seed.unwrap_or(1);
            (0..n).map(|i| base + i).collect()
        }
        None => {
            let base = raw.seed.unwrap_or(1);
            (0..DEFAULT_SEED_COUNT).map(|i| base + i).collect()
        }
    };
    let default_ticks = match scenario {
        Scenario::Falls => 10_000,
        Scenario::City | Scenario::Fire => 3000,
    };
    let world = WorldPlan {
        width: raw.world.width.unwrap_or(41),
        height: raw.world.height.unwrap_or(41),
        ticks: raw.world.ticks.unwrap_or(default_ticks),
    };

    let s = &raw.sweep;
    let misplaced: &[(&str, bool)] = match scenario {
        Scenario::Falls => &[
            ("strategies", s.strategies.is_some()),
            ("thresholds", s.thresholds.is_some()),
            ("individuals", s.individuals.is_some()),
            ("fire_collaboration", s.fire_collaboration.is_some()),
        ],
        Scenario::City => &[
            ("informal_carers", s.informal_carers.is_some()),
            ("devices", s.devices.is_some()),
            ("fire_collaboration", s.fire_collaboration.is_some()),
        ],
        Scenario::Fire => &[
            ("informal_carers", s.informal_carers.is_some()),
            ("devices", s.devices.is_some()),
            ("strategies", s.strategies.is_some()),
            ("thresholds", s.thresholds.is_some()),
            ("individuals", s.individuals.is_some()),
        ],
    };
    if let Some((name, _)) = misplaced.iter().find(|(_, given)| *given) {
        return Err(ConfigError::invalid(
            format!("sweep.{name}"),
            format!("not a {scenario} parameter"),
        ));
    }

    let mut sweep = Sweep::default();
    let (mut falls, mut city) = (None, None);
    match scenario {
        Scenario::Falls => {
            if table.contains_key("city") {
                return Err(ConfigError::invalid("city", "section not used by the falls scenario"));
            }
            sweep.informal_carers = sweep_values(
                "informal_carers",
                s.informal_carers.as_ref(),
                &[0, 5, 10, 15, 20, 25, 30, 35, 40],
            )?;
            sweep.devices = sweep_values("devices", s.devices.as_ref(), &[1, 2])?;
            falls = Some(overlay(&FallsConfig::default(), table.get("falls"), "falls")?);
        }
        Scenario::City | Scenario::Fire => {
            if table.contains_key("falls") {
                return Err(ConfigError::invalid(
                    "falls",
                    format!("section not used by the {scenario} scenario"),
                ));
            }
            let base = if scenario == Scenario::Fire {
                CityConfig::fire_experiment()
            } else {
                CityConfig::default()
            };
            city = Some(overlay(&base, table.get("city"), "city")?);
            if scenario == Scenario::City {
                sweep.strategies = s
                    .strategies
                    .clone()
                    .unwrap_or_else(|| HealthStrategy::ALL.to_vec());
                sweep.thresholds = sweep_values("thresholds", s.thresholds.as_ref(), &[100, 150, 200])?;
                sweep.individuals = sweep_values(
                    "individuals",
                    s.individuals.as_ref(),
                    &[60, 80, 100, 120, 140],
                )?;
            } else {
                sweep.fire_collaboration = s.fire_collaboration.clone().unwrap_or(vec![true, false]);
            }
        }
    }
    let plan = ExperimentPlan {
        scenario,
        seeds,
        out: raw.out,
        world,
        sweep,
        falls,
        city,
    };
    plan.validate()?;
    Ok(plan)
}

impl ExperimentPlan {
    /// The default plan for a scenario.
    pub fn defaults(scenario: Scenario) -> Self {
        parse_config(&format!("scenario = \"{scenario}\"")).expect("defaults are valid")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(ConfigError::invalid("seeds", "no seeds"));
        }
        self.world
            .for_seed(0)
            .validate()
            .map_err(|e| ConfigError::invalid("world", e))?;
        let empty = |name: &str, len: usize| {
            if len == 0 {
                Err(ConfigError::invalid(format!("sweep.{name}"), "empty sweep"))
            } else {
                Ok(())
            }
        };
        match self.scenario {
            Scenario::Falls => {
                empty("informal_carers", self.sweep.informal_carers.len())?;
                empty("devices", self.sweep.devices.len())?;
                if let Some(d) = self.sweep.devices.iter().find(|d| !(1..=2).contains(*d)) {
                    return Err(ConfigError::invalid("sweep.devices", format!("{d} is not 1 or 2")));
                }
                let falls = self
                    .falls
                    .as_ref()
                    .ok_or_else(|| ConfigError::invalid("falls", "missing"))?;
                falls.validate().map_err(|e| ConfigError::invalid("falls", e))?;
            }
            Scenario::City => {
                empty("strategies", self.sweep.strategies.len())?;
                empty("thresholds", self.sweep.thresholds.len())?;
                empty("individuals", self.sweep.individuals.len())?;
                self.city_config()?;
            }
            Scenario::Fire => {
                empty("fire_collaboration", self.sweep.fire_collaboration.len())?;
                self.city_config()?;
            }
        }
        Ok(())
    }

    fn city_config(&self) -> Result<&CityConfig, ConfigError> {
        let city = self
            .city
            .as_ref()
            .ok_or_else(|| ConfigError::invalid("city", "missing"))?;
        city.validate().map_err(|e| ConfigError::invalid("city", e))?;
        Ok(city)
    }

    /// The plan as TOML that parses back to the same plan.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plans serialize")
    }
}
