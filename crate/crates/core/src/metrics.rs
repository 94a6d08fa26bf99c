//! Run summaries computed from event logs, and CSV/JSON output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::city::{CityEvent, HealthStrategy, TransportMode};
use crate::engine::{EventLog, Tick};
use crate::falls::{AlarmTruth, FallsEvent, Verifier};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("event log has no end-of-run record")]
    IncompleteRun,
    #[error("i/o failure on {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0).then(|| num / den)
}

/// Identifies a falls run inside a sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallsRunInfo {
    pub scenario: String,
    pub informal_carers: u32,
    pub seed: u64,
}

/// Raw counts of a falls run, from which every derived column follows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallsCounts {
    pub max_ticks: Tick,
    pub fp: u64,
    pub fn_: u64,
    pub tp: u64,
    pub tn: u64,
    pub csc_ambulances: u64,
    pub csc_volunteers: u64,
    pub cwt: u64,
    pub reqs_handled: u64,
    pub ic_verifications: u64,
    pub ma_verifications: u64,
    pub ma_interventions: u64,
    pub open_alarms: u64,
}

/// One row of the falls results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallsSummary {
    pub scenario: String,
    pub informal_carers: u32,
    pub seed: u64,
    pub max_ticks: Tick,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tp: u64,
    pub tn: u64,
    pub avg_fp_per_tick: Option<f64>,
    pub avg_fn_per_tick: Option<f64>,
    pub fp_ratio: Option<f64>,
    pub fn_ratio: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub csc_ambulances: u64,
    pub csc_volunteers: u64,
    pub cwt: u64,
    pub reqs_handled: u64,
    pub ic_verifications: u64,
    pub ma_verifications: u64,
    pub ma_interventions: u64,
    pub avg_ma_cost: Option<f64>,
    pub avg_wt: Option<f64>,
    pub open_alarms: u64,
}

impl FallsSummary {
    pub fn from_counts(info: FallsRunInfo, c: FallsCounts) -> Self {
        let f = |x: u64| x as f64;
        Self {
            scenario: info.scenario,
            informal_carers: info.informal_carers,
            seed: info.seed,
            max_ticks: c.max_ticks,
            fp: c.fp,
            fn_: c.fn_,
            tp: c.tp,
            tn: c.tn,
            avg_fp_per_tick: ratio(f(c.fp), f(c.max_ticks)),
            avg_fn_per_tick: ratio(f(c.fn_), f(c.max_ticks)),
            fp_ratio: ratio(f(c.fp), f(c.reqs_handled)),
            fn_ratio: ratio(f(c.fn_), f(c.fn_ + c.tn)),
            sensitivity: ratio(f(c.tp), f(c.tp + c.fn_)),
            specificity: ratio(f(c.tn), f(c.tn + c.fp)),
            csc_ambulances: c.csc_ambulances,
            csc_volunteers: c.csc_volunteers,
            cwt: c.cwt,
            reqs_handled: c.reqs_handled,
            ic_verifications: c.ic_verifications,
            ma_verifications: c.ma_verifications,
            ma_interventions: c.ma_interventions,
            avg_ma_cost: ratio(f(c.csc_ambulances), f(c.reqs_handled)),
            avg_wt: ratio(f(c.cwt), f(c.reqs_handled)),
            open_alarms: c.open_alarms,
        }
    }

    /// Check the five ratio columns against the raw counts. Returns the names that disagree.
    pub fn identity_violations(&self, tol: f64) -> Vec<&'static str> {
        let f = |x: u64| x as f64;
        let checks: [(&'static str, Option<f64>, f64, f64); 5] = [
            ("avg_ma_cost", self.avg_ma_cost, f(self.csc_ambulances), f(self.reqs_handled)),
            ("avg_wt", self.avg_wt, f(self.cwt), f(self.reqs_handled)),
            ("fp_ratio", self.fp_ratio, f(self.fp), f(self.reqs_handled)),
            ("fn_ratio", self.fn_ratio, f(self.fn_), f(self.fn_ + self.tn)),
            ("avg_fp_per_tick", self.avg_fp_per_tick, f(self.fp), f(self.max_ticks)),
        ];
        checks
            .into_iter()
            .filter(|(_, got, num, den)| match (got, *den == 0.0) {
                (None, true) => false,
                (Some(v), false) => (v - num / den).abs() > tol || !v.is_finite(),
                _ => true,
            })
            .map(|(name, ..)| name)
            .collect()
    }
}

pub fn falls_counts(log: &EventLog<FallsEvent>) -> Result<FallsCounts, MetricsError> {
    let mut c = FallsCounts::default();
    let mut ended = false;
    for r in log.iter() {
        match &r.event {
            FallsEvent::Classified { tp, fp, fn_, tn } => {
                c.tp += u64::from(*tp);
                c.fp += u64::from(*fp);
                c.fn_ += u64::from(*fn_);
                c.tn += u64::from(*tn);
            }
            FallsEvent::Cost { ma, ic } => {
                c.csc_ambulances += u64::from(*ma);
                c.csc_volunteers += u64::from(*ic);
            }
            FallsEvent::Verified { by, raised_at, .. } => {
                c.reqs_handled += 1;
                c.cwt += r.tick - raised_at;
                match by {
                    Verifier::InformalCarer => c.ic_verifications += 1,
                    Verifier::MobilityAgent => c.ma_verifications += 1,
                }
            }
            FallsEvent::Delivered { .. } => c.ma_interventions += 1,
            FallsEvent::RunEnd {
                max_ticks,
                open_alarms,
            } => {
                ended = true;
                c.max_ticks = *max_ticks;
                c.open_alarms = u64::from(*open_alarms);
            }
            FallsEvent::AlarmRaised { .. }
            | FallsEvent::IcDispatched { .. }
            | FallsEvent::MaDispatched { .. }
            | FallsEvent::IcRecalled { .. }
            | FallsEvent::MaAborted { .. }
            | FallsEvent::TreatmentDone { .. } => {}
        }
    }
    if !ended {
        return Err(MetricsError::IncompleteRun);
    }
    Ok(c)
}

/// Summarize a finished falls run. Alarms still open at the end are counted
/// in `open_alarms` and left out of the averages.
pub fn summarize_falls_run(
    log: &EventLog<FallsEvent>,
    info: FallsRunInfo,
) -> Result<FallsSummary, MetricsError> {
    Ok(FallsSummary::from_counts(info, falls_counts(log)?))
}

/// Per-alarm true/false tallies, used by tests to cross-check classification.
pub fn alarm_truth_counts(log: &EventLog<FallsEvent>) -> (u64, u64) {
    log.iter().fold((0, 0), |(t, f), r| match r.event {
        FallsEvent::AlarmRaised {
            truth: AlarmTruth::TrueFall,
            ..
        } => (t + 1, f),
        FallsEvent::AlarmRaised {
            truth: AlarmTruth::FalseAlarm,
            ..
        } => (t, f + 1),
        _ => (t, f),
    })
}

/// Identifies a city run inside a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityRunInfo {
    pub strategy: HealthStrategy,
    pub threshold: Tick,
    pub individuals: u32,
    pub fire_collaboration: bool,
    pub seed: u64,
}

/// One row of the city results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitySummary {
    pub strategy: HealthStrategy,
    pub threshold: Tick,
    pub individuals: u32,
    pub fire_collaboration: bool,
    pub seed: u64,
    pub requests: u64,
    pub treated: u64,
    pub died: u64,
    pub unresolved: u64,
    pub avg_querying_time: Option<f64>,
    pub son_inter_community_count: u64,
    pub traditional_failure_count: u64,
    pub inter_hospital_transfers: u64,
    pub on_foot: u64,
    pub own_car: u64,
    pub taxi: u64,
    pub fires: u64,
    pub fully_burned_houses: u64,
    pub trucks_dispatched: u64,
}

pub fn summarize_city_run(
    log: &EventLog<CityEvent>,
    info: CityRunInfo,
) -> Result<CitySummary, MetricsError> {
    let mut s = CitySummary {
        strategy: info.strategy,
        threshold: info.threshold,
        individuals: info.individuals,
        fire_collaboration: info.fire_collaboration,
        seed: info.seed,
        requests: 0,
        treated: 0,
        died: 0,
        unresolved: 0,
        avg_querying_time: None,
        son_inter_community_count: 0,
        traditional_failure_count: 0,
        inter_hospital_transfers: 0,
        on_foot: 0,
        own_car: 0,
        taxi: 0,
        fires: 0,
        fully_burned_houses: 0,
        trucks_dispatched: 0,
    };
    let mut querying_total = 0u64;
    let mut ended = false;
    for r in log.iter() {
        match &r.event {
            CityEvent::HealthRequest { .. } => s.requests += 1,
            CityEvent::Treated {
                querying_time,
                inter_community,
                ..
            } => {
                s.treated += 1;
                querying_total += querying_time;
                if *inter_community {
                    s.son_inter_community_count += 1;
                }
            }
            CityEvent::Died { .. } => s.died += 1,
            CityEvent::HospitalRejected { .. } => s.traditional_failure_count += 1,
            CityEvent::ResourceTransfer { .. } => s.inter_hospital_transfers += 1,
            CityEvent::OfficeArrival { mode } => match mode {
                TransportMode::OnFoot => s.on_foot += 1,
                TransportMode::OwnCar => s.own_car += 1,
                TransportMode::Taxi => s.taxi += 1,
            },
            CityEvent::Ignition { .. } => s.fires += 1,
            CityEvent::BurnedDown { .. } => s.fully_burned_houses += 1,
            CityEvent::TruckDispatched { .. } => s.trucks_dispatched += 1,
            CityEvent::RunEnd { .. } => ended = true,
            _ => {}
        }
    }
    if !ended {
        return Err(MetricsError::IncompleteRun);
    }
    s.unresolved = s.requests - s.treated - s.died;
    s.avg_querying_time = ratio(querying_total as f64, s.treated as f64);
    Ok(s)
}

/// Write rows as CSV with a header taken from the row type's field names.
///
/// With no rows only the header is written, built from `empty_header`.
pub fn write_csv<T: Serialize>(
    path: &Path,
    rows: &[T],
    empty_header: &[&str],
) -> Result<(), MetricsError> {
    let io = |e: &dyn std::fmt::Display| MetricsError::Io {
        path: path.to_owned(),
        reason: e.to_string(),
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(!rows.is_empty())
        .from_path(path)
        .map_err(|e| io(&e))?;
    if rows.is_empty() {
        w.write_record(empty_header).map_err(|e| io(&e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| io(&e))?;
    }
    w.flush().map_err(|e| io(&e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), MetricsError> {
    let io = |e: &dyn std::fmt::Display| MetricsError::Io {
        path: path.to_owned(),
        reason: e.to_string(),
    };
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io(&e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io(&e))
}

pub const FALLS_COLUMNS: [&str; 24] = [
    "scenario",
    "informal_carers",
    "seed",
    "max_ticks",
    "fp",
    "fn",
    "tp",
    "tn",
    "avg_fp_per_tick",
    "avg_fn_per_tick",
    "fp_ratio",
    "fn_ratio",
    "sensitivity",
    "specificity",
    "csc_ambulances",
    "csc_volunteers",
    "cwt",
    "reqs_handled",
    "ic_verifications",
    "ma_verifications",
    "ma_interventions",
    "avg_ma_cost",
    "avg_wt",
    "open_alarms",
];

pub const CITY_COLUMNS: [&str; 19] = [
    "strategy",
    "threshold",
    "individuals",
    "fire_collaboration",
    "seed",
    "requests",
    "treated",
    "died",
    "unresolved",
    "avg_querying_time",
    "son_inter_community_count",
    "traditional_failure_count",
    "inter_hospital_transfers",
    "on_foot",
    "own_car",
    "taxi",
    "fires",
    "fully_burned_houses",
    "trucks_dispatched",
];
