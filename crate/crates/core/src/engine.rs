//! Tick-driven world: a bounded 2-D arena, a fixed per-tick phase order,
//! straight-line movement and named, independently seeded random streams.
//!
//! A scenario plugs into the engine by implementing [`Model`]. Each call to
//! [`World::advance_tick`] increments the tick and then runs the six phases in
//! [`Phase::ORDER`]; every record emitted during those phases is stamped with
//! the new tick.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulation cycle counter. Tick 0 is the initial state; the first step produces tick 1.
pub type Tick = u64;

/// Walking speed in cells per tick.
pub const WALK_SPEED: f64 = 0.25;
/// Speed of cars, taxis, ambulances, fire trucks and carers' vehicles.
pub const VEHICLE_SPEED: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("arena must be at least 3x3 cells, got {width}x{height}")]
    ArenaTooSmall { width: u32, height: u32 },
    #[error("max_ticks must be at least 1")]
    NoTicks,
    #[error("malformed event log line {line}: {reason}")]
    BadLogLine { line: usize, reason: String },
    #[error("event log i/o: {0}")]
    Io(String),
}

/// Identifier shared by every kind of agent in a run.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub width: u32,
    pub height: u32,
    pub max_ticks: Tick,
    pub master_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            width: 41,
            height: 41,
            max_ticks: 3000,
            master_seed: 1,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.width < 3 || self.height < 3 {
            return Err(EngineError::ArenaTooSmall {
                width: self.width,
                height: self.height,
            });
        }
        if self.max_ticks == 0 {
            return Err(EngineError::NoTicks);
        }
        Ok(())
    }

    pub fn arena(&self) -> Arena {
        Arena {
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance_to(&self, other: &Position) -> f64 {
        distance(*self, *other)
    }
}

/// Euclidean distance in cells.
pub fn distance(a: Position, b: Position) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// The bounded (non-toroidal) arena. Valid coordinates are `[0, width) x [0, height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arena {
    pub width: u32,
    pub height: u32,
}

impl Arena {
    pub fn contains(&self, p: Position) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64
    }

    pub fn clamp(&self, p: Position) -> Position {
        Position {
            x: p.x.clamp(0.0, (self.width as f64).next_down()),
            y: p.y.clamp(0.0, (self.height as f64).next_down()),
        }
    }

    /// Uniformly random point inside the arena.
    pub fn random_position<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Position {
        self.clamp(Position {
            x: rng.random_range(0.0..self.width as f64),
            y: rng.random_range(0.0..self.height as f64),
        })
    }

    pub fn center(&self) -> Position {
        Position::new(self.width as f64 / 2.0, self.height as f64 / 2.0)
    }
}

/// Result of one movement step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub position: Position,
    pub arrived: bool,
}

/// Advance at most `speed` cells along the straight segment toward `target`.
///
/// Reaching (or overshooting) the target snaps onto it and sets `arrived`.
pub fn move_toward(current: Position, target: Position, speed: f64, arena: &Arena) -> Step {
    debug_assert!(speed > 0.0);
    let d = distance(current, target);
    if d <= speed {
        return Step {
            position: arena.clamp(target),
            arrived: true,
        };
    }
    let f = speed / d;
    Step {
        position: arena.clamp(Position {
            x: current.x + (target.x - current.x) * f,
            y: current.y + (target.y - current.y) * f,
        }),
        arrived: false,
    }
}

/// Ticks needed to cover `dist` at `speed`, counting a partial final step as a full tick.
pub fn travel_ticks(dist: f64, speed: f64) -> Tick {
    if dist <= 0.0 {
        0
    } else {
        (dist / speed).ceil() as Tick
    }
}

/// Named random streams derived from one master seed.
///
/// Each name selects a distinct ChaCha stream, so drawing from `"falls"` never
/// shifts the sequence seen on `"placement"`.
#[derive(Debug, Clone)]
pub struct RngStreams {
    master_seed: u64,
    streams: BTreeMap<String, ChaCha8Rng>,
}

impl RngStreams {
    pub fn new(master_seed: u64) -> Self {
        Self {
            master_seed,
            streams: BTreeMap::new(),
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream(&mut self, name: &str) -> &mut ChaCha8Rng {
        let seed = self.master_seed;
        self.streams.entry(name.to_owned()).or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_id(name));
            rng
        })
    }
}

// FNV-1a; stable across platforms and releases, unlike std's hasher.
fn stream_id(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// One append-only log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record<E> {
    pub tick: Tick,
    pub agent: AgentId,
    pub event: E,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventLog<E> {
    records: Vec<Record<E>>,
}

impl<E> Default for EventLog<E> {
    fn default() -> Self {
        Self {
            records: Vec::new(),
        }
    }
}

impl<E> EventLog<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tick: Tick, agent: AgentId, event: E) {
        debug_assert!(self.records.last().is_none_or(|r| r.tick <= tick));
        self.records.push(Record { tick, agent, event });
    }

    pub fn records(&self) -> &[Record<E>] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Record<E>> {
        self.records.iter()
    }
}

impl<E: Serialize> EventLog<E> {
    /// Write one JSON object per line.
    pub fn write_ndjson<W: Write>(&self, mut out: W) -> Result<(), EngineError> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r).map_err(|e| EngineError::Io(e.to_string()))?;
            out.write_all(b"\n")
                .map_err(|e| EngineError::Io(e.to_string()))?;
        }
        Ok(())
    }
}

impl<E: DeserializeOwned> EventLog<E> {
    pub fn read_ndjson<R: BufRead>(input: R) -> Result<Self, EngineError> {
        let mut records = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| EngineError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let r = serde_json::from_str(&line).map_err(|e| EngineError::BadLogLine {
                line: i + 1,
                reason: e.to_string(),
            })?;
            records.push(r);
        }
        Ok(Self { records })
    }
}

/// The six per-tick phases, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    EventGeneration,
    DeviceSensing,
    Coordination,
    Movement,
    ServiceProgress,
    MetricsAccrual,
}

impl Phase {
    pub const ORDER: [Phase; 6] = [
        Phase::EventGeneration,
        Phase::DeviceSensing,
        Phase::Coordination,
        Phase::Movement,
        Phase::ServiceProgress,
        Phase::MetricsAccrual,
    ];
}

/// Everything a model may touch while a phase runs.
pub struct TickContext<'a, E> {
    pub tick: Tick,
    pub arena: Arena,
    pub rng: &'a mut RngStreams,
    log: &'a mut EventLog<E>,
}

impl<E> TickContext<'_, E> {
    pub fn emit(&mut self, agent: AgentId, event: E) {
        self.log.push(self.tick, agent, event);
    }
}

/// A scenario stepped by the engine. Phases a model does not need default to no-ops.
pub trait Model {
    type Event;

    fn run_phase(&mut self, phase: Phase, cx: &mut TickContext<'_, Self::Event>);

    /// Called once after the final tick.
    fn finish(&mut self, _cx: &mut TickContext<'_, Self::Event>) {}
}

/// A model with no agents.
#[derive(Debug, Default, Clone)]
pub struct EmptyModel;

impl Model for EmptyModel {
    type Event = ();
    fn run_phase(&mut self, _phase: Phase, _cx: &mut TickContext<'_, ()>) {}
}

pub struct World<M: Model> {
    config: WorldConfig,
    tick: Tick,
    rng: RngStreams,
    log: EventLog<M::Event>,
    model: M,
    finished: bool,
}

impl<M: Model> World<M> {
    pub fn new(config: WorldConfig, model: M) -> Result<Self, EngineError> {
        config.validate()?;
        Ok(Self {
            config,
            tick: 0,
            rng: RngStreams::new(config.master_seed),
            log: EventLog::new(),
            model,
            finished: false,
        })
    }

    /// Build the model from the world's own streams (placement draws etc.).
    pub fn build<F>(config: WorldConfig, make: F) -> Result<Self, EngineError>
    where
        F: FnOnce(&Arena, &mut RngStreams) -> M,
    {
        config.validate()?;
        let mut rng = RngStreams::new(config.master_seed);
        let model = make(&config.arena(), &mut rng);
        Ok(Self {
            config,
            tick: 0,
            rng,
            log: EventLog::new(),
            model,
            finished: false,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn tick(&self) -> Tick {
        self.tick
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut M {
        &mut self.model
    }

    pub fn log(&self) -> &EventLog<M::Event> {
        &self.log
    }

    pub fn rng_mut(&mut self) -> &mut RngStreams {
        &mut self.rng
    }

    pub fn is_done(&self) -> bool {
        self.tick >= self.config.max_ticks
    }

    /// Run one tick. Returns `false` (and does nothing) once `max_ticks` is reached.
    pub fn advance_tick(&mut self) -> bool {
        if self.is_done() {
            return false;
        }
        self.tick += 1;
        let mut cx = TickContext {
            tick: self.tick,
            arena: self.config.arena(),
            rng: &mut self.rng,
            log: &mut self.log,
        };
        for phase in Phase::ORDER {
            self.model.run_phase(phase, &mut cx);
        }
        true
    }

    /// Step to `max_ticks` and let the model close out its books.
    pub fn run_to_end(&mut self) {
        while self.advance_tick() {}
        if !self.finished {
            self.finished = true;
            let mut cx = TickContext {
                tick: self.tick,
                arena: self.config.arena(),
                rng: &mut self.rng,
                log: &mut self.log,
            };
            self.model.finish(&mut cx);
        }
    }

    pub fn into_parts(self) -> (M, EventLog<M::Event>) {
        (self.model, self.log)
    }
}
