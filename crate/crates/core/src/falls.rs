//! Fall monitoring for elderly people living alone.
//!
//! Elderly agents (EAs) carry one or two device agents (DAs) that raise
//! alarms. Alarms go to a first-level coordinator which forwards them, in
//! the same tick, to the informal-carer coordinator (level 2, only when there
//! are informal carers) and to the hospital (level 3). Level 2 sends the
//! nearest free informal carer (IC) to check. Level 3 sends a mobility agent
//! (MA, an ambulance) as soon as one MA and one professional carer (PC) are
//! both free. Whoever reaches the EA first verifies the alarm: a false alarm
//! is cancelled everywhere, a real fall is taken to the hospital and treated.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{
    distance, move_toward, travel_ticks, AgentId, Arena, Model, Phase, Position, RngStreams,
    TickContext, Tick, VEHICLE_SPEED, WALK_SPEED,
};

#[derive(Debug, Error, PartialEq)]
pub enum FallsConfigError {
    #[error("{field} must be a probability, got {value}")]
    Probability { field: &'static str, value: f64 },
    #[error("devices per elderly must be 1 or 2, got {0}")]
    Devices(u8),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("treatment range {min}..={max} is empty")]
    TreatmentRange { min: u64, max: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FallsConfig {
    pub elderly: u32,
    /// 1 gives scenario S1 (accelerometer only), 2 gives S2 (accelerometer plus a second sensor).
    pub devices_per_elderly: u8,
    pub informal_carers: u32,
    pub mobility_agents: u32,
    pub professional_carers: u32,
    pub p_fall: f64,
    pub p_false_positive: f64,
    pub p_false_negative: f64,
    /// Miss probability of the second device; `None` means identical to the first.
    pub p_false_negative_second: Option<f64>,
    pub treatment_min: u64,
    pub treatment_max: u64,
    pub walk_speed: f64,
    pub vehicle_speed: f64,
    /// Length of one random wander step of an idle informal carer.
    pub wander_step: f64,
    /// Whether an MA driving back to the hospital still accrues social cost.
    pub count_return_legs: bool,
}

impl Default for FallsConfig {
    fn default() -> Self {
        Self {
            elderly: 30,
            devices_per_elderly: 1,
            informal_carers: 0,
            mobility_agents: 5,
            professional_carers: 6,
            p_fall: 1.0 / 600.0,
            p_false_positive: 1.0 / 500.0,
            p_false_negative: 100.0 / 500.0,
            p_false_negative_second: None,
            treatment_min: 100,
            treatment_max: 300,
            walk_speed: WALK_SPEED,
            vehicle_speed: VEHICLE_SPEED,
            wander_step: 1.0,
            count_return_legs: true,
        }
    }
}

impl FallsConfig {
    pub fn validate(&self) -> Result<(), FallsConfigError> {
        let probs = [
            ("p_fall", self.p_fall),
            ("p_false_positive", self.p_false_positive),
            ("p_false_negative", self.p_false_negative),
            (
                "p_false_negative_second",
                self.p_false_negative_second.unwrap_or(0.0),
            ),
        ];
        for (field, value) in probs {
            if !(0.0..=1.0).contains(&value) {
                return Err(FallsConfigError::Probability { field, value });
            }
        }
        if !(1..=2).contains(&self.devices_per_elderly) {
            return Err(FallsConfigError::Devices(self.devices_per_elderly));
        }
        if self.treatment_min > self.treatment_max {
            return Err(FallsConfigError::TreatmentRange {
                min: self.treatment_min,
                max: self.treatment_max,
            });
        }
        for (name, v) in [
            ("walk_speed", self.walk_speed),
            ("vehicle_speed", self.vehicle_speed),
            ("wander_step", self.wander_step),
        ] {
            if v.is_nan() || v <= 0.0 {
                return Err(FallsConfigError::NonPositive(name));
            }
        }
        if self.elderly == 0 {
            return Err(FallsConfigError::NonPositive("elderly"));
        }
        Ok(())
    }

    /// "S1" or "S2", by device count.
    pub fn scenario_tag(&self) -> String {
        format!("S{}", self.devices_per_elderly)
    }

    pub fn devices(&self) -> Vec<DeviceAgent> {
        (0..self.devices_per_elderly)
            .map(|i| DeviceAgent {
                p_false_positive: self.p_false_positive,
                p_false_negative: if i == 0 {
                    self.p_false_negative
                } else {
                    self.p_false_negative_second.unwrap_or(self.p_false_negative)
                },
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceAgent {
    /// Chance per tick of an alarm with no fall.
    pub p_false_positive: f64,
    /// Chance per fall of not noticing it.
    pub p_false_negative: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenseOutcome {
    pub fell: bool,
    pub alarm: bool,
}

/// Device reaction to one tick, given whether the EA fell.
///
/// Each device draws, in device order, first whether it catches the fall
/// (only when there is one) and then whether it fires spuriously. The EA
/// alarm is the OR of the devices, so a fall goes unnoticed only when every
/// device misses it.
pub fn devices_fire<R: Rng + ?Sized>(devices: &[DeviceAgent], fell: bool, rng: &mut R) -> bool {
    let mut alarm = false;
    for d in devices {
        if fell && rng.random_bool(1.0 - d.p_false_negative) {
            alarm = true;
        }
        if rng.random_bool(d.p_false_positive) {
            alarm = true;
        }
    }
    alarm
}

/// One tick of sensing for one monitorable EA: the fall on `fall_rng`, devices on `device_rng`.
pub fn sense<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    devices: &[DeviceAgent],
    p_fall: f64,
    fall_rng: &mut R1,
    device_rng: &mut R2,
) -> SenseOutcome {
    let fell = fall_rng.random_bool(p_fall);
    SenseOutcome {
        fell,
        alarm: devices_fire(devices, fell, device_rng),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AlarmId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlarmTruth {
    TrueFall,
    FalseAlarm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlarmState {
    Open,
    VerifiedFalse,
    ConfirmedTrue,
    Treated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verifier {
    InformalCarer,
    MobilityAgent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alarm {
    pub id: AlarmId,
    pub ea: usize,
    pub raised_at: Tick,
    pub truth: AlarmTruth,
    pub state: AlarmState,
    pub verified_at: Option<Tick>,
    pub ic: Option<usize>,
    pub ma: Option<usize>,
    pub pc: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElderlyState {
    Home,
    Carried,
    InTreatment,
    WalkingHome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElderlyAgent {
    pub id: AgentId,
    pub home: Position,
    pub state: ElderlyState,
    /// Ticks left before the EA is home and monitored again.
    pub non_falling_period: u64,
    pub pending_alarm: Option<AlarmId>,
}

impl ElderlyAgent {
    pub fn is_monitorable(&self) -> bool {
        self.state == ElderlyState::Home
            && self.non_falling_period == 0
            && self.pending_alarm.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformalCarer {
    pub id: AgentId,
    pub position: Position,
    pub task: Option<AlarmId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaState {
    Idle,
    EnRoute(AlarmId),
    Transporting(AlarmId),
    Returning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobilityAgent {
    pub id: AgentId,
    pub position: Position,
    pub state: MaState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PcState {
    Idle,
    Reserved(AlarmId),
    Treating { ea: usize, remaining: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfessionalCarer {
    pub id: AgentId,
    pub state: PcState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FallsEvent {
    AlarmRaised {
        alarm: AlarmId,
        truth: AlarmTruth,
    },
    IcDispatched {
        alarm: AlarmId,
    },
    MaDispatched {
        alarm: AlarmId,
        pc: AgentId,
    },
    Verified {
        alarm: AlarmId,
        by: Verifier,
        truth: AlarmTruth,
        raised_at: Tick,
    },
    IcRecalled {
        alarm: AlarmId,
    },
    MaAborted {
        alarm: AlarmId,
    },
    Delivered {
        alarm: AlarmId,
        pc: AgentId,
        treatment: u64,
    },
    TreatmentDone {
        ea: AgentId,
        walk_home: u64,
    },
    /// Per-tick outcome counts over monitorable EAs.
    Classified {
        tp: u32,
        fp: u32,
        fn_: u32,
        tn: u32,
    },
    /// Per-tick busy resources.
    Cost {
        ma: u32,
        ic: u32,
    },
    RunEnd {
        max_ticks: Tick,
        open_alarms: u32,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct TickCounts {
    tp: u32,
    fp: u32,
    fn_: u32,
    tn: u32,
    ma_busy: u32,
    ic_busy: u32,
}

#[derive(Debug, Clone)]
pub struct FallsModel {
    config: FallsConfig,
    devices: Vec<DeviceAgent>,
    hospital: Position,
    pub elderly: Vec<ElderlyAgent>,
    pub informal_carers: Vec<InformalCarer>,
    pub mobility_agents: Vec<MobilityAgent>,
    pub professional_carers: Vec<ProfessionalCarer>,
    pub alarms: Vec<Alarm>,
    l1: VecDeque<AlarmId>,
    l2: VecDeque<AlarmId>,
    l3: VecDeque<AlarmId>,
    level1: AgentId,
    level2: AgentId,
    level3: AgentId,
    counts: TickCounts,
}

impl FallsModel {
    /// Place everything on the `"placement"` stream.
    pub fn new(config: FallsConfig, arena: &Arena, rng: &mut RngStreams) -> Self {
        let place = rng.stream("placement");
        let mut next = 0u32;
        let mut id = || {
            next += 1;
            AgentId(next - 1)
        };
        let elderly: Vec<ElderlyAgent> = (0..config.elderly)
            .map(|_| ElderlyAgent {
                id: id(),
                home: arena.random_position(place),
                state: ElderlyState::Home,
                non_falling_period: 0,
                pending_alarm: None,
            })
            .collect();
        let hospital = arena.random_position(place);
        let informal_carers = (0..config.informal_carers)
            .map(|_| InformalCarer {
                id: id(),
                position: arena.random_position(place),
                task: None,
            })
            .collect();
        let mobility_agents = (0..config.mobility_agents)
            .map(|_| MobilityAgent {
                id: id(),
                position: hospital,
                state: MaState::Idle,
            })
            .collect();
        let professional_carers = (0..config.professional_carers)
            .map(|_| ProfessionalCarer {
                id: id(),
                state: PcState::Idle,
            })
            .collect();
        let (level1, level2, level3) = (id(), id(), id());
        Self {
            devices: config.devices(),
            config,
            hospital,
            elderly,
            informal_carers,
            mobility_agents,
            professional_carers,
            alarms: Vec::new(),
            l1: VecDeque::new(),
            l2: VecDeque::new(),
            l3: VecDeque::new(),
            level1,
            level2,
            level3,
            counts: TickCounts::default(),
        }
    }

    pub fn config(&self) -> &FallsConfig {
        &self.config
    }

    pub fn hospital(&self) -> Position {
        self.hospital
    }

    pub fn level2_queue(&self) -> impl Iterator<Item = AlarmId> + '_ {
        self.l2.iter().copied()
    }

    pub fn level3_queue(&self) -> impl Iterator<Item = AlarmId> + '_ {
        self.l3.iter().copied()
    }

    fn alarm(&mut self, id: AlarmId) -> &mut Alarm {
        &mut self.alarms[id.0 as usize]
    }

    pub fn open_alarms(&self) -> usize {
        self.alarms
            .iter()
            .filter(|a| a.state == AlarmState::Open)
            .count()
    }

    fn sense_all(&mut self, cx: &mut TickContext<'_, FallsEvent>) {
        for i in 0..self.elderly.len() {
            if !self.elderly[i].is_monitorable() {
                continue;
            }
            // Two streams so fall draws do not depend on how many devices there are.
            let fell = cx.rng.stream("falls").random_bool(self.config.p_fall);
            let out = SenseOutcome {
                fell,
                alarm: devices_fire(&self.devices, fell, cx.rng.stream("devices")),
            };
            match (out.fell, out.alarm) {
                (true, true) => self.counts.tp += 1,
                (false, true) => self.counts.fp += 1,
                (true, false) => self.counts.fn_ += 1,
                (false, false) => self.counts.tn += 1,
            }
            if out.alarm {
                let id = AlarmId(self.alarms.len() as u32);
                let truth = if out.fell {
                    AlarmTruth::TrueFall
                } else {
                    AlarmTruth::FalseAlarm
                };
                self.alarms.push(Alarm {
                    id,
                    ea: i,
                    raised_at: cx.tick,
                    truth,
                    state: AlarmState::Open,
                    verified_at: None,
                    ic: None,
                    ma: None,
                    pc: None,
                });
                self.elderly[i].pending_alarm = Some(id);
                self.l1.push_back(id);
                cx.emit(self.elderly[i].id, FallsEvent::AlarmRaised { alarm: id, truth });
            }
        }
    }

    fn coordinate(&mut self) -> Vec<(AgentId, FallsEvent)> {
        let mut events = Vec::new();
        // Level 1: forward to level 2 (when it exists) before level 3.
        while let Some(a) = self.l1.pop_front() {
            if !self.informal_carers.is_empty() {
                self.l2.push_back(a);
            }
            self.l3.push_back(a);
        }

        // Level 2: nearest free IC per alarm, alarms in arrival order.
        let mut keep = VecDeque::new();
        while let Some(a) = self.l2.pop_front() {
            if self.alarms[a.0 as usize].state != AlarmState::Open {
                continue;
            }
            let home = self.elderly[self.alarms[a.0 as usize].ea].home;
            let pick = self
                .informal_carers
                .iter()
                .enumerate()
                .filter(|(_, c)| c.task.is_none())
                .min_by(|(i, x), (j, y)| {
                    distance(x.position, home)
                        .total_cmp(&distance(y.position, home))
                        .then(i.cmp(j))
                })
                .map(|(i, _)| i);
            match pick {
                Some(i) => {
                    self.informal_carers[i].task = Some(a);
                    self.alarm(a).ic = Some(i);
                    events.push((self.informal_carers[i].id, FallsEvent::IcDispatched { alarm: a }));
                }
                None => keep.push_back(a),
            }
        }
        self.l2 = keep;

        // Level 3: an MA goes out only with a PC reserved for the same alarm.
        let mut keep = VecDeque::new();
        while let Some(a) = self.l3.pop_front() {
            if self.alarms[a.0 as usize].state == AlarmState::VerifiedFalse {
                continue;
            }
            let ma = self
                .mobility_agents
                .iter()
                .position(|m| m.state == MaState::Idle);
            let pc = self
                .professional_carers
                .iter()
                .position(|p| p.state == PcState::Idle);
            match (ma, pc) {
                (Some(m), Some(p)) => {
                    self.mobility_agents[m].state = MaState::EnRoute(a);
                    self.professional_carers[p].state = PcState::Reserved(a);
                    let alarm = self.alarm(a);
                    alarm.ma = Some(m);
                    alarm.pc = Some(p);
                    events.push((
                        self.mobility_agents[m].id,
                        FallsEvent::MaDispatched {
                            alarm: a,
                            pc: self.professional_carers[p].id,
                        },
                    ));
                }
                _ => keep.push_back(a),
            }
        }
        self.l3 = keep;
        events
    }

    fn verify(
        &mut self,
        a: AlarmId,
        by: Verifier,
        tick: Tick,
        who: AgentId,
        events: &mut Vec<(AgentId, FallsEvent)>,
    ) {
        let (truth, raised_at, ea, ic, ma, pc) = {
            let al = self.alarm(a);
            al.verified_at = Some(tick);
            al.state = match al.truth {
                AlarmTruth::TrueFall => AlarmState::ConfirmedTrue,
                AlarmTruth::FalseAlarm => AlarmState::VerifiedFalse,
            };
            (al.truth, al.raised_at, al.ea, al.ic, al.ma, al.pc)
        };
        events.push((
            who,
            FallsEvent::Verified {
                alarm: a,
                by,
                truth,
                raised_at,
            },
        ));
        if by == Verifier::MobilityAgent {
            // The alarm no longer needs a visit from level 2.
            self.l2.retain(|x| *x != a);
            if let Some(i) = ic {
                if self.informal_carers[i].task == Some(a) {
                    self.informal_carers[i].task = None;
                    events.push((self.informal_carers[i].id, FallsEvent::IcRecalled { alarm: a }));
                }
            }
        }
        if truth == AlarmTruth::FalseAlarm {
            self.elderly[ea].pending_alarm = None;
            self.l3.retain(|x| *x != a);
            if let Some(m) = ma {
                if matches!(self.mobility_agents[m].state, MaState::EnRoute(x) if x == a) {
                    self.mobility_agents[m].state = MaState::Returning;
                    if by == Verifier::InformalCarer {
                        events.push((self.mobility_agents[m].id, FallsEvent::MaAborted { alarm: a }));
                    }
                }
            }
            if let Some(p) = pc {
                self.professional_carers[p].state = PcState::Idle;
            }
        }
    }

    fn movement(&mut self, cx: &mut TickContext<'_, FallsEvent>) -> Vec<(AgentId, FallsEvent)> {
        let mut events = Vec::new();
        let speed = self.config.vehicle_speed;
        for i in 0..self.informal_carers.len() {
            match self.informal_carers[i].task {
                None => {
                    let heading = cx.rng.stream("wander").random_range(0.0..std::f64::consts::TAU);
                    let p = self.informal_carers[i].position;
                    let step = self.config.wander_step;
                    self.informal_carers[i].position = cx.arena.clamp(Position::new(
                        p.x + step * heading.cos(),
                        p.y + step * heading.sin(),
                    ));
                }
                Some(a) => {
                    self.counts.ic_busy += 1;
                    let target = self.elderly[self.alarms[a.0 as usize].ea].home;
                    let step = move_toward(self.informal_carers[i].position, target, speed, &cx.arena);
                    self.informal_carers[i].position = step.position;
                    if step.arrived {
                        self.informal_carers[i].task = None;
                        if self.alarms[a.0 as usize].state == AlarmState::Open {
                            let who = self.informal_carers[i].id;
                            self.verify(a, Verifier::InformalCarer, cx.tick, who, &mut events);
                        }
                    }
                }
            }
        }
        for m in 0..self.mobility_agents.len() {
            let state = self.mobility_agents[m].state;
            let counts = match state {
                MaState::Idle => false,
                MaState::Returning => self.config.count_return_legs,
                _ => true,
            };
            if counts {
                self.counts.ma_busy += 1;
            }
            match state {
                MaState::Idle => {}
                MaState::EnRoute(a) => {
                    let ea = self.alarms[a.0 as usize].ea;
                    let step = move_toward(
                        self.mobility_agents[m].position,
                        self.elderly[ea].home,
                        speed,
                        &cx.arena,
                    );
                    self.mobility_agents[m].position = step.position;
                    if step.arrived {
                        if self.alarms[a.0 as usize].state == AlarmState::Open {
                            let who = self.mobility_agents[m].id;
                            self.verify(a, Verifier::MobilityAgent, cx.tick, who, &mut events);
                        }
                        if self.alarms[a.0 as usize].truth == AlarmTruth::TrueFall {
                            self.elderly[ea].state = ElderlyState::Carried;
                            self.mobility_agents[m].state = MaState::Transporting(a);
                        }
                    }
                }
                MaState::Transporting(a) => {
                    let step =
                        move_toward(self.mobility_agents[m].position, self.hospital, speed, &cx.arena);
                    self.mobility_agents[m].position = step.position;
                    if step.arrived {
                        self.mobility_agents[m].state = MaState::Idle;
                        let (ea, pc) = {
                            let al = self.alarm(a);
                            al.state = AlarmState::Treated;
                            (al.ea, al.pc.expect("MA dispatched without a PC"))
                        };
                        let treatment = cx
                            .rng
                            .stream("treatment")
                            .random_range(self.config.treatment_min..=self.config.treatment_max);
                        self.professional_carers[pc].state = PcState::Treating {
                            ea,
                            remaining: treatment,
                        };
                        self.elderly[ea].state = ElderlyState::InTreatment;
                        events.push((
                            self.mobility_agents[m].id,
                            FallsEvent::Delivered {
                                alarm: a,
                                pc: self.professional_carers[pc].id,
                                treatment,
                            },
                        ));
                    }
                }
                MaState::Returning => {
                    let step =
                        move_toward(self.mobility_agents[m].position, self.hospital, speed, &cx.arena);
                    self.mobility_agents[m].position = step.position;
                    if step.arrived {
                        self.mobility_agents[m].state = MaState::Idle;
                    }
                }
            }
        }
        events
    }

    fn service(&mut self) -> Vec<(AgentId, FallsEvent)> {
        let mut events = Vec::new();
        for ea in self.elderly.iter_mut() {
            if ea.state == ElderlyState::WalkingHome {
                ea.non_falling_period = ea.non_falling_period.saturating_sub(1);
                if ea.non_falling_period == 0 {
                    ea.state = ElderlyState::Home;
                }
            }
        }
        for p in 0..self.professional_carers.len() {
            if let PcState::Treating { ea, remaining } = self.professional_carers[p].state {
                let remaining = remaining.saturating_sub(1);
                if remaining > 0 {
                    self.professional_carers[p].state = PcState::Treating { ea, remaining };
                    continue;
                }
                self.professional_carers[p].state = PcState::Idle;
                let walk = travel_ticks(
                    distance(self.hospital, self.elderly[ea].home),
                    self.config.walk_speed,
                );
                let e = &mut self.elderly[ea];
                e.pending_alarm = None;
                e.non_falling_period = walk;
                e.state = if walk == 0 {
                    ElderlyState::Home
                } else {
                    ElderlyState::WalkingHome
                };
                events.push((self.professional_carers[p].id, FallsEvent::TreatmentDone {
                    ea: e.id,
                    walk_home: walk,
                }));
            }
        }
        events
    }
}

impl Model for FallsModel {
    type Event = FallsEvent;

    fn run_phase(&mut self, phase: Phase, cx: &mut TickContext<'_, FallsEvent>) {
        match phase {
            Phase::EventGeneration => {}
            Phase::DeviceSensing => self.sense_all(cx),
            Phase::Coordination => {
                for (who, e) in self.coordinate() {
                    cx.emit(who, e);
                }
            }
            Phase::Movement => {
                for (who, e) in self.movement(cx) {
                    cx.emit(who, e);
                }
            }
            Phase::ServiceProgress => {
                for (who, e) in self.service() {
                    cx.emit(who, e);
                }
            }
            Phase::MetricsAccrual => {
                let c = std::mem::take(&mut self.counts);
                cx.emit(
                    self.level1,
                    FallsEvent::Classified {
                        tp: c.tp,
                        fp: c.fp,
                        fn_: c.fn_,
                        tn: c.tn,
                    },
                );
                if c.ma_busy > 0 || c.ic_busy > 0 {
                    cx.emit(
                        self.level3,
                        FallsEvent::Cost {
                            ma: c.ma_busy,
                            ic: c.ic_busy,
                        },
                    );
                }
            }
        }
    }

    fn finish(&mut self, cx: &mut TickContext<'_, FallsEvent>) {
        let open = self.open_alarms() as u32;
        cx.emit(
            self.level2,
            FallsEvent::RunEnd {
                max_ticks: cx.tick,
                open_alarms: open,
            },
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{World, WorldConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world(cfg: FallsConfig, ticks: u64, seed: u64) -> World<FallsModel> {
        World::build(
            WorldConfig {
                max_ticks: ticks,
                master_seed: seed,
                ..WorldConfig::default()
            },
            |arena, rng| FallsModel::new(cfg, arena, rng),
        )
        .unwrap()
    }

    #[test]
    fn forced_fall_with_perfect_device() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let dev = [DeviceAgent {
            p_false_positive: 0.0,
            p_false_negative: 0.0,
        }];
        assert!(devices_fire(&dev, true, &mut r));
        assert!(!devices_fire(&dev, false, &mut r));
    }

    #[test]
    fn second_device_false_fire_raises_alarm() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let dev = [
            DeviceAgent {
                p_false_positive: 0.0,
                p_false_negative: 0.2,
            },
            DeviceAgent {
                p_false_positive: 1.0,
                p_false_negative: 0.2,
            },
        ];
        let out = sense(&dev, 0.0, &mut r.clone(), &mut r);
        assert_eq!(out, SenseOutcome { fell: false, alarm: true });
    }

    #[test]
    fn config_validation() {
        let bad = FallsConfig {
            p_false_positive: -0.1,
            ..FallsConfig::default()
        };
        assert!(matches!(bad.validate(), Err(FallsConfigError::Probability { .. })));
        let bad = FallsConfig {
            devices_per_elderly: 3,
            ..FallsConfig::default()
        };
        assert_eq!(bad.validate(), Err(FallsConfigError::Devices(3)));
        FallsConfig::default().validate().unwrap();
    }

    fn one_alarm_model(ics: Vec<Position>, mas: u32, pcs: u32) -> FallsModel {
        let cfg = FallsConfig {
            elderly: 1,
            informal_carers: ics.len() as u32,
            mobility_agents: mas,
            professional_carers: pcs,
            ..FallsConfig::default()
        };
        let arena = WorldConfig::default().arena();
        let mut rng = RngStreams::new(1);
        let mut m = FallsModel::new(cfg, &arena, &mut rng);
        for (c, p) in m.informal_carers.iter_mut().zip(ics) {
            c.position = p;
        }
        m.elderly[0].home = Position::new(0.0, 0.0);
        m
    }

    fn raise(m: &mut FallsModel, truth: AlarmTruth) -> AlarmId {
        let id = AlarmId(m.alarms.len() as u32);
        m.alarms.push(Alarm {
            id,
            ea: 0,
            raised_at: 0,
            truth,
            state: AlarmState::Open,
            verified_at: None,
            ic: None,
            ma: None,
            pc: None,
        });
        m.elderly[0].pending_alarm = Some(id);
        m.l1.push_back(id);
        id
    }

    #[test]
    fn nearest_ic_is_dispatched() {
        let mut m = one_alarm_model(vec![Position::new(9.0, 0.0), Position::new(4.0, 0.0)], 1, 1);
        let a = raise(&mut m, AlarmTruth::FalseAlarm);
        m.coordinate();
        assert_eq!(m.informal_carers[1].task, Some(a));
        assert_eq!(m.informal_carers[0].task, None);
    }

    #[test]
    fn no_free_ic_keeps_alarm_queued() {
        let mut m = one_alarm_model(vec![Position::new(4.0, 0.0)], 0, 0);
        let a = raise(&mut m, AlarmTruth::FalseAlarm);
        m.informal_carers[0].task = Some(AlarmId(99));
        m.coordinate();
        assert_eq!(m.level2_queue().collect::<Vec<_>>(), vec![a]);
        assert_eq!(m.level3_queue().collect::<Vec<_>>(), vec![a]);
    }

    #[test]
    fn three_alarms_one_ic() {
        let mut m = one_alarm_model(vec![Position::new(4.0, 0.0)], 0, 0);
        for _ in 0..3 {
            raise(&mut m, AlarmTruth::FalseAlarm);
        }
        let ev = m.coordinate();
        assert_eq!(
            ev.iter()
                .filter(|(_, e)| matches!(e, FallsEvent::IcDispatched { .. }))
                .count(),
            1
        );
        assert_eq!(m.level2_queue().count(), 2);
    }

    #[test]
    fn without_ics_only_level3_receives() {
        let mut m = one_alarm_model(vec![], 0, 0);
        let a = raise(&mut m, AlarmTruth::TrueFall);
        m.coordinate();
        assert_eq!(m.level2_queue().count(), 0);
        assert_eq!(m.level3_queue().collect::<Vec<_>>(), vec![a]);
    }

    #[test]
    fn ma_needs_a_pc() {
        let mut m = one_alarm_model(vec![], 1, 0);
        raise(&mut m, AlarmTruth::TrueFall);
        m.coordinate();
        assert_eq!(m.mobility_agents[0].state, MaState::Idle);
        assert_eq!(m.level3_queue().count(), 1);
    }

    #[test]
    fn five_alarms_five_mas_six_pcs() {
        let mut m = one_alarm_model(vec![], 5, 6);
        for _ in 0..5 {
            raise(&mut m, AlarmTruth::FalseAlarm);
        }
        let ev = m.coordinate();
        assert_eq!(ev.len(), 5);
        let reserved = m
            .professional_carers
            .iter()
            .filter(|p| matches!(p.state, PcState::Reserved(_)))
            .count();
        assert_eq!(reserved, 5);
    }

    #[test]
    fn two_alarms_forwarded_in_order() {
        let mut m = one_alarm_model(vec![Position::new(30.0, 30.0)], 0, 0);
        let a = raise(&mut m, AlarmTruth::FalseAlarm);
        let b = raise(&mut m, AlarmTruth::FalseAlarm);
        m.informal_carers[0].task = Some(AlarmId(99));
        m.coordinate();
        assert_eq!(m.level2_queue().collect::<Vec<_>>(), vec![a, b]);
        assert_eq!(m.level3_queue().collect::<Vec<_>>(), vec![a, b]);
    }

    #[test]
    fn treatment_busy_for_exact_duration_and_walk_home() {
        let mut m = one_alarm_model(vec![], 1, 1);
        m.hospital = Position::new(10.0, 0.0);
        m.professional_carers[0].state = PcState::Treating {
            ea: 0,
            remaining: 100,
        };
        m.elderly[0].state = ElderlyState::InTreatment;
        let mut busy = 0;
        let mut done = None;
        for _ in 0..200 {
            if matches!(m.professional_carers[0].state, PcState::Treating { .. }) {
                busy += 1;
            }
            for (_, e) in m.service() {
                if let FallsEvent::TreatmentDone { walk_home, .. } = e {
                    done = Some(walk_home);
                }
            }
        }
        assert_eq!(busy, 100);
        assert_eq!(done, Some(40));
    }

    #[test]
    fn ic_cancel_aborts_en_route_ma() {
        let mut w = world(
            FallsConfig {
                elderly: 1,
                informal_carers: 1,
                p_fall: 0.0,
                p_false_positive: 0.0,
                ..FallsConfig::default()
            },
            1,
            3,
        );
        {
            let m = w.model_mut();
            m.elderly[0].home = Position::new(5.0, 5.0);
            m.hospital = Position::new(35.0, 35.0);
            for ma in &mut m.mobility_agents {
                ma.position = m.hospital;
            }
            m.informal_carers[0].position = Position::new(6.0, 5.0);
            raise(m, AlarmTruth::FalseAlarm);
        }
        w.run_to_end();
        let m = w.model();
        assert_eq!(m.alarms[0].state, AlarmState::VerifiedFalse);
        assert_eq!(m.alarms[0].verified_at, Some(1));
        // Aborted while still at the hospital, so it is idle again at once.
        let ma = m.alarms[0].ma.unwrap();
        assert_eq!(m.mobility_agents[ma].state, MaState::Idle);
        assert!(m.professional_carers.iter().all(|p| p.state == PcState::Idle));
        assert!(m.elderly[0].pending_alarm.is_none());
        assert!(w
            .log()
            .iter()
            .any(|r| matches!(r.event, FallsEvent::MaAborted { .. })));
    }

    #[test]
    fn true_fall_gets_delivered_and_treated() {
        let mut w = world(
            FallsConfig {
                elderly: 1,
                p_fall: 0.0,
                p_false_positive: 0.0,
                ..FallsConfig::default()
            },
            400,
            3,
        );
        {
            let m = w.model_mut();
            m.elderly[0].home = Position::new(5.0, 5.0);
            raise(m, AlarmTruth::TrueFall);
        }
        w.run_to_end();
        let m = w.model();
        assert_eq!(m.alarms[0].state, AlarmState::Treated);
        let log = w.log();
        let delivered = log
            .iter()
            .filter(|r| matches!(r.event, FallsEvent::Delivered { .. }))
            .count();
        let by_ma = log
            .iter()
            .filter(|r| {
                matches!(
                    r.event,
                    FallsEvent::Verified {
                        by: Verifier::MobilityAgent,
                        ..
                    }
                )
            })
            .count();
        assert_eq!((delivered, by_ma), (1, 1));
        assert!(m.mobility_agents.iter().all(|a| a.state == MaState::Idle));
    }

    #[test]
    fn guard_blocks_sensing() {
        let mut w = world(
            FallsConfig {
                elderly: 1,
                p_fall: 1.0,
                p_false_positive: 1.0,
                mobility_agents: 0,
                ..FallsConfig::default()
            },
            50,
            9,
        );
        w.run_to_end();
        // The first tick raises an alarm; with no ambulance it is never resolved, so no more are raised.
        let raised = w
            .log()
            .iter()
            .filter(|r| matches!(r.event, FallsEvent::AlarmRaised { .. }))
            .count();
        assert_eq!(raised, 1);
    }

    #[test]
    fn wandering_stays_in_bounds() {
        let mut w = world(
            FallsConfig {
                informal_carers: 20,
                p_fall: 0.0,
                p_false_positive: 0.0,
                ..FallsConfig::default()
            },
            500,
            4,
        );
        let arena = w.config().arena();
        w.run_to_end();
        assert!(w
            .model()
            .informal_carers
            .iter()
            .all(|c| arena.contains(c.position)));
    }
}
