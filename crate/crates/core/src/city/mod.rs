//! City model: individuals going about daily activities, houses catching
//! fire, and patients looking for treatment in a set of hospitals.
//!
//! Community tree:
//!
//! ```text
//! city
//! └── emergency_response
//!     ├── residents            individuals, taxis, house fire detectors
//!     ├── firefighters         fire trucks with their crews
//!     └── regional_hospitals
//!         └── hospital-1..n    doctors, ambulances, medical appliances
//! ```

mod activity;
mod fire;
mod health;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{AgentId, Arena, Model, Phase, Position, RngStreams, Tick, TickContext};
use crate::engine::{VEHICLE_SPEED, WALK_SPEED};
use crate::mutualism::GroupActivity;
use crate::protocol::{
    Allocation, CommunityId, Fso, Notification, NotificationKind, RequestId, RoleKind, ServiceRequest,
    SonId, TreeSpec,
};

pub use activity::{plan_office_trip, trigger_activity};
pub use fire::{fire_dynamics_step, generate_fire_events, truck_reduction, FireStep};
pub use health::{health_needs, required_appliances, SEVERE};

#[derive(Debug, Error, PartialEq)]
pub enum CityConfigError {
    #[error("{field} must be a probability, got {value}")]
    Probability { field: &'static str, value: f64 },
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("{0} range is empty")]
    EmptyRange(&'static str),
    #[error("activity probabilities add up to {0}, more than 1")]
    ActivityMass(f64),
    #[error("{firefighters} firefighters cannot crew {trucks} trucks (1 to 4 each)")]
    Crew { trucks: u32, firefighters: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HealthStrategy {
    Traditional,
    Fso,
    PerfectOracle,
}

impl HealthStrategy {
    pub const ALL: [HealthStrategy; 3] = [
        HealthStrategy::Fso,
        HealthStrategy::PerfectOracle,
        HealthStrategy::Traditional,
    ];
}

impl fmt::Display for HealthStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HealthStrategy::Traditional => "traditional",
            HealthStrategy::Fso => "fso",
            HealthStrategy::PerfectOracle => "perfect_oracle",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityKind {
    TalkOnPhone,
    GoToMarket,
    WalkInPark,
    GoToLocation,
    GoToOffice,
    HealthCare,
}

impl ActivityKind {
    pub const ALL: [ActivityKind; 6] = [
        ActivityKind::TalkOnPhone,
        ActivityKind::GoToMarket,
        ActivityKind::WalkInPark,
        ActivityKind::GoToLocation,
        ActivityKind::GoToOffice,
        ActivityKind::HealthCare,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportMode {
    OnFoot,
    OwnCar,
    Taxi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutualismContext {
    Walk,
    RideShare,
    Taxi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CityConfig {
    pub individuals: u32,
    pub houses: u32,
    pub hospitals: u32,
    pub doctors: u32,
    pub ambulances: u32,
    pub appliances: u32,
    pub fire_trucks: u32,
    pub firefighters: u32,
    pub offices: u32,
    pub taxis: u32,
    pub car_owner_fraction: f64,

    pub strategy: HealthStrategy,
    /// Ticks a patient may wait for a full allocation before dying.
    pub threshold: Tick,
    pub fire_collaboration: bool,
    /// Upward hops an exception may make; `None` means the tree height.
    pub flooding_threshold: Option<u32>,

    pub activity_probability: f64,
    pub health_probability: f64,
    pub talk_duration: Tick,
    pub market_duration: Tick,
    pub walk_duration: Tick,
    pub location_stay: Tick,
    pub office_stay: Tick,
    pub office_deadline_min: Tick,
    pub office_deadline_max: Tick,
    pub walk_company_probability: f64,
    pub car_share_radius: f64,
    pub car_share_invalidation: Tick,

    pub fire_interval: Tick,
    pub fires_per_cycle: u32,
    pub fire_growth_probability: f64,
    pub help_radius: f64,
    pub helper_reduction: f64,
    pub escalation_health: f64,

    pub treatment_min: Tick,
    pub treatment_max: Tick,
    /// Appliances needed = ceil(severity / divisor).
    pub appliance_divisor: u8,

    pub walk_speed: f64,
    pub vehicle_speed: f64,
}

impl Default for CityConfig {
    fn default() -> Self {
        Self {
            individuals: 140,
            houses: 0,
            hospitals: 4,
            doctors: 15,
            ambulances: 8,
            appliances: 70,
            fire_trucks: 10,
            firefighters: 35,
            offices: 4,
            taxis: 10,
            car_owner_fraction: 0.25,
            strategy: HealthStrategy::Fso,
            threshold: 150,
            fire_collaboration: true,
            flooding_threshold: None,
            activity_probability: 0.18,
            health_probability: 0.09,
            talk_duration: 20,
            market_duration: 60,
            walk_duration: 80,
            location_stay: 40,
            office_stay: 100,
            office_deadline_min: 20,
            office_deadline_max: 120,
            walk_company_probability: 0.5,
            car_share_radius: 3.0,
            car_share_invalidation: 50,
            fire_interval: 100,
            fires_per_cycle: 10,
            fire_growth_probability: 0.5,
            help_radius: 3.0,
            helper_reduction: 0.5,
            escalation_health: 80.0,
            treatment_min: 100,
            treatment_max: 500,
            appliance_divisor: 3,
            walk_speed: WALK_SPEED,
            vehicle_speed: VEHICLE_SPEED,
        }
    }
}

impl CityConfig {
    /// The house-fire experiment: 50 houses, 50 individuals, 10 trucks, 35 firefighters.
    pub fn fire_experiment() -> Self {
        Self {
            individuals: 50,
            houses: 50,
            fire_trucks: 10,
            firefighters: 35,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), CityConfigError> {
        for (field, value) in [
            ("car_owner_fraction", self.car_owner_fraction),
            ("activity_probability", self.activity_probability),
            ("health_probability", self.health_probability),
            ("walk_company_probability", self.walk_company_probability),
            ("fire_growth_probability", self.fire_growth_probability),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(CityConfigError::Probability { field, value });
            }
        }
        let mass = 5.0 * self.activity_probability + self.health_probability;
        if mass > 1.0 + 1e-12 {
            return Err(CityConfigError::ActivityMass(mass));
        }
        for (name, v) in [
            ("walk_speed", self.walk_speed),
            ("vehicle_speed", self.vehicle_speed),
        ] {
            if v.is_nan() || v <= 0.0 {
                return Err(CityConfigError::NonPositive(name));
            }
        }
        for (name, v) in [
            ("hospitals", u64::from(self.hospitals)),
            ("offices", u64::from(self.offices)),
            ("appliance_divisor", u64::from(self.appliance_divisor)),
            ("fire_interval", self.fire_interval),
        ] {
            if v == 0 {
                return Err(CityConfigError::NonPositive(name));
            }
        }
        if self.treatment_min > self.treatment_max {
            return Err(CityConfigError::EmptyRange("treatment"));
        }
        if self.office_deadline_min > self.office_deadline_max {
            return Err(CityConfigError::EmptyRange("office_deadline"));
        }
        if self.firefighters < self.fire_trucks || self.firefighters > 4 * self.fire_trucks {
            return Err(CityConfigError::Crew {
                trucks: self.fire_trucks,
                firefighters: self.firefighters,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CityEvent {
    ActivityStarted {
        kind: ActivityKind,
    },
    ActivityFinished {
        kind: ActivityKind,
    },
    ActivityCanceled {
        kind: ActivityKind,
    },
    MutualismFormed {
        context: MutualismContext,
        partners: Vec<AgentId>,
    },
    MutualismEnded {
        context: MutualismContext,
    },
    OfficeArrival {
        mode: TransportMode,
    },
    HealthRequest {
        request: RequestId,
        severity: u8,
        deadline: Tick,
    },
    AmbulanceAssigned {
        request: RequestId,
        ambulance: AgentId,
    },
    HospitalRejected {
        request: RequestId,
        hospital: AgentId,
    },
    Treated {
        request: RequestId,
        querying_time: Tick,
        hospital: AgentId,
        inter_community: bool,
    },
    ResourceTransfer {
        request: RequestId,
        resource: AgentId,
        from: AgentId,
        to: AgentId,
    },
    TreatmentFinished {
        request: RequestId,
    },
    Died {
        request: RequestId,
    },
    Ignition {
        house: AgentId,
        firelevel: u32,
    },
    HelpStarted {
        house: AgentId,
    },
    Escalated {
        house: AgentId,
    },
    TruckDispatched {
        house: AgentId,
        truck: AgentId,
        firefighters: u32,
    },
    Extinguished {
        house: AgentId,
        health: f64,
    },
    BurnedDown {
        house: AgentId,
    },
    RunEnd {
        unresolved: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WaypointAction {
    Pass,
    PickUp(usize),
    DropOff(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub target: Position,
    pub action: WaypointAction,
}

/// What a busy individual is doing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Task {
    /// Staying put until the activity ends.
    Stay { kind: ActivityKind, remaining: Tick },
    /// Walking toward the park, alone or with a group.
    Walk { group: Option<usize>, remaining: Tick },
    /// Moving on one's own toward `target`, then staying there.
    Travel {
        kind: ActivityKind,
        target: Position,
        speed: f64,
        mode: Option<TransportMode>,
    },
    /// Waiting without a car for someone driving the same way.
    AwaitRide { destination: Position, since: Tick },
    /// Sharing someone else's car.
    Riding { driver: usize, picked_up: bool },
    /// Driving one's own car, possibly with a passenger.
    Drive {
        route: VecDeque<Waypoint>,
        passenger: Option<usize>,
    },
    AwaitTaxi { office: usize, since: Tick },
    InTaxi { taxi: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum IndividualState {
    Idle,
    Busy(Task),
    Helping { house: usize, postponed: Option<Task> },
    Patient(usize),
    Dead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub id: AgentId,
    pub position: Position,
    pub owns_car: bool,
    pub office: usize,
    pub state: IndividualState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxiJob {
    pub passenger: usize,
    pub office: usize,
    pub picked_up: bool,
    pub son: SonId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Taxi {
    pub id: AgentId,
    pub position: Position,
    pub job: Option<TaxiJob>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct House {
    pub id: AgentId,
    pub detector: AgentId,
    pub position: Position,
    pub health: f64,
    pub firelevel: f64,
    pub burning: bool,
    pub ignited: bool,
    pub escalated: bool,
    pub truck: Option<usize>,
}

impl House {
    pub fn new(id: AgentId, detector: AgentId, position: Position) -> Self {
        Self {
            id,
            detector,
            position,
            health: 100.0,
            firelevel: 0.0,
            burning: false,
            ignited: false,
            escalated: false,
            truck: None,
        }
    }

    pub fn is_burned_down(&self) -> bool {
        self.health <= 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truck {
    pub id: AgentId,
    pub position: Position,
    pub firefighters: u32,
    pub job: Option<(usize, SonId)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hospital {
    pub id: AgentId,
    pub community: CommunityId,
    pub position: Position,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Doctor {
    pub id: AgentId,
    pub hospital: usize,
    /// Severe conditions (4..=10) this doctor is expert in; 1..=3 are always covered.
    pub expertise: BTreeSet<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ambulance {
    pub id: AgentId,
    pub hospital: usize,
    pub position: Position,
    /// Patient being fetched or carried.
    pub patient: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Appliance {
    pub id: AgentId,
    pub hospital: usize,
    pub condition: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatientStage {
    /// Waiting for resources (or, traditionally, for a hospital to send an ambulance).
    Querying,
    AwaitAmbulance,
    InAmbulance,
    Walking,
    /// At a hospital, waiting for treatment to start or for another try.
    AtHospital,
    Treating,
    Done,
    Died,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patient {
    pub individual: usize,
    pub request: ServiceRequest,
    pub severity: u8,
    pub issued_at: Tick,
    pub deadline: Tick,
    pub stage: PatientStage,
    pub allocated_at: Option<Tick>,
    /// Hospital the patient is heading to or waiting at.
    pub hospital: Option<usize>,
    pub ambulance: Option<usize>,
    /// Ambulance booking made by a single hospital (traditional / oracle).
    pub ambulance_booking: Option<Allocation>,
    /// Doctor and appliances booked by a single hospital (traditional / oracle).
    pub booking: Option<Allocation>,
    pub son: Option<SonId>,
    /// Tick at which every borrowed appliance has reached the hospital.
    pub ready_at: Tick,
    pub treatment_left: Tick,
}

impl Patient {
    pub fn is_resolved(&self) -> bool {
        self.allocated_at.is_some() || self.stage == PatientStage::Died
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Resource {
    Doctor(usize),
    Ambulance(usize),
    Appliance(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WalkGroup {
    group: GroupActivity<ActivityKind>,
    active: bool,
}

#[derive(Debug, Clone)]
pub struct CityModel {
    config: CityConfig,
    fso: Fso,
    flooding_threshold: u32,
    residents: CommunityId,
    firefighters: CommunityId,
    pub individuals: Vec<Individual>,
    pub park: Position,
    pub offices: Vec<Position>,
    pub taxis: Vec<Taxi>,
    pub houses: Vec<House>,
    pub trucks: Vec<Truck>,
    pub hospitals: Vec<Hospital>,
    pub doctors: Vec<Doctor>,
    pub ambulances: Vec<Ambulance>,
    pub appliances: Vec<Appliance>,
    pub patients: Vec<Patient>,
    resources: BTreeMap<AgentId, Resource>,
    groups: Vec<WalkGroup>,
    walk_candidates: Vec<crate::mutualism::Candidate<ActivityKind>>,
    next_request: u64,
}

/// Hands out consecutive agent ids.
struct Ids(u32);

impl Ids {
    fn next(&mut self) -> AgentId {
        self.0 += 1;
        AgentId(self.0 - 1)
    }
}

pub fn city_tree(hospitals: u32) -> TreeSpec {
    let mut nodes = vec![
        TreeSpec::node("city", None),
        TreeSpec::node("emergency_response", Some("city")),
        TreeSpec::node("residents", Some("emergency_response")),
        TreeSpec::node("firefighters", Some("emergency_response")),
        TreeSpec::node("regional_hospitals", Some("emergency_response")),
    ];
    for h in 1..=hospitals {
        nodes.push(TreeSpec::node(
            &format!("hospital-{h}"),
            Some("regional_hospitals"),
        ));
    }
    TreeSpec { nodes }
}

impl CityModel {
    /// Build the city. Every placement draw comes from the `"placement"` stream, so the
    /// same seed gives the same city whatever the strategy.
    pub fn new(config: CityConfig, arena: &Arena, rng: &mut RngStreams) -> Self {
        let mut ids = Ids(0);
        let place = rng.stream("placement");

        let individuals: Vec<Individual> = (0..config.individuals)
            .map(|_| Individual {
                id: ids.next(),
                position: arena.random_position(place),
                owns_car: place.random_bool(config.car_owner_fraction),
                office: place.random_range(0..config.offices as usize),
                state: IndividualState::Idle,
            })
            .collect();
        let park = arena.random_position(place);
        let offices = (0..config.offices)
            .map(|_| arena.random_position(place))
            .collect();
        let taxis: Vec<Taxi> = (0..config.taxis)
            .map(|_| Taxi {
                id: ids.next(),
                position: arena.random_position(place),
                job: None,
            })
            .collect();
        let houses: Vec<House> = (0..config.houses)
            .map(|_| {
                let id = ids.next();
                let detector = ids.next();
                House::new(id, detector, arena.random_position(place))
            })
            .collect();

        // Each truck gets one firefighter, the rest are spread at random, at most four per truck.
        let mut crews = vec![1u32; config.fire_trucks as usize];
        for _ in 0..config.firefighters.saturating_sub(config.fire_trucks) {
            let open: Vec<usize> = (0..crews.len()).filter(|&i| crews[i] < 4).collect();
            if open.is_empty() {
                break;
            }
            crews[open[place.random_range(0..open.len())]] += 1;
        }
        let trucks: Vec<Truck> = crews
            .into_iter()
            .map(|firefighters| Truck {
                id: ids.next(),
                position: arena.random_position(place),
                firefighters,
                job: None,
            })
            .collect();

        let mut coordinators = Vec::new();
        let spec = city_tree(config.hospitals);
        let mut fso = Fso::from_spec(&spec, |name| {
            let id = ids.next();
            coordinators.push((id, name.to_owned()));
            id
        })
        .expect("built-in tree is well formed");
        for (id, name) in coordinators {
            fso.set_label(id, format!("{name}_coordinator {}", id.0));
        }
        let residents = fso.find("residents").expect("residents");
        let firefighters = fso.find("firefighters").expect("firefighters");

        let hospitals: Vec<Hospital> = (1..=config.hospitals)
            .map(|h| {
                let community = fso.find(&format!("hospital-{h}")).expect("hospital");
                Hospital {
                    id: fso.node(community).expect("hospital").coordinator,
                    community,
                    position: arena.random_position(place),
                }
            })
            .collect();
        let nh = hospitals.len();
        let doctors: Vec<Doctor> = (0..config.doctors)
            .map(|_| Doctor {
                id: ids.next(),
                hospital: place.random_range(0..nh),
                expertise: sample(place, 7, 3).into_iter().map(|i| i as u8 + 4).collect(),
            })
            .collect();
        let ambulances: Vec<Ambulance> = (0..config.ambulances)
            .map(|_| {
                let hospital = place.random_range(0..nh);
                Ambulance {
                    id: ids.next(),
                    hospital,
                    position: hospitals[hospital].position,
                    patient: None,
                }
            })
            .collect();
        let appliances: Vec<Appliance> = (0..config.appliances)
            .map(|_| Appliance {
                id: ids.next(),
                hospital: place.random_range(0..nh),
                condition: place.random_range(1..=10),
            })
            .collect();

        let mut resources = BTreeMap::new();
        let offer = |fso: &mut Fso, c: CommunityId, id: AgentId, roles: Vec<RoleKind>, pos: Position| {
            fso.add_agent(c, id).expect("community exists");
            fso.publish_notification(
                c,
                Notification {
                    origin: id,
                    kind: NotificationKind::ServiceOffer {
                        roles,
                        position: pos,
                    },
                    tick: 0,
                },
            )
            .expect("member publishes");
            fso.pop_pending(c);
        };
        for ind in &individuals {
            fso.add_agent(residents, ind.id).expect("residents");
            fso.set_label(ind.id, format!("individual {}", ind.id.0));
        }
        for t in &taxis {
            offer(&mut fso, residents, t.id, vec![RoleKind::Taxi], t.position);
            fso.set_label(t.id, format!("taxi {}", t.id.0));
        }
        for h in &houses {
            fso.add_agent(residents, h.id).expect("residents");
            fso.set_label(h.id, format!("house {} fire-detector {}", h.id.0, h.detector.0));
        }
        for t in &trucks {
            offer(&mut fso, firefighters, t.id, vec![RoleKind::FireTruck], t.position);
            fso.set_label(t.id, format!("ftruck {} firefighters {}", t.id.0, t.firefighters));
        }
        for (i, d) in doctors.iter().enumerate() {
            let h = &hospitals[d.hospital];
            let roles = (1..=3)
                .chain(d.expertise.iter().copied())
                .map(RoleKind::Doctor)
                .collect();
            offer(&mut fso, h.community, d.id, roles, h.position);
            fso.set_label(d.id, format!("doctor {}", d.id.0));
            resources.insert(d.id, Resource::Doctor(i));
        }
        for (i, a) in ambulances.iter().enumerate() {
            let h = &hospitals[a.hospital];
            offer(&mut fso, h.community, a.id, vec![RoleKind::Ambulance], h.position);
            fso.set_label(a.id, format!("ambulance {}", a.id.0));
            resources.insert(a.id, Resource::Ambulance(i));
        }
        for (i, a) in appliances.iter().enumerate() {
            let h = &hospitals[a.hospital];
            offer(
                &mut fso,
                h.community,
                a.id,
                vec![RoleKind::Appliance(a.condition)],
                h.position,
            );
            fso.set_label(a.id, format!("medicalappliance {}", a.id.0));
            resources.insert(a.id, Resource::Appliance(i));
        }

        let flooding_threshold = config.flooding_threshold.unwrap_or_else(|| fso.height());
        Self {
            config,
            fso,
            flooding_threshold,
            residents,
            firefighters,
            individuals,
            park,
            offices,
            taxis,
            houses,
            trucks,
            hospitals,
            doctors,
            ambulances,
            appliances,
            patients: Vec::new(),
            resources,
            groups: Vec::new(),
            walk_candidates: Vec::new(),
            next_request: 0,
        }
    }

    pub fn config(&self) -> &CityConfig {
        &self.config
    }

    pub fn fso(&self) -> &Fso {
        &self.fso
    }

    pub fn flooding_threshold(&self) -> u32 {
        self.flooding_threshold
    }

    pub fn unresolved_patients(&self) -> usize {
        self.patients.iter().filter(|p| !p.is_resolved()).count()
    }
}

impl Model for CityModel {
    type Event = CityEvent;

    fn run_phase(&mut self, phase: Phase, cx: &mut TickContext<'_, CityEvent>) {
        match phase {
            Phase::EventGeneration => {
                self.ignite_houses(cx);
                self.start_activities(cx);
            }
            Phase::DeviceSensing => {}
            Phase::Coordination => {
                self.form_walk_groups(cx);
                self.match_rides(cx);
                self.match_taxis(cx);
                self.recruit_helpers(cx);
                self.escalate_fires(cx);
                self.coordinate_health(cx);
            }
            Phase::Movement => {
                self.move_individuals(cx);
                self.move_taxis(cx);
                self.move_trucks(cx);
                self.move_ambulances(cx);
            }
            Phase::ServiceProgress => {
                self.progress_activities(cx);
                self.progress_fires(cx);
                self.progress_health(cx);
            }
            Phase::MetricsAccrual => {}
        }
    }

    fn finish(&mut self, cx: &mut TickContext<'_, CityEvent>) {
        let unresolved = self.unresolved_patients() as u32;
        cx.emit(
            self.fso.node(self.fso.root()).expect("root").coordinator,
            CityEvent::RunEnd { unresolved },
        );
    }
}
