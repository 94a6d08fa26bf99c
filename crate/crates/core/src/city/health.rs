//! Healthcare: patients, hospitals and the three ways of finding them treatment.
//!
//! * `Fso`: the nearest hospital matches locally and escalates through the
//!   tree when it cannot, so doctors, appliances and ambulances may come
//!   from different hospitals.
//! * `Traditional`: a random hospital is asked; a hospital short of anything
//!   rejects the patient, who moves on to the next one in turn.
//! * `PerfectOracle`: the patient goes straight to the nearest hospital with
//!   a free doctor of the right kind.

use rand::Rng;

use super::{
    CityEvent, CityModel, HealthStrategy, IndividualState, Patient, PatientStage, Resource,
};
use crate::engine::{distance, move_toward, travel_ticks, Position, TickContext};
use crate::protocol::{
    Allocation, Availability, EscalationOutcome, Exception, MatchOutcome, RoleDemand, RoleKind,
    ServiceRequest, SonId,
};

/// Severity at or above which a patient needs an ambulance.
pub const SEVERE: u8 = 4;

/// Appliances needed for a condition: `ceil(severity / divisor)`.
pub fn required_appliances(severity: u8, divisor: u8) -> u32 {
    u32::from(severity).div_ceil(u32::from(divisor.max(1)))
}

/// Roles a patient of this severity needs; the ambulance only when asked for.
pub fn health_needs(severity: u8, divisor: u8, with_ambulance: bool) -> Vec<RoleDemand> {
    let mut needs = vec![
        RoleDemand::one(RoleKind::Doctor(severity)),
        RoleDemand {
            role: RoleKind::Appliance(severity),
            count: required_appliances(severity, divisor),
        },
    ];
    if with_ambulance && severity >= SEVERE {
        needs.push(RoleDemand::one(RoleKind::Ambulance));
    }
    needs
}

impl CityModel {
    pub(super) fn issue_health_request(&mut self, i: usize, cx: &mut TickContext<'_, CityEvent>) {
        let severity = cx.rng.stream("health").random_range(1..=10u8);
        let strategy = self.config.strategy;
        let request = ServiceRequest {
            id: self.new_request_id(),
            origin: self.individuals[i].id,
            position: self.individuals[i].position,
            needs: health_needs(
                severity,
                self.config.appliance_divisor,
                strategy == HealthStrategy::Fso,
            ),
            issued_at: cx.tick,
        };
        let mut stage = PatientStage::Querying;
        let mut hospital = None;
        if strategy == HealthStrategy::Traditional {
            hospital = Some(cx.rng.stream("health").random_range(0..self.hospitals.len()));
            if severity < SEVERE {
                stage = PatientStage::Walking;
            }
        }
        let deadline = cx.tick + self.config.threshold;
        cx.emit(
            request.origin,
            CityEvent::HealthRequest {
                request: request.id,
                severity,
                deadline,
            },
        );
        self.individuals[i].state = IndividualState::Patient(self.patients.len());
        self.patients.push(Patient {
            individual: i,
            request,
            severity,
            issued_at: cx.tick,
            deadline,
            stage,
            allocated_at: None,
            hospital,
            ambulance: None,
            ambulance_booking: None,
            booking: None,
            son: None,
            ready_at: cx.tick,
            treatment_left: 0,
        });
    }

    pub(super) fn coordinate_health(&mut self, cx: &mut TickContext<'_, CityEvent>) {
        for p in 0..self.patients.len() {
            let pat = &self.patients[p];
            match (self.config.strategy, pat.stage) {
                (HealthStrategy::Fso, PatientStage::Querying) => self.fso_allocate(p, cx),
                (HealthStrategy::Traditional, PatientStage::Querying) => {
                    self.request_ambulance(p, cx)
                }
                (HealthStrategy::PerfectOracle, PatientStage::Querying) => {
                    self.oracle_dispatch(p, cx)
                }
                (HealthStrategy::PerfectOracle, PatientStage::AtHospital)
                    if pat.allocated_at.is_none() =>
                {
                    self.oracle_retry(p, cx)
                }
                _ => {}
            }
        }
    }

    fn patient_position(&self, p: usize) -> Position {
        self.individuals[self.patients[p].individual].position
    }

    fn nearest_hospital(&self, at: Position, ok: impl Fn(usize) -> bool) -> Option<usize> {
        (0..self.hospitals.len())
            .filter(|&h| ok(h))
            .min_by(|&a, &b| {
                distance(self.hospitals[a].position, at)
                    .total_cmp(&distance(self.hospitals[b].position, at))
                    .then(a.cmp(&b))
            })
    }

    fn has_free(&self, h: usize, role: RoleKind) -> bool {
        self.fso
            .registry(self.hospitals[h].community)
            .map(|r| {
                r.entries()
                    .any(|e| e.availability == Availability::Available && e.roles.contains(&role))
            })
            .unwrap_or(false)
    }

    fn fso_allocate(&mut self, p: usize, cx: &mut TickContext<'_, CityEvent>) {
        let mut request = self.patients[p].request.clone();
        request.position = self.patient_position(p);
        let main = self
            .nearest_hospital(request.position, |_| true)
            .expect("at least one hospital");
        let community = self.hospitals[main].community;
        let son = match self.fso.match_notification(community, &request) {
            Ok(MatchOutcome::Enabled(alloc)) => self
                .fso
                .form_son(&alloc, &request, cx.tick)
                .expect("complete allocation"),
            _ => match self.fso.raise_exception(
                community,
                Exception::for_request(request, community),
                self.flooding_threshold,
                cx.tick,
            ) {
                Ok(EscalationOutcome::Resolved { son, .. }) => son,
                _ => return,
            },
        };
        self.on_fso_allocated(p, son, cx);
    }

    fn on_fso_allocated(&mut self, p: usize, son_id: SonId, cx: &mut TickContext<'_, CityEvent>) {
        let son = self.fso.son(son_id).expect("just formed").clone();
        let mut treating = None;
        let mut ambulance = None;
        let mut borrowed = Vec::new();
        for m in &son.members {
            match self.resources[&m.agent] {
                Resource::Doctor(d) => treating = Some(self.doctors[d].hospital),
                Resource::Ambulance(a) => ambulance = Some(a),
                Resource::Appliance(a) => borrowed.push(a),
            }
        }
        let t = treating.expect("every health request needs a doctor");
        let request = self.patients[p].request.id;
        let mut ready_at = cx.tick;
        for a in borrowed {
            let from = self.appliances[a].hospital;
            if from == t {
                continue;
            }
            let d = distance(self.hospitals[from].position, self.hospitals[t].position);
            ready_at = ready_at.max(cx.tick + travel_ticks(d, self.config.vehicle_speed));
            cx.emit(
                self.appliances[a].id,
                CityEvent::ResourceTransfer {
                    request,
                    resource: self.appliances[a].id,
                    from: self.hospitals[from].id,
                    to: self.hospitals[t].id,
                },
            );
        }
        let who = self.individuals[self.patients[p].individual].id;
        let pat = &mut self.patients[p];
        pat.hospital = Some(t);
        pat.allocated_at = Some(cx.tick);
        pat.son = Some(son_id);
        pat.ready_at = ready_at;
        pat.stage = PatientStage::Walking;
        let querying_time = cx.tick - pat.issued_at;
        if let Some(a) = ambulance {
            pat.ambulance = Some(a);
            pat.stage = PatientStage::AwaitAmbulance;
            self.ambulances[a].patient = Some(p);
            cx.emit(
                who,
                CityEvent::AmbulanceAssigned {
                    request,
                    ambulance: self.ambulances[a].id,
                },
            );
        }
        cx.emit(
            who,
            CityEvent::Treated {
                request,
                querying_time,
                hospital: self.hospitals[t].id,
                inter_community: son.is_inter_community(),
            },
        );
    }

    /// Ask hospital `h` alone for one of its own ambulances.
    fn book_ambulance(&mut self, p: usize, h: usize, cx: &mut TickContext<'_, CityEvent>) -> bool {
        let pat = &self.patients[p];
        let request = ServiceRequest {
            id: pat.request.id,
            origin: pat.request.origin,
            position: self.patient_position(p),
            needs: vec![RoleDemand::one(RoleKind::Ambulance)],
            issued_at: pat.issued_at,
        };
        let Ok(MatchOutcome::Enabled(alloc)) =
            self.fso.match_notification(self.hospitals[h].community, &request)
        else {
            return false;
        };
        let Resource::Ambulance(a) = self.resources[&alloc.assignments[0].agent] else {
            unreachable!("only ambulances offer the ambulance role");
        };
        self.ambulances[a].patient = Some(p);
        let pat = &mut self.patients[p];
        pat.ambulance = Some(a);
        pat.ambulance_booking = Some(alloc);
        pat.hospital = Some(h);
        pat.stage = PatientStage::AwaitAmbulance;
        cx.emit(
            request.origin,
            CityEvent::AmbulanceAssigned {
                request: request.id,
                ambulance: self.ambulances[a].id,
            },
        );
        true
    }

    fn reject(&mut self, p: usize, cx: &mut TickContext<'_, CityEvent>) {
        let h = self.patients[p].hospital.expect("patient has a hospital");
        cx.emit(
            self.hospitals[h].id,
            CityEvent::HospitalRejected {
                request: self.patients[p].request.id,
                hospital: self.hospitals[h].id,
            },
        );
        self.patients[p].hospital = Some((h + 1) % self.hospitals.len());
    }

    /// The chosen hospital sends one of its ambulances once one is free.
    /// Only a hospital that owns none turns the call away.
    fn request_ambulance(&mut self, p: usize, cx: &mut TickContext<'_, CityEvent>) {
        let h = self.patients[p].hospital.expect("traditional patients pick a hospital");
        if self.book_ambulance(p, h, cx) {
            return;
        }
        if !self.ambulances.iter().any(|a| a.hospital == h) {
            self.reject(p, cx);
        }
    }

    fn oracle_dispatch(&mut self, p: usize, cx: &mut TickContext<'_, CityEvent>) {
        let s = self.patients[p].severity;
        let at = self.patient_position(p);
        let Some(h) = self.nearest_hospital(at, |h| {
            self.has_free(h, RoleKind::Doctor(s)) && (s < SEVERE || self.has_free(h, RoleKind::Ambulance))
        }) else {
            return;
        };
        if s >= SEVERE {
            let booked = self.book_ambulance(p, h, cx);
            debug_assert!(booked);
        } else {
            self.patients[p].hospital = Some(h);
            self.patients[p].stage = PatientStage::Walking;
        }
    }

    /// Book doctor and appliances at `h` alone. On success the patient waits there for treatment.
    fn book_at_hospital(&mut self, p: usize, h: usize, cx: &mut TickContext<'_, CityEvent>) -> bool {
        let mut request = self.patients[p].request.clone();
        request.position = self.hospitals[h].position;
        let Ok(MatchOutcome::Enabled(alloc)) =
            self.fso.match_notification(self.hospitals[h].community, &request)
        else {
            return false;
        };
        self.release_ambulance(p);
        let pat = &mut self.patients[p];
        pat.booking = Some(alloc);
        pat.allocated_at = Some(cx.tick);
        pat.hospital = Some(h);
        pat.ready_at = cx.tick;
        pat.stage = PatientStage::AtHospital;
        cx.emit(
            request.origin,
            CityEvent::Treated {
                request: request.id,
                querying_time: cx.tick - pat.issued_at,
                hospital: self.hospitals[h].id,
                inter_community: false,
            },
        );
        true
    }

    fn release_ambulance(&mut self, p: usize) {
        let pat = &mut self.patients[p];
        let Some(a) = pat.ambulance.take() else {
            return;
        };
        self.ambulances[a].patient = None;
        if let Some(alloc) = pat.ambulance_booking.take() {
            release(&mut self.fso, &alloc);
        } else if let Some(son) = pat.son {
            self.fso
                .release_member(son, self.ambulances[a].id)
                .expect("SON is active");
        }
    }

    fn oracle_alternative(&self, p: usize, here: usize) -> Option<usize> {
        let s = self.patients[p].severity;
        let at = self.hospitals[here].position;
        self.nearest_hospital(at, |h| h != here && self.has_free(h, RoleKind::Doctor(s)))
    }

    fn oracle_retry(&mut self, p: usize, cx: &mut TickContext<'_, CityEvent>) {
        let h = self.patients[p].hospital.expect("waiting at a hospital");
        if self.book_at_hospital(p, h, cx) {
            return;
        }
        if let Some(alt) = self.oracle_alternative(p, h) {
            let pat = &mut self.patients[p];
            pat.hospital = Some(alt);
            pat.stage = if pat.ambulance.is_some() {
                PatientStage::InAmbulance
            } else {
                PatientStage::Walking
            };
        }
    }

    fn arrive_at_hospital(&mut self, p: usize, cx: &mut TickContext<'_, CityEvent>) {
        let h = self.patients[p].hospital.expect("travelling to a hospital");
        match self.config.strategy {
            HealthStrategy::Fso => {
                self.release_ambulance(p);
                self.patients[p].stage = PatientStage::AtHospital;
            }
            HealthStrategy::Traditional => {
                if !self.book_at_hospital(p, h, cx) {
                    self.reject(p, cx);
                }
            }
            HealthStrategy::PerfectOracle => {
                if self.book_at_hospital(p, h, cx) {
                    return;
                }
                match self.oracle_alternative(p, h) {
                    Some(alt) => self.patients[p].hospital = Some(alt),
                    None => self.patients[p].stage = PatientStage::AtHospital,
                }
            }
        }
    }

    pub(super) fn move_ambulances(&mut self, cx: &mut TickContext<'_, CityEvent>) {
        let vehicle = self.config.vehicle_speed;
        for a in 0..self.ambulances.len() {
            let here = self.ambulances[a].position;
            match self.ambulances[a].patient {
                Some(p) => {
                    let i = self.patients[p].individual;
                    match self.patients[p].stage {
                        PatientStage::AwaitAmbulance => {
                            let s = move_toward(here, self.individuals[i].position, vehicle, &cx.arena);
                            self.ambulances[a].position = s.position;
                            if s.arrived {
                                self.patients[p].stage = PatientStage::InAmbulance;
                            }
                        }
                        PatientStage::InAmbulance => {
                            let h = self.patients[p].hospital.expect("carried to a hospital");
                            let s = move_toward(here, self.hospitals[h].position, vehicle, &cx.arena);
                            self.ambulances[a].position = s.position;
                            self.individuals[i].position = s.position;
                            if s.arrived {
                                self.arrive_at_hospital(p, cx);
                            }
                        }
                        _ => {}
                    }
                }
                None => {
                    let home = self.hospitals[self.ambulances[a].hospital].position;
                    self.ambulances[a].position = move_toward(here, home, vehicle, &cx.arena).position;
                }
            }
            let amb = &self.ambulances[a];
            if let Ok(reg) = self.fso.registry_mut(self.hospitals[amb.hospital].community) {
                reg.set_position(amb.id, amb.position);
            }
        }
        for p in 0..self.patients.len() {
            if self.patients[p].stage != PatientStage::Walking {
                continue;
            }
            let i = self.patients[p].individual;
            let h = self.patients[p].hospital.expect("walking to a hospital");
            let s = move_toward(
                self.individuals[i].position,
                self.hospitals[h].position,
                self.config.walk_speed,
                &cx.arena,
            );
            self.individuals[i].position = s.position;
            if s.arrived {
                self.arrive_at_hospital(p, cx);
            }
        }
    }

    pub(super) fn progress_health(&mut self, cx: &mut TickContext<'_, CityEvent>) {
        for p in 0..self.patients.len() {
            let pat = &self.patients[p];
            match pat.stage {
                PatientStage::Treating => {
                    let pat = &mut self.patients[p];
                    pat.treatment_left = pat.treatment_left.saturating_sub(1);
                    if pat.treatment_left == 0 {
                        self.finish_treatment(p, cx);
                    }
                }
                PatientStage::AtHospital
                    if pat.allocated_at.is_some() && cx.tick >= pat.ready_at =>
                {
                    let c = &self.config;
                    let d = cx
                        .rng
                        .stream("treatment")
                        .random_range(c.treatment_min..=c.treatment_max);
                    let pat = &mut self.patients[p];
                    pat.stage = PatientStage::Treating;
                    pat.treatment_left = d.max(1);
                }
                _ if !pat.is_resolved() && cx.tick >= pat.deadline => self.die(p, cx),
                _ => {}
            }
        }
    }

    fn finish_treatment(&mut self, p: usize, cx: &mut TickContext<'_, CityEvent>) {
        let pat = &mut self.patients[p];
        if let Some(son) = pat.son {
            self.fso.dissolve_son(son).expect("SON is active");
        }
        if let Some(alloc) = pat.booking.take() {
            release(&mut self.fso, &alloc);
        }
        pat.stage = PatientStage::Done;
        let i = pat.individual;
        let request = pat.request.id;
        self.individuals[i].state = IndividualState::Idle;
        cx.emit(self.individuals[i].id, CityEvent::TreatmentFinished { request });
    }

    fn die(&mut self, p: usize, cx: &mut TickContext<'_, CityEvent>) {
        self.release_ambulance(p);
        let pat = &mut self.patients[p];
        pat.stage = PatientStage::Died;
        let i = pat.individual;
        let request = pat.request.id;
        self.individuals[i].state = IndividualState::Dead;
        cx.emit(self.individuals[i].id, CityEvent::Died { request });
    }
}

fn release(fso: &mut crate::protocol::Fso, alloc: &Allocation) {
    for a in &alloc.assignments {
        fso.registry_mut(a.community)
            .and_then(|r| r.release(a.agent))
            .expect("booked agent is registered");
    }
}
