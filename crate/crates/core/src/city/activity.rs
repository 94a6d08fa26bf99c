//! Everyday activities: phone calls, market, walks, car sharing, office trips.

use std::collections::VecDeque;

use rand::Rng;

use super::{
    ActivityKind, CityEvent, CityModel, IndividualState, MutualismContext, Task, TaxiJob,
    TransportMode, WalkGroup, Waypoint, WaypointAction,
};
use crate::engine::{distance, move_toward, TickContext};
use crate::mutualism::{merge_group_activity, Candidate};
use crate::protocol::{MatchOutcome, RoleDemand, RoleKind, ServiceRequest};

/// Draw the next activity of an idle individual.
///
/// The five everyday kinds each have `p_activity`, health care has
/// `p_health`, and whatever probability is left keeps the individual idle.
pub fn trigger_activity<R: Rng + ?Sized>(
    rng: &mut R,
    p_activity: f64,
    p_health: f64,
) -> Option<ActivityKind> {
    let u: f64 = rng.random();
    let mut edge = 0.0;
    for kind in ActivityKind::ALL {
        edge += if kind == ActivityKind::HealthCare {
            p_health
        } else {
            p_activity
        };
        if u < edge {
            return Some(kind);
        }
    }
    None
}

/// Walk if walking makes it in time, else drive if there is a car, else call a taxi.
pub fn plan_office_trip(dist: f64, walk_speed: f64, deadline: u64, owns_car: bool) -> TransportMode {
    if dist / walk_speed <= deadline as f64 {
        TransportMode::OnFoot
    } else if owns_car {
        TransportMode::OwnCar
    } else {
        TransportMode::Taxi
    }
}

impl CityModel {
    pub(super) fn start_activities(&mut self, cx: &mut TickContext<'_, CityEvent>) {
        for i in 0..self.individuals.len() {
            if self.individuals[i].state != IndividualState::Idle {
                continue;
            }
            let Some(kind) = trigger_activity(
                cx.rng.stream("activity"),
                self.config.activity_probability,
                self.config.health_probability,
            ) else {
                continue;
            };
            cx.emit(self.individuals[i].id, CityEvent::ActivityStarted { kind });
            let c = &self.config;
            let task = match kind {
                ActivityKind::TalkOnPhone => Task::Stay {
                    kind,
                    remaining: c.talk_duration,
                },
                ActivityKind::GoToMarket => Task::Stay {
                    kind,
                    remaining: c.market_duration,
                },
                ActivityKind::WalkInPark => {
                    let wants_company = cx
                        .rng
                        .stream("activity")
                        .random_bool(c.walk_company_probability);
                    self.walk_candidates.push(Candidate {
                        agent: self.individuals[i].id,
                        kind,
                        wants_company,
                    });
                    Task::Walk {
                        group: None,
                        remaining: c.walk_duration,
                    }
                }
                ActivityKind::GoToLocation => {
                    let destination = cx.arena.random_position(cx.rng.stream("activity"));
                    if self.individuals[i].owns_car {
                        Task::Drive {
                            route: VecDeque::from([Waypoint {
                                target: destination,
                                action: WaypointAction::Pass,
                            }]),
                            passenger: None,
                        }
                    } else {
                        Task::AwaitRide {
                            destination,
                            since: cx.tick,
                        }
                    }
                }
                ActivityKind::GoToOffice => {
                    let office = self.individuals[i].office;
                    let deadline = cx
                        .rng
                        .stream("activity")
                        .random_range(c.office_deadline_min..=c.office_deadline_max);
                    let d = distance(self.individuals[i].position, self.offices[office]);
                    match plan_office_trip(d, c.walk_speed, deadline, self.individuals[i].owns_car) {
                        TransportMode::OnFoot => Task::Travel {
                            kind,
                            target: self.offices[office],
                            speed: c.walk_speed,
                            mode: Some(TransportMode::OnFoot),
                        },
                        TransportMode::OwnCar => Task::Travel {
                            kind,
                            target: self.offices[office],
                            speed: c.vehicle_speed,
                            mode: Some(TransportMode::OwnCar),
                        },
                        TransportMode::Taxi => Task::AwaitTaxi {
                            office,
                            since: cx.tick,
                        },
                    }
                }
                ActivityKind::HealthCare => {
                    self.issue_health_request(i, cx);
                    continue;
                }
            };
            self.individuals[i].state = IndividualState::Busy(task);
        }
    }

    pub(super) fn form_walk_groups(&mut self, cx: &mut TickContext<'_, CityEvent>) {
        let candidates = std::mem::take(&mut self.walk_candidates);
        for group in merge_group_activity(&candidates, cx.tick) {
            let g = self.groups.len();
            for m in &group.members {
                if let IndividualState::Busy(Task::Walk { group, .. }) =
                    &mut self.individuals[m.0 as usize].state
                {
                    *group = Some(g);
                }
            }
            cx.emit(
                group.members[0],
                CityEvent::MutualismFormed {
                    context: MutualismContext::Walk,
                    partners: group.members.clone(),
                },
            );
            self.groups.push(WalkGroup {
                group,
                active: true,
            });
        }
    }

    /// A member leaving breaks the group's links.
    pub(super) fn end_group(&mut self, g: usize, cx: &mut TickContext<'_, CityEvent>) {
        if let Some(w) = self.groups.get_mut(g) {
            if w.active {
                w.active = false;
                cx.emit(
                    w.group.members[0],
                    CityEvent::MutualismEnded {
                        context: MutualismContext::Walk,
                    },
                );
            }
        }
    }

    /// Pair riders with drivers heading within `car_share_radius` of the same place.
    pub(super) fn match_rides(&mut self, cx: &mut TickContext<'_, CityEvent>) {
        let mut riders: Vec<(u64, usize, crate::engine::Position)> = self
            .individuals
            .iter()
            .enumerate()
            .filter_map(|(i, ind)| match ind.state {
                IndividualState::Busy(Task::AwaitRide { destination, since }) => {
                    Some((since, i, destination))
                }
                _ => None,
            })
            .collect();
        riders.sort_by_key(|&(since, i, _)| (since, i));
        for (_, r, destination) in riders {
            let at = self.individuals[r].position;
            let driver = self
                .individuals
                .iter()
                .enumerate()
                .filter(|(j, ind)| {
                    *j != r
                        && matches!(&ind.state, IndividualState::Busy(Task::Drive { route, passenger: None })
                            if route.len() == 1
                                && distance(route[0].target, destination) <= self.config.car_share_radius)
                })
                .min_by(|(a, x), (b, y)| {
                    distance(x.position, at)
                        .total_cmp(&distance(y.position, at))
                        .then(a.cmp(b))
                })
                .map(|(j, _)| j);
            let Some(d) = driver else { continue };
            if let IndividualState::Busy(Task::Drive { route, passenger }) =
                &mut self.individuals[d].state
            {
                route.push_front(Waypoint {
                    target: destination,
                    action: WaypointAction::DropOff(r),
                });
                route.push_front(Waypoint {
                    target: at,
                    action: WaypointAction::PickUp(r),
                });
                *passenger = Some(r);
            }
            self.individuals[r].state = IndividualState::Busy(Task::Riding {
                driver: d,
                picked_up: false,
            });
            cx.emit(
                self.individuals[d].id,
                CityEvent::MutualismFormed {
                    context: MutualismContext::RideShare,
                    partners: vec![self.individuals[d].id, self.individuals[r].id],
                },
            );
        }
    }

    /// Taxis are offered in the residents registry; the nearest free one is sent.
    pub(super) fn match_taxis(&mut self, cx: &mut TickContext<'_, CityEvent>) {
        let mut waiting: Vec<(u64, usize, usize)> = self
            .individuals
            .iter()
            .enumerate()
            .filter_map(|(i, ind)| match ind.state {
                IndividualState::Busy(Task::AwaitTaxi { office, since }) => Some((since, i, office)),
                _ => None,
            })
            .collect();
        waiting.sort_by_key(|&(since, i, _)| (since, i));
        for (_, i, office) in waiting {
            let request = ServiceRequest {
                id: self.new_request_id(),
                origin: self.individuals[i].id,
                position: self.individuals[i].position,
                needs: vec![RoleDemand::one(RoleKind::Taxi)],
                issued_at: cx.tick,
            };
            let Ok(MatchOutcome::Enabled(alloc)) =
                self.fso.match_notification(self.residents, &request)
            else {
                continue;
            };
            let son = self
                .fso
                .form_son(&alloc, &request, cx.tick)
                .expect("complete taxi allocation");
            let taxi_id = alloc.assignments[0].agent;
            let t = self
                .taxis
                .iter()
                .position(|t| t.id == taxi_id)
                .expect("allocated taxi exists");
            self.taxis[t].job = Some(TaxiJob {
                passenger: i,
                office,
                picked_up: false,
                son,
            });
            self.individuals[i].state = IndividualState::Busy(Task::InTaxi { taxi: t });
            cx.emit(
                taxi_id,
                CityEvent::MutualismFormed {
                    context: MutualismContext::Taxi,
                    partners: vec![taxi_id, self.individuals[i].id],
                },
            );
        }
    }

    pub(super) fn move_individuals(&mut self, cx: &mut TickContext<'_, CityEvent>) {
        for i in 0..self.individuals.len() {
            let pos = self.individuals[i].position;
            match &mut self.individuals[i].state {
                IndividualState::Busy(Task::Walk { .. }) => {
                    let s = move_toward(pos, self.park, self.config.walk_speed, &cx.arena);
                    self.individuals[i].position = s.position;
                }
                IndividualState::Busy(Task::Travel {
                    kind,
                    target,
                    speed,
                    mode,
                }) => {
                    let (kind, mode) = (*kind, *mode);
                    let s = move_toward(pos, *target, *speed, &cx.arena);
                    self.individuals[i].position = s.position;
                    if s.arrived {
                        if let Some(mode) = mode {
                            cx.emit(self.individuals[i].id, CityEvent::OfficeArrival { mode });
                        }
                        self.individuals[i].state = IndividualState::Busy(Task::Stay {
                            kind,
                            remaining: self.stay_for(kind),
                        });
                    }
                }
                IndividualState::Busy(Task::Drive { route, passenger }) => {
                    let Some(wp) = route.front().copied() else {
                        continue;
                    };
                    let rider = *passenger;
                    let s = move_toward(pos, wp.target, self.config.vehicle_speed, &cx.arena);
                    self.individuals[i].position = s.position;
                    if let Some(p) = rider {
                        if matches!(
                            self.individuals[p].state,
                            IndividualState::Busy(Task::Riding { picked_up: true, .. })
                        ) {
                            self.individuals[p].position = s.position;
                        }
                    }
                    if !s.arrived {
                        continue;
                    }
                    match wp.action {
                        WaypointAction::Pass => {}
                        WaypointAction::PickUp(p) => {
                            self.individuals[p].position = s.position;
                            self.individuals[p].state = IndividualState::Busy(Task::Riding {
                                driver: i,
                                picked_up: true,
                            });
                        }
                        WaypointAction::DropOff(p) => {
                            self.individuals[p].state = IndividualState::Busy(Task::Stay {
                                kind: ActivityKind::GoToLocation,
                                remaining: self.config.location_stay,
                            });
                        }
                    }
                    if let IndividualState::Busy(Task::Drive { route, passenger }) =
                        &mut self.individuals[i].state
                    {
                        route.pop_front();
                        if matches!(wp.action, WaypointAction::DropOff(_)) {
                            *passenger = None;
                        }
                        if route.is_empty() {
                            self.individuals[i].state = IndividualState::Busy(Task::Stay {
                                kind: ActivityKind::GoToLocation,
                                remaining: self.config.location_stay,
                            });
                        }
                    }
                }
                _ => {}
            }
        }
    }

    pub(super) fn move_taxis(&mut self, cx: &mut TickContext<'_, CityEvent>) {
        for t in 0..self.taxis.len() {
            let Some(job) = self.taxis[t].job.clone() else {
                continue;
            };
            let target = if job.picked_up {
                self.offices[job.office]
            } else {
                self.individuals[job.passenger].position
            };
            let s = move_toward(self.taxis[t].position, target, self.config.vehicle_speed, &cx.arena);
            self.taxis[t].position = s.position;
            if job.picked_up {
                self.individuals[job.passenger].position = s.position;
            }
            if s.arrived {
                if !job.picked_up {
                    if let Some(j) = self.taxis[t].job.as_mut() {
                        j.picked_up = true;
                    }
                } else {
                    let p = job.passenger;
                    cx.emit(
                        self.individuals[p].id,
                        CityEvent::OfficeArrival {
                            mode: TransportMode::Taxi,
                        },
                    );
                    self.individuals[p].state = IndividualState::Busy(Task::Stay {
                        kind: ActivityKind::GoToOffice,
                        remaining: self.config.office_stay,
                    });
                    self.fso
                        .dissolve_son(job.son)
                        .expect("taxi SON is active");
                    self.taxis[t].job = None;
                }
            }
            if let Ok(reg) = self.fso.registry_mut(self.residents) {
                reg.set_position(self.taxis[t].id, s.position);
            }
        }
    }

    pub(super) fn progress_activities(&mut self, cx: &mut TickContext<'_, CityEvent>) {
        for i in 0..self.individuals.len() {
            let id = self.individuals[i].id;
            match &mut self.individuals[i].state {
                IndividualState::Busy(Task::Stay { kind, remaining }) => {
                    *remaining = remaining.saturating_sub(1);
                    if *remaining == 0 {
                        let kind = *kind;
                        self.individuals[i].state = IndividualState::Idle;
                        cx.emit(id, CityEvent::ActivityFinished { kind });
                    }
                }
                IndividualState::Busy(Task::Walk { group, remaining }) => {
                    *remaining = remaining.saturating_sub(1);
                    if *remaining == 0 {
                        let group = *group;
                        self.individuals[i].state = IndividualState::Idle;
                        cx.emit(
                            id,
                            CityEvent::ActivityFinished {
                                kind: ActivityKind::WalkInPark,
                            },
                        );
                        if let Some(g) = group {
                            self.end_group(g, cx);
                        }
                    }
                }
                IndividualState::Busy(Task::AwaitRide { since, .. })
                    if cx.tick - *since >= self.config.car_share_invalidation =>
                {
                    self.individuals[i].state = IndividualState::Idle;
                    cx.emit(
                        id,
                        CityEvent::ActivityCanceled {
                            kind: ActivityKind::GoToLocation,
                        },
                    );
                }
                _ => {}
            }
        }
    }

    fn stay_for(&self, kind: ActivityKind) -> u64 {
        match kind {
            ActivityKind::GoToOffice => self.config.office_stay,
            _ => self.config.location_stay,
        }
    }

    pub(super) fn new_request_id(&mut self) -> crate::protocol::RequestId {
        self.next_request += 1;
        crate::protocol::RequestId(self.next_request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn probabilities_cover_the_unit_interval() {
        assert!((5.0f64 * 0.18 + 0.09 + 0.01 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn health_care_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let hits = (0..n)
            .filter(|_| trigger_activity(&mut rng, 0.18, 0.09) == Some(ActivityKind::HealthCare))
            .count();
        let f = hits as f64 / n as f64;
        assert!((f - 0.09).abs() < 0.001, "frequency {f}");
    }

    #[test]
    fn office_trip_modes() {
        assert_eq!(plan_office_trip(5.0, 0.25, 40, false), TransportMode::OnFoot);
        assert_eq!(plan_office_trip(5.0, 0.25, 10, true), TransportMode::OwnCar);
        assert_eq!(plan_office_trip(5.0, 0.25, 10, false), TransportMode::Taxi);
    }
}
