//! House fires, neighbours helping, and fire trucks called in by the house detector.

use rand::seq::index::sample;
use rand::Rng;

use super::{CityEvent, CityModel, House, IndividualState, Task, TransportMode};
use crate::engine::{distance, move_toward, Tick, TickContext};
use crate::protocol::{EscalationOutcome, Exception, RoleDemand, RoleKind, ServiceRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FireStep {
    Burning,
    Extinguished,
    BurnedDown,
}

/// Firelevel a truck removes per tick: one more than its crew, crew capped to 1..=4.
pub fn truck_reduction(firefighters: u32) -> f64 {
    f64::from(firefighters.clamp(1, 4) + 1)
}

/// One tick of a burning house.
///
/// The fire first grows by one if `grows`, then loses `helper_reduction`
/// per helper and the truck reduction. A fire brought to zero is out and
/// does no damage this tick; otherwise the house loses health equal to
/// the remaining firelevel.
pub fn fire_dynamics_step(
    house: &mut House,
    helpers: u32,
    helper_reduction: f64,
    truck_firefighters: Option<u32>,
    grows: bool,
) -> FireStep {
    if grows {
        house.firelevel += 1.0;
    }
    house.firelevel -= helper_reduction * f64::from(helpers);
    if let Some(ff) = truck_firefighters {
        house.firelevel -= truck_reduction(ff);
    }
    if house.firelevel <= 0.0 {
        house.firelevel = 0.0;
        house.burning = false;
        return FireStep::Extinguished;
    }
    house.health -= house.firelevel;
    if house.health <= 0.0 {
        house.health = 0.0;
        house.burning = false;
        return FireStep::BurnedDown;
    }
    FireStep::Burning
}

/// Houses to set on fire this tick, with their initial firelevel in 1..=5.
///
/// Fires start every `interval` ticks (never at tick 0), at most
/// `per_cycle` at a time, and only in houses that have never burned.
pub fn generate_fire_events<R: Rng + ?Sized>(
    houses: &[House],
    tick: Tick,
    interval: Tick,
    per_cycle: u32,
    rng: &mut R,
) -> Vec<(usize, u32)> {
    if tick == 0 || interval == 0 || !tick.is_multiple_of(interval) {
        return Vec::new();
    }
    let intact: Vec<usize> = (0..houses.len()).filter(|&h| !houses[h].ignited).collect();
    let k = (per_cycle as usize).min(intact.len());
    if k == 0 {
        return Vec::new();
    }
    let mut picked: Vec<usize> = sample(rng, intact.len(), k).into_iter().map(|i| intact[i]).collect();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|h| (h, rng.random_range(1..=5u32)))
        .collect()
}

fn can_help(state: &IndividualState) -> bool {
    match state {
        IndividualState::Idle => true,
        IndividualState::Busy(Task::Stay { .. } | Task::Walk { .. }) => true,
        IndividualState::Busy(Task::Travel { mode, .. }) => *mode == Some(TransportMode::OnFoot),
        _ => false,
    }
}

impl CityModel {
    pub(super) fn ignite_houses(&mut self, cx: &mut TickContext<'_, CityEvent>) {
        let fires = generate_fire_events(
            &self.houses,
            cx.tick,
            self.config.fire_interval,
            self.config.fires_per_cycle,
            cx.rng.stream("fire"),
        );
        for (h, level) in fires {
            let house = &mut self.houses[h];
            house.ignited = true;
            house.burning = true;
            house.firelevel = f64::from(level);
            cx.emit(
                house.id,
                CityEvent::Ignition {
                    house: house.id,
                    firelevel: level,
                },
            );
        }
    }

    /// Idle or walking-pace individuals near a burning house drop what they do and help.
    pub(super) fn recruit_helpers(&mut self, cx: &mut TickContext<'_, CityEvent>) {
        for h in 0..self.houses.len() {
            if !self.houses[h].burning {
                continue;
            }
            let at = self.houses[h].position;
            for i in 0..self.individuals.len() {
                let ind = &self.individuals[i];
                if !can_help(&ind.state) || distance(ind.position, at) > self.config.help_radius {
                    continue;
                }
                let postponed = match std::mem::replace(&mut self.individuals[i].state, IndividualState::Dead) {
                    IndividualState::Busy(task) => Some(task),
                    _ => None,
                };
                if let Some(Task::Walk {
                    group: Some(g), ..
                }) = postponed
                {
                    self.end_group(g, cx);
                }
                let postponed = postponed.map(|t| match t {
                    Task::Walk { remaining, .. } => Task::Walk {
                        group: None,
                        remaining,
                    },
                    other => other,
                });
                self.individuals[i].state = IndividualState::Helping { house: h, postponed };
                cx.emit(
                    self.individuals[i].id,
                    CityEvent::HelpStarted {
                        house: self.houses[h].id,
                    },
                );
            }
        }
    }

    /// A detector whose house drops below the escalation health asks for a fire truck.
    pub(super) fn escalate_fires(&mut self, cx: &mut TickContext<'_, CityEvent>) {
        if !self.config.fire_collaboration {
            return;
        }
        for h in 0..self.houses.len() {
            let house = &self.houses[h];
            if !house.burning
                || house.truck.is_some()
                || house.health >= self.config.escalation_health
            {
                continue;
            }
            if !house.escalated {
                self.houses[h].escalated = true;
                cx.emit(
                    self.houses[h].detector,
                    CityEvent::Escalated {
                        house: self.houses[h].id,
                    },
                );
            }
            let request = ServiceRequest {
                id: self.new_request_id(),
                origin: self.houses[h].id,
                position: self.houses[h].position,
                needs: vec![RoleDemand::one(RoleKind::FireTruck)],
                issued_at: cx.tick,
            };
            let outcome = self
                .fso
                .raise_exception(
                    self.residents,
                    Exception::for_request(request, self.residents),
                    self.flooding_threshold,
                    cx.tick,
                )
                .expect("residents community exists");
            let EscalationOutcome::Resolved { son, .. } = outcome else {
                continue;
            };
            let truck_id = self.fso.son(son).expect("just formed").members[0].agent;
            let t = self
                .trucks
                .iter()
                .position(|t| t.id == truck_id)
                .expect("allocated truck exists");
            self.trucks[t].job = Some((h, son));
            self.houses[h].truck = Some(t);
            cx.emit(
                truck_id,
                CityEvent::TruckDispatched {
                    house: self.houses[h].id,
                    truck: truck_id,
                    firefighters: self.trucks[t].firefighters,
                },
            );
        }
    }

    pub(super) fn move_trucks(&mut self, cx: &mut TickContext<'_, CityEvent>) {
        for t in 0..self.trucks.len() {
            let Some((h, _)) = self.trucks[t].job else {
                continue;
            };
            let s = move_toward(
                self.trucks[t].position,
                self.houses[h].position,
                self.config.vehicle_speed,
                &cx.arena,
            );
            self.trucks[t].position = s.position;
            if let Ok(reg) = self.fso.registry_mut(self.firefighters) {
                reg.set_position(self.trucks[t].id, s.position);
            }
        }
    }

    pub(super) fn progress_fires(&mut self, cx: &mut TickContext<'_, CityEvent>) {
        for h in 0..self.houses.len() {
            if !self.houses[h].burning {
                continue;
            }
            let helpers = self
                .individuals
                .iter()
                .filter(|i| matches!(i.state, IndividualState::Helping { house, .. } if house == h))
                .count() as u32;
            let on_site = self.houses[h].truck.and_then(|t| {
                let truck = &self.trucks[t];
                (distance(truck.position, self.houses[h].position) < 1e-9).then_some(truck.firefighters)
            });
            let grows = cx
                .rng
                .stream("fire")
                .random_bool(self.config.fire_growth_probability);
            let step = fire_dynamics_step(
                &mut self.houses[h],
                helpers,
                self.config.helper_reduction,
                on_site,
                grows,
            );
            let id = self.houses[h].id;
            match step {
                FireStep::Burning => continue,
                FireStep::Extinguished => cx.emit(
                    id,
                    CityEvent::Extinguished {
                        house: id,
                        health: self.houses[h].health,
                    },
                ),
                FireStep::BurnedDown => cx.emit(id, CityEvent::BurnedDown { house: id }),
            }
            for ind in &mut self.individuals {
                if let IndividualState::Helping { house, postponed } = &mut ind.state {
                    if *house == h {
                        ind.state = match postponed.take() {
                            Some(task) => IndividualState::Busy(task),
                            None => IndividualState::Idle,
                        };
                    }
                }
            }
            if let Some(t) = self.houses[h].truck.take() {
                if let Some((_, son)) = self.trucks[t].job.take() {
                    self.fso.dissolve_son(son).expect("truck SON is active");
                }
            }
        }
    }
}
