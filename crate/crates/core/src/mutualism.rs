//! Mutualistic relationships between two action domains.
//!
//! Two domains X and Y are linked by a bijective action map. Each domain rates
//! every one of its actions as negative, neutral or positive. The strict
//! precondition asks for an action on each side that is at least neutral at
//! home and positive for the partner; the extended form keeps only the
//! partner-benefit half, admitting relationships that cost the acting side.
//!
//! Group activities merge members that both request and provide the same kind
//! of activity.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{AgentId, Tick};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MutualismError {
    #[error("action {0} is not in the action map")]
    UnknownAction(ActionId),
    #[error("action map is not bijective: {0} appears twice")]
    NotBijective(ActionId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub u32);

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

/// Three-level ordinal rating of an action's effect on a domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Significance {
    Negative,
    Neutral,
    Positive,
}

impl Significance {
    /// "≥ 0": neutral or positive.
    pub fn is_non_negative(self) -> bool {
        self >= Significance::Neutral
    }

    /// "> 0": strictly positive.
    pub fn is_positive(self) -> bool {
        self == Significance::Positive
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// X → Y
    Forward,
    /// Y → X
    Inverse,
}

/// Bijection between the actions of two domains.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActionMap {
    forward: BTreeMap<ActionId, ActionId>,
    inverse: BTreeMap<ActionId, ActionId>,
}

impl ActionMap {
    pub fn from_pairs<I>(pairs: I) -> Result<Self, MutualismError>
    where
        I: IntoIterator<Item = (ActionId, ActionId)>,
    {
        let mut map = ActionMap::default();
        for (x, y) in pairs {
            if map.forward.contains_key(&x) {
                return Err(MutualismError::NotBijective(x));
            }
            if map.inverse.contains_key(&y) {
                return Err(MutualismError::NotBijective(y));
            }
            map.forward.insert(x, y);
            map.inverse.insert(y, x);
        }
        Ok(map)
    }

    pub fn map_action(&self, a: ActionId, direction: Direction) -> Result<ActionId, MutualismError> {
        let table = match direction {
            Direction::Forward => &self.forward,
            Direction::Inverse => &self.inverse,
        };
        table
            .get(&a)
            .copied()
            .ok_or(MutualismError::UnknownAction(a))
    }

    /// The same bijection read from Y to X.
    pub fn inverted(&self) -> ActionMap {
        ActionMap {
            forward: self.inverse.clone(),
            inverse: self.forward.clone(),
        }
    }

    pub fn pairs(&self) -> impl Iterator<Item = (ActionId, ActionId)> + '_ {
        self.forward.iter().map(|(x, y)| (*x, *y))
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }
}

/// A domain's action set together with its evaluation table.
///
/// The action set is the key set of the table, so the evaluation is total by construction.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionDomain {
    pub id: u32,
    pub eval: BTreeMap<ActionId, Significance>,
}

impl ActionDomain {
    pub fn new<I>(id: u32, eval: I) -> Self
    where
        I: IntoIterator<Item = (ActionId, Significance)>,
    {
        Self {
            id,
            eval: eval.into_iter().collect(),
        }
    }

    pub fn actions(&self) -> impl Iterator<Item = ActionId> + '_ {
        self.eval.keys().copied()
    }

    pub fn evaluate(&self, a: ActionId) -> Result<Significance, MutualismError> {
        self.eval
            .get(&a)
            .copied()
            .ok_or(MutualismError::UnknownAction(a))
    }
}

/// Does some action of `from` benefit `to`, optionally requiring it to be at least neutral at home?
fn has_witness(
    from: &ActionDomain,
    to: &ActionDomain,
    map: &ActionMap,
    dir: Direction,
    require_home_benefit: bool,
) -> Result<bool, MutualismError> {
    for (a, home) in &from.eval {
        if require_home_benefit && !home.is_non_negative() {
            continue;
        }
        let partner = map.map_action(*a, dir)?;
        if to.evaluate(partner)?.is_positive() {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Strict mutualistic precondition between `x` and `y`.
pub fn check_mutualistic_precondition(
    x: &ActionDomain,
    y: &ActionDomain,
    map: &ActionMap,
) -> Result<bool, MutualismError> {
    Ok(has_witness(x, y, map, Direction::Forward, true)?
        && has_witness(y, x, map, Direction::Inverse, true)?)
}

/// Extended precondition: only the partner's benefit is required on each side.
pub fn check_extended_precondition(
    x: &ActionDomain,
    y: &ActionDomain,
    map: &ActionMap,
) -> Result<bool, MutualismError> {
    Ok(has_witness(x, y, map, Direction::Forward, false)?
        && has_witness(y, x, map, Direction::Inverse, false)?)
}

/// One agent asking the coordinator for an activity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate<K> {
    pub agent: AgentId,
    pub kind: K,
    pub wants_company: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupActivity<K> {
    pub members: Vec<AgentId>,
    pub kind: K,
    pub formed_at: Tick,
}

impl<K> GroupActivity<K> {
    /// Remove a finishing member. Returns `true` while the group still has at least two members.
    pub fn leave(&mut self, agent: AgentId) -> bool {
        self.members.retain(|m| *m != agent);
        self.members.len() >= 2
    }

    pub fn admit(&mut self, agent: AgentId) {
        if !self.members.contains(&agent) {
            self.members.push(agent);
        }
    }
}

/// Merge company-seeking candidates with equal activity kind into groups.
///
/// Candidates are taken in arrival order; the first compatible pair opens a
/// group and later compatible arrivals join it. Solo candidates and
/// unmatched company-seekers are left out.
pub fn merge_group_activity<K: Clone + PartialEq>(
    candidates: &[Candidate<K>],
    tick: Tick,
) -> Vec<GroupActivity<K>> {
    let mut buckets: Vec<GroupActivity<K>> = Vec::new();
    for c in candidates.iter().filter(|c| c.wants_company) {
        match buckets.iter_mut().find(|g| g.kind == c.kind) {
            Some(g) => g.admit(c.agent),
            None => buckets.push(GroupActivity {
                members: vec![c.agent],
                kind: c.kind.clone(),
                formed_at: tick,
            }),
        }
    }
    buckets.retain(|g| g.members.len() >= 2);
    buckets
}

#[cfg(test)]
mod tests {
    use super::*;
    use Significance::*;

    fn a(i: u32) -> ActionId {
        ActionId(i)
    }

    #[test]
    fn map_forward_and_inverse() {
        let m = ActionMap::from_pairs([(a(1), a(101))]).unwrap();
        assert_eq!(m.map_action(a(1), Direction::Forward), Ok(a(101)));
        assert_eq!(m.map_action(a(101), Direction::Inverse), Ok(a(1)));
        assert_eq!(
            m.map_action(a(2), Direction::Forward),
            Err(MutualismError::UnknownAction(a(2)))
        );
    }

    #[test]
    fn rejects_non_bijective_maps() {
        assert_eq!(
            ActionMap::from_pairs([(a(1), a(5)), (a(2), a(5))]),
            Err(MutualismError::NotBijective(a(5)))
        );
        assert_eq!(
            ActionMap::from_pairs([(a(1), a(5)), (a(1), a(6))]),
            Err(MutualismError::NotBijective(a(1)))
        );
    }

    #[test]
    fn minimal_strict_witness() {
        // a1 neutral in X, its image b1 positive in Y; b2 neutral in Y, its preimage a2 positive in X.
        let map = ActionMap::from_pairs([(a(1), a(101)), (a(2), a(102))]).unwrap();
        let x = ActionDomain::new(0, [(a(1), Neutral), (a(2), Positive)]);
        let y = ActionDomain::new(1, [(a(101), Positive), (a(102), Neutral)]);
        assert_eq!(check_mutualistic_precondition(&x, &y, &map), Ok(true));
    }

    #[test]
    fn negative_single_action_blocks_strict() {
        let map = ActionMap::from_pairs([(a(1), a(101))]).unwrap();
        let x = ActionDomain::new(0, [(a(1), Negative)]);
        for s in [Negative, Neutral, Positive] {
            let y = ActionDomain::new(1, [(a(101), s)]);
            assert_eq!(check_mutualistic_precondition(&x, &y, &map), Ok(false));
        }
    }

    #[test]
    fn extended_admits_costly_action() {
        // X's a1 hurts X but helps Y; Y's b2 hurts Y but helps X.
        let map = ActionMap::from_pairs([(a(1), a(101)), (a(2), a(102))]).unwrap();
        let x = ActionDomain::new(0, [(a(1), Negative), (a(2), Positive)]);
        let y = ActionDomain::new(1, [(a(101), Positive), (a(102), Negative)]);
        assert_eq!(check_mutualistic_precondition(&x, &y, &map), Ok(false));
        assert_eq!(check_extended_precondition(&x, &y, &map), Ok(true));
    }

    #[test]
    fn extended_without_witness_is_false() {
        let map = ActionMap::from_pairs([(a(1), a(101))]).unwrap();
        let x = ActionDomain::new(0, [(a(1), Positive)]);
        let y = ActionDomain::new(1, [(a(101), Neutral)]);
        assert_eq!(check_extended_precondition(&x, &y, &map), Ok(false));
    }

    #[test]
    fn unknown_action_is_reported() {
        let map = ActionMap::from_pairs([(a(1), a(101))]).unwrap();
        let x = ActionDomain::new(0, [(a(1), Positive), (a(7), Positive)]);
        let y = ActionDomain::new(1, [(a(101), Neutral)]);
        assert_eq!(
            check_extended_precondition(&x, &y, &map),
            Err(MutualismError::UnknownAction(a(7)))
        );
    }

    fn walker(id: u32, company: bool) -> Candidate<&'static str> {
        Candidate {
            agent: AgentId(id),
            kind: "walk",
            wants_company: company,
        }
    }

    #[test]
    fn two_walkers_form_a_pair() {
        let g = merge_group_activity(&[walker(1, true), walker(2, true)], 5);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].members, vec![AgentId(1), AgentId(2)]);
        assert_eq!(g[0].formed_at, 5);
    }

    #[test]
    fn three_walkers_form_one_group() {
        let g = merge_group_activity(&[walker(1, true), walker(2, true), walker(3, true)], 0);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].members.len(), 3);
    }

    #[test]
    fn solo_walker_blocks_pairing() {
        assert!(merge_group_activity(&[walker(1, true), walker(2, false)], 0).is_empty());
    }

    #[test]
    fn kinds_do_not_mix() {
        let mut c = vec![walker(1, true), walker(2, true)];
        c.push(Candidate {
            agent: AgentId(3),
            kind: "market",
            wants_company: true,
        });
        let g = merge_group_activity(&c, 0);
        assert_eq!(g.len(), 1);
        assert!(!g[0].members.contains(&AgentId(3)));
    }

    #[test]
    fn group_persists_until_one_member_left() {
        let mut g = merge_group_activity(&[walker(1, true), walker(2, true), walker(3, true)], 0)
            .remove(0);
        assert!(g.leave(AgentId(2)));
        assert!(!g.leave(AgentId(1)));
        assert_eq!(g.members, vec![AgentId(3)]);
    }
}
