//! Generators and checks shared by the property suite and the acceptance run.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use fso_sim::engine::{AgentId, Position};
use fso_sim::mutualism::{
    check_extended_precondition, check_mutualistic_precondition, merge_group_activity, ActionDomain,
    ActionId, ActionMap, Candidate, Direction, MutualismError, Significance,
};
use fso_sim::protocol::{
    CommunityId, EscalationOutcome, Exception, Fso, MatchOutcome, RequestId, RoleDemand, RoleKind,
    ServiceRequest, SonId,
};

pub const CASES: u32 = 1000;

pub type Check = Result<(), TestCaseError>;

const ROLES: [RoleKind; 5] = [
    RoleKind::Walker,
    RoleKind::Taxi,
    RoleKind::Ambulance,
    RoleKind::Doctor(5),
    RoleKind::Appliance(3),
];

#[derive(Debug, Clone)]
pub struct AgentSpec {
    community: usize,
    roles: Vec<usize>,
    x: f64,
    y: f64,
}

/// A random community tree with role-offering agents scattered over it.
#[derive(Debug, Clone)]
pub struct TreeCase {
    /// `parents[i]` is the parent of community `i + 1`, always an earlier community.
    parents: Vec<usize>,
    agents: Vec<AgentSpec>,
}

#[derive(Debug, Clone)]
pub enum Op {
    Match { community: usize, needs: Vec<(usize, u32)> },
    Raise { community: usize, needs: Vec<(usize, u32)>, threshold: u32 },
    Dissolve(usize),
    ReleaseOne(usize, usize),
}

pub fn tree_case() -> impl Strategy<Value = TreeCase> {
    (1usize..9)
        .prop_flat_map(|n| {
            let parents = (0..n - 1).map(|i| 0..=i).collect::<Vec<_>>();
            let agents = prop::collection::vec(
                (
                    0..n,
                    prop::collection::vec(0..ROLES.len(), 1..3),
                    0.0..40.0f64,
                    0.0..40.0f64,
                ),
                0..24,
            );
            (parents, agents)
        })
        .prop_map(|(parents, agents)| TreeCase {
            parents,
            agents: agents
                .into_iter()
                .map(|(community, roles, x, y)| AgentSpec { community, roles, x, y })
                .collect(),
        })
}

fn needs() -> impl Strategy<Value = Vec<(usize, u32)>> {
    prop::collection::vec((0..ROLES.len(), 1u32..3), 1..4)
}

pub fn ops() -> impl Strategy<Value = Vec<Op>> {
    let op = prop_oneof![
        (0usize..9, needs()).prop_map(|(community, needs)| Op::Match { community, needs }),
        (0usize..9, needs(), 0u32..5).prop_map(|(community, needs, threshold)| Op::Raise {
            community,
            needs,
            threshold
        }),
        (0usize..16).prop_map(Op::Dissolve),
        (0usize..16, 0usize..6).prop_map(|(s, m)| Op::ReleaseOne(s, m)),
    ];
    prop::collection::vec(op, 1..20)
}

fn build(case: &TreeCase) -> Fso {
    // Coordinators get ids far above the role-offering agents.
    let mut fso = Fso::new("root", AgentId(10_000));
    for (i, &p) in case.parents.iter().enumerate() {
        fso.add_community(CommunityId(p as u32), &format!("c{}", i + 1), AgentId(10_001 + i as u32))
            .unwrap();
    }
    for (i, a) in case.agents.iter().enumerate() {
        let id = AgentId(i as u32);
        let c = CommunityId(a.community as u32);
        fso.add_agent(c, id).unwrap();
        let roles: Vec<RoleKind> = a.roles.iter().map(|&r| ROLES[r]).collect();
        fso.registry_mut(c)
            .unwrap()
            .offer(id, &roles, Position::new(a.x, a.y), 0);
    }
    fso
}

fn request(id: u64, needs: &[(usize, u32)]) -> ServiceRequest {
    ServiceRequest {
        id: RequestId(id),
        origin: AgentId(99_999),
        position: Position::new(20.0, 20.0),
        needs: needs
            .iter()
            .map(|&(r, count)| RoleDemand { role: ROLES[r], count })
            .collect(),
        issued_at: 0,
    }
}

fn registries(fso: &Fso) -> Vec<String> {
    fso.nodes()
        .iter()
        .map(|n| serde_json::to_string(&n.registry).unwrap())
        .collect()
}

/// available + busy = registered for every role, and busy matches the holders we track.
fn conservation(fso: &Fso, case: &TreeCase, held: &BTreeMap<SonId, Vec<AgentId>>) -> Check {
    let busy_agents: BTreeSet<AgentId> = held.values().flatten().copied().collect();
    for (r, role) in ROLES.iter().enumerate() {
        let offering: Vec<usize> = (0..case.agents.len())
            .filter(|&i| case.agents[i].roles.contains(&r))
            .collect();
        let busy = offering
            .iter()
            .filter(|&&i| busy_agents.contains(&AgentId(i as u32)))
            .count();
        let (a, b, total) = fso.role_census(*role);
        prop_assert_eq!(total, offering.len(), "registered holders of {:?}", role);
        prop_assert_eq!(a + b, total);
        prop_assert_eq!(b, busy, "busy holders of {:?}", role);
    }
    Ok(())
}

/// Inter-community judged from the members' home communities, not from the SON itself.
fn expected_inter(fso: &Fso, son: SonId) -> bool {
    let homes: BTreeSet<CommunityId> = fso
        .son(son)
        .unwrap()
        .members
        .iter()
        .map(|m| fso.home_of(m.agent).unwrap())
        .collect();
    homes.len() >= 2
}

/// Apply `ops` to a fresh organization, checking conservation, escalation
/// bounds, rollback on failure, SON span counting and tree shape after each.
pub fn check_protocol(case: &TreeCase, ops: &[Op]) -> Check {
    let mut fso = build(case);
    let n = fso.nodes().len();
    let mut held: BTreeMap<SonId, Vec<AgentId>> = BTreeMap::new();
    let mut next_id = 0u64;
    conservation(&fso, case, &held)?;

    for op in ops {
        match op {
            Op::Match { community, needs } => {
                let c = CommunityId((community % n) as u32);
                next_id += 1;
                let req = request(next_id, needs);
                let before = registries(&fso);
                match fso.match_notification(c, &req).unwrap() {
                    MatchOutcome::Enabled(alloc) => {
                        prop_assert!(alloc.assignments.iter().all(|a| a.community == c));
                        let inter_before = fso.inter_community_sons();
                        let son = fso.form_son(&alloc, &req, 0).unwrap();
                        prop_assert_eq!(inter_before, fso.inter_community_sons());
                        held.insert(son, alloc.assignments.iter().map(|a| a.agent).collect());
                    }
                    MatchOutcome::NoMatch => prop_assert_eq!(before, registries(&fso)),
                }
            }
            Op::Raise { community, needs, threshold } => {
                let c = CommunityId((community % n) as u32);
                next_id += 1;
                let req = request(next_id, needs);
                let before = registries(&fso);
                let sons_before = fso.sons().len();
                let inter_before = fso.inter_community_sons();
                let out = fso
                    .raise_exception(c, Exception::for_request(req, c), *threshold, 0)
                    .unwrap();
                let bound = fso.height().min(*threshold) + 1;
                match out {
                    EscalationOutcome::Resolved { son, hops, attempts } => {
                        prop_assert_eq!(attempts, hops + 1);
                        prop_assert!(attempts <= bound);
                        prop_assert!(hops <= fso.depth(c));
                        let inter = expected_inter(&fso, son);
                        prop_assert_eq!(fso.inter_community_sons(), inter_before + u64::from(inter));
                        prop_assert_eq!(fso.son(son).unwrap().is_inter_community(), inter);
                        // Every member sits in the subtree the climb reached.
                        let mut top = c;
                        for _ in 0..hops {
                            top = fso.node(top).unwrap().parent.unwrap();
                        }
                        let reach: BTreeSet<CommunityId> = fso.subtree(top).into_iter().collect();
                        for m in &fso.son(son).unwrap().members {
                            prop_assert!(reach.contains(&m.home));
                        }
                        held.insert(son, fso.son(son).unwrap().members.iter().map(|m| m.agent).collect());
                    }
                    EscalationOutcome::Failed { hops, attempts } => {
                        prop_assert_eq!(attempts, hops + 1);
                        prop_assert!(attempts <= bound);
                        prop_assert_eq!(&before, &registries(&fso));
                        prop_assert_eq!(sons_before, fso.sons().len());
                        prop_assert_eq!(inter_before, fso.inter_community_sons());
                    }
                }
            }
            Op::Dissolve(k) => {
                if let Some(&son) = held.keys().nth(k % held.len().max(1)) {
                    fso.dissolve_son(son).unwrap();
                    held.remove(&son);
                    prop_assert!(fso.dissolve_son(son).is_err());
                }
            }
            Op::ReleaseOne(k, m) => {
                if let Some(&son) = held.keys().nth(k % held.len().max(1)) {
                    let members = held.get_mut(&son).unwrap();
                    if !members.is_empty() {
                        let agent = members.remove(m % members.len());
                        fso.release_member(son, agent).unwrap();
                    }
                }
            }
        }
        prop_assert!(fso.check_well_formed().is_ok());
        conservation(&fso, case, &held)?;
    }

    for son in held.keys().copied().collect::<Vec<_>>() {
        fso.dissolve_son(son).unwrap();
    }
    for role in ROLES {
        prop_assert_eq!(fso.role_census(role).1, 0);
    }
    Ok(())
}

fn significance() -> impl Strategy<Value = Significance> {
    prop_oneof![
        Just(Significance::Negative),
        Just(Significance::Neutral),
        Just(Significance::Positive)
    ]
}

pub type Domains = (ActionDomain, ActionDomain, ActionMap);

/// Two domains of equal size joined by a random bijection.
pub fn domains() -> impl Strategy<Value = Domains> {
    (1usize..7)
        .prop_flat_map(|k| {
            (
                prop::collection::vec(significance(), k),
                prop::collection::vec(significance(), k),
                Just((0..k as u32).collect::<Vec<_>>()).prop_shuffle(),
            )
        })
        .prop_map(|(ex, ey, perm)| {
            let x = ActionDomain::new(1, ex.iter().enumerate().map(|(i, s)| (ActionId(i as u32), *s)));
            let y = ActionDomain::new(
                2,
                ey.iter().enumerate().map(|(i, s)| (ActionId(100 + i as u32), *s)),
            );
            let map = ActionMap::from_pairs(
                perm.iter()
                    .enumerate()
                    .map(|(i, &j)| (ActionId(i as u32), ActionId(100 + j))),
            )
            .unwrap();
            (x, y, map)
        })
}

fn brute_force(x: &ActionDomain, y: &ActionDomain, map: &ActionMap, strict: bool) -> bool {
    let pairs: Vec<(ActionId, ActionId)> = map.pairs().collect();
    let ok = |s: Significance| !strict || s != Significance::Negative;
    let forward = pairs
        .iter()
        .any(|(a, b)| ok(x.eval[a]) && y.eval[b] == Significance::Positive);
    let backward = pairs
        .iter()
        .any(|(a, b)| ok(y.eval[b]) && x.eval[a] == Significance::Positive);
    forward && backward
}

pub fn check_strict_implies_extended((x, y, map): &Domains) -> Check {
    let strict = check_mutualistic_precondition(x, y, map).unwrap();
    let extended = check_extended_precondition(x, y, map).unwrap();
    prop_assert!(!strict || extended);
    Ok(())
}

pub fn check_against_brute_force((x, y, map): &Domains) -> Check {
    prop_assert_eq!(check_mutualistic_precondition(x, y, map).unwrap(), brute_force(x, y, map, true));
    prop_assert_eq!(check_extended_precondition(x, y, map).unwrap(), brute_force(x, y, map, false));
    Ok(())
}

pub fn check_symmetry((x, y, map): &Domains) -> Check {
    let inv = map.inverted();
    prop_assert_eq!(
        check_mutualistic_precondition(x, y, map).unwrap(),
        check_mutualistic_precondition(y, x, &inv).unwrap()
    );
    prop_assert_eq!(
        check_extended_precondition(x, y, map).unwrap(),
        check_extended_precondition(y, x, &inv).unwrap()
    );
    Ok(())
}

/// A shuffled 50-element permutation and how many of its pairs to use.
pub fn bijection() -> impl Strategy<Value = (Vec<u32>, usize)> {
    (Just((0..50u32).collect::<Vec<_>>()).prop_shuffle(), 1usize..=50)
}

pub fn check_round_trip((perm, k): &(Vec<u32>, usize)) -> Check {
    let pairs: Vec<(ActionId, ActionId)> = perm[..*k]
        .iter()
        .enumerate()
        .map(|(i, &j)| (ActionId(i as u32), ActionId(1000 + j)))
        .collect();
    let map = ActionMap::from_pairs(pairs.clone()).unwrap();
    prop_assert_eq!(map.len(), *k);
    let inv = map.inverted();
    for (x, y) in pairs {
        let there = map.map_action(x, Direction::Forward).unwrap();
        prop_assert_eq!(there, y);
        prop_assert_eq!(map.map_action(there, Direction::Inverse).unwrap(), x);
        prop_assert_eq!(inv.map_action(y, Direction::Forward).unwrap(), x);
    }
    prop_assert_eq!(
        map.map_action(ActionId(999), Direction::Forward),
        Err(MutualismError::UnknownAction(ActionId(999)))
    );
    Ok(())
}

pub fn candidates() -> impl Strategy<Value = Vec<Candidate<u8>>> {
    prop::collection::vec((0u8..3, any::<bool>()), 0..30).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (kind, wants_company))| Candidate {
                agent: AgentId(i as u32),
                kind,
                wants_company,
            })
            .collect()
    })
}

pub fn check_group_partition(candidates: &[Candidate<u8>]) -> Check {
    let groups = merge_group_activity(candidates, 7);
    let mut seen = BTreeSet::new();
    for g in &groups {
        prop_assert!(g.members.len() >= 2);
        prop_assert_eq!(g.formed_at, 7);
        for m in &g.members {
            prop_assert!(seen.insert(*m), "agent in two groups");
            let c = &candidates[m.0 as usize];
            prop_assert!(c.wants_company);
            prop_assert_eq!(c.kind, g.kind);
        }
        // Members keep arrival order.
        prop_assert!(g.members.windows(2).all(|w| w[0] < w[1]));
    }
    for kind in 0u8..3 {
        let seekers = candidates
            .iter()
            .filter(|c| c.wants_company && c.kind == kind)
            .count();
        let grouped: usize = groups
            .iter()
            .filter(|g| g.kind == kind)
            .map(|g| g.members.len())
            .sum();
        prop_assert_eq!(grouped, if seekers >= 2 { seekers } else { 0 });
    }
    Ok(())
}
