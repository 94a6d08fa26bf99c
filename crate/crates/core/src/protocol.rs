//! The community tree: service registries, notification matching, exception
//! escalation and social overlay networks (SONs).
//!
//! Every community keeps a registry of the roles its members offer. A request
//! is first matched all-or-nothing against the local registry. When that
//! fails the coordinator raises an exception that climbs toward the root; at
//! each ancestor the still-missing roles are filled, possibly partially, from
//! the ancestor's whole subtree. The climb stops when every role is held
//! (the holders form a SON) or when the flooding threshold or the root is
//! passed, in which case everything gathered so far is handed back.
//!
//! Among several available holders of a role the one nearest to the request
//! wins; equal distances go to the lowest agent id.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{distance, AgentId, Position, Tick};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("agent {agent} is not a member of community {community}")]
    NotAMember {
        agent: AgentId,
        community: CommunityId,
    },
    #[error("unknown community {0}")]
    UnknownCommunity(CommunityId),
    #[error("agent {0} has no registry entry")]
    UnknownAgent(AgentId),
    #[error("agent {0} is not available")]
    NotAvailable(AgentId),
    #[error("allocation does not cover request {0}")]
    IncompleteAllocation(RequestId),
    #[error("SON {0} is already dissolved")]
    AlreadyDissolved(SonId),
    #[error("unknown SON {0}")]
    UnknownSon(SonId),
    #[error("invalid community tree: {0}")]
    BadTree(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CommunityId(pub u32);

impl fmt::Display for CommunityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SonId(pub u32);

impl fmt::Display for SonId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SON{}", self.0)
    }
}

/// Class of activity an agent can perform for others.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RoleKind {
    Walker,
    RideShare,
    Taxi,
    FireTruck,
    /// A doctor able to treat the given condition (1..=10).
    Doctor(u8),
    Ambulance,
    /// A medical appliance for the given condition (1..=10).
    Appliance(u8),
    InformalCarer,
    Mobility,
    ProfessionalCarer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Availability {
    Available,
    Busy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RoleDemand {
    pub role: RoleKind,
    pub count: u32,
}

impl RoleDemand {
    pub fn one(role: RoleKind) -> Self {
        Self { role, count: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceRequest {
    pub id: RequestId,
    pub origin: AgentId,
    pub position: Position,
    pub needs: Vec<RoleDemand>,
    pub issued_at: Tick,
}

impl ServiceRequest {
    /// One slot per demanded unit, in demand order.
    pub fn slots(&self) -> Vec<RoleKind> {
        expand(&self.needs)
    }
}

fn expand(needs: &[RoleDemand]) -> Vec<RoleKind> {
    needs
        .iter()
        .flat_map(|d| std::iter::repeat_n(d.role, d.count as usize))
        .collect()
}

fn compress(slots: &[RoleKind]) -> Vec<RoleDemand> {
    let mut out: Vec<RoleDemand> = Vec::new();
    for r in slots {
        match out.iter_mut().find(|d| d.role == *r) {
            Some(d) => d.count += 1,
            None => out.push(RoleDemand::one(*r)),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NotificationKind {
    Status(Availability),
    ServiceOffer {
        roles: Vec<RoleKind>,
        position: Position,
    },
    ServiceRequest(ServiceRequest),
    EventReport(ServiceRequest),
    Alarm(ServiceRequest),
    /// The origin withdraws from the registry and its pending requests are dropped.
    Cancel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub origin: AgentId,
    pub kind: NotificationKind,
    pub tick: Tick,
}

impl Notification {
    pub fn request(&self) -> Option<&ServiceRequest> {
        match &self.kind {
            NotificationKind::ServiceRequest(r)
            | NotificationKind::EventReport(r)
            | NotificationKind::Alarm(r) => Some(r),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub agent: AgentId,
    pub roles: BTreeSet<RoleKind>,
    pub availability: Availability,
    pub position: Position,
    pub updated_at: Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegistryChange {
    Added { agent: AgentId, role: RoleKind },
    Refreshed { agent: AgentId, role: RoleKind },
    Allocated { agent: AgentId },
    Released { agent: AgentId },
    Removed { agent: AgentId },
}

pub type RegistryDelta = Vec<RegistryChange>;

/// Roles offered within one community. Availability is tracked per agent:
/// holding any one of its roles makes the agent busy for all of them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServiceRegistry {
    entries: BTreeMap<AgentId, RegistryEntry>,
}

impl ServiceRegistry {
    pub fn offer(
        &mut self,
        agent: AgentId,
        roles: &[RoleKind],
        position: Position,
        tick: Tick,
    ) -> RegistryDelta {
        let entry = self.entries.entry(agent).or_insert_with(|| RegistryEntry {
            agent,
            roles: BTreeSet::new(),
            availability: Availability::Available,
            position,
            updated_at: tick,
        });
        entry.position = position;
        entry.updated_at = tick;
        roles
            .iter()
            .map(|&role| {
                if entry.roles.insert(role) {
                    RegistryChange::Added { agent, role }
                } else {
                    RegistryChange::Refreshed { agent, role }
                }
            })
            .collect()
    }

    pub fn get(&self, agent: AgentId) -> Option<&RegistryEntry> {
        self.entries.get(&agent)
    }

    pub fn entries(&self) -> impl Iterator<Item = &RegistryEntry> {
        self.entries.values()
    }

    pub fn contains(&self, agent: AgentId) -> bool {
        self.entries.contains_key(&agent)
    }

    pub fn allocate(&mut self, agent: AgentId) -> Result<RegistryChange, ProtocolError> {
        let e = self
            .entries
            .get_mut(&agent)
            .ok_or(ProtocolError::UnknownAgent(agent))?;
        if e.availability != Availability::Available {
            return Err(ProtocolError::NotAvailable(agent));
        }
        e.availability = Availability::Busy;
        Ok(RegistryChange::Allocated { agent })
    }

    pub fn release(&mut self, agent: AgentId) -> Result<RegistryChange, ProtocolError> {
        let e = self
            .entries
            .get_mut(&agent)
            .ok_or(ProtocolError::UnknownAgent(agent))?;
        e.availability = Availability::Available;
        Ok(RegistryChange::Released { agent })
    }

    pub fn set_position(&mut self, agent: AgentId, position: Position) {
        if let Some(e) = self.entries.get_mut(&agent) {
            e.position = position;
        }
    }

    pub fn remove(&mut self, agent: AgentId) -> Option<RegistryEntry> {
        self.entries.remove(&agent)
    }

    pub fn is_available(&self, agent: AgentId) -> bool {
        self.entries
            .get(&agent)
            .is_some_and(|e| e.availability == Availability::Available)
    }

    /// (available, busy) holders of `role`.
    pub fn census(&self, role: RoleKind) -> (usize, usize) {
        self.entries
            .values()
            .filter(|e| e.roles.contains(&role))
            .fold((0, 0), |(a, b), e| match e.availability {
                Availability::Available => (a + 1, b),
                Availability::Busy => (a, b + 1),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Member {
    Agent(AgentId),
    Community(CommunityId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunityNode {
    pub id: CommunityId,
    pub name: String,
    pub coordinator: AgentId,
    pub parent: Option<CommunityId>,
    pub members: Vec<Member>,
    pub registry: ServiceRegistry,
    pub pending: VecDeque<Notification>,
}

impl CommunityNode {
    pub fn child_communities(&self) -> impl Iterator<Item = CommunityId> + '_ {
        self.members.iter().filter_map(|m| match m {
            Member::Community(c) => Some(*c),
            Member::Agent(_) => None,
        })
    }

    pub fn agents(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.members.iter().filter_map(|m| match m {
            Member::Agent(a) => Some(*a),
            Member::Community(_) => None,
        })
    }
}

/// One role held by one agent on behalf of a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub agent: AgentId,
    pub role: RoleKind,
    pub community: CommunityId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub request: RequestId,
    pub assignments: Vec<Assignment>,
}

impl Allocation {
    pub fn communities(&self) -> BTreeSet<CommunityId> {
        self.assignments.iter().map(|a| a.community).collect()
    }

    pub fn holders_of(&self, role: RoleKind) -> impl Iterator<Item = &Assignment> + '_ {
        self.assignments.iter().filter(move |a| a.role == role)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MatchOutcome {
    Enabled(Allocation),
    NoMatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exception {
    pub request: ServiceRequest,
    pub missing_roles: Vec<RoleDemand>,
    pub origin_community: CommunityId,
    pub hops: u32,
}

impl Exception {
    /// An exception asking for everything the request needs.
    pub fn for_request(request: ServiceRequest, origin_community: CommunityId) -> Self {
        Self {
            missing_roles: request.needs.clone(),
            request,
            origin_community,
            hops: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EscalationOutcome {
    Resolved { son: SonId, hops: u32, attempts: u32 },
    Failed { hops: u32, attempts: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SonState {
    Active,
    Dissolved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SonMember {
    pub agent: AgentId,
    pub role: RoleKind,
    pub home: CommunityId,
    pub released: bool,
}

/// A temporary community of allocated role holders, alive for one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocialOverlayNetwork {
    pub id: SonId,
    pub request: RequestId,
    pub members: Vec<SonMember>,
    pub coordinator: AgentId,
    pub formed_at: Tick,
    pub state: SonState,
}

impl SocialOverlayNetwork {
    pub fn is_inter_community(&self) -> bool {
        let homes: BTreeSet<_> = self.members.iter().map(|m| m.home).collect();
        homes.len() >= 2
    }
}

/// Declarative description of a community tree: names and parent names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeSpec {
    pub nodes: Vec<TreeNodeSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNodeSpec {
    pub name: String,
    pub parent: Option<String>,
}

impl TreeSpec {
    pub fn node(name: &str, parent: Option<&str>) -> TreeNodeSpec {
        TreeNodeSpec {
            name: name.to_owned(),
            parent: parent.map(str::to_owned),
        }
    }
}

/// The whole organization: community tree plus the SONs it has formed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fso {
    nodes: Vec<CommunityNode>,
    home: BTreeMap<AgentId, CommunityId>,
    labels: BTreeMap<AgentId, String>,
    sons: Vec<SocialOverlayNetwork>,
    inter_community_sons: u64,
}

impl Fso {
    pub fn new(root_name: &str, root_coordinator: AgentId) -> Self {
        Self {
            nodes: vec![CommunityNode {
                id: CommunityId(0),
                name: root_name.to_owned(),
                coordinator: root_coordinator,
                parent: None,
                members: Vec::new(),
                registry: ServiceRegistry::default(),
                pending: VecDeque::new(),
            }],
            home: BTreeMap::new(),
            labels: BTreeMap::new(),
            sons: Vec::new(),
            inter_community_sons: 0,
        }
    }

    /// Build a tree from a node list. Coordinator ids are handed out by `coordinator_for`.
    pub fn from_spec<F>(spec: &TreeSpec, mut coordinator_for: F) -> Result<Self, ProtocolError>
    where
        F: FnMut(&str) -> AgentId,
    {
        let roots: Vec<_> = spec.nodes.iter().filter(|n| n.parent.is_none()).collect();
        if roots.len() != 1 {
            return Err(ProtocolError::BadTree(format!(
                "expected exactly one root, found {}",
                roots.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for n in &spec.nodes {
            if !seen.insert(n.name.as_str()) {
                return Err(ProtocolError::BadTree(format!("duplicate community {:?}", n.name)));
            }
        }
        let root = roots[0];
        let mut fso = Fso::new(&root.name, coordinator_for(&root.name));
        // Attach nodes whose parent exists; repeat until stable. Leftovers are orphans or cycles.
        let mut remaining: Vec<&TreeNodeSpec> =
            spec.nodes.iter().filter(|n| n.parent.is_some()).collect();
        while !remaining.is_empty() {
            let before = remaining.len();
            let mut next = Vec::new();
            for n in remaining {
                let parent = n.parent.as_deref().unwrap_or_default();
                match fso.find(parent) {
                    Some(p) => {
                        let coord = coordinator_for(&n.name);
                        fso.add_community(p, &n.name, coord)?;
                    }
                    None => next.push(n),
                }
            }
            if next.len() == before {
                return Err(ProtocolError::BadTree(format!(
                    "community {:?} has unknown parent {:?}",
                    next[0].name,
                    next[0].parent.as_deref().unwrap_or_default()
                )));
            }
            remaining = next;
        }
        Ok(fso)
    }

    pub fn root(&self) -> CommunityId {
        CommunityId(0)
    }

    pub fn add_community(
        &mut self,
        parent: CommunityId,
        name: &str,
        coordinator: AgentId,
    ) -> Result<CommunityId, ProtocolError> {
        self.node(parent)?;
        let id = CommunityId(self.nodes.len() as u32);
        self.nodes.push(CommunityNode {
            id,
            name: name.to_owned(),
            coordinator,
            parent: Some(parent),
            members: Vec::new(),
            registry: ServiceRegistry::default(),
            pending: VecDeque::new(),
        });
        // Seen from the parent, the child community is one member agent, represented by its coordinator.
        self.nodes[parent.0 as usize]
            .members
            .push(Member::Community(id));
        Ok(id)
    }

    pub fn add_agent(&mut self, community: CommunityId, agent: AgentId) -> Result<(), ProtocolError> {
        self.node(community)?;
        self.nodes[community.0 as usize]
            .members
            .push(Member::Agent(agent));
        self.home.insert(agent, community);
        Ok(())
    }

    pub fn set_label(&mut self, agent: AgentId, label: impl Into<String>) {
        self.labels.insert(agent, label.into());
    }

    pub fn node(&self, id: CommunityId) -> Result<&CommunityNode, ProtocolError> {
        self.nodes
            .get(id.0 as usize)
            .ok_or(ProtocolError::UnknownCommunity(id))
    }

    fn node_mut(&mut self, id: CommunityId) -> Result<&mut CommunityNode, ProtocolError> {
        self.nodes
            .get_mut(id.0 as usize)
            .ok_or(ProtocolError::UnknownCommunity(id))
    }

    pub fn nodes(&self) -> &[CommunityNode] {
        &self.nodes
    }

    pub fn find(&self, name: &str) -> Option<CommunityId> {
        self.nodes.iter().find(|n| n.name == name).map(|n| n.id)
    }

    pub fn home_of(&self, agent: AgentId) -> Option<CommunityId> {
        self.home.get(&agent).copied()
    }

    pub fn registry(&self, id: CommunityId) -> Result<&ServiceRegistry, ProtocolError> {
        Ok(&self.node(id)?.registry)
    }

    pub fn registry_mut(&mut self, id: CommunityId) -> Result<&mut ServiceRegistry, ProtocolError> {
        Ok(&mut self.node_mut(id)?.registry)
    }

    /// Agents are level 0; a community is one above its highest child community (leaf communities are 1).
    pub fn level(&self, id: CommunityId) -> u32 {
        1 + self.nodes[id.0 as usize]
            .child_communities()
            .map(|c| self.level(c))
            .max()
            .unwrap_or(0)
    }

    /// Number of upward edges from the deepest community to the root.
    pub fn height(&self) -> u32 {
        self.nodes
            .iter()
            .map(|n| self.depth(n.id))
            .max()
            .unwrap_or(0)
    }

    pub fn depth(&self, id: CommunityId) -> u32 {
        let mut d = 0;
        let mut cur = self.nodes[id.0 as usize].parent;
        while let Some(p) = cur {
            d += 1;
            cur = self.nodes[p.0 as usize].parent;
        }
        d
    }

    /// `id` followed by every community below it, in pre-order.
    pub fn subtree(&self, id: CommunityId) -> Vec<CommunityId> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(c) = stack.pop() {
            out.push(c);
            let node = &self.nodes[c.0 as usize];
            let children: Vec<_> = node.child_communities().collect();
            stack.extend(children.into_iter().rev());
        }
        out
    }

    pub fn ancestors(&self, id: CommunityId) -> Vec<CommunityId> {
        let mut out = Vec::new();
        let mut cur = self.nodes[id.0 as usize].parent;
        while let Some(p) = cur {
            out.push(p);
            cur = self.nodes[p.0 as usize].parent;
        }
        out
    }

    /// Whether `agent` belongs to the subtree rooted at `community`, directly or as a coordinator.
    pub fn is_transitive_member(&self, community: CommunityId, agent: AgentId) -> bool {
        self.subtree(community).into_iter().any(|c| {
            let n = &self.nodes[c.0 as usize];
            n.coordinator == agent || n.agents().any(|a| a == agent)
        })
    }

    /// Deliver a notification to a community coordinator.
    ///
    /// Offers and status updates change the registry; every notification is
    /// queued for matching.
    pub fn publish_notification(
        &mut self,
        community: CommunityId,
        n: Notification,
    ) -> Result<RegistryDelta, ProtocolError> {
        self.node(community)?;
        if !self.is_transitive_member(community, n.origin) {
            return Err(ProtocolError::NotAMember {
                agent: n.origin,
                community,
            });
        }
        let node = self.node_mut(community)?;
        let delta = match &n.kind {
            NotificationKind::ServiceOffer { roles, position } => {
                node.registry.offer(n.origin, roles, *position, n.tick)
            }
            NotificationKind::Status(Availability::Busy) => {
                if node.registry.is_available(n.origin) {
                    vec![node.registry.allocate(n.origin)?]
                } else {
                    Vec::new()
                }
            }
            NotificationKind::Status(Availability::Available) => {
                if node.registry.contains(n.origin) {
                    vec![node.registry.release(n.origin)?]
                } else {
                    Vec::new()
                }
            }
            NotificationKind::Cancel => {
                let origin = n.origin;
                node.pending
                    .retain(|p| p.request().is_none_or(|r| r.origin != origin));
                node.registry
                    .remove(origin)
                    .map(|_| vec![RegistryChange::Removed { agent: origin }])
                    .unwrap_or_default()
            }
            _ => Vec::new(),
        };
        node.pending.push_back(n);
        Ok(delta)
    }

    pub fn pop_pending(&mut self, community: CommunityId) -> Option<Notification> {
        self.node_mut(community).ok()?.pending.pop_front()
    }

    /// Available holders of `role` across `communities`, nearest first, then lowest id.
    fn candidates(
        &self,
        communities: &[CommunityId],
        role: RoleKind,
        at: Position,
    ) -> Vec<(AgentId, CommunityId)> {
        let mut seen = BTreeSet::new();
        let mut found: Vec<(f64, AgentId, CommunityId)> = Vec::new();
        for &c in communities {
            for e in self.nodes[c.0 as usize].registry.entries() {
                if e.availability == Availability::Available
                    && e.roles.contains(&role)
                    && seen.insert(e.agent)
                {
                    found.push((distance(e.position, at), e.agent, c));
                }
            }
        }
        found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        found.into_iter().map(|(_, a, c)| (a, c)).collect()
    }

    /// Maximum assignment of `slots` to distinct available agents in `communities`.
    ///
    /// Slots are served in order by augmenting paths over preference-ordered
    /// candidate lists, so the result is deterministic and covers as many slots
    /// as any assignment could.
    fn assign_slots(
        &self,
        communities: &[CommunityId],
        slots: &[RoleKind],
        at: Position,
    ) -> Vec<Option<(AgentId, CommunityId)>> {
        let cands: Vec<Vec<(AgentId, CommunityId)>> = slots
            .iter()
            .map(|r| self.candidates(communities, *r, at))
            .collect();
        let mut owner: BTreeMap<AgentId, usize> = BTreeMap::new();
        let mut chosen: Vec<Option<(AgentId, CommunityId)>> = vec![None; slots.len()];

        fn augment(
            slot: usize,
            cands: &[Vec<(AgentId, CommunityId)>],
            owner: &mut BTreeMap<AgentId, usize>,
            chosen: &mut [Option<(AgentId, CommunityId)>],
            visited: &mut BTreeSet<AgentId>,
        ) -> bool {
            for &(agent, comm) in &cands[slot] {
                if !visited.insert(agent) {
                    continue;
                }
                let free = match owner.get(&agent).copied() {
                    None => true,
                    Some(other) => augment(other, cands, owner, chosen, visited),
                };
                if free {
                    owner.insert(agent, slot);
                    chosen[slot] = Some((agent, comm));
                    return true;
                }
            }
            false
        }

        for slot in 0..slots.len() {
            let mut visited = BTreeSet::new();
            augment(slot, &cands, &mut owner, &mut chosen, &mut visited);
        }
        chosen
    }

    fn allocate_assignments(&mut self, assignments: &[Assignment]) -> Result<(), ProtocolError> {
        for a in assignments {
            self.node_mut(a.community)?.registry.allocate(a.agent)?;
        }
        Ok(())
    }

    fn release_assignments(&mut self, assignments: &[Assignment]) -> RegistryDelta {
        assignments
            .iter()
            .filter_map(|a| {
                self.nodes[a.community.0 as usize]
                    .registry
                    .release(a.agent)
                    .ok()
            })
            .collect()
    }

    /// All-or-nothing match of a request against the community's own registry.
    ///
    /// On success the chosen holders are marked busy; on failure nothing changes.
    pub fn match_notification(
        &mut self,
        community: CommunityId,
        request: &ServiceRequest,
    ) -> Result<MatchOutcome, ProtocolError> {
        self.node(community)?;
        let slots = request.slots();
        let chosen = self.assign_slots(&[community], &slots, request.position);
        if chosen.iter().any(Option::is_none) {
            return Ok(MatchOutcome::NoMatch);
        }
        let assignments: Vec<Assignment> = slots
            .iter()
            .zip(chosen)
            .map(|(role, c)| {
                let (agent, community) = c.expect("checked above");
                Assignment {
                    agent,
                    role: *role,
                    community,
                }
            })
            .collect();
        self.allocate_assignments(&assignments)?;
        Ok(MatchOutcome::Enabled(Allocation {
            request: request.id,
            assignments,
        }))
    }

    /// Climb from `community` toward the root gathering the exception's missing roles.
    ///
    /// The starting community counts as the first attempt (hop 0). Each
    /// attempt draws on the current community's whole subtree. On success a
    /// SON is formed at `tick`; on failure every role gathered is released.
    pub fn raise_exception(
        &mut self,
        community: CommunityId,
        mut exception: Exception,
        flooding_threshold: u32,
        tick: Tick,
    ) -> Result<EscalationOutcome, ProtocolError> {
        self.node(community)?;
        let mut missing = expand(&exception.missing_roles);
        let mut gathered: Vec<Assignment> = Vec::new();
        let mut current = community;
        let mut attempts = 0;
        loop {
            attempts += 1;
            let view = self.subtree(current);
            let chosen = self.assign_slots(&view, &missing, exception.request.position);
            let mut still = Vec::new();
            let mut got = Vec::new();
            for (role, c) in missing.iter().zip(chosen) {
                match c {
                    Some((agent, comm)) => got.push(Assignment {
                        agent,
                        role: *role,
                        community: comm,
                    }),
                    None => still.push(*role),
                }
            }
            self.allocate_assignments(&got)?;
            gathered.extend(got);
            missing = still;
            exception.missing_roles = compress(&missing);

            if missing.is_empty() {
                let allocation = Allocation {
                    request: exception.request.id,
                    assignments: gathered,
                };
                let son = self.form_son(&allocation, &exception.request, tick)?;
                return Ok(EscalationOutcome::Resolved {
                    son,
                    hops: exception.hops,
                    attempts,
                });
            }
            let parent = self.nodes[current.0 as usize].parent;
            match parent {
                Some(p) if exception.hops < flooding_threshold => {
                    exception.hops += 1;
                    current = p;
                }
                _ => {
                    self.release_assignments(&gathered);
                    return Ok(EscalationOutcome::Failed {
                        hops: exception.hops,
                        attempts,
                    });
                }
            }
        }
    }

    /// Turn a complete allocation into an active SON.
    ///
    /// The allocation's holders must already be marked busy. The
    /// inter-community counter goes up when they come from two or more communities.
    pub fn form_son(
        &mut self,
        allocation: &Allocation,
        request: &ServiceRequest,
        tick: Tick,
    ) -> Result<SonId, ProtocolError> {
        let mut want = request.slots();
        want.sort();
        let mut have: Vec<RoleKind> = allocation.assignments.iter().map(|a| a.role).collect();
        have.sort();
        if want != have || allocation.request != request.id {
            return Err(ProtocolError::IncompleteAllocation(request.id));
        }
        let id = SonId(self.sons.len() as u32);
        let members: Vec<SonMember> = allocation
            .assignments
            .iter()
            .map(|a| SonMember {
                agent: a.agent,
                role: a.role,
                home: a.community,
                released: false,
            })
            .collect();
        let coordinator = members
            .iter()
            .map(|m| m.agent)
            .min()
            .unwrap_or(request.origin);
        let son = SocialOverlayNetwork {
            id,
            request: request.id,
            members,
            coordinator,
            formed_at: tick,
            state: SonState::Active,
        };
        if son.is_inter_community() {
            self.inter_community_sons += 1;
        }
        self.sons.push(son);
        Ok(id)
    }

    pub fn son(&self, id: SonId) -> Result<&SocialOverlayNetwork, ProtocolError> {
        self.sons
            .get(id.0 as usize)
            .ok_or(ProtocolError::UnknownSon(id))
    }

    pub fn sons(&self) -> &[SocialOverlayNetwork] {
        &self.sons
    }

    pub fn inter_community_sons(&self) -> u64 {
        self.inter_community_sons
    }

    /// Let one member go before the SON ends (e.g. an ambulance after delivery).
    pub fn release_member(
        &mut self,
        son: SonId,
        agent: AgentId,
    ) -> Result<RegistryDelta, ProtocolError> {
        let s = self
            .sons
            .get_mut(son.0 as usize)
            .ok_or(ProtocolError::UnknownSon(son))?;
        if s.state == SonState::Dissolved {
            return Err(ProtocolError::AlreadyDissolved(son));
        }
        let mut delta = Vec::new();
        let mut to_release = Vec::new();
        for m in s.members.iter_mut().filter(|m| m.agent == agent && !m.released) {
            m.released = true;
            to_release.push((m.home, m.agent));
        }
        for (home, a) in to_release {
            delta.push(self.nodes[home.0 as usize].registry.release(a)?);
        }
        Ok(delta)
    }

    /// End a SON, handing every still-held role back to its home registry.
    pub fn dissolve_son(&mut self, son: SonId) -> Result<RegistryDelta, ProtocolError> {
        let s = self
            .sons
            .get_mut(son.0 as usize)
            .ok_or(ProtocolError::UnknownSon(son))?;
        if s.state == SonState::Dissolved {
            return Err(ProtocolError::AlreadyDissolved(son));
        }
        s.state = SonState::Dissolved;
        let held: Vec<(CommunityId, AgentId)> = s
            .members
            .iter_mut()
            .filter(|m| !m.released)
            .map(|m| {
                m.released = true;
                (m.home, m.agent)
            })
            .collect();
        let mut delta = Vec::new();
        for (home, a) in held {
            delta.push(self.nodes[home.0 as usize].registry.release(a)?);
        }
        Ok(delta)
    }

    /// (available, busy, total) holders of `role` over the whole tree.
    pub fn role_census(&self, role: RoleKind) -> (usize, usize, usize) {
        let (a, b) = self
            .nodes
            .iter()
            .map(|n| n.registry.census(role))
            .fold((0, 0), |(x, y), (a, b)| (x + a, y + b));
        (a, b, a + b)
    }

    /// Check the tree shape: one root, parent links agree with membership, no cycles.
    pub fn check_well_formed(&self) -> Result<(), ProtocolError> {
        let roots = self.nodes.iter().filter(|n| n.parent.is_none()).count();
        if roots != 1 {
            return Err(ProtocolError::BadTree(format!("{roots} roots")));
        }
        for n in &self.nodes {
            if let Some(p) = n.parent {
                let listed = self.nodes[p.0 as usize]
                    .child_communities()
                    .filter(|c| *c == n.id)
                    .count();
                if listed != 1 {
                    return Err(ProtocolError::BadTree(format!(
                        "{} listed {listed} times under its parent",
                        n.name
                    )));
                }
            }
            if self.depth(n.id) as usize >= self.nodes.len() {
                return Err(ProtocolError::BadTree(format!("cycle through {}", n.name)));
            }
        }
        Ok(())
    }

    /// Indented text dump: one header per community followed by its members and their levels.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for id in self.subtree(self.root()) {
            let n = &self.nodes[id.0 as usize];
            let indent = "  ".repeat(self.depth(id) as usize);
            let _ = writeln!(out, "{indent}{} members\tL{}", n.name, self.level(id));
            for m in &n.members {
                match m {
                    Member::Community(c) => {
                        let child = &self.nodes[c.0 as usize];
                        let _ = writeln!(
                            out,
                            "{indent}  {} {}\tL{}",
                            child.name,
                            child.coordinator.0,
                            self.level(*c)
                        );
                    }
                    Member::Agent(a) => {
                        let label = self
                            .labels
                            .get(a)
                            .cloned()
                            .unwrap_or_else(|| format!("agent {}", a.0));
                        let _ = writeln!(out, "{indent}  [{label}]\tL0");
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const P0: Position = Position::new(0.0, 0.0);

    fn req(id: u64, needs: Vec<RoleDemand>) -> ServiceRequest {
        ServiceRequest {
            id: RequestId(id),
            origin: AgentId(1),
            position: P0,
            needs,
            issued_at: 0,
        }
    }

    fn offer(fso: &mut Fso, c: CommunityId, agent: u32, roles: &[RoleKind], pos: Position) {
        fso.add_agent(c, AgentId(agent)).unwrap();
        fso.publish_notification(
            c,
            Notification {
                origin: AgentId(agent),
                kind: NotificationKind::ServiceOffer {
                    roles: roles.to_vec(),
                    position: pos,
                },
                tick: 0,
            },
        )
        .unwrap();
    }

    /// root ⊃ regional ⊃ {h1, h2}, root ⊃ residents
    fn hospitals() -> (Fso, CommunityId, CommunityId, CommunityId) {
        let mut fso = Fso::new("emergency", AgentId(900));
        let regional = fso.add_community(fso.root(), "regional", AgentId(901)).unwrap();
        let h1 = fso.add_community(regional, "h1", AgentId(902)).unwrap();
        let h2 = fso.add_community(regional, "h2", AgentId(903)).unwrap();
        let residents = fso.add_community(fso.root(), "residents", AgentId(904)).unwrap();
        fso.add_agent(residents, AgentId(1)).unwrap();
        (fso, residents, h1, h2)
    }

    #[test]
    fn offer_adds_entry_and_status_flips() {
        let mut fso = Fso::new("root", AgentId(0));
        let c = fso.root();
        fso.add_agent(c, AgentId(5)).unwrap();
        let d = fso
            .publish_notification(
                c,
                Notification {
                    origin: AgentId(5),
                    kind: NotificationKind::ServiceOffer {
                        roles: vec![RoleKind::Walker],
                        position: P0,
                    },
                    tick: 3,
                },
            )
            .unwrap();
        assert_eq!(
            d,
            vec![RegistryChange::Added {
                agent: AgentId(5),
                role: RoleKind::Walker
            }]
        );
        assert!(fso.registry(c).unwrap().is_available(AgentId(5)));
        fso.publish_notification(
            c,
            Notification {
                origin: AgentId(5),
                kind: NotificationKind::Status(Availability::Busy),
                tick: 4,
            },
        )
        .unwrap();
        assert!(!fso.registry(c).unwrap().is_available(AgentId(5)));
        assert_eq!(fso.node(c).unwrap().pending.len(), 2);
    }

    #[test]
    fn duplicate_offer_refreshes() {
        let mut fso = Fso::new("root", AgentId(0));
        let c = fso.root();
        offer(&mut fso, c, 5, &[RoleKind::Taxi], P0);
        let d = fso
            .publish_notification(
                c,
                Notification {
                    origin: AgentId(5),
                    kind: NotificationKind::ServiceOffer {
                        roles: vec![RoleKind::Taxi],
                        position: P0,
                    },
                    tick: 9,
                },
            )
            .unwrap();
        assert!(matches!(d[0], RegistryChange::Refreshed { .. }));
        let reg = fso.registry(c).unwrap();
        assert_eq!(reg.entries().count(), 1);
        assert_eq!(reg.get(AgentId(5)).unwrap().updated_at, 9);
    }

    #[test]
    fn outsider_cannot_publish() {
        let (mut fso, residents, h1, _) = hospitals();
        let err = fso
            .publish_notification(
                h1,
                Notification {
                    origin: AgentId(1),
                    kind: NotificationKind::Status(Availability::Busy),
                    tick: 0,
                },
            )
            .unwrap_err();
        assert_eq!(
            err,
            ProtocolError::NotAMember {
                agent: AgentId(1),
                community: h1
            }
        );
        // Transitive membership reaches the root.
        assert!(fso.is_transitive_member(fso.root(), AgentId(1)));
        assert!(fso.is_transitive_member(residents, AgentId(1)));
    }

    #[test]
    fn walker_request_matches_available_offer() {
        let mut fso = Fso::new("residents", AgentId(0));
        let c = fso.root();
        offer(&mut fso, c, 7, &[RoleKind::Walker], Position::new(2.0, 0.0));
        let out = fso
            .match_notification(c, &req(1, vec![RoleDemand::one(RoleKind::Walker)]))
            .unwrap();
        let MatchOutcome::Enabled(alloc) = out else {
            panic!("expected a match")
        };
        assert_eq!(alloc.assignments[0].agent, AgentId(7));
        assert!(!fso.registry(c).unwrap().is_available(AgentId(7)));
    }

    #[test]
    fn no_taxi_no_match() {
        let mut fso = Fso::new("residents", AgentId(0));
        let out = fso
            .match_notification(fso.root(), &req(1, vec![RoleDemand::one(RoleKind::Taxi)]))
            .unwrap();
        assert_eq!(out, MatchOutcome::NoMatch);
    }

    #[test]
    fn partial_local_match_changes_nothing() {
        let (mut fso, _, h1, _) = hospitals();
        offer(&mut fso, h1, 10, &[RoleKind::Doctor(5)], P0);
        let r = req(
            1,
            vec![
                RoleDemand::one(RoleKind::Doctor(5)),
                RoleDemand::one(RoleKind::Ambulance),
            ],
        );
        assert_eq!(fso.match_notification(h1, &r).unwrap(), MatchOutcome::NoMatch);
        assert!(fso.registry(h1).unwrap().is_available(AgentId(10)));
    }

    #[test]
    fn nearest_holder_wins_then_lowest_id() {
        let mut fso = Fso::new("c", AgentId(0));
        let c = fso.root();
        offer(&mut fso, c, 20, &[RoleKind::Taxi], Position::new(3.0, 0.0));
        offer(&mut fso, c, 21, &[RoleKind::Taxi], Position::new(1.0, 0.0));
        offer(&mut fso, c, 19, &[RoleKind::Taxi], Position::new(0.0, 1.0));
        let MatchOutcome::Enabled(a) = fso
            .match_notification(c, &req(1, vec![RoleDemand::one(RoleKind::Taxi)]))
            .unwrap()
        else {
            panic!()
        };
        assert_eq!(a.assignments[0].agent, AgentId(19));
    }

    #[test]
    fn multi_role_agent_is_not_double_booked() {
        // Doctor 10 covers conditions 1 and 5, doctor 11 only 1. Greedy-nearest on
        // slot Doctor(1) would take 10 and starve Doctor(5); the matcher reroutes.
        let mut fso = Fso::new("h", AgentId(0));
        let c = fso.root();
        offer(&mut fso, c, 10, &[RoleKind::Doctor(1), RoleKind::Doctor(5)], P0);
        offer(&mut fso, c, 11, &[RoleKind::Doctor(1)], Position::new(5.0, 0.0));
        let r = req(
            1,
            vec![
                RoleDemand::one(RoleKind::Doctor(1)),
                RoleDemand::one(RoleKind::Doctor(5)),
            ],
        );
        let MatchOutcome::Enabled(a) = fso.match_notification(c, &r).unwrap() else {
            panic!()
        };
        assert_eq!(a.holders_of(RoleKind::Doctor(5)).next().unwrap().agent, AgentId(10));
        assert_eq!(a.holders_of(RoleKind::Doctor(1)).next().unwrap().agent, AgentId(11));
    }

    fn medical_need() -> Vec<RoleDemand> {
        vec![
            RoleDemand::one(RoleKind::Doctor(7)),
            RoleDemand::one(RoleKind::Ambulance),
            RoleDemand {
                role: RoleKind::Appliance(7),
                count: 3,
            },
        ]
    }

    #[test]
    fn escalation_resolved_within_one_hospital() {
        let (mut fso, _, h1, h2) = hospitals();
        offer(&mut fso, h1, 10, &[RoleKind::Doctor(7)], P0);
        offer(&mut fso, h1, 22, &[RoleKind::Ambulance], P0);
        for i in 0..3 {
            offer(&mut fso, h1, 30 + i, &[RoleKind::Appliance(7)], P0);
        }
        offer(&mut fso, h2, 50, &[RoleKind::Appliance(7)], Position::new(9.0, 9.0));
        let r = req(1, medical_need());
        let MatchOutcome::Enabled(a) = fso.match_notification(h1, &r).unwrap() else {
            panic!()
        };
        let son = fso.form_son(&a, &r, 5).unwrap();
        assert!(!fso.son(son).unwrap().is_inter_community());
        assert_eq!(fso.inter_community_sons(), 0);
    }

    #[test]
    fn escalation_spans_two_hospitals() {
        let (mut fso, _, h1, h2) = hospitals();
        offer(&mut fso, h1, 10, &[RoleKind::Doctor(7)], P0);
        offer(&mut fso, h1, 22, &[RoleKind::Ambulance], P0);
        offer(&mut fso, h1, 30, &[RoleKind::Appliance(7)], P0);
        for i in 0..2 {
            offer(&mut fso, h2, 40 + i, &[RoleKind::Appliance(7)], Position::new(9.0, 9.0));
        }
        let r = req(1, medical_need());
        assert_eq!(fso.match_notification(h1, &r).unwrap(), MatchOutcome::NoMatch);
        let out = fso
            .raise_exception(h1, Exception::for_request(r, h1), 3, 8)
            .unwrap();
        let EscalationOutcome::Resolved { son, hops, attempts } = out else {
            panic!("expected resolution, got {out:?}")
        };
        assert_eq!((hops, attempts), (1, 2));
        let son = fso.son(son).unwrap();
        assert!(son.is_inter_community());
        assert_eq!(son.members.len(), 5);
        assert_eq!(son.coordinator, AgentId(10));
        assert_eq!(fso.inter_community_sons(), 1);
        assert!(!fso.registry(h2).unwrap().is_available(AgentId(41)));
    }

    #[test]
    fn failed_escalation_rolls_back() {
        let (mut fso, residents, h1, h2) = hospitals();
        offer(&mut fso, h1, 10, &[RoleKind::Doctor(7)], P0);
        offer(&mut fso, h2, 22, &[RoleKind::Ambulance], P0);
        let before = fso.clone();
        let r = req(1, medical_need());
        let out = fso
            .raise_exception(residents, Exception::for_request(r, residents), 10, 1)
            .unwrap();
        assert_eq!(out, EscalationOutcome::Failed { hops: 1, attempts: 2 });
        assert_eq!(fso, before);
    }

    #[test]
    fn flooding_threshold_stops_the_climb() {
        let (mut fso, _, h1, h2) = hospitals();
        offer(&mut fso, h2, 10, &[RoleKind::Ambulance], P0);
        let r = req(1, vec![RoleDemand::one(RoleKind::Ambulance)]);
        let out = fso
            .raise_exception(h1, Exception::for_request(r.clone(), h1), 0, 1)
            .unwrap();
        assert_eq!(out, EscalationOutcome::Failed { hops: 0, attempts: 1 });
        let out = fso
            .raise_exception(h1, Exception::for_request(r, h1), 1, 1)
            .unwrap();
        assert!(matches!(out, EscalationOutcome::Resolved { hops: 1, .. }));
    }

    #[test]
    fn son_lifecycle() {
        let mut fso = Fso::new("h", AgentId(0));
        let c = fso.root();
        for i in 0..3 {
            offer(&mut fso, c, 10 + i, &[RoleKind::Appliance(2)], P0);
        }
        let r = req(
            1,
            vec![RoleDemand {
                role: RoleKind::Appliance(2),
                count: 3,
            }],
        );
        let MatchOutcome::Enabled(a) = fso.match_notification(c, &r).unwrap() else {
            panic!()
        };
        let son = fso.form_son(&a, &r, 0).unwrap();
        assert_eq!(fso.role_census(RoleKind::Appliance(2)), (0, 3, 3));
        let delta = fso.dissolve_son(son).unwrap();
        assert_eq!(delta.len(), 3);
        assert_eq!(fso.role_census(RoleKind::Appliance(2)), (3, 0, 3));
        assert_eq!(fso.dissolve_son(son), Err(ProtocolError::AlreadyDissolved(son)));
    }

    #[test]
    fn incomplete_allocation_is_rejected() {
        let mut fso = Fso::new("h", AgentId(0));
        let r = req(1, vec![RoleDemand::one(RoleKind::Ambulance)]);
        let a = Allocation {
            request: r.id,
            assignments: vec![],
        };
        assert_eq!(
            fso.form_son(&a, &r, 0),
            Err(ProtocolError::IncompleteAllocation(r.id))
        );
    }

    #[test]
    fn early_member_release() {
        let (mut fso, _, h1, _) = hospitals();
        offer(&mut fso, h1, 22, &[RoleKind::Ambulance], P0);
        offer(&mut fso, h1, 10, &[RoleKind::Doctor(7)], P0);
        let r = req(
            1,
            vec![
                RoleDemand::one(RoleKind::Ambulance),
                RoleDemand::one(RoleKind::Doctor(7)),
            ],
        );
        let MatchOutcome::Enabled(a) = fso.match_notification(h1, &r).unwrap() else {
            panic!()
        };
        let son = fso.form_son(&a, &r, 0).unwrap();
        assert_eq!(fso.release_member(son, AgentId(22)).unwrap().len(), 1);
        assert!(fso.registry(h1).unwrap().is_available(AgentId(22)));
        assert_eq!(fso.dissolve_son(son).unwrap().len(), 1);
    }

    #[test]
    fn tree_from_spec_and_levels() {
        let spec = TreeSpec {
            nodes: vec![
                TreeSpec::node("h1", Some("regional")),
                TreeSpec::node("emergency", None),
                TreeSpec::node("regional", Some("emergency")),
                TreeSpec::node("residents", Some("emergency")),
            ],
        };
        let mut next = 100;
        let fso = Fso::from_spec(&spec, |_| {
            next += 1;
            AgentId(next)
        })
        .unwrap();
        fso.check_well_formed().unwrap();
        let root = fso.root();
        assert_eq!(fso.node(root).unwrap().name, "emergency");
        assert_eq!(fso.level(root), 3);
        assert_eq!(fso.level(fso.find("residents").unwrap()), 1);
        assert_eq!(fso.height(), 2);
        let dump = fso.dump();
        assert!(dump.starts_with("emergency members\tL3\n"));
        assert!(dump.contains("  regional members\tL2"));
    }

    #[test]
    fn bad_tree_specs() {
        let orphan = TreeSpec {
            nodes: vec![TreeSpec::node("a", None), TreeSpec::node("b", Some("zzz"))],
        };
        assert!(matches!(
            Fso::from_spec(&orphan, |_| AgentId(0)),
            Err(ProtocolError::BadTree(_))
        ));
        let two_roots = TreeSpec {
            nodes: vec![TreeSpec::node("a", None), TreeSpec::node("b", None)],
        };
        assert!(Fso::from_spec(&two_roots, |_| AgentId(0)).is_err());
        let dup = TreeSpec {
            nodes: vec![TreeSpec::node("a", None), TreeSpec::node("a", Some("a"))],
        };
        assert!(Fso::from_spec(&dup, |_| AgentId(0)).is_err());
    }

    #[test]
    fn cancel_withdraws_and_drops_pending() {
        let mut fso = Fso::new("c", AgentId(0));
        let c = fso.root();
        offer(&mut fso, c, 5, &[RoleKind::Walker], P0);
        let mut r = req(1, vec![RoleDemand::one(RoleKind::Walker)]);
        r.origin = AgentId(5);
        fso.publish_notification(
            c,
            Notification {
                origin: AgentId(5),
                kind: NotificationKind::ServiceRequest(r),
                tick: 1,
            },
        )
        .unwrap();
        let d = fso
            .publish_notification(
                c,
                Notification {
                    origin: AgentId(5),
                    kind: NotificationKind::Cancel,
                    tick: 2,
                },
            )
            .unwrap();
        assert_eq!(d, vec![RegistryChange::Removed { agent: AgentId(5) }]);
        let pending = &fso.node(c).unwrap().pending;
        assert!(pending.iter().all(|n| n.request().is_none()));
    }
}
