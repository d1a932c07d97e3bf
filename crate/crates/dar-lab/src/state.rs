//! Exact bookkeeping for the set of calls in progress.
//!
//! The state is the vector of per-route call counts: x(e, 0) direct calls on
//! link e, and x(e, w) calls between the endpoints of e carried on the
//! two-link route through w. Link loads are maintained incrementally and obey
//!
//!   load({u,v}) = x({u,v}, 0) + sum_w [ x({u,w}, v) + x({v,w}, u) ],
//!
//! i.e. a link carries its own direct calls plus every alternative call that
//! uses it as one leg. The l1 norm of the state counts each call once
//! (an alternative call occupies two links but owns one coordinate).
//!
//! Calls live in a registry with O(1) removal by swap-and-pop, so a uniform
//! random call can be drawn by index. Snapshots serialize the call list and
//! reload by replaying arrivals, which makes capacity-violating snapshots
//! unrepresentable.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::params::{pair_index, pair_nodes, ModelParams, Node};

/// Stable identifier of a call in progress.
pub type CallId = u64;

/// How an admitted call is carried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RouteTag {
    Direct,
    Via(Node),
}

/// One call in progress; endpoints are stored with u < v.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Call {
    pub id: CallId,
    pub u: Node,
    pub v: Node,
    pub route: RouteTag,
}

/// State transitions. Arrivals name the route explicitly; the routing policy
/// decides which arrival event to emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    DirectArrival { u: Node, v: Node },
    AltArrival { u: Node, v: Node, via: Node },
    Departure { id: CallId },
}

/// What [`NetworkState::apply_event`] did, with enough detail to undo it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Applied {
    Arrival(CallId),
    Departure(Call),
}

#[derive(Debug, Error, PartialEq)]
pub enum StateError {
    #[error("node {node} out of range for n={n}")]
    NodeOutOfRange { node: Node, n: u32 },
    #[error("call endpoints must differ, got {0}")]
    SameEndpoints(Node),
    #[error("intermediate node {0} coincides with an endpoint")]
    ViaOnEndpoint(Node),
    #[error("link {{{u},{v}}} is at capacity {load}")]
    LinkFull { u: Node, v: Node, load: u32 },
    #[error("no call with id {0}")]
    UnknownCall(CallId),
    #[error("state invariant violated: {0}")]
    Invariant(String),
}

/// Membership in the nested bounded-occupancy regions used by the discrete
/// chains: ||x||_1 <= 2 lambda N, <= 4 lambda N, <= 6 lambda N.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionFlags {
    pub in_s1: bool,
    pub in_s0: bool,
    pub in_s_tilde: bool,
}

#[derive(Debug, Clone)]
pub struct NetworkState {
    params: ModelParams,
    /// Direct-call count per link index.
    direct: Vec<u32>,
    /// Total load per link index (direct plus alternative legs).
    link_load: Vec<u32>,
    /// Alternative-call counts keyed by (endpoint pair index, via node).
    /// Entries are removed when they reach zero.
    alt: HashMap<(u32, Node), u32>,
    calls: Vec<Call>,
    call_pos: HashMap<CallId, usize>,
    next_id: CallId,
}

impl NetworkState {
    pub fn new(params: ModelParams) -> Self {
        let n_links = params.n_links() as usize;
        Self {
            params,
            direct: vec![0; n_links],
            link_load: vec![0; n_links],
            alt: HashMap::new(),
            calls: Vec::new(),
            call_pos: HashMap::new(),
            next_id: 0,
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn link_load(&self, u: Node, v: Node) -> u32 {
        self.link_load[pair_index(u, v)]
    }

    /// Load of the link at a canonical pair index.
    pub fn load_at(&self, pair: usize) -> u32 {
        self.link_load[pair]
    }

    /// All link loads, indexed by canonical pair index.
    pub fn loads(&self) -> &[u32] {
        &self.link_load
    }

    pub fn direct_count(&self, u: Node, v: Node) -> u32 {
        self.direct[pair_index(u, v)]
    }

    pub fn alt_count(&self, u: Node, v: Node, via: Node) -> u32 {
        *self.alt.get(&(pair_index(u, v) as u32, via)).unwrap_or(&0)
    }

    /// Alternative-call coordinates: ((endpoint pair index, via node), count).
    /// Iteration order is unspecified; use only for order-insensitive sums.
    pub fn alt_entries(&self) -> impl Iterator<Item = (&(u32, Node), &u32)> {
        self.alt.iter()
    }

    /// Calls in registry order. The order is a deterministic function of the
    /// event history (push on arrival, swap-and-pop on departure).
    pub fn calls(&self) -> &[Call] {
        &self.calls
    }

    pub fn num_calls(&self) -> usize {
        self.calls.len()
    }

    pub fn call_by_id(&self, id: CallId) -> Option<&Call> {
        self.call_pos.get(&id).map(|&i| &self.calls[i])
    }

    /// The l1 norm of the state: every call, direct or alternative, counts
    /// once.
    pub fn norm1(&self) -> u64 {
        self.calls.len() as u64
    }

    pub fn region(&self) -> RegionFlags {
        let m = self.norm1() as f64;
        let a = self.params.arrival_rate();
        RegionFlags {
            in_s1: m <= 2.0 * a,
            in_s0: m <= 4.0 * a,
            in_s_tilde: m <= 6.0 * a,
        }
    }

    pub fn in_s_tilde(&self) -> bool {
        self.region().in_s_tilde
    }

    fn check_node(&self, node: Node) -> Result<(), StateError> {
        if node >= self.params.n {
            Err(StateError::NodeOutOfRange { node, n: self.params.n })
        } else {
            Ok(())
        }
    }

    fn push_call(&mut self, u: Node, v: Node, route: RouteTag) -> CallId {
        let id = self.next_id;
        self.next_id += 1;
        let (u, v) = if u < v { (u, v) } else { (v, u) };
        self.call_pos.insert(id, self.calls.len());
        self.calls.push(Call { id, u, v, route });
        id
    }

    fn remove_call(&mut self, id: CallId) -> Result<Call, StateError> {
        let pos = *self.call_pos.get(&id).ok_or(StateError::UnknownCall(id))?;
        let call = self.calls.swap_remove(pos);
        self.call_pos.remove(&id);
        if pos < self.calls.len() {
            self.call_pos.insert(self.calls[pos].id, pos);
        }
        Ok(call)
    }

    /// Applies one transition, validating its preconditions first. Arrivals
    /// return the new call's id; departures return the removed call.
    pub fn apply_event(&mut self, event: Event) -> Result<Applied, StateError> {
        let applied = match event {
            Event::DirectArrival { u, v } => {
                self.check_node(u)?;
                self.check_node(v)?;
                if u == v {
                    return Err(StateError::SameEndpoints(u));
                }
                let p = pair_index(u, v);
                if self.link_load[p] >= self.params.capacity {
                    return Err(StateError::LinkFull { u: u.min(v), v: u.max(v), load: self.link_load[p] });
                }
                self.direct[p] += 1;
                self.link_load[p] += 1;
                Applied::Arrival(self.push_call(u, v, RouteTag::Direct))
            }
            Event::AltArrival { u, v, via } => {
                self.check_node(u)?;
                self.check_node(v)?;
                self.check_node(via)?;
                if u == v {
                    return Err(StateError::SameEndpoints(u));
                }
                if via == u || via == v {
                    return Err(StateError::ViaOnEndpoint(via));
                }
                let leg_u = pair_index(u, via);
                let leg_v = pair_index(v, via);
                if self.link_load[leg_u] >= self.params.capacity {
                    return Err(StateError::LinkFull { u: u.min(via), v: u.max(via), load: self.link_load[leg_u] });
                }
                if self.link_load[leg_v] >= self.params.capacity {
                    return Err(StateError::LinkFull { u: v.min(via), v: v.max(via), load: self.link_load[leg_v] });
                }
                let p = pair_index(u, v) as u32;
                *self.alt.entry((p, via)).or_insert(0) += 1;
                self.link_load[leg_u] += 1;
                self.link_load[leg_v] += 1;
                Applied::Arrival(self.push_call(u, v, RouteTag::Via(via)))
            }
            Event::Departure { id } => {
                let call = self.remove_call(id)?;
                match call.route {
                    RouteTag::Direct => {
                        let p = pair_index(call.u, call.v);
                        self.direct[p] -= 1;
                        self.link_load[p] -= 1;
                    }
                    RouteTag::Via(w) => {
                        let key = (pair_index(call.u, call.v) as u32, w);
                        let count = self.alt.get_mut(&key).expect("alt entry for live call");
                        *count -= 1;
                        if *count == 0 {
                            self.alt.remove(&key);
                        }
                        self.link_load[pair_index(call.u, w)] -= 1;
                        self.link_load[pair_index(call.v, w)] -= 1;
                    }
                }
                Applied::Departure(call)
            }
        };
        #[cfg(debug_assertions)]
        self.debug_check();
        Ok(applied)
    }

    /// Number of links at node v holding exactly k calls, for k = 0..=capacity.
    /// The profile sums to n-1.
    pub fn f_profile(&self, v: Node) -> Vec<u32> {
        let mut profile = vec![0u32; self.params.capacity as usize + 1];
        for w in 0..self.params.n {
            if w != v {
                profile[self.link_load[pair_index(v, w)] as usize] += 1;
            }
        }
        profile
    }

    pub fn f_count(&self, v: Node, k: u32) -> u32 {
        debug_assert!(k <= self.params.capacity);
        let mut count = 0;
        for w in 0..self.params.n {
            if w != v && self.link_load[pair_index(v, w)] == k {
                count += 1;
            }
        }
        count
    }

    /// Full consistency check: the registry, the per-route counts, the link
    /// loads and the load identity must all agree, and no link may exceed
    /// capacity. O(n_links + calls).
    pub fn validate(&self) -> Result<(), StateError> {
        let fail = |msg: String| Err(StateError::Invariant(msg));
        if self.call_pos.len() != self.calls.len() {
            return fail("call index size mismatch".into());
        }
        for (pos, call) in self.calls.iter().enumerate() {
            if self.call_pos.get(&call.id) != Some(&pos) {
                return fail(format!("registry position of call {} is stale", call.id));
            }
            if call.u >= call.v || call.v >= self.params.n {
                return fail(format!("call {} has malformed endpoints", call.id));
            }
            if let RouteTag::Via(w) = call.route {
                if w == call.u || w == call.v || w >= self.params.n {
                    return fail(format!("call {} has malformed via node", call.id));
                }
            }
        }
        // Rebuild the per-route counts from the registry.
        let mut direct_re = vec![0u32; self.direct.len()];
        let mut alt_re: HashMap<(u32, Node), u32> = HashMap::new();
        for call in &self.calls {
            match call.route {
                RouteTag::Direct => direct_re[pair_index(call.u, call.v)] += 1,
                RouteTag::Via(w) => {
                    *alt_re.entry((pair_index(call.u, call.v) as u32, w)).or_insert(0) += 1
                }
            }
        }
        if direct_re != self.direct {
            return fail("direct counts disagree with the call registry".into());
        }
        if alt_re != self.alt {
            return fail("alternative counts disagree with the call registry".into());
        }
        // Load identity: each alternative call loads both of its legs.
        let mut load_re = self.direct.clone();
        for (&(p, w), &count) in &self.alt {
            if count == 0 {
                return fail("alt map holds a zero-count entry".into());
            }
            let (u, v) = pair_nodes(p as usize);
            load_re[pair_index(u, w)] += count;
            load_re[pair_index(v, w)] += count;
        }
        if load_re != self.link_load {
            return fail("link loads disagree with the load identity".into());
        }
        if let Some(p) = self.link_load.iter().position(|&l| l > self.params.capacity) {
            let (u, v) = pair_nodes(p);
            return fail(format!("link {{{u},{v}}} exceeds capacity"));
        }
        Ok(())
    }

    /// In debug builds the full invariant check runs after every event at
    /// unit-test scale; larger states rely on the per-event precondition
    /// checks plus explicit validate() calls at snapshots.
    #[cfg(debug_assertions)]
    fn debug_check(&self) {
        if self.params.n <= 32 {
            if let Err(e) = self.validate() {
                panic!("{e}");
            }
        }
    }

    /// Writes the state as a header line followed by one line per call, in
    /// registry order.
    pub fn write_snapshot<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(
            out,
            "n={} capacity={} d={} lambda={}",
            self.params.n, self.params.capacity, self.params.d, self.params.lambda
        )?;
        for call in &self.calls {
            match call.route {
                RouteTag::Direct => writeln!(out, "{} {} direct", call.u, call.v)?,
                RouteTag::Via(w) => writeln!(out, "{} {} via {}", call.u, call.v, w)?,
            }
        }
        Ok(())
    }

    /// Reads a snapshot by replaying every listed call as an arrival, so the
    /// result satisfies all state invariants or loading fails.
    pub fn read_snapshot<R: BufRead>(input: R) -> Result<Self, SnapshotError> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| SnapshotError::parse("empty snapshot"))??;
        let mut n = None;
        let mut capacity = None;
        let mut d = None;
        let mut lambda = None;
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| SnapshotError::parse(format!("bad header field {field:?}")))?;
            match key {
                "n" => n = Some(value.parse().map_err(|_| SnapshotError::parse("bad n"))?),
                "capacity" => {
                    capacity = Some(value.parse().map_err(|_| SnapshotError::parse("bad capacity"))?)
                }
                "d" => d = Some(value.parse().map_err(|_| SnapshotError::parse("bad d"))?),
                "lambda" => {
                    lambda = Some(value.parse().map_err(|_| SnapshotError::parse("bad lambda"))?)
                }
                other => return Err(SnapshotError::parse(format!("unknown header key {other:?}"))),
            }
        }
        let missing = || SnapshotError::parse("incomplete header");
        let params = ModelParams::new(
            n.ok_or_else(missing)?,
            capacity.ok_or_else(missing)?,
            d.ok_or_else(missing)?,
            lambda.ok_or_else(missing)?,
        )?;
        let mut state = NetworkState::new(params);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || SnapshotError::parse(format!("bad call line {line:?}"));
            let event = match parts.as_slice() {
                [u, v, "direct"] => Event::DirectArrival {
                    u: u.parse().map_err(|_| bad())?,
                    v: v.parse().map_err(|_| bad())?,
                },
                [u, v, "via", w] => Event::AltArrival {
                    u: u.parse().map_err(|_| bad())?,
                    v: v.parse().map_err(|_| bad())?,
                    via: w.parse().map_err(|_| bad())?,
                },
                _ => return Err(bad()),
            };
            state.apply_event(event)?;
        }
        Ok(state)
    }
}

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("snapshot io error: {0}")]
    Io(#[from] io::Error),
    #[error("snapshot parse error: {0}")]
    Parse(String),
    #[error("snapshot rejected: {0}")]
    State(#[from] StateError),
    #[error("snapshot rejected: {0}")]
    Params(#[from] crate::params::ParamError),
}

impl SnapshotError {
    fn parse(msg: impl Into<String>) -> Self {
        SnapshotError::Parse(msg.into())
    }
}
