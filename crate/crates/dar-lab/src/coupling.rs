//! Joint evolution of two network states driven by shared randomness.
//!
//! Both chains see the same event stream: one coin decides between an
//! arrival attempt and a potential departure, an arrival gives both chains
//! the same endpoint pair and the same candidate tuple (each chain routes on
//! its own state, so the placed routes may differ), and a potential
//! departure draws one slot number shared by both chains. Slots are assigned
//! by first pairing calls that occupy the same route in both states, then
//! pairing the leftovers across routes, so a single slot removes a call from
//! both sides whenever possible. A chain whose call count has left the outer
//! region freezes and consumes no randomness while the other keeps moving
//! under the ordinary single-chain rules.
//!
//! Distances are l1 distances between occupancy vectors: a coordinate is a
//! route, i.e. an endpoint pair together with `direct` or a relay node. The
//! node-centred distance restricts to coordinates a given node can see (its
//! own links' calls, plus calls relayed through it).

use std::collections::HashSet;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::params::{pair_index, pair_nodes, Node};
use crate::routing::{route_call, sample_candidates, PolicyKind, RouteDecision};
use crate::sim::{draw_endpoints, jump_arrival_probability, replica_rng, StepKind};
use crate::state::{Call, CallId, Event, NetworkState, RouteTag};

#[derive(Debug, Error, PartialEq)]
pub enum CouplingError {
    #[error("the two states must share identical model parameters")]
    ParamsMismatch,
    #[error("node {0} is not a node of this network")]
    NodeOutOfRange(Node),
    #[error("initial states must lie in the middle region (call count <= 4 lambda N)")]
    OutsideStartRegion,
    #[error("the experiment needs at least one replica and one step")]
    EmptyExperiment,
    #[error("the network has no room for the requested extra calls")]
    NotEnoughSpareCapacity,
}

/// One occupancy coordinate: an endpoint pair index plus a route code
/// (0 for the direct link, `w + 1` for the route relayed through `w`).
type Coord = (usize, u32);

fn call_coord(call: &Call) -> Coord {
    let pair = pair_index(call.u, call.v);
    match call.route {
        RouteTag::Direct => (pair, 0),
        RouteTag::Via(w) => (pair, w + 1),
    }
}

fn decision_coord(u: Node, v: Node, decision: RouteDecision) -> Option<Coord> {
    match decision {
        RouteDecision::Direct => Some((pair_index(u, v), 0)),
        RouteDecision::Via { node, .. } => Some((pair_index(u, v), node + 1)),
        RouteDecision::Blocked => None,
    }
}

fn coord_value(state: &NetworkState, coord: Coord) -> u32 {
    let (u, v) = pair_nodes(coord.0);
    if coord.1 == 0 {
        state.direct_count(u, v)
    } else {
        state.alt_count(u, v, coord.1 - 1)
    }
}

/// l1 distance between the occupancy vectors of two states on the same
/// parameter set. Every route coordinate contributes the absolute count
/// difference.
pub fn l1_distance(x: &NetworkState, y: &NetworkState) -> Result<u64, CouplingError> {
    if x.params() != y.params() {
        return Err(CouplingError::ParamsMismatch);
    }
    let mut total = 0u64;
    for pair in 0..x.params().n_links() as usize {
        let (u, v) = pair_nodes(pair);
        total += u64::from(x.direct_count(u, v).abs_diff(y.direct_count(u, v)));
    }
    let mut seen = HashSet::new();
    for (&(pair, via), &cx) in x.alt_entries() {
        let (u, v) = pair_nodes(pair as usize);
        total += u64::from(cx.abs_diff(y.alt_count(u, v, via)));
        seen.insert((pair, via));
    }
    for (&(pair, via), &cy) in y.alt_entries() {
        if !seen.contains(&(pair, via)) {
            total += u64::from(cy);
        }
    }
    Ok(total)
}

/// l1 distance restricted to the coordinates visible from `v`: direct
/// counts on links at `v`, alternative calls whose endpoint pair contains
/// `v`, and alternative calls relayed through `v`.
pub fn node_distance(x: &NetworkState, y: &NetworkState, v: Node) -> Result<u64, CouplingError> {
    if x.params() != y.params() {
        return Err(CouplingError::ParamsMismatch);
    }
    let n = x.params().n;
    if v >= n {
        return Err(CouplingError::NodeOutOfRange(v));
    }
    let mut total = 0u64;
    for u in 0..n {
        if u != v {
            total += u64::from(x.direct_count(u, v).abs_diff(y.direct_count(u, v)));
        }
    }
    let touches_v = |pair: u32, via: Node| {
        let (a, b) = pair_nodes(pair as usize);
        a == v || b == v || via == v
    };
    let mut seen = HashSet::new();
    for (&(pair, via), &cx) in x.alt_entries() {
        if touches_v(pair, via) {
            let (a, b) = pair_nodes(pair as usize);
            total += u64::from(cx.abs_diff(y.alt_count(a, b, via)));
            seen.insert((pair, via));
        }
    }
    for (&(pair, via), &cy) in y.alt_entries() {
        if touches_v(pair, via) && !seen.contains(&(pair, via)) {
            total += u64::from(cy);
        }
    }
    Ok(total)
}

/// Content of one departure slot in the coupled chain.
#[derive(Debug, Clone, Copy)]
enum Slot {
    Both(CallId, CallId),
    OnlyX(CallId),
    OnlyY(CallId),
}

/// Assigns calls of both states to shared slot numbers. Calls occupying the
/// same route are paired greedily in registry order; remaining calls are
/// cross-paired in route order; whatever is left gets a slot of its own.
/// The assignment depends only on the two current states.
fn build_slots(x: &NetworkState, y: &NetworkState) -> Vec<Slot> {
    let mut xs: Vec<(Coord, CallId)> =
        x.calls().iter().map(|call| (call_coord(call), call.id)).collect();
    let mut ys: Vec<(Coord, CallId)> =
        y.calls().iter().map(|call| (call_coord(call), call.id)).collect();
    // A stable sort keeps registry order within each route group.
    xs.sort_by_key(|&(coord, _)| coord);
    ys.sort_by_key(|&(coord, _)| coord);

    let mut slots = Vec::with_capacity(x.num_calls().max(y.num_calls()));
    let mut spare_x = Vec::new();
    let mut spare_y = Vec::new();
    let (mut i, mut j) = (0usize, 0usize);
    while i < xs.len() || j < ys.len() {
        let coord = match (xs.get(i), ys.get(j)) {
            (Some(&(a, _)), Some(&(b, _))) => a.min(b),
            (Some(&(a, _)), None) => a,
            (None, Some(&(b, _))) => b,
            (None, None) => unreachable!(),
        };
        let xi = i;
        while i < xs.len() && xs[i].0 == coord {
            i += 1;
        }
        let yj = j;
        while j < ys.len() && ys[j].0 == coord {
            j += 1;
        }
        let matched = (i - xi).min(j - yj);
        for k in 0..matched {
            slots.push(Slot::Both(xs[xi + k].1, ys[yj + k].1));
        }
        spare_x.extend(xs[xi + matched..i].iter().map(|&(_, id)| id));
        spare_y.extend(ys[yj + matched..j].iter().map(|&(_, id)| id));
    }
    let crossed = spare_x.len().min(spare_y.len());
    for i in 0..crossed {
        slots.push(Slot::Both(spare_x[i], spare_y[i]));
    }
    slots.extend(spare_x[crossed..].iter().map(|&id| Slot::OnlyX(id)));
    slots.extend(spare_y[crossed..].iter().map(|&id| Slot::OnlyY(id)));
    slots
}

/// Tracks the l1 change caused by one step. A step touches at most two
/// coordinates; the tracker records their contribution before the events
/// are applied and replaces it afterwards.
#[derive(Default)]
struct DeltaTracker {
    coords: [Option<Coord>; 2],
    before: u64,
}

impl DeltaTracker {
    fn note(&mut self, coord: Option<Coord>) {
        let Some(coord) = coord else { return };
        if self.coords[0] == Some(coord) || self.coords[1] == Some(coord) {
            return;
        }
        if self.coords[0].is_none() {
            self.coords[0] = Some(coord);
        } else {
            debug_assert!(self.coords[1].is_none());
            self.coords[1] = Some(coord);
        }
    }

    fn contribution(&self, x: &NetworkState, y: &NetworkState) -> u64 {
        self.coords
            .iter()
            .flatten()
            .map(|&c| u64::from(coord_value(x, c).abs_diff(coord_value(y, c))))
            .sum()
    }

    fn capture(&mut self, x: &NetworkState, y: &NetworkState) {
        self.before = self.contribution(x, y);
    }

    fn settle(&self, x: &NetworkState, y: &NetworkState, l1: u64) -> u64 {
        l1 + self.contribution(x, y) - self.before
    }
}

/// Two chains on the same parameter set advancing under shared randomness.
/// The current l1 distance is maintained incrementally across steps.
#[derive(Debug, Clone)]
pub struct CoupledPair {
    x: NetworkState,
    y: NetworkState,
    policy: PolicyKind,
    l1: u64,
    candidates: Vec<Node>,
}

impl CoupledPair {
    pub fn new(x: NetworkState, y: NetworkState, policy: PolicyKind) -> Result<Self, CouplingError> {
        let l1 = l1_distance(&x, &y)?;
        Ok(CoupledPair { x, y, policy, l1, candidates: Vec::new() })
    }

    pub fn x(&self) -> &NetworkState {
        &self.x
    }

    pub fn y(&self) -> &NetworkState {
        &self.y
    }

    pub fn policy(&self) -> PolicyKind {
        self.policy
    }

    /// Current l1 distance between the two occupancy vectors.
    pub fn l1(&self) -> u64 {
        self.l1
    }

    /// Advances both chains by one jump-chain step. Chains outside the
    /// outer region freeze; a frozen chain consumes no randomness. When both
    /// chains move they share the coin, the endpoints, the candidate tuple,
    /// and the departure slot.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> (StepKind, StepKind) {
        match (self.x.in_s_tilde(), self.y.in_s_tilde()) {
            (false, false) => (StepKind::Frozen, StepKind::Frozen),
            (true, false) => {
                let (kind, tracker) =
                    Self::solo_step(&mut self.x, &self.y, self.policy, rng, &mut self.candidates);
                self.l1 = tracker.settle(&self.x, &self.y, self.l1);
                (kind, StepKind::Frozen)
            }
            (false, true) => {
                let (kind, tracker) =
                    Self::solo_step(&mut self.y, &self.x, self.policy, rng, &mut self.candidates);
                self.l1 = tracker.settle(&self.x, &self.y, self.l1);
                (StepKind::Frozen, kind)
            }
            (true, true) => self.joint_step(rng),
        }
    }

    /// Ordinary single-chain jump step with the same draw sequence as the
    /// plain simulator: coin, then either endpoints and candidates or one
    /// slot number. `other` is the frozen partner, read only to price the
    /// touched coordinate.
    fn solo_step<R: Rng + ?Sized>(
        state: &mut NetworkState,
        other: &NetworkState,
        policy: PolicyKind,
        rng: &mut R,
        candidates: &mut Vec<Node>,
    ) -> (StepKind, DeltaTracker) {
        let params = *state.params();
        let mut tracker = DeltaTracker::default();
        if rng.random::<f64>() < jump_arrival_probability(&params) {
            let (u, v) = draw_endpoints(rng, params.n);
            sample_candidates(rng, params.n, u, v, params.d, candidates);
            let decision = route_call(state, policy, u, v, candidates)
                .expect("drawn endpoints and candidates are always admissible");
            tracker.note(decision_coord(u, v, decision));
            tracker.capture(state, other);
            Self::apply_decision(state, u, v, decision);
            (StepKind::Arrival { u, v, decision }, tracker)
        } else {
            let slot = rng.random_range(0..params.jump_slots()) as usize;
            if slot < state.num_calls() {
                let call = state.calls()[slot];
                tracker.note(Some(call_coord(&call)));
                tracker.capture(state, other);
                state
                    .apply_event(Event::Departure { id: call.id })
                    .expect("slot holds a live call");
                (StepKind::Departure { id: call.id }, tracker)
            } else {
                (StepKind::EmptySlot, tracker)
            }
        }
    }

    fn apply_decision(state: &mut NetworkState, u: Node, v: Node, decision: RouteDecision) {
        let event = match decision {
            RouteDecision::Direct => Some(Event::DirectArrival { u, v }),
            RouteDecision::Via { node, .. } => Some(Event::AltArrival { u, v, via: node }),
            RouteDecision::Blocked => None,
        };
        if let Some(event) = event {
            state.apply_event(event).expect("the routing decision respects capacities");
        }
    }

    fn joint_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> (StepKind, StepKind) {
        let params = *self.x.params();
        if rng.random::<f64>() < jump_arrival_probability(&params) {
            let (u, v) = draw_endpoints(rng, params.n);
            sample_candidates(rng, params.n, u, v, params.d, &mut self.candidates);
            let dx = route_call(&self.x, self.policy, u, v, &self.candidates)
                .expect("drawn endpoints and candidates are always admissible");
            let dy = route_call(&self.y, self.policy, u, v, &self.candidates)
                .expect("drawn endpoints and candidates are always admissible");
            let mut tracker = DeltaTracker::default();
            tracker.note(decision_coord(u, v, dx));
            tracker.note(decision_coord(u, v, dy));
            tracker.capture(&self.x, &self.y);
            Self::apply_decision(&mut self.x, u, v, dx);
            Self::apply_decision(&mut self.y, u, v, dy);
            self.l1 = tracker.settle(&self.x, &self.y, self.l1);
            (StepKind::Arrival { u, v, decision: dx }, StepKind::Arrival { u, v, decision: dy })
        } else {
            let slot = rng.random_range(0..params.jump_slots()) as usize;
            // Every call of either chain gets exactly one slot, so the list
            // is only needed when the draw lands inside the registries.
            if slot >= self.x.num_calls().max(self.y.num_calls()) {
                return (StepKind::EmptySlot, StepKind::EmptySlot);
            }
            let slots = build_slots(&self.x, &self.y);
            debug_assert_eq!(slots.len(), self.x.num_calls().max(self.y.num_calls()));
            let mut tracker = DeltaTracker::default();
            let (kx, ky) = match slots[slot] {
                Slot::Both(ix, iy) => {
                    tracker.note(self.x.call_by_id(ix).map(call_coord));
                    tracker.note(self.y.call_by_id(iy).map(call_coord));
                    tracker.capture(&self.x, &self.y);
                    self.x.apply_event(Event::Departure { id: ix }).expect("slot holds a live call");
                    self.y.apply_event(Event::Departure { id: iy }).expect("slot holds a live call");
                    (StepKind::Departure { id: ix }, StepKind::Departure { id: iy })
                }
                Slot::OnlyX(ix) => {
                    tracker.note(self.x.call_by_id(ix).map(call_coord));
                    tracker.capture(&self.x, &self.y);
                    self.x.apply_event(Event::Departure { id: ix }).expect("slot holds a live call");
                    (StepKind::Departure { id: ix }, StepKind::EmptySlot)
                }
                Slot::OnlyY(iy) => {
                    tracker.note(self.y.call_by_id(iy).map(call_coord));
                    tracker.capture(&self.x, &self.y);
                    self.y.apply_event(Event::Departure { id: iy }).expect("slot holds a live call");
                    (StepKind::EmptySlot, StepKind::Departure { id: iy })
                }
            };
            self.l1 = tracker.settle(&self.x, &self.y, self.l1);
            (kx, ky)
        }
    }
}

/// Returns a copy of `state` with `extra` additional direct calls placed on
/// the first links (in canonical pair order) that still have spare capacity.
/// The copy is at occupancy-vector l1 distance exactly `extra` from the
/// original.
pub fn perturb_with_direct_calls(
    state: &NetworkState,
    extra: u64,
) -> Result<NetworkState, CouplingError> {
    let mut out = state.clone();
    let capacity = state.params().capacity;
    let mut left = extra;
    for pair in 0..state.params().n_links() as usize {
        while left > 0 && out.load_at(pair) < capacity {
            let (u, v) = pair_nodes(pair);
            out.apply_event(Event::DirectArrival { u, v }).expect("the link has spare capacity");
            left -= 1;
        }
        if left == 0 {
            break;
        }
    }
    if left > 0 {
        return Err(CouplingError::NotEnoughSpareCapacity);
    }
    Ok(out)
}

/// Per-step aggregate of the growth experiment.
#[derive(Debug, Clone, Copy)]
pub struct GrowthStep {
    pub step: u64,
    /// Mean l1 distance after this step.
    pub mean_l1: f64,
    pub se_l1: f64,
    /// Ratio of this step's mean distance to the previous one.
    pub growth_factor: f64,
    /// One-step expansion bound 1 + 12 d / N.
    pub bound: f64,
    /// Mean of distance - bound * previous distance; nonpositive in
    /// expectation when the bound holds.
    pub excess: f64,
    pub excess_se: f64,
}

#[derive(Debug, Clone)]
pub struct GrowthReport {
    pub steps: Vec<GrowthStep>,
    pub replicas: u64,
    pub initial_l1: u64,
    pub bound: f64,
}

#[derive(Clone)]
struct GrowthAcc {
    sum: Vec<u128>,
    sumsq: Vec<u128>,
    prod: Vec<u128>,
}

impl GrowthAcc {
    fn new(steps: usize) -> Self {
        GrowthAcc { sum: vec![0; steps], sumsq: vec![0; steps], prod: vec![0; steps] }
    }

    fn merge(mut self, other: GrowthAcc) -> GrowthAcc {
        for i in 0..self.sum.len() {
            self.sum[i] += other.sum[i];
            self.sumsq[i] += other.sumsq[i];
            self.prod[i] += other.prod[i];
        }
        self
    }
}

/// Runs independent replicas of the coupled chain and aggregates the l1
/// distance path. Replica r uses RNG stream r of the seed; sums are integer
/// valued, so the aggregation does not depend on thread scheduling.
pub fn coupling_growth_experiment(
    policy: PolicyKind,
    seed: u64,
    x0: &NetworkState,
    y0: &NetworkState,
    steps: usize,
    replicas: u64,
) -> Result<GrowthReport, CouplingError> {
    if x0.params() != y0.params() {
        return Err(CouplingError::ParamsMismatch);
    }
    if !x0.region().in_s0 || !y0.region().in_s0 {
        return Err(CouplingError::OutsideStartRegion);
    }
    if steps == 0 || replicas == 0 {
        return Err(CouplingError::EmptyExperiment);
    }
    let params = *x0.params();
    let initial_l1 = l1_distance(x0, y0)?;
    let bound = 1.0 + 12.0 * params.d as f64 / params.n_links() as f64;

    let acc = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(seed, r);
            let mut pair = CoupledPair::new(x0.clone(), y0.clone(), policy)
                .expect("parameters were checked above");
            let mut local = GrowthAcc::new(steps);
            let mut prev = pair.l1();
            for t in 0..steps {
                pair.step(&mut rng);
                let cur = pair.l1();
                local.sum[t] += u128::from(cur);
                local.sumsq[t] += u128::from(cur) * u128::from(cur);
                local.prod[t] += u128::from(cur) * u128::from(prev);
                prev = cur;
            }
            local
        })
        .reduce(|| GrowthAcc::new(steps), GrowthAcc::merge);

    let r = replicas as f64;
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let mean = acc.sum[t] as f64 / r;
        let var = (acc.sumsq[t] as f64 / r - mean * mean).max(0.0);
        let se = (var / r).sqrt();
        let (prev_mean, prev_var) = if t == 0 {
            (initial_l1 as f64, 0.0)
        } else {
            let pm = acc.sum[t - 1] as f64 / r;
            (pm, (acc.sumsq[t - 1] as f64 / r - pm * pm).max(0.0))
        };
        let cov = acc.prod[t] as f64 / r - mean * prev_mean;
        let excess = mean - bound * prev_mean;
        let excess_var = (var + bound * bound * prev_var - 2.0 * bound * cov).max(0.0);
        out.push(GrowthStep {
            step: (t + 1) as u64,
            mean_l1: mean,
            se_l1: se,
            growth_factor: if prev_mean > 0.0 { mean / prev_mean } else { f64::NAN },
            bound,
            excess,
            excess_se: (excess_var / r).sqrt(),
        });
    }
    Ok(GrowthReport { steps: out, replicas, initial_l1, bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModelParams;
    use crate::sim::{generate_initial_state, step_jump_chain};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn params(n: u32, capacity: u32, d: u32, lambda: f64) -> ModelParams {
        ModelParams::new(n, capacity, d, lambda).unwrap()
    }

    fn allocation(p: ModelParams, c0: f64, stream: u64) -> NetworkState {
        let mut rng = replica_rng(0xC0FFEE, stream);
        generate_initial_state(&mut rng, p, c0).unwrap().state
    }

    #[test]
    fn distance_hand_values() {
        let p = params(5, 2, 1, 1.0);
        let empty = NetworkState::new(p);
        let mut direct = empty.clone();
        direct.apply_event(Event::DirectArrival { u: 0, v: 1 }).unwrap();
        let mut alt = empty.clone();
        alt.apply_event(Event::AltArrival { u: 1, v: 2, via: 3 }).unwrap();

        assert_eq!(l1_distance(&empty, &empty).unwrap(), 0);
        assert_eq!(l1_distance(&empty, &direct).unwrap(), 1);
        assert_eq!(l1_distance(&direct, &empty).unwrap(), 1);
        assert_eq!(l1_distance(&empty, &alt).unwrap(), 1);
        assert_eq!(l1_distance(&direct, &alt).unwrap(), 2);

        // A direct call is seen exactly by its two endpoints.
        for v in 0..5 {
            let expected = u64::from(v <= 1);
            assert_eq!(node_distance(&empty, &direct, v).unwrap(), expected, "node {v}");
        }
        // An alternative call is seen by both endpoints and the relay node.
        for v in 0..5 {
            let expected = u64::from((1..=3).contains(&v));
            assert_eq!(node_distance(&empty, &alt, v).unwrap(), expected, "node {v}");
        }
    }

    #[test]
    fn distance_rejects_mismatched_parameters() {
        let a = NetworkState::new(params(5, 2, 1, 1.0));
        let b = NetworkState::new(params(6, 2, 1, 1.0));
        assert_eq!(l1_distance(&a, &b), Err(CouplingError::ParamsMismatch));
        assert_eq!(node_distance(&a, &b, 0), Err(CouplingError::ParamsMismatch));
        assert_eq!(node_distance(&a, &a, 5), Err(CouplingError::NodeOutOfRange(5)));
    }

    #[test]
    fn identical_chains_stay_identical() {
        let p = params(8, 3, 2, 1.0);
        let x0 = allocation(p, 0.5, 1);
        let mut pair = CoupledPair::new(x0.clone(), x0, PolicyKind::Bdar).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut departures = 0u32;
        for step in 0..2_000 {
            let (kx, ky) = pair.step(&mut rng);
            assert_eq!(pair.l1(), 0, "diverged at step {step}");
            match (kx, ky) {
                (StepKind::Departure { .. }, StepKind::Departure { .. }) => departures += 1,
                (StepKind::Arrival { decision: a, .. }, StepKind::Arrival { decision: b, .. }) => {
                    assert_eq!(a, b, "equal states must route identically")
                }
                (StepKind::EmptySlot, StepKind::EmptySlot) => {}
                other => panic!("equal chains took different step kinds: {other:?}"),
            }
        }
        assert!(departures > 100, "the run should exercise paired departures");
        assert_eq!(l1_distance(pair.x(), pair.y()).unwrap(), 0);
    }

    #[test]
    fn incremental_distance_matches_recompute() {
        let p = params(7, 2, 2, 1.0);
        let x0 = allocation(p, 0.6, 2);
        let y0 = allocation(p, 0.4, 3);
        let mut pair = CoupledPair::new(x0, y0, PolicyKind::Bdar).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        for step in 0..1_500 {
            pair.step(&mut rng);
            if step % 25 == 0 {
                assert_eq!(
                    pair.l1(),
                    l1_distance(pair.x(), pair.y()).unwrap(),
                    "incremental distance drifted at step {step}"
                );
            }
        }
        assert_eq!(pair.l1(), l1_distance(pair.x(), pair.y()).unwrap());
    }

    #[test]
    fn step_changes_respect_the_departure_and_arrival_budgets() {
        let p = params(7, 2, 1, 1.0);
        let x0 = allocation(p, 0.7, 4);
        let y0 = allocation(p, 0.3, 5);
        let mut pair = CoupledPair::new(x0, y0, PolicyKind::Bdar).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let (mut departures, mut arrivals) = (0u32, 0u32);
        for _ in 0..3_000 {
            let before = pair.l1() as i64;
            let kinds = pair.step(&mut rng);
            let after = pair.l1() as i64;
            match kinds {
                (StepKind::Arrival { .. }, StepKind::Arrival { .. }) => {
                    arrivals += 1;
                    assert!(after - before <= 2, "arrival added more than two: {before} -> {after}");
                }
                (StepKind::Frozen, _) | (_, StepKind::Frozen) => {
                    panic!("this light-traffic run must never freeze")
                }
                _ => {
                    // A shared departure slot never increases the distance and
                    // removes at most one call per chain.
                    departures += 1;
                    assert!((-2..=0).contains(&(after - before)), "{before} -> {after}");
                }
            }
        }
        assert!(departures > 500 && arrivals > 100);
    }

    #[test]
    fn frozen_chains_consume_no_randomness() {
        // Capacity 7 lets 19 calls sit on 3 links while the slot budget
        // floor(6 lambda N) = 18 is already exceeded.
        let p = params(3, 7, 1, 1.0);
        let mut heavy = NetworkState::new(p);
        for i in 0..19 {
            let (u, v) = pair_nodes((i % 3) as usize);
            heavy.apply_event(Event::DirectArrival { u, v }).unwrap();
        }
        assert!(!heavy.in_s_tilde());

        let mut pair = CoupledPair::new(heavy.clone(), heavy.clone(), PolicyKind::Bdar).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let before = rng.get_word_pos();
        assert_eq!(pair.step(&mut rng), (StepKind::Frozen, StepKind::Frozen));
        assert_eq!(rng.get_word_pos(), before, "a fully frozen pair must not draw");

        // One live side keeps moving with ordinary jump-chain draws.
        let mut pair = CoupledPair::new(heavy.clone(), NetworkState::new(p), PolicyKind::Bdar).unwrap();
        let mut moved = false;
        for _ in 0..200 {
            let (kx, ky) = pair.step(&mut rng);
            assert_eq!(kx, StepKind::Frozen);
            moved |= matches!(ky, StepKind::Arrival { .. });
            assert_eq!(pair.x().norm1(), heavy.norm1(), "the frozen side must not change");
            assert_eq!(pair.l1(), l1_distance(pair.x(), pair.y()).unwrap());
        }
        assert!(moved, "the live side should accept arrivals");
    }

    #[test]
    fn coupled_marginal_matches_the_single_chain() {
        // The slot relabeling inside the coupled departure step must leave
        // the per-chain law untouched; compare mean call counts after a
        // fixed number of steps against the plain simulator.
        let p = params(5, 2, 1, 1.0);
        let y0 = allocation(p, 0.8, 6);
        let (replicas, steps) = (600u64, 200usize);

        let mut coupled_sum = 0u64;
        let mut coupled_sumsq = 0u64;
        let mut single_sum = 0u64;
        let mut single_sumsq = 0u64;
        for r in 0..replicas {
            let mut rng = replica_rng(77, r);
            let mut pair =
                CoupledPair::new(NetworkState::new(p), y0.clone(), PolicyKind::Bdar).unwrap();
            for _ in 0..steps {
                pair.step(&mut rng);
            }
            let m = pair.x().norm1();
            coupled_sum += m;
            coupled_sumsq += m * m;

            let mut rng = replica_rng(78, r);
            let mut state = NetworkState::new(p);
            for _ in 0..steps {
                step_jump_chain(&mut state, PolicyKind::Bdar, &mut rng);
            }
            let m = state.norm1();
            single_sum += m;
            single_sumsq += m * m;
        }
        let rf = replicas as f64;
        let mean_c = coupled_sum as f64 / rf;
        let mean_s = single_sum as f64 / rf;
        let var_c = (coupled_sumsq as f64 / rf - mean_c * mean_c).max(0.0);
        let var_s = (single_sumsq as f64 / rf - mean_s * mean_s).max(0.0);
        let se = ((var_c + var_s) / rf).sqrt();
        assert!(
            (mean_c - mean_s).abs() <= 5.0 * se.max(1e-9),
            "coupled X marginal drifted: {mean_c} vs {mean_s} (se {se})"
        );
    }

    #[test]
    fn node_distance_bounds_link_load_differences() {
        // Twice the node-centred distance dominates the total load
        // discrepancy over the links at the node.
        let p = params(7, 3, 2, 1.0);
        for stream in 0..10 {
            let x = allocation(p, 0.8, 100 + stream);
            let y = allocation(p, 0.5, 200 + stream);
            for v in 0..p.n {
                let lhs = 2 * node_distance(&x, &y, v).unwrap();
                let mut rhs = 0u64;
                for w in 0..p.n {
                    if w != v {
                        rhs += u64::from(x.link_load(v, w).abs_diff(y.link_load(v, w)));
                    }
                }
                assert!(lhs >= rhs, "stream {stream}, node {v}: {lhs} < {rhs}");
            }
        }
    }

    #[test]
    fn perturbation_shifts_the_distance_exactly() {
        let p = params(6, 3, 1, 1.0);
        let x = allocation(p, 0.5, 7);
        let y = perturb_with_direct_calls(&x, 9).unwrap();
        assert_eq!(l1_distance(&x, &y).unwrap(), 9);
        assert_eq!(y.norm1(), x.norm1() + 9);

        let full = perturb_with_direct_calls(&NetworkState::new(p), 3 * 15).unwrap();
        assert!(matches!(
            perturb_with_direct_calls(&full, 1),
            Err(CouplingError::NotEnoughSpareCapacity)
        ));
    }

    #[test]
    fn growth_experiment_is_flat_for_equal_starts_and_deterministic() {
        let p = params(6, 2, 2, 1.0);
        let x0 = allocation(p, 0.5, 8);
        let a = coupling_growth_experiment(PolicyKind::Bdar, 5, &x0, &x0.clone(), 40, 32).unwrap();
        assert_eq!(a.initial_l1, 0);
        for step in &a.steps {
            assert_eq!(step.mean_l1, 0.0);
            assert_eq!(step.se_l1, 0.0);
            assert_eq!(step.excess, 0.0);
        }
        let b = coupling_growth_experiment(PolicyKind::Bdar, 5, &x0, &x0.clone(), 40, 32).unwrap();
        for (sa, sb) in a.steps.iter().zip(&b.steps) {
            assert_eq!(sa.mean_l1.to_bits(), sb.mean_l1.to_bits());
            assert_eq!(sa.excess_se.to_bits(), sb.excess_se.to_bits());
        }
    }

    #[test]
    fn growth_experiment_tracks_the_expansion_bound() {
        let p = params(12, 3, 2, 1.0);
        let x0 = allocation(p, 0.3, 9);
        let y0 = perturb_with_direct_calls(&x0, 4).unwrap();
        let report =
            coupling_growth_experiment(PolicyKind::Bdar, 21, &x0, &y0, 60, 2_000).unwrap();
        assert_eq!(report.initial_l1, 4);
        assert!((report.bound - (1.0 + 24.0 / 66.0)).abs() < 1e-12);
        for step in &report.steps {
            assert!(
                step.excess <= 3.0 * step.excess_se.max(1e-12),
                "step {}: excess {} exceeds 3 se {}",
                step.step,
                step.excess,
                step.excess_se
            );
        }
        assert!(report.steps[0].mean_l1 > 0.0);
    }

    #[test]
    fn growth_experiment_validates_inputs() {
        // With lambda = 1/4 the middle region tops out at 4 lambda N = 15
        // calls, well below the 2 * 15 the capacities admit.
        let p = params(6, 2, 1, 0.25);
        let x = NetworkState::new(p);
        let heavy = perturb_with_direct_calls(&x, 2 * 15).unwrap();
        assert!(!heavy.region().in_s0);
        assert!(matches!(
            coupling_growth_experiment(PolicyKind::Bdar, 1, &heavy, &x, 5, 5),
            Err(CouplingError::OutsideStartRegion)
        ));
        assert!(matches!(
            coupling_growth_experiment(PolicyKind::Bdar, 1, &x, &x, 0, 5),
            Err(CouplingError::EmptyExperiment)
        ));
    }
}
