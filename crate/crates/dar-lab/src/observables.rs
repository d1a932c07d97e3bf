//! Diagnostic functionals of a network state.
//!
//! Three statistics measure how far a state is from the product-form,
//! exchangeable regime that the load-profile approximation relies on:
//!
//! * phi1: for node pairs (u,v), the gap between the empirical joint
//!   distribution of (load(u,w), load(v,w)) over third nodes w and the
//!   product of its marginals.
//! * phi2: the largest difference between the load profiles of two nodes.
//! * phi3: the largest per-pair concentration of rerouted calls.
//!
//! All three are maxima of integer counts scaled by powers of n-2, so they
//! are computed in exact integer arithmetic and divided once at the end.
//!
//! The module also evaluates the exact expected instantaneous drift of the
//! profile counts f_[v,j] under the balanced policy with direct-first
//! routing: drift_f applies the closed-form generator, whose
//! alternative-arrival part g_[v,j] collapses into joint-load counts via
//! [`JointLoadTable`], and generator_bruteforce re-derives the same number
//! by enumerating every possible transition. Cross-statistics over node
//! pairs and the gap between g_[v,j] and its mean-field counterpart round
//! out the toolbox.

use std::collections::HashMap;

use thiserror::Error;

use crate::ode::{g_field, OdeParams};
use crate::params::{pair_index, pair_nodes, Node};
use crate::routing::{route_call, PolicyKind, RouteDecision, RoutingError};
use crate::state::{Event, NetworkState, StateError};

#[derive(Debug, Error, PartialEq)]
pub enum ObsError {
    #[error("statistic requires at least three nodes")]
    TooFewNodes,
    #[error("node {0} out of range")]
    NodeOutOfRange(Node),
    #[error("nodes must be distinct")]
    EqualNodes,
    #[error("level {level} out of range (max {max})")]
    LevelRange { level: u32, max: u32 },
    #[error("exhaustive generator evaluation is limited to n <= 8, got n = {0}")]
    TooManyNodes(u32),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    State(#[from] StateError),
}

/// Values and argmax witnesses of the three statistics. Witnesses are the
/// first maximizer in scan order (u ascending, then v, then levels), so the
/// report is a deterministic function of the state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiReport {
    pub phi1: f64,
    /// (u, v, j, k) attaining phi1, u < v.
    pub phi1_witness: (Node, Node, u32, u32),
    pub phi2: f64,
    /// (u, v, j) attaining phi2, u < v.
    pub phi2_witness: (Node, Node, u32),
    pub phi3: f64,
    /// Pair (u, v) whose rerouted-call mass attains phi3, u < v.
    pub phi3_witness: (Node, Node),
    pub phi: f64,
}

/// For one node pair (u,v): counts of third nodes w by the pair of loads
/// (load(u,w), load(v,w)), plus the running count of w whose two legs both
/// fit under each level. The table is the common substrate of phi1, the
/// closed-form generator, and the route-selection weights.
#[derive(Debug, Clone)]
pub struct JointLoadTable {
    u: Node,
    v: Node,
    capacity: u32,
    /// Row-major (capacity+1)^2 matrix; rows index load(u,w).
    counts: Vec<u32>,
    /// both_le[i] = #{w : max(load(u,w), load(v,w)) <= i}.
    both_le: Vec<u32>,
}

impl JointLoadTable {
    pub fn build(state: &NetworkState, u: Node, v: Node) -> Result<Self, ObsError> {
        let p = state.params();
        if u >= p.n || v >= p.n {
            return Err(ObsError::NodeOutOfRange(u.max(v)));
        }
        if u == v {
            return Err(ObsError::EqualNodes);
        }
        let c = p.capacity as usize;
        let mut counts = vec![0u32; (c + 1) * (c + 1)];
        let mut both_le = vec![0u32; c + 1];
        for w in 0..p.n {
            if w == u || w == v {
                continue;
            }
            let lu = state.link_load(u, w);
            let lv = state.link_load(v, w);
            counts[lu as usize * (c + 1) + lv as usize] += 1;
            both_le[lu.max(lv) as usize] += 1;
        }
        for i in 1..=c {
            both_le[i] += both_le[i - 1];
        }
        Ok(Self { u, v, capacity: p.capacity, counts, both_le })
    }

    pub fn nodes(&self) -> (Node, Node) {
        (self.u, self.v)
    }

    /// #{w : load(u,w) = level_u and load(v,w) = level_v}.
    pub fn count(&self, level_u: u32, level_v: u32) -> u32 {
        self.counts[level_u as usize * (self.capacity as usize + 1) + level_v as usize]
    }

    /// #{w : both legs of the route through w carry at most `level`};
    /// level -1 gives 0.
    pub fn both_at_most(&self, level: i64) -> u32 {
        if level < 0 {
            0
        } else {
            self.both_le[(level as u32).min(self.capacity) as usize]
        }
    }

    /// #{w != u,v : load(u,w) = level}.
    pub fn marginal_u(&self, level: u32) -> u32 {
        (0..=self.capacity).map(|k| self.count(level, k)).sum()
    }

    /// #{w != u,v : load(v,w) = level}.
    pub fn marginal_v(&self, level: u32) -> u32 {
        (0..=self.capacity).map(|j| self.count(j, level)).sum()
    }
}

/// Shared context for generator evaluations on one state: joint-load tables
/// are built per node pair on demand and memoized, so profiling a whole
/// state touches each pair once.
pub struct GeneratorEval<'a> {
    state: &'a NetworkState,
    tables: HashMap<usize, JointLoadTable>,
}

impl<'a> GeneratorEval<'a> {
    pub fn new(state: &'a NetworkState) -> Self {
        Self { state, tables: HashMap::new() }
    }

    fn table(&mut self, a: Node, b: Node) -> Result<&JointLoadTable, ObsError> {
        let key = pair_index(a, b);
        if !self.tables.contains_key(&key) {
            let (u, v) = pair_nodes(key);
            let table = JointLoadTable::build(self.state, u, v)?;
            self.tables.insert(key, table);
        }
        Ok(&self.tables[&key])
    }

    /// Number of ways to select the route through a fixed candidate at
    /// bottleneck level `level` for a call between a and b, summed over the
    /// slot of the winning candidate: earlier slots must be strictly worse
    /// than `level`, later slots no better than `level - 1`.
    fn selection_weight(&mut self, a: Node, b: Node, level: u32) -> Result<f64, ObsError> {
        let pool = f64::from(self.state.params().n - 2);
        let d = self.state.params().d as usize;
        let table = self.table(a, b)?;
        let worse = pool - f64::from(table.both_at_most(level as i64));
        let not_better = pool - f64::from(table.both_at_most(level as i64 - 1));
        let mut later = vec![1.0; d];
        for s in (0..d - 1).rev() {
            later[s] = later[s + 1] * not_better;
        }
        let mut earlier = 1.0;
        let mut total = 0.0;
        for &tail in &later[..d] {
            total += earlier * tail;
            earlier *= worse;
        }
        Ok(total)
    }

    /// Exact rate density of rerouted arrivals that move a link at v from
    /// load j to j+1, scaled so that a blocked call with one end v
    /// contributes the probability of its selected route bottlenecking at
    /// level j on the v side, and a call rerouted through v contributes once
    /// per leg at load j.
    pub fn g_exact(&mut self, v: Node, j: u32) -> Result<f64, ObsError> {
        let p = *self.state.params();
        if v >= p.n {
            return Err(ObsError::NodeOutOfRange(v));
        }
        if j >= p.capacity {
            return Err(ObsError::LevelRange { level: j, max: p.capacity - 1 });
        }
        let mut total = 0.0;
        // v is an end node: calls between u and v whose direct link is full
        // pick a candidate w; the v-side leg {v,w} sits at load j and the
        // route's bottleneck is max(j, load(u,w)).
        for u in 0..p.n {
            if u == v || self.state.link_load(u, v) != p.capacity {
                continue;
            }
            let (mut at_most, mut exact_above) = (0u32, Vec::new());
            {
                let table = self.table(u, v)?;
                let (tu, _) = table.nodes();
                // count(row, col) rows index the table's own first node.
                let cnt =
                    |a: u32, b: u32| if tu == u { table.count(a, b) } else { table.count(b, a) };
                for a in 0..=j {
                    at_most += cnt(a, j);
                }
                for i in j + 1..p.capacity {
                    exact_above.push(cnt(i, j));
                }
            }
            total += f64::from(at_most) * self.selection_weight(u, v, j)?;
            for (offset, count) in exact_above.into_iter().enumerate() {
                if count > 0 {
                    let i = j + 1 + offset as u32;
                    total += f64::from(count) * self.selection_weight(u, v, i)?;
                }
            }
        }
        // v is an intermediate node: a call between u and v' (direct link
        // full) routes through v; the leg {u,v} is at load j, the bottleneck
        // is max(j, load(v',v)) and must be under capacity.
        for u in 0..p.n {
            if u == v || self.state.link_load(u, v) != j {
                continue;
            }
            for vp in 0..p.n {
                if vp == u || vp == v || self.state.link_load(u, vp) != p.capacity {
                    continue;
                }
                let bottleneck = j.max(self.state.link_load(vp, v));
                if bottleneck < p.capacity {
                    total += self.selection_weight(u, vp, bottleneck)?;
                }
            }
        }
        Ok(total / f64::from(p.n - 2).powi(p.d as i32))
    }
}

/// Exact expected instantaneous drift of f_[v,j]: direct arrivals shift
/// links up one level at rate lambda each, rerouted arrivals at the g rates,
/// departures pull a level-k link down at rate k.
pub fn drift_f(state: &NetworkState, v: Node, j: u32) -> Result<f64, ObsError> {
    let mut eval = GeneratorEval::new(state);
    drift_with(&mut eval, v, j)
}

fn drift_with(eval: &mut GeneratorEval, v: Node, j: u32) -> Result<f64, ObsError> {
    let p = *eval.state.params();
    if v >= p.n {
        return Err(ObsError::NodeOutOfRange(v));
    }
    if j > p.capacity {
        return Err(ObsError::LevelRange { level: j, max: p.capacity });
    }
    let lam = p.lambda;
    let f = eval.state.f_profile(v);
    let at = |k: u32| f64::from(f[k as usize]);
    let value = if j == 0 {
        -lam * at(0) - lam * eval.g_exact(v, 0)? + at(1)
    } else if j == p.capacity {
        lam * at(j - 1) + lam * eval.g_exact(v, j - 1)? - f64::from(j) * at(j)
    } else {
        lam * (at(j - 1) - at(j)) + lam * (eval.g_exact(v, j - 1)? - eval.g_exact(v, j)?)
            - f64::from(j) * at(j)
            + f64::from(j + 1) * at(j + 1)
    };
    Ok(value)
}

/// Drift of the whole profile (f_[v,0], ..., f_[v,C]); the components sum
/// to zero because every transition moves one link between adjacent levels.
pub fn drift_profile(state: &NetworkState, v: Node) -> Result<Vec<f64>, ObsError> {
    let mut eval = GeneratorEval::new(state);
    (0..=state.params().capacity).map(|j| drift_with(&mut eval, v, j)).collect()
}

/// Expected instantaneous drift of f_[v,j] by exhaustive enumeration of
/// transitions: every endpoint pair, every candidate tuple, every live
/// call's departure, each probed on a clone of the state. Quadratic in the
/// tuple space, hence the small-n guard.
pub fn generator_bruteforce(state: &NetworkState, v: Node, j: u32) -> Result<f64, ObsError> {
    let p = *state.params();
    if p.n > 8 {
        return Err(ObsError::TooManyNodes(p.n));
    }
    if v >= p.n {
        return Err(ObsError::NodeOutOfRange(v));
    }
    if j > p.capacity {
        return Err(ObsError::LevelRange { level: j, max: p.capacity });
    }
    let before = i64::from(state.f_count(v, j));
    let d = p.d as usize;
    let mut arrival_sum = 0i64;
    for a in 0..p.n {
        for b in a + 1..p.n {
            let pool: Vec<Node> = (0..p.n).filter(|&w| w != a && w != b).collect();
            let mut tuple = vec![0usize; d];
            loop {
                let candidates: Vec<Node> = tuple.iter().map(|&i| pool[i]).collect();
                let decision = route_call(state, PolicyKind::Bdar, a, b, &candidates)?;
                let event = match decision {
                    RouteDecision::Direct => Some(Event::DirectArrival { u: a, v: b }),
                    RouteDecision::Via { node, .. } => {
                        Some(Event::AltArrival { u: a, v: b, via: node })
                    }
                    RouteDecision::Blocked => None,
                };
                if let Some(event) = event {
                    let mut probe = state.clone();
                    probe.apply_event(event)?;
                    arrival_sum += i64::from(probe.f_count(v, j)) - before;
                }
                // Advance the mixed-radix counter over candidate tuples.
                let mut slot = 0;
                loop {
                    if slot == d {
                        break;
                    }
                    tuple[slot] += 1;
                    if tuple[slot] < pool.len() {
                        break;
                    }
                    tuple[slot] = 0;
                    slot += 1;
                }
                if slot == d {
                    break;
                }
            }
        }
    }
    let mut departure_sum = 0i64;
    for call in state.calls() {
        let mut probe = state.clone();
        probe.apply_event(Event::Departure { id: call.id })?;
        departure_sum += i64::from(probe.f_count(v, j)) - before;
    }
    let tuples = f64::from(p.n - 2).powi(p.d as i32);
    Ok(p.lambda * arrival_sum as f64 / tuples + departure_sum as f64)
}

/// Which level the u-side factor of a cross-statistic pins down.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossMode {
    /// u-side links at exactly level j.
    ExactLevel,
    /// u-side links at level at most j.
    CumulativeLevel,
}

/// Pairwise cross-statistic: the expected number of (candidate, candidate)
/// draws putting a level-j link at u together with a level-k link at v,
/// summed over the slot of the first draw escaping level j, in closed form.
pub fn cross_statistic(
    state: &NetworkState,
    u: Node,
    v: Node,
    j: u32,
    k: u32,
    mode: CrossMode,
) -> Result<f64, ObsError> {
    let p = *state.params();
    if p.n < 3 {
        return Err(ObsError::TooFewNodes);
    }
    if u >= p.n || v >= p.n {
        return Err(ObsError::NodeOutOfRange(u.max(v)));
    }
    if u == v {
        return Err(ObsError::EqualNodes);
    }
    let max = p.capacity;
    if j > max || k > max {
        return Err(ObsError::LevelRange { level: j.max(k), max });
    }
    let fu = state.f_profile(u);
    let fv = state.f_profile(v);
    let cum = |f: &[u32], level: i64| -> f64 {
        if level < 0 {
            0.0
        } else {
            f[..=(level as usize).min(f.len() - 1)].iter().map(|&x| f64::from(x)).sum()
        }
    };
    let luv = i64::from(state.link_load(u, v));
    let ind_le = |level: i64| -> f64 {
        if luv <= level {
            1.0
        } else {
            0.0
        }
    };
    let pool = f64::from(p.n - 2);
    let free_pairs = |level: i64| -> f64 {
        pool * pool - (cum(&fu, level) - ind_le(level)) * (cum(&fv, level) - ind_le(level))
    };
    let base_u = match mode {
        CrossMode::ExactLevel => {
            f64::from(fu[j as usize]) - if luv == i64::from(j) { 1.0 } else { 0.0 }
        }
        CrossMode::CumulativeLevel => cum(&fu, i64::from(j)) - ind_le(i64::from(j)),
    };
    let base_v = f64::from(fv[k as usize]) - if luv == i64::from(k) { 1.0 } else { 0.0 };
    let at_j = free_pairs(i64::from(j));
    let below_j = free_pairs(i64::from(j) - 1);
    let d = p.d as usize;
    let mut later = vec![1.0; d];
    for s in (0..d - 1).rev() {
        later[s] = later[s + 1] * below_j;
    }
    let mut earlier = 1.0;
    let mut slot_sum = 0.0;
    for &tail in &later[..d] {
        slot_sum += earlier * tail;
        earlier *= at_j;
    }
    Ok(base_u * base_v * slot_sum / pool.powi(2 * d as i32 - 1))
}

/// The rerouting-rate component of phi1 for one tuple, signed: joint count
/// minus product of marginals, both over third nodes, with the exact
/// integer numerator divided once.
pub fn phi1_component(
    state: &NetworkState,
    u: Node,
    v: Node,
    j: u32,
    k: u32,
) -> Result<f64, ObsError> {
    let p = state.params();
    if p.n < 3 {
        return Err(ObsError::TooFewNodes);
    }
    if j > p.capacity || k > p.capacity {
        return Err(ObsError::LevelRange { level: j.max(k), max: p.capacity });
    }
    let table = JointLoadTable::build(state, u, v)?;
    let (tu, _) = table.nodes();
    let (joint, mu, mv) = if tu == u {
        (table.count(j, k), table.marginal_u(j), table.marginal_v(k))
    } else {
        (table.count(k, j), table.marginal_u(k), table.marginal_v(j))
    };
    let pool = i64::from(p.n - 2);
    let numerator = i64::from(joint) * pool - i64::from(mu) * i64::from(mv);
    Ok(numerator as f64 / (pool * pool) as f64)
}

/// Evaluates phi1/phi2/phi3 exactly. All maxima are taken over integer
/// numerators on the common denominator (n-2)^2, so equal values tie-break
/// to the first witness in scan order regardless of rounding.
pub fn phi_report(state: &NetworkState) -> Result<PhiReport, ObsError> {
    let p = *state.params();
    if p.n < 3 {
        return Err(ObsError::TooFewNodes);
    }
    let n = p.n;
    let c = p.capacity as usize;
    let pool = u64::from(n - 2);
    let profiles: Vec<Vec<u32>> = (0..n).map(|v| state.f_profile(v)).collect();

    let mut best1 = 0u64;
    let mut wit1 = (0, 1, 0, 0);
    let mut best2 = 0u64;
    let mut wit2 = (0, 1, 0);
    let mut joint = vec![0u32; (c + 1) * (c + 1)];
    for u in 0..n {
        for v in u + 1..n {
            joint.fill(0);
            for w in 0..n {
                if w == u || w == v {
                    continue;
                }
                let lu = state.link_load(u, w) as usize;
                let lv = state.link_load(v, w) as usize;
                joint[lu * (c + 1) + lv] += 1;
            }
            let luv = state.link_load(u, v) as usize;
            for j in 0..=c {
                // Marginal profiles with the {u,v} link itself removed.
                let fu = u64::from(profiles[u as usize][j]) - u64::from(luv == j);
                let d2 = u64::from(profiles[u as usize][j]).abs_diff(u64::from(
                    profiles[v as usize][j],
                ));
                if d2 > best2 {
                    best2 = d2;
                    wit2 = (u, v, j as u32);
                }
                for k in 0..=c {
                    let fv = u64::from(profiles[v as usize][k]) - u64::from(luv == k);
                    let m = u64::from(joint[j * (c + 1) + k]);
                    let score = (m * pool).abs_diff(fu * fv);
                    if score > best1 {
                        best1 = score;
                        wit1 = (u, v, j as u32, k as u32);
                    }
                }
            }
        }
    }

    let mut via_per_pair = vec![0u64; p.n_links() as usize];
    for (&(pair, _), &count) in state.alt_entries() {
        via_per_pair[pair as usize] += u64::from(count);
    }
    let mut best3 = 0u64;
    let mut wit3_pair = 0usize;
    for (pair, &total) in via_per_pair.iter().enumerate() {
        if total > best3 {
            best3 = total;
            wit3_pair = pair;
        }
    }

    let denom = (pool * pool) as f64;
    let overall = best1.max(best2 * pool).max(best3 * pool);
    Ok(PhiReport {
        phi1: best1 as f64 / denom,
        phi1_witness: wit1,
        phi2: (best2 * pool) as f64 / denom,
        phi2_witness: wit2,
        phi3: (best3 * pool) as f64 / denom,
        phi3_witness: pair_nodes(wit3_pair),
        phi: overall as f64 / denom,
    })
}

/// Gap between the exact rerouting rate g_[v,j] and its mean-field
/// prediction under two natural normalizations of the node's profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    pub v: Node,
    pub j: u32,
    pub g_exact: f64,
    /// (n-1) g_j of the profile normalized by the link count n-1.
    pub g_meanfield: f64,
    pub gap: f64,
    /// (n-2) g_j of the profile normalized by the candidate count n-2; this
    /// vector exceeds total mass 1, which g_j tolerates as a polynomial.
    pub g_meanfield_alt: f64,
    pub gap_alt: f64,
}

/// Compares the exact g_[v,j] with the mean-field flux evaluated at the
/// node's own normalized profile.
pub fn meanfield_gap(state: &NetworkState, v: Node, j: u32) -> Result<GapReport, ObsError> {
    let p = *state.params();
    let g = g_exact(state, v, j)?;
    let ode = OdeParams::from(&p);
    let f = state.f_profile(v);
    let links = f64::from(p.n - 1);
    let choices = f64::from(p.n - 2);
    let zeta: Vec<f64> = f.iter().map(|&x| f64::from(x) / links).collect();
    let eta: Vec<f64> = f.iter().map(|&x| f64::from(x) / choices).collect();
    let g_meanfield = links * g_field(&zeta, &ode, j);
    let g_meanfield_alt = choices * g_field(&eta, &ode, j);
    Ok(GapReport {
        v,
        j,
        g_exact: g,
        g_meanfield,
        gap: (g - g_meanfield).abs(),
        g_meanfield_alt,
        gap_alt: (g - g_meanfield_alt).abs(),
    })
}

/// Convenience wrapper building a one-shot evaluation context.
pub fn g_exact(state: &NetworkState, v: Node, j: u32) -> Result<f64, ObsError> {
    GeneratorEval::new(state).g_exact(v, j)
}

/// Constants of the per-step drift bound for the statistic components:
/// the expected one-step change of any component is at most
/// (c1 / n^2) phi + c2 / n^3 while the chain stays in the admissible region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftBoundConstants {
    pub c1: f64,
    pub c2: f64,
}

pub fn drift_bound_constants(lambda: f64, d: u32, capacity: u32) -> DriftBoundConstants {
    let c = f64::from(capacity);
    if d == 1 {
        DriftBoundConstants {
            c1: 26.0 * (1.0 + 1.0 / lambda) * (c + 1.0),
            c2: 64.0 * lambda * (c + 1.0),
        }
    } else {
        let shape = f64::from(d) * f64::from(d) * (c + 1.0).powi(3);
        DriftBoundConstants {
            c1: 26.0 * (1.0 + 1.0 / lambda) * shape,
            c2: 64.0 * lambda * shape,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModelParams;
    use crate::routing::sample_candidates;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn apply_script(state: &mut NetworkState, events: &[Event]) {
        for &event in events {
            state.apply_event(event).unwrap();
        }
    }

    /// Drives the state through `steps` arrival/departure events under the
    /// balanced policy, skipping blocked arrivals.
    fn random_state(rng: &mut ChaCha12Rng, params: ModelParams, steps: usize) -> NetworkState {
        let mut state = NetworkState::new(params);
        let mut candidates = Vec::new();
        for _ in 0..steps {
            let depart = state.num_calls() > 0 && rng.random::<f64>() < 0.3;
            if depart {
                let idx = rng.random_range(0..state.num_calls());
                let id = state.calls()[idx].id;
                state.apply_event(Event::Departure { id }).unwrap();
                continue;
            }
            let u = rng.random_range(0..params.n);
            let mut v = rng.random_range(0..params.n - 1);
            if v >= u {
                v += 1;
            }
            sample_candidates(rng, params.n, u, v, params.d, &mut candidates);
            match route_call(&state, PolicyKind::Bdar, u, v, &candidates).unwrap() {
                RouteDecision::Direct => {
                    state.apply_event(Event::DirectArrival { u, v }).unwrap();
                }
                RouteDecision::Via { node, .. } => {
                    state.apply_event(Event::AltArrival { u, v, via: node }).unwrap();
                }
                RouteDecision::Blocked => {}
            }
        }
        state
    }

    /// Every candidate tuple of the given length over `pool`.
    fn tuples(pool: &[Node], len: usize) -> Vec<Vec<Node>> {
        let mut out = vec![Vec::new()];
        for _ in 0..len {
            let mut next = Vec::with_capacity(out.len() * pool.len());
            for prefix in &out {
                for &w in pool {
                    let mut t = prefix.clone();
                    t.push(w);
                    next.push(t);
                }
            }
            out = next;
        }
        out
    }

    /// Term-by-term transliteration of the rerouting-rate definition as a
    /// sum of indicator products over full candidate tuples.
    fn naive_g(state: &NetworkState, v: Node, j: u32) -> f64 {
        let p = *state.params();
        let d = p.d as usize;
        let load = |a: Node, b: Node| state.link_load(a, b);
        let route_le = |a: Node, b: Node, w: Node, level: i64| -> bool {
            i64::from(load(a, w).max(load(b, w))) <= level
        };
        let wins = |tuple: &[Node], r: usize, a: Node, b: Node, level: u32| -> bool {
            (0..r).all(|s| !route_le(a, b, tuple[s], i64::from(level)))
                && (r + 1..d).all(|s| !route_le(a, b, tuple[s], i64::from(level) - 1))
        };
        let mut total = 0u64;
        // v as an end node.
        for u in (0..p.n).filter(|&u| u != v) {
            if load(u, v) != p.capacity {
                continue;
            }
            let pool: Vec<Node> = (0..p.n).filter(|&w| w != u && w != v).collect();
            for tuple in tuples(&pool, d) {
                for r in 0..d {
                    if load(v, tuple[r]) != j {
                        continue;
                    }
                    let partner = load(u, tuple[r]);
                    if partner <= j {
                        total += u64::from(wins(&tuple, r, u, v, j));
                    } else if partner < p.capacity {
                        total += u64::from(wins(&tuple, r, u, v, partner));
                    }
                }
            }
        }
        // v as an intermediate node at slot r.
        for u in (0..p.n).filter(|&u| u != v) {
            if load(u, v) != j {
                continue;
            }
            for vp in (0..p.n).filter(|&vp| vp != u && vp != v) {
                if load(u, vp) != p.capacity {
                    continue;
                }
                let pool: Vec<Node> = (0..p.n).filter(|&w| w != u && w != vp).collect();
                for r in 0..d {
                    for rest in tuples(&pool, d - 1) {
                        let mut tuple = Vec::with_capacity(d);
                        tuple.extend_from_slice(&rest[..r]);
                        tuple.push(v);
                        tuple.extend_from_slice(&rest[r..]);
                        let other = load(vp, v);
                        if other <= j {
                            total += u64::from(wins(&tuple, r, u, vp, j));
                        } else if other < p.capacity {
                            total += u64::from(wins(&tuple, r, u, vp, other));
                        }
                    }
                }
            }
        }
        total as f64 / f64::from(p.n - 2).powi(d as i32)
    }

    /// Literal triple-loop evaluation of the three statistics.
    fn naive_phi(state: &NetworkState) -> (f64, f64, f64) {
        let p = *state.params();
        let pool = f64::from(p.n - 2);
        let (mut phi1, mut phi2, mut phi3) = (0.0f64, 0.0f64, 0.0f64);
        for u in 0..p.n {
            for v in 0..p.n {
                if u == v {
                    continue;
                }
                for j in 0..=p.capacity {
                    for k in 0..=p.capacity {
                        let mut joint = 0.0;
                        let mut mu = 0.0;
                        let mut mv = 0.0;
                        for w in 0..p.n {
                            if w == u || w == v {
                                continue;
                            }
                            let lu = state.link_load(u, w);
                            let lv = state.link_load(v, w);
                            joint += f64::from(lu == j && lv == k);
                            mu += f64::from(lu == j);
                            mv += f64::from(lv == k);
                        }
                        phi1 = phi1.max((joint / pool - mu * mv / (pool * pool)).abs());
                    }
                    let fu = f64::from(state.f_count(u, j));
                    let fv = f64::from(state.f_count(v, j));
                    phi2 = phi2.max((fu - fv).abs() / pool);
                }
                let mut via = 0.0;
                for w in 0..p.n {
                    if w != u && w != v {
                        via += f64::from(state.alt_count(u, v, w));
                    }
                }
                phi3 = phi3.max(via / pool);
            }
        }
        (phi1, phi2, phi3)
    }

    #[test]
    fn phi_vanishes_on_the_empty_state() {
        let state = NetworkState::new(ModelParams::new(5, 2, 1, 1.0).unwrap());
        let report = phi_report(&state).unwrap();
        assert_eq!(report.phi1, 0.0);
        assert_eq!(report.phi2, 0.0);
        assert_eq!(report.phi3, 0.0);
        assert_eq!(report.phi, 0.0);
    }

    #[test]
    fn phi3_counts_rerouted_calls_per_pair() {
        let mut state = NetworkState::new(ModelParams::new(4, 1, 1, 1.0).unwrap());
        apply_script(&mut state, &[Event::AltArrival { u: 0, v: 1, via: 2 }]);
        let report = phi_report(&state).unwrap();
        assert_eq!(report.phi3, 0.5);
        assert_eq!(report.phi3_witness, (0, 1));
        assert!(report.phi >= 0.5);
    }

    #[test]
    fn phi_report_matches_naive_loops() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        for &(n, c, d) in &[(5u32, 2u32, 1u32), (6, 1, 2), (6, 3, 2)] {
            let params = ModelParams::new(n, c, d, 1.0).unwrap();
            for _ in 0..25 {
                let state = random_state(&mut rng, params, 40);
                let report = phi_report(&state).unwrap();
                let (p1, p2, p3) = naive_phi(&state);
                assert!((report.phi1 - p1).abs() < 1e-12);
                assert!((report.phi2 - p2).abs() < 1e-12);
                assert!((report.phi3 - p3).abs() < 1e-12);
                assert_eq!(report.phi, report.phi1.max(report.phi2).max(report.phi3));
            }
        }
    }

    #[test]
    fn phi1_component_is_consistent_with_the_report() {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let params = ModelParams::new(6, 2, 2, 1.0).unwrap();
        let state = random_state(&mut rng, params, 60);
        let report = phi_report(&state).unwrap();
        let (u, v, j, k) = report.phi1_witness;
        let signed = phi1_component(&state, u, v, j, k).unwrap();
        assert!((signed.abs() - report.phi1).abs() < 1e-15);
    }

    #[test]
    fn rerouting_rate_on_a_single_full_link() {
        let mut state = NetworkState::new(ModelParams::new(4, 1, 1, 1.0).unwrap());
        apply_script(&mut state, &[Event::DirectArrival { u: 0, v: 1 }]);
        assert_eq!(g_exact(&state, 0, 0).unwrap(), 1.0);
        assert_eq!(g_exact(&state, 2, 0).unwrap(), 1.0);
        let empty = NetworkState::new(ModelParams::new(4, 1, 1, 1.0).unwrap());
        assert_eq!(g_exact(&empty, 0, 0).unwrap(), 0.0);
    }

    #[test]
    fn rerouting_rate_matches_the_tuple_enumeration() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for &(n, c, d) in &[(4u32, 1u32, 1u32), (5, 2, 1), (4, 2, 2), (5, 1, 2)] {
            let params = ModelParams::new(n, c, d, 1.0).unwrap();
            for _ in 0..20 {
                let state = random_state(&mut rng, params, 30);
                for v in 0..n {
                    for j in 0..c {
                        let fast = g_exact(&state, v, j).unwrap();
                        let slow = naive_g(&state, v, j);
                        assert!(
                            (fast - slow).abs() <= 1e-12 * slow.abs().max(1.0),
                            "n={n} c={c} d={d} v={v} j={j}: {fast} vs {slow}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn drift_on_the_empty_state() {
        let state = NetworkState::new(ModelParams::new(3, 1, 1, 1.0).unwrap());
        assert_eq!(drift_f(&state, 0, 0).unwrap(), -2.0);
    }

    #[test]
    fn drift_matches_transition_enumeration() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for &(n, c, d) in &[(4u32, 2u32, 1u32), (4, 2, 2), (5, 1, 2)] {
            let params = ModelParams::new(n, c, d, 1.0).unwrap();
            for _ in 0..10 {
                let state = random_state(&mut rng, params, 25);
                for v in 0..n {
                    for j in 0..=c {
                        let fast = drift_f(&state, v, j).unwrap();
                        let slow = generator_bruteforce(&state, v, j).unwrap();
                        assert!(
                            (fast - slow).abs() <= 1e-12 * slow.abs().max(1.0),
                            "n={n} c={c} d={d} v={v} j={j}: {fast} vs {slow}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn drift_profile_sums_to_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let params = ModelParams::new(7, 2, 2, 0.8).unwrap();
        for _ in 0..10 {
            let state = random_state(&mut rng, params, 50);
            for v in 0..7 {
                let profile = drift_profile(&state, v).unwrap();
                let sum: f64 = profile.iter().sum();
                assert!(sum.abs() < 1e-12, "v={v}: {sum}");
            }
        }
    }

    #[test]
    fn cross_statistic_on_the_empty_state() {
        let state = NetworkState::new(ModelParams::new(5, 1, 1, 1.0).unwrap());
        let value = cross_statistic(&state, 0, 1, 0, 0, CrossMode::ExactLevel).unwrap();
        assert_eq!(value, 3.0);
    }

    #[test]
    fn cross_statistic_matches_the_definitional_sum() {
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        for &(n, c, d) in &[(5u32, 2u32, 1u32), (6, 2, 2)] {
            let params = ModelParams::new(n, c, d, 1.0).unwrap();
            for _ in 0..15 {
                let state = random_state(&mut rng, params, 40);
                let u = 0;
                let v = 1;
                for j in 0..=c {
                    for k in 0..=c {
                        for mode in [CrossMode::ExactLevel, CrossMode::CumulativeLevel] {
                            let fast = cross_statistic(&state, u, v, j, k, mode).unwrap();
                            let slow = naive_cross(&state, u, v, j, k, mode);
                            assert!(
                                (fast - slow).abs() <= 1e-12 * slow.abs().max(1.0),
                                "n={n} c={c} d={d} j={j} k={k} {mode:?}: {fast} vs {slow}"
                            );
                        }
                    }
                }
            }
        }
    }

    /// Definitional double-tuple sum for the cross-statistic.
    fn naive_cross(
        state: &NetworkState,
        u: Node,
        v: Node,
        j: u32,
        k: u32,
        mode: CrossMode,
    ) -> f64 {
        let p = *state.params();
        let d = p.d as usize;
        let pool: Vec<Node> = (0..p.n).filter(|&w| w != u && w != v).collect();
        let le = |a: Node, w: Node, level: i64| i64::from(state.link_load(a, w)) <= level;
        let mut total = 0.0;
        for ws in tuples(&pool, d) {
            for wps in tuples(&pool, d) {
                for r in 0..d {
                    let hit_u = match mode {
                        CrossMode::ExactLevel => state.link_load(u, ws[r]) == j,
                        CrossMode::CumulativeLevel => le(u, ws[r], i64::from(j)),
                    };
                    if !hit_u || state.link_load(v, wps[r]) != k {
                        continue;
                    }
                    let ok = (0..r).all(|s| {
                        !(le(u, ws[s], i64::from(j)) && le(v, wps[s], i64::from(j)))
                    }) && (r + 1..d).all(|s| {
                        !(le(u, ws[s], i64::from(j) - 1) && le(v, wps[s], i64::from(j) - 1))
                    });
                    if ok {
                        total += 1.0;
                    }
                }
            }
        }
        total / f64::from(p.n - 2).powi(2 * d as i32 - 1)
    }

    #[test]
    fn meanfield_gap_is_zero_on_the_empty_state() {
        let state = NetworkState::new(ModelParams::new(6, 2, 1, 1.0).unwrap());
        let report = meanfield_gap(&state, 0, 0).unwrap();
        assert_eq!(report.g_exact, 0.0);
        assert_eq!(report.g_meanfield, 0.0);
        assert_eq!(report.gap, 0.0);
        assert_eq!(report.gap_alt, 0.0);
    }

    #[test]
    fn joint_table_marginals_total_the_pool() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let params = ModelParams::new(6, 2, 1, 1.0).unwrap();
        let state = random_state(&mut rng, params, 30);
        let table = JointLoadTable::build(&state, 2, 4).unwrap();
        let total: u32 = (0..=2).map(|j| table.marginal_u(j)).sum();
        assert_eq!(total, 4);
        assert_eq!(table.both_at_most(2), 4);
        assert_eq!(table.both_at_most(-1), 0);
    }

    #[test]
    fn drift_bound_constant_values() {
        let d1 = drift_bound_constants(1.0, 1, 2);
        assert_eq!(d1.c1, 26.0 * 2.0 * 3.0);
        assert_eq!(d1.c2, 64.0 * 3.0);
        let d2 = drift_bound_constants(0.5, 2, 1);
        assert_eq!(d2.c1, 26.0 * 3.0 * 4.0 * 8.0);
        assert_eq!(d2.c2, 64.0 * 0.5 * 4.0 * 8.0);
    }

    #[test]
    fn input_validation() {
        let state = NetworkState::new(ModelParams::new(4, 1, 1, 1.0).unwrap());
        assert!(matches!(g_exact(&state, 0, 1), Err(ObsError::LevelRange { .. })));
        assert!(matches!(g_exact(&state, 9, 0), Err(ObsError::NodeOutOfRange(9))));
        assert!(matches!(
            cross_statistic(&state, 2, 2, 0, 0, CrossMode::ExactLevel),
            Err(ObsError::EqualNodes)
        ));
        let tiny = NetworkState::new(ModelParams::new(2, 1, 1, 1.0).unwrap());
        assert!(matches!(phi_report(&tiny), Err(ObsError::TooFewNodes)));
        let big = NetworkState::new(ModelParams::new(9, 1, 1, 1.0).unwrap());
        assert!(matches!(generator_bruteforce(&big, 0, 0), Err(ObsError::TooManyNodes(9))));
    }
}
