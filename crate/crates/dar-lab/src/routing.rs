//! Call admission rules.
//!
//! Every policy first checks the direct link (except the no-direct variant)
//! and then scans the candidate intermediate nodes in draw order. A candidate
//! w is feasible when both legs {u,w} and {v,w} have spare capacity. The
//! balanced rule picks the first candidate minimizing the larger leg load;
//! the first-fit rule picks the first feasible candidate.

use rand::Rng;
use thiserror::Error;

use crate::params::Node;
use crate::state::NetworkState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    /// Direct if possible, else balanced choice among the candidates.
    Bdar,
    /// Direct if possible, else first feasible candidate.
    Fdar,
    /// Balanced choice among the candidates; the direct link is never used.
    NoDirectBdar,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Bdar => "bdar",
            PolicyKind::Fdar => "fdar",
            PolicyKind::NoDirectBdar => "nodirect",
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bdar" => Ok(PolicyKind::Bdar),
            "fdar" => Ok(PolicyKind::Fdar),
            "nodirect" | "nodirectbdar" | "no-direct" => Ok(PolicyKind::NoDirectBdar),
            other => Err(format!("unknown policy {other:?} (expected bdar|fdar|nodirect)")),
        }
    }
}

/// Routing outcome. `slot` is the 1-based position of the chosen candidate
/// in the drawn tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteDecision {
    Direct,
    Via { node: Node, slot: u32 },
    Blocked,
}

#[derive(Debug, Error, PartialEq)]
pub enum RoutingError {
    #[error("endpoints must be two distinct nodes below n")]
    BadEndpoints,
    #[error("expected exactly {expected} candidates, got {got}")]
    CandidateCount { expected: u32, got: usize },
    #[error("candidate {0} is out of range or coincides with an endpoint")]
    BadCandidate(Node),
}

/// Decides how a call between u and v would be routed in the given state.
/// `candidates` must hold exactly d nodes, none equal to u or v (repeats are
/// allowed: candidates are drawn with replacement). The state is not changed.
pub fn route_call(
    state: &NetworkState,
    policy: PolicyKind,
    u: Node,
    v: Node,
    candidates: &[Node],
) -> Result<RouteDecision, RoutingError> {
    let p = state.params();
    if u == v || u >= p.n || v >= p.n {
        return Err(RoutingError::BadEndpoints);
    }
    if candidates.len() != p.d as usize {
        return Err(RoutingError::CandidateCount { expected: p.d, got: candidates.len() });
    }
    for &w in candidates {
        if w >= p.n || w == u || w == v {
            return Err(RoutingError::BadCandidate(w));
        }
    }

    if !matches!(policy, PolicyKind::NoDirectBdar) && state.link_load(u, v) < p.capacity {
        return Ok(RouteDecision::Direct);
    }

    match policy {
        PolicyKind::Fdar => {
            for (i, &w) in candidates.iter().enumerate() {
                let worst = state.link_load(u, w).max(state.link_load(v, w));
                if worst < p.capacity {
                    return Ok(RouteDecision::Via { node: w, slot: i as u32 + 1 });
                }
            }
            Ok(RouteDecision::Blocked)
        }
        PolicyKind::Bdar | PolicyKind::NoDirectBdar => {
            let mut best: Option<(u32, usize)> = None;
            for (i, &w) in candidates.iter().enumerate() {
                let worst = state.link_load(u, w).max(state.link_load(v, w));
                if worst < p.capacity && best.is_none_or(|(b, _)| worst < b) {
                    best = Some((worst, i));
                }
            }
            Ok(match best {
                Some((_, i)) => RouteDecision::Via { node: candidates[i], slot: i as u32 + 1 },
                None => RouteDecision::Blocked,
            })
        }
    }
}

/// Draws d intermediate candidates uniformly with replacement from the nodes
/// other than u and v. Consumes exactly d draws from the generator.
pub fn sample_candidates<R: Rng + ?Sized>(
    rng: &mut R,
    n: u32,
    u: Node,
    v: Node,
    d: u32,
    out: &mut Vec<Node>,
) {
    debug_assert!(u != v && u < n && v < n && n >= 3);
    let (a, b) = if u < v { (u, v) } else { (v, u) };
    out.clear();
    for _ in 0..d {
        let mut w = rng.random_range(0..n - 2);
        if w >= a {
            w += 1;
        }
        if w >= b {
            w += 1;
        }
        out.push(w);
    }
}
