//! Model parameters and canonical link indexing for the complete graph.
//!
//! Links are unordered node pairs. A pair {u, v} with u < v is stored at the
//! triangular index v(v-1)/2 + u, so links sort by their larger endpoint and
//! the index is independent of n.

use thiserror::Error;

/// Node identifier; nodes are numbered 0..n.
pub type Node = u32;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("n must be between 2 and 10000, got {0}")]
    BadN(u32),
    #[error("capacity must be at least 1, got {0}")]
    BadCapacity(u32),
    #[error("d must be at least 1, got {0}")]
    BadD(u32),
    #[error("lambda must be finite and positive, got {0}")]
    BadLambda(f64),
}

/// Static description of one routing model instance.
///
/// * `n` nodes, every pair joined by a link of integer capacity `capacity`;
/// * calls arrive on each link at rate `lambda` and hold for unit-mean
///   exponential times;
/// * a call that cannot use its direct link draws `d` candidate intermediate
///   nodes (uniform, with replacement, excluding the endpoints).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub n: u32,
    pub capacity: u32,
    pub d: u32,
    pub lambda: f64,
}

impl ModelParams {
    pub fn new(n: u32, capacity: u32, d: u32, lambda: f64) -> Result<Self, ParamError> {
        if !(2..=10_000).contains(&n) {
            return Err(ParamError::BadN(n));
        }
        if capacity == 0 {
            return Err(ParamError::BadCapacity(capacity));
        }
        if d == 0 {
            return Err(ParamError::BadD(d));
        }
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(ParamError::BadLambda(lambda));
        }
        Ok(Self { n, capacity, d, lambda })
    }

    /// Number of links, n(n-1)/2.
    pub fn n_links(&self) -> u64 {
        u64::from(self.n) * u64::from(self.n - 1) / 2
    }

    /// Total call arrival rate lambda * n_links.
    pub fn arrival_rate(&self) -> f64 {
        self.lambda * self.n_links() as f64
    }

    /// Slot count of the discrete jump chain: floor(6 * lambda * n_links).
    pub fn jump_slots(&self) -> u64 {
        (6.0 * self.arrival_rate()).floor() as u64
    }
}

/// Canonical index of the link {u, v}. Requires u != v.
pub fn pair_index(u: Node, v: Node) -> usize {
    debug_assert_ne!(u, v, "a link joins two distinct nodes");
    let (a, b) = if u < v { (u, v) } else { (v, u) };
    (u64::from(b) * u64::from(b - 1) / 2 + u64::from(a)) as usize
}

/// Inverse of [`pair_index`]; returns (u, v) with u < v.
pub fn pair_nodes(index: usize) -> (Node, Node) {
    let idx = index as u64;
    // b is the largest integer with b(b-1)/2 <= idx; the float estimate can be
    // off by one at the boundary, so correct it exactly.
    let mut b = ((1.0 + ((1 + 8 * idx) as f64).sqrt()) / 2.0).floor() as u64;
    while b * (b - 1) / 2 > idx {
        b -= 1;
    }
    while (b + 1) * b / 2 <= idx {
        b += 1;
    }
    let a = idx - b * (b - 1) / 2;
    (a as Node, b as Node)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_index_round_trips() {
        let n = 57u32;
        let mut seen = vec![false; (n as usize) * (n as usize - 1) / 2];
        for v in 0..n {
            for u in 0..v {
                let idx = pair_index(u, v);
                assert_eq!(idx, pair_index(v, u));
                assert!(!seen[idx], "indices must be distinct");
                seen[idx] = true;
                assert_eq!(pair_nodes(idx), (u, v));
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn link_count_and_rates() {
        let p = ModelParams::new(4, 2, 1, 0.5).unwrap();
        assert_eq!(p.n_links(), 6);
        assert_eq!(p.arrival_rate(), 3.0);
        assert_eq!(p.jump_slots(), 18);
    }

    #[test]
    fn validation_rejects_degenerate_inputs() {
        assert_eq!(ModelParams::new(1, 1, 1, 1.0), Err(ParamError::BadN(1)));
        assert_eq!(ModelParams::new(4, 0, 1, 1.0), Err(ParamError::BadCapacity(0)));
        assert_eq!(ModelParams::new(4, 1, 0, 1.0), Err(ParamError::BadD(0)));
        assert!(ModelParams::new(4, 1, 1, 0.0).is_err());
        assert!(ModelParams::new(4, 1, 1, f64::NAN).is_err());
    }
}
