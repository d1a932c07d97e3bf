//! Mean-field description of the per-node load profile.
//!
//! xi_t(k) is the fraction of links at one node holding exactly k calls,
//! k = 0..=C. Direct traffic moves mass up one level at rate lambda per
//! link; departures move it down at rate k; overflow traffic arriving
//! through alternative routes is captured by the functions g_j:
//!
//!   g_j(xi) = 2 xi(C) xi(j) [ xi(<=j) s_j + sum_{i=j+1}^{C-1} xi(i) s_i ],
//!   s_i = sum_{r=1}^{d} (1 - xi(<=i)^2)^(r-1) (1 - xi(<=i-1)^2)^(d-r),
//!
//! the probability flux of calls whose blocked direct link selects, among d
//! candidate two-link routes, a best route whose bottleneck sits at level j
//! (level i >= j on the far leg for the second sum). The no-direct variant
//! drops the leading xi(C) factor and the direct-traffic terms.
//!
//! For d = 1 the s_i collapse to 1 and g_j = 2 xi(C) (1 - xi(C)) xi(j).

use thiserror::Error;

use crate::params::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeParams {
    pub lambda: f64,
    pub capacity: u32,
    pub d: u32,
    /// When set, calls never use the direct link (and g_j loses its xi(C)
    /// factor accordingly).
    pub no_direct: bool,
}

impl From<&ModelParams> for OdeParams {
    fn from(p: &ModelParams) -> Self {
        OdeParams { lambda: p.lambda, capacity: p.capacity, d: p.d, no_direct: false }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum OdeError {
    #[error("simplex vector must have at least two components")]
    TooShort,
    #[error("component {index} = {value} is below -1e-9")]
    NegativeComponent { index: usize, value: f64 },
    #[error("component sum {0} deviates from 1 by more than 1e-9")]
    MassDeviation(f64),
    #[error("step size {h} exceeds the stability bound 0.5/L = {max_h}")]
    StepTooLarge { h: f64, max_h: f64 },
    #[error("invalid integration horizon {0}")]
    BadHorizon(f64),
    #[error("solution left the simplex at t={t}: component {index} = {value}")]
    LeftSimplex { t: f64, index: usize, value: f64 },
    #[error("solution mass drifted to {sum} at t={t}")]
    MassDrift { t: f64, sum: f64 },
    #[error("fixed-point iteration did not reach residual {target} (best {best})")]
    FixedPointStalled { target: f64, best: f64 },
    #[error("constants require lambda > 0, d >= 1, capacity >= 1, t0 > 0")]
    BadConstantInputs,
}

/// A point on the simplex of load-profile fractions, components 0..=C.
/// Construction tolerates rounding of magnitude 1e-9: tiny negative
/// components are clipped and the vector is renormalized; anything worse is
/// rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    pub fn new(mut components: Vec<f64>) -> Result<Self, OdeError> {
        if components.len() < 2 {
            return Err(OdeError::TooShort);
        }
        for (index, &value) in components.iter().enumerate() {
            if value.is_nan() || value < -1e-9 {
                return Err(OdeError::NegativeComponent { index, value });
            }
        }
        let sum: f64 = components.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(OdeError::MassDeviation(sum));
        }
        for value in &mut components {
            if *value < 0.0 {
                *value = 0.0;
            }
        }
        let sum: f64 = components.iter().sum();
        for value in &mut components {
            *value /= sum;
        }
        Ok(Self(components))
    }

    /// All mass at level k.
    pub fn point_mass(capacity: u32, k: u32) -> Self {
        assert!(k <= capacity);
        let mut v = vec![0.0; capacity as usize + 1];
        v[k as usize] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn component(&self, k: u32) -> f64 {
        self.0[k as usize]
    }

    pub fn capacity(&self) -> u32 {
        self.0.len() as u32 - 1
    }
}

/// The route-selection factors s_i for i = 0..C-1, given the cumulative
/// profile. s_i sums over the slot r of the winning candidate: earlier
/// candidates must be strictly worse than level i, later ones no better than
/// level i-1 (first-best tie-breaking).
fn selection_factors(cum: &[f64], p: &OdeParams) -> Vec<f64> {
    let c = p.capacity as usize;
    let d = p.d as usize;
    let mut s = vec![0.0; c];
    for i in 0..c {
        let a = 1.0 - cum[i] * cum[i];
        let b = if i == 0 { 1.0 } else { 1.0 - cum[i - 1] * cum[i - 1] };
        // sum_{r=1}^{d} a^(r-1) b^(d-r)
        let mut b_pows = vec![1.0; d];
        for r in (0..d - 1).rev() {
            b_pows[r] = b_pows[r + 1] * b;
        }
        let mut a_pow = 1.0;
        let mut total = 0.0;
        for &b_pow in &b_pows[..d] {
            total += a_pow * b_pow;
            a_pow *= a;
        }
        s[i] = total;
    }
    s
}

fn cumulative(xi: &[f64]) -> Vec<f64> {
    let mut cum = Vec::with_capacity(xi.len());
    let mut acc = 0.0;
    for &x in xi {
        acc += x;
        cum.push(acc);
    }
    cum
}

fn g_all(xi: &[f64], p: &OdeParams) -> Vec<f64> {
    let c = p.capacity as usize;
    debug_assert_eq!(xi.len(), c + 1);
    let cum = cumulative(xi);
    let s = selection_factors(&cum, p);
    let top = if p.no_direct { 1.0 } else { xi[c] };
    let mut g = vec![0.0; c];
    for j in 0..c {
        let mut overflow = cum[j] * s[j];
        for i in j + 1..c {
            overflow += xi[i] * s[i];
        }
        g[j] = 2.0 * top * xi[j] * overflow;
    }
    g
}

/// Mean-field overflow flux onto level-j links, j = 0..C-1. `xi` must have
/// capacity+1 components; it is treated as a plain polynomial argument, so
/// slightly off-simplex inputs (such as (n-2)-normalized profiles) are
/// accepted.
pub fn g_field(xi: &[f64], p: &OdeParams, j: u32) -> f64 {
    assert!(j < p.capacity, "g_field is defined for j = 0..capacity-1");
    g_all(xi, p)[j as usize]
}

/// Right-hand side of the load-profile ODE, components k = 0..=C.
pub fn f_field(xi: &[f64], p: &OdeParams) -> Vec<f64> {
    let c = p.capacity as usize;
    debug_assert_eq!(xi.len(), c + 1);
    let lam = p.lambda;
    let g = g_all(xi, p);
    let mut out = vec![0.0; c + 1];
    for k in 0..=c {
        let mut v = 0.0;
        if !p.no_direct {
            if k > 0 {
                v += lam * xi[k - 1];
            }
            if k < c {
                v -= lam * xi[k];
            }
        }
        if k > 0 {
            v += lam * g[k - 1];
        }
        if k < c {
            v -= lam * g[k];
        }
        v -= k as f64 * xi[k];
        if k < c {
            v += (k + 1) as f64 * xi[k + 1];
        }
        out[k] = v;
    }
    out
}

/// Lipschitz constant of the field on the sub-simplex, in the sup norm.
pub fn lipschitz_bound(p: &OdeParams) -> f64 {
    let c = f64::from(p.capacity);
    if p.d == 1 {
        2.0 * p.lambda + 2.0 * c + 6.0
    } else {
        let d = f64::from(p.d);
        8.0 * d * d * (p.lambda + 1.0) * (c + 1.0) * (c + 1.0)
    }
}

/// Fixed-step solution samples, one per RK4 step.
#[derive(Debug, Clone)]
pub struct OdeTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<SimplexVector>,
}

impl OdeTrajectory {
    pub fn end(&self) -> &SimplexVector {
        self.states.last().expect("trajectory holds at least the initial point")
    }

    /// Linear interpolation between stored samples; clamps outside the span.
    pub fn at(&self, t: f64) -> Vec<f64> {
        let times = &self.times;
        if t <= times[0] {
            return self.states[0].as_slice().to_vec();
        }
        if t >= *times.last().unwrap() {
            return self.end().as_slice().to_vec();
        }
        let hi = times.partition_point(|&u| u < t).max(1);
        let (t0, t1) = (times[hi - 1], times[hi]);
        let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
        let a = self.states[hi - 1].as_slice();
        let b = self.states[hi].as_slice();
        a.iter().zip(b).map(|(&x, &y)| x + w * (y - x)).collect()
    }
}

fn rk4_step(xi: &mut [f64], p: &OdeParams, h: f64) {
    let k1 = f_field(xi, p);
    let probe = |base: &[f64], k: &[f64], w: f64| -> Vec<f64> {
        base.iter().zip(k).map(|(&x, &dx)| x + w * dx).collect()
    };
    let k2 = f_field(&probe(xi, &k1, h / 2.0), p);
    let k3 = f_field(&probe(xi, &k2, h / 2.0), p);
    let k4 = f_field(&probe(xi, &k3, h), p);
    for i in 0..xi.len() {
        xi[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// After a step, rounding may push components a hair outside the simplex.
/// Within tolerance the state is repaired (clip, renormalize); beyond it the
/// integration aborts.
fn repair(xi: &mut [f64], t: f64) -> Result<(), OdeError> {
    for (index, value) in xi.iter_mut().enumerate() {
        if *value < -1e-9 {
            return Err(OdeError::LeftSimplex { t, index, value: *value });
        }
        if *value < 0.0 {
            *value = 0.0;
        }
    }
    let sum: f64 = xi.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(OdeError::MassDrift { t, sum });
    }
    for value in xi.iter_mut() {
        *value /= sum;
    }
    Ok(())
}

/// Integrates the profile ODE with explicit RK4 at fixed step h <= 0.5/L.
/// Returns every step point, ending exactly at t0.
pub fn integrate(
    xi0: &SimplexVector,
    p: &OdeParams,
    t0: f64,
    h: f64,
) -> Result<OdeTrajectory, OdeError> {
    if !(t0 >= 0.0 && t0.is_finite()) {
        return Err(OdeError::BadHorizon(t0));
    }
    let max_h = 0.5 / lipschitz_bound(p);
    if h.is_nan() || h <= 0.0 || h > max_h * (1.0 + 1e-12) {
        return Err(OdeError::StepTooLarge { h, max_h });
    }
    let mut xi = xi0.as_slice().to_vec();
    let mut times = vec![0.0];
    let mut states = vec![SimplexVector(xi.clone())];
    let full_steps = (t0 / h).floor() as u64;
    let mut t = 0.0;
    for step in 1..=full_steps {
        rk4_step(&mut xi, p, h);
        t = step as f64 * h;
        repair(&mut xi, t)?;
        times.push(t);
        states.push(SimplexVector(xi.clone()));
    }
    if t0 - t > 1e-12 * t0.max(1.0) {
        rk4_step(&mut xi, p, t0 - t);
        repair(&mut xi, t0)?;
        times.push(t0);
        states.push(SimplexVector(xi.clone()));
    }
    Ok(OdeTrajectory { times, states })
}

fn residual(xi: &[f64], p: &OdeParams) -> f64 {
    f_field(xi, p).iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Stationary profile: integrate from the empty profile until the field is
/// small, then polish with damped fixed-point steps xi <- xi + h F(xi) until
/// the sup-norm residual reaches 1e-12.
pub fn fixed_point(p: &OdeParams) -> Result<SimplexVector, OdeError> {
    let target = 1e-12;
    let h = 0.5 / lipschitz_bound(p);
    let mut xi = SimplexVector::point_mass(p.capacity, 0);
    for _ in 0..400 {
        if residual(xi.as_slice(), p) < 1e-8 {
            break;
        }
        xi = integrate(&xi, p, 5.0, h)?.end().clone();
    }
    let mut v = xi.as_slice().to_vec();
    let mut best = f64::INFINITY;
    let max_iters = 200_000 + (80.0 / h) as usize;
    for _ in 0..max_iters {
        let f = f_field(&v, p);
        let r = f.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        best = best.min(r);
        if r <= target {
            return SimplexVector::new(v);
        }
        for (x, df) in v.iter_mut().zip(&f) {
            *x = (*x + h * df).max(0.0);
        }
        let sum: f64 = v.iter().sum();
        for x in v.iter_mut() {
            *x /= sum;
        }
    }
    Err(OdeError::FixedPointStalled { target, best })
}

/// Explicit constants of the mean-field approximation guarantee, kept in log
/// space: gamma underflows f64 (ln gamma ~ -825 already at unit parameters)
/// and the exponential population threshold exp(8/gamma) overflows even in
/// single-log form, so it is stored as ln ln.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoremConstants {
    pub lambda: f64,
    pub d: u32,
    pub capacity: u32,
    pub t0: f64,
    /// ln of the concentration exponent coefficient gamma.
    pub ln_gamma: f64,
    /// Polynomial part of the population threshold:
    /// 2^18 (lambda + 1/lambda)^4 d^4 (C+1)^6 (t0 + 1/t0)^2.
    pub n0_polynomial_term: f64,
    /// ln ln of the exponential part exp(8/gamma), i.e. ln(8) - ln(gamma).
    pub ln_ln_n0_exponential_term: f64,
    /// Envelope prefactor 64 (lambda+1)(t0+1) d^2 (C+1)^3.
    pub envelope_prefactor: f64,
    /// Exponential growth rate of the envelope: 216 (lambda+1) d^2 (C+1)^3,
    /// improving to 216 (lambda+1)(C+1) when d = 1.
    pub envelope_exponent_rate: f64,
    /// Prefactor 23 (lambda+1)(t0+1) d^2 (C+1)^3 of the aggregate
    /// (network-averaged) version of the envelope, reported alongside the
    /// per-node constant without reconciliation.
    pub global_envelope_prefactor: f64,
}

pub fn theorem_constants(
    lambda: f64,
    d: u32,
    capacity: u32,
    t0: f64,
) -> Result<TheoremConstants, OdeError> {
    if !(lambda > 0.0 && lambda.is_finite() && t0 > 0.0 && t0.is_finite()) || d == 0 || capacity == 0
    {
        return Err(OdeError::BadConstantInputs);
    }
    let c = f64::from(capacity);
    let df = f64::from(d);
    let ln_gamma = -(25.0 * std::f64::consts::LN_2
        + (df.powi(8) + df.powi(4) * c / lambda).ln()
        + 3.0 * (8.0 * lambda * t0 + 1.0).ln()
        + 800.0 * df * lambda * t0);
    let n0_polynomial_term = 2f64.powi(18)
        * (lambda + 1.0 / lambda).powi(4)
        * df.powi(4)
        * (c + 1.0).powi(6)
        * (t0 + 1.0 / t0).powi(2);
    let shape = df * df * (c + 1.0).powi(3);
    let envelope_exponent_rate = if d == 1 {
        216.0 * (lambda + 1.0) * (c + 1.0)
    } else {
        216.0 * (lambda + 1.0) * shape
    };
    Ok(TheoremConstants {
        lambda,
        d,
        capacity,
        t0,
        ln_gamma,
        n0_polynomial_term,
        ln_ln_n0_exponential_term: 8f64.ln() - ln_gamma,
        envelope_prefactor: 64.0 * (lambda + 1.0) * (t0 + 1.0) * shape,
        envelope_exponent_rate,
        global_envelope_prefactor: 23.0 * (lambda + 1.0) * (t0 + 1.0) * shape,
    })
}

impl TheoremConstants {
    /// ln of the deviation envelope for sup_{v,k} |f_[v,k](X_t) - (n-1) xi_t(k)|
    /// on [0, t]: (gap_0 + 64 (lambda+1)(t+1) d^2 (C+1)^3 (n phi_0 +
    /// 3 sqrt(n) ln n)) * exp(rate * t). Nondecreasing in every argument.
    pub fn ln_error_envelope(&self, t: f64, n: u32, phi0: f64, initial_gap: f64) -> f64 {
        let c = f64::from(self.capacity);
        let df = f64::from(self.d);
        let nf = f64::from(n);
        let prefactor = 64.0 * (self.lambda + 1.0) * (t + 1.0) * df * df * (c + 1.0).powi(3);
        let base = initial_gap + prefactor * (nf * phi0 + 3.0 * nf.sqrt() * nf.ln());
        base.ln() + self.envelope_exponent_rate * t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn params(lambda: f64, capacity: u32, d: u32) -> OdeParams {
        OdeParams { lambda, capacity, d, no_direct: false }
    }

    fn random_simplex(rng: &mut ChaCha12Rng, len: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..len).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / sum).collect()
    }

    #[test]
    fn overflow_flux_hand_values() {
        // d=1, C=1, xi = (1/2, 1/2): g_0 = 2 * 1/2 * 1/2 * 1/2 = 1/4.
        let p = params(1.0, 1, 1);
        assert!((g_field(&[0.5, 0.5], &p, 0) - 0.25).abs() < 1e-15);
        // No-direct variant drops the xi(C) factor: g_0 = 1/2.
        let nd = OdeParams { no_direct: true, ..p };
        assert!((g_field(&[0.5, 0.5], &nd, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn d1_overflow_flux_matches_closed_form() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for capacity in [1u32, 2, 3, 5] {
            let p = params(0.7, capacity, 1);
            for _ in 0..200 {
                let xi = random_simplex(&mut rng, capacity as usize + 1);
                let top = xi[capacity as usize];
                for j in 0..capacity {
                    let closed = 2.0 * top * (1.0 - top) * xi[j as usize];
                    assert!((g_field(&xi, &p, j) - closed).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn field_at_the_empty_profile() {
        let p = params(1.0, 3, 2);
        let f = f_field(&[1.0, 0.0, 0.0, 0.0], &p);
        assert_eq!(f, vec![-1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn field_conserves_mass_and_respects_boundaries() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for &(lambda, capacity, d) in &[(1.0, 3, 2), (0.3, 1, 1), (2.5, 4, 3)] {
            let p = params(lambda, capacity, d);
            let nd = OdeParams { no_direct: true, ..p };
            for _ in 0..300 {
                let mut xi = random_simplex(&mut rng, capacity as usize + 1);
                for variant in [&p, &nd] {
                    let sum: f64 = f_field(&xi, variant).iter().sum();
                    assert!(sum.abs() <= 1e-14, "sum {sum}");
                }
                // Zero one component; its field value must be nonnegative.
                let k = rng.random_range(0..xi.len());
                let removed = xi[k];
                xi[k] = 0.0;
                let scale = 1.0 - removed;
                xi.iter_mut().for_each(|x| *x /= scale);
                for variant in [&p, &nd] {
                    assert!(f_field(&xi, variant)[k] >= -1e-14);
                }
            }
        }
    }

    #[test]
    fn lipschitz_values() {
        assert_eq!(lipschitz_bound(&params(1.0, 3, 1)), 14.0);
        assert_eq!(lipschitz_bound(&params(1.0, 3, 2)), 1024.0);
    }

    #[test]
    fn integrate_holds_the_simplex_and_self_converges() {
        let p = params(1.0, 2, 2);
        let h = 0.5 / lipschitz_bound(&p);
        let xi0 = SimplexVector::point_mass(2, 0);
        let coarse = integrate(&xi0, &p, 2.0, h).unwrap();
        let fine = integrate(&xi0, &p, 2.0, h / 2.0).unwrap();
        for state in &coarse.states {
            let sum: f64 = state.as_slice().iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
            assert!(state.as_slice().iter().all(|&x| x >= 0.0));
        }
        let end_gap: f64 = coarse
            .end()
            .as_slice()
            .iter()
            .zip(fine.end().as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(end_gap < 1e-10, "halving the step moved the endpoint by {end_gap}");
        assert_eq!(*coarse.times.last().unwrap(), 2.0);

        let err = integrate(&xi0, &p, 1.0, 1.0).unwrap_err();
        assert!(matches!(err, OdeError::StepTooLarge { .. }));
    }

    #[test]
    fn trajectory_interpolation_is_exact_at_samples() {
        let p = params(1.0, 2, 1);
        let traj = integrate(&SimplexVector::point_mass(2, 0), &p, 1.0, 0.025).unwrap();
        let idx = traj.times.len() / 2;
        assert_eq!(traj.at(traj.times[idx]), traj.states[idx].as_slice().to_vec());
        let past_end = traj.at(10.0);
        assert_eq!(past_end, traj.end().as_slice().to_vec());
    }

    #[test]
    fn fixed_point_kills_the_field() {
        for p in [params(1.0, 1, 1), params(1.0, 3, 2), params(0.05, 2, 1)] {
            let xi = fixed_point(&p).unwrap();
            assert!(residual(xi.as_slice(), &p) <= 1e-12);
        }
        // Light traffic leaves almost all links empty.
        let light = fixed_point(&params(0.05, 2, 1)).unwrap();
        assert!(light.component(0) > 0.9);
    }

    #[test]
    fn constant_values_at_unit_parameters() {
        let tc = theorem_constants(1.0, 1, 1, 1.0).unwrap();
        let expected = -(26.0 * std::f64::consts::LN_2 + 3.0 * 9f64.ln() + 800.0);
        assert!((tc.ln_gamma - expected).abs() < 1e-9);
        assert_eq!(tc.n0_polynomial_term, (1u64 << 30) as f64);
        assert!((tc.ln_ln_n0_exponential_term - (8f64.ln() - expected)).abs() < 1e-9);
        assert_eq!(tc.envelope_exponent_rate, 864.0);
        assert_eq!(tc.envelope_prefactor, 64.0 * 2.0 * 2.0 * 8.0);
        assert_eq!(tc.global_envelope_prefactor, 23.0 * 2.0 * 2.0 * 8.0);
        // d >= 2 keeps the cubic capacity factor in the exponent.
        let tc2 = theorem_constants(1.0, 2, 1, 1.0).unwrap();
        assert_eq!(tc2.envelope_exponent_rate, 216.0 * 2.0 * 4.0 * 8.0);
    }

    #[test]
    fn envelope_is_monotone() {
        let tc = theorem_constants(1.0, 2, 3, 2.0).unwrap();
        let base = tc.ln_error_envelope(1.0, 100, 0.1, 5.0);
        assert!(tc.ln_error_envelope(1.5, 100, 0.1, 5.0) > base);
        assert!(tc.ln_error_envelope(1.0, 100, 0.2, 5.0) > base);
        assert!(tc.ln_error_envelope(1.0, 100, 0.1, 6.0) > base);
    }

    #[test]
    fn simplex_vector_validation() {
        assert!(SimplexVector::new(vec![0.5, 0.5]).is_ok());
        assert!(SimplexVector::new(vec![0.5, 0.5 - 2e-9, 1e-9]).is_ok());
        assert!(matches!(
            SimplexVector::new(vec![0.7, 0.4]),
            Err(OdeError::MassDeviation(_))
        ));
        assert!(matches!(
            SimplexVector::new(vec![1.1, -0.1]),
            Err(OdeError::NegativeComponent { .. })
        ));
    }
}
