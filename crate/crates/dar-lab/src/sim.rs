//! Event-driven evolution of a network state.
//!
//! Two modes share the same arrival mechanics. In continuous time, the
//! next event fires after an exponential wait at rate lambda N + m (N
//! links, m live calls) and is an arrival with probability lambda N over
//! that total; a departure removes a uniform live call. The jump chain is
//! the uniformized discrete-time version: each step is an arrival with
//! probability lambda N / (lambda N + floor(6 lambda N)), and otherwise a
//! potential departure that draws one of floor(6 lambda N) numbered slots
//! and removes the call occupying that registry position, if any. The
//! chain freezes (consuming no randomness) whenever the total call count
//! exceeds floor(6 lambda N), so the slot pool always covers the registry.
//!
//! Every arrival consumes randomness in a fixed order: endpoints first,
//! then all d candidates, whether or not the direct link ends up carrying
//! the call. Two chains stepping off one generator therefore stay
//! positionally aligned, which the coupling machinery relies on.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::observables::phi_report;
use crate::observables::PhiReport;
use crate::params::{ModelParams, Node};
use crate::routing::{route_call, sample_candidates, PolicyKind, RouteDecision};
use crate::state::{CallId, Event, NetworkState, StateError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Ctmc,
    JumpChain,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Ctmc => "ctmc",
            Mode::JumpChain => "jump",
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ctmc" => Ok(Mode::Ctmc),
            "jump" | "jumpchain" | "jump-chain" => Ok(Mode::JumpChain),
            other => Err(format!("unknown mode '{other}' (expected ctmc or jump)")),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("snapshot times must be sorted, distinct, and within [0, t0]")]
    BadSnapshotGrid,
    #[error("simulation requires n >= 3 so candidate nodes exist")]
    TooFewNodes,
    #[error("initial state was built for different model parameters")]
    ParamsMismatch,
    #[error("allocation density must be positive and finite, got {0}")]
    BadDensity(f64),
    #[error(transparent)]
    State(#[from] StateError),
}

/// Everything needed to reproduce one run: same config and initial state
/// imply a bit-identical trajectory. In continuous-time mode `t0` is a time
/// horizon; in jump-chain mode its floor is the step budget and snapshot
/// times are read as step indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub params: ModelParams,
    pub policy: PolicyKind,
    pub mode: Mode,
    pub seed: u64,
    pub t0: f64,
    pub snapshot_times: Vec<f64>,
}

impl SimConfig {
    /// Config with the default snapshot grid of 21 equispaced times.
    pub fn new(
        params: ModelParams,
        policy: PolicyKind,
        mode: Mode,
        seed: u64,
        t0: f64,
    ) -> Result<Self, SimError> {
        let config = SimConfig {
            params,
            policy,
            mode,
            seed,
            t0,
            snapshot_times: default_snapshot_grid(t0),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.t0 > 0.0 && self.t0.is_finite()) {
            return Err(SimError::BadHorizon(self.t0));
        }
        if self.params.n < 3 {
            return Err(SimError::TooFewNodes);
        }
        let times = &self.snapshot_times;
        let sorted = times.windows(2).all(|w| w[0] < w[1]);
        let in_range = times.iter().all(|&t| (0.0..=self.t0).contains(&t) && t.is_finite());
        if !(sorted && in_range) {
            return Err(SimError::BadSnapshotGrid);
        }
        Ok(())
    }
}

pub fn default_snapshot_grid(t0: f64) -> Vec<f64> {
    (0..=20).map(|i| t0 * f64::from(i) / 20.0).collect()
}

/// What one step did to the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Arrival { u: Node, v: Node, decision: RouteDecision },
    Departure { id: CallId },
    /// Potential-departure slot above the live-call count; nothing moved.
    EmptySlot,
    /// The chain is outside its admissible region; no randomness consumed.
    Frozen,
}

/// The per-replica generator: one master seed, replica index as the stream.
/// Streams of one seed never overlap, so replicas are independent yet fully
/// reproducible in parallel.
pub fn replica_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Total event rate and arrival probability of the next continuous-time
/// event from this state.
pub fn ctmc_rates(state: &NetworkState) -> (f64, f64) {
    let arrivals = state.params().arrival_rate();
    let total = arrivals + state.num_calls() as f64;
    (total, arrivals / total)
}

/// Arrival probability of one jump-chain step.
pub fn jump_arrival_probability(params: &ModelParams) -> f64 {
    let arrivals = params.arrival_rate();
    arrivals / (arrivals + params.jump_slots() as f64)
}

pub(crate) fn draw_endpoints<R: Rng + ?Sized>(rng: &mut R, n: u32) -> (Node, Node) {
    let u = rng.random_range(0..n);
    let mut v = rng.random_range(0..n - 1);
    if v >= u {
        v += 1;
    }
    (u, v)
}

/// Routes a call with an already-drawn candidate tuple and applies the
/// resulting event, if any.
pub(crate) fn route_and_apply(
    state: &mut NetworkState,
    policy: PolicyKind,
    u: Node,
    v: Node,
    candidates: &[Node],
) -> StepKind {
    let decision = route_call(state, policy, u, v, candidates)
        .expect("drawn endpoints and candidates are always admissible");
    let event = match decision {
        RouteDecision::Direct => Some(Event::DirectArrival { u, v }),
        RouteDecision::Via { node, .. } => Some(Event::AltArrival { u, v, via: node }),
        RouteDecision::Blocked => None,
    };
    if let Some(event) = event {
        state.apply_event(event).expect("the routing decision respects capacities");
    }
    StepKind::Arrival { u, v, decision }
}

fn apply_arrival<R: Rng + ?Sized>(
    state: &mut NetworkState,
    policy: PolicyKind,
    rng: &mut R,
    candidates: &mut Vec<Node>,
) -> StepKind {
    let params = *state.params();
    let (u, v) = draw_endpoints(rng, params.n);
    sample_candidates(rng, params.n, u, v, params.d, candidates);
    route_and_apply(state, policy, u, v, candidates)
}

/// Advances the state by one continuous-time event and returns the elapsed
/// time together with what happened.
pub fn step_ctmc<R: Rng + ?Sized>(
    state: &mut NetworkState,
    policy: PolicyKind,
    rng: &mut R,
) -> (f64, StepKind) {
    let mut candidates = Vec::new();
    step_ctmc_with(state, policy, rng, &mut candidates)
}

fn step_ctmc_with<R: Rng + ?Sized>(
    state: &mut NetworkState,
    policy: PolicyKind,
    rng: &mut R,
    candidates: &mut Vec<Node>,
) -> (f64, StepKind) {
    let (total, p_arrival) = ctmc_rates(state);
    // 1 - U lies in (0, 1], keeping the logarithm finite.
    let dt = -(1.0 - rng.random::<f64>()).ln() / total;
    let kind = if rng.random::<f64>() < p_arrival {
        apply_arrival(state, policy, rng, candidates)
    } else {
        let index = rng.random_range(0..state.num_calls());
        let id = state.calls()[index].id;
        state.apply_event(Event::Departure { id }).expect("registry index is live");
        StepKind::Departure { id }
    };
    (dt, kind)
}

/// Advances the state by one uniformized step. Outside the admissible
/// region the chain does not move and the generator is left untouched.
pub fn step_jump_chain<R: Rng + ?Sized>(
    state: &mut NetworkState,
    policy: PolicyKind,
    rng: &mut R,
) -> StepKind {
    let mut candidates = Vec::new();
    step_jump_chain_with(state, policy, rng, &mut candidates)
}

pub(crate) fn step_jump_chain_with<R: Rng + ?Sized>(
    state: &mut NetworkState,
    policy: PolicyKind,
    rng: &mut R,
    candidates: &mut Vec<Node>,
) -> StepKind {
    if !state.in_s_tilde() {
        return StepKind::Frozen;
    }
    let params = *state.params();
    if rng.random::<f64>() < jump_arrival_probability(&params) {
        apply_arrival(state, policy, rng, candidates)
    } else {
        let slot = rng.random_range(0..params.jump_slots());
        if (slot as usize) < state.num_calls() {
            let id = state.calls()[slot as usize].id;
            state.apply_event(Event::Departure { id }).expect("slot index is live");
            StepKind::Departure { id }
        } else {
            StepKind::EmptySlot
        }
    }
}

/// State of one observation instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    /// f-profile of every node, indexed by node id.
    pub f_profiles: Vec<Vec<u32>>,
    pub phi: PhiReport,
    pub norm1: u64,
    /// Blocked arrivals seen so far in this run.
    pub blocked: u64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    pub final_state: NetworkState,
    pub events: u64,
    pub arrival_attempts: u64,
    pub blocked: u64,
}

fn capture(state: &NetworkState, time: f64, blocked: u64) -> Result<Snapshot, SimError> {
    state.validate()?;
    let n = state.params().n;
    Ok(Snapshot {
        time,
        f_profiles: (0..n).map(|v| state.f_profile(v)).collect(),
        phi: phi_report(state).expect("run() enforces n >= 3"),
        norm1: state.norm1(),
        blocked,
    })
}

/// Runs one replica on stream 0 of the configured seed.
pub fn run(config: &SimConfig, initial: &NetworkState) -> Result<Trajectory, SimError> {
    run_with_stream(config, initial, 0)
}

/// Runs one replica on the given RNG stream. Snapshots record the state
/// immediately before the first event at or past each snapshot time (in
/// jump-chain mode: the state after floor(time) steps).
pub fn run_with_stream(
    config: &SimConfig,
    initial: &NetworkState,
    stream: u64,
) -> Result<Trajectory, SimError> {
    config.validate()?;
    if initial.params() != &config.params {
        return Err(SimError::ParamsMismatch);
    }
    let mut rng = replica_rng(config.seed, stream);
    let mut state = initial.clone();
    let mut candidates = Vec::new();
    let mut snapshots = Vec::with_capacity(config.snapshot_times.len());
    let mut events = 0u64;
    let mut arrival_attempts = 0u64;
    let mut blocked = 0u64;
    let record = |kind: &StepKind, arrivals: &mut u64, blocked: &mut u64| {
        if let StepKind::Arrival { decision, .. } = kind {
            *arrivals += 1;
            if *decision == RouteDecision::Blocked {
                *blocked += 1;
            }
        }
    };
    match config.mode {
        Mode::Ctmc => {
            let mut t = 0.0;
            let mut snap = 0;
            loop {
                let (total, _) = ctmc_rates(&state);
                let dt = -(1.0 - rng.random::<f64>()).ln() / total;
                let next = t + dt;
                while snap < config.snapshot_times.len() && config.snapshot_times[snap] <= next {
                    snapshots.push(capture(&state, config.snapshot_times[snap], blocked)?);
                    snap += 1;
                }
                if next > config.t0 {
                    break;
                }
                // Re-draw nothing: the wait is already consumed, finish the
                // event with the same draw sequence as step_ctmc.
                let (_, p_arrival) = ctmc_rates(&state);
                let kind = if rng.random::<f64>() < p_arrival {
                    apply_arrival(&mut state, config.policy, &mut rng, &mut candidates)
                } else {
                    let index = rng.random_range(0..state.num_calls());
                    let id = state.calls()[index].id;
                    state.apply_event(Event::Departure { id })?;
                    StepKind::Departure { id }
                };
                record(&kind, &mut arrival_attempts, &mut blocked);
                events += 1;
                t = next;
            }
        }
        Mode::JumpChain => {
            let steps = config.t0.floor() as u64;
            let mut snap = 0;
            for step in 0..=steps {
                while snap < config.snapshot_times.len()
                    && config.snapshot_times[snap].floor() as u64 <= step
                {
                    snapshots.push(capture(&state, config.snapshot_times[snap], blocked)?);
                    snap += 1;
                }
                if step == steps {
                    break;
                }
                let kind =
                    step_jump_chain_with(&mut state, config.policy, &mut rng, &mut candidates);
                record(&kind, &mut arrival_attempts, &mut blocked);
                events += 1;
            }
        }
    }
    Ok(Trajectory { snapshots, final_state: state, events, arrival_attempts, blocked })
}

/// Result of seeding a network with an initial batch of calls.
#[derive(Debug, Clone)]
pub struct Allocation {
    pub state: NetworkState,
    /// floor(c0 N) placement attempts were made.
    pub attempts: u64,
    pub placed: u64,
    pub lost: u64,
}

/// Throws floor(c0 N) calls onto an empty network one at a time, each with
/// uniform endpoints and balanced-policy routing; attempts that find no
/// room are lost.
pub fn generate_initial_state<R: Rng + ?Sized>(
    rng: &mut R,
    params: ModelParams,
    c0: f64,
) -> Result<Allocation, SimError> {
    if !(c0 > 0.0 && c0.is_finite()) {
        return Err(SimError::BadDensity(c0));
    }
    if params.n < 3 {
        return Err(SimError::TooFewNodes);
    }
    let attempts = (c0 * params.n_links() as f64).floor() as u64;
    let mut state = NetworkState::new(params);
    let mut candidates = Vec::new();
    let mut lost = 0u64;
    for _ in 0..attempts {
        if let StepKind::Arrival { decision: RouteDecision::Blocked, .. } =
            apply_arrival(&mut state, PolicyKind::Bdar, rng, &mut candidates)
        {
            lost += 1;
        }
    }
    Ok(Allocation { state, attempts, placed: attempts - lost, lost })
}

/// Poisson sample via exponential waiting products, chunked so the running
/// product never underflows for large means.
pub fn sample_poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    assert!(mean >= 0.0 && mean.is_finite());
    let mut remaining = mean;
    let mut count = 0u64;
    while remaining > 0.0 {
        let chunk = remaining.min(500.0);
        remaining -= chunk;
        let threshold = (-chunk).exp();
        let mut product = 1.0;
        loop {
            product *= 1.0 - rng.random::<f64>();
            if product <= threshold {
                break;
            }
            count += 1;
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::RouteTag;

    fn params(n: u32, capacity: u32, d: u32, lambda: f64) -> ModelParams {
        ModelParams::new(n, capacity, d, lambda).unwrap()
    }

    #[test]
    fn rates_and_probabilities() {
        let p = params(3, 7, 1, 1.0);
        let mut state = NetworkState::new(p);
        for _ in 0..4 {
            state.apply_event(Event::DirectArrival { u: 0, v: 1 }).unwrap();
        }
        let (total, p_arrival) = ctmc_rates(&state);
        assert_eq!(total, 7.0);
        assert_eq!(p_arrival, 3.0 / 7.0);
        assert_eq!(jump_arrival_probability(&p), 1.0 / 7.0);
    }

    #[test]
    fn frozen_chain_consumes_no_randomness() {
        // 19 direct calls on 3 links exceeds the 18 slots, so the chain
        // must freeze and leave the generator position untouched.
        let p = params(3, 7, 1, 1.0);
        let mut state = NetworkState::new(p);
        for i in 0..19u32 {
            let (u, v) = [(0, 1), (0, 2), (1, 2)][(i % 3) as usize];
            if state.link_load(u, v) < 7 {
                state.apply_event(Event::DirectArrival { u, v }).unwrap();
            } else {
                state.apply_event(Event::DirectArrival { u: 0, v: 1 }).unwrap();
            }
        }
        assert_eq!(state.norm1(), 19);
        assert!(!state.in_s_tilde());
        let mut rng = replica_rng(9, 0);
        let before = rng.get_word_pos();
        let loads_before = state.loads().to_vec();
        let kind = step_jump_chain(&mut state, PolicyKind::Bdar, &mut rng);
        assert_eq!(kind, StepKind::Frozen);
        assert_eq!(rng.get_word_pos(), before);
        assert_eq!(state.loads(), &loads_before[..]);
        assert_eq!(state.norm1(), 19);
    }

    #[test]
    fn runs_are_deterministic_per_seed() {
        let p = params(8, 2, 2, 1.0);
        let initial = NetworkState::new(p);
        for mode in [Mode::Ctmc, Mode::JumpChain] {
            let t0 = match mode {
                Mode::Ctmc => 2.0,
                Mode::JumpChain => 400.0,
            };
            let config = SimConfig::new(p, PolicyKind::Bdar, mode, 77, t0).unwrap();
            let a = run(&config, &initial).unwrap();
            let b = run(&config, &initial).unwrap();
            assert_eq!(a.snapshots, b.snapshots);
            assert_eq!(a.events, b.events);
            assert_eq!(a.blocked, b.blocked);
            assert!(a.snapshots.windows(2).all(|w| w[0].time < w[1].time));
            // Different streams diverge.
            let c = run_with_stream(&config, &initial, 1).unwrap();
            assert_ne!(
                a.final_state.loads(),
                c.final_state.loads(),
                "independent streams should not shadow each other"
            );
        }
    }

    #[test]
    fn vanishing_rate_means_no_events() {
        let p = params(6, 2, 1, 1e-9);
        let config = SimConfig::new(p, PolicyKind::Bdar, Mode::Ctmc, 5, 1.0).unwrap();
        let trajectory = run(&config, &NetworkState::new(p)).unwrap();
        for snapshot in &trajectory.snapshots {
            for profile in &snapshot.f_profiles {
                assert_eq!(profile[0], 5);
            }
        }
        assert_eq!(trajectory.events, 0);
    }

    #[test]
    fn arrival_counts_match_the_poisson_mean() {
        let p = params(10, 3, 2, 1.0);
        let config = SimConfig::new(p, PolicyKind::Bdar, Mode::Ctmc, 2024, 1.0).unwrap();
        let initial = NetworkState::new(p);
        let replicas = 60;
        let mut total = 0.0;
        for r in 0..replicas {
            total += run_with_stream(&config, &initial, r).unwrap().arrival_attempts as f64;
        }
        let mean = total / replicas as f64;
        let expected = p.arrival_rate() * 1.0;
        let se = (expected / replicas as f64).sqrt();
        assert!(
            (mean - expected).abs() <= 3.0 * se,
            "mean {mean} vs expected {expected} (se {se})"
        );
    }

    #[test]
    fn snapshot_semantics_hold_at_the_horizon() {
        let p = params(6, 2, 1, 1.0);
        let config = SimConfig::new(p, PolicyKind::Bdar, Mode::Ctmc, 3, 1.5).unwrap();
        let trajectory = run(&config, &NetworkState::new(p)).unwrap();
        assert_eq!(trajectory.snapshots.len(), 21);
        let last = trajectory.snapshots.last().unwrap();
        assert_eq!(last.time, 1.5);
        let final_profiles: Vec<Vec<u32>> =
            (0..6).map(|v| trajectory.final_state.f_profile(v)).collect();
        assert_eq!(last.f_profiles, final_profiles);
    }

    #[test]
    fn jump_snapshots_index_steps() {
        let p = params(6, 2, 1, 1.0);
        let mut config = SimConfig::new(p, PolicyKind::Bdar, Mode::JumpChain, 11, 10.0).unwrap();
        config.snapshot_times = vec![0.0, 2.5, 10.0];
        let trajectory = run(&config, &NetworkState::new(p)).unwrap();
        assert_eq!(trajectory.snapshots.len(), 3);
        // Replay manually: the 2.5 snapshot is the state after 2 steps.
        let mut state = NetworkState::new(p);
        let mut rng = replica_rng(11, 0);
        for _ in 0..2 {
            step_jump_chain(&mut state, PolicyKind::Bdar, &mut rng);
        }
        let expected: Vec<Vec<u32>> = (0..6).map(|v| state.f_profile(v)).collect();
        assert_eq!(trajectory.snapshots[1].f_profiles, expected);
    }

    #[test]
    fn allocation_accounting() {
        let p = params(10, 1, 1, 1.0);
        let mut rng = replica_rng(1, 0);
        // floor(c0 N) = 1 on an empty network: a single direct call.
        let one = generate_initial_state(&mut rng, p, 1.0 / 45.0).unwrap();
        assert_eq!(one.attempts, 1);
        assert_eq!(one.placed, 1);
        assert_eq!(one.lost, 0);
        assert_eq!(one.state.num_calls(), 1);
        assert_eq!(one.state.calls()[0].route, RouteTag::Direct);
        // Heavy overload: everything fills up and the ledger balances.
        let heavy = generate_initial_state(&mut rng, p, 10.0).unwrap();
        assert_eq!(heavy.attempts, 450);
        assert_eq!(heavy.placed + heavy.lost, heavy.attempts);
        assert!(heavy.lost > 0);
        assert_eq!(heavy.placed as usize, heavy.state.num_calls());
        heavy.state.validate().unwrap();
    }

    #[test]
    fn poisson_sampler_matches_moments() {
        let mut rng = replica_rng(40, 0);
        for &mean in &[0.5, 4.0, 40.0, 1200.0] {
            let draws = 4000;
            let mut sum = 0.0;
            for _ in 0..draws {
                sum += sample_poisson(&mut rng, mean) as f64;
            }
            let sample_mean = sum / draws as f64;
            let se = (mean / draws as f64).sqrt();
            assert!(
                (sample_mean - mean).abs() <= 4.0 * se,
                "mean {mean}: got {sample_mean} (se {se})"
            );
        }
        assert_eq!(sample_poisson(&mut rng, 0.0), 0);
    }

    #[test]
    fn config_validation() {
        let p = params(6, 2, 1, 1.0);
        assert!(matches!(
            SimConfig::new(p, PolicyKind::Bdar, Mode::Ctmc, 0, 0.0),
            Err(SimError::BadHorizon(_))
        ));
        let mut config = SimConfig::new(p, PolicyKind::Bdar, Mode::Ctmc, 0, 1.0).unwrap();
        config.snapshot_times = vec![0.5, 0.25];
        assert_eq!(config.validate(), Err(SimError::BadSnapshotGrid));
        config.snapshot_times = vec![0.5, 2.0];
        assert_eq!(config.validate(), Err(SimError::BadSnapshotGrid));
        let other = params(7, 2, 1, 1.0);
        let config = SimConfig::new(p, PolicyKind::Bdar, Mode::Ctmc, 0, 1.0).unwrap();
        assert!(matches!(
            run(&config, &NetworkState::new(other)),
            Err(SimError::ParamsMismatch)
        ));
    }
}
