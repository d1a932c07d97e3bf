//! Dynamic alternative routing on the complete graph.
//!
//! Calls arrive on every link of K_n at rate lambda and hold for unit-mean
//! exponential times. A call uses its direct link when that link has spare
//! capacity; otherwise d candidate intermediate nodes are drawn uniformly
//! with replacement and the call may be carried on a two-link route through
//! one of them, subject to the configured admission policy. The crate
//! provides exact state bookkeeping, continuous- and discrete-time
//! simulation, a coupling laboratory for pairs of chains, per-node load
//! observables with their exact generator, the mean-field capacity ODE and
//! its explicit approximation constants, and reproducible experiment drivers
//! with CSV output.

pub mod coupling;
pub mod experiments;
pub mod observables;
pub mod ode;
pub mod params;
pub mod routing;
pub mod sim;
pub mod state;

pub use coupling::{
    coupling_growth_experiment, l1_distance, node_distance, perturb_with_direct_calls,
    CoupledPair, CouplingError, GrowthReport, GrowthStep,
};
pub use experiments::{
    apply_config, parse_config, run_concentration, run_coupling, run_generator_check, run_lln,
    run_ode, run_phi_drift, spec_hash, ConcentrationReport, ExperimentError, ExperimentKind,
    ExperimentSpec, GeneratorCheckReport, InitialCondition, LlnReport, OdeReport, PhiDriftReport,
};
pub use observables::{
    cross_statistic, drift_bound_constants, drift_f, drift_profile, g_exact,
    generator_bruteforce, meanfield_gap, phi1_component, phi_report, CrossMode,
    DriftBoundConstants, GapReport, GeneratorEval, JointLoadTable, PhiReport,
};
pub use ode::{
    f_field, fixed_point, g_field, integrate, lipschitz_bound, theorem_constants, OdeParams,
    OdeTrajectory, SimplexVector, TheoremConstants,
};
pub use params::{pair_index, pair_nodes, ModelParams, Node};
pub use routing::{route_call, sample_candidates, PolicyKind, RouteDecision};
pub use sim::{
    default_snapshot_grid, generate_initial_state, replica_rng, run, run_with_stream,
    sample_poisson, step_ctmc, step_jump_chain, Allocation, Mode, SimConfig, Snapshot, StepKind,
    Trajectory,
};
pub use state::{Applied, Call, CallId, Event, NetworkState, RouteTag};
