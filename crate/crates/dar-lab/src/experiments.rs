//! End-to-end experiment drivers with reproducible, machine-readable output.
//!
//! Each driver takes an [`ExperimentSpec`], fans replicas out over a worker
//! pool (replica r always uses RNG stream r, so results do not depend on
//! thread scheduling), aggregates in replica order, and optionally writes
//! CSV files plus a flat key-value run manifest into an output directory.
//! A spec with a fixed seed produces byte-identical reports and files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::coupling::{
    coupling_growth_experiment, perturb_with_direct_calls, CouplingError, GrowthReport,
};
use crate::observables::{
    drift_bound_constants, drift_f, generator_bruteforce, meanfield_gap, phi1_component,
    phi_report, DriftBoundConstants, ObsError, PhiReport,
};
use crate::ode::{
    integrate, lipschitz_bound, theorem_constants, OdeError, OdeParams, OdeTrajectory,
    SimplexVector, TheoremConstants,
};
use crate::params::{ModelParams, Node, ParamError};
use crate::routing::PolicyKind;
use crate::sim::{
    generate_initial_state, replica_rng, run_with_stream, step_jump_chain, Mode, SimConfig,
    SimError, Trajectory,
};
use crate::state::{NetworkState, SnapshotError};

/// RNG streams below this base drive simulation replicas; streams at and
/// above it draw initial allocations and other auxiliary randomness.
const INIT_STREAM_BASE: u64 = 1 << 32;
const NODE_SAMPLE_STREAM: u64 = (1 << 32) - 1;
const TUPLE_STREAM: u64 = (1 << 32) - 2;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("experiment spec: {0}")]
    BadSpec(String),
    #[error("config line {line}: {message}")]
    BadConfig { line: usize, message: String },
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error(transparent)]
    Observables(#[from] ObsError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Lln,
    Concentration,
    PhiDrift,
    CouplingGrowth,
    GeneratorCheck,
    OdeOnly,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Lln => "lln",
            ExperimentKind::Concentration => "conc",
            ExperimentKind::PhiDrift => "phi",
            ExperimentKind::CouplingGrowth => "couple",
            ExperimentKind::GeneratorCheck => "gencheck",
            ExperimentKind::OdeOnly => "ode",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lln" => Ok(ExperimentKind::Lln),
            "conc" => Ok(ExperimentKind::Concentration),
            "phi" => Ok(ExperimentKind::PhiDrift),
            "couple" => Ok(ExperimentKind::CouplingGrowth),
            "gencheck" => Ok(ExperimentKind::GeneratorCheck),
            "ode" => Ok(ExperimentKind::OdeOnly),
            other => Err(format!("unknown experiment kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    Empty,
    /// Sequential random placement of floor(c0 N) calls.
    RandomAllocation { c0: f64 },
    /// A state snapshot previously written by the state module.
    FromFile(PathBuf),
}

impl InitialCondition {
    fn describe(&self) -> String {
        match self {
            InitialCondition::Empty => "empty".into(),
            InitialCondition::RandomAllocation { c0 } => format!("random(c0={c0})"),
            InitialCondition::FromFile(p) => format!("file({})", p.display()),
        }
    }
}

/// Full description of one experiment run. All randomness derives from
/// `sim.seed`; everything else is plain configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub sim: SimConfig,
    pub ode: OdeParams,
    /// Network sizes to sweep; drivers that use a single size take the
    /// configured `sim.params.n` and ignore the grid.
    pub n_grid: Vec<u32>,
    pub replicas: u64,
    pub initial: InitialCondition,
    pub output_dir: Option<PathBuf>,
    /// Draw a fresh initial allocation per replica instead of sharing one.
    pub redraw_initial: bool,
    /// Extra direct calls separating y0 from x0 in coupling runs.
    pub l1_offset: u64,
    pub coupling_steps: u64,
    /// Sampled (u, v, j, k) tuples tracked for per-step increments.
    pub drift_tuples: u32,
    /// Steps between full phi evaluations on the drift path.
    pub phi_stride: u64,
    /// Sup-over-nodes statistics subsample this many nodes when n > 200.
    pub node_sample: u32,
    /// Probed states in the generator check, and steps between probes.
    pub gen_states: u32,
    pub gen_events: u32,
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind, sim: SimConfig) -> Self {
        let ode = OdeParams::from(&sim.params);
        ExperimentSpec {
            kind,
            ode,
            n_grid: vec![sim.params.n],
            replicas: 1,
            initial: InitialCondition::Empty,
            output_dir: None,
            redraw_initial: false,
            l1_offset: 10,
            coupling_steps: 500,
            drift_tuples: 32,
            phi_stride: 64,
            node_sample: 64,
            gen_states: 100,
            gen_events: 30,
            sim,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.sim.validate()?;
        let p = &self.sim.params;
        if self.ode.lambda != p.lambda || self.ode.capacity != p.capacity || self.ode.d != p.d {
            return Err(ExperimentError::BadSpec(
                "ODE parameters must mirror the simulation parameters".into(),
            ));
        }
        if self.n_grid.is_empty() {
            return Err(ExperimentError::BadSpec("n_grid must be nonempty".into()));
        }
        match self.kind {
            ExperimentKind::OdeOnly => {}
            ExperimentKind::Concentration => {
                if self.replicas < 50 {
                    return Err(ExperimentError::BadSpec(
                        "spread estimates need at least 50 replicas".into(),
                    ));
                }
                if self.sim.mode != Mode::Ctmc {
                    return Err(ExperimentError::BadSpec(
                        "concentration runs compare physical-time laws; use ctmc mode".into(),
                    ));
                }
            }
            ExperimentKind::Lln => {
                if self.replicas == 0 {
                    return Err(ExperimentError::BadSpec("replicas must be at least 1".into()));
                }
                if self.sim.mode != Mode::Ctmc {
                    return Err(ExperimentError::BadSpec(
                        "the ODE comparison lives in physical time; use ctmc mode".into(),
                    ));
                }
            }
            ExperimentKind::PhiDrift => {
                if self.sim.mode != Mode::JumpChain {
                    return Err(ExperimentError::BadSpec(
                        "per-step increments are defined on the jump chain; use jump mode".into(),
                    ));
                }
                if self.replicas == 0 {
                    return Err(ExperimentError::BadSpec("replicas must be at least 1".into()));
                }
            }
            ExperimentKind::CouplingGrowth | ExperimentKind::GeneratorCheck => {
                if self.replicas == 0 {
                    return Err(ExperimentError::BadSpec("replicas must be at least 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Flat key-value rendering of the resolved spec; the manifest contract.
    pub fn manifest_lines(&self) -> Vec<(String, String)> {
        let p = &self.sim.params;
        let times = self
            .sim
            .snapshot_times
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let grid = self.n_grid.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("kind".into(), self.kind.name().into()),
            ("n".into(), p.n.to_string()),
            ("capacity".into(), p.capacity.to_string()),
            ("d".into(), p.d.to_string()),
            ("lambda".into(), p.lambda.to_string()),
            ("policy".into(), self.sim.policy.name().into()),
            ("mode".into(), self.sim.mode.name().into()),
            ("seed".into(), self.sim.seed.to_string()),
            ("t0".into(), self.sim.t0.to_string()),
            ("snapshot_times".into(), times),
            ("no_direct".into(), self.ode.no_direct.to_string()),
            ("n_grid".into(), grid),
            ("replicas".into(), self.replicas.to_string()),
            ("initial".into(), self.initial.describe()),
            ("redraw_initial".into(), self.redraw_initial.to_string()),
            ("l1_offset".into(), self.l1_offset.to_string()),
            ("coupling_steps".into(), self.coupling_steps.to_string()),
            ("drift_tuples".into(), self.drift_tuples.to_string()),
            ("phi_stride".into(), self.phi_stride.to_string()),
            ("node_sample".into(), self.node_sample.to_string()),
            ("gen_states".into(), self.gen_states.to_string()),
            ("gen_events".into(), self.gen_events.to_string()),
        ]
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Stable content hash of the resolved spec; stamped into manifests so a
/// report can be traced back to the exact configuration that produced it.
pub fn spec_hash(spec: &ExperimentSpec) -> u64 {
    let mut text = String::new();
    for (k, v) in spec.manifest_lines() {
        text.push_str(&k);
        text.push('=');
        text.push_str(&v);
        text.push('\n');
    }
    fnv1a64(text.as_bytes())
}

fn write_manifest(
    dir: &Path,
    spec: &ExperimentSpec,
    extra: &[(String, String)],
) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(fs::File::create(dir.join("run_manifest.txt"))?);
    for (k, v) in spec.manifest_lines() {
        writeln!(out, "{k}={v}")?;
    }
    // The directory is provenance for the copy on disk, not part of the
    // experiment identity, so it stays outside the hashed lines.
    writeln!(out, "output_dir={}", dir.display())?;
    writeln!(out, "spec_hash={:016x}", spec_hash(spec))?;
    for (k, v) in extra {
        writeln!(out, "{k}={v}")?;
    }
    out.flush()?;
    Ok(())
}

fn write_csv(dir: &Path, name: &str, header: &str, rows: &[String]) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(fs::File::create(dir.join(name))?);
    writeln!(out, "{header}")?;
    for row in rows {
        writeln!(out, "{row}")?;
    }
    out.flush()?;
    Ok(())
}

/// Builds the initial state for the given parameter set. Allocation draws
/// use dedicated RNG streams so they never collide with replica streams;
/// `variant` 0 is the shared draw, variant r + 1 the per-replica redraw.
fn initial_state(
    spec: &ExperimentSpec,
    params: ModelParams,
    variant: u64,
) -> Result<NetworkState, ExperimentError> {
    match &spec.initial {
        InitialCondition::Empty => Ok(NetworkState::new(params)),
        InitialCondition::RandomAllocation { c0 } => {
            let mut rng = replica_rng(spec.sim.seed, INIT_STREAM_BASE + variant);
            Ok(generate_initial_state(&mut rng, params, *c0)?.state)
        }
        InitialCondition::FromFile(path) => {
            let file = fs::File::open(path)?;
            let state = NetworkState::read_snapshot(std::io::BufReader::new(file))?;
            if state.params() != &params {
                return Err(ExperimentError::BadSpec(format!(
                    "snapshot {} was written for different parameters",
                    path.display()
                )));
            }
            Ok(state)
        }
    }
}

/// The nodes entering sup-over-nodes statistics: everything up to n = 200,
/// a seeded uniform subsample (sorted) above that.
fn sample_nodes(n: u32, sample: u32, seed: u64) -> Vec<Node> {
    if n <= 200 || sample == 0 || sample >= n {
        return (0..n).collect();
    }
    let mut rng = replica_rng(seed, NODE_SAMPLE_STREAM);
    let mut pool: Vec<Node> = (0..n).collect();
    for i in 0..sample as usize {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut chosen = pool[..sample as usize].to_vec();
    chosen.sort_unstable();
    chosen
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    if m == 0 {
        return f64::NAN;
    }
    if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    }
}

/// ODE trajectory for one network size, started from the load profile of
/// node 0 of the initial state.
fn ode_from_state(
    spec: &ExperimentSpec,
    x0: &NetworkState,
    t0: f64,
) -> Result<OdeTrajectory, ExperimentError> {
    let n = x0.params().n;
    let profile = x0.f_profile(0);
    let denom = f64::from(n - 1);
    let xi0 = SimplexVector::new(profile.iter().map(|&c| f64::from(c) / denom).collect())?;
    let h = 0.5 / lipschitz_bound(&spec.ode);
    Ok(integrate(&xi0, &spec.ode, t0, h)?)
}

// ---------------------------------------------------------------------------
// Law-of-large-numbers sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LlnEntry {
    pub n: u32,
    /// Sup over snapshot times, sampled nodes, and load levels of
    /// |f_{v,k}/(n-1) - xi_t(k)|, one value per replica in replica order.
    pub errors: Vec<f64>,
    pub median_error: f64,
    pub max_error: f64,
    /// median * sqrt(n) / ln(n); roughly flat when the error scales like
    /// ln(n)/sqrt(n).
    pub scaled_median: f64,
}

#[derive(Debug, Clone)]
pub struct LlnReport {
    pub entries: Vec<LlnEntry>,
    pub seed: u64,
    pub spec_hash: u64,
}

fn sup_error(traj: &Trajectory, ode: &OdeTrajectory, nodes: &[Node], n: u32) -> f64 {
    let denom = f64::from(n - 1);
    let mut worst = 0.0f64;
    for snap in &traj.snapshots {
        let xi = ode.at(snap.time);
        for &v in nodes {
            for (k, &count) in snap.f_profiles[v as usize].iter().enumerate() {
                worst = worst.max((f64::from(count) / denom - xi[k]).abs());
            }
        }
    }
    worst
}

/// Runs the empirical law-of-large-numbers sweep: for every n in the grid,
/// `replicas` simulation runs are compared against one ODE solution started
/// from node 0's initial profile.
pub fn run_lln(spec: &ExperimentSpec) -> Result<LlnReport, ExperimentError> {
    spec.validate()?;
    let seed = spec.sim.seed;
    let mut entries = Vec::with_capacity(spec.n_grid.len());
    let mut extra = Vec::new();

    for &n in &spec.n_grid {
        let base = spec.sim.params;
        let params = ModelParams::new(n, base.capacity, base.d, base.lambda)?;
        let config = SimConfig { params, ..spec.sim.clone() };
        let x0 = initial_state(spec, params, 0)?;
        let ode = ode_from_state(spec, &x0, spec.sim.t0)?;
        let nodes = sample_nodes(n, spec.node_sample, seed);

        let trajectories: Vec<Trajectory> = (0..spec.replicas)
            .into_par_iter()
            .map(|r| {
                let initial = if spec.redraw_initial {
                    initial_state(spec, params, r + 1)?
                } else {
                    x0.clone()
                };
                Ok(run_with_stream(&config, &initial, r)?)
            })
            .collect::<Result<_, ExperimentError>>()?;

        let errors: Vec<f64> =
            trajectories.iter().map(|t| sup_error(t, &ode, &nodes, n)).collect();
        let median_error = median(&errors);
        let max_error = errors.iter().cloned().fold(0.0, f64::max);
        let scaled_median = median_error * f64::from(n).sqrt() / f64::from(n).ln();

        if let Some(dir) = &spec.output_dir {
            let mut f_rows = Vec::new();
            let mut phi_rows = Vec::new();
            for (r, traj) in trajectories.iter().enumerate() {
                for snap in &traj.snapshots {
                    let t = snap.time;
                    for &v in &nodes {
                        for (k, &count) in snap.f_profiles[v as usize].iter().enumerate() {
                            f_rows.push(format!("{t},{r},{v},{k},{count}"));
                        }
                    }
                    phi_rows.push(format!(
                        "{t},{r},{},{},{},{},{}",
                        snap.phi.phi1, snap.phi.phi2, snap.phi.phi3, snap.norm1, snap.blocked
                    ));
                }
            }
            write_csv(dir, &format!("lln_f_n{n}.csv"), "t,replica,v,k,f_vk", &f_rows)?;
            write_csv(
                dir,
                &format!("lln_phi_n{n}.csv"),
                "t,replica,phi1,phi2,phi3,norm1,blocked",
                &phi_rows,
            )?;
            let ode_rows = ode_rows_at(&ode, &spec.sim.snapshot_times);
            write_csv(dir, &format!("lln_ode_n{n}.csv"), "t,k,xi_k", &ode_rows)?;
        }
        extra.push((format!("median_error_n{n}"), median_error.to_string()));
        extra.push((format!("scaled_median_n{n}"), scaled_median.to_string()));

        entries.push(LlnEntry { n, errors, median_error, max_error, scaled_median });
    }

    if let Some(dir) = &spec.output_dir {
        let rows: Vec<String> = entries
            .iter()
            .flat_map(|e| {
                e.errors
                    .iter()
                    .enumerate()
                    .map(move |(r, err)| format!("{},{r},{err}", e.n))
            })
            .collect();
        write_csv(dir, "lln_errors.csv", "n,replica,sup_error", &rows)?;
        write_manifest(dir, spec, &extra)?;
    }
    Ok(LlnReport { entries, seed, spec_hash: spec_hash(spec) })
}

fn ode_rows_at(ode: &OdeTrajectory, times: &[f64]) -> Vec<String> {
    let mut rows = Vec::new();
    for &t in times {
        let xi = ode.at(t);
        for (k, x) in xi.iter().enumerate() {
            rows.push(format!("{t},{k},{x}"));
        }
    }
    rows
}

// ---------------------------------------------------------------------------
// Concentration spreads
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct SpreadCell {
    pub t: f64,
    pub v: Node,
    pub k: u32,
    pub mean: f64,
    /// Sample standard deviation across replicas.
    pub sd: f64,
    /// Largest absolute deviation from the mean across replicas.
    pub max_dev: f64,
}

#[derive(Debug, Clone)]
pub struct ConcentrationEntry {
    pub n: u32,
    pub cells: Vec<SpreadCell>,
    /// max over cells of sd / sqrt(n).
    pub max_sd_scaled: f64,
    /// max over cells of max_dev / (sqrt(n) ln n).
    pub max_dev_scaled: f64,
}

#[derive(Debug, Clone)]
pub struct ConcentrationReport {
    pub entries: Vec<ConcentrationEntry>,
    pub seed: u64,
    pub spec_hash: u64,
}

/// Measures the replica-to-replica spread of each f_{v,k}(X_t): standard
/// deviation on the sqrt(n) scale and maximal deviation on the
/// sqrt(n) ln n scale.
pub fn run_concentration(spec: &ExperimentSpec) -> Result<ConcentrationReport, ExperimentError> {
    spec.validate()?;
    let seed = spec.sim.seed;
    let mut entries = Vec::with_capacity(spec.n_grid.len());
    let mut extra = Vec::new();

    for &n in &spec.n_grid {
        let base = spec.sim.params;
        let params = ModelParams::new(n, base.capacity, base.d, base.lambda)?;
        let config = SimConfig { params, ..spec.sim.clone() };
        let x0 = initial_state(spec, params, 0)?;
        let nodes = sample_nodes(n, spec.node_sample, seed);

        let trajectories: Vec<Trajectory> = (0..spec.replicas)
            .into_par_iter()
            .map(|r| {
                let initial = if spec.redraw_initial {
                    initial_state(spec, params, r + 1)?
                } else {
                    x0.clone()
                };
                Ok(run_with_stream(&config, &initial, r)?)
            })
            .collect::<Result<_, ExperimentError>>()?;

        let replicas = trajectories.len() as f64;
        let snapshots = trajectories[0].snapshots.len();
        let levels = params.capacity as usize + 1;
        let mut cells = Vec::with_capacity(snapshots * nodes.len() * levels);
        for s in 0..snapshots {
            let t = trajectories[0].snapshots[s].time;
            for &v in &nodes {
                for k in 0..levels {
                    let values: Vec<f64> = trajectories
                        .iter()
                        .map(|tr| f64::from(tr.snapshots[s].f_profiles[v as usize][k]))
                        .collect();
                    let mean = values.iter().sum::<f64>() / replicas;
                    let var = if values.len() > 1 {
                        values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
                            / (replicas - 1.0)
                    } else {
                        0.0
                    };
                    let max_dev =
                        values.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max);
                    cells.push(SpreadCell { t, v, k: k as u32, mean, sd: var.sqrt(), max_dev });
                }
            }
        }
        let sqrt_n = f64::from(n).sqrt();
        let ln_n = f64::from(n).ln();
        let max_sd_scaled = cells.iter().map(|c| c.sd / sqrt_n).fold(0.0, f64::max);
        let max_dev_scaled =
            cells.iter().map(|c| c.max_dev / (sqrt_n * ln_n)).fold(0.0, f64::max);

        if let Some(dir) = &spec.output_dir {
            let rows: Vec<String> = cells
                .iter()
                .map(|c| format!("{},{},{},{},{},{}", c.t, c.v, c.k, c.mean, c.sd, c.max_dev))
                .collect();
            write_csv(dir, &format!("conc_spread_n{n}.csv"), "t,v,k,mean,sd,max_dev", &rows)?;
        }
        extra.push((format!("max_sd_scaled_n{n}"), max_sd_scaled.to_string()));
        extra.push((format!("max_dev_scaled_n{n}"), max_dev_scaled.to_string()));
        entries.push(ConcentrationEntry { n, cells, max_sd_scaled, max_dev_scaled });
    }

    if let Some(dir) = &spec.output_dir {
        write_manifest(dir, spec, &extra)?;
    }
    Ok(ConcentrationReport { entries, seed, spec_hash: spec_hash(spec) })
}

// ---------------------------------------------------------------------------
// Phi paths and per-step increments
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct TupleDrift {
    pub u: Node,
    pub v: Node,
    pub j: u32,
    pub k: u32,
    pub mean_abs_increment: f64,
    pub se: f64,
}

/// One strided observation along the drift path.
#[derive(Debug, Clone, Copy)]
pub struct PathSample {
    pub step: u64,
    pub phi: PhiReport,
    pub norm1: u64,
    /// Blocked arrivals seen so far on the path.
    pub blocked: u64,
}

#[derive(Debug, Clone)]
pub struct PhiDriftReport {
    /// phi(X_0) of a freshly drawn initial state per replica.
    pub phi0: Vec<f64>,
    /// The ln(n)-scale threshold 3 ln n / sqrt(n).
    pub phi0_threshold: f64,
    pub phi0_within: u64,
    /// Path average of phi over strided full evaluations.
    pub phi_bar: f64,
    pub tuples: Vec<TupleDrift>,
    /// Per-step drift budget (c1 / n^2) phi_bar + c2 / n^3.
    pub bound_per_step: f64,
    pub constants: DriftBoundConstants,
    pub steps: u64,
    /// Strided samples along the path, plus the final state.
    pub path: Vec<PathSample>,
    pub seed: u64,
    pub spec_hash: u64,
}

/// Tracks the mixing statistic phi along one jump-chain path: strided full
/// reports, per-step absolute increments of sampled single-tuple components,
/// and the initial-state statistic across replicas.
pub fn run_phi_drift(spec: &ExperimentSpec) -> Result<PhiDriftReport, ExperimentError> {
    spec.validate()?;
    let params = spec.sim.params;
    let n = params.n;
    let seed = spec.sim.seed;
    let steps = spec.sim.t0.floor() as u64;
    let stride = spec.phi_stride.max(1);

    // Initial-state census: always one fresh draw per replica, so the
    // fraction below the threshold estimates a probability over seeds.
    let phi0: Vec<f64> = (0..spec.replicas)
        .into_par_iter()
        .map(|r| {
            let x0 = initial_state(spec, params, r + 1)?;
            Ok(phi_report(&x0)?.phi)
        })
        .collect::<Result<_, ExperimentError>>()?;
    let phi0_threshold = 3.0 * f64::from(n).ln() / f64::from(n).sqrt();
    let phi0_within = phi0.iter().filter(|&&p| p <= phi0_threshold).count() as u64;

    // Sampled tuples u != v, j, k <= C.
    let mut rng = replica_rng(seed, TUPLE_STREAM);
    let mut tuples = Vec::with_capacity(spec.drift_tuples as usize);
    for _ in 0..spec.drift_tuples {
        let u = rng.random_range(0..n);
        let mut v = rng.random_range(0..n - 1);
        if v >= u {
            v += 1;
        }
        let j = rng.random_range(0..=params.capacity);
        let k = rng.random_range(0..=params.capacity);
        tuples.push((u, v, j, k));
    }

    let mut state = initial_state(spec, params, 0)?;
    let mut chain_rng = replica_rng(seed, 0);
    let mut values: Vec<f64> = tuples
        .iter()
        .map(|&(u, v, j, k)| phi1_component(&state, u, v, j, k))
        .collect::<Result<_, ObsError>>()?;
    let mut inc_sum = vec![0.0f64; tuples.len()];
    let mut inc_sumsq = vec![0.0f64; tuples.len()];
    let mut path = Vec::new();
    let mut phi_sum = 0.0f64;
    let mut phi_samples = 0u64;
    let mut blocked = 0u64;

    for t in 0..steps {
        if t % stride == 0 {
            let report = phi_report(&state)?;
            phi_sum += report.phi;
            phi_samples += 1;
            path.push(PathSample { step: t, phi: report, norm1: state.norm1(), blocked });
        }
        let kind = step_jump_chain(&mut state, spec.sim.policy, &mut chain_rng);
        if let crate::sim::StepKind::Arrival { decision, .. } = kind {
            if decision == crate::routing::RouteDecision::Blocked {
                blocked += 1;
            }
        }
        for (i, &(u, v, j, k)) in tuples.iter().enumerate() {
            let now = phi1_component(&state, u, v, j, k)?;
            let inc = (now - values[i]).abs();
            inc_sum[i] += inc;
            inc_sumsq[i] += inc * inc;
            values[i] = now;
        }
    }
    path.push(PathSample {
        step: steps,
        phi: phi_report(&state)?,
        norm1: state.norm1(),
        blocked,
    });

    let phi_bar = if phi_samples > 0 { phi_sum / phi_samples as f64 } else { 0.0 };
    let constants = drift_bound_constants(params.lambda, params.d, params.capacity);
    let nf = f64::from(n);
    let bound_per_step = constants.c1 / (nf * nf) * phi_bar + constants.c2 / (nf * nf * nf);

    let samples = steps.max(1) as f64;
    let tuples: Vec<TupleDrift> = tuples
        .iter()
        .enumerate()
        .map(|(i, &(u, v, j, k))| {
            let mean = inc_sum[i] / samples;
            let var = (inc_sumsq[i] / samples - mean * mean).max(0.0);
            TupleDrift { u, v, j, k, mean_abs_increment: mean, se: (var / samples).sqrt() }
        })
        .collect();

    if let Some(dir) = &spec.output_dir {
        let path_rows: Vec<String> = path
            .iter()
            .map(|s| {
                format!(
                    "{},0,{},{},{},{},{}",
                    s.step, s.phi.phi1, s.phi.phi2, s.phi.phi3, s.norm1, s.blocked
                )
            })
            .collect();
        write_csv(dir, "phi_path.csv", "t,replica,phi1,phi2,phi3,norm1,blocked", &path_rows)?;
        let tuple_rows: Vec<String> = tuples
            .iter()
            .map(|d| {
                format!(
                    "{},{},{},{},{},{},{bound_per_step}",
                    d.u, d.v, d.j, d.k, d.mean_abs_increment, d.se
                )
            })
            .collect();
        write_csv(
            dir,
            "phi_increments.csv",
            "u,v,j,k,mean_abs_increment,se,bound",
            &tuple_rows,
        )?;
        let phi0_rows: Vec<String> = phi0
            .iter()
            .enumerate()
            .map(|(r, p)| format!("{r},{p},{phi0_threshold}"))
            .collect();
        write_csv(dir, "phi_initial.csv", "replica,phi0,threshold", &phi0_rows)?;
        let extra = vec![
            ("phi_bar".to_string(), phi_bar.to_string()),
            ("bound_per_step".to_string(), bound_per_step.to_string()),
            ("phi0_within".to_string(), phi0_within.to_string()),
        ];
        write_manifest(dir, spec, &extra)?;
    }

    Ok(PhiDriftReport {
        phi0,
        phi0_threshold,
        phi0_within,
        phi_bar,
        tuples,
        bound_per_step,
        constants,
        steps,
        path,
        seed,
        spec_hash: spec_hash(spec),
    })
}

// ---------------------------------------------------------------------------
// Coupling growth and generator check wrappers
// ---------------------------------------------------------------------------

/// Builds x0 from the configured initial condition and y0 by adding
/// `l1_offset` direct calls, then delegates to the coupled-chain growth
/// experiment.
pub fn run_coupling(spec: &ExperimentSpec) -> Result<GrowthReport, ExperimentError> {
    spec.validate()?;
    let params = spec.sim.params;
    let x0 = initial_state(spec, params, 0)?;
    let y0 = perturb_with_direct_calls(&x0, spec.l1_offset)?;
    let report = coupling_growth_experiment(
        spec.sim.policy,
        spec.sim.seed,
        &x0,
        &y0,
        spec.coupling_steps as usize,
        spec.replicas,
    )?;
    if let Some(dir) = &spec.output_dir {
        let rows: Vec<String> = report
            .steps
            .iter()
            .map(|s| {
                format!("{},{},{},{},{}", s.step, s.mean_l1, s.se_l1, s.growth_factor, s.bound)
            })
            .collect();
        write_csv(dir, "coupling_growth.csv", "step,mean_l1,se_l1,growth_factor,bound", &rows)?;
        let extra = vec![
            ("initial_l1".to_string(), report.initial_l1.to_string()),
            ("growth_bound".to_string(), report.bound.to_string()),
        ];
        write_manifest(dir, spec, &extra)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy)]
pub struct GapRow {
    /// Jump-chain step count at which the state was probed.
    pub t: u64,
    pub v: Node,
    pub j: u32,
    pub g_exact: f64,
    pub g_meanfield: f64,
    pub gap: f64,
    pub phi1: f64,
    pub phi2: f64,
    pub phi3: f64,
}

#[derive(Debug, Clone)]
pub struct GeneratorCheckReport {
    pub states: u32,
    /// Largest |drift - bruteforce| / max(1, |bruteforce|) over all probes.
    pub max_relative_error: f64,
    /// (probe index, node, level) achieving the maximum.
    pub worst: (u32, Node, u32),
    pub gap_rows: Vec<GapRow>,
    pub seed: u64,
    pub spec_hash: u64,
}

/// Walks a jump chain and, at every probe point, compares the closed-form
/// drift of each f_{v,j} against the brute-force generator and records the
/// mean-field gap diagnostic.
pub fn run_generator_check(spec: &ExperimentSpec) -> Result<GeneratorCheckReport, ExperimentError> {
    spec.validate()?;
    let params = spec.sim.params;
    if params.n > 8 {
        return Err(ExperimentError::BadSpec(
            "the brute-force generator sum needs n <= 8".into(),
        ));
    }
    let seed = spec.sim.seed;
    let mut state = initial_state(spec, params, 0)?;
    let mut rng = replica_rng(seed, 0);
    let mut max_relative_error = 0.0f64;
    let mut worst = (0u32, 0 as Node, 0u32);
    let mut gap_rows = Vec::new();

    for probe in 0..spec.gen_states {
        for _ in 0..spec.gen_events {
            step_jump_chain(&mut state, spec.sim.policy, &mut rng);
        }
        let t = u64::from(probe + 1) * u64::from(spec.gen_events);
        let phi = phi_report(&state)?;
        for v in 0..params.n {
            for j in 0..=params.capacity {
                let drift = drift_f(&state, v, j)?;
                let brute = generator_bruteforce(&state, v, j)?;
                let rel = (drift - brute).abs() / brute.abs().max(1.0);
                if rel > max_relative_error {
                    max_relative_error = rel;
                    worst = (probe, v, j);
                }
            }
            for j in 0..params.capacity {
                let gap = meanfield_gap(&state, v, j)?;
                gap_rows.push(GapRow {
                    t,
                    v,
                    j,
                    g_exact: gap.g_exact,
                    g_meanfield: gap.g_meanfield,
                    gap: gap.gap,
                    phi1: phi.phi1,
                    phi2: phi.phi2,
                    phi3: phi.phi3,
                });
            }
        }
    }

    if let Some(dir) = &spec.output_dir {
        let rows: Vec<String> = gap_rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{},{},{},{}",
                    r.t, r.v, r.j, r.g_exact, r.g_meanfield, r.gap, r.phi1, r.phi2, r.phi3
                )
            })
            .collect();
        write_csv(
            dir,
            "generator_gap.csv",
            "t,v,j,g_exact,g_meanfield,gap,phi1,phi2,phi3",
            &rows,
        )?;
        let extra = vec![("max_relative_error".to_string(), max_relative_error.to_string())];
        write_manifest(dir, spec, &extra)?;
    }

    Ok(GeneratorCheckReport {
        states: spec.gen_states,
        max_relative_error,
        worst,
        gap_rows,
        seed,
        spec_hash: spec_hash(spec),
    })
}

// ---------------------------------------------------------------------------
// ODE-only runs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct OdeReport {
    pub trajectory: OdeTrajectory,
    pub constants: TheoremConstants,
    pub seed: u64,
    pub spec_hash: u64,
}

/// Integrates the mean-field ODE with no simulation attached and reports
/// the approximation-theorem constants for the configured parameters.
pub fn run_ode(spec: &ExperimentSpec) -> Result<OdeReport, ExperimentError> {
    spec.validate()?;
    let params = spec.sim.params;
    let x0 = initial_state(spec, params, 0)?;
    let trajectory = ode_from_state(spec, &x0, spec.sim.t0)?;
    let constants =
        theorem_constants(spec.ode.lambda, spec.ode.d, spec.ode.capacity, spec.sim.t0)?;

    if let Some(dir) = &spec.output_dir {
        let rows = ode_rows_at(&trajectory, &spec.sim.snapshot_times);
        write_csv(dir, "ode_trajectory.csv", "t,k,xi_k", &rows)?;
        let mut out = BufWriter::new(fs::File::create(dir.join("theorem_constants.txt"))?);
        for (k, v) in constants_lines(&constants) {
            writeln!(out, "{k}={v}")?;
        }
        out.flush()?;
        write_manifest(dir, spec, &[])?;
    }
    Ok(OdeReport { trajectory, constants, seed: spec.sim.seed, spec_hash: spec_hash(spec) })
}

fn constants_lines(c: &TheoremConstants) -> Vec<(String, String)> {
    vec![
        ("lambda".into(), c.lambda.to_string()),
        ("d".into(), c.d.to_string()),
        ("capacity".into(), c.capacity.to_string()),
        ("t0".into(), c.t0.to_string()),
        ("ln_gamma".into(), c.ln_gamma.to_string()),
        ("n0_polynomial_term".into(), c.n0_polynomial_term.to_string()),
        ("ln_ln_n0_exponential_term".into(), c.ln_ln_n0_exponential_term.to_string()),
        ("envelope_prefactor".into(), c.envelope_prefactor.to_string()),
        ("envelope_exponent_rate".into(), c.envelope_exponent_rate.to_string()),
        ("global_envelope_prefactor".into(), c.global_envelope_prefactor.to_string()),
    ]
}

// ---------------------------------------------------------------------------
// Key-value configuration
// ---------------------------------------------------------------------------

/// Parses a key-value config file: one `key = value` pair per line, blank
/// lines and `#` comments ignored. Later occurrences of a key win.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, ExperimentError> {
    let mut pairs = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ExperimentError::BadConfig {
                line: idx + 1,
                message: "expected key=value".into(),
            });
        };
        pairs.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(pairs)
}

fn bad_value(key: &str, value: &str) -> ExperimentError {
    ExperimentError::BadSpec(format!("bad value '{value}' for {key}"))
}

fn parse_as<T: FromStr>(key: &str, value: &str) -> Result<T, ExperimentError> {
    value.parse().map_err(|_| bad_value(key, value))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ExperimentError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad_value(key, value)),
    }
}

/// Applies config pairs onto a spec. Model parameter keys mirror the field
/// names (`n`, `capacity`, `d`, `lambda`); simulation keys mirror the
/// simulation config (`policy`, `mode`, `seed`, `t0`, `snapshot_times`);
/// the remaining keys mirror the experiment fields. Changing `t0` without
/// an explicit `snapshot_times` regenerates the default grid.
pub fn apply_config(
    spec: &mut ExperimentSpec,
    pairs: &BTreeMap<String, String>,
) -> Result<(), ExperimentError> {
    let p = spec.sim.params;
    let (mut n, mut capacity, mut d, mut lambda) = (p.n, p.capacity, p.d, p.lambda);
    let mut c0 = match spec.initial {
        InitialCondition::RandomAllocation { c0 } => c0,
        _ => 0.5,
    };
    let mut explicit_times = false;

    for (key, value) in pairs {
        match key.as_str() {
            "n" => n = parse_as(key, value)?,
            "capacity" => capacity = parse_as(key, value)?,
            "d" => d = parse_as(key, value)?,
            "lambda" => lambda = parse_as(key, value)?,
            "policy" => {
                spec.sim.policy =
                    PolicyKind::from_str(value).map_err(|_| bad_value(key, value))?
            }
            "mode" => spec.sim.mode = Mode::from_str(value).map_err(|_| bad_value(key, value))?,
            "seed" => spec.sim.seed = parse_as(key, value)?,
            "t0" => spec.sim.t0 = parse_as(key, value)?,
            "snapshot_times" => {
                spec.sim.snapshot_times = value
                    .split(',')
                    .map(|s| parse_as::<f64>(key, s.trim()))
                    .collect::<Result<_, _>>()?;
                explicit_times = true;
            }
            "kind" => spec.kind = ExperimentKind::from_str(value).map_err(|_| bad_value(key, value))?,
            "replicas" => spec.replicas = parse_as(key, value)?,
            "c0" => c0 = parse_as(key, value)?,
            "initial" => match value.as_str() {
                "empty" => spec.initial = InitialCondition::Empty,
                "random" => spec.initial = InitialCondition::RandomAllocation { c0 },
                other => {
                    if let Some(path) = other.strip_prefix("file:") {
                        spec.initial = InitialCondition::FromFile(PathBuf::from(path));
                    } else {
                        return Err(bad_value(key, value));
                    }
                }
            },
            "n_grid" => {
                spec.n_grid = value
                    .split(',')
                    .map(|s| parse_as::<u32>(key, s.trim()))
                    .collect::<Result<_, _>>()?;
            }
            "output_dir" => spec.output_dir = Some(PathBuf::from(value)),
            "redraw_initial" => spec.redraw_initial = parse_bool(key, value)?,
            "l1_offset" => spec.l1_offset = parse_as(key, value)?,
            "coupling_steps" => spec.coupling_steps = parse_as(key, value)?,
            "drift_tuples" => spec.drift_tuples = parse_as(key, value)?,
            "phi_stride" => spec.phi_stride = parse_as(key, value)?,
            "node_sample" => spec.node_sample = parse_as(key, value)?,
            "gen_states" => spec.gen_states = parse_as(key, value)?,
            "gen_events" => spec.gen_events = parse_as(key, value)?,
            "no_direct" => spec.ode.no_direct = parse_bool(key, value)?,
            other => {
                return Err(ExperimentError::BadSpec(format!("unknown config key '{other}'")))
            }
        }
    }

    spec.sim.params = ModelParams::new(n, capacity, d, lambda)?;
    let no_direct = spec.ode.no_direct;
    spec.ode = OdeParams::from(&spec.sim.params);
    spec.ode.no_direct = no_direct;
    // A bare `n` moves a single-size sweep along with it.
    if pairs.contains_key("n") && !pairs.contains_key("n_grid") {
        spec.n_grid = vec![n];
    }
    // A random initial keeps tracking the latest c0 even when only c0 was
    // given.
    if let InitialCondition::RandomAllocation { .. } = spec.initial {
        spec.initial = InitialCondition::RandomAllocation { c0 };
    }
    if !explicit_times && pairs.contains_key("t0") {
        spec.sim.snapshot_times = crate::sim::default_snapshot_grid(spec.sim.t0);
    }
    Ok(())
}
