//! Command-line front end for the routing experiments.
//!
//! Each subcommand starts from sensible defaults for its experiment, then
//! applies an optional key-value config file, then any explicit flags (the
//! most specific source wins). All outputs are CSV files plus a run
//! manifest in the directory given by --out; a short summary is printed
//! either way.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use dar_lab::experiments::{
    apply_config, parse_config, run_concentration, run_coupling, run_generator_check, run_lln,
    run_ode, run_phi_drift, ExperimentError, ExperimentKind, ExperimentSpec,
};
use dar_lab::params::ModelParams;
use dar_lab::routing::PolicyKind;
use dar_lab::sim::{Mode, SimConfig};

/// Prints one summary line, exiting quietly if the consumer of stdout has
/// gone away (e.g. the output is piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        let mut out = io::stdout().lock();
        if let Err(err) = writeln!(out, $($arg)*) {
            if err.kind() == io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
            eprintln!("error: cannot write to stdout: {err}");
            std::process::exit(1);
        }
    }};
}

#[derive(Parser)]
#[command(
    name = "darlab",
    about = "Simulation and mean-field experiments for dynamic alternative routing on complete graphs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare per-node load profiles against the mean-field ODE across n.
    Lln(RunArgs),
    /// Measure replica-to-replica spread of the load profiles.
    Conc(RunArgs),
    /// Track the mixing statistic phi and its per-step increments.
    Phi(RunArgs),
    /// Run coupled chain pairs and report l1 distance growth.
    Couple(RunArgs),
    /// Check the closed-form generator against brute-force enumeration.
    Gencheck(RunArgs),
    /// Integrate the ODE only and report the approximation constants.
    Ode(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Key-value config file applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of nodes.
    #[arg(long)]
    n: Option<u32>,
    /// Arrival rate per link.
    #[arg(long)]
    lambda: Option<f64>,
    /// Link capacity.
    #[arg(long)]
    cap: Option<u32>,
    /// Number of relay candidates per blocked call.
    #[arg(long)]
    d: Option<u32>,
    /// Time horizon (continuous time) or step budget (jump chain).
    #[arg(long)]
    t0: Option<f64>,
    /// Routing policy: bdar, fdar, or nodirect.
    #[arg(long)]
    policy: Option<String>,
    /// Simulation mode: ctmc or jump.
    #[arg(long)]
    mode: Option<String>,
    /// Base seed; replica r runs on stream r of this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of independent replicas.
    #[arg(long)]
    replicas: Option<u64>,
    /// Start from a random allocation with floor(c0 N) placement attempts.
    #[arg(long)]
    c0: Option<f64>,
    /// Output directory for CSV files and the run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated list of network sizes to sweep.
    #[arg(long)]
    n_grid: Option<String>,
    /// Extra direct calls separating the coupled pair's initial states.
    #[arg(long)]
    l1_offset: Option<u64>,
    /// Steps per coupled replica.
    #[arg(long)]
    steps: Option<u64>,
    /// Use the variant where calls never take the direct link.
    #[arg(long)]
    no_direct: bool,
    /// Draw a fresh initial allocation per replica.
    #[arg(long)]
    redraw_initial: bool,
}

impl RunArgs {
    fn pairs(&self) -> BTreeMap<String, String> {
        let mut pairs = BTreeMap::new();
        let mut put = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                pairs.insert(key.to_string(), v);
            }
        };
        put("n", self.n.map(|v| v.to_string()));
        put("lambda", self.lambda.map(|v| v.to_string()));
        put("capacity", self.cap.map(|v| v.to_string()));
        put("d", self.d.map(|v| v.to_string()));
        put("t0", self.t0.map(|v| v.to_string()));
        put("policy", self.policy.clone());
        put("mode", self.mode.clone());
        put("seed", self.seed.map(|v| v.to_string()));
        put("replicas", self.replicas.map(|v| v.to_string()));
        put("c0", self.c0.map(|v| v.to_string()));
        put("initial", self.c0.map(|_| "random".to_string()));
        put("output_dir", self.out.as_ref().map(|p| p.display().to_string()));
        put("n_grid", self.n_grid.clone());
        put("l1_offset", self.l1_offset.map(|v| v.to_string()));
        put("coupling_steps", self.steps.map(|v| v.to_string()));
        put("no_direct", self.no_direct.then(|| "true".to_string()));
        put("redraw_initial", self.redraw_initial.then(|| "true".to_string()));
        pairs
    }
}

fn default_spec(kind: ExperimentKind) -> Result<ExperimentSpec, ExperimentError> {
    let (n, capacity, d, lambda, t0, mode, replicas) = match kind {
        ExperimentKind::Lln => (50, 3, 2, 1.0, 1.0, Mode::Ctmc, 20),
        ExperimentKind::Concentration => (100, 3, 1, 1.0, 1.0, Mode::Ctmc, 100),
        ExperimentKind::PhiDrift => (50, 2, 1, 1.0, 20_000.0, Mode::JumpChain, 50),
        ExperimentKind::CouplingGrowth => (30, 3, 2, 1.0, 500.0, Mode::JumpChain, 1_000),
        ExperimentKind::GeneratorCheck => (4, 2, 1, 1.0, 3_000.0, Mode::JumpChain, 1),
        ExperimentKind::OdeOnly => (50, 3, 2, 1.0, 1.0, Mode::Ctmc, 0),
    };
    let params = ModelParams::new(n, capacity, d, lambda)?;
    let sim = SimConfig::new(params, PolicyKind::Bdar, mode, 1, t0)?;
    let mut spec = ExperimentSpec::new(kind, sim);
    spec.replicas = replicas;
    Ok(spec)
}

fn build_spec(kind: ExperimentKind, args: &RunArgs) -> Result<ExperimentSpec, ExperimentError> {
    let mut spec = default_spec(kind)?;
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)?;
        apply_config(&mut spec, &parse_config(&text)?)?;
    }
    apply_config(&mut spec, &args.pairs())?;
    // The subcommand, not the config file, decides what runs.
    spec.kind = kind;
    spec.validate()?;
    Ok(spec)
}

fn run(kind: ExperimentKind, args: &RunArgs) -> Result<(), ExperimentError> {
    let spec = build_spec(kind, args)?;
    match kind {
        ExperimentKind::Lln => {
            let report = run_lln(&spec)?;
            say!("law-of-large-numbers sweep, seed {}", report.seed);
            for e in &report.entries {
                say!(
                    "  n={:<5} median sup error {:.5}  max {:.5}  scaled (sqrt n / ln n) {:.4}",
                    e.n, e.median_error, e.max_error, e.scaled_median
                );
            }
        }
        ExperimentKind::Concentration => {
            let report = run_concentration(&spec)?;
            say!("concentration spreads, seed {}", report.seed);
            for e in &report.entries {
                say!(
                    "  n={:<5} max sd/sqrt(n) {:.4}  max dev/(sqrt(n) ln n) {:.4}",
                    e.n, e.max_sd_scaled, e.max_dev_scaled
                );
            }
        }
        ExperimentKind::PhiDrift => {
            let report = run_phi_drift(&spec)?;
            say!(
                "phi drift over {} steps, seed {}: phi_bar {:.5}, per-step budget {:.3e}",
                report.steps, report.seed, report.phi_bar, report.bound_per_step
            );
            let within = report
                .tuples
                .iter()
                .filter(|t| t.mean_abs_increment <= report.bound_per_step + 3.0 * t.se)
                .count();
            say!(
                "  {}/{} sampled tuples within budget + 3 se",
                within,
                report.tuples.len()
            );
            say!(
                "  initial-state statistic: {}/{} draws below 3 ln n / sqrt n = {:.4}",
                report.phi0_within,
                report.phi0.len(),
                report.phi0_threshold
            );
        }
        ExperimentKind::CouplingGrowth => {
            let report = run_coupling(&spec)?;
            let worst = report
                .steps
                .iter()
                .map(|s| s.growth_factor)
                .filter(|f| f.is_finite())
                .fold(f64::NEG_INFINITY, f64::max);
            say!(
                "coupled growth over {} steps x {} replicas: initial l1 {}, bound {:.5}",
                report.steps.len(),
                report.replicas,
                report.initial_l1,
                report.bound
            );
            if worst.is_finite() {
                say!("  worst per-step growth factor {worst:.5}");
            }
            let violations = report
                .steps
                .iter()
                .filter(|s| s.excess > 3.0 * s.excess_se.max(1e-12))
                .count();
            say!("  steps exceeding bound + 3 se: {violations}");
        }
        ExperimentKind::GeneratorCheck => {
            let report = run_generator_check(&spec)?;
            say!(
                "generator check over {} states: max relative error {:.3e} at probe {} node {} level {}",
                report.states,
                report.max_relative_error,
                report.worst.0,
                report.worst.1,
                report.worst.2
            );
        }
        ExperimentKind::OdeOnly => {
            let report = run_ode(&spec)?;
            let end = report.trajectory.end();
            let parts: Vec<String> =
                end.as_slice().iter().map(|x| format!("{x:.5}")).collect();
            say!("ode endpoint at t0: [{}]", parts.join(", "));
            say!(
                "  ln gamma {:.4}, envelope rate {:.1}, polynomial population term {:.3e}",
                report.constants.ln_gamma,
                report.constants.envelope_exponent_rate,
                report.constants.n0_polynomial_term
            );
        }
    }
    if let Some(dir) = &spec.output_dir {
        say!("wrote CSV files and run manifest to {}", dir.display());
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let (kind, args) = match &cli.command {
        Command::Lln(a) => (ExperimentKind::Lln, a),
        Command::Conc(a) => (ExperimentKind::Concentration, a),
        Command::Phi(a) => (ExperimentKind::PhiDrift, a),
        Command::Couple(a) => (ExperimentKind::CouplingGrowth, a),
        Command::Gencheck(a) => (ExperimentKind::GeneratorCheck, a),
        Command::Ode(a) => (ExperimentKind::OdeOnly, a),
    };
    if let Err(err) = run(kind, args) {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
