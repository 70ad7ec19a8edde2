//! The `mfg` command line.
//!
//! | subcommand  | output                                                  |
//! |-------------|---------------------------------------------------------|
//! | `validate`  | validation report                                       |
//! | `riccati`   | `pi.csv`, optionally `sigma.csv` and `rho.csv`          |
//! | `simulate`  | `averages.csv`, `paths.csv`, `summary.json`             |
//! | `nash`      | `sweep.csv`, per-quantity sample CSVs, `nash.json`      |
//! | `portfolio` | `figure_state.csv`, `figure_control.csv`, `figures.json`|
//! | `replay`    | reruns the command recorded in a manifest               |
//!
//! Every command that writes files also writes `manifest.json` into its
//! output directory. Exit codes: 0 success, 1 usage or I/O error,
//! 2 validation failure, 3 solver positivity loss or divergence,
//! 4 acceptance-check failure (only with `--check`).

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meanfield::FeedbackLaw;
use crate::model::{self, ProblemSpec};
use crate::nash::{self, PerturbationFamily};
use crate::path::{self, write_paths};
use crate::population::{Estimate, PopulationConfig, Recording, Simulation};
use crate::portfolio::{self, PortfolioParams};
use crate::riccati::{self, SolverOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_POSITIVITY: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "mfg", version, about = "Indefinite LQ partially observed mean-field games with common noise")]
pub struct Cli {
    /// Caps the number of worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Loads and validates a configuration.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Solves the Riccati system and writes the paths.
    Riccati(RiccatiArgs),
    /// Simulates the population against its limit.
    Simulate(SimulateArgs),
    /// Runs convergence sweeps and ε-Nash probes.
    Nash(NashArgs),
    /// Reproduces the mean-variance figures.
    Portfolio(PortfolioArgs),
    /// Reruns the command recorded in a manifest.
    Replay {
        manifest: PathBuf,
        /// Output directory replacing the recorded one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RiccatiArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Also solve for `Σ`.
    #[arg(long)]
    pub sigma: bool,
    /// Also solve for `Σ` and `ρ`.
    #[arg(long)]
    pub rho: bool,
    #[arg(long, default_value_t = 10)]
    pub substeps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long = "N")]
    pub agents: usize,
    #[arg(long = "M", default_value_t = 1)]
    pub replications: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub substeps: usize,
    /// Number of leading agents whose paths go to `paths.csv`.
    #[arg(long, default_value_t = 5)]
    pub record: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NashArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Population sizes of the sweep, at least three, ascending.
    #[arg(long = "Ns", value_delimiter = ',', required = true)]
    pub ns: Vec<usize>,
    #[arg(long = "M", default_value_t = 20)]
    pub replications: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Population sizes of the ε-Nash probe; defaults to the three
    /// smallest sweep sizes.
    #[arg(long = "probe-Ns", value_delimiter = ',')]
    pub probe_ns: Vec<usize>,
    #[arg(long = "probe-M", default_value_t = 100)]
    pub probe_replications: usize,
    #[arg(long, default_value_t = 10)]
    pub substeps: usize,
    /// Exit with code 4 unless the state-average slope lies in
    /// [-1.3, -0.7] and the cost-gap slope in [-0.75, -0.30].
    #[arg(long)]
    pub check: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PortfolioArgs {
    #[arg(long = "N", default_value_t = 5000)]
    pub agents: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "K", default_value_t = portfolio::DEFAULT_STEPS)]
    pub steps: usize,
    /// Exit with code 4 unless both RMS gaps are at most 0.05.
    #[arg(long)]
    pub check: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Record of one run, sufficient to repeat it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name.
    pub args: Vec<String>,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub version: String,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn read(file: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// The recorded arguments with the output directory replaced.
    pub fn args_with_out(&self, out: &Path) -> Vec<String> {
        let mut args = self.args.clone();
        if let Some(i) = args.iter().position(|a| a == "--out") {
            if i + 1 < args.len() {
                args[i + 1] = out.display().to_string();
            }
        } else if let Some(i) = args.iter().position(|a| a.starts_with("--out=")) {
            args[i] = format!("--out={}", out.display());
        }
        args
    }
}

/// Maps an error to its exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::PositivityLoss { .. } | Error::Divergence { .. } => EXIT_POSITIVITY,
        Error::Dimension { .. }
        | Error::Domain { .. }
        | Error::DegenerateCommonObservation { .. }
        | Error::DegenerateObservation { .. }
        | Error::Precondition(_) => EXIT_VALIDATION,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (without the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(std::iter::once("mfg".to_string()).chain(args.iter().cloned())) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let work = || match execute(&cli, &args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    match cli.threads {
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build() {
            Ok(pool) => pool.install(work),
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_USAGE
            }
        },
        None => work(),
    }
}

fn execute(cli: &Cli, args: &[String]) -> Result<i32> {
    let start = Instant::now();
    let (name, config, seed, out, code) = match &cli.command {
        Command::Validate { config } => return cmd_validate(config),
        Command::Replay { manifest, out } => return cmd_replay(manifest, out.as_deref()),
        Command::Riccati(a) => ("riccati", Some(a.config.clone()), None, a.out.clone(), cmd_riccati(a)?),
        Command::Simulate(a) => ("simulate", Some(a.config.clone()), Some(a.seed), a.out.clone(), cmd_simulate(a)?),
        Command::Nash(a) => ("nash", Some(a.config.clone()), Some(a.seed), a.out.clone(), cmd_nash(a)?),
        Command::Portfolio(a) => ("portfolio", None, Some(a.seed), a.out.clone(), cmd_portfolio(a)?),
    };
    let manifest = RunManifest {
        command: name.into(),
        args: args.to_vec(),
        config,
        seed,
        out: out.clone(),
        version: env!("CARGO_PKG_VERSION").into(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(code)
}

fn write_json<T: Serialize>(file: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(file, text + "\n").map_err(|e| Error::io(file, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Loads, validates and prints the report; exit 0 on pass and 2 on failure.
pub fn cmd_validate(config: &Path) -> Result<i32> {
    let problem = model::load_problem_file(config)?;
    let report = model::validate(&problem);
    for check in &report.checks {
        let mark = if check.passed { "ok  " } else { "FAIL" };
        println!("{mark} {}: {}", check.name, check.detail);
    }
    for flag in &report.flags {
        println!("note {flag}");
    }
    Ok(if report.passed() { EXIT_OK } else { EXIT_VALIDATION })
}

/// Solves `Π` and, on request, `Σ` and `ρ`.
pub fn cmd_riccati(a: &RiccatiArgs) -> Result<i32> {
    let problem = model::load_problem_file(&a.config)?;
    let opts = SolverOptions::default().with_substeps(a.substeps);
    create_dir(&a.out)?;
    let pi = riccati::solve_pi(&problem, &opts)?;
    write_paths(a.out.join("pi.csv"), &[("Pi", &pi)])?;
    println!("Pi(0) = {:?}", linear(&pi.values[0]));
    if a.sigma || a.rho {
        let sigma = riccati::solve_sigma(&problem, &opts)?;
        write_paths(a.out.join("sigma.csv"), &[("Sigma", &sigma)])?;
        println!("Sigma(0) = {:?}", linear(&sigma.values[0]));
        if a.rho {
            let rho = riccati::solve_rho(&problem, &sigma, &opts)?;
            write_paths(a.out.join("rho.csv"), &[("rho", &rho)])?;
            println!("rho(0) = {:?}", linear(&rho.values[0]));
        }
    }
    Ok(EXIT_OK)
}

fn linear(m: &crate::Mat) -> Vec<f64> {
    crate::linalg::row_major(m)
}

/// Decentralized strategy for a problem: the general Riccati solution, or
/// the explicit mean-variance solution when the general gain is singular
/// on an instance of that shape.
pub fn strategy_for(problem: &ProblemSpec, opts: &SolverOptions) -> Result<(FeedbackLaw, &'static str)> {
    match riccati::solve(problem, opts).and_then(|s| FeedbackLaw::from_solution(&s)) {
        Ok(law) => Ok((law, "riccati")),
        Err(err @ Error::PositivityLoss { .. }) => match PortfolioParams::from_problem(problem) {
            Some(params) => {
                let closed = portfolio::closed_form(&params, problem.grid)?;
                Ok((portfolio::feedback_law(&closed)?, "portfolio closed form"))
            }
            None => Err(err),
        },
        Err(e) => Err(e),
    }
}

#[derive(Serialize)]
struct SimulateSummary {
    agents: usize,
    replications: usize,
    seed: u64,
    gains: &'static str,
    sup_gap_mean: Estimate,
    sup_gap_agent: Estimate,
    cost_n: Estimate,
    cost_limit: Estimate,
}

/// Population run with averages, recorded agent paths and a gap summary.
pub fn cmd_simulate(a: &SimulateArgs) -> Result<i32> {
    let problem = model::load_problem_file(&a.config)?;
    let (law, gains) = strategy_for(&problem, &SolverOptions::default().with_substeps(a.substeps))?;
    let cfg = PopulationConfig::new(a.agents, a.replications, a.seed)?;
    let record = a.record.min(a.agents);
    let result = Simulation::new(&problem, &law)
        .record(Recording {
            agents: record,
            paths: true,
            decomposition: false,
        })
        .run(&cfg)?;
    create_dir(&a.out)?;
    let (n, m) = (problem.dims.n, problem.dims.m);
    let grid = problem.grid;
    let mut header = vec!["t".to_string(), "replication".to_string()];
    for (name, w) in [("xbar_N", n), ("ubar_N", m), ("x0", n), ("u0", m)] {
        header.extend(path::column_names(name, w, 1));
    }
    let mut rows = Vec::new();
    for rep in &result.replications {
        for k in 0..grid.nodes() {
            let mut row = vec![grid.time(k), rep.index as f64];
            row.extend_from_slice(&rep.x_avg[k * n..(k + 1) * n]);
            row.extend_from_slice(&rep.u_avg[k * m..(k + 1) * m]);
            row.extend_from_slice(&rep.x0[k * n..(k + 1) * n]);
            row.extend_from_slice(&rep.u0[k * m..(k + 1) * m]);
            rows.push(row);
        }
    }
    path::write_table(a.out.join("averages.csv"), &header, &rows)?;

    let mut header = vec!["t".to_string(), "replication".to_string(), "agent".to_string()];
    for (name, w) in [("x", n), ("u", m), ("xhat", n)] {
        header.extend(path::column_names(name, w, 1));
    }
    let mut rows = Vec::new();
    for rep in &result.replications {
        for agent in &rep.agents {
            for k in 0..grid.nodes() {
                let mut row = vec![grid.time(k), rep.index as f64, agent.agent as f64];
                row.extend_from_slice(&agent.x[k * n..(k + 1) * n]);
                row.extend_from_slice(&agent.u[k * m..(k + 1) * m]);
                row.extend_from_slice(&agent.xhat[k * n..(k + 1) * n]);
                rows.push(row);
            }
        }
    }
    path::write_table(a.out.join("paths.csv"), &header, &rows)?;

    let reps = &result.replications;
    let summary = SimulateSummary {
        agents: a.agents,
        replications: a.replications,
        seed: a.seed,
        gains,
        sup_gap_mean: Estimate::from_samples(&reps.iter().map(|r| r.sup_gap_mean).collect::<Vec<_>>()),
        sup_gap_agent: Estimate::from_samples(
            &reps.iter().map(|r| r.sup_gap_agent.iter().sum::<f64>() / a.agents as f64).collect::<Vec<_>>(),
        ),
        cost_n: Estimate::from_samples(&result.agent_mean_samples(0, false)),
        cost_limit: Estimate::from_samples(&result.agent_mean_samples(0, true)),
    };
    println!("gains: {gains}");
    println!(
        "E sup|xbar_N - x0|^2 = {:.6e} ± {:.1e}",
        summary.sup_gap_mean.mean, summary.sup_gap_mean.se
    );
    println!(
        "cost N-agent = {:.6} ± {:.1e}, limit = {:.6} ± {:.1e}",
        summary.cost_n.mean, summary.cost_n.se, summary.cost_limit.mean, summary.cost_limit.se
    );
    write_json(&a.out.join("summary.json"), &summary)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct NashOutput<'a> {
    sweep: &'a nash::SweepReport,
    probes: &'a [nash::NashReport],
    rate_constant: Option<f64>,
}

/// State-average slope window.
pub const MEANFIELD_WINDOW: (f64, f64) = (-1.3, -0.7);
/// Cost-gap slope window.
pub const COST_WINDOW: (f64, f64) = (-0.75, -0.30);

/// Sweeps, slope fits and ε-Nash probes.
pub fn cmd_nash(a: &NashArgs) -> Result<i32> {
    let problem = model::load_problem_file(&a.config)?;
    let (law, gains) = strategy_for(&problem, &SolverOptions::default().with_substeps(a.substeps))?;
    let sweep = nash::convergence_sweep(&problem, &law, &a.ns, a.replications, a.seed)?;
    let probe_ns: Vec<usize> = if a.probe_ns.is_empty() {
        a.ns.iter().copied().take(3).collect()
    } else {
        a.probe_ns.clone()
    };
    let family = PerturbationFamily::default_for(problem.dims.m);
    let probes = probe_ns
        .iter()
        .map(|&n| nash::epsilon_nash_probe(&problem, &law, n, &family, a.probe_replications, a.seed))
        .collect::<Result<Vec<_>>>()?;
    create_dir(&a.out)?;
    sweep.write_csv(&a.out.join("sweep.csv"))?;
    for r in [&sweep.mean_field, &sweep.per_agent, &sweep.cost_gap, &sweep.cost_gap_signed] {
        r.write_samples(&a.out.join(format!("{}_samples.csv", r.quantity)))?;
    }
    let rate_constant = (!probes.is_empty()).then(|| nash::fit_sqrt_rate(&probes));
    write_json(
        &a.out.join("nash.json"),
        &NashOutput {
            sweep: &sweep,
            probes: &probes,
            rate_constant,
        },
    )?;
    println!("gains: {gains}");
    for r in [&sweep.mean_field, &sweep.per_agent, &sweep.cost_gap, &sweep.cost_gap_signed] {
        match &r.fit {
            Some(f) => println!("{}: slope {:.3} ± {:.3}", r.quantity, f.slope, f.half_width),
            None => println!("{}: no slope (non-positive gap)", r.quantity),
        }
    }
    for p in &probes {
        println!("N={}: epsilon = {:.4e} ± {:.1e}", p.agents, p.epsilon, p.epsilon_se);
    }
    if a.check {
        let ok = |r: &nash::ConvergenceReport, w: (f64, f64)| r.fit.as_ref().is_some_and(|f| f.within(w.0, w.1));
        if !(ok(&sweep.mean_field, MEANFIELD_WINDOW) && ok(&sweep.cost_gap, COST_WINDOW)) {
            eprintln!("slope outside its acceptance window");
            return Ok(EXIT_CHECK);
        }
    }
    Ok(EXIT_OK)
}

/// Figure tolerance on both RMS gaps.
pub const FIGURE_TOLERANCE: f64 = 0.05;

/// Mean-variance figures with the built-in parameters.
pub fn cmd_portfolio(a: &PortfolioArgs) -> Result<i32> {
    let params = PortfolioParams::default();
    let report = portfolio::reproduce_figures(&params, a.steps, a.agents, a.seed, &a.out)?;
    println!(
        "state gap: sup {:.4e}, rms {:.4e}; control gap: sup {:.4e}, rms {:.4e}",
        report.sup_state_gap, report.rms_state_gap, report.sup_control_gap, report.rms_control_gap
    );
    write_json(&a.out.join("figures.json"), &report)?;
    if a.check && (report.rms_state_gap > FIGURE_TOLERANCE || report.rms_control_gap > FIGURE_TOLERANCE) {
        eprintln!("RMS gap above {FIGURE_TOLERANCE}");
        return Ok(EXIT_CHECK);
    }
    Ok(EXIT_OK)
}

/// Reruns a recorded command, optionally into another directory.
pub fn cmd_replay(manifest: &Path, out: Option<&Path>) -> Result<i32> {
    let m = RunManifest::read(manifest)?;
    let args = match out {
        Some(dir) => m.args_with_out(dir),
        None => m.args.clone(),
    };
    Ok(run(args))
}
