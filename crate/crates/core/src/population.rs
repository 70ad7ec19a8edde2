//! Monte Carlo simulation of the `N`-agent system next to its limit.
//!
//! Every replication draws one common-noise path `W⁰` and, for each agent,
//! the individual paths `Wⁱ`, `W̄ⁱ`. With these draws it advances
//!
//! * the `N`-agent states `xⁱ` coupled through the averages `(x⁽ᴺ⁾, u⁽ᴺ⁾)`,
//! * the limiting copies `Xⁱ` driven by `(x⁰, u⁰)` instead,
//!
//! each with its own conditional-mean filter, by Euler-Maruyama. Cost
//! functionals are accumulated on the fly with trapezoid quadrature so that
//! large runs need no path storage. Noise streams are keyed by
//! `(seed, replication, agent, channel)` and replications run in parallel,
//! so results do not depend on the thread schedule.

#![allow(non_snake_case)]

use rayon::prelude::*;
use serde::Serialize;

use crate::compensator::{relaxed_cost, CompensatorPath};
use crate::cost::QuadraticCost;
use crate::error::{Error, Result};
use crate::filter;
use crate::linalg::{self, Dense, Mat};
use crate::meanfield::{self, FeedbackLaw};
use crate::model::ProblemSpec;
use crate::noise::{self, Channel, Increments};
use crate::path::NodePath;
use crate::riccati::RiccatiSolution;

/// Population size, replication count and master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PopulationConfig {
    pub agents: usize,
    pub replications: usize,
    pub seed: u64,
}

impl PopulationConfig {
    pub fn new(agents: usize, replications: usize, seed: u64) -> Result<Self> {
        if agents == 0 || replications == 0 {
            return Err(Error::Invalid(format!(
                "need N ≥ 1 and M ≥ 1, got N={agents}, M={replications}"
            )));
        }
        Ok(Self {
            agents,
            replications,
            seed,
        })
    }
}

/// Additive control offset.
#[derive(Clone, Debug, PartialEq)]
pub enum Offset {
    None,
    Constant(Mat),
    Path(NodePath),
}

/// Control policy of an agent.
#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    /// `u = −κ K1 (x̂ − x⁰) − K2 x⁰ − k3 + offset`, evaluated on the agent's
    /// own filter.
    Feedback { kappa: f64, offset: Offset },
    /// `u ≡ 0`.
    Zero,
    /// A deterministic control path.
    OpenLoop(NodePath),
}

impl Policy {
    /// The decentralized equilibrium strategy.
    pub fn equilibrium() -> Self {
        Self::Feedback {
            kappa: 1.0,
            offset: Offset::None,
        }
    }

    /// Equilibrium strategy with the filter-feedback gain scaled by `kappa`.
    pub fn scaled(kappa: f64) -> Self {
        Self::Feedback {
            kappa,
            offset: Offset::None,
        }
    }

    /// Equilibrium strategy shifted by a constant control.
    pub fn shifted(offset: Mat) -> Self {
        Self::Feedback {
            kappa: 1.0,
            offset: Offset::Constant(offset),
        }
    }
}

/// What a run keeps beyond cost samples and gap statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Recording {
    /// Number of leading agents whose full paths are kept.
    pub agents: usize,
    /// Keep limit paths, averages, covariance and gains per replication.
    pub paths: bool,
    /// Track the control-free and control-driven state components.
    pub decomposition: bool,
}

impl Default for Recording {
    fn default() -> Self {
        Self {
            agents: 0,
            paths: true,
            decomposition: false,
        }
    }
}

/// Node-major paths of one agent; each buffer holds one entry block per
/// node (states, filters, controls) or per step (increments).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AgentPaths {
    pub agent: usize,
    pub x: Vec<f64>,
    pub xhat: Vec<f64>,
    pub u: Vec<f64>,
    pub dy: Vec<f64>,
    pub x_lim: Vec<f64>,
    pub xhat_lim: Vec<f64>,
    pub u_lim: Vec<f64>,
    pub dy_lim: Vec<f64>,
    pub dw: Vec<f64>,
    pub dw_bar: Vec<f64>,
}

/// Outcome of one replication.
#[derive(Clone, Debug, PartialEq)]
pub struct Replication {
    pub index: u64,
    /// `sup_t |x⁽ᴺ⁾_t − x⁰_t|²`.
    pub sup_gap_mean: f64,
    /// `sup_t |xⁱ_t − Xⁱ_t|²` per agent.
    pub sup_gap_agent: Vec<f64>,
    /// `cost_n[c][i]`: functional `c` of agent `i` in the `N`-agent system.
    pub cost_n: Vec<Vec<f64>>,
    /// `cost_limit[c][i]`: functional `c` of limiting copy `i`.
    pub cost_limit: Vec<Vec<f64>>,
    /// Largest `|xⁱ − x^{i,0} − x^{i,1}|` when tracked.
    pub decomposition_error: Option<f64>,
    /// Kept when [`Recording::paths`] is set; empty otherwise.
    pub x0: Vec<f64>,
    pub u0: Vec<f64>,
    pub x_avg: Vec<f64>,
    pub u_avg: Vec<f64>,
    pub theta: Vec<f64>,
    pub dw0: Vec<f64>,
    /// Common-noise increments recovered from `θ`, as used by the filters.
    pub dw0_recovered: Vec<f64>,
    pub pf: Vec<Mat>,
    pub gains: Vec<Mat>,
    pub agents: Vec<AgentPaths>,
}

/// All replications of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct PopulationResult {
    pub problem_grid: crate::model::GridSpec,
    pub config: PopulationConfig,
    pub cost_names: Vec<String>,
    pub replications: Vec<Replication>,
}

/// Monte Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    /// Sample mean and standard error of the mean.
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let se = if samples.len() > 1 {
            let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Self { mean, se }
    }

    /// `|mean| ≤ k·se + tol`.
    pub fn within(&self, k: f64, tol: f64) -> bool {
        self.mean.abs() <= k * self.se + tol
    }
}

impl PopulationResult {
    pub fn cost_index(&self, name: &str) -> Option<usize> {
        self.cost_names.iter().position(|n| n == name)
    }

    /// Per-replication samples of functional `cost` for agent `agent`.
    pub fn cost_samples(&self, cost: usize, agent: usize, limit: bool) -> Vec<f64> {
        self.replications
            .iter()
            .map(|r| if limit { r.cost_limit[cost][agent] } else { r.cost_n[cost][agent] })
            .collect()
    }

    /// Per-replication agent averages of functional `cost`.
    pub fn agent_mean_samples(&self, cost: usize, limit: bool) -> Vec<f64> {
        self.replications
            .iter()
            .map(|r| {
                let v = if limit { &r.cost_limit[cost] } else { &r.cost_n[cost] };
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect()
    }
}

/// Monte Carlo estimate of functional `cost` for agent `i` in the
/// `N`-agent system.
pub fn evaluate_cost_n(result: &PopulationResult, cost: usize, i: usize) -> Estimate {
    Estimate::from_samples(&result.cost_samples(cost, i, false))
}

/// Monte Carlo estimate of functional `cost` for limiting copy `i`.
pub fn evaluate_cost_limit(result: &PopulationResult, cost: usize, i: usize) -> Estimate {
    Estimate::from_samples(&result.cost_samples(cost, i, true))
}

/// Cost of one recorded path against given limit paths, all node-major.
pub fn evaluate_cost_limit_path(cost: &QuadraticCost, dt: f64, x: &[f64], u: &[f64], x0: &[f64], u0: &[f64]) -> f64 {
    cost.evaluate_path(dt, x, u, x0, u0)
}

struct NodeOps {
    A: Dense,
    A_bar: Dense,
    B: Dense,
    B_bar: Dense,
    D: Dense,
    D_bar: Dense,
    F: Dense,
    F_bar: Dense,
    G_bar: Dense,
    H_bar: Dense,
    b: Vec<f64>,
    b_bar: Vec<f64>,
    b_tilde: Vec<f64>,
    I: f64,
    b_check: f64,
    sigma_check: f64,
    /// `[[A, B], [D, F], [G, H]]` applied to `(x, u)`.
    own: Dense,
    /// `[[σ, σ̄], [0, σ̃]]` applied to `(dW, dW̄)`.
    noise: Dense,
}

impl NodeOps {
    fn new(problem: &ProblemSpec, k: usize) -> Self {
        let c = problem.at(k);
        let (n, m, d) = (problem.dims.n, problem.dims.m, problem.dims.d);
        Self {
            A: Dense::new(c.A),
            A_bar: Dense::new(c.A_bar),
            B: Dense::new(c.B),
            B_bar: Dense::new(c.B_bar),
            D: Dense::new(c.D),
            D_bar: Dense::new(c.D_bar),
            F: Dense::new(c.F),
            F_bar: Dense::new(c.F_bar),
            G_bar: Dense::new(c.G_bar),
            H_bar: Dense::new(c.H_bar),
            b: c.b.as_slice().to_vec(),
            b_bar: c.b_bar.as_slice().to_vec(),
            b_tilde: c.b_tilde.as_slice().to_vec(),
            I: c.I,
            b_check: c.b_check,
            sigma_check: c.sigma_check,
            own: Dense::blocks(
                &[n, n, n],
                &[n, m],
                &[&[Some(c.A), Some(c.B)], &[Some(c.D), Some(c.F)], &[Some(c.G), Some(c.H)]],
            ),
            noise: Dense::blocks(&[n, n], &[d, d], &[&[Some(c.sigma), Some(c.sigma_bar)], &[None, Some(c.sigma_tilde)]]),
        }
    }
}

enum Compiled {
    Feedback { kappa: f64, offset: Option<Vec<Vec<f64>>> },
    Zero,
    OpenLoop(Vec<Vec<f64>>),
}

impl Compiled {
    fn new(policy: &Policy, nodes: usize, m: usize) -> Result<Self> {
        let check = |p: &NodePath| {
            if p.values.len() != nodes || p.shape() != (m, 1) {
                Err(Error::Precondition(format!("control path must have {nodes} samples of shape {m}×1")))
            } else {
                Ok(p.values.iter().map(|v| v.as_slice().to_vec()).collect::<Vec<_>>())
            }
        };
        Ok(match policy {
            Policy::Zero => Compiled::Zero,
            Policy::OpenLoop(p) => Compiled::OpenLoop(check(p)?),
            Policy::Feedback { kappa, offset } => Compiled::Feedback {
                kappa: *kappa,
                offset: match offset {
                    Offset::None => None,
                    Offset::Constant(v) => {
                        if v.shape() != (m, 1) {
                            return Err(Error::Precondition(format!("offset must be {m}×1")));
                        }
                        Some(vec![v.as_slice().to_vec(); nodes])
                    }
                    Offset::Path(p) => Some(check(p)?),
                },
            },
        })
    }

    /// Writes the control at node `k` into `out`.
    #[allow(clippy::too_many_arguments)]
    fn eval(&self, k: usize, k1: &Dense, xhat: &[f64], x0: &[f64], u0: &[f64], diff: &mut [f64], out: &mut [f64]) {
        match self {
            Compiled::Zero => out.iter_mut().for_each(|v| *v = 0.0),
            Compiled::OpenLoop(p) => out.copy_from_slice(&p[k]),
            Compiled::Feedback { kappa, offset } => {
                out.copy_from_slice(u0);
                for (d, (a, b)) in diff.iter_mut().zip(xhat.iter().zip(x0)) {
                    *d = a - b;
                }
                k1.apply_add(diff, -kappa, out);
                if let Some(o) = offset {
                    for (v, w) in out.iter_mut().zip(&o[k]) {
                        *v += w;
                    }
                }
            }
        }
    }
}

/// Configurable population run.
#[derive(Clone, Debug)]
pub struct Simulation<'a> {
    problem: &'a ProblemSpec,
    law: &'a FeedbackLaw,
    policy: Policy,
    deviator: Option<Policy>,
    costs: Vec<QuadraticCost>,
    record: Recording,
    refinement: usize,
}

impl<'a> Simulation<'a> {
    /// All agents play `law`; the original cost is evaluated.
    pub fn new(problem: &'a ProblemSpec, law: &'a FeedbackLaw) -> Self {
        Self {
            problem,
            law,
            policy: Policy::equilibrium(),
            deviator: None,
            costs: vec![QuadraticCost::original(problem)],
            record: Recording::default(),
            refinement: 1,
        }
    }

    /// Policy of every agent other than a deviator.
    pub fn policy(mut self, policy: Policy) -> Self {
        self.policy = policy;
        self
    }

    /// Agent `0` deviates to `policy`, in the `N`-agent system and in its
    /// limiting copy.
    pub fn deviator(mut self, policy: Policy) -> Self {
        self.deviator = Some(policy);
        self
    }

    pub fn costs(mut self, costs: Vec<QuadraticCost>) -> Self {
        self.costs = costs;
        self
    }

    pub fn record(mut self, record: Recording) -> Self {
        self.record = record;
        self
    }

    /// Each increment is summed from `refinement` finer draws, which nests
    /// the Brownian paths of runs on grids refined by divisors of it.
    pub fn refinement(mut self, refinement: usize) -> Self {
        self.refinement = refinement.max(1);
        self
    }

    /// Runs all replications in parallel.
    pub fn run(&self, cfg: &PopulationConfig) -> Result<PopulationResult> {
        let p = self.problem;
        if self.law.k1.grid != p.grid {
            return Err(Error::Precondition("feedback law is on a different grid".into()));
        }
        if self.costs.iter().any(|c| c.n != p.dims.n || c.m != p.dims.m) {
            return Err(Error::Precondition("cost functional dimensions do not match".into()));
        }
        let ops: Vec<NodeOps> = if p.is_time_invariant() {
            vec![NodeOps::new(p, 0)]
        } else {
            (0..p.grid.nodes()).map(|k| NodeOps::new(p, k)).collect()
        };
        let k1: Vec<Dense> = self.law.k1.values.iter().map(Dense::new).collect();
        let base = Compiled::new(&self.policy, p.grid.nodes(), p.dims.m)?;
        let dev = self
            .deviator
            .as_ref()
            .map(|d| Compiled::new(d, p.grid.nodes(), p.dims.m))
            .transpose()?;
        let ctx = Context {
            sim: self,
            ops,
            k1,
            base,
            dev,
        };
        let replications = (0..cfg.replications as u64)
            .into_par_iter()
            .map(|rep| ctx.replication(cfg, rep))
            .collect::<Result<Vec<_>>>()?;
        Ok(PopulationResult {
            problem_grid: p.grid,
            config: *cfg,
            cost_names: self.costs.iter().map(|c| c.name.clone()).collect(),
            replications,
        })
    }
}

struct Context<'s, 'a> {
    sim: &'s Simulation<'a>,
    ops: Vec<NodeOps>,
    k1: Vec<Dense>,
    base: Compiled,
    dev: Option<Compiled>,
}

/// Per-system buffers for `N` agents.
struct System {
    x: Vec<f64>,
    xhat: Vec<f64>,
    u: Vec<f64>,
}

impl System {
    fn new(x0: &[f64], agents: usize, m: usize) -> Self {
        let x: Vec<f64> = x0.iter().copied().cycle().take(agents * x0.len()).collect();
        Self {
            xhat: x.clone(),
            x,
            u: vec![0.0; agents * m],
        }
    }
}

fn mean_into(data: &[f64], width: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let count = data.len() / width;
    for chunk in data.chunks(width) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= count as f64);
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

impl Context<'_, '_> {
    fn node(&self, k: usize) -> &NodeOps {
        if self.ops.len() == 1 {
            &self.ops[0]
        } else {
            &self.ops[k]
        }
    }

    fn policy(&self, agent: usize) -> &Compiled {
        match (&self.dev, agent) {
            (Some(d), 0) => d,
            _ => &self.base,
        }
    }

    fn replication(&self, cfg: &PopulationConfig, rep: u64) -> Result<Replication> {
        let sim = self.sim;
        let p = sim.problem;
        let grid = p.grid;
        let (n, m, d) = (p.dims.n, p.dims.m, p.dims.d);
        let steps = grid.steps;
        let dt = grid.dt();
        let agents = cfg.agents;
        let r = sim.refinement;
        let record = sim.record;
        let n_rec = record.agents.min(agents);

        let dw0 = Increments::new(noise::stream(cfg.seed, rep, noise::COMMON, Channel::W0), 1, dt, r).take_path(steps);
        let limit = meanfield::simulate_x0_with(p, sim.law, &dw0)?;
        let x0: Vec<f64> = limit.x0.values.iter().flat_map(|v| v.iter().copied()).collect();
        let u0: Vec<f64> = limit.u0.values.iter().flat_map(|v| v.iter().copied()).collect();

        let mut theta = vec![0.0; steps + 1];
        let mut dw0_rec = vec![0.0; steps];
        for k in 0..steps {
            let c = self.node(k);
            let dtheta = (c.I * theta[k] + c.b_check) * dt + c.sigma_check * dw0[k];
            dw0_rec[k] = filter::recover_dw0(dtheta, theta[k], dt, grid.time(k), p)?;
            theta[k + 1] = theta[k] + dtheta;
        }
        let (pf, gains) = filter::covariance_path(p, &dw0_rec)?;
        let gains_d: Vec<Dense> = gains.iter().map(Dense::new).collect();

        let mut sys = System::new(p.x0.as_slice(), agents, m);
        let mut lim = System::new(p.x0.as_slice(), agents, m);
        let mut dec0 = if record.decomposition { sys.x.clone() } else { Vec::new() };
        let mut dec1 = if record.decomposition { vec![0.0; agents * n] } else { Vec::new() };
        let mut dec_err: f64 = 0.0;
        let mut w_streams: Vec<Increments> = (0..agents as u64)
            .map(|i| Increments::new(noise::stream(cfg.seed, rep, i, Channel::W), d, dt, r))
            .collect();
        let mut wb_streams: Vec<Increments> = (0..agents as u64)
            .map(|i| Increments::new(noise::stream(cfg.seed, rep, i, Channel::WBar), d, dt, r))
            .collect();

        let nc = sim.costs.len();
        let zdim = 2 * (n + m);
        let mut acc_n = vec![vec![0.0; agents]; nc];
        let mut acc_l = vec![vec![0.0; agents]; nc];
        let mut sup_agent = vec![0.0; agents];
        let mut sup_mean: f64 = 0.0;
        let mut xa = vec![0.0; n];
        let mut ua = vec![0.0; m];
        let mut xa0 = vec![0.0; n];
        let mut xa1 = vec![0.0; n];
        let mut x_avg = Vec::new();
        let mut u_avg = Vec::new();
        let mut recs: Vec<AgentPaths> = (0..n_rec)
            .map(|i| AgentPaths {
                agent: i,
                ..Default::default()
            })
            .collect();

        let mut z = vec![0.0; zdim];
        let mut zl = vec![0.0; zdim];
        let mut xu = vec![0.0; n + m];
        let mut hu = vec![0.0; n + m];
        let mut own = vec![0.0; 3 * n];
        let mut own_hat = vec![0.0; 3 * n];
        let mut dws = vec![0.0; 2 * d];
        let mut shock = vec![0.0; 2 * n];
        let mut xh_next = vec![0.0; n];
        let mut x_next = vec![0.0; n];
        let mut diff = vec![0.0; n];
        let mut obs = vec![0.0; n];
        let mut innov = vec![0.0; n];
        let mut c_drift = vec![0.0; n];
        let mut c_vol = vec![0.0; n];
        let mut c_obs = vec![0.0; n];
        let mut l_drift = vec![0.0; n];
        let mut l_vol = vec![0.0; n];
        let mut l_obs = vec![0.0; n];
        let mut d0_drift = vec![0.0; n];
        let mut d0_vol = vec![0.0; n];
        let mut d1_drift = vec![0.0; n];
        let mut d1_vol = vec![0.0; n];

        for k in 0..=steps {
            let x0k = &x0[k * n..(k + 1) * n];
            let u0k = &u0[k * m..(k + 1) * m];
            let k1 = &self.k1[k];
            for i in 0..agents {
                let pol = self.policy(i);
                let (a, b) = (i * n, i * m);
                pol.eval(k, k1, &sys.xhat[a..a + n], x0k, u0k, &mut diff, &mut sys.u[b..b + m]);
                pol.eval(k, k1, &lim.xhat[a..a + n], x0k, u0k, &mut diff, &mut lim.u[b..b + m]);
            }
            mean_into(&sys.x, n, &mut xa);
            mean_into(&sys.u, m, &mut ua);
            if record.paths {
                x_avg.extend_from_slice(&xa);
                u_avg.extend_from_slice(&ua);
            }
            sup_mean = sup_mean.max(sq_dist(&xa, x0k));

            let w = if k == 0 || k == steps { 0.5 * dt } else { dt };
            if nc > 0 {
                let stages: Vec<_> = sim.costs.iter().map(|c| c.stage(k)).collect();
                z[n + m..2 * n + m].copy_from_slice(&xa);
                z[2 * n + m..].copy_from_slice(&ua);
                zl[n + m..2 * n + m].copy_from_slice(x0k);
                zl[2 * n + m..].copy_from_slice(u0k);
                for i in 0..agents {
                    z[..n].copy_from_slice(&sys.x[i * n..(i + 1) * n]);
                    z[n..n + m].copy_from_slice(&sys.u[i * m..(i + 1) * m]);
                    zl[..n].copy_from_slice(&lim.x[i * n..(i + 1) * n]);
                    zl[n..n + m].copy_from_slice(&lim.u[i * m..(i + 1) * m]);
                    for (c, stage) in stages.iter().enumerate() {
                        acc_n[c][i] += w * stage.eval(&z);
                        acc_l[c][i] += w * stage.eval(&zl);
                    }
                }
            }
            for (i, s) in sup_agent.iter_mut().enumerate() {
                *s = f64::max(*s, sq_dist(&sys.x[i * n..(i + 1) * n], &lim.x[i * n..(i + 1) * n]));
            }
            if record.decomposition {
                for i in 0..agents * n {
                    dec_err = dec_err.max((sys.x[i] - dec0[i] - dec1[i]).abs());
                }
            }
            for (i, rec) in recs.iter_mut().enumerate() {
                rec.x.extend_from_slice(&sys.x[i * n..(i + 1) * n]);
                rec.xhat.extend_from_slice(&sys.xhat[i * n..(i + 1) * n]);
                rec.u.extend_from_slice(&sys.u[i * m..(i + 1) * m]);
                rec.x_lim.extend_from_slice(&lim.x[i * n..(i + 1) * n]);
                rec.xhat_lim.extend_from_slice(&lim.xhat[i * n..(i + 1) * n]);
                rec.u_lim.extend_from_slice(&lim.u[i * m..(i + 1) * m]);
            }
            if k == steps {
                break;
            }

            let c = self.node(k);
            let gain = &gains_d[k];
            let (w0, w0r) = (dw0[k], dw0_rec[k]);
            // Inputs shared by all agents of each system.
            let shared = |xs: &[f64], us: &[f64], drift: &mut [f64], vol: &mut [f64], obs: &mut [f64]| {
                drift.copy_from_slice(&c.b);
                c.A_bar.apply_add(xs, 1.0, drift);
                c.B_bar.apply_add(us, 1.0, drift);
                vol.copy_from_slice(&c.b_bar);
                c.D_bar.apply_add(xs, 1.0, vol);
                c.F_bar.apply_add(us, 1.0, vol);
                obs.copy_from_slice(&c.b_tilde);
                c.G_bar.apply_add(xs, 1.0, obs);
                c.H_bar.apply_add(us, 1.0, obs);
            };
            shared(&xa, &ua, &mut c_drift, &mut c_vol, &mut c_obs);
            shared(x0k, u0k, &mut l_drift, &mut l_vol, &mut l_obs);
            if record.decomposition {
                mean_into(&dec0, n, &mut xa0);
                mean_into(&dec1, n, &mut xa1);
                d0_drift.iter_mut().for_each(|v| *v = 0.0);
                c.A_bar.apply_add(&xa0, 1.0, &mut d0_drift);
                d0_vol.iter_mut().for_each(|v| *v = 0.0);
                c.D_bar.apply_add(&xa0, 1.0, &mut d0_vol);
                d1_drift.copy_from_slice(&c.b);
                c.A_bar.apply_add(&xa1, 1.0, &mut d1_drift);
                c.B_bar.apply_add(&ua, 1.0, &mut d1_drift);
                d1_vol.copy_from_slice(&c.b_bar);
                c.D_bar.apply_add(&xa1, 1.0, &mut d1_vol);
                c.F_bar.apply_add(&ua, 1.0, &mut d1_vol);
            }

            for i in 0..agents {
                w_streams[i].fill(&mut dws[..d]);
                wb_streams[i].fill(&mut dws[d..]);
                c.noise.apply(&dws, &mut shock);
                let (a, b) = (i * n, i * m);
                for (system, cd, cv, co, rec_lim) in [
                    (&mut sys, &c_drift, &c_vol, &c_obs, false),
                    (&mut lim, &l_drift, &l_vol, &l_obs, true),
                ] {
                    xu[..n].copy_from_slice(&system.x[a..a + n]);
                    xu[n..].copy_from_slice(&system.u[b..b + m]);
                    hu[..n].copy_from_slice(&system.xhat[a..a + n]);
                    hu[n..].copy_from_slice(&system.u[b..b + m]);
                    c.own.apply(&xu, &mut own);
                    c.own.apply(&hu, &mut own_hat);
                    for j in 0..n {
                        obs[j] = (co[j] + own[2 * n + j]) * dt + shock[n + j];
                        innov[j] = obs[j] - (l_obs[j] + own_hat[2 * n + j]) * dt;
                        x_next[j] = xu[j] + (cd[j] + own[j]) * dt + (cv[j] + own[n + j]) * w0 + shock[j];
                        xh_next[j] = hu[j] + (l_drift[j] + own_hat[j]) * dt + (l_vol[j] + own_hat[n + j]) * w0r;
                    }
                    gain.apply_add(&innov, 1.0, &mut xh_next);
                    let ui = &system.u[b..b + m];

                    if i < n_rec {
                        let rec = &mut recs[i];
                        if rec_lim {
                            rec.dy_lim.extend_from_slice(&obs);
                        } else {
                            rec.dy.extend_from_slice(&obs);
                        }
                    }
                    if record.decomposition && !rec_lim {
                        let x0i = &mut dec0[a..a + n];
                        let x1i = &mut dec1[a..a + n];
                        let mut n0 = x0i.to_vec();
                        let mut t0 = d0_drift.clone();
                        c.A.apply_add(x0i, 1.0, &mut t0);
                        let mut v0 = d0_vol.clone();
                        c.D.apply_add(x0i, 1.0, &mut v0);
                        for j in 0..n {
                            n0[j] += t0[j] * dt + v0[j] * w0;
                        }
                        for j in 0..n {
                            n0[j] += shock[j];
                        }
                        let mut n1 = x1i.to_vec();
                        let mut t1 = d1_drift.clone();
                        c.A.apply_add(x1i, 1.0, &mut t1);
                        c.B.apply_add(ui, 1.0, &mut t1);
                        let mut v1 = d1_vol.clone();
                        c.D.apply_add(x1i, 1.0, &mut v1);
                        c.F.apply_add(ui, 1.0, &mut v1);
                        for j in 0..n {
                            n1[j] += t1[j] * dt + v1[j] * w0;
                        }
                        x0i.copy_from_slice(&n0);
                        x1i.copy_from_slice(&n1);
                    }
                    system.x[a..a + n].copy_from_slice(&x_next);
                    system.xhat[a..a + n].copy_from_slice(&xh_next);
                    if !x_next.iter().all(|v| v.is_finite()) {
                        return Err(Error::Divergence {
                            context: format!("replication {rep}, agent {i}"),
                            t: grid.time(k + 1),
                        });
                    }
                }
                if i < n_rec {
                    recs[i].dw.extend_from_slice(&dws[..d]);
                    recs[i].dw_bar.extend_from_slice(&dws[d..]);
                }
            }
        }

        let mut zt = vec![0.0; 2 * n];
        let x0t = &x0[steps * n..];
        let mut cost_n = vec![vec![0.0; agents]; nc];
        let mut cost_limit = vec![vec![0.0; agents]; nc];
        for (c, cost) in sim.costs.iter().enumerate() {
            for i in 0..agents {
                zt[..n].copy_from_slice(&sys.x[i * n..(i + 1) * n]);
                zt[n..].copy_from_slice(&xa);
                cost_n[c][i] = 0.5 * (acc_n[c][i] + cost.terminal.eval(&zt));
                zt[..n].copy_from_slice(&lim.x[i * n..(i + 1) * n]);
                zt[n..].copy_from_slice(x0t);
                cost_limit[c][i] = 0.5 * (acc_l[c][i] + cost.terminal.eval(&zt));
            }
        }
        let keep = record.paths;
        Ok(Replication {
            index: rep,
            sup_gap_mean: sup_mean,
            sup_gap_agent: sup_agent,
            cost_n,
            cost_limit,
            decomposition_error: record.decomposition.then_some(dec_err),
            x0: if keep { x0 } else { Vec::new() },
            u0: if keep { u0 } else { Vec::new() },
            x_avg,
            u_avg,
            theta: if keep { theta } else { Vec::new() },
            dw0: if keep { dw0 } else { Vec::new() },
            dw0_recovered: if keep { dw0_rec } else { Vec::new() },
            pf: if keep { pf } else { Vec::new() },
            gains: if keep { gains } else { Vec::new() },
            agents: recs,
        })
    }
}

/// Runs the population with every agent on the equilibrium strategy and
/// the original cost evaluated.
pub fn simulate_population(problem: &ProblemSpec, law: &FeedbackLaw, cfg: &PopulationConfig) -> Result<PopulationResult> {
    Simulation::new(problem, law).run(cfg)
}

/// Residuals of the completing-square identity `J = Jᴾ + ½⟨P₀x, x⟩`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EquivalenceReport {
    /// `½⟨P₀x, x⟩`.
    pub p0_term: f64,
    /// `J − Jᴾ − ½⟨P₀x, x⟩` for the limiting copies.
    pub limit: Estimate,
    /// The same residual for the `N`-agent system.
    pub n_agent: Estimate,
}

/// Evaluates the original and the relaxed cost on the same paths and
/// reports the residual of the identity, averaged over agents per
/// replication.
pub fn equivalence_check(
    problem: &ProblemSpec,
    law: &FeedbackLaw,
    comp: &CompensatorPath,
    policy: Policy,
    cfg: &PopulationConfig,
) -> Result<EquivalenceReport> {
    let costs = vec![QuadraticCost::original(problem), relaxed_cost(problem, comp)];
    let result = Simulation::new(problem, law)
        .policy(policy)
        .costs(costs)
        .record(Recording {
            agents: 0,
            paths: false,
            decomposition: false,
        })
        .run(cfg)?;
    let x = &problem.x0;
    let p0_term = 0.5 * linalg::dot(&(comp.p(0) * x), x);
    let residual = |limit: bool| {
        let j = result.agent_mean_samples(0, limit);
        let jp = result.agent_mean_samples(1, limit);
        let r: Vec<f64> = j.iter().zip(&jp).map(|(a, b)| a - b - p0_term).collect();
        Estimate::from_samples(&r)
    };
    Ok(EquivalenceReport {
        p0_term,
        limit: residual(true),
        n_agent: residual(false),
    })
}

/// Central-difference estimate of the directional derivative of the
/// limiting cost at one step size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradientEstimate {
    pub eps: f64,
    /// `[J(ū + εv) − J(ū − εv)] / 2ε`.
    pub derivative: Estimate,
    /// `[J(ū + εv) − 2J(ū) + J(ū − εv)] / ε²`.
    pub second: Estimate,
}

/// Directional derivatives of the limiting cost of the equilibrium
/// strategy along the control offset `direction`, with common random
/// numbers across the three evaluations of every step size.
pub fn gradient_check(
    problem: &ProblemSpec,
    law: &FeedbackLaw,
    direction: &Offset,
    eps: &[f64],
    cfg: &PopulationConfig,
) -> Result<Vec<GradientEstimate>> {
    let scaled = |s: f64| -> Policy {
        let offset = match direction {
            Offset::None => Offset::None,
            Offset::Constant(v) => Offset::Constant(v * s),
            Offset::Path(p) => Offset::Path(NodePath {
                grid: p.grid,
                values: p.values.iter().map(|v| v * s).collect(),
            }),
        };
        Policy::Feedback { kappa: 1.0, offset }
    };
    let run = |policy: Policy| -> Result<Vec<f64>> {
        let r = Simulation::new(problem, law)
            .policy(policy)
            .record(Recording {
                agents: 0,
                paths: false,
                decomposition: false,
            })
            .run(cfg)?;
        Ok(r.agent_mean_samples(0, true))
    };
    let centre = run(scaled(0.0))?;
    eps.iter()
        .map(|&e| {
            let plus = run(scaled(e))?;
            let minus = run(scaled(-e))?;
            let d: Vec<f64> = plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * e)).collect();
            let s: Vec<f64> = plus
                .iter()
                .zip(&minus)
                .zip(&centre)
                .map(|((a, b), c)| (a - 2.0 * c + b) / (e * e))
                .collect();
            Ok(GradientEstimate {
                eps: e,
                derivative: Estimate::from_samples(&d),
                second: Estimate::from_samples(&s),
            })
        })
        .collect()
}

/// Terminal defects of the reconstructed adjoint process.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AdjointDefect {
    /// Mean of `|φ̂_T − (L_T(x̂_T − α₃x⁰_T) + l_T)|` for the filtered adjoint.
    pub filtered: Estimate,
    /// Mean of `|φ_T − (L_T(X_T − α₃x⁰_T) + l_T)|` for the pathwise adjoint.
    pub pathwise: Estimate,
    /// Number of recorded paths used.
    pub paths: usize,
}

fn block(v: &[f64], k: usize, w: usize) -> Mat {
    linalg::col(&v[k * w..(k + 1) * w])
}

/// Integrates the adjoint equation forward along recorded limiting-copy
/// paths and compares its endpoint with the terminal condition.
///
/// The filtered adjoint `φ̂ = Π(x̂ − x⁰) + Σx⁰ + ρ` evolves by
///
/// ```text
/// dφ̂ = −[Aᵀφ̂ + Dᵀη̂ + Q(x̂ − α₁x⁰) + S(u − β₂u⁰) + q] dt + η̂ dW⁰ + ΠK dν,
/// ```
///
/// and the pathwise adjoint `φ = Π(X − x⁰) + Σx⁰ + ρ` uses the true state
/// with diffusion `ηdW⁰ + Πσ dW + Πσ̄ dW̄`.
pub fn adjoint_consistency(problem: &ProblemSpec, sol: &RiccatiSolution, result: &PopulationResult) -> Result<AdjointDefect> {
    let grid = problem.grid;
    let (n, m) = (problem.dims.n, problem.dims.m);
    let mf = problem.meanfield;
    let dt = grid.dt();
    let mut filtered = Vec::new();
    let mut pathwise = Vec::new();
    for rep in &result.replications {
        if rep.x0.is_empty() {
            return Err(Error::Precondition("adjoint check needs recorded limit paths".into()));
        }
        for a in &rep.agents {
            let x0 = |k| block(&rep.x0, k, n);
            let u0 = |k| block(&rep.u0, k, m);
            let mut phi_hat = meanfield::adjoint(problem, sol, 0, &block(&a.xhat_lim, 0, n), &x0(0), &block(&a.u_lim, 0, m), &u0(0)).0;
            let mut phi = phi_hat.clone();
            for k in 0..grid.steps {
                let c = problem.at(k);
                let (xk, uk0) = (x0(k), u0(k));
                let xh = block(&a.xhat_lim, k, n);
                let xs = block(&a.x_lim, k, n);
                let u = block(&a.u_lim, k, m);
                let pi = sol.pi.at(k);
                let (_, eta_hat) = meanfield::adjoint(problem, sol, k, &xh, &xk, &u, &uk0);
                let (_, eta) = meanfield::adjoint(problem, sol, k, &xs, &xk, &u, &uk0);
                let run = |p: &Mat, e: &Mat, x: &Mat| {
                    c.A.transpose() * p + c.D.transpose() * e + c.Q * (x - &xk * mf.alpha1) + c.S * (&u - &uk0 * mf.beta2) + c.q
                };
                let innov = block(&a.dy_lim, k, n)
                    - (c.G * &xh + c.H * &u + c.G_bar * &xk + c.H_bar * &uk0 + c.b_tilde) * dt;
                let next_hat = &phi_hat - run(&phi_hat, &eta_hat, &xh) * dt
                    + &eta_hat * rep.dw0_recovered[k]
                    + pi * &rep.gains[k] * innov;
                let dw = linalg::col(&a.dw[k * problem.dims.d..(k + 1) * problem.dims.d]);
                let dwb = linalg::col(&a.dw_bar[k * problem.dims.d..(k + 1) * problem.dims.d]);
                let next = &phi - run(&phi, &eta, &xs) * dt + &eta * rep.dw0[k] + pi * c.sigma * dw + pi * c.sigma_bar * dwb;
                phi_hat = next_hat;
                phi = next;
            }
            let k = grid.steps;
            let xt = x0(k) * mf.alpha3;
            let target_hat = &problem.cost.L_T * (block(&a.xhat_lim, k, n) - &xt) + &problem.cost.l_T;
            let target = &problem.cost.L_T * (block(&a.x_lim, k, n) - &xt) + &problem.cost.l_T;
            filtered.push((phi_hat - target_hat).norm());
            pathwise.push((phi - target).norm());
        }
    }
    if filtered.is_empty() {
        return Err(Error::Precondition("adjoint check needs recorded agents".into()));
    }
    Ok(AdjointDefect {
        filtered: Estimate::from_samples(&filtered),
        pathwise: Estimate::from_samples(&pathwise),
        paths: filtered.len(),
    })
}

/// Largest stationarity residual over the recorded agents, nodes and both
/// systems.
pub fn stationarity_max(problem: &ProblemSpec, sol: &RiccatiSolution, result: &PopulationResult) -> Result<f64> {
    let (n, m) = (problem.dims.n, problem.dims.m);
    let mut worst: f64 = 0.0;
    for rep in &result.replications {
        if rep.x0.is_empty() {
            return Err(Error::Precondition("stationarity check needs recorded limit paths".into()));
        }
        for a in &rep.agents {
            for k in 0..problem.grid.nodes() {
                let (x0, u0) = (block(&rep.x0, k, n), block(&rep.u0, k, m));
                for (xh, u) in [(&a.xhat, &a.u), (&a.xhat_lim, &a.u_lim)] {
                    let r = meanfield::stationarity_residual(problem, sol, k, &block(xh, k, n), &x0, &block(u, k, m), &u0);
                    worst = worst.max(linalg::max_abs(&r));
                }
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoefficientPath, Dimensions, GridSpec};
    use crate::riccati::{solve, SolverOptions};

    fn s(v: f64) -> Mat {
        linalg::scalar(v)
    }

    fn instance(steps: usize) -> ProblemSpec {
        let grid = GridSpec::new(1.0, steps).unwrap();
        let mut p = ProblemSpec::zero(Dimensions::new(1, 1, 1).unwrap(), grid);
        let set = |v: f64| CoefficientPath::constant(grid, s(v));
        p.dynamics.A = set(0.1);
        p.dynamics.A_bar = set(0.2);
        p.dynamics.B = set(1.0);
        p.dynamics.B_bar = set(0.1);
        p.dynamics.D = set(0.2);
        p.dynamics.F = set(0.3);
        p.dynamics.b = set(0.1);
        p.dynamics.sigma = set(0.3);
        p.dynamics.sigma_bar = set(0.2);
        p.observation.G = set(1.0);
        p.observation.sigma_tilde = set(0.5);
        p.cost.Q = set(1.0);
        p.cost.R = set(0.5);
        p.cost.L_T = s(1.0);
        p.meanfield.alpha1 = 0.5;
        p.x0 = s(1.0);
        p
    }

    fn law(p: &ProblemSpec) -> (RiccatiSolution, FeedbackLaw) {
        let sol = solve(p, &SolverOptions::default()).unwrap();
        let law = FeedbackLaw::from_solution(&sol).unwrap();
        (sol, law)
    }

    #[test]
    fn noiseless_single_agent_follows_ode() {
        let mut p = instance(100);
        p.dynamics.sigma = CoefficientPath::zeros(p.grid, 1, 1);
        p.dynamics.sigma_bar = CoefficientPath::zeros(p.grid, 1, 1);
        p.dynamics.D = CoefficientPath::zeros(p.grid, 1, 1);
        p.dynamics.F = CoefficientPath::zeros(p.grid, 1, 1);
        let (_, law) = law(&p);
        let cfg = PopulationConfig::new(1, 1, 5).unwrap();
        let res = Simulation::new(&p, &law)
            .record(Recording {
                agents: 1,
                ..Default::default()
            })
            .run(&cfg)
            .unwrap();
        let rep = &res.replications[0];
        // The noiseless agent, its filter and the mean field coincide.
        for k in 0..=100 {
            assert!((rep.agents[0].x[k] - rep.x0[k]).abs() < 1e-8);
            assert!((rep.agents[0].xhat[k] - rep.x0[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn averages_are_agent_means() {
        let p = instance(20);
        let (_, law) = law(&p);
        let cfg = PopulationConfig::new(4, 2, 9).unwrap();
        let res = Simulation::new(&p, &law)
            .record(Recording {
                agents: 4,
                ..Default::default()
            })
            .run(&cfg)
            .unwrap();
        for rep in &res.replications {
            for k in 0..=20 {
                let mean = rep.agents.iter().map(|a| a.x[k]).sum::<f64>() / 4.0;
                assert!((mean - rep.x_avg[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn decomposition_is_exact() {
        let p = instance(50);
        let (_, law) = law(&p);
        let cfg = PopulationConfig::new(6, 2, 1).unwrap();
        let res = Simulation::new(&p, &law)
            .record(Recording {
                agents: 0,
                paths: false,
                decomposition: true,
            })
            .run(&cfg)
            .unwrap();
        for rep in &res.replications {
            assert!(rep.decomposition_error.unwrap() <= 1e-10);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let p = instance(30);
        let (_, law) = law(&p);
        let cfg = PopulationConfig::new(5, 3, 11).unwrap();
        let a = simulate_population(&p, &law, &cfg).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| simulate_population(&p, &law, &cfg).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_cost_is_zero() {
        let mut p = instance(10);
        p.cost.Q = CoefficientPath::zeros(p.grid, 1, 1);
        p.cost.R = CoefficientPath::constant(p.grid, s(1.0));
        p.cost.L_T = s(0.0);
        let (_, law) = law(&p);
        let cfg = PopulationConfig::new(3, 2, 2).unwrap();
        let costs = vec![QuadraticCost::original(&ProblemSpec::zero(p.dims, p.grid))];
        let res = Simulation::new(&p, &law).costs(costs).run(&cfg).unwrap();
        assert_eq!(evaluate_cost_n(&res, 0, 1).mean, 0.0);
        assert_eq!(evaluate_cost_limit(&res, 0, 2).mean, 0.0);
    }

    #[test]
    fn terminal_cost_matches_direct_average() {
        let mut p = instance(20);
        p.cost.Q = CoefficientPath::zeros(p.grid, 1, 1);
        p.meanfield = Default::default();
        let (_, law) = law(&p);
        let mut terminal_only = ProblemSpec::zero(p.dims, p.grid);
        terminal_only.cost.L_T = s(1.0);
        let cfg = PopulationConfig::new(2, 50, 4).unwrap();
        let res = Simulation::new(&p, &law)
            .costs(vec![QuadraticCost::original(&terminal_only)])
            .record(Recording {
                agents: 1,
                ..Default::default()
            })
            .run(&cfg)
            .unwrap();
        let direct: Vec<f64> = res.replications.iter().map(|r| 0.5 * r.agents[0].x[20].powi(2)).collect();
        let est = evaluate_cost_n(&res, 0, 0);
        let oracle = Estimate::from_samples(&direct);
        assert!((est.mean - oracle.mean).abs() <= 3.0 * oracle.se + 1e-12);
    }

    #[test]
    fn deterministic_limit_cost_matches_quadrature() {
        let grid = GridSpec::new(1.0, 10).unwrap();
        let mut p = ProblemSpec::zero(Dimensions::new(1, 1, 1).unwrap(), grid);
        p.cost.Q = CoefficientPath::constant(grid, s(1.0));
        let cost = QuadraticCost::original(&p);
        let x: Vec<f64> = (0..=10).map(|k| grid.time(k)).collect();
        let zeros = vec![0.0; 11];
        // Trapezoid of t² on ten intervals.
        let trap: f64 = (0..=10).map(|k| if k == 0 || k == 10 { 0.5 } else { 1.0 } * x[k] * x[k]).sum::<f64>() * 0.1;
        let got = evaluate_cost_limit_path(&cost, 0.1, &x, &zeros, &zeros, &zeros);
        assert!((got - 0.5 * trap).abs() < 1e-8);
    }

    #[test]
    fn zero_compensator_equivalence_is_exact() {
        let p = instance(20);
        let (_, law) = law(&p);
        let comp = CompensatorPath::zero(p.grid, 1);
        let cfg = PopulationConfig::new(3, 4, 8).unwrap();
        let r = equivalence_check(&p, &law, &comp, Policy::equilibrium(), &cfg).unwrap();
        assert!(r.limit.mean.abs() < 1e-12 && r.n_agent.mean.abs() < 1e-12);
    }

    #[test]
    fn stationarity_on_recorded_paths() {
        let p = instance(40);
        let (sol, law) = law(&p);
        let cfg = PopulationConfig::new(3, 2, 3).unwrap();
        let res = Simulation::new(&p, &law)
            .record(Recording {
                agents: 3,
                ..Default::default()
            })
            .run(&cfg)
            .unwrap();
        assert!(stationarity_max(&p, &sol, &res).unwrap() < 1e-10);
    }

    #[test]
    fn zero_direction_has_zero_derivative() {
        let p = instance(10);
        let (_, law) = law(&p);
        let cfg = PopulationConfig::new(2, 3, 1).unwrap();
        let g = gradient_check(&p, &law, &Offset::Constant(s(0.0)), &[0.01], &cfg).unwrap();
        assert_eq!(g[0].derivative.mean, 0.0);
    }
}
