//! Mean-variance asset-liability management with a partially observed
//! population of companies.
//!
//! Company `i` holds cash `xⁱ` and invests the amount `uⁱ` in a stock:
//!
//! ```text
//! dxⁱ = (r xⁱ + B uⁱ − b) dt + σ uⁱ dW⁰ + c dWⁱ + c̄ dW̄ⁱ,     B = μ − r,
//! ```
//!
//! and minimizes `½(γ E|xⁱ_T − x⁽ᴺ⁾_T|² − E xⁱ_T)`. The running cost is zero,
//! so the problem is indefinite; the control entering the common-noise
//! diffusion restores solvability. The solution is explicit:
//!
//! ```text
//! Π_t = γ e^{(2r − B²/σ²)(T−t)},   Σ ≡ 0,   ρ_t = −½ e^{r(T−t)},
//! u = −B(x̂ − x⁰)/σ² − Bρ_t/(σ²Π_t).
//! ```
//!
//! The general `Σ` solver does not apply here because its gain `𝓡̃ = σ²Σ`
//! vanishes; the strategy is assembled from the explicit formulas instead.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compensator::{check_condition_rc, CompensatorPath, RcReport};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::meanfield::FeedbackLaw;
use crate::model::{CoefficientPath, Dimensions, GridSpec, MeanFieldWeights, ProblemSpec};
use crate::path::{self, NodePath};
use crate::population::{PopulationConfig, Recording, Simulation};
use crate::riccati::RiccatiSolution;

/// Time steps used when no grid is given.
pub const DEFAULT_STEPS: usize = 1000;

/// Terminal linear weight encoding the `−½E x_T` reward.
const TERMINAL_REWARD: f64 = -0.5;

/// Scalar parameters of the application.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PortfolioParams {
    /// Interest rate.
    pub r: f64,
    /// Stock appreciation rate.
    pub mu: f64,
    /// Liability rate; the cash drift is `−b`.
    pub b: f64,
    /// Stock volatility, driven by the common noise.
    pub sigma: f64,
    /// Volatility of the individual noise `Wⁱ`.
    pub c: f64,
    /// Volatility of the individual noise `W̄ⁱ` shared with the observation.
    pub c_bar: f64,
    /// Observation gain.
    pub g: f64,
    pub b_tilde: f64,
    pub sigma_tilde: f64,
    /// Drift coefficient of the public observation `θ`.
    pub i: f64,
    pub b_check: f64,
    pub sigma_check: f64,
    /// Weight of the terminal deviation from the population average.
    pub gamma: f64,
    pub x0: f64,
    pub horizon: f64,
}

impl Default for PortfolioParams {
    /// `G = 1` and `c̄ = 0` are assumptions; they only affect the filter.
    fn default() -> Self {
        Self {
            r: 0.06,
            mu: 0.15,
            b: 0.06,
            sigma: 0.25,
            c: 0.5,
            c_bar: 0.0,
            g: 1.0,
            b_tilde: 0.0,
            sigma_tilde: 1.0,
            i: 0.0,
            b_check: 0.0,
            sigma_check: 1.0,
            gamma: 0.6,
            x0: 2.0,
            horizon: 1.0,
        }
    }
}

impl PortfolioParams {
    /// Excess return `B = μ − r`.
    pub fn excess_return(&self) -> f64 {
        self.mu - self.r
    }

    /// Exponent `2r − B²/σ²` of `Π`.
    pub fn pi_rate(&self) -> f64 {
        2.0 * self.r - (self.excess_return() / self.sigma).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.r,
            self.mu,
            self.b,
            self.sigma,
            self.c,
            self.c_bar,
            self.g,
            self.b_tilde,
            self.sigma_tilde,
            self.i,
            self.b_check,
            self.sigma_check,
            self.gamma,
            self.x0,
            self.horizon,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("portfolio parameters must be finite".into()));
        }
        if self.gamma <= 0.0 || self.sigma <= 0.0 || self.horizon <= 0.0 {
            return Err(Error::Invalid(format!(
                "need γ > 0, σ > 0 and T > 0, got γ={}, σ={}, T={}",
                self.gamma, self.sigma, self.horizon
            )));
        }
        if self.sigma_tilde == 0.0 || self.sigma_check == 0.0 {
            return Err(Error::Invalid("observation volatilities σ̃ and σ̌ must be nonzero".into()));
        }
        Ok(())
    }

    /// The application as a general problem instance on `steps` intervals.
    pub fn to_problem(&self, steps: usize) -> Result<ProblemSpec> {
        self.validate()?;
        let grid = GridSpec::new(self.horizon, steps)?;
        let mut p = ProblemSpec::zero(Dimensions::new(1, 1, 1)?, grid);
        let c = |v: f64| CoefficientPath::constant(grid, linalg::scalar(v));
        p.dynamics.A = c(self.r);
        p.dynamics.B = c(self.excess_return());
        p.dynamics.F = c(self.sigma);
        p.dynamics.b = c(-self.b);
        p.dynamics.sigma = c(self.c);
        p.dynamics.sigma_bar = c(self.c_bar);
        p.observation.G = c(self.g);
        p.observation.b_tilde = c(self.b_tilde);
        p.observation.sigma_tilde = c(self.sigma_tilde);
        p.common.I = c(self.i);
        p.common.b_check = c(self.b_check);
        p.common.sigma_check = c(self.sigma_check);
        p.cost.L_T = linalg::scalar(self.gamma);
        p.cost.l_T = linalg::scalar(TERMINAL_REWARD);
        p.meanfield = MeanFieldWeights {
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 1.0,
            beta1: 0.0,
            beta2: 0.0,
        };
        p.x0 = linalg::scalar(self.x0);
        Ok(p)
    }

    /// Recovers the parameters from a problem with the application's
    /// structure, or `None` when the problem has a different shape.
    pub fn from_problem(problem: &ProblemSpec) -> Option<Self> {
        let d = problem.dims;
        if (d.n, d.m, d.d) != (1, 1, 1) || !problem.is_time_invariant() {
            return None;
        }
        let c = problem.at(0);
        let v = |m: &Mat| m[(0, 0)];
        let zero = [c.A_bar, c.D, c.D_bar, c.B_bar, c.F_bar, c.b_bar, c.G_bar, c.H, c.H_bar, c.Q, c.R, c.S, c.q, c.r];
        let mf = problem.meanfield;
        let shaped = zero.iter().all(|m| v(m) == 0.0)
            && (mf.alpha1, mf.alpha2, mf.alpha3, mf.beta1, mf.beta2) == (1.0, 1.0, 1.0, 0.0, 0.0)
            && v(&problem.cost.l_T) == TERMINAL_REWARD;
        if !shaped {
            return None;
        }
        let params = Self {
            r: v(c.A),
            mu: v(c.A) + v(c.B),
            b: -v(c.b),
            sigma: v(c.F),
            c: v(c.sigma),
            c_bar: v(c.sigma_bar),
            g: v(c.G),
            b_tilde: v(c.b_tilde),
            sigma_tilde: v(c.sigma_tilde),
            i: c.I,
            b_check: c.b_check,
            sigma_check: c.sigma_check,
            gamma: v(&problem.cost.L_T),
            x0: v(&problem.x0),
            horizon: problem.grid.horizon,
        };
        params.validate().ok().map(|_| params)
    }
}

/// Explicit `Π`, `Σ ≡ 0` and `ρ` on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosedForm {
    pub params: PortfolioParams,
    pub pi: NodePath,
    pub sigma: NodePath,
    pub rho: NodePath,
}

impl ClosedForm {
    /// `Π_t = γ e^{(2r − B²/σ²)(T−t)}`.
    pub fn pi_at(&self, t: f64) -> f64 {
        let p = &self.params;
        p.gamma * (p.pi_rate() * (p.horizon - t)).exp()
    }

    /// `ρ_t = −½ e^{r(T−t)}`.
    pub fn rho_at(&self, t: f64) -> f64 {
        let p = &self.params;
        TERMINAL_REWARD * (p.r * (p.horizon - t)).exp()
    }

    /// Limiting control `u⁰_t = −Bρ_t/(σ²Π_t)`.
    pub fn u0_at(&self, t: f64) -> f64 {
        let p = &self.params;
        -p.excess_return() * self.rho_at(t) / (p.sigma.powi(2) * self.pi_at(t))
    }
}

/// Evaluates the explicit solution at the nodes of `grid`.
pub fn closed_form(params: &PortfolioParams, grid: GridSpec) -> Result<ClosedForm> {
    params.validate()?;
    let mut cf = ClosedForm {
        params: *params,
        pi: NodePath::constant(grid, linalg::scalar(0.0)),
        sigma: NodePath::constant(grid, linalg::scalar(0.0)),
        rho: NodePath::constant(grid, linalg::scalar(0.0)),
    };
    let nodes = |f: &dyn Fn(f64) -> f64| -> Result<NodePath> {
        NodePath::new(grid, (0..grid.nodes()).map(|k| linalg::scalar(f(grid.time(k)))).collect())
    };
    cf.pi = nodes(&|t| cf.pi_at(t))?;
    cf.rho = nodes(&|t| cf.rho_at(t))?;
    Ok(cf)
}

/// The relaxed compensator `P = Π` with its analytic derivative.
pub fn compensator(params: &PortfolioParams, grid: GridSpec) -> CompensatorPath {
    let p = *params;
    CompensatorPath::analytic(grid, move |t| {
        let value = p.gamma * (p.pi_rate() * (p.horizon - t)).exp();
        (linalg::scalar(value), linalg::scalar(-p.pi_rate() * value))
    })
}

/// Runs the Condition (RC) check on the explicit compensator.
pub fn compensator_certificate(params: &PortfolioParams, grid: GridSpec) -> Result<RcReport> {
    let problem = params.to_problem(grid.steps)?;
    check_condition_rc(&problem, &compensator(params, problem.grid))
}

/// `u = −B(x̂ − x⁰)/σ² − Bρ_t/(σ²Π_t)`.
pub fn portfolio_strategy(closed: &ClosedForm, t: f64, xhat: f64, x0: f64) -> Result<f64> {
    let p = &closed.params;
    let pi = closed.pi_at(t);
    if !(pi > 0.0) {
        return Err(Error::Invalid(format!("closed form has Π({t}) = {pi} ≤ 0")));
    }
    Ok(-p.excess_return() * (xhat - x0) / p.sigma.powi(2) + closed.u0_at(t))
}

/// The strategy as gain paths `K1 = B/σ²`, `K2 = 0`, `k3 = Bρ/(σ²Π)`.
pub fn feedback_law(closed: &ClosedForm) -> Result<FeedbackLaw> {
    let p = &closed.params;
    let grid = closed.pi.grid;
    let k3 = (0..grid.nodes()).map(|k| linalg::scalar(-closed.u0_at(grid.time(k)))).collect();
    Ok(FeedbackLaw {
        k1: NodePath::constant(grid, linalg::scalar(p.excess_return() / p.sigma.powi(2))),
        k2: NodePath::constant(grid, linalg::scalar(0.0)),
        k3: NodePath::new(grid, k3)?,
    })
}

/// `(Π, Σ, ρ)` from the explicit formulas with the derived gain paths of
/// the general theory, for adjoint reconstruction.
pub fn solution(problem: &ProblemSpec, closed: &ClosedForm) -> Result<RiccatiSolution> {
    RiccatiSolution::from_parts(problem, closed.pi.clone(), closed.sigma.clone(), closed.rho.clone())
}

/// Gap summary and written files of a figure run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FigureReport {
    pub agents: usize,
    pub seed: u64,
    pub sup_state_gap: f64,
    pub rms_state_gap: f64,
    pub sup_control_gap: f64,
    pub rms_control_gap: f64,
    pub state_csv: PathBuf,
    pub control_csv: PathBuf,
}

fn gaps(a: &[f64], b: &[f64]) -> (f64, f64) {
    let sq: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).collect();
    let sup = sq.iter().copied().fold(0.0, f64::max).sqrt();
    let rms = (sq.iter().sum::<f64>() / sq.len() as f64).sqrt();
    (sup, rms)
}

/// Simulates `agents` companies on one common-noise path and writes the
/// state-average and control-average overlays against their limits to
/// `figure_state.csv` (`t, xbar_N, x0`) and `figure_control.csv`
/// (`t, ubar_N, u0`).
pub fn reproduce_figures(params: &PortfolioParams, steps: usize, agents: usize, seed: u64, out_dir: &Path) -> Result<FigureReport> {
    if agents < 2 {
        return Err(Error::Invalid(format!("figure runs need N ≥ 2, got {agents}")));
    }
    let problem = params.to_problem(steps)?;
    let closed = closed_form(params, problem.grid)?;
    let law = feedback_law(&closed)?;
    let cfg = PopulationConfig::new(agents, 1, seed)?;
    let result = Simulation::new(&problem, &law)
        .costs(Vec::new())
        .record(Recording::default())
        .run(&cfg)?;
    let rep = &result.replications[0];
    let (sup_x, rms_x) = gaps(&rep.x_avg, &rep.x0);
    let (sup_u, rms_u) = gaps(&rep.u_avg, &rep.u0);

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let grid = problem.grid;
    let table = |a: &[f64], b: &[f64]| -> Vec<Vec<f64>> { (0..grid.nodes()).map(|k| vec![grid.time(k), a[k], b[k]]).collect() };
    let header = |names: [&str; 3]| names.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let state_csv = out_dir.join("figure_state.csv");
    let control_csv = out_dir.join("figure_control.csv");
    path::write_table(&state_csv, &header(["t", "xbar_N", "x0"]), &table(&rep.x_avg, &rep.x0))?;
    path::write_table(&control_csv, &header(["t", "ubar_N", "u0"]), &table(&rep.u_avg, &rep.u0))?;
    Ok(FigureReport {
        agents,
        seed,
        sup_state_gap: sup_x,
        rms_state_gap: rms_x,
        sup_control_gap: sup_u,
        rms_control_gap: rms_u,
        state_csv,
        control_csv,
    })
}
