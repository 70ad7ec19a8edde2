//! Backward integration of the Riccati system.
//!
//! Three equations determine the decentralized strategy:
//!
//! ```text
//! Π̇ + ΠA + AᵀΠ + DᵀΠD + Q − Π̃ 𝓡⁻¹ Π̃ᵀ = 0,                              Π_T = L_T
//! Σ̇ + Σ(A+Ā) + AᵀΣ + DᵀΣ(D+D̄) − Σ̃ 𝓡̃⁻¹ Σ̄ᵀ + (1−α₁)Q = 0,             Σ_T = (1−α₃)L_T
//! ρ̇ + Aᵀρ − Σ̃ 𝓡̃⁻¹ ρ̃ + Σb + DᵀΣb̄ + q = 0,                               ρ_T = l_T
//! ```
//!
//! with `𝓡 = R + FᵀΠF`, `Π̃ = ΠB + DᵀΠF + S`, `𝓡̃ = (1−β₁)R + FᵀΣ(F+F̄)`,
//! `Σ̃ = Σ(B+B̄) + DᵀΣ(F+F̄) + (1−β₂)S`, `Σ̄ᵀ = BᵀΣ + FᵀΣ(D+D̄) + (1−α₂)Sᵀ`
//! and `ρ̃ = Bᵀρ + FᵀΣb̄ + r`. Each grid interval is split into `substeps`
//! classical fourth-order steps using the coefficients of its left node.
//! Positivity of `𝓡` and of the symmetric part of `𝓡̃` is monitored at every
//! substep.

#![allow(non_snake_case)]

use serde::Serialize;

use crate::compensator::{check_condition_rc, shifted_weights, CompensatorPath};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::model::{Node, ProblemSpec};
use crate::path::NodePath;

/// Integration settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SolverOptions {
    /// Fourth-order steps per grid interval.
    pub substeps: usize,
    /// Lower bound `λ₀` on the minimum eigenvalue of `𝓡` and `𝓡̃ + 𝓡̃ᵀ`.
    pub floor: f64,
    /// Replace `Π` by `(Π + Πᵀ)/2` after every step.
    pub symmetrize: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            substeps: 10,
            floor: 1e-8,
            symmetrize: true,
        }
    }
}

impl SolverOptions {
    pub fn with_substeps(mut self, substeps: usize) -> Self {
        self.substeps = substeps;
        self
    }

    fn check(&self) -> Result<()> {
        if self.substeps == 0 || !(self.floor > 0.0) {
            return Err(Error::Invalid(format!(
                "solver needs substeps ≥ 1 and floor > 0, got {} and {}",
                self.substeps, self.floor
            )));
        }
        Ok(())
    }
}

/// `Π`, `Σ`, `ρ` and the derived gain paths at the grid nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct RiccatiSolution {
    pub pi: NodePath,
    pub sigma: NodePath,
    pub rho: NodePath,
    /// `𝓡 = R + FᵀΠF`.
    pub cal_r: NodePath,
    /// `𝓡̃ = (1−β₁)R + FᵀΣ(F+F̄)`.
    pub cal_r_tilde: NodePath,
    /// `Π̃ = ΠB + DᵀΠF + S`.
    pub pi_tilde: NodePath,
    /// `Σ̃ = Σ(B+B̄) + DᵀΣ(F+F̄) + (1−β₂)S`.
    pub sigma_tilde: NodePath,
    /// `Σ̄`, stored as the `n×m` matrix whose transpose enters the gains.
    pub sigma_bar: NodePath,
    /// `ρ̃ = Bᵀρ + FᵀΣb̄ + r`.
    pub rho_tilde: NodePath,
}

impl RiccatiSolution {
    /// Assembles the derived gains from given `Π`, `Σ`, `ρ` paths.
    pub fn from_parts(problem: &ProblemSpec, pi: NodePath, sigma: NodePath, rho: NodePath) -> Result<Self> {
        let grid = problem.grid;
        for (name, p) in [("Π", &pi), ("Σ", &sigma), ("ρ", &rho)] {
            if p.grid != grid {
                return Err(Error::Precondition(format!("{name} is on a different grid")));
            }
        }
        let mf = problem.meanfield;
        let mut cal_r = Vec::with_capacity(grid.nodes());
        let mut cal_r_tilde = Vec::with_capacity(grid.nodes());
        let mut pi_tilde = Vec::with_capacity(grid.nodes());
        let mut sigma_tilde = Vec::with_capacity(grid.nodes());
        let mut sigma_bar = Vec::with_capacity(grid.nodes());
        let mut rho_tilde = Vec::with_capacity(grid.nodes());
        for k in 0..grid.nodes() {
            let c = problem.at(k);
            let (p, s, r) = (pi.at(k), sigma.at(k), rho.at(k));
            cal_r.push(cal_r_of(&c, p));
            pi_tilde.push(pi_tilde_of(&c, p));
            let sg = SigmaGains::new(&c, s, mf);
            rho_tilde.push(c.B.transpose() * r + &sg.Fts_bbar + c.r);
            cal_r_tilde.push(sg.cal_r_tilde);
            sigma_tilde.push(sg.sigma_tilde);
            sigma_bar.push(sg.sigma_bar_t.transpose());
        }
        Ok(Self {
            cal_r: NodePath::new(grid, cal_r)?,
            cal_r_tilde: NodePath::new(grid, cal_r_tilde)?,
            pi_tilde: NodePath::new(grid, pi_tilde)?,
            sigma_tilde: NodePath::new(grid, sigma_tilde)?,
            sigma_bar: NodePath::new(grid, sigma_bar)?,
            rho_tilde: NodePath::new(grid, rho_tilde)?,
            pi,
            sigma,
            rho,
        })
    }
}

fn cal_r_of(c: &Node<'_>, P: &Mat) -> Mat {
    c.R + c.F.transpose() * P * c.F
}

fn pi_tilde_of(c: &Node<'_>, P: &Mat) -> Mat {
    P * c.B + c.D.transpose() * P * c.F + c.S
}

struct SigmaGains {
    cal_r_tilde: Mat,
    sigma_tilde: Mat,
    sigma_bar_t: Mat,
    Fts_bbar: Mat,
}

impl SigmaGains {
    fn new(c: &Node<'_>, S: &Mat, mf: crate::model::MeanFieldWeights) -> Self {
        let Ft = c.F.transpose();
        let FF = c.F + c.F_bar;
        let DD = c.D + c.D_bar;
        Self {
            cal_r_tilde: c.R * (1.0 - mf.beta1) + &Ft * S * &FF,
            sigma_tilde: S * (c.B + c.B_bar) + c.D.transpose() * S * &FF + c.S * (1.0 - mf.beta2),
            sigma_bar_t: c.B.transpose() * S + &Ft * S * &DD + c.S.transpose() * (1.0 - mf.alpha2),
            Fts_bbar: Ft * S * c.b_bar,
        }
    }
}

/// One classical fourth-order step from `t` back to `t − h` for `ẏ = f(t, y)`.
pub fn rk4_backward(y: &Mat, t: f64, h: f64, f: impl Fn(f64, &Mat) -> Result<Mat>) -> Result<Mat> {
    let k1 = f(t, y)?;
    let k2 = f(t - 0.5 * h, &(y - &k1 * (0.5 * h)))?;
    let k3 = f(t - 0.5 * h, &(y - &k2 * (0.5 * h)))?;
    let k4 = f(t - h, &(y - &k3 * h))?;
    Ok(y - (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

fn positivity(quantity: &'static str, t: f64, eigenvalue: f64, floor: f64) -> Error {
    Error::PositivityLoss {
        quantity,
        t,
        eigenvalue,
        floor,
    }
}

fn finite_or_diverge(y: &Mat, context: &str, t: f64) -> Result<()> {
    if linalg::is_finite(y) && linalg::max_abs(y) < 1e12 {
        Ok(())
    } else {
        Err(Error::Divergence {
            context: context.to_string(),
            t,
        })
    }
}

/// Integrates `y` backward across every grid interval, calling `step` on
/// each substep with the interval index, the current time and the state.
fn integrate_backward(
    problem: &ProblemSpec,
    opts: &SolverOptions,
    terminal: Mat,
    mut step: impl FnMut(usize, f64, f64, &Mat) -> Result<Mat>,
) -> Result<Vec<Mat>> {
    let grid = problem.grid;
    let mut values = vec![terminal; grid.nodes()];
    for k in (0..grid.steps).rev() {
        let t1 = grid.time(k + 1);
        let h = (t1 - grid.time(k)) / opts.substeps as f64;
        let mut y = values[k + 1].clone();
        for j in 0..opts.substeps {
            let t = t1 - j as f64 * h;
            y = step(k, t, h, &y)?;
        }
        values[k] = y;
    }
    Ok(values)
}

/// Time derivative `Π̇` for the coefficients `c`.
fn pi_rhs(c: &Node<'_>, P: &Mat, t: f64, floor: f64) -> Result<Mat> {
    let calR = cal_r_of(c, P);
    let Ri = linalg::inverse(&calR).ok_or_else(|| positivity("R + FᵀΠF", t, linalg::min_eig_sym(&calR), floor))?;
    let pt = pi_tilde_of(c, P);
    Ok(-(P * c.A + c.A.transpose() * P + c.D.transpose() * P * c.D + c.Q - &pt * Ri * pt.transpose()))
}

fn check_cal_r(c: &Node<'_>, P: &Mat, t: f64, floor: f64) -> Result<()> {
    let e = linalg::min_eig_sym(&cal_r_of(c, P));
    if e < floor {
        Err(positivity("R + FᵀΠF", t, e, floor))
    } else {
        Ok(())
    }
}

/// Solves the symmetric Riccati equation for `Π`.
pub fn solve_pi(problem: &ProblemSpec, opts: &SolverOptions) -> Result<NodePath> {
    opts.check()?;
    let grid = problem.grid;
    let terminal = problem.cost.L_T.clone();
    check_cal_r(&problem.at(grid.steps), &terminal, grid.horizon, opts.floor)?;
    let values = integrate_backward(problem, opts, terminal, |k, t, h, y| {
        let c = problem.at(k);
        let mut next = rk4_backward(y, t, h, |s, p| pi_rhs(&c, p, s, opts.floor))?;
        if opts.symmetrize {
            next = linalg::sym(&next);
        }
        finite_or_diverge(&next, "Π", t - h)?;
        check_cal_r(&c, &next, t - h, opts.floor)?;
        Ok(next)
    })?;
    NodePath::new(grid, values)
}

fn sigma_inverse(sg: &SigmaGains, t: f64, floor: f64) -> Result<Mat> {
    linalg::inverse(&sg.cal_r_tilde).ok_or_else(|| {
        let e = linalg::min_eig_sym(&(&sg.cal_r_tilde + sg.cal_r_tilde.transpose()));
        positivity("R̃ + R̃ᵀ", t, e, floor)
    })
}

/// Time derivative `Σ̇` for the coefficients `c`.
fn sigma_rhs(problem: &ProblemSpec, c: &Node<'_>, S: &Mat, t: f64, floor: f64) -> Result<Mat> {
    let mf = problem.meanfield;
    let sg = SigmaGains::new(c, S, mf);
    let Ri = sigma_inverse(&sg, t, floor)?;
    Ok(-(S * (c.A + c.A_bar) + c.A.transpose() * S + c.D.transpose() * S * (c.D + c.D_bar)
        - &sg.sigma_tilde * Ri * &sg.sigma_bar_t
        + c.Q * (1.0 - mf.alpha1)))
}

fn check_cal_r_tilde(problem: &ProblemSpec, c: &Node<'_>, S: &Mat, t: f64, floor: f64) -> Result<()> {
    let sg = SigmaGains::new(c, S, problem.meanfield);
    let e = linalg::min_eig_sym(&(&sg.cal_r_tilde + sg.cal_r_tilde.transpose()));
    if e < floor {
        Err(positivity("R̃ + R̃ᵀ", t, e, floor))
    } else {
        Ok(())
    }
}

/// Solves the asymmetric Riccati equation for `Σ`.
pub fn solve_sigma(problem: &ProblemSpec, opts: &SolverOptions) -> Result<NodePath> {
    opts.check()?;
    let grid = problem.grid;
    let terminal = &problem.cost.L_T * (1.0 - problem.meanfield.alpha3);
    check_cal_r_tilde(problem, &problem.at(grid.steps), &terminal, grid.horizon, opts.floor)?;
    let values = integrate_backward(problem, opts, terminal, |k, t, h, y| {
        let c = problem.at(k);
        let next = rk4_backward(y, t, h, |s, m| sigma_rhs(problem, &c, m, s, opts.floor))?;
        finite_or_diverge(&next, "Σ", t - h)?;
        check_cal_r_tilde(problem, &c, &next, t - h, opts.floor)?;
        Ok(next)
    })?;
    NodePath::new(grid, values)
}

/// Time derivative `ρ̇` given `Σ` at the same time.
fn rho_rhs(problem: &ProblemSpec, c: &Node<'_>, S: &Mat, rho: &Mat, t: f64, floor: f64) -> Result<Mat> {
    let sg = SigmaGains::new(c, S, problem.meanfield);
    let Ri = sigma_inverse(&sg, t, floor)?;
    let rho_tilde = c.B.transpose() * rho + &sg.Fts_bbar + c.r;
    Ok(-(c.A.transpose() * rho - &sg.sigma_tilde * Ri * rho_tilde + S * c.b + c.D.transpose() * S * c.b_bar + c.q))
}

/// Solves the linear ODE for `ρ` along a given `Σ` path. Between nodes `Σ`
/// is the cubic Hermite interpolant whose node slopes come from its own
/// equation.
pub fn solve_rho(problem: &ProblemSpec, sigma: &NodePath, opts: &SolverOptions) -> Result<NodePath> {
    opts.check()?;
    let grid = problem.grid;
    if sigma.grid != grid {
        return Err(Error::Precondition("Σ is on a different grid".into()));
    }
    let values = integrate_backward(problem, opts, problem.cost.l_T.clone(), |k, t, h, y| {
        let c = problem.at(k);
        let (t0, t1) = (grid.time(k), grid.time(k + 1));
        let (s0, s1) = (sigma.at(k), sigma.at(k + 1));
        let d0 = sigma_rhs(problem, &c, s0, t0, opts.floor)?;
        let d1 = sigma_rhs(problem, &c, s1, t1, opts.floor)?;
        let next = rk4_backward(y, t, h, |s, r| {
            let (sig, _) = linalg::hermite(s, t0, t1, s0, s1, &d0, &d1);
            rho_rhs(problem, &c, &sig, r, s, opts.floor)
        })?;
        finite_or_diverge(&next, "ρ", t - h)?;
        Ok(next)
    })?;
    NodePath::new(grid, values)
}

/// Solves for `Π`, `Σ` and `ρ` and assembles the gains.
pub fn solve(problem: &ProblemSpec, opts: &SolverOptions) -> Result<RiccatiSolution> {
    let pi = solve_pi(problem, opts)?;
    let sigma = solve_sigma(problem, opts)?;
    let rho = solve_rho(problem, &sigma, opts)?;
    RiccatiSolution::from_parts(problem, pi, sigma, rho)
}

/// Solves the Riccati equation of the relaxed problem built from `comp`,
///
/// ```text
/// Π̇ᴾ + ΠᴾA + AᵀΠᴾ + DᵀΠᴾD + Qᴾ − (ΠᴾB + DᵀΠᴾF + Sᴾ)(Rᴾ + FᵀΠᴾF)⁻¹(·)ᵀ = 0,   Πᴾ_T = Lᴾ_T,
/// ```
///
/// and returns `Πᴾ` with the largest entrywise gap between `Π` and `Πᴾ + P`.
pub fn verify_via_compensator(
    problem: &ProblemSpec,
    comp: &CompensatorPath,
    opts: &SolverOptions,
) -> Result<(NodePath, f64)> {
    let report = check_condition_rc(problem, comp)?;
    if !report.satisfied {
        return Err(Error::Precondition(format!(
            "compensator fails the Riccati inequality at node {}",
            report.first_failure.unwrap_or(0)
        )));
    }
    opts.check()?;
    let grid = problem.grid;
    let terminal = &problem.cost.L_T - comp.p(grid.steps);
    let values = integrate_backward(problem, opts, terminal, |k, t, h, y| {
        let c = problem.at(k);
        let next = rk4_backward(y, t, h, |s, pp| {
            let (P, Pdot) = comp.eval(s);
            let (Q_P, S_P, R_P) = shifted_weights(problem, &P, &Pdot, k);
            let calR = &R_P + c.F.transpose() * pp * c.F;
            let Ri = linalg::inverse(&calR)
                .ok_or_else(|| positivity("Rᴾ + FᵀΠᴾF", s, linalg::min_eig_sym(&calR), opts.floor))?;
            let pt = pp * c.B + c.D.transpose() * pp * c.F + S_P;
            Ok(-(pp * c.A + c.A.transpose() * pp + c.D.transpose() * pp * c.D + Q_P - &pt * Ri * pt.transpose()))
        })?;
        let next = if opts.symmetrize { linalg::sym(&next) } else { next };
        finite_or_diverge(&next, "Πᴾ", t - h)?;
        Ok(next)
    })?;
    let pi_p = NodePath::new(grid, values)?;
    let pi = solve_pi(problem, opts)?;
    let maxdiff = (0..grid.nodes())
        .map(|k| linalg::max_abs_diff(pi.at(k), &(pi_p.at(k) + comp.p(k))))
        .fold(0.0, f64::max);
    Ok((pi_p, maxdiff))
}
