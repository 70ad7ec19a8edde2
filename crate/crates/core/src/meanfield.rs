//! Decentralized feedback law and the mean-field limit.
//!
//! From a [`RiccatiSolution`] the representative agent plays
//!
//! ```text
//! u = −K1 (x̂ − x⁰) − K2 x⁰ − k3,   K1 = 𝓡⁻¹Π̃ᵀ,   K2 = 𝓡̃⁻¹Σ̄ᵀ,   k3 = 𝓡̃⁻¹ρ̃,
//! ```
//!
//! and the population average follows the linear SDE
//!
//! ```text
//! dx⁰ = [(A+Ā)x⁰ + (B+B̄)u⁰ + b] dt + [(D+D̄)x⁰ + (F+F̄)u⁰ + b̄] dW⁰,   u⁰ = −K2 x⁰ − k3.
//! ```

#![allow(non_snake_case)]

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::model::ProblemSpec;
use crate::path::{self, NodePath};
use crate::riccati::RiccatiSolution;

/// Gain paths of the decentralized strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackLaw {
    /// `K1 = 𝓡⁻¹Π̃ᵀ` (`m×n`).
    pub k1: NodePath,
    /// `K2 = 𝓡̃⁻¹Σ̄ᵀ` (`m×n`).
    pub k2: NodePath,
    /// `k3 = 𝓡̃⁻¹ρ̃` (`m`).
    pub k3: NodePath,
}

fn singular(quantity: &'static str, t: f64, m: &Mat) -> Error {
    Error::PositivityLoss {
        quantity,
        t,
        eigenvalue: linalg::min_eig_sym(m),
        floor: 0.0,
    }
}

/// `(K1, K2, k3)` at node `k`.
fn gains_at(sol: &RiccatiSolution, k: usize) -> Result<(Mat, Mat, Mat)> {
    let t = sol.pi.grid.time(k);
    let ri = linalg::inverse(sol.cal_r.at(k)).ok_or_else(|| singular("R + FᵀΠF", t, sol.cal_r.at(k)))?;
    let rti = linalg::inverse(sol.cal_r_tilde.at(k))
        .ok_or_else(|| singular("R̃ + R̃ᵀ", t, sol.cal_r_tilde.at(k)))?;
    Ok((
        &ri * sol.pi_tilde.at(k).transpose(),
        &rti * sol.sigma_bar.at(k).transpose(),
        &rti * sol.rho_tilde.at(k),
    ))
}

impl FeedbackLaw {
    /// Gains at every node of the solution grid.
    pub fn from_solution(sol: &RiccatiSolution) -> Result<Self> {
        let grid = sol.pi.grid;
        let mut k1 = Vec::with_capacity(grid.nodes());
        let mut k2 = Vec::with_capacity(grid.nodes());
        let mut k3 = Vec::with_capacity(grid.nodes());
        for k in 0..grid.nodes() {
            let (a, b, c) = gains_at(sol, k)?;
            k1.push(a);
            k2.push(b);
            k3.push(c);
        }
        Ok(Self {
            k1: NodePath::new(grid, k1)?,
            k2: NodePath::new(grid, k2)?,
            k3: NodePath::new(grid, k3)?,
        })
    }

    /// `u⁰ = −K2 x⁰ − k3` at node `k`.
    pub fn u0(&self, k: usize, x0: &Mat) -> Mat {
        -(self.k2.at(k) * x0 + self.k3.at(k))
    }

    /// `u = −K1 (x̂ − x⁰) + u⁰` at node `k`.
    pub fn control(&self, k: usize, xhat: &Mat, x0: &Mat) -> Mat {
        -(self.k1.at(k) * (xhat - x0)) + self.u0(k, x0)
    }
}

/// `(K1, K2, k3)` governing time `t`.
pub fn feedback_gains(sol: &RiccatiSolution, t: f64) -> Result<(Mat, Mat, Mat)> {
    gains_at(sol, sol.pi.grid.piece(t)?)
}

/// `u⁰ = −𝓡̃⁻¹(Σ̄ᵀx⁰ + ρ̃)` at time `t`.
pub fn control_u0(sol: &RiccatiSolution, t: f64, x0: &Mat) -> Result<Mat> {
    let (_, k2, k3) = feedback_gains(sol, t)?;
    Ok(-(k2 * x0 + k3))
}

/// Decentralized control `u = −K1(x̂ − x⁰) − K2x⁰ − k3` at time `t`.
pub fn decentralized_control(sol: &RiccatiSolution, t: f64, xhat: &Mat, x0: &Mat) -> Result<Mat> {
    let (k1, k2, k3) = feedback_gains(sol, t)?;
    Ok(-(k1 * (xhat - x0)) - k2 * x0 - k3)
}

/// Limit paths `x⁰`, `u⁰` for one common-noise sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LimitPaths {
    pub x0: NodePath,
    pub u0: NodePath,
}

impl LimitPaths {
    /// Writes `t`, the entries of `x⁰` and the entries of `u⁰` as CSV.
    pub fn write_csv(&self, file: impl AsRef<std::path::Path>) -> Result<()> {
        path::write_paths(file, &[("x0", &self.x0), ("u0", &self.u0)])
    }
}

/// Euler-Maruyama integration of the limit SDE under `law`.
pub fn simulate_x0_with(problem: &ProblemSpec, law: &FeedbackLaw, dw0: &[f64]) -> Result<LimitPaths> {
    let grid = problem.grid;
    if dw0.len() != grid.steps {
        return Err(Error::Precondition(format!(
            "need {} common-noise increments, got {}",
            grid.steps,
            dw0.len()
        )));
    }
    let dt = grid.dt();
    let mut xs = Vec::with_capacity(grid.nodes());
    let mut us = Vec::with_capacity(grid.nodes());
    let mut x = problem.x0.clone();
    for (k, w) in dw0.iter().enumerate() {
        let c = problem.at(k);
        let u = law.u0(k, &x);
        let next = &x
            + ((c.A + c.A_bar) * &x + (c.B + c.B_bar) * &u + c.b) * dt
            + ((c.D + c.D_bar) * &x + (c.F + c.F_bar) * &u + c.b_bar) * *w;
        if !linalg::is_finite(&next) {
            return Err(Error::Divergence {
                context: "x⁰".into(),
                t: grid.time(k + 1),
            });
        }
        xs.push(std::mem::replace(&mut x, next));
        us.push(u);
    }
    us.push(law.u0(grid.steps, &x));
    xs.push(x);
    Ok(LimitPaths {
        x0: NodePath::new(grid, xs)?,
        u0: NodePath::new(grid, us)?,
    })
}

/// Euler-Maruyama integration of the limit SDE under the law of `sol`.
pub fn simulate_x0(problem: &ProblemSpec, sol: &RiccatiSolution, dw0: &[f64]) -> Result<LimitPaths> {
    simulate_x0_with(problem, &FeedbackLaw::from_solution(sol)?, dw0)
}

/// Filtered adjoint pair `(φ̂, η̂)` reconstructed from the Riccati solution:
///
/// ```text
/// φ̂ = Π(x̂ − x⁰) + Σx⁰ + ρ
/// η̂ = Π[D(x̂ − x⁰) + F(u − u⁰)] + Σ[(D+D̄)x⁰ + (F+F̄)u⁰ + b̄]
/// ```
pub fn adjoint(problem: &ProblemSpec, sol: &RiccatiSolution, k: usize, xhat: &Mat, x0: &Mat, u: &Mat, u0: &Mat) -> (Mat, Mat) {
    let c = problem.at(k);
    let (pi, sigma) = (sol.pi.at(k), sol.sigma.at(k));
    let phi = pi * (xhat - x0) + sigma * x0 + sol.rho.at(k);
    let eta = pi * (c.D * (xhat - x0) + c.F * (u - u0))
        + sigma * ((c.D + c.D_bar) * x0 + (c.F + c.F_bar) * u0 + c.b_bar);
    (phi, eta)
}

/// Stationarity expression `Bᵀφ̂ + Fᵀη̂ + Sᵀ(x̂ − α₂x⁰) + R(u − β₁u⁰) + r`,
/// which vanishes for the decentralized control.
pub fn stationarity_residual(
    problem: &ProblemSpec,
    sol: &RiccatiSolution,
    k: usize,
    xhat: &Mat,
    x0: &Mat,
    u: &Mat,
    u0: &Mat,
) -> Mat {
    let c = problem.at(k);
    let mf = problem.meanfield;
    let (phi, eta) = adjoint(problem, sol, k, xhat, x0, u, u0);
    c.B.transpose() * phi + c.F.transpose() * eta + c.S.transpose() * (xhat - x0 * mf.alpha2)
        + c.R * (u - u0 * mf.beta1)
        + c.r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoefficientPath, Dimensions, GridSpec};
    use crate::riccati::{solve, SolverOptions};

    fn s(v: f64) -> Mat {
        linalg::scalar(v)
    }

    fn coupled() -> ProblemSpec {
        let grid = GridSpec::new(1.0, 50).unwrap();
        let mut p = ProblemSpec::zero(Dimensions::new(2, 1, 1).unwrap(), grid);
        let m = |r, c, v: &[f64]| CoefficientPath::constant(grid, linalg::from_rows(r, c, v));
        p.dynamics.A = m(2, 2, &[0.1, 0.2, 0.0, -0.3]);
        p.dynamics.A_bar = m(2, 2, &[0.1, 0.0, 0.05, 0.1]);
        p.dynamics.B = m(2, 1, &[1.0, 0.5]);
        p.dynamics.B_bar = m(2, 1, &[0.1, 0.0]);
        p.dynamics.D = m(2, 2, &[0.1, 0.0, 0.0, 0.2]);
        p.dynamics.D_bar = m(2, 2, &[0.0, 0.1, 0.05, 0.0]);
        p.dynamics.F = m(2, 1, &[0.3, 0.1]);
        p.dynamics.F_bar = m(2, 1, &[0.05, 0.05]);
        p.dynamics.b = m(2, 1, &[0.1, 0.0]);
        p.dynamics.b_bar = m(2, 1, &[0.0, 0.05]);
        p.cost.Q = m(2, 2, &[1.0, 0.1, 0.1, 0.5]);
        p.cost.R = m(1, 1, &[1.0]);
        p.cost.S = m(2, 1, &[0.1, -0.1]);
        p.cost.q = m(2, 1, &[0.1, 0.2]);
        p.cost.r = m(1, 1, &[-0.1]);
        p.cost.L_T = linalg::eye(2);
        p.cost.l_T = linalg::col(&[0.2, -0.1]);
        p.meanfield.alpha1 = 0.5;
        p.meanfield.alpha2 = 0.3;
        p.meanfield.alpha3 = 0.4;
        p.meanfield.beta1 = 0.2;
        p.meanfield.beta2 = 0.1;
        p.x0 = linalg::col(&[1.0, -0.5]);
        p
    }

    #[test]
    fn zero_cost_gains() {
        let grid = GridSpec::new(1.0, 4).unwrap();
        let mut p = ProblemSpec::zero(Dimensions::new(1, 1, 1).unwrap(), grid);
        p.cost.R = CoefficientPath::constant(grid, s(1.0));
        p.cost.r = CoefficientPath::constant(grid, s(0.3));
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        let (k1, k2, k3) = feedback_gains(&sol, 0.5).unwrap();
        assert_eq!((k1[(0, 0)], k2[(0, 0)], k3[(0, 0)]), (0.0, 0.0, 0.3));
    }

    #[test]
    fn stationarity_vanishes_for_decentralized_control() {
        let p = coupled();
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        for (k, xh, x0) in [(0, [0.3, 0.2], [1.0, -0.5]), (25, [-1.0, 2.0], [0.4, 0.1]), (50, [0.0, 0.0], [3.0, 1.0])] {
            let (xh, x0) = (linalg::col(&xh), linalg::col(&x0));
            let t = p.grid.time(k);
            let u = decentralized_control(&sol, t, &xh, &x0).unwrap();
            let u0 = control_u0(&sol, t, &x0).unwrap();
            let r = stationarity_residual(&p, &sol, k, &xh, &x0, &u, &u0);
            assert!(linalg::max_abs(&r) < 1e-10, "{r}");
        }
    }

    #[test]
    fn averaging_the_control_gives_u0() {
        let p = coupled();
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        let x0 = linalg::col(&[0.7, -0.2]);
        let a = decentralized_control(&sol, 0.3, &(&x0 + linalg::col(&[0.5, 1.0])), &x0).unwrap();
        let b = decentralized_control(&sol, 0.3, &(&x0 - linalg::col(&[0.5, 1.0])), &x0).unwrap();
        let u0 = control_u0(&sol, 0.3, &x0).unwrap();
        assert!(linalg::max_abs_diff(&((a + b) * 0.5), &u0) < 1e-14);
    }

    #[test]
    fn classical_law_without_mean_field() {
        let mut p = coupled();
        p.dynamics.A_bar = CoefficientPath::zeros(p.grid, 2, 2);
        p.dynamics.B_bar = CoefficientPath::zeros(p.grid, 2, 1);
        p.dynamics.D_bar = CoefficientPath::zeros(p.grid, 2, 2);
        p.dynamics.F_bar = CoefficientPath::zeros(p.grid, 2, 1);
        p.meanfield = Default::default();
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        let x0 = linalg::col(&[0.3, 0.9]);
        for k in [0, 10, 50] {
            let (_, k2, k3) = gains_at(&sol, k).unwrap();
            let c = p.at(k);
            let ri = linalg::inverse(sol.cal_r.at(k)).unwrap();
            let classical = &ri * (sol.pi_tilde.at(k).transpose() * &x0 + c.B.transpose() * sol.rho.at(k) + c.F.transpose() * sol.pi.at(k) * c.b_bar + c.r);
            assert!(linalg::max_abs_diff(&(k2 * &x0 + k3), &classical) < 1e-9);
        }
    }

    #[test]
    fn deterministic_limit_matches_ode() {
        let p = coupled();
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        let law = FeedbackLaw::from_solution(&sol).unwrap();
        let lp = simulate_x0_with(&p, &law, &vec![0.0; 50]).unwrap();
        assert_eq!(lp.x0.at(0), &p.x0);
        let fine = p.refine(20);
        let sol_f = solve(&fine, &SolverOptions::default()).unwrap();
        let law_f = FeedbackLaw::from_solution(&sol_f).unwrap();
        let lf = simulate_x0_with(&fine, &law_f, &vec![0.0; 1000]).unwrap();
        let err = linalg::max_abs_diff(lp.x0.at(50), lf.x0.at(1000));
        assert!(err < 0.05, "{err}");
        assert!(err > 0.0);
    }

    #[test]
    fn zero_inputs_keep_x0_at_zero() {
        let mut p = coupled();
        p.x0 = linalg::zeros(2, 1);
        p.dynamics.b = CoefficientPath::zeros(p.grid, 2, 1);
        p.dynamics.b_bar = CoefficientPath::zeros(p.grid, 2, 1);
        p.cost.q = CoefficientPath::zeros(p.grid, 2, 1);
        p.cost.r = CoefficientPath::zeros(p.grid, 1, 1);
        p.cost.l_T = linalg::zeros(2, 1);
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        let dw: Vec<f64> = (0..50).map(|k| ((k as f64) * 0.7).sin() * 0.1).collect();
        let lp = simulate_x0(&p, &sol, &dw).unwrap();
        assert_eq!(lp.x0.max_abs(), 0.0);
    }
}
