//! Relaxed compensators.
//!
//! A symmetric, absolutely continuous path `P` shifts the cost weights to
//!
//! ```text
//! Qᴾ = Q + Ṗ + PA + AᵀP + DᵀPD,   Sᴾ = S + PB + DᵀPF,   Rᴾ = R + FᵀPF,   Lᴾ_T = L_T − P_T
//! ```
//!
//! without changing the ranking of strategies: the shifted cost differs
//! from the original one by the constant `½⟨P₀x, x⟩`. When the shifted
//! quadruple is positive semidefinite with `Rᴾ` uniformly positive, `P` is a
//! relaxed compensator and the indefinite problem becomes a standard one.
//! [`check_condition_rc`] certifies this through the equivalent matrix
//! differential inequality.

#![allow(non_snake_case)]

use std::sync::Arc;

use serde::Serialize;

use crate::cost::{compress, QuadStage, QuadraticCost};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::model::{GridSpec, ProblemSpec};

/// Floors for positivity checks: `≫ 0` means a minimum eigenvalue of at
/// least `strict`, `≥ 0` means at least `slack`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Floors {
    pub strict: f64,
    pub slack: f64,
}

impl Default for Floors {
    fn default() -> Self {
        Self {
            strict: 1e-8,
            slack: -1e-9,
        }
    }
}

type Analytic = Arc<dyn Fn(f64) -> (Mat, Mat) + Send + Sync>;

/// Candidate compensator `P` with its derivative `Ṗ` at the grid nodes and,
/// when available, an analytic form for evaluation between nodes.
#[derive(Clone)]
pub struct CompensatorPath {
    grid: GridSpec,
    p: Vec<Mat>,
    pdot: Vec<Mat>,
    analytic: Option<Analytic>,
}

impl std::fmt::Debug for CompensatorPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CompensatorPath")
            .field("grid", &self.grid)
            .field("p0", &self.p[0])
            .field("analytic", &self.analytic.is_some())
            .finish()
    }
}

impl CompensatorPath {
    /// Constant path with zero derivative.
    pub fn constant(grid: GridSpec, p: Mat) -> Self {
        let zero = Mat::zeros(p.nrows(), p.ncols());
        let value = p.clone();
        let dvalue = zero.clone();
        Self {
            grid,
            p: vec![p; grid.nodes()],
            pdot: vec![zero; grid.nodes()],
            analytic: Some(Arc::new(move |_| (value.clone(), dvalue.clone()))),
        }
    }

    /// The zero compensator.
    pub fn zero(grid: GridSpec, n: usize) -> Self {
        Self::constant(grid, linalg::zeros(n, n))
    }

    /// Path with analytic value and derivative `f(t) = (P_t, Ṗ_t)`.
    pub fn analytic(grid: GridSpec, f: impl Fn(f64) -> (Mat, Mat) + Send + Sync + 'static) -> Self {
        let (p, pdot) = (0..grid.nodes()).map(|k| f(grid.time(k))).unzip();
        Self {
            grid,
            p,
            pdot,
            analytic: Some(Arc::new(f)),
        }
    }

    /// Path from node samples with a supplied derivative.
    pub fn from_nodes_with_derivative(grid: GridSpec, p: Vec<Mat>, pdot: Vec<Mat>) -> Result<Self> {
        if p.len() != grid.nodes() || pdot.len() != grid.nodes() {
            return Err(Error::Precondition(format!(
                "compensator needs {} node samples",
                grid.nodes()
            )));
        }
        Ok(Self {
            grid,
            p,
            pdot,
            analytic: None,
        })
    }

    /// Path from node samples; `Ṗ` comes from second-order central
    /// differences, one-sided at the two ends.
    pub fn from_nodes(grid: GridSpec, p: Vec<Mat>) -> Result<Self> {
        if p.len() != grid.nodes() {
            return Err(Error::Precondition(format!(
                "compensator needs {} node samples",
                grid.nodes()
            )));
        }
        let k = grid.steps;
        let h = grid.dt();
        let pdot = if k == 1 {
            let d = (&p[1] - &p[0]) / h;
            vec![d.clone(), d]
        } else {
            (0..=k)
                .map(|j| {
                    if j == 0 {
                        (&p[0] * -3.0 + &p[1] * 4.0 - &p[2]) / (2.0 * h)
                    } else if j == k {
                        (&p[k] * 3.0 - &p[k - 1] * 4.0 + &p[k - 2]) / (2.0 * h)
                    } else {
                        (&p[j + 1] - &p[j - 1]) / (2.0 * h)
                    }
                })
                .collect()
        };
        Self::from_nodes_with_derivative(grid, p, pdot)
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    /// `P` at node `k`.
    pub fn p(&self, k: usize) -> &Mat {
        &self.p[k]
    }

    /// `Ṗ` at node `k`.
    pub fn pdot(&self, k: usize) -> &Mat {
        &self.pdot[k]
    }

    /// `(P_s, Ṗ_s)` at any `s ∈ [0, T]`: analytic when available, cubic
    /// Hermite between nodes otherwise.
    pub fn eval(&self, s: f64) -> (Mat, Mat) {
        if let Some(f) = &self.analytic {
            return f(s);
        }
        let g = self.grid;
        let k = g.piece(s.clamp(0.0, g.horizon)).unwrap_or(g.steps).min(g.steps - 1);
        linalg::hermite(
            s,
            g.time(k),
            g.time(k + 1),
            &self.p[k],
            &self.p[k + 1],
            &self.pdot[k],
            &self.pdot[k + 1],
        )
    }

    /// True when every node sample is symmetric within `tol`.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.p.iter().all(|m| linalg::is_symmetric(m, tol))
    }
}

/// Shifted weights and inhomogeneous terms of the relaxed limiting cost at
/// one node. The terminal entries treat the supplied `x⁰` as `x⁰_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedQuadruple {
    pub Q_P: Mat,
    pub S_P: Mat,
    pub R_P: Mat,
    pub L_P_T: Mat,
    pub q_P: Mat,
    pub r_P: Mat,
    pub M_P: f64,
    pub m_P_T: f64,
    pub l_P_T: Mat,
}

/// Shifted weights `(Qᴾ, Sᴾ, Rᴾ)` at node `k`.
pub fn shifted_weights(problem: &ProblemSpec, P: &Mat, Pdot: &Mat, k: usize) -> (Mat, Mat, Mat) {
    let c = problem.at(k);
    let Dt = c.D.transpose();
    let Q_P = c.Q + Pdot + P * c.A + c.A.transpose() * P + &Dt * P * c.D;
    let S_P = c.S + P * c.B + &Dt * P * c.F;
    let R_P = c.R + c.F.transpose() * P * c.F;
    (Q_P, S_P, R_P)
}

/// Assembles the relaxed quadruple at grid time `t` for given limit values
/// `x⁰ ∈ ℝⁿ`, `u⁰ ∈ ℝᵐ`.
pub fn assemble_relaxed(
    problem: &ProblemSpec,
    comp: &CompensatorPath,
    t: f64,
    x0: &Mat,
    u0: &Mat,
) -> Result<RelaxedQuadruple> {
    let k = problem.grid.node(t)?;
    let c = problem.at(k);
    let mf = problem.meanfield;
    let P = comp.p(k);
    let (Q_P, S_P, R_P) = shifted_weights(problem, P, comp.pdot(k), k);
    let Dt = c.D.transpose();
    let Ft = c.F.transpose();
    let Dbt = c.D_bar.transpose();
    let Fbt = c.F_bar.transpose();
    let St = c.S.transpose();

    let q_P = c.q
        + P * c.b
        + &Dt * P * c.b_bar
        + (P * c.A_bar + &Dt * P * c.D_bar - c.Q * mf.alpha1) * x0
        + (P * c.B_bar + &Dt * P * c.F_bar - c.S * mf.beta2) * u0;
    let r_P = c.r
        + &Ft * P * c.b_bar
        + (&Ft * P * c.D_bar - &St * mf.alpha2) * x0
        + (&Ft * P * c.F_bar - c.R * mf.beta1) * u0;

    let quad = |m: &Mat, a: &Mat, b: &Mat| linalg::dot(&(m * b), a);
    let trace_form = |s: &Mat| (s.transpose() * P * s).trace();
    let M_P = quad(&(c.Q * (mf.alpha1 * mf.alpha1) + &Dbt * P * c.D_bar), x0, x0)
        + 2.0 * linalg::dot(&(&Dbt * P * c.b_bar - c.q * mf.alpha1), x0)
        + 2.0 * mf.alpha2 * mf.beta2 * quad(c.S, x0, u0)
        + 2.0 * quad(&(&Dbt * P * c.F_bar), x0, u0)
        + quad(&(c.b_bar.transpose() * P), &linalg::scalar(1.0), c.b_bar)
        + trace_form(c.sigma)
        + trace_form(c.sigma_bar)
        + quad(&(c.R * (mf.beta1 * mf.beta1) + &Fbt * P * c.F_bar), u0, u0)
        + 2.0 * linalg::dot(&(&Fbt * P * c.b_bar - c.r * mf.beta1), u0);

    let L = &problem.cost.L_T;
    let l = &problem.cost.l_T;
    let m_P_T = linalg::dot(&(L * x0 * (mf.alpha3 * mf.alpha3) - l * (2.0 * mf.alpha3)), x0);
    let L_P_T = L - comp.p(problem.grid.steps);
    let l_P_T = l - L * x0 * mf.alpha3;
    Ok(RelaxedQuadruple {
        Q_P,
        S_P,
        R_P,
        L_P_T,
        q_P,
        r_P,
        M_P,
        m_P_T,
        l_P_T,
    })
}

/// Coefficients of the relaxed `N`-agent cost at one node. The cost reads
///
/// ```text
/// ⟨Qᴾx + 2q̃ᴾ + 2Sᴾu, x⟩ + ⟨Rᴾu + 2r̃ᴾ, u⟩ + ⟨Q̃ᴾx̄, x̄⟩ + 2⟨Q̄ᴾx + r̄ᴾu + q̄ᴾ, x̄⟩
///   + ⟨R̃ᴾū, ū⟩ + 2⟨Q̂ᴾx + r̂ᴾu + q̂ᴾ, ū⟩ + 2⟨S̃ᴾū, x̄⟩ + M̃ᴾ
/// ```
///
/// with `(x̄, ū)` the population averages; substituting `(x⁰, u⁰)` gives the
/// relaxed limiting cost.
#[derive(Clone, Debug, PartialEq)]
pub struct NAgentRelaxedTerms {
    pub Q_P: Mat,
    pub S_P: Mat,
    pub R_P: Mat,
    pub Q_tilde: Mat,
    pub Q_bar: Mat,
    pub q_tilde: Mat,
    pub q_bar: Mat,
    pub Q_hat: Mat,
    pub S_tilde: Mat,
    pub R_tilde: Mat,
    pub r_tilde: Mat,
    pub r_bar: Mat,
    pub q_hat: Mat,
    pub r_hat: Mat,
    pub M_tilde: f64,
}

impl NAgentRelaxedTerms {
    /// Terms at node `k` for the compensator sample `P`, `Ṗ`.
    pub fn at_node(problem: &ProblemSpec, P: &Mat, Pdot: &Mat, k: usize) -> Self {
        let c = problem.at(k);
        let mf = problem.meanfield;
        let (Q_P, S_P, R_P) = shifted_weights(problem, P, Pdot, k);
        let Dbt = c.D_bar.transpose();
        let Fbt = c.F_bar.transpose();
        let trace_form = |s: &Mat| (s.transpose() * P * s).trace();
        Self {
            Q_P,
            S_P,
            R_P,
            Q_tilde: c.Q * (mf.alpha1 * mf.alpha1) + &Dbt * P * c.D_bar,
            Q_bar: c.Q * -mf.alpha1 + c.A_bar.transpose() * P + &Dbt * P * c.D,
            q_tilde: c.q + P * c.b + c.D.transpose() * P * c.b_bar,
            q_bar: c.q * -mf.alpha1 + &Dbt * P * c.b_bar,
            Q_hat: c.S.transpose() * -mf.beta2 + c.B_bar.transpose() * P + &Fbt * P * c.D,
            S_tilde: &Dbt * P * c.F_bar + c.S * (mf.alpha2 * mf.beta2),
            R_tilde: c.R * (mf.beta1 * mf.beta1) + &Fbt * P * c.F_bar,
            r_tilde: c.r + c.F.transpose() * P * c.b_bar,
            r_bar: c.S * -mf.alpha2 + &Dbt * P * c.F,
            q_hat: &Fbt * P * c.b_bar - c.r * mf.beta1,
            r_hat: &Fbt * P * c.F - c.R * mf.beta1,
            M_tilde: (c.b_bar.transpose() * P * c.b_bar)[(0, 0)] + trace_form(c.sigma) + trace_form(c.sigma_bar),
        }
    }

    /// The running integrand as a quadratic form in `z = (x, u, x̄, ū)`.
    pub fn stage(&self, n: usize, m: usize) -> QuadStage {
        let (ix, iu, ixb, iub) = (0, n, n + m, 2 * n + m);
        let mut st = QuadStage::zero(2 * (n + m));
        st.add_block(ix, ix, &self.Q_P);
        st.add_block(ix, iu, &self.S_P);
        st.add_block(iu, iu, &self.R_P);
        st.add_block(ixb, ixb, &self.Q_tilde);
        st.add_block(ixb, ix, &self.Q_bar);
        st.add_block(ixb, iu, &self.r_bar);
        st.add_block(iub, iub, &self.R_tilde);
        st.add_block(iub, ix, &self.Q_hat);
        st.add_block(iub, iu, &self.r_hat);
        st.add_block(ixb, iub, &self.S_tilde);
        st.add_linear(ix, &self.q_tilde);
        st.add_linear(iu, &self.r_tilde);
        st.add_linear(ixb, &self.q_bar);
        st.add_linear(iub, &self.q_hat);
        st.c = self.M_tilde;
        st
    }
}

/// The relaxed cost functional for `comp` in the common quadratic shape.
/// Evaluated with population averages it is the relaxed `N`-agent cost;
/// evaluated with `(x⁰, u⁰)` it is the relaxed limiting cost.
pub fn relaxed_cost(problem: &ProblemSpec, comp: &CompensatorPath) -> QuadraticCost {
    let (n, m) = (problem.dims.n, problem.dims.m);
    let mf = problem.meanfield;
    let running = (0..problem.grid.nodes())
        .map(|k| NAgentRelaxedTerms::at_node(problem, comp.p(k), comp.pdot(k), k).stage(n, m))
        .collect();
    let L = &problem.cost.L_T;
    let l = &problem.cost.l_T;
    let mut terminal = QuadStage::zero(2 * n);
    terminal.add_block(0, 0, &(L - comp.p(problem.grid.steps)));
    terminal.add_block(0, n, &(L * -mf.alpha3));
    terminal.add_block(n, n, &(L * (mf.alpha3 * mf.alpha3)));
    terminal.add_linear(0, l);
    terminal.add_linear(n, &(l * -mf.alpha3));
    QuadraticCost {
        name: "relaxed_cost".into(),
        n,
        m,
        running: compress(running),
        terminal,
    }
}

/// Smallest eigenvalue of the symmetric block matrix `[[Q, S], [Sᵀ, R]]`.
pub fn block_min_eig(Q: &Mat, S: &Mat, R: &Mat) -> f64 {
    let (n, m) = (Q.nrows(), R.nrows());
    let mut b = Mat::zeros(n + m, n + m);
    b.view_mut((0, 0), (n, n)).copy_from(Q);
    b.view_mut((0, n), (n, m)).copy_from(S);
    b.view_mut((n, 0), (m, n)).copy_from(&S.transpose());
    b.view_mut((n, n), (m, m)).copy_from(R);
    linalg::min_eig_sym(&b)
}

/// Schur complement test: `R ≥ floor·I` and `Q − S R⁻¹ Sᵀ ≥ −tol`.
pub fn schur_psd(Q: &Mat, S: &Mat, R: &Mat, floor: f64) -> bool {
    if linalg::min_eig_sym(R) < floor {
        return false;
    }
    let Some(Ri) = linalg::inverse(R) else {
        return false;
    };
    let complement = Q - S * Ri * S.transpose();
    linalg::min_eig_sym(&complement) >= Floors::default().slack
}

/// Condition (PD) at one node: `R ≫ 0`, `[[Q, S], [Sᵀ, R]] ≥ 0`, `L_T ≥ 0`.
pub fn check_condition_pd(Q: &Mat, S: &Mat, R: &Mat, L_T: &Mat) -> bool {
    check_condition_pd_with(Q, S, R, L_T, Floors::default())
}

/// [`check_condition_pd`] with explicit floors.
pub fn check_condition_pd_with(Q: &Mat, S: &Mat, R: &Mat, L_T: &Mat, floors: Floors) -> bool {
    linalg::min_eig_sym(R) >= floors.strict
        && block_min_eig(Q, S, R) >= floors.slack
        && linalg::min_eig_sym(L_T) >= floors.slack
}

/// Per-node outcome of the Condition (RC) check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RcReport {
    pub satisfied: bool,
    /// Minimum eigenvalue of the inequality's left-hand side per node; NaN
    /// where `R + FᵀPF` is singular.
    pub lhs_min_eig: Vec<f64>,
    /// Minimum eigenvalue of `R + FᵀPF` per node.
    pub rp_min_eig: Vec<f64>,
    /// Minimum eigenvalue of `L_T − P_T`.
    pub terminal_slack: f64,
    /// First node at which a check fails.
    pub first_failure: Option<usize>,
    pub floors: Floors,
}

/// Left-hand side `Ṗ + PA + AᵀP + DᵀPD + Q − (S + PB + DᵀPF)(R + FᵀPF)⁻¹(·)ᵀ`
/// at node `k`, or `None` when `R + FᵀPF` is singular.
pub fn rc_lhs(problem: &ProblemSpec, P: &Mat, Pdot: &Mat, k: usize) -> Option<Mat> {
    let (Q_P, S_P, R_P) = shifted_weights(problem, P, Pdot, k);
    let Ri = linalg::inverse(&R_P)?;
    Some(Q_P - &S_P * Ri * S_P.transpose())
}

/// Evaluates Condition (RC) at every node with default floors.
pub fn check_condition_rc(problem: &ProblemSpec, comp: &CompensatorPath) -> Result<RcReport> {
    check_condition_rc_with(problem, comp, Floors::default())
}

/// Evaluates Condition (RC) at every node.
pub fn check_condition_rc_with(problem: &ProblemSpec, comp: &CompensatorPath, floors: Floors) -> Result<RcReport> {
    if !comp.is_symmetric(1e-12) {
        return Err(Error::Precondition("compensator samples must be symmetric".into()));
    }
    let nodes = problem.grid.nodes();
    let mut lhs_min_eig = Vec::with_capacity(nodes);
    let mut rp_min_eig = Vec::with_capacity(nodes);
    let mut first_failure = None;
    for k in 0..nodes {
        let P = comp.p(k);
        let c = problem.at(k);
        let rp = linalg::min_eig_sym(&(c.R + c.F.transpose() * P * c.F));
        let lhs = rc_lhs(problem, P, comp.pdot(k), k)
            .map(|m| linalg::min_eig_sym(&linalg::sym(&m)))
            .unwrap_or(f64::NAN);
        let ok = rp >= floors.strict && lhs >= floors.slack;
        if !ok && first_failure.is_none() {
            first_failure = Some(k);
        }
        lhs_min_eig.push(lhs);
        rp_min_eig.push(rp);
    }
    let terminal_slack = linalg::min_eig_sym(&(&problem.cost.L_T - comp.p(nodes - 1)));
    if terminal_slack < floors.slack && first_failure.is_none() {
        first_failure = Some(nodes - 1);
    }
    Ok(RcReport {
        satisfied: first_failure.is_none(),
        lhs_min_eig,
        rp_min_eig,
        terminal_slack,
        first_failure,
        floors,
    })
}

/// Condition (PD) on the relaxed quadruple at every node.
pub fn check_relaxed_pd(problem: &ProblemSpec, comp: &CompensatorPath, floors: Floors) -> bool {
    let L_P = &problem.cost.L_T - comp.p(problem.grid.steps);
    (0..problem.grid.nodes()).all(|k| {
        let (Q_P, S_P, R_P) = shifted_weights(problem, comp.p(k), comp.pdot(k), k);
        check_condition_pd_with(&Q_P, &S_P, &R_P, &L_P, floors)
    })
}
