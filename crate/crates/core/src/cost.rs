//! Quadratic cost functionals evaluated along simulated paths.
//!
//! Every cost in the crate has the shape
//!
//! ```text
//! ½ [ ∫ zᵀ W_t z + 2 w_tᵀ z + c_t dt + z_Tᵀ W_T z_T + 2 w_Tᵀ z_T + c_T ]
//! ```
//!
//! with `z = (x, u, x̄, ū)` on the running part and `z_T = (x, x̄)` at the
//! horizon. Here `(x, u)` belong to the agent and `(x̄, ū)` are either the
//! population averages or the mean-field limit. The running integral uses
//! trapezoid quadrature on the grid nodes.

use crate::linalg::{self, Mat};
use crate::model::ProblemSpec;

/// Quadratic form `zᵀ W z + 2 wᵀ z + c` with row-major `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadStage {
    pub dim: usize,
    pub w: Vec<f64>,
    pub v: Vec<f64>,
    pub c: f64,
}

impl QuadStage {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            w: vec![0.0; dim * dim],
            v: vec![0.0; dim],
            c: 0.0,
        }
    }

    /// Adds `m` to the block starting at `(r, c)` and its transpose to the
    /// mirrored block, so that `zᵀ W z` gains `2 z_rᵀ m z_c` off the diagonal
    /// and `z_rᵀ m z_r` on it.
    pub fn add_block(&mut self, r: usize, c: usize, m: &Mat) {
        let d = self.dim;
        if r == c {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    self.w[(r + i) * d + c + j] += m[(i, j)];
                }
            }
        } else {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    self.w[(r + i) * d + c + j] += m[(i, j)];
                    self.w[(c + j) * d + r + i] += m[(i, j)];
                }
            }
        }
    }

    /// Adds `v` to the linear coefficient starting at `r`.
    pub fn add_linear(&mut self, r: usize, v: &Mat) {
        for (i, x) in v.iter().enumerate() {
            self.v[r + i] += x;
        }
    }

    /// Value of the form at `z`.
    pub fn eval(&self, z: &[f64]) -> f64 {
        let d = self.dim;
        let z = &z[..d];
        let mut acc = self.c;
        for ((row, zi), vi) in self.w.chunks_exact(d).zip(z).zip(&self.v) {
            if *zi == 0.0 {
                continue;
            }
            let s: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
            acc += zi * (s + 2.0 * vi);
        }
        acc
    }
}

/// Running and terminal quadratic forms defining one cost functional.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticCost {
    pub name: String,
    pub n: usize,
    pub m: usize,
    /// Either one stage per grid node or a single stage for every node.
    pub running: Vec<QuadStage>,
    pub terminal: QuadStage,
}

impl QuadraticCost {
    /// Running stage at node `k`.
    pub fn stage(&self, k: usize) -> &QuadStage {
        if self.running.len() == 1 {
            &self.running[0]
        } else {
            &self.running[k]
        }
    }

    /// The cost of the game: tracking, control, cross and terminal terms
    /// with the mean-field couplings.
    pub fn original(problem: &ProblemSpec) -> Self {
        let (n, m) = (problem.dims.n, problem.dims.m);
        let mf = problem.meanfield;
        let (ix, iu, ixb, iub) = (0, n, n + m, 2 * n + m);
        let dim = 2 * (n + m);
        let running = (0..problem.grid.nodes())
            .map(|k| {
                let c = problem.at(k);
                let mut st = QuadStage::zero(dim);
                st.add_block(ix, ix, c.Q);
                st.add_block(ix, ixb, &(c.Q * -mf.alpha1));
                st.add_block(ixb, ixb, &(c.Q * (mf.alpha1 * mf.alpha1)));
                st.add_block(iu, iu, c.R);
                st.add_block(iu, iub, &(c.R * -mf.beta1));
                st.add_block(iub, iub, &(c.R * (mf.beta1 * mf.beta1)));
                st.add_block(ix, iu, c.S);
                st.add_block(ix, iub, &(c.S * -mf.beta2));
                st.add_block(ixb, iu, &(c.S * -mf.alpha2));
                st.add_block(ixb, iub, &(c.S * (mf.alpha2 * mf.beta2)));
                st.add_linear(ix, c.q);
                st.add_linear(ixb, &(c.q * -mf.alpha1));
                st.add_linear(iu, c.r);
                st.add_linear(iub, &(c.r * -mf.beta1));
                st
            })
            .collect();
        let lt = &problem.cost.L_T;
        let l = &problem.cost.l_T;
        let mut terminal = QuadStage::zero(2 * n);
        terminal.add_block(0, 0, lt);
        terminal.add_block(0, n, &(lt * -mf.alpha3));
        terminal.add_block(n, n, &(lt * (mf.alpha3 * mf.alpha3)));
        terminal.add_linear(0, l);
        terminal.add_linear(n, &(l * -mf.alpha3));
        Self {
            name: "cost".into(),
            n,
            m,
            running: compress(running),
            terminal,
        }
    }

    /// `E∫|u|² dt` written in the common quadratic shape.
    pub fn control_energy(problem: &ProblemSpec) -> Self {
        let (n, m) = (problem.dims.n, problem.dims.m);
        let mut st = QuadStage::zero(2 * (n + m));
        st.add_block(n, n, &(linalg::eye(m) * 2.0));
        Self {
            name: "control_energy".into(),
            n,
            m,
            running: vec![st],
            terminal: QuadStage::zero(2 * n),
        }
    }

    /// Trapezoid evaluation along full node paths given as flat row-major
    /// buffers: `x`, `xbar` hold `n` entries per node, `u`, `ubar` hold `m`.
    pub fn evaluate_path(&self, dt: f64, x: &[f64], u: &[f64], xbar: &[f64], ubar: &[f64]) -> f64 {
        let (n, m) = (self.n, self.m);
        let nodes = x.len() / n;
        let mut z = vec![0.0; 2 * (n + m)];
        let mut integral = 0.0;
        for k in 0..nodes {
            z[..n].copy_from_slice(&x[k * n..(k + 1) * n]);
            z[n..n + m].copy_from_slice(&u[k * m..(k + 1) * m]);
            z[n + m..2 * n + m].copy_from_slice(&xbar[k * n..(k + 1) * n]);
            z[2 * n + m..].copy_from_slice(&ubar[k * m..(k + 1) * m]);
            let w = if k == 0 || k + 1 == nodes { 0.5 } else { 1.0 };
            integral += w * dt * self.stage(k).eval(&z);
        }
        let last = nodes - 1;
        let mut zt = vec![0.0; 2 * n];
        zt[..n].copy_from_slice(&x[last * n..]);
        zt[n..].copy_from_slice(&xbar[last * n..]);
        0.5 * (integral + self.terminal.eval(&zt))
    }
}

/// Collapses identical per-node stages into a single shared stage.
pub(crate) fn compress(stages: Vec<QuadStage>) -> Vec<QuadStage> {
    if stages.windows(2).all(|w| w[0] == w[1]) {
        stages.into_iter().take(1).collect()
    } else {
        stages
    }
}

/// Online trapezoid accumulator for one cost functional.
#[derive(Clone, Copy, Debug, Default)]
pub struct CostAccumulator {
    integral: f64,
}

impl CostAccumulator {
    /// Adds node `k` of `steps + 1` nodes.
    pub fn add(&mut self, cost: &QuadraticCost, k: usize, steps: usize, dt: f64, z: &[f64]) {
        let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
        self.integral += w * dt * cost.stage(k).eval(z);
    }

    /// Final value given the terminal vector `(x_T, x̄_T)`.
    pub fn finish(&self, cost: &QuadraticCost, zt: &[f64]) -> f64 {
        0.5 * (self.integral + cost.terminal.eval(zt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoefficientPath, Dimensions, GridSpec};

    fn scalar_problem() -> ProblemSpec {
        let grid = GridSpec::new(1.0, 4).unwrap();
        let mut p = ProblemSpec::zero(Dimensions::new(1, 1, 1).unwrap(), grid);
        p.cost.Q = CoefficientPath::constant(grid, linalg::scalar(2.0));
        p.cost.R = CoefficientPath::constant(grid, linalg::scalar(3.0));
        p.cost.S = CoefficientPath::constant(grid, linalg::scalar(0.5));
        p.cost.q = CoefficientPath::constant(grid, linalg::scalar(0.1));
        p.cost.r = CoefficientPath::constant(grid, linalg::scalar(-0.2));
        p.cost.L_T = linalg::scalar(1.5);
        p.cost.l_T = linalg::scalar(0.3);
        p.meanfield.alpha1 = 0.4;
        p.meanfield.alpha2 = 0.6;
        p.meanfield.alpha3 = 0.7;
        p.meanfield.beta1 = 0.2;
        p.meanfield.beta2 = 0.9;
        p
    }

    #[test]
    fn original_form_matches_direct_integrand() {
        let p = scalar_problem();
        let cost = QuadraticCost::original(&p);
        let mf = p.meanfield;
        let (x, u, xb, ub) = (0.7, -1.3, 0.2, 0.5);
        let direct = 2.0 * (x - mf.alpha1 * xb).powi(2)
            + 2.0 * 0.1 * (x - mf.alpha1 * xb)
            + 3.0 * (u - mf.beta1 * ub).powi(2)
            + 2.0 * (-0.2) * (u - mf.beta1 * ub)
            + 2.0 * 0.5 * (u - mf.beta2 * ub) * (x - mf.alpha2 * xb);
        let got = cost.stage(0).eval(&[x, u, xb, ub]);
        assert!((got - direct).abs() < 1e-14, "{got} vs {direct}");
        let term = 1.5 * (x - 0.7 * xb).powi(2) + 2.0 * 0.3 * (x - 0.7 * xb);
        assert!((cost.terminal.eval(&[x, xb]) - term).abs() < 1e-14);
    }

    #[test]
    fn trapezoid_of_constant_path() {
        let p = scalar_problem();
        let cost = QuadraticCost::control_energy(&p);
        let nodes = p.grid.nodes();
        let u = vec![2.0; nodes];
        let zeros = vec![0.0; nodes];
        let val = cost.evaluate_path(p.grid.dt(), &zeros, &u, &zeros, &zeros);
        assert!((val - 4.0).abs() < 1e-14);
    }
}
