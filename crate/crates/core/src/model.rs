//! Problem instances: dimensions, time grid, coefficients and cost weights.
//!
//! Agent `i` of the population evolves as
//!
//! ```text
//! dx = (A x + B u + Ā x⁽ᴺ⁾ + B̄ u⁽ᴺ⁾ + b) dt + σ dW
//!    + (D x + F u + D̄ x⁽ᴺ⁾ + F̄ u⁽ᴺ⁾ + b̄) dW⁰ + σ̄ dW̄
//! dy = (G x + H u + Ḡ x⁽ᴺ⁾ + H̄ u⁽ᴺ⁾ + b̃) dt + σ̃ dW̄
//! dθ = (I θ + b̌) dt + σ̌ dW⁰
//! ```
//!
//! and pays
//!
//! ```text
//! ½ E[ ∫ ⟨Q(x − α₁x⁽ᴺ⁾) + 2q, x − α₁x⁽ᴺ⁾⟩ + ⟨R(u − β₁u⁽ᴺ⁾) + 2r, u − β₁u⁽ᴺ⁾⟩
//!        + 2⟨S(u − β₂u⁽ᴺ⁾), x − α₂x⁽ᴺ⁾⟩ dt
//!      + ⟨L_T(x_T − α₃x⁽ᴺ⁾_T) + 2l_T, x_T − α₃x⁽ᴺ⁾_T⟩ ]
//! ```
//!
//! Coefficients are piecewise constant and right-continuous on a uniform
//! grid. Weights `Q`, `R`, `L_T` may be indefinite.
//!
//! Instances are loaded from TOML with the top-level tables `dims`, `grid`,
//! `dynamics`, `observation`, `common_observation`, `cost`, `meanfield` and
//! `initial_state`. A time-varying coefficient is written as an array of
//! `K + 1` samples; a constant one as a single matrix, vector or number.

#![allow(non_snake_case)]

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

/// Default floor on `|σ̌|` below which the common observation is degenerate.
pub const DEFAULT_SIGMA_CHECK_FLOOR: f64 = 1e-12;

/// Tolerance used when testing symmetry of cost weights.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// State, control and individual-noise dimensions. The common noise is scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dimensions {
    pub n: usize,
    pub m: usize,
    pub d: usize,
}

impl Dimensions {
    pub fn new(n: usize, m: usize, d: usize) -> Result<Self> {
        if n == 0 || m == 0 || d == 0 {
            return Err(Error::Invalid(format!(
                "dimensions must be positive, got n={n}, m={m}, d={d}"
            )));
        }
        Ok(Self { n, m, d })
    }
}

/// Uniform time grid `t_k = k T / K`, `k = 0..=K`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub horizon: f64,
    pub steps: usize,
}

impl GridSpec {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) || steps == 0 {
            return Err(Error::Invalid(format!(
                "grid needs T > 0 and K ≥ 1, got T={horizon}, K={steps}"
            )));
        }
        Ok(Self { horizon, steps })
    }

    /// Step size `T / K`.
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Number of nodes `K + 1`.
    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    /// Time of node `k`; node `K` is exactly `T`.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            self.horizon * k as f64 / self.steps as f64
        }
    }

    /// Index of the piece containing `t` under the right-continuous rule.
    pub fn piece(&self, t: f64) -> Result<usize> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::Domain {
                t,
                horizon: self.horizon,
            });
        }
        let x = t / self.dt();
        let k = (x + 1e-9 * x.abs().max(1.0)).floor() as usize;
        Ok(k.min(self.steps))
    }

    /// Index of the grid node equal to `t`.
    pub fn node(&self, t: f64) -> Result<usize> {
        let k = self.piece(t)?;
        let tol = 1e-9 * self.dt();
        if (self.time(k) - t).abs() <= tol {
            Ok(k)
        } else if k < self.steps && (self.time(k + 1) - t).abs() <= tol {
            Ok(k + 1)
        } else {
            Err(Error::Precondition(format!("t = {t} is not a grid node")))
        }
    }

    /// Grid with every step split into `factor` equal parts.
    pub fn refine(&self, factor: usize) -> Self {
        Self {
            horizon: self.horizon,
            steps: self.steps * factor.max(1),
        }
    }
}

/// Matrix-valued coefficient sampled at grid nodes, piecewise constant and
/// right-continuous in time. A single sample denotes a constant path.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientPath {
    grid: GridSpec,
    values: Vec<Mat>,
}

impl CoefficientPath {
    /// Constant path.
    pub fn constant(grid: GridSpec, value: Mat) -> Self {
        Self {
            grid,
            values: vec![value],
        }
    }

    /// Constant zero path of the given shape.
    pub fn zeros(grid: GridSpec, rows: usize, cols: usize) -> Self {
        Self::constant(grid, linalg::zeros(rows, cols))
    }

    /// Path from `K + 1` node samples of a common shape.
    pub fn from_nodes(grid: GridSpec, values: Vec<Mat>) -> Result<Self> {
        if values.len() != grid.nodes() {
            return Err(Error::Dimension {
                key: "coefficient path".into(),
                expected: format!("{} samples", grid.nodes()),
                found: format!("{} samples", values.len()),
            });
        }
        let shape = values[0].shape();
        if values.iter().any(|v| v.shape() != shape) {
            return Err(Error::Dimension {
                key: "coefficient path".into(),
                expected: format!("{}x{} at every node", shape.0, shape.1),
                found: "mixed shapes".into(),
            });
        }
        Ok(Self { grid, values })
    }

    /// Sample governing node `k` and the interval `[t_k, t_{k+1})`.
    pub fn at(&self, k: usize) -> &Mat {
        if self.values.len() == 1 {
            &self.values[0]
        } else {
            &self.values[k.min(self.values.len() - 1)]
        }
    }

    /// Value at time `t` under the right-continuous piecewise-constant rule.
    pub fn value(&self, t: f64) -> Result<&Mat> {
        Ok(self.at(self.grid.piece(t)?))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }

    pub fn is_constant(&self) -> bool {
        self.values.len() == 1
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    /// Stored samples: one for a constant path, `K + 1` otherwise.
    pub fn samples(&self) -> &[Mat] {
        &self.values
    }

    /// The same path expressed on a grid refined by `factor`.
    pub fn refine(&self, factor: usize) -> Self {
        let grid = self.grid.refine(factor);
        if self.is_constant() {
            return Self::constant(grid, self.values[0].clone());
        }
        let values = (0..grid.nodes())
            .map(|j| self.values[j / factor.max(1)].clone())
            .collect();
        Self { grid, values }
    }

    fn all_finite(&self) -> bool {
        self.values.iter().all(linalg::is_finite)
    }
}

/// Piecewise-constant right-continuous evaluation of a coefficient path.
pub fn coeff_at(path: &CoefficientPath, t: f64) -> Result<Mat> {
    path.value(t).cloned()
}

/// State dynamics coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct Dynamics {
    pub A: CoefficientPath,
    pub A_bar: CoefficientPath,
    pub D: CoefficientPath,
    pub D_bar: CoefficientPath,
    pub B: CoefficientPath,
    pub B_bar: CoefficientPath,
    pub F: CoefficientPath,
    pub F_bar: CoefficientPath,
    pub b: CoefficientPath,
    pub b_bar: CoefficientPath,
    pub sigma: CoefficientPath,
    pub sigma_bar: CoefficientPath,
}

/// Individual observation coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub G: CoefficientPath,
    pub G_bar: CoefficientPath,
    pub H: CoefficientPath,
    pub H_bar: CoefficientPath,
    pub b_tilde: CoefficientPath,
    pub sigma_tilde: CoefficientPath,
}

/// Common observation `dθ = (I θ + b̌) dt + σ̌ dW⁰`.
#[derive(Clone, Debug, PartialEq)]
pub struct CommonObservation {
    pub I: CoefficientPath,
    pub b_check: CoefficientPath,
    pub sigma_check: CoefficientPath,
    pub floor: f64,
}

/// Cost weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Cost {
    pub Q: CoefficientPath,
    pub R: CoefficientPath,
    pub S: CoefficientPath,
    pub q: CoefficientPath,
    pub r: CoefficientPath,
    pub L_T: Mat,
    pub l_T: Mat,
}

/// Mean-field coupling constants.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanFieldWeights {
    #[serde(default)]
    pub alpha1: f64,
    #[serde(default)]
    pub alpha2: f64,
    #[serde(default)]
    pub alpha3: f64,
    #[serde(default)]
    pub beta1: f64,
    #[serde(default)]
    pub beta2: f64,
}

/// A complete problem instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec {
    pub dims: Dimensions,
    pub grid: GridSpec,
    pub dynamics: Dynamics,
    pub observation: Observation,
    pub common: CommonObservation,
    pub cost: Cost,
    pub meanfield: MeanFieldWeights,
    /// Deterministic initial state shared by every agent.
    pub x0: Mat,
}

/// Borrowed view of every coefficient on the interval starting at node `k`.
#[derive(Clone, Copy, Debug)]
pub struct Node<'a> {
    pub A: &'a Mat,
    pub A_bar: &'a Mat,
    pub D: &'a Mat,
    pub D_bar: &'a Mat,
    pub B: &'a Mat,
    pub B_bar: &'a Mat,
    pub F: &'a Mat,
    pub F_bar: &'a Mat,
    pub b: &'a Mat,
    pub b_bar: &'a Mat,
    pub sigma: &'a Mat,
    pub sigma_bar: &'a Mat,
    pub G: &'a Mat,
    pub G_bar: &'a Mat,
    pub H: &'a Mat,
    pub H_bar: &'a Mat,
    pub b_tilde: &'a Mat,
    pub sigma_tilde: &'a Mat,
    pub Q: &'a Mat,
    pub R: &'a Mat,
    pub S: &'a Mat,
    pub q: &'a Mat,
    pub r: &'a Mat,
    pub I: f64,
    pub b_check: f64,
    pub sigma_check: f64,
}

impl ProblemSpec {
    /// Instance with every coefficient zero, `σ̌ = 1` and `x = 0`.
    pub fn zero(dims: Dimensions, grid: GridSpec) -> Self {
        let (n, m, d) = (dims.n, dims.m, dims.d);
        let z = |r, c| CoefficientPath::zeros(grid, r, c);
        Self {
            dims,
            grid,
            dynamics: Dynamics {
                A: z(n, n),
                A_bar: z(n, n),
                D: z(n, n),
                D_bar: z(n, n),
                B: z(n, m),
                B_bar: z(n, m),
                F: z(n, m),
                F_bar: z(n, m),
                b: z(n, 1),
                b_bar: z(n, 1),
                sigma: z(n, d),
                sigma_bar: z(n, d),
            },
            observation: Observation {
                G: z(n, n),
                G_bar: z(n, n),
                H: z(n, m),
                H_bar: z(n, m),
                b_tilde: z(n, 1),
                sigma_tilde: z(n, d),
            },
            common: CommonObservation {
                I: z(1, 1),
                b_check: z(1, 1),
                sigma_check: CoefficientPath::constant(grid, linalg::scalar(1.0)),
                floor: DEFAULT_SIGMA_CHECK_FLOOR,
            },
            cost: Cost {
                Q: z(n, n),
                R: z(m, m),
                S: z(n, m),
                q: z(n, 1),
                r: z(m, 1),
                L_T: linalg::zeros(n, n),
                l_T: linalg::zeros(n, 1),
            },
            meanfield: MeanFieldWeights::default(),
            x0: linalg::zeros(n, 1),
        }
    }

    /// Coefficients governing node `k`.
    pub fn at(&self, k: usize) -> Node<'_> {
        let dy = &self.dynamics;
        let ob = &self.observation;
        let c = &self.cost;
        Node {
            A: dy.A.at(k),
            A_bar: dy.A_bar.at(k),
            D: dy.D.at(k),
            D_bar: dy.D_bar.at(k),
            B: dy.B.at(k),
            B_bar: dy.B_bar.at(k),
            F: dy.F.at(k),
            F_bar: dy.F_bar.at(k),
            b: dy.b.at(k),
            b_bar: dy.b_bar.at(k),
            sigma: dy.sigma.at(k),
            sigma_bar: dy.sigma_bar.at(k),
            G: ob.G.at(k),
            G_bar: ob.G_bar.at(k),
            H: ob.H.at(k),
            H_bar: ob.H_bar.at(k),
            b_tilde: ob.b_tilde.at(k),
            sigma_tilde: ob.sigma_tilde.at(k),
            Q: c.Q.at(k),
            R: c.R.at(k),
            S: c.S.at(k),
            q: c.q.at(k),
            r: c.r.at(k),
            I: self.common.I.at(k)[(0, 0)],
            b_check: self.common.b_check.at(k)[(0, 0)],
            sigma_check: self.common.sigma_check.at(k)[(0, 0)],
        }
    }

    fn paths(&self) -> Vec<(&'static str, &CoefficientPath)> {
        let dy = &self.dynamics;
        let ob = &self.observation;
        let co = &self.common;
        let c = &self.cost;
        vec![
            ("dynamics.A", &dy.A),
            ("dynamics.A_bar", &dy.A_bar),
            ("dynamics.D", &dy.D),
            ("dynamics.D_bar", &dy.D_bar),
            ("dynamics.B", &dy.B),
            ("dynamics.B_bar", &dy.B_bar),
            ("dynamics.F", &dy.F),
            ("dynamics.F_bar", &dy.F_bar),
            ("dynamics.b", &dy.b),
            ("dynamics.b_bar", &dy.b_bar),
            ("dynamics.sigma", &dy.sigma),
            ("dynamics.sigma_bar", &dy.sigma_bar),
            ("observation.G", &ob.G),
            ("observation.G_bar", &ob.G_bar),
            ("observation.H", &ob.H),
            ("observation.H_bar", &ob.H_bar),
            ("observation.b_tilde", &ob.b_tilde),
            ("observation.sigma_tilde", &ob.sigma_tilde),
            ("common_observation.I", &co.I),
            ("common_observation.b_check", &co.b_check),
            ("common_observation.sigma_check", &co.sigma_check),
            ("cost.Q", &c.Q),
            ("cost.R", &c.R),
            ("cost.S", &c.S),
            ("cost.q", &c.q),
            ("cost.r", &c.r),
        ]
    }

    fn paths_mut(&mut self) -> Vec<&mut CoefficientPath> {
        let dy = &mut self.dynamics;
        let ob = &mut self.observation;
        let co = &mut self.common;
        let c = &mut self.cost;
        vec![
            &mut dy.A,
            &mut dy.A_bar,
            &mut dy.D,
            &mut dy.D_bar,
            &mut dy.B,
            &mut dy.B_bar,
            &mut dy.F,
            &mut dy.F_bar,
            &mut dy.b,
            &mut dy.b_bar,
            &mut dy.sigma,
            &mut dy.sigma_bar,
            &mut ob.G,
            &mut ob.G_bar,
            &mut ob.H,
            &mut ob.H_bar,
            &mut ob.b_tilde,
            &mut ob.sigma_tilde,
            &mut co.I,
            &mut co.b_check,
            &mut co.sigma_check,
            &mut c.Q,
            &mut c.R,
            &mut c.S,
            &mut c.q,
            &mut c.r,
        ]
    }

    /// The same instance on a grid refined by `factor`; piecewise-constant
    /// coefficients are represented exactly.
    pub fn refine(&self, factor: usize) -> Self {
        let mut out = self.clone();
        out.grid = self.grid.refine(factor);
        for p in out.paths_mut() {
            *p = p.refine(factor);
        }
        out
    }

    /// The same instance on a new number of steps. Only instances whose
    /// coefficients are all constant can be regridded arbitrarily.
    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        if self.paths().iter().any(|(_, p)| !p.is_constant()) {
            return Err(Error::Precondition(
                "only constant-coefficient instances can be regridded".into(),
            ));
        }
        let grid = GridSpec::new(self.grid.horizon, steps)?;
        let mut out = self.clone();
        out.grid = grid;
        for p in out.paths_mut() {
            *p = CoefficientPath::constant(grid, p.samples()[0].clone());
        }
        Ok(out)
    }

    /// True when every coefficient path is constant in time.
    pub fn is_time_invariant(&self) -> bool {
        self.paths().iter().all(|(_, p)| p.is_constant())
    }
}

/// Outcome of one assumption check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Pass/fail list per assumption plus non-fatal flags.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    pub flags: Vec<String>,
}

impl ValidationReport {
    /// True when every check passed.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Details of the failed checks.
    pub fn failures(&self) -> Vec<String> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.detail.clone())
            .collect()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            let mark = if c.passed { "pass" } else { "FAIL" };
            writeln!(f, "[{mark}] {}: {}", c.name, c.detail)?;
        }
        for flag in &self.flags {
            writeln!(f, "[flag] {flag}")?;
        }
        Ok(())
    }
}

/// Checks symmetry of `Q`, `R`, `L_T`, nondegeneracy of `σ̌` and finiteness
/// of every sample; flags indefinite weights without failing.
pub fn validate(problem: &ProblemSpec) -> ValidationReport {
    let mut checks = Vec::new();
    let mut flags = Vec::new();
    let c = &problem.cost;

    let sym_path = |p: &CoefficientPath| p.samples().iter().position(|m| !linalg::is_symmetric(m, SYMMETRY_TOL));
    for (name, path) in [("Q", &c.Q), ("R", &c.R)] {
        let bad = sym_path(path);
        checks.push(Check {
            name: format!("{name} symmetric"),
            passed: bad.is_none(),
            detail: match bad {
                None => format!("{name} symmetric at every node"),
                Some(k) => format!("{name} not symmetric (node {k})"),
            },
        });
    }
    let lt_sym = linalg::is_symmetric(&c.L_T, SYMMETRY_TOL);
    checks.push(Check {
        name: "L_T symmetric".into(),
        passed: lt_sym,
        detail: if lt_sym {
            "L_T symmetric".into()
        } else {
            "L_T not symmetric".into()
        },
    });

    let floor = problem.common.floor;
    let degenerate = problem
        .common
        .sigma_check
        .samples()
        .iter()
        .position(|s| !(s[(0, 0)].abs() >= floor));
    checks.push(Check {
        name: "sigma_check nondegenerate".into(),
        passed: degenerate.is_none(),
        detail: match degenerate {
            None => format!("|σ̌| ≥ {floor:e} at every node"),
            Some(k) => format!("σ̌ degenerate (node {k})"),
        },
    });

    let mut non_finite: Vec<&str> = problem
        .paths()
        .into_iter()
        .filter(|(_, p)| !p.all_finite())
        .map(|(k, _)| k)
        .collect();
    if !linalg::is_finite(&c.L_T) {
        non_finite.push("cost.L_T");
    }
    if !linalg::is_finite(&c.l_T) {
        non_finite.push("cost.l_T");
    }
    if !linalg::is_finite(&problem.x0) {
        non_finite.push("initial_state.x");
    }
    let mf = problem.meanfield;
    if ![mf.alpha1, mf.alpha2, mf.alpha3, mf.beta1, mf.beta2]
        .iter()
        .all(|v| v.is_finite())
    {
        non_finite.push("meanfield");
    }
    checks.push(Check {
        name: "finite samples".into(),
        passed: non_finite.is_empty(),
        detail: if non_finite.is_empty() {
            "all samples finite".into()
        } else {
            format!("non-finite entries in {}", non_finite.join(", "))
        },
    });

    let describe = |name: &str, samples: &[Mat], strict: bool| -> Option<String> {
        let all_zero = samples.iter().all(|m| linalg::max_abs(m) == 0.0);
        let min = samples
            .iter()
            .map(|m| linalg::min_eig_sym(&linalg::sym(m)))
            .fold(f64::INFINITY, f64::min);
        let threshold = if strict { 1e-8 } else { -1e-9 };
        if min >= threshold {
            None
        } else if all_zero {
            Some(format!("{name} = 0 (indefinite)"))
        } else if strict {
            Some(format!(
                "{name} not uniformly positive, min eigenvalue {min:.3e} (indefinite)"
            ))
        } else {
            Some(format!(
                "{name} not positive semidefinite, min eigenvalue {min:.3e} (indefinite)"
            ))
        }
    };
    flags.extend(describe("Q", c.Q.samples(), false));
    flags.extend(describe("R", c.R.samples(), true));
    flags.extend(describe("L_T", std::slice::from_ref(&c.L_T), false));

    let obs_singular = problem
        .observation
        .sigma_tilde
        .samples()
        .iter()
        .any(|s| linalg::min_eig_sym(&(s * s.transpose())) < 1e-14);
    if obs_singular {
        flags.push("σ̃σ̃ᵀ singular: filtering unavailable".into());
    }

    ValidationReport { checks, flags }
}

#[derive(Clone, Copy)]
enum Kind {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Kind {
    fn shape(self) -> (usize, usize) {
        match self {
            Kind::Scalar => (1, 1),
            Kind::Vector(n) => (n, 1),
            Kind::Matrix(r, c) => (r, c),
        }
    }
}

fn depth(v: &Value) -> usize {
    match v {
        Value::Array(a) => 1 + a.first().map(depth).unwrap_or(0),
        _ => 0,
    }
}

fn number(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(Error::Parse(format!(
            "`{key}` expects a number, found {}",
            other.type_str()
        ))),
    }
}

fn array<'a>(key: &str, v: &'a Value) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| {
        Error::Parse(format!("`{key}` expects an array, found {}", v.type_str()))
    })
}

fn dim_error(key: &str, expected: String, found: String) -> Error {
    Error::Dimension {
        key: key.to_string(),
        expected,
        found,
    }
}

fn parse_single(key: &str, v: &Value, kind: Kind) -> Result<Mat> {
    let (rows, cols) = kind.shape();
    match kind {
        Kind::Scalar => Ok(linalg::scalar(number(key, v)?)),
        Kind::Vector(n) => {
            if let Ok(x) = number(key, v) {
                if n == 1 {
                    return Ok(linalg::scalar(x));
                }
            }
            let items = array(key, v)?;
            if items.len() != n {
                return Err(dim_error(key, format!("vector of length {n}"), format!("length {}", items.len())));
            }
            let vals = items.iter().map(|x| number(key, x)).collect::<Result<Vec<_>>>()?;
            Ok(linalg::col(&vals))
        }
        Kind::Matrix(..) => {
            if let Ok(x) = number(key, v) {
                if rows == 1 && cols == 1 {
                    return Ok(linalg::scalar(x));
                }
            }
            let row_vals = array(key, v)?;
            if row_vals.len() != rows {
                return Err(dim_error(key, format!("{rows}x{cols} matrix"), format!("{} rows", row_vals.len())));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for row in row_vals {
                let entries = array(key, row)?;
                if entries.len() != cols {
                    return Err(dim_error(key, format!("{rows}x{cols} matrix"), format!("row of length {}", entries.len())));
                }
                for e in entries {
                    data.push(number(key, e)?);
                }
            }
            Ok(linalg::from_rows(rows, cols, &data))
        }
    }
}

fn parse_path(key: &str, v: Option<&Value>, kind: Kind, grid: GridSpec) -> Result<CoefficientPath> {
    let (rows, cols) = kind.shape();
    let Some(v) = v else {
        return Ok(CoefficientPath::zeros(grid, rows, cols));
    };
    let single_depth = match kind {
        Kind::Scalar => 0,
        Kind::Vector(_) => 1,
        Kind::Matrix(..) => 2,
    };
    let dv = depth(v);
    if dv <= single_depth {
        return Ok(CoefficientPath::constant(grid, parse_single(key, v, kind)?));
    }
    if dv == single_depth + 1 {
        let samples = array(key, v)?;
        if samples.len() != grid.nodes() {
            return Err(dim_error(
                key,
                format!("a single value or {} node samples", grid.nodes()),
                format!("{} samples", samples.len()),
            ));
        }
        let values = samples
            .iter()
            .map(|s| parse_single(key, s, kind))
            .collect::<Result<Vec<_>>>()?;
        return CoefficientPath::from_nodes(grid, values);
    }
    Err(dim_error(key, format!("{rows}x{cols} value or path"), format!("nesting depth {dv}")))
}

fn section<'a>(root: &'a Table, name: &str, allowed: &[&str], required: bool) -> Result<Option<&'a Table>> {
    let Some(v) = root.get(name) else {
        return if required {
            Err(Error::Parse(format!("missing table `{name}`")))
        } else {
            Ok(None)
        };
    };
    let t = v
        .as_table()
        .ok_or_else(|| Error::Parse(format!("`{name}` must be a table")))?;
    for k in t.keys() {
        if !allowed.contains(&k.as_str()) {
            return Err(Error::Parse(format!("unknown key `{name}.{k}`")));
        }
    }
    Ok(Some(t))
}

fn get<'a>(t: Option<&'a Table>, key: &str) -> Option<&'a Value> {
    t.and_then(|t| t.get(key))
}

fn required<'a>(t: Option<&'a Table>, section: &str, key: &str) -> Result<&'a Value> {
    get(t, key).ok_or_else(|| Error::Parse(format!("missing required key `{section}.{key}`")))
}

fn positive_int(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i > 0 => Ok(*i as usize),
        other => Err(Error::Parse(format!("`{key}` expects a positive integer, found {other}"))),
    }
}

const TOP: &[&str] = &[
    "dims",
    "grid",
    "dynamics",
    "observation",
    "common_observation",
    "cost",
    "meanfield",
    "initial_state",
];
const DYN: &[&str] = &[
    "A", "A_bar", "D", "D_bar", "B", "B_bar", "F", "F_bar", "b", "b_bar", "sigma", "sigma_bar",
];
const OBS: &[&str] = &["G", "G_bar", "H", "H_bar", "b_tilde", "sigma_tilde"];
const COMMON: &[&str] = &["I", "b_check", "sigma_check", "floor"];
const COST: &[&str] = &["Q", "R", "S", "q", "r", "L_T", "l_T"];
const MF: &[&str] = &["alpha1", "alpha2", "alpha3", "beta1", "beta2"];

/// Parses a TOML configuration into a [`ProblemSpec`]. Absent coefficients
/// default to zero; `common_observation.sigma_check` is required.
pub fn load_problem(config_text: &str) -> Result<ProblemSpec> {
    let root: Table = config_text
        .parse()
        .map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
    for k in root.keys() {
        if !TOP.contains(&k.as_str()) {
            return Err(Error::Parse(format!("unknown key `{k}`")));
        }
    }

    let dims_t = section(&root, "dims", &["n", "m", "d"], true)?;
    let dims = Dimensions::new(
        positive_int("dims.n", required(dims_t, "dims", "n")?)?,
        positive_int("dims.m", required(dims_t, "dims", "m")?)?,
        positive_int("dims.d", required(dims_t, "dims", "d")?)?,
    )?;
    let grid_t = section(&root, "grid", &["T", "K"], true)?;
    let grid = GridSpec::new(
        number("grid.T", required(grid_t, "grid", "T")?)?,
        positive_int("grid.K", required(grid_t, "grid", "K")?)?,
    )?;
    let (n, m, d) = (dims.n, dims.m, dims.d);

    let dy = section(&root, "dynamics", DYN, false)?;
    let path = |t: Option<&Table>, sec: &str, key: &str, kind: Kind| {
        parse_path(&format!("{sec}.{key}"), get(t, key), kind, grid)
    };
    let dynamics = Dynamics {
        A: path(dy, "dynamics", "A", Kind::Matrix(n, n))?,
        A_bar: path(dy, "dynamics", "A_bar", Kind::Matrix(n, n))?,
        D: path(dy, "dynamics", "D", Kind::Matrix(n, n))?,
        D_bar: path(dy, "dynamics", "D_bar", Kind::Matrix(n, n))?,
        B: path(dy, "dynamics", "B", Kind::Matrix(n, m))?,
        B_bar: path(dy, "dynamics", "B_bar", Kind::Matrix(n, m))?,
        F: path(dy, "dynamics", "F", Kind::Matrix(n, m))?,
        F_bar: path(dy, "dynamics", "F_bar", Kind::Matrix(n, m))?,
        b: path(dy, "dynamics", "b", Kind::Vector(n))?,
        b_bar: path(dy, "dynamics", "b_bar", Kind::Vector(n))?,
        sigma: path(dy, "dynamics", "sigma", Kind::Matrix(n, d))?,
        sigma_bar: path(dy, "dynamics", "sigma_bar", Kind::Matrix(n, d))?,
    };

    let ob = section(&root, "observation", OBS, false)?;
    let observation = Observation {
        G: path(ob, "observation", "G", Kind::Matrix(n, n))?,
        G_bar: path(ob, "observation", "G_bar", Kind::Matrix(n, n))?,
        H: path(ob, "observation", "H", Kind::Matrix(n, m))?,
        H_bar: path(ob, "observation", "H_bar", Kind::Matrix(n, m))?,
        b_tilde: path(ob, "observation", "b_tilde", Kind::Vector(n))?,
        sigma_tilde: path(ob, "observation", "sigma_tilde", Kind::Matrix(n, d))?,
    };

    let co = section(&root, "common_observation", COMMON, true)?;
    let sigma_check_value = required(co, "common_observation", "sigma_check")?;
    let floor = match get(co, "floor") {
        Some(v) => number("common_observation.floor", v)?,
        None => DEFAULT_SIGMA_CHECK_FLOOR,
    };
    let common = CommonObservation {
        I: path(co, "common_observation", "I", Kind::Scalar)?,
        b_check: path(co, "common_observation", "b_check", Kind::Scalar)?,
        sigma_check: parse_path(
            "common_observation.sigma_check",
            Some(sigma_check_value),
            Kind::Scalar,
            grid,
        )?,
        floor,
    };

    let ct = section(&root, "cost", COST, false)?;
    let cost = Cost {
        Q: path(ct, "cost", "Q", Kind::Matrix(n, n))?,
        R: path(ct, "cost", "R", Kind::Matrix(m, m))?,
        S: path(ct, "cost", "S", Kind::Matrix(n, m))?,
        q: path(ct, "cost", "q", Kind::Vector(n))?,
        r: path(ct, "cost", "r", Kind::Vector(m))?,
        L_T: match get(ct, "L_T") {
            Some(v) => parse_single("cost.L_T", v, Kind::Matrix(n, n))?,
            None => linalg::zeros(n, n),
        },
        l_T: match get(ct, "l_T") {
            Some(v) => parse_single("cost.l_T", v, Kind::Vector(n))?,
            None => linalg::zeros(n, 1),
        },
    };

    let mf = section(&root, "meanfield", MF, false)?;
    let weight = |key: &str| -> Result<f64> {
        match get(mf, key) {
            Some(v) => number(&format!("meanfield.{key}"), v),
            None => Ok(0.0),
        }
    };
    let meanfield = MeanFieldWeights {
        alpha1: weight("alpha1")?,
        alpha2: weight("alpha2")?,
        alpha3: weight("alpha3")?,
        beta1: weight("beta1")?,
        beta2: weight("beta2")?,
    };

    let init = section(&root, "initial_state", &["x"], true)?;
    let x0 = parse_single("initial_state.x", required(init, "initial_state", "x")?, Kind::Vector(n))?;

    Ok(ProblemSpec {
        dims,
        grid,
        dynamics,
        observation,
        common,
        cost,
        meanfield,
        x0,
    })
}

/// Reads and parses a configuration file.
pub fn load_problem_file(path: impl AsRef<std::path::Path>) -> Result<ProblemSpec> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    load_problem(&text)
}

fn value_single(m: &Mat, kind: Kind) -> Value {
    match kind {
        Kind::Scalar => Value::Float(m[(0, 0)]),
        Kind::Vector(_) => Value::Array(m.iter().map(|v| Value::Float(*v)).collect()),
        Kind::Matrix(r, c) => Value::Array(
            (0..r)
                .map(|i| Value::Array((0..c).map(|j| Value::Float(m[(i, j)])).collect()))
                .collect(),
        ),
    }
}

fn value_path(p: &CoefficientPath, kind: Kind) -> Value {
    if p.is_constant() {
        value_single(&p.samples()[0], kind)
    } else {
        Value::Array(p.samples().iter().map(|m| value_single(m, kind)).collect())
    }
}

/// Serializes a problem back to the configuration schema. Floats are
/// written in shortest round-trip form, so loading the text reproduces the
/// instance bit for bit.
pub fn to_config_text(problem: &ProblemSpec) -> String {
    let (n, m, d) = (problem.dims.n, problem.dims.m, problem.dims.d);
    let mut root = Table::new();

    let mut dims = Table::new();
    dims.insert("n".into(), Value::Integer(n as i64));
    dims.insert("m".into(), Value::Integer(m as i64));
    dims.insert("d".into(), Value::Integer(d as i64));
    root.insert("dims".into(), Value::Table(dims));

    let mut grid = Table::new();
    grid.insert("T".into(), Value::Float(problem.grid.horizon));
    grid.insert("K".into(), Value::Integer(problem.grid.steps as i64));
    root.insert("grid".into(), Value::Table(grid));

    let dy = &problem.dynamics;
    let mut t = Table::new();
    for (k, p, kind) in [
        ("A", &dy.A, Kind::Matrix(n, n)),
        ("A_bar", &dy.A_bar, Kind::Matrix(n, n)),
        ("D", &dy.D, Kind::Matrix(n, n)),
        ("D_bar", &dy.D_bar, Kind::Matrix(n, n)),
        ("B", &dy.B, Kind::Matrix(n, m)),
        ("B_bar", &dy.B_bar, Kind::Matrix(n, m)),
        ("F", &dy.F, Kind::Matrix(n, m)),
        ("F_bar", &dy.F_bar, Kind::Matrix(n, m)),
        ("b", &dy.b, Kind::Vector(n)),
        ("b_bar", &dy.b_bar, Kind::Vector(n)),
        ("sigma", &dy.sigma, Kind::Matrix(n, d)),
        ("sigma_bar", &dy.sigma_bar, Kind::Matrix(n, d)),
    ] {
        t.insert(k.into(), value_path(p, kind));
    }
    root.insert("dynamics".into(), Value::Table(t));

    let ob = &problem.observation;
    let mut t = Table::new();
    for (k, p, kind) in [
        ("G", &ob.G, Kind::Matrix(n, n)),
        ("G_bar", &ob.G_bar, Kind::Matrix(n, n)),
        ("H", &ob.H, Kind::Matrix(n, m)),
        ("H_bar", &ob.H_bar, Kind::Matrix(n, m)),
        ("b_tilde", &ob.b_tilde, Kind::Vector(n)),
        ("sigma_tilde", &ob.sigma_tilde, Kind::Matrix(n, d)),
    ] {
        t.insert(k.into(), value_path(p, kind));
    }
    root.insert("observation".into(), Value::Table(t));

    let co = &problem.common;
    let mut t = Table::new();
    t.insert("I".into(), value_path(&co.I, Kind::Scalar));
    t.insert("b_check".into(), value_path(&co.b_check, Kind::Scalar));
    t.insert("sigma_check".into(), value_path(&co.sigma_check, Kind::Scalar));
    t.insert("floor".into(), Value::Float(co.floor));
    root.insert("common_observation".into(), Value::Table(t));

    let c = &problem.cost;
    let mut t = Table::new();
    t.insert("Q".into(), value_path(&c.Q, Kind::Matrix(n, n)));
    t.insert("R".into(), value_path(&c.R, Kind::Matrix(m, m)));
    t.insert("S".into(), value_path(&c.S, Kind::Matrix(n, m)));
    t.insert("q".into(), value_path(&c.q, Kind::Vector(n)));
    t.insert("r".into(), value_path(&c.r, Kind::Vector(m)));
    t.insert("L_T".into(), value_single(&c.L_T, Kind::Matrix(n, n)));
    t.insert("l_T".into(), value_single(&c.l_T, Kind::Vector(n)));
    root.insert("cost".into(), Value::Table(t));

    let mf = problem.meanfield;
    let mut t = Table::new();
    for (k, v) in [
        ("alpha1", mf.alpha1),
        ("alpha2", mf.alpha2),
        ("alpha3", mf.alpha3),
        ("beta1", mf.beta1),
        ("beta2", mf.beta2),
    ] {
        t.insert(k.into(), Value::Float(v));
    }
    root.insert("meanfield".into(), Value::Table(t));

    let mut t = Table::new();
    t.insert("x".into(), value_single(&problem.x0, Kind::Vector(n)));
    root.insert("initial_state".into(), Value::Table(t));

    toml::to_string(&root).expect("tables of floats always serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [dims]
        n = 1
        m = 1
        d = 1
        [grid]
        T = 1.0
        K = 4
        [common_observation]
        sigma_check = 1.0
        [initial_state]
        x = [0.0]
    "#;

    #[test]
    fn minimal_config_is_zero_instance() {
        let p = load_problem(MINIMAL).unwrap();
        let z = ProblemSpec::zero(p.dims, p.grid);
        assert_eq!(p, z);
        assert!(validate(&p).passed());
    }

    #[test]
    fn missing_sigma_check_names_the_key() {
        let text = MINIMAL.replace("sigma_check = 1.0", "I = 0.0");
        let err = load_problem(&text).unwrap_err().to_string();
        assert!(err.contains("sigma_check"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let text = format!("{MINIMAL}\n[cost]\nQQ = [[1.0]]\n");
        let err = load_problem(&text).unwrap_err().to_string();
        assert!(err.contains("cost.QQ"), "{err}");
    }

    #[test]
    fn wrong_shape_is_a_dimension_error() {
        let text = format!("{MINIMAL}\n[cost]\nQ = [[1.0, 0.0]]\n");
        assert!(matches!(load_problem(&text), Err(Error::Dimension { .. })));
    }

    #[test]
    fn time_varying_path_is_parsed() {
        let text = format!("{MINIMAL}\n[dynamics]\nA = [[[1.0]], [[1.0]], [[2.0]], [[2.0]], [[2.0]]]\n");
        let p = load_problem(&text).unwrap();
        assert_eq!(p.dynamics.A.value(0.25).unwrap()[(0, 0)], 1.0);
        assert_eq!(p.dynamics.A.value(0.5).unwrap()[(0, 0)], 2.0);
        assert_eq!(p.dynamics.A.value(1.0).unwrap()[(0, 0)], 2.0);
    }

    #[test]
    fn coeff_at_rules() {
        let grid = GridSpec::new(1.0, 2).unwrap();
        let c = CoefficientPath::constant(grid, linalg::scalar(3.0));
        assert_eq!(coeff_at(&c, 0.7).unwrap()[(0, 0)], 3.0);
        let two = CoefficientPath::from_nodes(
            grid,
            vec![linalg::scalar(1.0), linalg::scalar(2.0), linalg::scalar(2.0)],
        )
        .unwrap();
        assert_eq!(coeff_at(&two, 0.5).unwrap()[(0, 0)], 2.0);
        assert_eq!(coeff_at(&two, 0.49).unwrap()[(0, 0)], 1.0);
        assert_eq!(coeff_at(&two, 1.0).unwrap()[(0, 0)], 2.0);
        assert!(matches!(coeff_at(&two, -0.1), Err(Error::Domain { .. })));
    }

    #[test]
    fn refinement_preserves_values() {
        let grid = GridSpec::new(1.0, 4).unwrap();
        let path = CoefficientPath::from_nodes(
            grid,
            (0..5).map(|k| linalg::scalar(k as f64)).collect(),
        )
        .unwrap();
        let fine = path.refine(3);
        for j in 0..=120 {
            let t = j as f64 / 120.0;
            assert_eq!(coeff_at(&path, t).unwrap(), coeff_at(&fine, t).unwrap(), "t = {t}");
        }
    }

    #[test]
    fn validation_flags_and_failures() {
        let mut p = load_problem(MINIMAL).unwrap();
        let report = validate(&p);
        assert!(report.flags.iter().any(|f| f == "R = 0 (indefinite)"));

        p.cost.Q = CoefficientPath::constant(p.grid, linalg::from_rows(1, 1, &[1.0]));
        p.dims = Dimensions::new(1, 1, 1).unwrap();
        p.common.sigma_check = CoefficientPath::zeros(p.grid, 1, 1);
        let report = validate(&p);
        assert!(!report.passed());
        assert!(report.failures().iter().any(|f| f.contains("σ̌ degenerate")));
    }

    #[test]
    fn asymmetric_q_fails() {
        let text = MINIMAL.replace("n = 1", "n = 2").replace("x = [0.0]", "x = [0.0, 0.0]")
            + "\n[cost]\nQ = [[1.0, 0.5], [0.0, 1.0]]\n";
        let p = load_problem(&text).unwrap();
        let report = validate(&p);
        assert!(report.failures().iter().any(|f| f.contains("Q not symmetric")));
    }
}
