//! Empirical checks of the ε-Nash property.
//!
//! * [`convergence_sweep`] estimates how fast the `N`-agent system
//!   approaches its limit: the state-average gap `E sup|x⁽ᴺ⁾ − x⁰|²`, the
//!   per-agent gap `E sup|xⁱ − Xⁱ|²` and the cost gap between the `N`-agent
//!   and the limiting functional, each with a least-squares log-log slope.
//! * [`epsilon_nash_probe`] lets agent `0` deviate to each member of a
//!   [`PerturbationFamily`] and measures its cost improvement with common
//!   random numbers.
//! * [`convexity_probe`] estimates the uniform convexity constant of the
//!   homogeneous cost over random open-loop controls, and
//!   [`envelope_probe`] the constant of the quadratic lower envelope of the
//!   relaxed cost over a family of deviations.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::compensator::{relaxed_cost, CompensatorPath};
use crate::cost::QuadraticCost;
use crate::error::{Error, Result};
use crate::linalg::{self, Dense};
use crate::meanfield::FeedbackLaw;
use crate::model::ProblemSpec;
use crate::noise::{self, Channel, Increments};
use crate::path::{self, NodePath};
use crate::population::{Estimate, Policy, PopulationConfig, PopulationResult, Recording, Simulation};

/// Least-squares fit of `log gap = intercept + slope · log N`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Half-width of the 95% confidence interval of the slope.
    pub half_width: f64,
    /// Residuals of the fit in log space, one per point.
    pub residuals: Vec<f64>,
}

impl SlopeFit {
    pub fn within(&self, lo: f64, hi: f64) -> bool {
        (lo..=hi).contains(&self.slope)
    }
}

/// Fits the log-log slope through at least three distinct positive points.
pub fn fit_loglog(ns: &[usize], gaps: &[f64]) -> Result<SlopeFit> {
    let mut distinct = ns.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 || ns.len() != gaps.len() {
        return Err(Error::Invalid(format!(
            "a slope fit needs at least 3 distinct N values, got {}",
            distinct.len()
        )));
    }
    if let Some(g) = gaps.iter().find(|g| !(**g > 0.0) || !g.is_finite()) {
        return Err(Error::Invalid(format!("log-log fit needs positive finite gaps, got {g}")));
    }
    let x: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let y: Vec<f64> = gaps.iter().map(|g| g.ln()).collect();
    let k = x.len() as f64;
    let mx = x.iter().sum::<f64>() / k;
    let my = y.iter().sum::<f64>() / k;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = x.iter().zip(&y).map(|(a, b)| b - intercept - slope * a).collect();
    let dof = k - 2.0;
    let half_width = if dof > 0.0 {
        let s2 = residuals.iter().map(|r| r * r).sum::<f64>() / dof;
        let t = StudentsT::new(0.0, 1.0, dof)
            .map_err(|e| Error::Invalid(e.to_string()))?
            .inverse_cdf(0.975);
        t * (s2 / sxx).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(SlopeFit {
        slope,
        intercept,
        half_width,
        residuals,
    })
}

/// Gap estimate at one population size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapPoint {
    pub agents: usize,
    pub estimate: Estimate,
    /// One sample per replication.
    pub samples: Vec<f64>,
}

/// Gap estimates across population sizes with their log-log slope.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub quantity: String,
    pub points: Vec<GapPoint>,
    /// `None` when some gap is not positive, as in noise-free instances.
    pub fit: Option<SlopeFit>,
}

impl ConvergenceReport {
    fn new(quantity: &str, points: Vec<GapPoint>) -> Self {
        let ns: Vec<usize> = points.iter().map(|p| p.agents).collect();
        let gaps: Vec<f64> = points.iter().map(|p| p.estimate.mean).collect();
        Self {
            quantity: quantity.into(),
            fit: fit_loglog(&ns, &gaps).ok(),
            points,
        }
    }

    /// Writes `N, replication, sample` rows.
    pub fn write_samples(&self, file: &Path) -> Result<()> {
        let rows: Vec<Vec<f64>> = self
            .points
            .iter()
            .flat_map(|p| p.samples.iter().enumerate().map(move |(r, s)| vec![p.agents as f64, r as f64, *s]))
            .collect();
        path::write_table(file, &["N".into(), "replication".into(), self.quantity.clone()], &rows)
    }
}

/// All gap quantities of one sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    /// `E sup_t |x⁽ᴺ⁾_t − x⁰_t|²`.
    pub mean_field: ConvergenceReport,
    /// `E sup_t |xⁱ_t − Xⁱ_t|²`, averaged over agents.
    pub per_agent: ConvergenceReport,
    /// `E|𝒥ᵢ − Jᵢ|` on shared paths, averaged over agents.
    pub cost_gap: ConvergenceReport,
    /// `E(𝒥ᵢ − Jᵢ)`, averaged over agents; may change sign.
    pub cost_gap_signed: ConvergenceReport,
}

impl SweepReport {
    /// Writes the per-N summary table used by the slope chart.
    pub fn write_csv(&self, file: &Path) -> Result<()> {
        let header: Vec<String> = [
            "N",
            "meanfield_gap",
            "meanfield_se",
            "agent_gap",
            "agent_se",
            "cost_gap",
            "cost_se",
            "cost_gap_signed",
            "cost_signed_se",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let rows: Vec<Vec<f64>> = (0..self.mean_field.points.len())
            .map(|i| {
                let mut row = vec![self.mean_field.points[i].agents as f64];
                for r in [&self.mean_field, &self.per_agent, &self.cost_gap, &self.cost_gap_signed] {
                    row.push(r.points[i].estimate.mean);
                    row.push(r.points[i].estimate.se);
                }
                row
            })
            .collect();
        path::write_table(file, &header, &rows)
    }
}

fn check_ns(ns: &[usize]) -> Result<()> {
    if ns.len() < 3 || ns.windows(2).any(|w| w[0] >= w[1]) || ns[0] == 0 {
        return Err(Error::Invalid(format!(
            "a sweep needs at least 3 strictly ascending positive N values, got {ns:?}"
        )));
    }
    Ok(())
}

/// Runs the equilibrium population for every `N` and collects all gaps.
/// Each `N` uses the same seed, so common-noise paths are shared across
/// population sizes.
pub fn convergence_sweep(
    problem: &ProblemSpec,
    law: &FeedbackLaw,
    ns: &[usize],
    replications: usize,
    seed: u64,
) -> Result<SweepReport> {
    check_ns(ns)?;
    let mut mf = Vec::new();
    let mut agent = Vec::new();
    let mut cost = Vec::new();
    let mut signed = Vec::new();
    for &n in ns {
        let cfg = PopulationConfig::new(n, replications, seed)?;
        let result = Simulation::new(problem, law)
            .record(Recording {
                agents: 0,
                paths: false,
                decomposition: false,
            })
            .run(&cfg)?;
        let point = |samples: Vec<f64>| GapPoint {
            agents: n,
            estimate: Estimate::from_samples(&samples),
            samples,
        };
        let reps = &result.replications;
        mf.push(point(reps.iter().map(|r| r.sup_gap_mean).collect()));
        agent.push(point(reps.iter().map(|r| mean(&r.sup_gap_agent)).collect()));
        let diffs = |r: &crate::population::Replication| -> Vec<f64> {
            r.cost_n[0].iter().zip(&r.cost_limit[0]).map(|(a, b)| a - b).collect()
        };
        cost.push(point(reps.iter().map(|r| mean(&diffs(r).iter().map(|d| d.abs()).collect::<Vec<_>>())).collect()));
        signed.push(point(reps.iter().map(|r| mean(&diffs(r))).collect()));
    }
    Ok(SweepReport {
        mean_field: ConvergenceReport::new("meanfield_gap", mf),
        per_agent: ConvergenceReport::new("agent_gap", agent),
        cost_gap: ConvergenceReport::new("cost_gap", cost),
        cost_gap_signed: ConvergenceReport::new("cost_gap_signed", signed),
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// State-average gap sweep.
pub fn meanfield_gap_sweep(problem: &ProblemSpec, law: &FeedbackLaw, ns: &[usize], replications: usize, seed: u64) -> Result<ConvergenceReport> {
    Ok(convergence_sweep(problem, law, ns, replications, seed)?.mean_field)
}

/// Pathwise cost gap sweep.
pub fn cost_gap_sweep(problem: &ProblemSpec, law: &FeedbackLaw, ns: &[usize], replications: usize, seed: u64) -> Result<ConvergenceReport> {
    Ok(convergence_sweep(problem, law, ns, replications, seed)?.cost_gap)
}

/// Named alternative policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub name: String,
    pub policy: Policy,
}

/// Alternative strategies tried by a deviating agent.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationFamily {
    members: Vec<Member>,
}

impl PerturbationFamily {
    pub fn new(members: Vec<Member>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Invalid("perturbation family must not be empty".into()));
        }
        Ok(Self { members })
    }

    /// Gain scalings `κ`, constant offsets `±c` in every control entry and
    /// the zero control.
    pub fn standard(m: usize, kappas: &[f64], offsets: &[f64]) -> Result<Self> {
        let mut members: Vec<Member> = kappas
            .iter()
            .map(|&k| Member {
                name: format!("kappa={k}"),
                policy: Policy::scaled(k),
            })
            .collect();
        for &c in offsets {
            members.push(Member {
                name: format!("offset={c:+}"),
                policy: Policy::shifted(linalg::col(&vec![c; m])),
            });
        }
        members.push(Member {
            name: "zero".into(),
            policy: Policy::Zero,
        });
        Self::new(members)
    }

    /// `κ ∈ {0, 0.5, 0.9, 1.1, 1.5}`, offsets `±0.5` and zero.
    pub fn default_for(m: usize) -> Self {
        Self::standard(m, &[0.0, 0.5, 0.9, 1.1, 1.5], &[0.5, -0.5]).expect("family is nonempty")
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }
}

/// Cost improvement of one deviation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Improvement {
    pub name: String,
    /// `𝒥₀(ū) − 𝒥₀(u, ū⁻⁰)`; positive means the deviation pays.
    pub estimate: Estimate,
}

/// Outcome of an ε-Nash probe at one population size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NashReport {
    pub agents: usize,
    /// `max(0, largest mean improvement)`.
    pub epsilon: f64,
    /// Standard error of the member attaining the largest improvement.
    pub epsilon_se: f64,
    pub improvements: Vec<Improvement>,
}

/// Lets agent `0` deviate to each family member while the others keep the
/// equilibrium strategy, and compares its cost on shared noise.
pub fn epsilon_nash_probe(
    problem: &ProblemSpec,
    law: &FeedbackLaw,
    agents: usize,
    family: &PerturbationFamily,
    replications: usize,
    seed: u64,
) -> Result<NashReport> {
    let cfg = PopulationConfig::new(agents, replications, seed)?;
    let quiet = Recording {
        agents: 0,
        paths: false,
        decomposition: false,
    };
    let base = Simulation::new(problem, law).record(quiet).run(&cfg)?.cost_samples(0, 0, false);
    let mut improvements = Vec::with_capacity(family.members.len());
    for member in &family.members {
        let dev = Simulation::new(problem, law)
            .deviator(member.policy.clone())
            .record(quiet)
            .run(&cfg)?
            .cost_samples(0, 0, false);
        let diff: Vec<f64> = base.iter().zip(&dev).map(|(a, b)| a - b).collect();
        improvements.push(Improvement {
            name: member.name.clone(),
            estimate: Estimate::from_samples(&diff),
        });
    }
    let best = improvements
        .iter()
        .max_by(|a, b| a.estimate.mean.total_cmp(&b.estimate.mean))
        .expect("family is nonempty");
    Ok(NashReport {
        agents,
        epsilon: best.estimate.mean.max(0.0),
        epsilon_se: best.estimate.se,
        improvements,
    })
}

/// Least-squares `c` in `ε̂_N ≈ c/√N`.
pub fn fit_sqrt_rate(reports: &[NashReport]) -> f64 {
    let num: f64 = reports.iter().map(|r| r.epsilon / (r.agents as f64).sqrt()).sum();
    let den: f64 = reports.iter().map(|r| 1.0 / r.agents as f64).sum();
    num / den
}

/// Ratio estimates of the convexity probe.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvexityReport {
    /// Smallest mean ratio `J⁰(u) / ∫|u|²` over the sampled controls.
    pub lambda_hat: f64,
    /// Standard error of the minimizing ratio.
    pub se: f64,
    pub ratios: Vec<Estimate>,
}

/// Number of cosine modes in a random test control.
const MODES: usize = 4;

/// Random deterministic control `u(t) = Σⱼ aⱼ cos(jπt/T)` per entry with
/// standard normal coefficients, redrawn until it is not identically zero.
pub fn random_control(problem: &ProblemSpec, seed: u64, index: u64) -> NodePath {
    let grid = problem.grid;
    let m = problem.dims.m;
    let mut rng = noise::stream(seed, index, 0, Channel::Aux);
    loop {
        let coef: Vec<f64> = (0..m * MODES).map(|_| rng.sample(StandardNormal)).collect();
        let values: Vec<_> = (0..grid.nodes())
            .map(|k| {
                let s = grid.time(k) / grid.horizon;
                let u: Vec<f64> = (0..m)
                    .map(|i| (0..MODES).map(|j| coef[i * MODES + j] * (j as f64 * std::f64::consts::PI * s).cos()).sum())
                    .collect();
                linalg::col(&u)
            })
            .collect();
        let energy: f64 = values.iter().map(|v| v.norm_squared()).sum::<f64>() * grid.dt();
        if energy > 1e-8 {
            return NodePath {
                grid,
                values,
            };
        }
    }
}

/// `∫|u|² dt` by the trapezoid rule.
pub fn control_energy(u: &NodePath) -> f64 {
    let k = u.values.len() - 1;
    let dt = u.grid.dt();
    u.values
        .iter()
        .enumerate()
        .map(|(i, v)| if i == 0 || i == k { 0.5 } else { 1.0 } * v.norm_squared())
        .sum::<f64>()
        * dt
}

/// Homogeneous cost `½[∫⟨Q𝕏,𝕏⟩ + ⟨Ru,u⟩ + 2⟨Su,𝕏⟩ dt + ⟨L_T𝕏_T,𝕏_T⟩]` of one
/// common-noise path of `d𝕏 = (A𝕏 + Bu)dt + (D𝕏 + Fu)dW⁰`, `𝕏₀ = 0`.
pub fn homogeneous_cost(problem: &ProblemSpec, u: &NodePath, dw0: &[f64]) -> f64 {
    let grid = problem.grid;
    let dt = grid.dt();
    let mut x = vec![0.0; problem.dims.n];
    let mut total = 0.0;
    for k in 0..=grid.steps {
        let c = problem.at(k);
        let xm = linalg::col(&x);
        let uk = u.at(k);
        let stage = linalg::dot(&(c.Q * &xm), &xm) + linalg::dot(&(c.R * uk), uk) + 2.0 * linalg::dot(&(c.S * uk), &xm);
        total += if k == 0 || k == grid.steps { 0.5 } else { 1.0 } * dt * stage;
        if k == grid.steps {
            total += linalg::dot(&(&problem.cost.L_T * &xm), &xm);
            break;
        }
        let (a, b, d, f) = (Dense::new(c.A), Dense::new(c.B), Dense::new(c.D), Dense::new(c.F));
        let mut next = x.clone();
        a.apply_add(&x, dt, &mut next);
        b.apply_add(uk.as_slice(), dt, &mut next);
        d.apply_add(&x, dw0[k], &mut next);
        f.apply_add(uk.as_slice(), dw0[k], &mut next);
        x = next;
    }
    0.5 * total
}

/// Estimates `λ̂ = min_u J⁰(u) / ∫|u|²` over `controls` random controls, each
/// averaged over `replications` common-noise paths shared by all controls.
pub fn convexity_probe(problem: &ProblemSpec, controls: usize, replications: usize, seed: u64) -> Result<ConvexityReport> {
    if controls == 0 || replications == 0 {
        return Err(Error::Invalid("convexity probe needs at least one control and one replication".into()));
    }
    let grid = problem.grid;
    let paths: Vec<Vec<f64>> = (0..replications as u64)
        .map(|r| Increments::keyed(seed, r, noise::COMMON, Channel::W0, 1, grid.dt()).take_path(grid.steps))
        .collect();
    use rayon::prelude::*;
    let ratios: Vec<Estimate> = (0..controls as u64)
        .into_par_iter()
        .map(|j| {
            let u = random_control(problem, seed, j);
            let energy = control_energy(&u);
            let samples: Vec<f64> = paths.iter().map(|w| homogeneous_cost(problem, &u, w) / energy).collect();
            Estimate::from_samples(&samples)
        })
        .collect();
    let best = ratios
        .iter()
        .min_by(|a, b| a.mean.total_cmp(&b.mean))
        .expect("at least one control");
    Ok(ConvexityReport {
        lambda_hat: best.mean,
        se: best.se,
        ratios: ratios.clone(),
    })
}

/// Lower-envelope constant of the relaxed cost over a deviation family.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnvelopeReport {
    pub agents: usize,
    pub lambda: f64,
    /// Smallest `C₀ ≥ 0` with `(λ − C₀/N)E∫|u|² − C₀ ≤ 𝒥ᴾ` on every member.
    pub c0: f64,
    /// `(name, E∫|u|², 𝒥ᴾ)` per member.
    pub samples: Vec<(String, f64, f64)>,
}

/// For each family member, agent `0` deviates and its relaxed cost and
/// control energy are estimated; reports the envelope constant they
/// require.
#[allow(clippy::too_many_arguments)]
pub fn envelope_probe(
    problem: &ProblemSpec,
    law: &FeedbackLaw,
    comp: &CompensatorPath,
    agents: usize,
    family: &PerturbationFamily,
    lambda: f64,
    replications: usize,
    seed: u64,
) -> Result<EnvelopeReport> {
    let cfg = PopulationConfig::new(agents, replications, seed)?;
    let costs = vec![relaxed_cost(problem, comp), QuadraticCost::control_energy(problem)];
    let mut samples = Vec::new();
    let mut c0: f64 = 0.0;
    let nf = agents as f64;
    for member in &family.members {
        let result: PopulationResult = Simulation::new(problem, law)
            .deviator(member.policy.clone())
            .costs(costs.clone())
            .record(Recording {
                agents: 0,
                paths: false,
                decomposition: false,
            })
            .run(&cfg)?;
        let jp = Estimate::from_samples(&result.cost_samples(0, 0, false)).mean;
        // The stored energy carries the factor ½ of every cost functional.
        let energy = 2.0 * Estimate::from_samples(&result.cost_samples(1, 0, false)).mean;
        c0 = c0.max((lambda * energy - jp) / (1.0 + energy / nf));
        samples.push((member.name.clone(), energy, jp));
    }
    Ok(EnvelopeReport {
        agents,
        lambda,
        c0,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoefficientPath, Dimensions, GridSpec};
    use crate::riccati::{solve, SolverOptions};

    fn s(v: f64) -> linalg::Mat {
        linalg::scalar(v)
    }

    #[test]
    fn fit_recovers_exact_power() {
        let ns = [10, 100, 1000, 10000];
        let gaps: Vec<f64> = ns.iter().map(|&n| 3.0 * (n as f64).powf(-0.5)).collect();
        let fit = fit_loglog(&ns, &gaps).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(fit.half_width < 1e-6);
    }

    #[test]
    fn fit_refuses_too_few_points() {
        assert!(fit_loglog(&[10, 100], &[1.0, 0.1]).is_err());
        assert!(fit_loglog(&[10, 10, 10], &[1.0, 0.1, 0.2]).is_err());
        assert!(fit_loglog(&[10, 100, 1000], &[1.0, 0.0, 0.2]).is_err());
    }

    #[test]
    fn confidence_matches_t_table() {
        // Residuals (e, −2e, e) sum to zero against the exact slope, so
        // s² = 6e² with one degree of freedom and t(0.975, 1) = 12.7062047.
        let ns = [1usize, 10, 100];
        let x: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
        let e = 0.1;
        let y = [-x[0] + e, -x[1] - 2.0 * e, -x[2] + e];
        let gaps: Vec<f64> = y.iter().map(|v| v.exp()).collect();
        let fit = fit_loglog(&ns, &gaps).unwrap();
        let mx = x.iter().sum::<f64>() / 3.0;
        let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
        let s2 = 6.0 * e * e;
        assert!((fit.slope + 1.0).abs() < 1e-12);
        assert!((fit.half_width - 12.7062047 * (s2 / sxx).sqrt()).abs() < 1e-5);
    }

    fn instance(noise: bool) -> ProblemSpec {
        let grid = GridSpec::new(1.0, 20).unwrap();
        let mut p = ProblemSpec::zero(Dimensions::new(1, 1, 1).unwrap(), grid);
        let set = |v: f64| CoefficientPath::constant(grid, s(v));
        p.dynamics.A = set(0.1);
        p.dynamics.A_bar = set(0.2);
        p.dynamics.B = set(1.0);
        p.dynamics.b = set(0.1);
        p.observation.G = set(1.0);
        p.observation.sigma_tilde = set(0.5);
        p.cost.Q = set(1.0);
        p.cost.R = set(1.0);
        p.cost.L_T = s(1.0);
        p.meanfield.alpha1 = 0.5;
        p.x0 = s(1.0);
        if noise {
            p.dynamics.sigma = set(0.3);
            p.dynamics.F = set(0.2);
        }
        p
    }

    fn law(p: &ProblemSpec) -> FeedbackLaw {
        FeedbackLaw::from_solution(&solve(p, &SolverOptions::default()).unwrap()).unwrap()
    }

    #[test]
    fn noise_free_gaps_vanish() {
        let p = instance(false);
        let r = convergence_sweep(&p, &law(&p), &[2, 4, 8], 2, 1).unwrap();
        for rep in [&r.mean_field, &r.per_agent, &r.cost_gap] {
            assert!(rep.points.iter().all(|pt| pt.estimate.mean < 1e-20));
            assert!(rep.fit.is_none());
        }
    }

    #[test]
    fn sweep_refuses_short_lists() {
        let p = instance(true);
        assert!(convergence_sweep(&p, &law(&p), &[10], 2, 1).is_err());
        assert!(convergence_sweep(&p, &law(&p), &[10, 5, 20], 2, 1).is_err());
    }

    #[test]
    fn equilibrium_member_has_zero_improvement() {
        let p = instance(true);
        let family = PerturbationFamily::new(vec![Member {
            name: "self".into(),
            policy: Policy::equilibrium(),
        }])
        .unwrap();
        let r = epsilon_nash_probe(&p, &law(&p), 5, &family, 4, 2).unwrap();
        assert_eq!(r.improvements[0].estimate.mean, 0.0);
        assert_eq!(r.epsilon, 0.0);
    }

    #[test]
    fn default_family_shape() {
        let f = PerturbationFamily::default_for(2);
        assert_eq!(f.members().len(), 8);
        assert!(PerturbationFamily::new(Vec::new()).is_err());
    }

    #[test]
    fn random_controls_are_nonzero_and_reproducible() {
        let p = instance(true);
        for j in 0..20 {
            let u = random_control(&p, 4, j);
            assert!(control_energy(&u) > 1e-8);
            assert_eq!(u, random_control(&p, 4, j));
        }
    }

    /// Exact expectation of the Euler scheme's homogeneous cost, from the
    /// recursion for the first two moments of a scalar state.
    fn exact_scalar(p: &ProblemSpec, u: &NodePath) -> f64 {
        let grid = p.grid;
        let dt = grid.dt();
        let (mut mean, mut second) = (0.0, 0.0);
        let mut total = 0.0;
        for k in 0..=grid.steps {
            let c = p.at(k);
            let v = |m: &linalg::Mat| m[(0, 0)];
            let uk = u.at(k)[(0, 0)];
            let stage = v(c.Q) * second + v(c.R) * uk * uk + 2.0 * v(c.S) * uk * mean;
            total += if k == 0 || k == grid.steps { 0.5 } else { 1.0 } * dt * stage;
            if k == grid.steps {
                total += v(&p.cost.L_T) * second;
                break;
            }
            let (a, b, d, f) = (v(c.A), v(c.B), v(c.D), v(c.F));
            let g = 1.0 + a * dt;
            let next_second = g * g * second + 2.0 * g * b * uk * dt * mean + (b * uk * dt).powi(2)
                + dt * (d * d * second + 2.0 * d * f * uk * mean + f * f * uk * uk);
            mean = g * mean + b * uk * dt;
            second = next_second;
        }
        0.5 * total
    }

    #[test]
    fn homogeneous_cost_matches_moment_recursion() {
        let mut p = instance(true);
        p.dynamics.D = CoefficientPath::constant(p.grid, s(0.4));
        p.cost.S = CoefficientPath::constant(p.grid, s(0.3));
        let u = random_control(&p, 9, 0);
        let exact = exact_scalar(&p, &u);
        let samples: Vec<f64> = (0..4000)
            .map(|r| homogeneous_cost(&p, &u, &Increments::keyed(5, r, noise::COMMON, Channel::W0, 1, p.grid.dt()).take_path(20)))
            .collect();
        let est = Estimate::from_samples(&samples);
        assert!((est.mean - exact).abs() <= 3.0 * est.se, "{est:?} vs {exact}");
    }

    #[test]
    fn pd_convexity_bound() {
        let mut p = instance(true);
        p.cost.Q = CoefficientPath::zeros(p.grid, 1, 1);
        let r = convexity_probe(&p, 10, 20, 3).unwrap();
        assert!(r.lambda_hat >= 0.5 - 1e-12);
    }
}
