// Simulates a population next to its limiting copies, then checks the
// completing-square identity and the reconstructed adjoint.
//
// Run with `cargo run --release --example population`.

use lqmfg::meanfield::FeedbackLaw;
use lqmfg::population::{self, Estimate, Policy, PopulationConfig, Recording, Simulation};
use lqmfg::portfolio::{self, PortfolioParams};
use lqmfg::riccati::{self, SolverOptions};
use lqmfg::{model, Result};

pub fn run() -> Result<()> {
    let problem = model::load_problem_file(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/indefinite_scalar.toml"))?;
    let sol = riccati::solve(&problem, &SolverOptions::default())?;
    let law = FeedbackLaw::from_solution(&sol)?;
    let cfg = PopulationConfig::new(50, 8, 11)?;
    let result = Simulation::new(&problem, &law)
        .record(Recording {
            agents: 5,
            paths: true,
            decomposition: true,
        })
        .run(&cfg)?;
    let gaps: Vec<f64> = result.replications.iter().map(|r| r.sup_gap_mean).collect();
    let gap = Estimate::from_samples(&gaps);
    println!("indefinite instance, N = 50: E sup|xbar_N - x0|^2 = {:.3e} ± {:.1e}", gap.mean, gap.se);
    let cost_n = population::evaluate_cost_n(&result, 0, 0);
    let cost_lim = population::evaluate_cost_limit(&result, 0, 0);
    println!("  agent 0 cost: N-agent {:.4} ± {:.1e}, limit {:.4} ± {:.1e}", cost_n.mean, cost_n.se, cost_lim.mean, cost_lim.se);
    println!("  stationarity residual {:.2e}", population::stationarity_max(&problem, &sol, &result)?);
    let defect = population::adjoint_consistency(&problem, &sol, &result)?;
    println!("  adjoint terminal defect {:.3e} over {} paths", defect.filtered.mean, defect.paths);

    let params = PortfolioParams::default();
    let problem = params.to_problem(50)?;
    let closed = portfolio::closed_form(&params, problem.grid)?;
    let law = portfolio::feedback_law(&closed)?;
    let comp = portfolio::compensator(&params, problem.grid);
    let report = population::equivalence_check(&problem, &law, &comp, Policy::equilibrium(), &PopulationConfig::new(20, 200, 11)?)?;
    println!("mean-variance instance, J - J^P - P0 x^2/2:");
    println!("  limit {:.2e} ± {:.1e}, N-agent {:.2e} ± {:.1e}", report.limit.mean, report.limit.se, report.n_agent.mean, report.n_agent.se);
    Ok(())
}

fn main() -> Result<()> {
    run()
}
