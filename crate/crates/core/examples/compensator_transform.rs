// Certifies relaxed compensators and verifies that `Π = Πᴾ + P` for the
// shifted problem.
//
// Run with `cargo run --example compensator_transform`.

use lqmfg::compensator::{self, CompensatorPath};
use lqmfg::portfolio::{self, PortfolioParams};
use lqmfg::riccati::{self, SolverOptions};
use lqmfg::{linalg, model, Result};

pub fn run() -> Result<()> {
    let params = PortfolioParams::default();
    let problem = params.to_problem(200)?;
    let grid = problem.grid;
    let opts = SolverOptions::default();

    let comp = portfolio::compensator(&params, grid);
    let report = compensator::check_condition_rc(&problem, &comp)?;
    let worst = report.lhs_min_eig.iter().copied().fold(f64::INFINITY, f64::min);
    println!("closed-form P: satisfied = {}, smallest LHS eigenvalue {worst:.3e}", report.satisfied);
    let (_, gap) = riccati::verify_via_compensator(&problem, &comp, &opts)?;
    println!("  |Pi - (Pi^P + P)| = {gap:.3e}");

    let constant = CompensatorPath::constant(grid, linalg::scalar(params.gamma));
    let report = compensator::check_condition_rc(&problem, &constant)?;
    println!(
        "constant P = {}: satisfied = {}, LHS = {:.6}",
        params.gamma, report.satisfied, report.lhs_min_eig[0]
    );

    let problem = model::load_problem_file(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/indefinite_scalar.toml"))?;
    let pi = riccati::solve_pi(&problem, &opts)?;
    let half = CompensatorPath::from_nodes(problem.grid, pi.values.iter().map(|p| p * 0.5).collect())?;
    let report = compensator::check_condition_rc(&problem, &half)?;
    println!("indefinite instance, P = Pi/2: satisfied = {}", report.satisfied);
    if report.satisfied {
        let (_, gap) = riccati::verify_via_compensator(&problem, &half, &opts)?;
        println!("  |Pi - (Pi^P + P)| = {gap:.3e}");
    }
    assert!(gap < 1e-6);
    Ok(())
}

fn main() -> Result<()> {
    run()
}
