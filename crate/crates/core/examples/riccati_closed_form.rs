// Solves the Riccati system on the indefinite scalar instance and checks
// the general solver against the explicit mean-variance solution.
//
// Run with `cargo run --example riccati_closed_form`.

use lqmfg::portfolio::{self, PortfolioParams};
use lqmfg::riccati::{self, SolverOptions};
use lqmfg::{model, Result};

pub fn run() -> Result<()> {
    let opts = SolverOptions::default();

    let problem = model::load_problem_file(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/indefinite_scalar.toml"))?;
    let sol = riccati::solve(&problem, &opts)?;
    let min_cal_r = sol.cal_r.values.iter().map(|r| r[(0, 0)]).fold(f64::INFINITY, f64::min);
    println!("indefinite scalar instance, R = {}", problem.cost.R.at(0)[(0, 0)]);
    println!(
        "  Pi(0) = {:.6}, Sigma(0) = {:.6}, rho(0) = {:.6}, min R + F'PiF = {:.4}",
        sol.pi.at(0)[(0, 0)],
        sol.sigma.at(0)[(0, 0)],
        sol.rho.at(0)[(0, 0)],
        min_cal_r
    );

    let params = PortfolioParams::default();
    let problem = params.to_problem(portfolio::DEFAULT_STEPS)?;
    let pi = riccati::solve_pi(&problem, &opts)?;
    let closed = portfolio::closed_form(&params, problem.grid)?;
    let err = pi.max_abs_diff(&closed.pi);
    println!("mean-variance instance");
    println!("  Pi(0) = {:.8}, closed form {:.8}, max error {err:.2e}", pi.at(0)[(0, 0)], closed.pi_at(0.0));
    println!("  rho(0) = {:.8}, u0(0) = {:.6}", closed.rho_at(0.0), closed.u0_at(0.0));
    match riccati::solve_sigma(&problem, &opts) {
        Err(e) => println!("  general Sigma solver: {e}"),
        Ok(_) => println!("  general Sigma solver succeeded"),
    }
    assert!(err < 1e-6);
    Ok(())
}

fn main() -> Result<()> {
    run()
}
