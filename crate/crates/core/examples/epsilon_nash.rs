// Probes unilateral deviations from the decentralized strategy and the
// uniform convexity of the homogeneous cost.
//
// Run with `cargo run --release --example epsilon_nash`.

use lqmfg::meanfield::FeedbackLaw;
use lqmfg::nash::{self, PerturbationFamily};
use lqmfg::riccati::{self, SolverOptions};
use lqmfg::{model, Result};

pub fn run() -> Result<()> {
    let problem = model::load_problem_file(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/indefinite_scalar.toml"))?;
    let problem = problem.with_steps(50)?;
    let law = FeedbackLaw::from_solution(&riccati::solve(&problem, &SolverOptions::default())?)?;
    let family = PerturbationFamily::default_for(problem.dims.m);
    let mut reports = Vec::new();
    for n in [10, 40] {
        let report = nash::epsilon_nash_probe(&problem, &law, n, &family, 40, 5)?;
        println!("N = {n}: epsilon = {:.3e} ± {:.1e}", report.epsilon, report.epsilon_se);
        for imp in &report.improvements {
            println!("  {:>14}: {:+.3e} ± {:.1e}", imp.name, imp.estimate.mean, imp.estimate.se);
        }
        reports.push(report);
    }
    println!("fitted c in epsilon ~ c/sqrt(N): {:.3}", nash::fit_sqrt_rate(&reports));

    let convexity = nash::convexity_probe(&problem, 10, 20, 5)?;
    println!("convexity: lambda = {:.4} ± {:.1e}", convexity.lambda_hat, convexity.se);
    Ok(())
}

fn main() -> Result<()> {
    run()
}
