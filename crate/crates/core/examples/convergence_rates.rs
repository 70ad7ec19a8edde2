// Sweeps the population size and fits log-log slopes of the mean-field
// and cost gaps.
//
// Run with `cargo run --release --example convergence_rates`.

use lqmfg::portfolio::{self, PortfolioParams};
use lqmfg::{nash, Result};

pub fn run() -> Result<()> {
    let params = PortfolioParams::default();
    let problem = params.to_problem(100)?;
    let law = portfolio::feedback_law(&portfolio::closed_form(&params, problem.grid)?)?;
    let sweep = nash::convergence_sweep(&problem, &law, &[20, 80, 320], 8, 3)?;
    for report in [&sweep.mean_field, &sweep.cost_gap] {
        println!("{}", report.quantity);
        for p in &report.points {
            println!("  N = {:4}: {:.3e} ± {:.1e}", p.agents, p.estimate.mean, p.estimate.se);
        }
        if let Some(fit) = &report.fit {
            println!("  slope {:.2} ± {:.2}", fit.slope, fit.half_width);
        }
    }
    let out = std::env::temp_dir().join("lqmfg_convergence.csv");
    sweep.write_csv(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    run()
}
