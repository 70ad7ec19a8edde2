// Runs the conditionally Gaussian filter against a particle filter on the
// same observation path.
//
// Run with `cargo run --release --example filter_check`.

use lqmfg::noise::{self, Channel, Increments};
use lqmfg::portfolio::PortfolioParams;
use lqmfg::{filter, Result};

pub fn run() -> Result<()> {
    let problem = PortfolioParams::default().to_problem(200)?;
    let grid = problem.grid;
    let dw0 = Increments::keyed(7, 0, noise::COMMON, Channel::W0, 1, grid.dt()).take_path(grid.steps);
    let (pf, _) = filter::covariance_path(&problem, &dw0)?;
    println!("filter variance: P_f(T/2) = {:.6}, P_f(T) = {:.6}", pf[grid.steps / 2][(0, 0)], pf[grid.steps][(0, 0)]);

    let report = filter::filter_consistency_probe(&problem, 5_000, 7)?;
    println!(
        "particle oracle with {} particles: max |error| = {:.3e}, max z = {:.2}, min ESS = {:.0}",
        report.particles, report.max_abs_error, report.max_z, report.min_ess
    );
    Ok(())
}

fn main() -> Result<()> {
    run()
}
