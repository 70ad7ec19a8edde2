// Reproduces the mean-variance figures: the population averages of wealth
// and investment against their limits.
//
// Run with `cargo run --release --example portfolio_figures`.

use lqmfg::portfolio::{self, PortfolioParams};
use lqmfg::Result;

pub fn run() -> Result<()> {
    let out = std::env::temp_dir().join("lqmfg_figures");
    let report = portfolio::reproduce_figures(&PortfolioParams::default(), 200, 500, 1, &out)?;
    println!(
        "N = {}: RMS state gap {:.4}, RMS control gap {:.4}",
        report.agents, report.rms_state_gap, report.rms_control_gap
    );
    println!("wrote {} and {}", report.state_csv.display(), report.control_csv.display());
    Ok(())
}

fn main() -> Result<()> {
    run()
}
