//! Configuration round trips and seed determinism across the public API.

use lqmfg::meanfield::FeedbackLaw;
use lqmfg::model::{self, ProblemSpec};
use lqmfg::population::{PopulationConfig, Recording, Simulation};
use lqmfg::portfolio::{self, PortfolioParams};
use lqmfg::riccati::{self, SolverOptions};

fn config(name: &str) -> ProblemSpec {
    model::load_problem_file(std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)).unwrap()
}

#[test]
fn configs_round_trip_through_text() {
    for name in ["portfolio.toml", "indefinite_scalar.toml", "coupled_2x2.toml"] {
        let p = config(name);
        let again = model::load_problem(&model::to_config_text(&p)).unwrap();
        assert_eq!(p, again, "{name}");
    }
}

#[test]
fn portfolio_config_matches_builtin_parameters() {
    let p = config("portfolio.toml");
    assert_eq!(p, PortfolioParams::default().to_problem(portfolio::DEFAULT_STEPS).unwrap());
    assert_eq!(PortfolioParams::from_problem(&p), Some(PortfolioParams::default()));
}

#[test]
fn population_runs_repeat_exactly() {
    let problem = config("coupled_2x2.toml").with_steps(40).unwrap();
    let law = FeedbackLaw::from_solution(&riccati::solve(&problem, &SolverOptions::default()).unwrap()).unwrap();
    let cfg = PopulationConfig::new(6, 3, 17).unwrap();
    let run = || {
        Simulation::new(&problem, &law)
            .record(Recording {
                agents: 2,
                paths: true,
                decomposition: false,
            })
            .run(&cfg)
            .unwrap()
    };
    let a = run();
    let b = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
    assert_eq!(a.replications, b.replications);
    let other = Simulation::new(&problem, &law).run(&PopulationConfig::new(6, 3, 18).unwrap()).unwrap();
    assert_ne!(a.replications[0].x_avg, other.replications[0].x_avg);
}
