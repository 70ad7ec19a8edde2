//! Indefinite linear-quadratic partially observed mean-field games with
//! common noise.
//!
//! The crate covers the full numerical pipeline for such games:
//!
//! * [`model`] loads and validates problem instances from TOML.
//! * [`compensator`] assembles relaxed quadruples and certifies candidate
//!   relaxed compensators through the Riccati-type matrix inequality.
//! * [`riccati`] integrates the symmetric Riccati equation for `Π`, the
//!   asymmetric one for `Σ` and the linear ODE for `ρ` with positivity
//!   monitoring.
//! * [`filter`] runs the conditionally Gaussian Kalman-Bucy filter, with the
//!   common noise recovered from the public observation `θ`.
//! * [`meanfield`] turns a Riccati solution into the decentralized feedback
//!   law and the limiting state average `x⁰`.
//! * [`population`] simulates the `N`-agent system next to its limiting
//!   copies and evaluates cost functionals by Monte Carlo.
//! * [`nash`] runs convergence sweeps and ε-Nash perturbation probes.
//! * [`portfolio`] contains the mean-variance asset-liability instance with
//!   its closed-form solution.
//! * [`cli`] wires everything into the `mfg` command.
//!
//! ```no_run
//! use lqmfg::{model, riccati};
//!
//! let problem = model::load_problem_file("configs/indefinite_scalar.toml")?;
//! let solution = riccati::solve(&problem, &riccati::SolverOptions::default())?;
//! println!("Pi(0) = {}", solution.pi.at(0));
//! # Ok::<(), lqmfg::Error>(())
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod compensator;
pub mod cost;
pub mod error;
pub mod filter;
pub mod linalg;
pub mod meanfield;
pub mod model;
pub mod nash;
pub mod noise;
pub mod path;
pub mod population;
pub mod portfolio;
pub mod riccati;

pub use error::{Error, Result};
pub use linalg::Mat;
pub use model::{load_problem, validate, ProblemSpec};
