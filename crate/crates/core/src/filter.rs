//! Conditionally Gaussian Kalman-Bucy filter.
//!
//! The common noise `W⁰` is recovered exactly from the public observation
//! `θ`, so conditional on `θ` the agent's state and observation are jointly
//! Gaussian. With `x̂` the conditional mean and `P_f` the conditional
//! covariance, one Euler step reads
//!
//! ```text
//! K   = (P_f Gᵀ + σ̄σ̃ᵀ)(σ̃σ̃ᵀ)⁻¹
//! dν  = dY − (G x̂ + H u + Ḡ x⁰ + H̄ u⁰ + b̃) dt
//! x̂  += (A x̂ + B u + Ā x⁰ + B̄ u⁰ + b) dt + (D x̂ + F u + D̄ x⁰ + F̄ u⁰ + b̄) dW⁰ + K dν
//! P_f += (A P_f + P_f Aᵀ + D P_f Dᵀ + σσᵀ + σ̄σ̄ᵀ − K σ̃σ̃ᵀ Kᵀ) dt + (D P_f + P_f Dᵀ) dW⁰
//! ```
//!
//! followed by a projection of `P_f` onto the positive semidefinite cone.
//! The covariance and gain do not depend on the controls, so a population
//! sharing one `θ` path shares one covariance path.

#![allow(non_snake_case)]

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Dense, Mat};
use crate::model::ProblemSpec;
use crate::noise::{self, Channel, Increments};

/// Threshold below which the covariance is projected.
pub const PSD_THRESHOLD: f64 = -1e-12;

/// Conditional mean and covariance of one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterState {
    pub xhat: Mat,
    pub pf: Mat,
}

impl FilterState {
    /// State known exactly: `x̂ = x`, `P_f = 0`.
    pub fn known(x: &Mat) -> Self {
        Self {
            xhat: x.clone(),
            pf: linalg::zeros(x.nrows(), x.nrows()),
        }
    }
}

/// Observation increments over one step.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationIncrement {
    /// Individual observation increment `dY`.
    pub dy: Mat,
    /// Common observation increment `dθ`.
    pub dtheta: f64,
    /// Common observation level `θ` at the start of the step.
    pub theta: f64,
    pub dt: f64,
}

/// Common-noise increment implied by `θ`: `(dθ − (Iθ + b̌)dt) / σ̌`.
pub fn recover_dw0(dtheta: f64, theta: f64, dt: f64, t: f64, problem: &ProblemSpec) -> Result<f64> {
    let k = problem.grid.piece(t)?;
    let c = problem.at(k);
    if c.sigma_check.abs() < problem.common.floor || !c.sigma_check.is_finite() {
        return Err(Error::DegenerateCommonObservation {
            t,
            value: c.sigma_check.abs(),
        });
    }
    Ok((dtheta - (c.I * theta + c.b_check) * dt) / c.sigma_check)
}

/// `(σ̃σ̃ᵀ)⁻¹` at node `k`.
pub fn observation_precision(problem: &ProblemSpec, k: usize) -> Result<Mat> {
    let st = problem.at(k).sigma_tilde;
    linalg::inverse(&(st * st.transpose())).ok_or(Error::DegenerateObservation {
        t: problem.grid.time(k),
    })
}

/// Filter gain `K = (P_f Gᵀ + σ̄σ̃ᵀ)(σ̃σ̃ᵀ)⁻¹` at node `k`.
pub fn gain(problem: &ProblemSpec, k: usize, pf: &Mat) -> Result<Mat> {
    let c = problem.at(k);
    let prec = observation_precision(problem, k)?;
    Ok((pf * c.G.transpose() + c.sigma_bar * c.sigma_tilde.transpose()) * prec)
}

/// One Euler step of the covariance equation; returns the new covariance
/// and the gain used.
pub fn covariance_step(problem: &ProblemSpec, k: usize, pf: &Mat, dw0: f64, dt: f64) -> Result<(Mat, Mat)> {
    let c = problem.at(k);
    let K = gain(problem, k, pf)?;
    let sst = c.sigma_tilde * c.sigma_tilde.transpose();
    let drift = c.A * pf + pf * c.A.transpose() + c.D * pf * c.D.transpose()
        + c.sigma * c.sigma.transpose()
        + c.sigma_bar * c.sigma_bar.transpose()
        - &K * sst * K.transpose();
    let next = pf + drift * dt + (c.D * pf + pf * c.D.transpose()) * dw0;
    Ok((linalg::psd_project(&next, PSD_THRESHOLD), K))
}

/// Covariance path over the grid for given common-noise increments, with
/// the gain used on every step.
pub fn covariance_path(problem: &ProblemSpec, dw0: &[f64]) -> Result<(Vec<Mat>, Vec<Mat>)> {
    let grid = problem.grid;
    if dw0.len() != grid.steps {
        return Err(Error::Precondition(format!(
            "need {} common-noise increments, got {}",
            grid.steps,
            dw0.len()
        )));
    }
    let n = problem.dims.n;
    let mut pfs = Vec::with_capacity(grid.nodes());
    let mut gains = Vec::with_capacity(grid.steps);
    let mut pf = linalg::zeros(n, n);
    for (k, w) in dw0.iter().enumerate() {
        let (next, K) = covariance_step(problem, k, &pf, *w, grid.dt())?;
        pfs.push(std::mem::replace(&mut pf, next));
        gains.push(K);
    }
    pfs.push(pf);
    Ok((pfs, gains))
}

/// One Euler step of the filter at time `t`.
pub fn filter_step(
    state: &FilterState,
    inc: &ObservationIncrement,
    u: &Mat,
    x0: &Mat,
    u0: &Mat,
    t: f64,
    problem: &ProblemSpec,
) -> Result<FilterState> {
    let k = problem.grid.piece(t)?;
    let c = problem.at(k);
    let dt = inc.dt;
    let dw0 = recover_dw0(inc.dtheta, inc.theta, dt, t, problem)?;
    let (pf, K) = covariance_step(problem, k, &state.pf, dw0, dt)?;
    let x = &state.xhat;
    let innovation = &inc.dy - (c.G * x + c.H * u + c.G_bar * x0 + c.H_bar * u0 + c.b_tilde) * dt;
    let xhat = x
        + (c.A * x + c.B * u + c.A_bar * x0 + c.B_bar * u0 + c.b) * dt
        + (c.D * x + c.F * u + c.D_bar * x0 + c.F_bar * u0 + c.b_bar) * dw0
        + K * innovation;
    Ok(FilterState { xhat, pf })
}

/// Per-node comparison of the filter mean with a particle estimate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParticleReport {
    pub particles: usize,
    /// Largest `|x̂ − x̂_particle|` over nodes and components.
    pub max_abs_error: f64,
    /// Largest error in units of the particle standard error.
    pub max_z: f64,
    /// Smallest effective sample size seen.
    pub min_ess: f64,
    pub times: Vec<f64>,
    pub filter_mean: Vec<Vec<f64>>,
    pub particle_mean: Vec<Vec<f64>>,
    pub particle_se: Vec<Vec<f64>>,
}

/// Compares the filter mean against a fully adapted particle filter on the
/// Euler-discretized model.
///
/// One true path is simulated with zero control and the inputs `x⁰ ≡ x`,
/// `u⁰ = 0`; the filter and a cloud of `n_particles` particles then process
/// the same observation path. Each particle step weights by the Gaussian
/// likelihood of `dY` given the particle, resamples systematically when the
/// effective sample size drops below half the cloud, and moves particles
/// from the Gaussian law of the state increment conditional on `dY`.
pub fn filter_consistency_probe(problem: &ProblemSpec, n_particles: usize, seed: u64) -> Result<ParticleReport> {
    let grid = problem.grid;
    let (n, d, m) = (problem.dims.n, problem.dims.d, problem.dims.m);
    let dt = grid.dt();
    let x = problem.x0.clone();
    let u0 = linalg::zeros(m, 1);
    let dw0 = Increments::keyed(seed, 0, noise::COMMON, Channel::W0, 1, dt).take_path(grid.steps);
    let mut w_state = Increments::keyed(seed, 0, 0, Channel::W, d, dt);
    let mut w_obs = Increments::keyed(seed, 0, 0, Channel::WBar, d, dt);
    let mut rng = noise::stream(seed, 1, 0, Channel::Aux);

    let mut truth = x.clone();
    let mut state = FilterState::known(&x);
    let mut cloud = vec![0.0; n_particles * n];
    for p in cloud.chunks_mut(n) {
        p.copy_from_slice(x.as_slice());
    }
    let mut logw = vec![0.0; n_particles];
    let mut report = ParticleReport {
        particles: n_particles,
        max_abs_error: 0.0,
        max_z: 0.0,
        min_ess: n_particles as f64,
        times: vec![0.0],
        filter_mean: vec![x.as_slice().to_vec()],
        particle_mean: vec![x.as_slice().to_vec()],
        particle_se: vec![vec![0.0; n]],
    };
    let mut theta = 0.0;
    let mut dw = vec![0.0; d];
    let mut dwb = vec![0.0; d];
    for k in 0..grid.steps {
        let t = grid.time(k);
        let c = problem.at(k);
        w_state.fill(&mut dw);
        w_obs.fill(&mut dwb);
        let dwm = linalg::col(&dw);
        let dwbm = linalg::col(&dwb);
        let drift_in = c.A_bar * &x + c.b;
        let diff_in = c.D_bar * &x + c.b_bar;
        let obs_in = c.G_bar * &x + c.b_tilde;

        let dy = (c.G * &truth + &obs_in) * dt + c.sigma_tilde * &dwbm;
        let dtheta = (c.I * theta + c.b_check) * dt + c.sigma_check * dw0[k];
        let inc = ObservationIncrement {
            dy: dy.clone(),
            dtheta,
            theta,
            dt,
        };
        let zero_u = linalg::zeros(m, 1);
        state = filter_step(&state, &inc, &zero_u, &x, &u0, t, problem)?;
        truth = &truth
            + (c.A * &truth + &drift_in) * dt
            + (c.D * &truth + &diff_in) * dw0[k]
            + c.sigma * &dwm
            + c.sigma_bar * &dwbm;
        theta += dtheta;

        // Weighting by the likelihood of dY given the particle.
        let cyy = c.sigma_tilde * c.sigma_tilde.transpose() * dt;
        let cyy_inv = linalg::inverse(&cyy).ok_or(Error::DegenerateObservation { t })?;
        let cxy = c.sigma_bar * c.sigma_tilde.transpose() * dt;
        let cxx = (c.sigma * c.sigma.transpose() + c.sigma_bar * c.sigma_bar.transpose()) * dt;
        let regress = &cxy * &cyy_inv;
        let cond_cov = &cxx - &regress * cxy.transpose();
        let root = Dense::new(&linalg::sqrt_psd(&cond_cov));
        let (G, A, D) = (Dense::new(c.G), Dense::new(c.A), Dense::new(c.D));
        let prec = Dense::new(&cyy_inv);
        let reg = Dense::new(&regress);
        let dyv = dy.as_slice().to_vec();
        let obs_mean_in: Vec<f64> = (&obs_in * dt).as_slice().to_vec();
        let mut resid = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        for (p, lw) in cloud.chunks(n).zip(logw.iter_mut()) {
            for i in 0..n {
                resid[i] = dyv[i] - obs_mean_in[i];
            }
            G.apply_add(p, -dt, &mut resid);
            tmp.iter_mut().for_each(|v| *v = 0.0);
            prec.apply_add(&resid, 1.0, &mut tmp);
            *lw += -0.5 * resid.iter().zip(&tmp).map(|(a, b)| a * b).sum::<f64>();
        }
        let max_lw = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = logw.iter().map(|l| (l - max_lw).exp()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        if ess < 0.5 * n_particles as f64 {
            cloud = systematic_resample(&cloud, &weights, n, rng.random::<f64>());
            weights = vec![1.0 / n_particles as f64; n_particles];
            logw.iter_mut().for_each(|l| *l = 0.0);
        } else {
            for (l, w) in logw.iter_mut().zip(&weights) {
                *l = w.ln();
            }
        }

        // Move from the conditional law of the increment given dY.
        let drift_in_v = drift_in.as_slice().to_vec();
        let diff_in_v = diff_in.as_slice().to_vec();
        let mut z = vec![0.0; n];
        let mut step = vec![0.0; n];
        for p in cloud.chunks_mut(n) {
            for i in 0..n {
                resid[i] = dyv[i] - obs_mean_in[i];
                step[i] = drift_in_v[i] * dt + diff_in_v[i] * dw0[k];
            }
            G.apply_add(p, -dt, &mut resid);
            A.apply_add(p, dt, &mut step);
            D.apply_add(p, dw0[k], &mut step);
            reg.apply_add(&resid, 1.0, &mut step);
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            root.apply_add(&z, 1.0, &mut step);
            for i in 0..n {
                p[i] += step[i];
            }
        }

        let mut mean = vec![0.0; n];
        for (p, w) in cloud.chunks(n).zip(&weights) {
            for i in 0..n {
                mean[i] += w * p[i];
            }
        }
        let mut var = vec![0.0; n];
        for (p, w) in cloud.chunks(n).zip(&weights) {
            for i in 0..n {
                var[i] += w * (p[i] - mean[i]).powi(2);
            }
        }
        let se: Vec<f64> = var.iter().map(|v| (v / ess).sqrt()).collect();
        let fm = state.xhat.as_slice().to_vec();
        for i in 0..n {
            let err = (fm[i] - mean[i]).abs();
            report.max_abs_error = report.max_abs_error.max(err);
            if se[i] > 0.0 {
                report.max_z = report.max_z.max(err / se[i]);
            } else if err > 1e-12 {
                report.max_z = f64::INFINITY;
            }
        }
        report.min_ess = report.min_ess.min(ess);
        report.times.push(grid.time(k + 1));
        report.filter_mean.push(fm);
        report.particle_mean.push(mean);
        report.particle_se.push(se);
    }
    Ok(report)
}

fn systematic_resample(cloud: &[f64], weights: &[f64], n: usize, offset: f64) -> Vec<f64> {
    let count = weights.len();
    let mut out = Vec::with_capacity(cloud.len());
    let step = 1.0 / count as f64;
    let mut target = offset * step;
    let mut cum = weights[0];
    let mut j = 0;
    for _ in 0..count {
        while target > cum && j + 1 < count {
            j += 1;
            cum += weights[j];
        }
        out.extend_from_slice(&cloud[j * n..(j + 1) * n]);
        target += step;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoefficientPath, Dimensions, GridSpec};

    fn s(v: f64) -> Mat {
        linalg::scalar(v)
    }

    fn scalar(steps: usize) -> ProblemSpec {
        let grid = GridSpec::new(1.0, steps).unwrap();
        let mut p = ProblemSpec::zero(Dimensions::new(1, 1, 1).unwrap(), grid);
        p.observation.sigma_tilde = CoefficientPath::constant(grid, s(1.0));
        p
    }

    #[test]
    fn recover_common_noise() {
        let mut p = scalar(100);
        assert_eq!(recover_dw0(0.3, 5.0, 0.01, 0.0, &p).unwrap(), 0.3);
        p.common.b_check = CoefficientPath::constant(p.grid, s(0.05));
        let v = recover_dw0(0.0105, 0.0, 0.01, 0.0, &p).unwrap();
        assert!((v - 0.01).abs() < 1e-15);
        p.common.sigma_check = CoefficientPath::constant(p.grid, s(0.0));
        assert!(matches!(
            recover_dw0(0.0, 0.0, 0.01, 0.0, &p),
            Err(Error::DegenerateCommonObservation { .. })
        ));
    }

    #[test]
    fn noiseless_filter_follows_state() {
        let mut p = scalar(10);
        let g = p.grid;
        p.dynamics.A = CoefficientPath::constant(g, s(0.3));
        p.dynamics.B = CoefficientPath::constant(g, s(1.0));
        let mut st = FilterState::known(&s(2.0));
        let mut x = 2.0;
        for k in 0..10 {
            let inc = ObservationIncrement {
                dy: s(x * 0.0),
                dtheta: 0.0,
                theta: 0.0,
                dt: 0.1,
            };
            st = filter_step(&st, &inc, &s(0.5), &s(0.0), &s(0.0), g.time(k), &p).unwrap();
            x += (0.3 * x + 0.5) * 0.1;
        }
        assert_eq!(st.pf[(0, 0)], 0.0);
        assert!((st.xhat[(0, 0)] - x).abs() < 1e-14);
    }

    #[test]
    fn uninformative_observation_gives_zero_gain() {
        let mut p = scalar(10);
        p.dynamics.sigma = CoefficientPath::constant(p.grid, s(0.4));
        let K = gain(&p, 0, &s(0.7)).unwrap();
        assert_eq!(K[(0, 0)], 0.0);
    }

    #[test]
    fn singular_observation_noise() {
        let mut p = scalar(10);
        p.observation.sigma_tilde = CoefficientPath::constant(p.grid, s(0.0));
        assert!(matches!(gain(&p, 0, &s(0.0)), Err(Error::DegenerateObservation { .. })));
    }

    #[test]
    fn covariance_is_seed_free_without_multiplicative_noise() {
        let mut p = scalar(50);
        let g = p.grid;
        p.dynamics.A = CoefficientPath::constant(g, s(0.06));
        p.dynamics.sigma = CoefficientPath::constant(g, s(0.5));
        p.observation.G = CoefficientPath::constant(g, s(1.0));
        let a = Increments::keyed(1, 0, noise::COMMON, Channel::W0, 1, g.dt()).take_path(50);
        let b = Increments::keyed(2, 0, noise::COMMON, Channel::W0, 1, g.dt()).take_path(50);
        assert_eq!(covariance_path(&p, &a).unwrap().0, covariance_path(&p, &b).unwrap().0);
    }

    #[test]
    fn covariance_stays_psd_with_multiplicative_noise() {
        let mut p = scalar(200);
        let g = p.grid;
        p.dynamics.D = CoefficientPath::constant(g, s(1.5));
        p.dynamics.sigma = CoefficientPath::constant(g, s(0.1));
        p.observation.G = CoefficientPath::constant(g, s(2.0));
        let dw = Increments::keyed(4, 0, noise::COMMON, Channel::W0, 1, g.dt()).take_path(200);
        let (pfs, _) = covariance_path(&p, &dw).unwrap();
        assert!(pfs.iter().all(|m| m[(0, 0)] >= 0.0));
    }

    #[test]
    fn zero_noise_probe_is_exact() {
        let mut p = scalar(20);
        p.dynamics.A = CoefficientPath::constant(p.grid, s(0.2));
        p.x0 = s(1.0);
        let r = filter_consistency_probe(&p, 100, 3).unwrap();
        assert!(r.max_abs_error < 1e-12, "{}", r.max_abs_error);
    }

    #[test]
    fn systematic_resampling_keeps_heavy_particles() {
        let cloud = [0.0, 1.0, 2.0, 3.0];
        let out = systematic_resample(&cloud, &[0.0, 0.0, 1.0, 0.0], 1, 0.5);
        assert_eq!(out, vec![2.0; 4]);
    }
}
