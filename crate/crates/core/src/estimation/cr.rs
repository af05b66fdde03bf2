//! Maximum likelihood for distributional preferences under logit choice.
//!
//! With `u = pi_B + w * (pi_A - pi_B)`, where `w` is `rho` when B is ahead and
//! `sigma` when B is behind, the utility difference between B1 and B2 is
//! affine in (rho, sigma):
//!
//! `D = c0 + rho * c_rho + sigma * c_sigma`, and the choice index is `gamma * D`.
//!
//! That makes the gradient and Hessian cheap to write down exactly.

use serde::Serialize;

use crate::scalar::{sigmoid, softplus, Real};
use crate::types::{BinaryChoice, GroupCondition, Payoff};

use super::linalg::{spd_inverse, zeros, Matrix};
use super::optimize::{bfgs_minimize, BfgsOptions};
use super::{EstimationError, PreferenceDataset};

/// gamma is optimized as `GAMMA_SCALE * gamma` so all coordinates have similar curvature.
const GAMMA_SCALE: f64 = 100.0;
const GRID_WEIGHTS: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];
const GRID_GAMMA: [f64; 4] = [-0.1, -0.01, 0.01, 0.1];

#[derive(Debug, Clone, Serialize)]
pub struct CREstimate<T> {
    pub rho: T,
    pub sigma: T,
    pub gamma: T,
    pub loglik: T,
    /// Standard errors of (rho, sigma, gamma); `None` when the information matrix is singular.
    pub std_errors: Option<[T; 3]>,
    pub converged: bool,
    pub iterations: usize,
    pub n_obs: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupStdErrors<T> {
    pub rho_in: T,
    pub sigma_in: T,
    pub rho_out: T,
    pub sigma_out: T,
    pub gamma: T,
    /// Delta-method standard errors of the derived identity effects.
    pub a: T,
    pub b: T,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupCREstimate<T> {
    pub rho_in: T,
    pub sigma_in: T,
    pub rho_out: T,
    pub sigma_out: T,
    /// `(rho_in - rho_out) / rho_out`
    pub a: T,
    /// `(sigma_in - sigma_out) / sigma_out`
    pub b: T,
    /// Same differences relative to the ingroup weights.
    pub a_alt: T,
    pub b_alt: T,
    pub gamma: T,
    pub loglik: T,
    pub std_errors: Option<GroupStdErrors<T>>,
    pub converged: bool,
    pub iterations: usize,
    pub n_obs: usize,
}

struct Obs<T> {
    c0: T,
    c_rho: T,
    c_sigma: T,
    block: usize,
    chose_b1: bool,
    weight: T,
}

/// (own-payoff part, rho coefficient, sigma coefficient) of an option's utility.
fn utility_terms(p: Payoff) -> (f64, f64, f64) {
    let (a, b) = (p.a as f64, p.b as f64);
    if b > a {
        (b, a - b, 0.0)
    } else if b < a {
        (b, 0.0, a - b)
    } else {
        (b, 0.0, 0.0)
    }
}

fn observations<T: Real>(dataset: &PreferenceDataset, block_of: impl Fn(GroupCondition) -> Option<usize>) -> Vec<Obs<T>> {
    dataset
        .rows()
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            let block = block_of(r.condition)?;
            let (o1, r1, s1) = utility_terms(r.payoff_b1);
            let (o2, r2, s2) = utility_terms(r.payoff_b2);
            Some(Obs {
                c0: T::lit(o1 - o2),
                c_rho: T::lit(r1 - r2),
                c_sigma: T::lit(s1 - s2),
                block,
                chose_b1: r.choice == BinaryChoice::B1,
                weight: T::lit(dataset.weight(i)),
            })
        })
        .collect()
}

/// Parameter layout: `[rho_0, sigma_0, rho_1, sigma_1, ..., gamma]`.
fn loglik_gradient<T: Real>(obs: &[Obs<T>], theta: &[T]) -> (T, Vec<T>) {
    let k = theta.len();
    let gamma = theta[k - 1];
    let mut ll = T::zero();
    let mut grad = vec![T::zero(); k];
    for o in obs {
        let (rho, sigma) = (theta[2 * o.block], theta[2 * o.block + 1]);
        let diff = o.c0 + rho * o.c_rho + sigma * o.c_sigma;
        let d = gamma * diff;
        let (lp, resid) = if o.chose_b1 {
            (-softplus(-d), T::one() - sigmoid(d))
        } else {
            (-softplus(d), -sigmoid(d))
        };
        ll = ll + o.weight * lp;
        let wr = o.weight * resid;
        grad[2 * o.block] = grad[2 * o.block] + wr * gamma * o.c_rho;
        grad[2 * o.block + 1] = grad[2 * o.block + 1] + wr * gamma * o.c_sigma;
        grad[k - 1] = grad[k - 1] + wr * diff;
    }
    (ll, grad)
}

fn loglik_hessian<T: Real>(obs: &[Obs<T>], theta: &[T]) -> Matrix<T> {
    let k = theta.len();
    let gamma = theta[k - 1];
    let mut h = zeros::<T>(k);
    for o in obs {
        let (ir, is) = (2 * o.block, 2 * o.block + 1);
        let diff = o.c0 + theta[ir] * o.c_rho + theta[is] * o.c_sigma;
        let p = sigmoid(gamma * diff);
        let resid = if o.chose_b1 { T::one() - p } else { -p };
        let curv = o.weight * p * (T::one() - p);
        let idx = [ir, is, k - 1];
        let gd = [gamma * o.c_rho, gamma * o.c_sigma, diff];
        for a in 0..3 {
            for b in 0..3 {
                h[idx[a]][idx[b]] = h[idx[a]][idx[b]] - curv * gd[a] * gd[b];
            }
        }
        // second derivatives of the index: d2/(drho dgamma) = c_rho, d2/(dsigma dgamma) = c_sigma
        let wr = o.weight * resid;
        h[ir][k - 1] = h[ir][k - 1] + wr * o.c_rho;
        h[k - 1][ir] = h[k - 1][ir] + wr * o.c_rho;
        h[is][k - 1] = h[is][k - 1] + wr * o.c_sigma;
        h[k - 1][is] = h[k - 1][is] + wr * o.c_sigma;
    }
    h
}

/// Log-likelihood and its gradient in (rho, sigma, gamma) for the single-group model.
pub fn cr_loglik_and_gradient<T: Real>(dataset: &PreferenceDataset, rho: T, sigma: T, gamma: T) -> (T, [T; 3]) {
    let obs = observations::<T>(dataset, |_| Some(0));
    let (ll, g) = loglik_gradient(&obs, &[rho, sigma, gamma]);
    (ll, [g[0], g[1], g[2]])
}

struct Fit<T> {
    theta: Vec<T>,
    loglik: T,
    covariance: Option<Matrix<T>>,
    converged: bool,
    iterations: usize,
}

fn check_choices<T: Real>(obs: &[Obs<T>]) -> Result<(), EstimationError> {
    if obs.is_empty() {
        return Err(EstimationError::EmptyDataset);
    }
    if obs.iter().all(|o| o.chose_b1) {
        return Err(EstimationError::AllSameChoice(BinaryChoice::B1));
    }
    if obs.iter().all(|o| !o.chose_b1) {
        return Err(EstimationError::AllSameChoice(BinaryChoice::B2));
    }
    Ok(())
}

fn maximize<T: Real>(obs: &[Obs<T>], blocks: usize) -> Result<Fit<T>, EstimationError> {
    let k = 2 * blocks + 1;
    let scale = T::lit(GAMMA_SCALE);
    let objective = |z: &[T]| {
        let mut theta = z.to_vec();
        theta[k - 1] = z[k - 1] / scale;
        let (ll, mut g) = loglik_gradient(obs, &theta);
        g[k - 1] = g[k - 1] / scale;
        (-ll, g.into_iter().map(|v| -v).collect::<Vec<T>>())
    };
    let opts = BfgsOptions::for_scalar::<T>();

    let mut runs = Vec::new();
    for &rho in &GRID_WEIGHTS {
        for &sigma in &GRID_WEIGHTS {
            for &gamma in &GRID_GAMMA {
                let mut z0 = Vec::with_capacity(k);
                for _ in 0..blocks {
                    z0.push(T::lit(rho));
                    z0.push(T::lit(sigma));
                }
                z0.push(T::lit(gamma * GAMMA_SCALE));
                let r = bfgs_minimize(objective, z0, opts);
                if r.fx.is_finite() {
                    runs.push(r);
                }
            }
        }
    }
    let best_fx = runs.iter().map(|r| r.fx).fold(T::infinity(), |a, b| a.min(b));
    if !best_fx.is_finite() {
        return Err(EstimationError::NonConvergence { best_loglik: f64::NAN });
    }
    // runs ending at the same optimum differ only by rounding; prefer one that met the gradient test
    let slack = T::lit(opts.grad_tol) * best_fx.abs().max(T::one());
    let Some(best) = runs
        .into_iter()
        .filter(|r| r.converged && r.fx <= best_fx + slack)
        .min_by(|a, b| a.fx.partial_cmp(&b.fx).expect("finite"))
    else {
        return Err(EstimationError::NonConvergence {
            best_loglik: -best_fx.as_f64(),
        });
    };
    let (fx, z, converged, iterations) = (best.fx, best.x, best.converged, best.iterations);
    let mut theta = z;
    theta[k - 1] = theta[k - 1] / scale;
    let info: Matrix<T> = loglik_hessian(obs, &theta)
        .into_iter()
        .map(|row| row.into_iter().map(|v| -v).collect())
        .collect();
    Ok(Fit {
        theta,
        loglik: -fx,
        covariance: spd_inverse(&info),
        converged,
        iterations,
    })
}

fn n_obs(dataset: &PreferenceDataset, keep: impl Fn(GroupCondition) -> bool) -> usize {
    (0..dataset.len())
        .filter(|&i| keep(dataset.rows()[i].condition))
        .map(|i| dataset.weight(i))
        .sum::<f64>()
        .round() as usize
}

/// Fits (rho, sigma, gamma) to every row of the dataset.
pub fn fit_cr<T: Real>(dataset: &PreferenceDataset) -> Result<CREstimate<T>, EstimationError> {
    let obs = observations::<T>(&dataset.compressed(), |_| Some(0));
    check_choices(&obs)?;
    let fit = maximize(&obs, 1)?;
    let se = fit
        .covariance
        .as_ref()
        .map(|c| [c[0][0].sqrt(), c[1][1].sqrt(), c[2][2].sqrt()]);
    Ok(CREstimate {
        rho: fit.theta[0],
        sigma: fit.theta[1],
        gamma: fit.theta[2],
        loglik: fit.loglik,
        std_errors: se,
        converged: fit.converged,
        iterations: fit.iterations,
        n_obs: n_obs(dataset, |_| true),
    })
}

/// Fits separate ingroup and outgroup weights with a shared gamma. Rows
/// without a group condition are ignored.
pub fn fit_cr_group<T: Real>(dataset: &PreferenceDataset) -> Result<GroupCREstimate<T>, EstimationError> {
    // block 0: outgroup, block 1: ingroup
    let obs = observations::<T>(&dataset.compressed(), |c| match c {
        GroupCondition::Outgroup => Some(0),
        GroupCondition::Ingroup => Some(1),
        GroupCondition::NoGroup => None,
    });
    check_choices(&obs)?;
    if !obs.iter().any(|o| o.block == 1) {
        return Err(EstimationError::MissingCondition(GroupCondition::Ingroup));
    }
    if !obs.iter().any(|o| o.block == 0) {
        return Err(EstimationError::MissingCondition(GroupCondition::Outgroup));
    }
    let fit = maximize(&obs, 2)?;
    let t = &fit.theta;
    let (rho_out, sigma_out, rho_in, sigma_in, gamma) = (t[0], t[1], t[2], t[3], t[4]);

    let se = fit.covariance.as_ref().map(|c| {
        // d a / d(rho_out, rho_in) and d b / d(sigma_out, sigma_in)
        let ratio_se = |i_out: usize, i_in: usize, out: T, inn: T| {
            let g_out = -inn / (out * out);
            let g_in = T::one() / out;
            let var = g_out * g_out * c[i_out][i_out] + g_in * g_in * c[i_in][i_in]
                + T::lit(2.0) * g_out * g_in * c[i_out][i_in];
            var.max(T::zero()).sqrt()
        };
        GroupStdErrors {
            rho_out: c[0][0].sqrt(),
            sigma_out: c[1][1].sqrt(),
            rho_in: c[2][2].sqrt(),
            sigma_in: c[3][3].sqrt(),
            gamma: c[4][4].sqrt(),
            a: ratio_se(0, 2, rho_out, rho_in),
            b: ratio_se(1, 3, sigma_out, sigma_in),
        }
    });
    Ok(GroupCREstimate {
        rho_in,
        sigma_in,
        rho_out,
        sigma_out,
        a: (rho_in - rho_out) / rho_out,
        b: (sigma_in - sigma_out) / sigma_out,
        a_alt: (rho_in - rho_out) / rho_in,
        b_alt: (sigma_in - sigma_out) / sigma_in,
        gamma,
        loglik: fit.loglik,
        std_errors: se,
        converged: fit.converged,
        iterations: fit.iterations,
        n_obs: n_obs(dataset, |c| c != GroupCondition::NoGroup),
    })
}
