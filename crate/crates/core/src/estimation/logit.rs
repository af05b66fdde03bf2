//! Binary logistic regression by iteratively reweighted least squares, plus
//! the reward/punish designs built from response-game choices.

use serde::Serialize;

use crate::fixtures::builtin_game;
use crate::scalar::{sigmoid, softplus, Real};
use crate::types::{BinaryChoice, GameKind, GroupCondition};

use super::linalg::{cholesky, cholesky_solve, max_abs, spd_inverse, Matrix};
use super::{EstimationError, PreferenceRow};

const MAX_ITER: usize = 60;
/// Drift window used to tell a diverging fit from a slow one.
const DRIFT_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Design<T> {
    pub names: Vec<String>,
    pub rows: Vec<Vec<T>>,
}

impl<T: Real> Design<T> {
    pub fn new(names: Vec<String>, rows: Vec<Vec<T>>) -> Result<Self, EstimationError> {
        if let Some(r) = rows.iter().find(|r| r.len() != names.len()) {
            return Err(EstimationError::InvalidDesign(format!(
                "row has {} values for {} columns",
                r.len(),
                names.len()
            )));
        }
        Ok(Design { names, rows })
    }

    pub fn n_obs(&self) -> usize {
        self.rows.len()
    }

    pub fn n_coef(&self) -> usize {
        self.names.len()
    }

    pub fn column(&self, name: &str) -> Option<Vec<T>> {
        let j = self.names.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LogitRegressionResult<T> {
    pub names: Vec<String>,
    pub coefficients: Vec<T>,
    /// `None` for coefficients flagged as separated or when the information is singular.
    pub std_errors: Vec<Option<T>>,
    pub separated: Vec<bool>,
    pub loglik: T,
    pub aic: T,
    pub n_obs: usize,
    pub converged: bool,
    pub iterations: usize,
    /// Max-norm of the score at the returned coefficients.
    pub gradient_norm: T,
}

impl<T: Real> LogitRegressionResult<T> {
    pub fn coefficient(&self, name: &str) -> Option<T> {
        self.names.iter().position(|n| n == name).map(|j| self.coefficients[j])
    }

    pub fn any_separated(&self) -> bool {
        self.separated.iter().any(|&s| s)
    }
}

struct State<T> {
    loglik: T,
    grad: Vec<T>,
    info: Matrix<T>,
}

fn evaluate<T: Real>(x: &[Vec<T>], y: &[bool], beta: &[T]) -> State<T> {
    let k = beta.len();
    let mut loglik = T::zero();
    let mut grad = vec![T::zero(); k];
    let mut info = vec![vec![T::zero(); k]; k];
    for (row, &yi) in x.iter().zip(y) {
        let eta = row.iter().zip(beta).fold(T::zero(), |a, (&xv, &b)| a + xv * b);
        let p = sigmoid(eta);
        let q = sigmoid(-eta);
        // q rather than 1 - p: no cancellation for large |eta|
        let w = p * q;
        let (lp, r) = if yi { (-softplus(-eta), q) } else { (-softplus(eta), -p) };
        loglik = loglik + lp;
        for a in 0..k {
            grad[a] = grad[a] + r * row[a];
            for b in 0..=a {
                info[a][b] = info[a][b] + w * row[a] * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            info[b][a] = info[a][b];
        }
    }
    State { loglik, grad, info }
}

fn linear_predictor_change<T: Real>(x: &[Vec<T>], delta: &[T]) -> T {
    x.iter()
        .map(|row| row.iter().zip(delta).fold(T::zero(), |a, (&xv, &d)| a + xv * d).abs())
        .fold(T::zero(), |m, v| m.max(v))
}

/// Maximum-likelihood logistic regression.
///
/// Fits whose coefficients keep drifting with a still-rising likelihood are
/// treated as separated: the drifting coefficients are flagged and reported
/// without standard errors.
pub fn fit_logit_regression<T: Real>(
    design: &Design<T>,
    outcomes: &[bool],
) -> Result<LogitRegressionResult<T>, EstimationError> {
    let n = design.n_obs();
    let k = design.n_coef();
    if outcomes.len() != n {
        return Err(EstimationError::InvalidDesign(format!("{} outcomes for {n} rows", outcomes.len())));
    }
    if k == 0 || n <= k {
        return Err(EstimationError::InvalidDesign(format!("{n} observations for {k} coefficients")));
    }
    // column scaling keeps the normal equations well conditioned
    let mut scale = vec![T::zero(); k];
    for row in &design.rows {
        for (s, &v) in scale.iter_mut().zip(row) {
            if !v.is_finite() {
                return Err(EstimationError::InvalidDesign("non-finite covariate".into()));
            }
            *s = s.max(v.abs());
        }
    }
    for (j, s) in scale.iter().enumerate() {
        let col: Vec<T> = design.rows.iter().map(|r| r[j]).collect();
        let constant = col.iter().all(|&v| v == col[0]);
        if *s == T::zero() || (constant && design.names[j] != "intercept") {
            return Err(EstimationError::RankDeficientDesign);
        }
    }
    let x: Vec<Vec<T>> = design
        .rows
        .iter()
        .map(|r| r.iter().zip(&scale).map(|(&v, &s)| v / s).collect())
        .collect();
    let gram: Matrix<T> = (0..k)
        .map(|a| (0..k).map(|b| x.iter().fold(T::zero(), |acc, r| acc + r[a] * r[b])).collect())
        .collect();
    let tiny = T::epsilon() * T::lit(1e3) * T::lit(n as f64);
    match cholesky(&gram) {
        Some(l) if l.iter().enumerate().all(|(i, r)| r[i] * r[i] > tiny) => {}
        _ => return Err(EstimationError::RankDeficientDesign),
    }

    let eta_tol = T::epsilon().sqrt() * T::lit(1e-2);
    let mut beta = vec![T::zero(); k];
    let mut history = vec![beta.clone()];
    let mut state = evaluate(&x, outcomes, &beta);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITER {
        let Some(l) = cholesky(&state.info) else { break };
        let step = cholesky_solve(&l, &state.grad);
        let mut t = T::one();
        let mut next = None;
        for _ in 0..40 {
            let cand: Vec<T> = beta.iter().zip(&step).map(|(&b, &s)| b + t * s).collect();
            let st = evaluate(&x, outcomes, &cand);
            if st.loglik.is_finite() && st.loglik >= state.loglik - T::epsilon() * state.loglik.abs() {
                next = Some((cand, st));
                break;
            }
            t = t * T::lit(0.5);
        }
        let Some((cand, st)) = next else { break };
        let delta: Vec<T> = cand.iter().zip(&beta).map(|(&a, &b)| a - b).collect();
        beta = cand;
        state = st;
        iterations += 1;
        history.push(beta.clone());
        if linear_predictor_change(&x, &delta) < eta_tol {
            converged = true;
            break;
        }
    }

    let mut separated = vec![false; k];
    if !converged {
        let back = history.len().saturating_sub(DRIFT_WINDOW + 1);
        let drift: Vec<T> = beta.iter().zip(&history[back]).map(|(&a, &b)| a - b).collect();
        let eta_drift = linear_predictor_change(&x, &drift);
        if eta_drift < T::lit(0.5) {
            return Err(EstimationError::NonConvergence {
                best_loglik: state.loglik.as_f64(),
            });
        }
        for (flag, d) in separated.iter_mut().zip(&drift) {
            *flag = d.abs() > T::lit(1e-3) * eta_drift;
        }
    }

    let cov = spd_inverse(&state.info);
    let coefficients: Vec<T> = beta.iter().zip(&scale).map(|(&b, &s)| b / s).collect();
    let std_errors = (0..k)
        .map(|j| {
            if separated[j] {
                return None;
            }
            let c = cov.as_ref()?;
            let v = c[j][j];
            (v > T::zero() && v.is_finite()).then(|| v.sqrt() / scale[j])
        })
        .collect();
    let grad: Vec<T> = state.grad.iter().zip(&scale).map(|(&g, &s)| g * s).collect();
    let kk = T::lit(k as f64);
    Ok(LogitRegressionResult {
        names: design.names.clone(),
        coefficients,
        std_errors,
        separated,
        loglik: state.loglik,
        aic: T::lit(2.0) * kk - T::lit(2.0) * state.loglik,
        n_obs: n,
        converged,
        iterations,
        gradient_norm: max_abs(&grad),
    })
}

/// Column sets of the reciprocity regressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressionModel {
    /// No-group rows with the payoff covariates only.
    Baseline,
    /// Group rows with an ingroup indicator.
    Ingroup,
    /// Group rows with the indicator and its interactions.
    Interactions,
}

impl RegressionModel {
    pub const ALL: [RegressionModel; 3] = [RegressionModel::Baseline, RegressionModel::Ingroup, RegressionModel::Interactions];

    pub fn label(self) -> &'static str {
        match self {
            RegressionModel::Baseline => "(1)",
            RegressionModel::Ingroup => "(2)",
            RegressionModel::Interactions => "(3)",
        }
    }

    fn keeps(self, c: GroupCondition) -> bool {
        match self {
            RegressionModel::Baseline => c == GroupCondition::NoGroup,
            _ => c != GroupCondition::NoGroup,
        }
    }
}

struct Covariates {
    /// Option B takes to reward or punish A.
    target: BinaryChoice,
    values: [f64; 3],
}

fn build_design(
    rows: &[PreferenceRow],
    model: RegressionModel,
    kind: GameKind,
    names: [&str; 3],
    covariates: impl Fn(&PreferenceRow) -> Option<Covariates>,
) -> Result<(Design<f64>, Vec<bool>), EstimationError> {
    let mut cols = vec!["intercept".to_string()];
    if model != RegressionModel::Baseline {
        cols.push("ingroup".into());
    }
    cols.extend(names.iter().map(|s| s.to_string()));
    if model == RegressionModel::Interactions {
        cols.extend(names.iter().map(|s| format!("ingroup:{s}")));
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for r in rows {
        let game = builtin_game(&r.game_id).ok_or_else(|| EstimationError::UnknownGame(r.game_id.clone()))?;
        if game.kind != kind || !model.keeps(r.condition) {
            continue;
        }
        let Some(c) = covariates(r) else { continue };
        let ingroup = if r.condition == GroupCondition::Ingroup { 1.0 } else { 0.0 };
        let mut row = vec![1.0];
        if model != RegressionModel::Baseline {
            row.push(ingroup);
        }
        row.extend(c.values);
        if model == RegressionModel::Interactions {
            row.extend(c.values.map(|v| ingroup * v));
        }
        x.push(row);
        y.push(r.choice == c.target);
    }
    Ok((Design::new(cols, x)?, y))
}

/// Outcome: B picks the option that pays A more, after A passed up the outside option.
pub fn build_positive_reciprocity_design(
    rows: &[PreferenceRow],
    model: RegressionModel,
) -> Result<(Design<f64>, Vec<bool>), EstimationError> {
    build_design(
        rows,
        model,
        GameKind::ResponseGoodIntention,
        ["cost_to_reward", "benefit_to_a", "payoff_gap"],
        |r| {
            let (p1, p2) = (r.payoff_b1, r.payoff_b2);
            if p1.a == p2.a {
                return None;
            }
            let (target, reward, other) = if p1.a > p2.a { (BinaryChoice::B1, p1, p2) } else { (BinaryChoice::B2, p2, p1) };
            Some(Covariates {
                target,
                values: [
                    other.b as f64 - reward.b as f64,
                    reward.a as f64 - other.a as f64,
                    reward.a as f64 - reward.b as f64,
                ],
            })
        },
    )
}

/// Outcome: B picks the option that pays A less, after A took a selfish step.
pub fn build_negative_reciprocity_design(
    rows: &[PreferenceRow],
    model: RegressionModel,
) -> Result<(Design<f64>, Vec<bool>), EstimationError> {
    build_design(
        rows,
        model,
        GameKind::ResponseMisbehave,
        ["cost_to_punish", "damage_to_a", "payoff_ahead"],
        |r| {
            let (p1, p2) = (r.payoff_b1, r.payoff_b2);
            if p1.a == p2.a {
                return None;
            }
            let (target, punish, other) = if p1.a < p2.a { (BinaryChoice::B1, p1, p2) } else { (BinaryChoice::B2, p2, p1) };
            Some(Covariates {
                target,
                values: [
                    other.b as f64 - punish.b as f64,
                    other.a as f64 - punish.a as f64,
                    punish.b as f64 - punish.a as f64,
                ],
            })
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(game: &str, c: GroupCondition, choice: BinaryChoice) -> PreferenceRow {
        PreferenceRow::from_fixture(game, c, choice).unwrap()
    }

    #[test]
    fn intercept_only_balanced() {
        let d = Design::new(vec!["intercept".into()], vec![vec![1.0]; 10]).unwrap();
        let y: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        let r = fit_logit_regression::<f64>(&d, &y).unwrap();
        assert_eq!(r.coefficients[0], 0.0);
        assert!(r.converged);
        assert!((r.aic - (2.0 - 2.0 * r.loglik)).abs() < 1e-12);
    }

    #[test]
    fn recovers_known_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = [-0.5, 1.2, -0.004];
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for _ in 0..4000 {
            let x1: f64 = rng.gen_range(-1.0..1.0);
            let x2: f64 = rng.gen_range(0.0..500.0);
            let eta = truth[0] + truth[1] * x1 + truth[2] * x2;
            y.push(rng.gen::<f64>() < 1.0 / (1.0 + (-eta).exp()));
            rows.push(vec![1.0, x1, x2]);
        }
        let d = Design::new(vec!["intercept".into(), "x1".into(), "x2".into()], rows).unwrap();
        let r = fit_logit_regression(&d, &y).unwrap();
        assert!(r.converged && !r.any_separated());
        assert!(r.gradient_norm < 1e-8, "{}", r.gradient_norm);
        for j in 0..3 {
            let se = r.std_errors[j].unwrap();
            assert!((r.coefficients[j] - truth[j]).abs() < 3.0 * se, "coef {j}");
        }
    }

    #[test]
    fn separation_flagged() {
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![1.0, i as f64]).collect();
        let y: Vec<bool> = (0..12).map(|i| i >= 6).collect();
        let d = Design::new(vec!["intercept".into(), "x".into()], rows).unwrap();
        let r = fit_logit_regression(&d, &y).unwrap();
        assert!(!r.converged);
        assert!(r.separated[1]);
        assert!(r.std_errors[1].is_none());
    }

    #[test]
    fn quasi_separation_flags_only_the_drifting_term() {
        // group g=1 always succeeds; within g=0 outcomes vary with x
        let mut rows = Vec::new();
        let mut y = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..200 {
            let g = (i % 2) as f64;
            let x: f64 = rng.gen_range(-2.0..2.0);
            rows.push(vec![1.0, g, x]);
            y.push(g == 1.0 || rng.gen::<f64>() < 1.0 / (1.0 + (-x).exp()));
        }
        let d = Design::new(vec!["intercept".into(), "g".into(), "x".into()], rows).unwrap();
        let r = fit_logit_regression(&d, &y).unwrap();
        assert!(r.separated[1]);
        assert!(!r.separated[2]);
        assert!(r.std_errors[2].is_some());
    }

    #[test]
    fn rank_deficient_rejected() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64, 2.0 * i as f64]).collect();
        let y: Vec<bool> = (0..10).map(|i| i % 3 == 0).collect();
        let d = Design::new(vec!["intercept".into(), "a".into(), "b".into()], rows).unwrap();
        assert_eq!(fit_logit_regression(&d, &y).unwrap_err(), EstimationError::RankDeficientDesign);
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, 5.0, i as f64]).collect();
        let d = Design::new(vec!["intercept".into(), "c".into(), "x".into()], rows).unwrap();
        assert_eq!(fit_logit_regression(&d, &y).unwrap_err(), EstimationError::RankDeficientDesign);
    }

    #[test]
    fn positive_design_values() {
        let rows = vec![
            row("Resp 2a", GroupCondition::NoGroup, BinaryChoice::B2),
            row("Dict 2", GroupCondition::NoGroup, BinaryChoice::B2),
        ];
        let (d, y) = build_positive_reciprocity_design(&rows, RegressionModel::Baseline).unwrap();
        assert_eq!(d.names, ["intercept", "cost_to_reward", "benefit_to_a", "payoff_gap"]);
        assert_eq!(d.rows, vec![vec![1.0, 25.0, 350.0, 375.0]]);
        assert_eq!(y, vec![true]);
        let (d3, _) = build_positive_reciprocity_design(&rows, RegressionModel::Interactions).unwrap();
        assert_eq!(d3.n_coef(), 8);
        assert_eq!(d3.n_obs(), 0);
    }

    #[test]
    fn negative_design_values() {
        let rows = vec![
            row("Resp 13a", GroupCondition::Ingroup, BinaryChoice::B2),
            row("Resp 12", GroupCondition::Outgroup, BinaryChoice::B1),
            row("Resp 1a", GroupCondition::Ingroup, BinaryChoice::B1),
        ];
        let (d, y) = build_negative_reciprocity_design(&rows, RegressionModel::Interactions).unwrap();
        assert_eq!(d.n_obs(), 2);
        assert_eq!(d.column("damage_to_a").unwrap(), vec![800.0, 150.0]);
        assert_eq!(d.column("cost_to_punish").unwrap(), vec![200.0, 50.0]);
        assert_eq!(d.column("ingroup:cost_to_punish").unwrap(), vec![200.0, 0.0]);
        assert_eq!(y, vec![true, false]);
        let bad = PreferenceRow {
            game_id: "Resp 99".into(),
            ..rows[0].clone()
        };
        assert!(matches!(
            build_negative_reciprocity_design(&[bad], RegressionModel::Baseline),
            Err(EstimationError::UnknownGame(_))
        ));
    }
}
