//! Discrete-choice estimation: distributional-preference MLE (with and
//! without group identity) and binary logistic regression.
//!
//! Numerics are generic over [`Real`] so the same code runs in `f32` or `f64`.

mod cr;
pub mod linalg;
mod logit;
pub mod optimize;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixtures::{builtin_game, reconstruct_choices};
use crate::scalar::{sigmoid, Real};
use crate::types::{BinaryChoice, GroupCondition, Payoff};

pub use cr::{cr_loglik_and_gradient, fit_cr, fit_cr_group, CREstimate, GroupCREstimate, GroupStdErrors};
pub use logit::{
    build_negative_reciprocity_design, build_positive_reciprocity_design, fit_logit_regression, Design,
    LogitRegressionResult, RegressionModel,
};
pub use report::{EstimateRow, EstimateTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("degenerate dataset: no observations")]
    EmptyDataset,
    #[error("degenerate dataset: every observation chose {0}, choice sensitivity is unidentified")]
    AllSameChoice(BinaryChoice),
    #[error("dataset has no {0} observations")]
    MissingCondition(GroupCondition),
    #[error("optimizer did not converge (best log-likelihood {best_loglik})")]
    NonConvergence { best_loglik: f64 },
    #[error("design matrix is rank deficient")]
    RankDeficientDesign,
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("unknown game id {0:?}")]
    UnknownGame(String),
    #[error("payoffs for {game_id} do not match the fixture game")]
    PayoffMismatch { game_id: String },
    #[error("invalid weight {0}: weights must be positive and finite")]
    InvalidWeight(f64),
}

/// Distributional utility of B given both payoffs.
///
/// When B is ahead the weight on A's payoff is `rho`, when behind it is
/// `sigma`; at equality B's own payoff is returned.
pub fn cr_utility<T: Real>(pi_a: T, pi_b: T, rho: T, sigma: T) -> T {
    if pi_b > pi_a {
        rho * pi_a + (T::one() - rho) * pi_b
    } else if pi_b < pi_a {
        sigma * pi_a + (T::one() - sigma) * pi_b
    } else {
        pi_b
    }
}

/// Logit probability of choosing the first option.
pub fn logit_choice_prob<T: Real>(u1: T, u2: T, gamma: T) -> T {
    sigmoid(gamma * (u1 - u2))
}

/// One observed binary choice with the payoffs of both options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRow {
    pub game_id: String,
    pub condition: GroupCondition,
    pub choice: BinaryChoice,
    pub payoff_b1: Payoff,
    pub payoff_b2: Payoff,
}

impl PreferenceRow {
    /// Builds a row with payoffs looked up from the built-in fixture.
    pub fn from_fixture(game_id: &str, condition: GroupCondition, choice: BinaryChoice) -> Result<Self, EstimationError> {
        let game = builtin_game(game_id).ok_or_else(|| EstimationError::UnknownGame(game_id.to_string()))?;
        Ok(PreferenceRow {
            game_id: game.game_id,
            condition,
            choice,
            payoff_b1: game.payoff_b1,
            payoff_b2: game.payoff_b2,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    rows: Vec<PreferenceRow>,
    weights: Option<Vec<f64>>,
}

impl PreferenceDataset {
    /// Rows must refer to built-in games with matching payoffs.
    pub fn new(rows: Vec<PreferenceRow>) -> Result<Self, EstimationError> {
        for r in &rows {
            let game = builtin_game(&r.game_id).ok_or_else(|| EstimationError::UnknownGame(r.game_id.clone()))?;
            if game.payoff_b1 != r.payoff_b1 || game.payoff_b2 != r.payoff_b2 {
                return Err(EstimationError::PayoffMismatch { game_id: r.game_id.clone() });
            }
        }
        Ok(PreferenceDataset { rows, weights: None })
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self, EstimationError> {
        if weights.len() != self.rows.len() {
            return Err(EstimationError::InvalidDesign(format!(
                "{} weights for {} rows",
                weights.len(),
                self.rows.len()
            )));
        }
        if let Some(&w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(EstimationError::InvalidWeight(w));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    /// Rows rebuilt from the built-in observed shares for the given conditions.
    pub fn reconstructed(conditions: &[GroupCondition]) -> Self {
        let rows = conditions
            .iter()
            .flat_map(|&c| reconstruct_choices(c))
            .map(|rc| {
                PreferenceRow::from_fixture(&rc.game.game_id, rc.condition, rc.choice).expect("fixture game ids are known")
            })
            .collect();
        PreferenceDataset { rows, weights: None }
    }

    pub fn rows(&self) -> &[PreferenceRow] {
        &self.rows
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Total weight, i.e. the effective number of observations.
    pub fn total_weight(&self) -> f64 {
        (0..self.rows.len()).map(|i| self.weight(i)).sum()
    }

    pub fn filter(&self, mut keep: impl FnMut(&PreferenceRow) -> bool) -> Self {
        let mut rows = Vec::new();
        let mut weights = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            if keep(r) {
                rows.push(r.clone());
                weights.push(self.weight(i));
            }
        }
        PreferenceDataset {
            rows,
            weights: self.weights.as_ref().map(|_| weights),
        }
    }

    /// Merges identical rows into a single weighted row. The likelihood is unchanged.
    pub fn compressed(&self) -> Self {
        let mut acc: BTreeMap<(String, GroupCondition, BinaryChoice), (PreferenceRow, f64)> = BTreeMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            acc.entry((r.game_id.clone(), r.condition, r.choice))
                .or_insert_with(|| (r.clone(), 0.0))
                .1 += self.weight(i);
        }
        let (rows, weights) = acc.into_values().unzip();
        PreferenceDataset {
            rows,
            weights: Some(weights),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn utility_branches() {
        assert_relative_eq!(cr_utility(750.0, 400.0, 0.3701, -0.0769), 373.085, epsilon = 1e-9);
        assert_eq!(cr_utility(400.0, 400.0, 0.9, -3.0), 400.0);
        assert_relative_eq!(cr_utility(0.0, 800.0, 0.5, -0.1), 400.0);
        assert_relative_eq!(cr_utility(0.0_f32, 800.0, 0.5, -0.1), 400.0);
    }

    #[test]
    fn choice_probabilities() {
        assert_eq!(logit_choice_prob(10.0, 10.0, 3.0), 0.5);
        assert_eq!(logit_choice_prob(100.0, -5.0, 0.0), 0.5);
        assert_relative_eq!(logit_choice_prob(3f64.ln(), 0.0, 1.0), 0.75, epsilon = 1e-12);
        let p = logit_choice_prob(1e6_f64, 0.0, 1.0);
        assert!(p.is_finite() && p <= 1.0);
    }

    #[test]
    fn reconstructed_sizes() {
        let d = PreferenceDataset::reconstructed(&[GroupCondition::NoGroup]);
        assert_eq!(d.len(), 22 * 15);
        let c = d.compressed();
        assert!(c.len() <= 44);
        assert_relative_eq!(c.total_weight(), 330.0);
    }

    #[test]
    fn payoffs_validated() {
        let mut r = PreferenceRow::from_fixture("Dict 1", GroupCondition::NoGroup, BinaryChoice::B1).unwrap();
        r.payoff_b2 = Payoff::new(1, 1);
        assert!(matches!(PreferenceDataset::new(vec![r]), Err(EstimationError::PayoffMismatch { .. })));
        assert!(matches!(
            PreferenceRow::from_fixture("Dict 99", GroupCondition::NoGroup, BinaryChoice::B1),
            Err(EstimationError::UnknownGame(_))
        ));
    }
}
