use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::estimation::{cr_utility, logit_choice_prob};
use crate::prompts::{format_response, ExperimentContext, PromptBundle};
use crate::types::{GameSpec, GroupCondition, Payoff};

use super::bayes::{link_gain, urn_guess};
use super::{context_name, Agent, AgentError, AgentKind};

/// Distributional preferences with logit noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CRLogitPolicy {
    pub rho: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub rng_seed: u64,
}

impl CRLogitPolicy {
    pub fn prob_b1(&self, game: &GameSpec) -> f64 {
        prob_b1(game, self.rho, self.sigma, self.gamma)
    }
}

/// Separate weights toward ingroup and outgroup matches. Without a group
/// condition the outgroup weights apply.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CRGroupPolicy {
    pub rho_in: f64,
    pub sigma_in: f64,
    pub rho_out: f64,
    pub sigma_out: f64,
    pub gamma: f64,
    pub rng_seed: u64,
}

impl CRGroupPolicy {
    pub fn prob_b1(&self, game: &GameSpec, condition: GroupCondition) -> f64 {
        let (rho, sigma) = match condition {
            GroupCondition::Ingroup => (self.rho_in, self.sigma_in),
            _ => (self.rho_out, self.sigma_out),
        };
        prob_b1(game, rho, sigma, self.gamma)
    }
}

fn prob_b1(game: &GameSpec, rho: f64, sigma: f64, gamma: f64) -> f64 {
    let u = |p: Payoff| cr_utility(f64::from(p.a), f64::from(p.b), rho, sigma);
    logit_choice_prob(u(game.payoff_b1), u(game.payoff_b2), gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BayesianUrnPolicy {
    /// Trust in the own draw relative to an observed guess, in (0, 1].
    pub self_weight: f64,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScriptedPolicy {
    CrLogit(CRLogitPolicy),
    CrLogitGroup(CRGroupPolicy),
    BayesianUrn(BayesianUrnPolicy),
    /// Always gives the same answer.
    Fixed { answer: String },
    /// Returns half of what was received, rounded down; sends half the endowment.
    FairSplit,
    /// Returns and sends nothing.
    Selfish,
    /// Gives iff the receiver's image score is at least the threshold.
    ScoreThreshold { threshold: i64 },
    /// Gives with a fixed probability.
    RandomDonor { p_give: f64 },
}

impl ScriptedPolicy {
    /// Copy whose own random stream, if any, starts from `seed`.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut p = self.clone();
        match &mut p {
            ScriptedPolicy::CrLogit(x) => x.rng_seed = seed,
            ScriptedPolicy::CrLogitGroup(x) => x.rng_seed = seed,
            ScriptedPolicy::BayesianUrn(x) => x.rng_seed = seed,
            _ => {}
        }
        p
    }
}

pub struct ScriptedAgent {
    id: String,
    policy: ScriptedPolicy,
    rng: ChaCha8Rng,
}

impl std::fmt::Debug for ScriptedAgent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedAgent")
            .field("id", &self.id)
            .field("policy", &self.policy)
            .finish()
    }
}

impl ScriptedAgent {
    pub fn policy(&self) -> &ScriptedPolicy {
        &self.policy
    }

    fn unsupported(&self, context: &ExperimentContext) -> AgentError {
        AgentError::UnsupportedContext {
            agent: self.id.clone(),
            context: context_name(context).to_string(),
        }
    }
}

/// Scripted agent with an explicit seed. Policies that carry their own
/// `rng_seed` use it instead.
pub fn scripted_agent(id: impl Into<String>, policy: ScriptedPolicy, seed: u64) -> ScriptedAgent {
    let seed = match &policy {
        ScriptedPolicy::CrLogit(p) => p.rng_seed,
        ScriptedPolicy::CrLogitGroup(p) => p.rng_seed,
        ScriptedPolicy::BayesianUrn(p) => p.rng_seed,
        _ => seed,
    };
    ScriptedAgent {
        id: id.into(),
        policy,
        rng: ChaCha8Rng::seed_from_u64(seed),
    }
}

pub fn scripted_cr_agent(policy: CRLogitPolicy) -> ScriptedAgent {
    scripted_agent("cr-logit", ScriptedPolicy::CrLogit(policy), policy.rng_seed)
}

pub fn scripted_bayesian_urn_agent(policy: BayesianUrnPolicy) -> ScriptedAgent {
    scripted_agent("bayesian-urn", ScriptedPolicy::BayesianUrn(policy), policy.rng_seed)
}

impl Agent for ScriptedAgent {
    fn id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> AgentKind {
        AgentKind::Scripted
    }

    fn decide(&mut self, _prompt: &PromptBundle, context: &ExperimentContext) -> Result<String, AgentError> {
        use ExperimentContext as C;
        let (reason, answer): (&str, String) = match (&self.policy, context) {
            (ScriptedPolicy::Fixed { answer }, _) => ("I always make the same choice.", answer.clone()),

            (ScriptedPolicy::CrLogit(p), C::Preference { game, .. }) => {
                let pb1 = p.prob_b1(game);
                let b1 = self.rng.gen::<f64>() < pb1;
                (
                    "I weigh my own points against the other participant's and pick the allocation I value more.",
                    if b1 { "B1" } else { "B2" }.to_string(),
                )
            }
            (ScriptedPolicy::CrLogitGroup(p), C::Preference { game, condition }) => {
                let pb1 = p.prob_b1(game, *condition);
                let b1 = self.rng.gen::<f64>() < pb1;
                (
                    "I weigh both payoffs, and how much I care depends on whether we share a group.",
                    if b1 { "B1" } else { "B2" }.to_string(),
                )
            }

            (ScriptedPolicy::BayesianUrn(p), C::UrnLink { target, link_cost, linked, .. }) => {
                let gain = link_gain(*target, linked, p.self_weight);
                let link = gain >= f64::from(*link_cost);
                (
                    "I compare the expected improvement in accuracy from seeing more guesses with the cost of the link.",
                    if link { "Yes" } else { "No" }.to_string(),
                )
            }
            (ScriptedPolicy::BayesianUrn(p), C::UrnGuess { draw, visible, .. }) => {
                let observed: Vec<_> = visible.iter().map(|&(_, g)| g).collect();
                let guess = urn_guess(*draw, &observed, p.self_weight);
                (
                    "I combine my own draw with the guesses I can see, counting each as an informative signal.",
                    guess.to_string(),
                )
            }

            (ScriptedPolicy::FairSplit, C::TransferReturn { received, .. }) => {
                ("Splitting what I received evenly seems fair.", (received / 2).to_string())
            }
            (ScriptedPolicy::FairSplit, C::TransferSend { endowment, .. }) => {
                ("I send half of my endowment.", (endowment / 2).to_string())
            }
            (ScriptedPolicy::Selfish, C::TransferReturn { .. } | C::TransferSend { .. }) => {
                ("I keep everything for myself.", "0".to_string())
            }

            (ScriptedPolicy::ScoreThreshold { threshold }, C::ImageDonation { receiver_gave, receiver_withheld, .. }) => {
                let score = i64::from(*receiver_gave) - i64::from(*receiver_withheld);
                let give = score >= *threshold;
                (
                    "I help those whose record shows they help others.",
                    if give { "Give" } else { "Withhold" }.to_string(),
                )
            }
            (ScriptedPolicy::RandomDonor { p_give }, C::ImageDonation { .. }) => {
                let give = self.rng.gen::<f64>() < *p_give;
                ("I decide on a whim.", if give { "Give" } else { "Withhold" }.to_string())
            }

            _ => return Err(self.unsupported(context)),
        };
        Ok(format_response(reason, &answer))
    }
}
