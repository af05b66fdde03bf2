//! Decision makers: scripted policies with known parameters, and remote chat
//! models behind [`crate::llm_client`].

pub mod bayes;
mod remote;
mod scripted;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm_client::ClientError;
use crate::prompts::{ExperimentContext, PromptBundle};

pub use remote::{remote_llm_agent, RemoteAgent};
pub use scripted::{
    scripted_agent, scripted_bayesian_urn_agent, scripted_cr_agent, BayesianUrnPolicy, CRGroupPolicy, CRLogitPolicy,
    ScriptedAgent, ScriptedPolicy,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Scripted,
    Remote,
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("agent {agent} has no rule for a {context} decision")]
    UnsupportedContext { agent: String, context: String },
    #[error("agent {agent}: {source}")]
    Backend {
        agent: String,
        #[source]
        source: ClientError,
    },
}

/// One decision maker. An instance serves one session at a time.
pub trait Agent: Send {
    fn id(&self) -> &str;
    fn kind(&self) -> AgentKind;
    /// Returns the raw response text for a prompt. Scripted agents read the
    /// structured context; remote agents only see the rendered prompt.
    fn decide(&mut self, prompt: &PromptBundle, context: &ExperimentContext) -> Result<String, AgentError>;
    /// Forgets any conversation state.
    fn reset(&mut self) {}
}

pub(crate) fn context_name(context: &ExperimentContext) -> &'static str {
    match context {
        ExperimentContext::Preference { .. } => "preference",
        ExperimentContext::UrnLink { .. } => "urn link",
        ExperimentContext::UrnGuess { .. } => "urn guess",
        ExperimentContext::TransferSend { .. } => "transfer send",
        ExperimentContext::TransferReturn { .. } => "transfer return",
        ExperimentContext::ImageDonation { .. } => "image donation",
        ExperimentContext::Classification { .. } => "classification",
    }
}
