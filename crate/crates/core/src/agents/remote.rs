use std::sync::Arc;

use crate::llm_client::ChatClient;
use crate::prompts::{ExperimentContext, PromptBundle};

use super::{Agent, AgentError, AgentKind};

/// Chat-model participant. Prompts within one session share a conversation,
/// so later decisions see earlier ones; [`Agent::reset`] starts afresh.
pub struct RemoteAgent {
    id: String,
    client: Arc<ChatClient>,
    system: Option<String>,
    user_turns: Vec<String>,
    assistant_turns: Vec<String>,
}

impl std::fmt::Debug for RemoteAgent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteAgent")
            .field("id", &self.id)
            .field("model", &self.client.config().model_name)
            .field("turns", &self.user_turns.len())
            .finish()
    }
}

pub fn remote_llm_agent(id: impl Into<String>, client: Arc<ChatClient>) -> RemoteAgent {
    RemoteAgent {
        id: id.into(),
        client,
        system: None,
        user_turns: Vec::new(),
        assistant_turns: Vec::new(),
    }
}

impl RemoteAgent {
    pub fn turns(&self) -> usize {
        self.user_turns.len()
    }
}

impl Agent for RemoteAgent {
    fn id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> AgentKind {
        AgentKind::Remote
    }

    fn decide(&mut self, prompt: &PromptBundle, _context: &ExperimentContext) -> Result<String, AgentError> {
        let system = self.system.get_or_insert_with(|| prompt.system_text.clone()).clone();
        self.user_turns.push(prompt.user_text.clone());
        match self.client.chat(&system, &self.user_turns, &self.assistant_turns) {
            Ok(text) => {
                self.assistant_turns.push(text.clone());
                Ok(text)
            }
            Err(source) => {
                self.user_turns.pop();
                Err(AgentError::Backend {
                    agent: self.id.clone(),
                    source,
                })
            }
        }
    }

    fn reset(&mut self) {
        self.system = None;
        self.user_turns.clear();
        self.assistant_turns.clear();
    }
}
