//! Shared plumbing for the experiment engines: eliciting one decision from an
//! agent and recording it.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde_json::Value;
use thiserror::Error;

use crate::agents::{Agent, AgentError};
use crate::prompts::{
    build_prompt, parse_numeric_response, parse_response, AnswerFormat, ExperimentContext, PromptError,
};
use crate::types::DecisionEvent;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("expected {expected} agents, got {got}")]
    AgentCount { expected: usize, got: usize },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("invalid session parameters: {0}")]
    Parameters(String),
}

/// Builds a fresh agent from an id and a seed.
pub type AgentFactory<'a> = dyn Fn(&str, u64) -> Box<dyn Agent> + Sync + 'a;

/// Identity and timestamp of a session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionMeta {
    pub session_id: String,
    pub seed: u64,
    pub created_at: DateTime<Utc>,
}

impl SessionMeta {
    pub fn new(session_id: impl Into<String>, seed: u64, created_at: DateTime<Utc>) -> Self {
        SessionMeta {
            session_id: session_id.into(),
            seed,
            created_at,
        }
    }
}

/// Where in the session a decision happens.
pub(crate) struct Slot {
    pub round: u32,
    pub position: u32,
    pub role: String,
}

/// Asks `agent` for one decision. Returns the recorded event and the
/// canonical answer, or `None` when the response did not parse (the event
/// then carries the parse error).
pub(crate) fn elicit(
    agent: &mut dyn Agent,
    context: &ExperimentContext,
    options: &[String],
    slot: Slot,
    extra: Option<Value>,
) -> Result<(DecisionEvent, Option<String>), SessionError> {
    let bundle = build_prompt(context, options)?;
    let raw = agent.decide(&bundle, context)?;
    let parsed = match bundle.format {
        AnswerFormat::Integer { min, max } => parse_numeric_response(&raw, min, max).map(|(r, v)| (r, v.to_string())),
        _ => parse_response(&raw, options).map(|p| (p.reason, p.answer)),
    };
    let mut ctx = serde_json::to_value(context).expect("context serializes");
    if let (Some(Value::Object(extra)), Value::Object(map)) = (extra, &mut ctx) {
        map.extend(extra);
    }
    let (reason, answer, parse_error) = match parsed {
        Ok((reason, answer)) => (reason, Some(answer), None),
        Err(e) => (String::new(), None, Some(e.to_string())),
    };
    let event = DecisionEvent {
        agent_id: agent.id().to_string(),
        round: slot.round,
        position: slot.position,
        role_or_position: slot.role,
        prompt_text: format!("{}\n\n{}", bundle.system_text, bundle.user_text),
        raw_response: raw,
        parsed_choice: answer.clone().unwrap_or_default(),
        reason_text: reason,
        context: ctx,
        parse_error,
    };
    Ok((event, answer))
}

/// Maps `f` over `items` on up to `threads` worker threads, keeping input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every item mapped"))
        .collect()
}

/// Reads a typed field from an event's structured context.
pub(crate) fn context_field<T: serde::de::DeserializeOwned>(event: &DecisionEvent, key: &str) -> Option<T> {
    event.context.get(key).and_then(|v| serde_json::from_value(v.clone()).ok())
}

pub(crate) fn context_kind(event: &DecisionEvent) -> Option<&str> {
    event.context.get("kind").and_then(Value::as_str)
}
