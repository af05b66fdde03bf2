//! Experiment prompts and templated-response parsing.
//!
//! Every prompt is zero-shot: a participant framing in the system turn, the
//! neutral game instructions, then the step-by-step directive placed before the
//! answer request together with the `<reason>`/`<answer>` template. Instruction
//! wording lives in `templates/*.txt`; bump [`TEMPLATE_VERSION`] whenever a
//! template changes.

use serde::{Deserialize, Serialize};

use crate::analysis::TaxonomyId;
use crate::types::{GameSpec, GroupCondition, TransferMode, Urn};

/// Version of the bundled instruction templates, recorded in every session.
pub const TEMPLATE_VERSION: &str = "1.0.0";

pub const SYSTEM_FRAMING: &str = "Imagine you are a participant in a laboratory experiment.";

mod templates {
    pub const SYSTEM: &str = include_str!("../templates/system.txt");
    pub const DIRECTIVE: &str = include_str!("../templates/directive.txt");
    pub const PREFERENCE: &str = include_str!("../templates/preference.txt");
    pub const GROUP_IN: &str = include_str!("../templates/group_ingroup.txt");
    pub const GROUP_OUT: &str = include_str!("../templates/group_outgroup.txt");
    pub const RESPONSE_HISTORY: &str = include_str!("../templates/response_history.txt");
    pub const URN_COMMON: &str = include_str!("../templates/urn_common.txt");
    pub const URN_LINK: &str = include_str!("../templates/urn_link.txt");
    pub const URN_GUESS: &str = include_str!("../templates/urn_guess.txt");
    pub const TRANSFER_SEND: &str = include_str!("../templates/transfer_send.txt");
    pub const TRANSFER_RETURN: &str = include_str!("../templates/transfer_return.txt");
    pub const IMAGE_DONOR: &str = include_str!("../templates/image_donor.txt");
    pub const CLASSIFY: &str = include_str!("../templates/classify.txt");
}

/// Structured description of the decision being elicited. Scripted agents
/// read it directly; remote agents only see the rendered text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentContext {
    Preference {
        game: GameSpec,
        condition: GroupCondition,
    },
    UrnLink {
        position: u32,
        target: u32,
        link_cost: u32,
        draw: Urn,
        /// Targets this position already linked to in the current round.
        linked: Vec<u32>,
    },
    UrnGuess {
        position: u32,
        draw: Urn,
        /// Guesses visible through links, as (position, guess).
        visible: Vec<(u32, Urn)>,
        links_formed: u32,
        link_cost: u32,
    },
    TransferSend {
        self_label: String,
        endowment: u32,
    },
    TransferReturn {
        mode: TransferMode,
        self_label: String,
        sender_label: String,
        recipient_label: String,
        endowment: u32,
        sent: u32,
        received: u32,
    },
    ImageDonation {
        round: u32,
        endowment: u32,
        balance: i64,
        donor_cost: u32,
        benefit: u32,
        receiver_gave: u32,
        receiver_withheld: u32,
    },
    Classification {
        taxonomy: TaxonomyId,
        reason: String,
    },
}

/// How the `<answer>` content is constrained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnswerFormat {
    /// Exactly one member of the option set.
    Choice,
    /// A whole number in the inclusive range.
    Integer { min: u32, max: u32 },
    /// Any subset of the option letters, comma separated.
    MultiSelect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub option_set: Vec<String>,
    pub format: AnswerFormat,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("option set is empty")]
    EmptyOptionSet,
    #[error("option set contains duplicate {0:?}")]
    DuplicateOption(String),
    #[error("template placeholder {{{0}}} has no value")]
    MissingPlaceholder(String),
    #[error("option set does not match an integer answer range")]
    BadIntegerOptions,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("response has no <reason>...</reason> block")]
    MissingReasonTag { raw: String },
    #[error("response has an empty <reason> block")]
    EmptyReason { raw: String },
    #[error("response has no <answer>...</answer> block")]
    MissingAnswerTag { raw: String },
    #[error("answer {answer:?} is not one of the offered options")]
    AnswerNotInOptionSet { answer: String, raw: String },
    #[error("answer {answer:?} is not a whole number in the allowed range")]
    NumericParseFailure { answer: String, raw: String },
}

impl ParseError {
    pub fn raw(&self) -> &str {
        match self {
            ParseError::MissingReasonTag { raw }
            | ParseError::EmptyReason { raw }
            | ParseError::MissingAnswerTag { raw }
            | ParseError::AnswerNotInOptionSet { raw, .. }
            | ParseError::NumericParseFailure { raw, .. } => raw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub reason: String,
    pub answer: String,
}

/// Substitutes `{name}` placeholders. Every placeholder in the template must
/// have a value.
pub fn render(template: &str, vars: &[(&str, String)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        match after.find('}') {
            Some(end) if is_placeholder(&after[..end]) => {
                let name = &after[..end];
                let value = vars
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| v.as_str())
                    .ok_or_else(|| PromptError::MissingPlaceholder(name.to_string()))?;
                out.push_str(value);
                rest = &after[end + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn is_placeholder(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn trimmed(t: &str) -> &str {
    t.trim_end_matches(['\n', '\r'])
}

fn check_options(options: &[String]) -> Result<(), PromptError> {
    if options.is_empty() {
        return Err(PromptError::EmptyOptionSet);
    }
    let mut seen = std::collections::BTreeSet::new();
    for o in options {
        if !seen.insert(o.as_str()) {
            return Err(PromptError::DuplicateOption(o.clone()));
        }
    }
    Ok(())
}

/// Natural option set for a context.
pub fn default_options(context: &ExperimentContext) -> Vec<String> {
    let owned = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
    match context {
        ExperimentContext::Preference { .. } => owned(&["B1", "B2"]),
        ExperimentContext::UrnLink { .. } => owned(&["Yes", "No"]),
        ExperimentContext::UrnGuess { .. } => owned(&["A", "B"]),
        ExperimentContext::TransferSend { endowment, .. } => integer_options(0, *endowment),
        ExperimentContext::TransferReturn { received, .. } => integer_options(0, *received),
        ExperimentContext::ImageDonation { .. } => owned(&["Give", "Withhold"]),
        ExperimentContext::Classification { taxonomy, .. } => {
            taxonomy.taxonomy().letters().map(|c| c.to_string()).collect()
        }
    }
}

pub fn integer_options(min: u32, max: u32) -> Vec<String> {
    (min..=max).map(|v| v.to_string()).collect()
}

fn format_for(context: &ExperimentContext, options: &[String]) -> Result<AnswerFormat, PromptError> {
    Ok(match context {
        ExperimentContext::TransferSend { .. } | ExperimentContext::TransferReturn { .. } => {
            let nums: Option<Vec<u32>> = options.iter().map(|o| o.parse().ok()).collect();
            let nums = nums.ok_or(PromptError::BadIntegerOptions)?;
            let (min, max) = (*nums.iter().min().unwrap(), *nums.iter().max().unwrap());
            if nums.len() as u64 != u64::from(max - min) + 1 {
                return Err(PromptError::BadIntegerOptions);
            }
            AnswerFormat::Integer { min, max }
        }
        ExperimentContext::Classification { .. } => AnswerFormat::MultiSelect,
        _ => AnswerFormat::Choice,
    })
}

fn answer_rule(format: AnswerFormat, options: &[String]) -> String {
    match format {
        AnswerFormat::Choice => {
            let listed: Vec<String> = options.iter().map(|o| format!("\"{o}\"")).collect();
            format!("Your answer must be exactly one of: {}.", listed.join(", "))
        }
        AnswerFormat::Integer { min, max } => {
            format!("Your answer must be a single whole number from {min} to {max}.")
        }
        AnswerFormat::MultiSelect => format!(
            "Your answer must list every letter that applies, separated by commas, chosen from: {}.",
            options.join(", ")
        ),
    }
}

fn body(context: &ExperimentContext) -> Result<String, PromptError> {
    use templates::*;
    match context {
        ExperimentContext::Preference { game, condition } => {
            let group_sentence = match condition {
                GroupCondition::NoGroup => String::new(),
                GroupCondition::Ingroup => trimmed(GROUP_IN).to_string(),
                GroupCondition::Outgroup => trimmed(GROUP_OUT).to_string(),
            };
            let history_sentence = match game.payoff_a1 {
                None => String::new(),
                Some(a1) => render(
                    trimmed(RESPONSE_HISTORY),
                    &[("a1_a", a1.a.to_string()), ("a1_b", a1.b.to_string())],
                )?,
            };
            render(
                trimmed(PREFERENCE),
                &[
                    ("group_sentence", group_sentence),
                    ("history_sentence", history_sentence),
                    ("b1_a", game.payoff_b1.a.to_string()),
                    ("b1_b", game.payoff_b1.b.to_string()),
                    ("b2_a", game.payoff_b2.a.to_string()),
                    ("b2_b", game.payoff_b2.b.to_string()),
                ],
            )
        }
        ExperimentContext::UrnLink {
            position,
            target,
            link_cost,
            draw,
            ..
        } => {
            let common = render(
                trimmed(URN_COMMON),
                &[("position", position.to_string()), ("draw", draw.to_string())],
            )?;
            let link = render(
                trimmed(URN_LINK),
                &[("link_cost", link_cost.to_string()), ("target", target.to_string())],
            )?;
            Ok(format!("{common}\n{link}"))
        }
        ExperimentContext::UrnGuess {
            position,
            draw,
            visible,
            links_formed,
            link_cost,
        } => {
            let common = render(
                trimmed(URN_COMMON),
                &[("position", position.to_string()), ("draw", draw.to_string())],
            )?;
            let visible_sentence = if visible.is_empty() {
                "You do not see any other participant's guess.".to_string()
            } else {
                let parts: Vec<String> = visible
                    .iter()
                    .map(|(p, g)| format!("participant {p} guessed urn {g}"))
                    .collect();
                format!("Through your links you see that {}.", parts.join(", "))
            };
            let guess = render(
                trimmed(URN_GUESS),
                &[
                    ("visible_sentence", visible_sentence),
                    ("links_formed", links_formed.to_string()),
                    ("link_cost", link_cost.to_string()),
                ],
            )?;
            Ok(format!("{common}\n{guess}"))
        }
        ExperimentContext::TransferSend { self_label, endowment } => render(
            trimmed(TRANSFER_SEND),
            &[("self_label", self_label.clone()), ("endowment", endowment.to_string())],
        ),
        ExperimentContext::TransferReturn {
            mode,
            self_label,
            sender_label,
            recipient_label,
            endowment,
            sent,
            received,
        } => {
            let recipient_sentence = match mode {
                TransferMode::Direct => format!(
                    "Any points you return go to participant {recipient_label}, the participant who sent you points."
                ),
                TransferMode::Indirect => format!(
                    "You cannot return points to participant {sender_label}. Any points you return go to participant {recipient_label}, who sent points to a different participant."
                ),
            };
            render(
                trimmed(TRANSFER_RETURN),
                &[
                    ("endowment", endowment.to_string()),
                    ("self_label", self_label.clone()),
                    ("received", received.to_string()),
                    ("sent", sent.to_string()),
                    ("sender_label", sender_label.clone()),
                    ("recipient_sentence", recipient_sentence),
                    ("recipient_label", recipient_label.clone()),
                ],
            )
        }
        ExperimentContext::ImageDonation {
            round,
            endowment,
            balance,
            donor_cost,
            benefit,
            receiver_gave,
            receiver_withheld,
        } => render(
            trimmed(IMAGE_DONOR),
            &[
                ("endowment", endowment.to_string()),
                ("round", round.to_string()),
                ("balance", balance.to_string()),
                ("donor_cost", donor_cost.to_string()),
                ("benefit", benefit.to_string()),
                ("receiver_gave", receiver_gave.to_string()),
                ("receiver_withheld", receiver_withheld.to_string()),
            ],
        ),
        ExperimentContext::Classification { taxonomy, reason } => {
            let block: Vec<String> = taxonomy
                .taxonomy()
                .options
                .iter()
                .map(|o| format!("{}) {}: {}", o.letter, o.label, o.description))
                .collect();
            render(
                trimmed(CLASSIFY),
                &[("options_block", block.join("\n")), ("reason", reason.clone())],
            )
        }
    }
}

/// Builds the full prompt for one decision. Output is a pure function of the inputs.
pub fn build_prompt(context: &ExperimentContext, option_set: &[String]) -> Result<PromptBundle, PromptError> {
    check_options(option_set)?;
    let format = format_for(context, option_set)?;
    let directive = render(
        trimmed(templates::DIRECTIVE),
        &[("answer_rule", answer_rule(format, option_set))],
    )?;
    let user_text = format!("{}\n\n{}", body(context)?, directive);
    Ok(PromptBundle {
        system_text: trimmed(templates::SYSTEM).to_string(),
        user_text,
        option_set: option_set.to_vec(),
        format,
    })
}

/// First `<tag>...</tag>` span; text outside it is never inspected.
fn tag_span<'a>(raw: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = raw.find(&open)? + open.len();
    let len = raw[start..].find(&close)?;
    Some(&raw[start..start + len])
}

fn reason_and_answer(raw: &str) -> Result<(String, String), ParseError> {
    let reason = tag_span(raw, "reason").ok_or_else(|| ParseError::MissingReasonTag { raw: raw.to_string() })?;
    if reason.trim().is_empty() {
        return Err(ParseError::EmptyReason { raw: raw.to_string() });
    }
    let answer = tag_span(raw, "answer").ok_or_else(|| ParseError::MissingAnswerTag { raw: raw.to_string() })?;
    Ok((reason.to_string(), answer.trim().to_string()))
}

/// Parses a templated response whose answer must be one of `option_set`
/// (case-insensitive; the canonical option spelling is returned).
pub fn parse_response(raw: &str, option_set: &[String]) -> Result<ParsedResponse, ParseError> {
    let (reason, answer) = reason_and_answer(raw)?;
    let canonical = option_set
        .iter()
        .find(|o| o.eq_ignore_ascii_case(&answer))
        .ok_or_else(|| ParseError::AnswerNotInOptionSet {
            answer: answer.clone(),
            raw: raw.to_string(),
        })?;
    Ok(ParsedResponse {
        reason,
        answer: canonical.clone(),
    })
}

/// Parses a whole-number answer in `[min, max]`.
pub fn parse_numeric_response(raw: &str, min: u32, max: u32) -> Result<(String, u32), ParseError> {
    let (reason, answer) = reason_and_answer(raw)?;
    match answer.parse::<u32>() {
        Ok(v) if (min..=max).contains(&v) => Ok((reason, v)),
        _ => Err(ParseError::NumericParseFailure {
            answer,
            raw: raw.to_string(),
        }),
    }
}

/// Parses a comma/space separated letter list. An empty list is allowed.
pub fn parse_multiselect(raw: &str, option_set: &[String]) -> Result<(String, Vec<String>), ParseError> {
    let (reason, answer) = reason_and_answer(raw)?;
    let mut picked = Vec::new();
    for token in answer.split(|c: char| c == ',' || c == ';' || c.is_whitespace()) {
        let token = token.trim().trim_end_matches(')').trim_end_matches('.');
        if token.is_empty() || token.eq_ignore_ascii_case("none") {
            continue;
        }
        let canonical = option_set
            .iter()
            .find(|o| o.eq_ignore_ascii_case(token))
            .ok_or_else(|| ParseError::AnswerNotInOptionSet {
                answer: answer.clone(),
                raw: raw.to_string(),
            })?;
        if !picked.contains(canonical) {
            picked.push(canonical.clone());
        }
    }
    picked.sort();
    Ok((reason, picked))
}

/// Renders a response in the tag template.
pub fn format_response(reason: &str, answer: &str) -> String {
    format!("<reason>{reason}</reason>\n<answer>{answer}</answer>")
}
