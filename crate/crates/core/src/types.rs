//! Domain types shared by every experiment engine.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

/// Points allocated to players A and B by one outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Payoff {
    pub a: u32,
    pub b: u32,
}

impl Payoff {
    pub const fn new(a: u32, b: u32) -> Self {
        Payoff { a, b }
    }

    pub fn total(&self) -> u64 {
        u64::from(self.a) + u64::from(self.b)
    }
}

impl fmt::Display for Payoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.a, self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GameKind {
    Dictator,
    ResponseGoodIntention,
    ResponseMisbehave,
}

/// One dictator or response game: B chooses between B1 and B2, possibly after
/// A declined the outside option A1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameSpec {
    pub game_id: String,
    pub kind: GameKind,
    pub payoff_a1: Option<Payoff>,
    pub payoff_b1: Payoff,
    pub payoff_b2: Payoff,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GameSpecError {
    #[error("game {0}: dictator games have no A1 option and response games require one")]
    KindMismatch(String),
    #[error("duplicate game id {0}")]
    DuplicateId(String),
}

impl GameSpec {
    pub fn new(
        game_id: impl Into<String>,
        kind: GameKind,
        payoff_a1: Option<Payoff>,
        payoff_b1: Payoff,
        payoff_b2: Payoff,
    ) -> Result<Self, GameSpecError> {
        let game_id = game_id.into();
        if (kind == GameKind::Dictator) != payoff_a1.is_none() {
            return Err(GameSpecError::KindMismatch(game_id));
        }
        Ok(GameSpec {
            game_id,
            kind,
            payoff_a1,
            payoff_b1,
            payoff_b2,
        })
    }

    pub fn payoff(&self, choice: BinaryChoice) -> Payoff {
        match choice {
            BinaryChoice::B1 => self.payoff_b1,
            BinaryChoice::B2 => self.payoff_b2,
        }
    }

    pub fn is_dictator(&self) -> bool {
        self.kind == GameKind::Dictator
    }
}

/// Checks that ids are unique across a fixture set.
pub fn validate_game_set(games: &[GameSpec]) -> Result<(), GameSpecError> {
    let mut seen = std::collections::BTreeSet::new();
    for g in games {
        if !seen.insert(g.game_id.as_str()) {
            return Err(GameSpecError::DuplicateId(g.game_id.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupCondition {
    NoGroup,
    Ingroup,
    Outgroup,
}

impl GroupCondition {
    pub const ALL: [GroupCondition; 3] = [
        GroupCondition::NoGroup,
        GroupCondition::Ingroup,
        GroupCondition::Outgroup,
    ];

    /// Same-group indicator: 1 for an ingroup match, 0 for outgroup, undefined without groups.
    pub fn indicator(self) -> Option<u8> {
        match self {
            GroupCondition::NoGroup => None,
            GroupCondition::Ingroup => Some(1),
            GroupCondition::Outgroup => Some(0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GroupCondition::NoGroup => "no_group",
            GroupCondition::Ingroup => "ingroup",
            GroupCondition::Outgroup => "outgroup",
        }
    }
}

impl fmt::Display for GroupCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for GroupCondition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "nogroup" | "none" => Ok(GroupCondition::NoGroup),
            "ingroup" => Ok(GroupCondition::Ingroup),
            "outgroup" => Ok(GroupCondition::Outgroup),
            _ => Err(format!("unknown group condition {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BinaryChoice {
    B1,
    B2,
}

impl BinaryChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            BinaryChoice::B1 => "B1",
            BinaryChoice::B2 => "B2",
        }
    }

    pub fn other(self) -> Self {
        match self {
            BinaryChoice::B1 => BinaryChoice::B2,
            BinaryChoice::B2 => BinaryChoice::B1,
        }
    }
}

impl fmt::Display for BinaryChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BinaryChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "B1" => Ok(BinaryChoice::B1),
            "B2" => Ok(BinaryChoice::B2),
            _ => Err(format!("not a binary choice: {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    SocialLearning,
    SocialPreference,
    Upstream,
    Downstream,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Experiment::SocialLearning => "social_learning",
            Experiment::SocialPreference => "social_preference",
            Experiment::Upstream => "upstream",
            Experiment::Downstream => "downstream",
        };
        f.write_str(s)
    }
}

/// Urn identity, also used for ball colours and guesses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Urn {
    A,
    B,
}

impl Urn {
    pub fn as_str(self) -> &'static str {
        match self {
            Urn::A => "A",
            Urn::B => "B",
        }
    }

    pub fn other(self) -> Self {
        match self {
            Urn::A => Urn::B,
            Urn::B => Urn::A,
        }
    }
}

impl fmt::Display for Urn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Urn {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(Urn::A),
            "B" | "b" => Ok(Urn::B),
            _ => Err(format!("not an urn: {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    Direct,
    Indirect,
}

/// Treatment parameters of a session; only the fields relevant to the
/// experiment are populated.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<GroupCondition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link_cost: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endowment: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub donor_cost: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer_mode: Option<TransferMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub template_version: String,
}

/// One elicited decision, with everything needed to audit or re-parse it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionEvent {
    pub agent_id: String,
    pub round: u32,
    pub position: u32,
    pub role_or_position: String,
    pub prompt_text: String,
    pub raw_response: String,
    pub parsed_choice: String,
    pub reason_text: String,
    /// Structured game state at decision time (draws, payoffs, counts, ...).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub context: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
}

/// A complete play-through; serialized as one JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub experiment: Experiment,
    pub condition: Condition,
    pub seed: u64,
    pub events: Vec<DecisionEvent>,
    pub created_at: DateTime<Utc>,
}

impl SessionRecord {
    pub fn new(
        session_id: impl Into<String>,
        experiment: Experiment,
        condition: Condition,
        seed: u64,
        created_at: DateTime<Utc>,
    ) -> Self {
        SessionRecord {
            session_id: session_id.into(),
            experiment,
            condition,
            seed,
            events: Vec::new(),
            created_at,
        }
    }

    /// A session is valid when every response parsed.
    pub fn is_valid(&self) -> bool {
        self.events.iter().all(|e| e.parse_error.is_none())
    }

    /// Events are ordered by round, then by position (non-decreasing; one
    /// position may record several decisions in a round).
    pub fn events_ordered(&self) -> bool {
        self.events
            .windows(2)
            .all(|w| (w[0].round, w[0].position) <= (w[1].round, w[1].position))
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("session record serializes")
    }
}

/// Timestamp used for records when the caller pins one (reproducible output)
/// or the current time otherwise.
pub fn timestamp_or_now(pinned: Option<DateTime<Utc>>) -> DateTime<Utc> {
    pinned.unwrap_or_else(Utc::now)
}

/// Per-session seed derived from a run seed (SplitMix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dictator_requires_absent_a1() {
        let p = Payoff::new(400, 400);
        assert!(GameSpec::new("x", GameKind::Dictator, None, p, p).is_ok());
        assert!(GameSpec::new("x", GameKind::Dictator, Some(p), p, p).is_err());
        assert!(GameSpec::new("x", GameKind::ResponseMisbehave, None, p, p).is_err());
    }

    #[test]
    fn group_indicator() {
        assert_eq!(GroupCondition::NoGroup.indicator(), None);
        assert_eq!(GroupCondition::Ingroup.indicator(), Some(1));
        assert_eq!(GroupCondition::Outgroup.indicator(), Some(0));
        assert_eq!("in-group".parse::<GroupCondition>(), Ok(GroupCondition::Ingroup));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let p = Payoff::new(1, 1);
        let g = GameSpec::new("Dict 1", GameKind::Dictator, None, p, p).unwrap();
        assert!(validate_game_set(&[g.clone(), g]).is_err());
    }

    #[test]
    fn event_order_check() {
        let mut r = SessionRecord::new("s", Experiment::SocialLearning, Condition::default(), 1, Utc::now());
        let ev = |round, position| DecisionEvent {
            agent_id: "a".into(),
            round,
            position,
            role_or_position: String::new(),
            prompt_text: String::new(),
            raw_response: String::new(),
            parsed_choice: String::new(),
            reason_text: String::new(),
            context: serde_json::Value::Null,
            parse_error: None,
        };
        r.events = vec![ev(0, 1), ev(0, 2), ev(0, 2), ev(1, 0)];
        assert!(r.events_ordered());
        r.events.push(ev(0, 3));
        assert!(!r.events_ordered());
    }

    #[test]
    fn derived_seeds_differ() {
        let a: Vec<u64> = (0..100).map(|i| derive_seed(7, i)).collect();
        let set: std::collections::BTreeSet<_> = a.iter().collect();
        assert_eq!(set.len(), 100);
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
