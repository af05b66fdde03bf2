//! Flat-file persistence: JSON experiment configs, JSONL transcripts, CSV
//! results and a per-run manifest.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixtures::builtin_game;
use crate::llm_client::ModelConfig;
use crate::prompts::TEMPLATE_VERSION;
use crate::types::{Experiment, GroupCondition, SessionRecord, TransferMode};

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: csv error: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: unknown key {key:?}")]
    UnknownKey { path: PathBuf, key: String },
    #[error("domain violation: {0}")]
    DomainViolation(String),
}

impl StorageError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        StorageError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn csv(path: &Path, e: impl std::fmt::Display) -> Self {
        StorageError::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }

    fn json(path: &Path, e: &serde_json::Error, line_offset: usize) -> Self {
        let message = e.to_string();
        if let Some(key) = message
            .strip_prefix("unknown field `")
            .and_then(|rest| rest.split('`').next())
        {
            return StorageError::UnknownKey {
                path: path.to_path_buf(),
                key: key.to_string(),
            };
        }
        StorageError::Parse {
            path: path.to_path_buf(),
            line: e.line() + line_offset,
            column: e.column(),
            message,
        }
    }
}

/// CSV writer creating parent directories as needed.
pub fn csv_writer(path: &Path) -> Result<csv::Writer<File>, StorageError> {
    ensure_parent(path)?;
    let f = File::create(path).map_err(|e| StorageError::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn ensure_parent(path: &Path) -> Result<(), StorageError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| StorageError::io(dir, e)),
        _ => Ok(()),
    }
}

/// Scripted decision rule named in a config. Per-session seeds are derived
/// from the run seed, so policies carry no seed here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    BayesianUrn {
        #[serde(default = "one")]
        self_weight: f64,
    },
    CrLogit {
        rho: f64,
        sigma: f64,
        gamma: f64,
    },
    CrLogitGroup {
        rho_in: f64,
        sigma_in: f64,
        rho_out: f64,
        sigma_out: f64,
        gamma: f64,
    },
    Fixed {
        answer: String,
    },
    FairSplit,
    Selfish,
    ScoreThreshold {
        threshold: i64,
    },
    RandomDonor {
        p_give: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum AgentSpec {
    Scripted { policy: PolicySpec },
    Remote { model: ModelConfig },
}

impl AgentSpec {
    pub fn is_remote(&self) -> bool {
        matches!(self, AgentSpec::Remote { .. })
    }
}

/// How the amount forwarded to an upstream receiver is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SenderMode {
    /// Uniform on 0..=endowment; only the return decision is elicited.
    #[default]
    Randomized,
    Fixed(i64),
    /// The sender agent is asked how much to send.
    Elicited,
}

/// Treatment parameters; which keys apply depends on the experiment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link_cost: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<GroupCondition>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub games: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer_mode: Option<TransferMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sender: Option<SenderMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endowment: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub donor_cost: Option<i64>,
}

/// Studied (endowment, donor cost) cells of the image-scoring game.
pub const IMAGE_CONDITIONS: [(u32, u32); 6] = [(7, 1), (7, 2), (7, 3), (7, 4), (4, 2), (13, 2)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub condition: ConditionSpec,
    pub agent: AgentSpec,
    pub replicates: u32,
    pub seed: u64,
    #[serde(default = "current_template_version")]
    pub template_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Pins record timestamps so reruns are byte-identical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<DateTime<Utc>>,
}

fn current_template_version() -> String {
    TEMPLATE_VERSION.to_string()
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment, agent: AgentSpec, replicates: u32, seed: u64) -> Self {
        ExperimentConfig {
            experiment,
            condition: ConditionSpec::default(),
            agent,
            replicates,
            seed,
            template_version: current_template_version(),
            output_dir: None,
            created_at: None,
        }
    }

    /// Checks every parameter against the domain the engine accepts.
    pub fn validate(&self) -> Result<(), StorageError> {
        let bad = |m: String| Err(StorageError::DomainViolation(m));
        let c = &self.condition;
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if self.template_version != TEMPLATE_VERSION {
            return bad(format!(
                "template_version {} is not supported (this build renders {TEMPLATE_VERSION})",
                self.template_version
            ));
        }
        let mut allowed: Vec<&str> = Vec::new();
        match self.experiment {
            Experiment::SocialLearning => {
                allowed.push("link_cost");
                match c.link_cost {
                    None => return bad("social_learning requires condition.link_cost".into()),
                    Some(v) if v < 0 || v > i64::from(u32::MAX) => {
                        return bad(format!("link_cost must be a non-negative integer, got {v}"))
                    }
                    _ => {}
                }
            }
            Experiment::SocialPreference => {
                allowed.extend(["groups", "games"]);
                if let Some(g) = &c.groups {
                    if g.is_empty() {
                        return bad("groups must not be empty".into());
                    }
                }
                if let Some(games) = &c.games {
                    if games.is_empty() {
                        return bad("games must not be empty".into());
                    }
                    if let Some(id) = games.iter().find(|id| builtin_game(id).is_none()) {
                        return bad(format!("unknown game id {id:?}"));
                    }
                }
            }
            Experiment::Upstream => {
                allowed.extend(["transfer_mode", "sender"]);
                if let Some(SenderMode::Fixed(x)) = c.sender {
                    if !(0..=10).contains(&x) {
                        return bad(format!("fixed sent amount must be within 0..=10, got {x}"));
                    }
                }
            }
            Experiment::Downstream => {
                allowed.extend(["endowment", "donor_cost"]);
                let e = c.endowment.unwrap_or(7);
                let k = c.donor_cost.unwrap_or(2);
                if !IMAGE_CONDITIONS.iter().any(|&(ce, ck)| i64::from(ce) == e && i64::from(ck) == k) {
                    return bad(format!("(endowment {e}, donor_cost {k}) is not a studied image-game cell"));
                }
            }
        }
        let present = [
            ("link_cost", c.link_cost.is_some()),
            ("groups", c.groups.is_some()),
            ("games", c.games.is_some()),
            ("transfer_mode", c.transfer_mode.is_some()),
            ("sender", c.sender.is_some()),
            ("endowment", c.endowment.is_some()),
            ("donor_cost", c.donor_cost.is_some()),
        ];
        if let Some((key, _)) = present.iter().find(|(k, p)| *p && !allowed.contains(k)) {
            return bad(format!("condition.{key} does not apply to {}", self.experiment));
        }
        match &self.agent {
            AgentSpec::Remote { model } => model.validate().map_err(StorageError::DomainViolation)?,
            AgentSpec::Scripted { policy } => validate_policy(self.experiment, policy)?,
        }
        Ok(())
    }
}

fn validate_policy(experiment: Experiment, policy: &PolicySpec) -> Result<(), StorageError> {
    let bad = |m: String| Err(StorageError::DomainViolation(m));
    let finite = |vals: &[f64]| vals.iter().all(|v| v.is_finite());
    let fits = match policy {
        PolicySpec::BayesianUrn { self_weight } => {
            if !(*self_weight > 0.0 && *self_weight <= 1.0) {
                return bad(format!("self_weight must lie in (0, 1], got {self_weight}"));
            }
            experiment == Experiment::SocialLearning
        }
        PolicySpec::CrLogit { rho, sigma, gamma } => {
            if !finite(&[*rho, *sigma, *gamma]) {
                return bad("policy parameters must be finite".into());
            }
            experiment == Experiment::SocialPreference
        }
        PolicySpec::CrLogitGroup {
            rho_in,
            sigma_in,
            rho_out,
            sigma_out,
            gamma,
        } => {
            if !finite(&[*rho_in, *sigma_in, *rho_out, *sigma_out, *gamma]) {
                return bad("policy parameters must be finite".into());
            }
            experiment == Experiment::SocialPreference
        }
        PolicySpec::Fixed { answer } => {
            if answer.trim().is_empty() {
                return bad("fixed answer must not be empty".into());
            }
            true
        }
        PolicySpec::FairSplit | PolicySpec::Selfish => experiment == Experiment::Upstream,
        PolicySpec::ScoreThreshold { .. } => experiment == Experiment::Downstream,
        PolicySpec::RandomDonor { p_give } => {
            if !(0.0..=1.0).contains(p_give) {
                return bad(format!("p_give must lie in [0, 1], got {p_give}"));
            }
            experiment == Experiment::Downstream
        }
    };
    if fits {
        Ok(())
    } else {
        bad(format!("policy {policy:?} cannot play {experiment}"))
    }
}

/// Parses and validates a config document. Unknown keys are errors.
pub fn parse_config(text: &str, path: &Path) -> Result<ExperimentConfig, StorageError> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| StorageError::json(path, &e, 0))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, StorageError> {
    let text = fs::read_to_string(path).map_err(|e| StorageError::io(path, e))?;
    parse_config(&text, path)
}

pub fn save_config(config: &ExperimentConfig, path: &Path) -> Result<(), StorageError> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(config).expect("config serializes");
    fs::write(path, text + "\n").map_err(|e| StorageError::io(path, e))
}

/// Appends one JSON line per record and syncs the file. Returns the number written.
pub fn write_transcripts(records: &[SessionRecord], path: &Path) -> Result<usize, StorageError> {
    ensure_parent(path)?;
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| StorageError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", r.to_json_line()).map_err(|e| StorageError::io(path, e))?;
    }
    let file = w.into_inner().map_err(|e| StorageError::io(path, e.into_error()))?;
    file.sync_all().map_err(|e| StorageError::io(path, e))?;
    Ok(records.len())
}

/// Reads a JSONL transcript; blank lines are skipped.
pub fn read_transcripts(path: &Path) -> Result<Vec<SessionRecord>, StorageError> {
    let f = File::open(path).map_err(|e| StorageError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| StorageError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| StorageError::json(path, &e, i))?);
    }
    Ok(out)
}

/// Audit record written beside every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    /// Command-line overrides applied on top of the config file, as `flag=value`.
    pub overrides: Vec<String>,
    pub code_version: String,
    pub template_version: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub sessions: usize,
    pub invalid_sessions: usize,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(config: ExperimentConfig, overrides: Vec<String>, started_at: DateTime<Utc>) -> Self {
        RunManifest {
            template_version: config.template_version.clone(),
            config,
            overrides,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at,
            finished_at: started_at,
            sessions: 0,
            invalid_sessions: 0,
            outputs: Vec::new(),
        }
    }
}

pub fn write_manifest(manifest: &RunManifest, path: &Path) -> Result<(), StorageError> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| StorageError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Condition;
    use proptest::prelude::*;

    fn learning_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::new(
            Experiment::SocialLearning,
            AgentSpec::Scripted {
                policy: PolicySpec::BayesianUrn { self_weight: 1.0 },
            },
            100,
            7,
        );
        c.condition.link_cost = Some(4);
        c
    }

    #[test]
    fn minimal_config_parses() {
        let text = r#"{"experiment":"social_learning","condition":{"link_cost":4},
            "agent":{"backend":"scripted","policy":{"kind":"bayesian_urn"}},
            "replicates":100,"seed":7}"#;
        let cfg = parse_config(text, Path::new("c.json")).unwrap();
        assert_eq!(cfg, learning_config());
    }

    #[test]
    fn unknown_key_rejected() {
        let text = r#"{"experiment":"social_learning","condition":{"link_cost":4},
            "agent":{"backend":"scripted","policy":{"kind":"bayesian_urn"}},
            "replicats":100,"seed":7}"#;
        match parse_config(text, Path::new("c.json")) {
            Err(StorageError::UnknownKey { key, .. }) => assert_eq!(key, "replicats"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negative_cost_is_domain_violation() {
        let text = r#"{"experiment":"social_learning","condition":{"link_cost":-1},
            "agent":{"backend":"scripted","policy":{"kind":"bayesian_urn"}},
            "replicates":100,"seed":7}"#;
        assert!(matches!(parse_config(text, Path::new("c.json")), Err(StorageError::DomainViolation(_))));
    }

    #[test]
    fn syntax_error_has_position() {
        let text = "{\n  \"experiment\": \"social_learning\",\n  \"seed\": 7,,\n}";
        match parse_config(text, Path::new("c.json")) {
            Err(StorageError::Parse { line, column, .. }) => {
                assert_eq!(line, 3);
                assert!(column > 0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mismatched_policy_and_cells_rejected() {
        let mut c = learning_config();
        c.agent = AgentSpec::Scripted {
            policy: PolicySpec::FairSplit,
        };
        assert!(c.validate().is_err());
        let mut d = ExperimentConfig::new(
            Experiment::Downstream,
            AgentSpec::Scripted {
                policy: PolicySpec::ScoreThreshold { threshold: 0 },
            },
            1,
            1,
        );
        d.validate().unwrap();
        d.condition.endowment = Some(13);
        d.condition.donor_cost = Some(4);
        assert!(d.validate().is_err());
        let mut l = learning_config();
        l.condition.endowment = Some(7);
        assert!(l.validate().is_err());
    }

    proptest! {
        #[test]
        fn config_round_trip(cost in 0i64..1000, reps in 1u32..500, seed in any::<u64>(), pin in proptest::bool::ANY) {
            let mut c = learning_config();
            c.condition.link_cost = Some(cost);
            c.replicates = reps;
            c.seed = seed;
            if pin {
                c.created_at = Some("2024-01-02T03:04:05Z".parse().unwrap());
            }
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("cfg.json");
            save_config(&c, &p).unwrap();
            prop_assert_eq!(load_config(&p).unwrap(), c);
        }
    }

    fn record(i: u32) -> SessionRecord {
        SessionRecord::new(
            format!("s{i}"),
            Experiment::Upstream,
            Condition {
                transfer_mode: Some(TransferMode::Direct),
                template_version: TEMPLATE_VERSION.into(),
                ..Default::default()
            },
            u64::from(i),
            "2024-01-02T03:04:05Z".parse().unwrap(),
        )
    }

    #[test]
    fn transcripts_append_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t/transcripts.jsonl");
        assert_eq!(write_transcripts(&[record(0), record(1)], &p).unwrap(), 2);
        let three: Vec<_> = (2..5).map(record).collect();
        assert_eq!(write_transcripts(&three, &p).unwrap(), 3);
        let back = read_transcripts(&p).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back[2], three[0]);
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().nth(4).unwrap(), three[2].to_json_line());
    }

    #[test]
    fn unwritable_path_errors() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        fs::write(&file, "x").unwrap();
        let err = write_transcripts(&[record(0)], &file.join("sub/t.jsonl")).unwrap_err();
        assert!(matches!(err, StorageError::Io { .. }));
    }
}
