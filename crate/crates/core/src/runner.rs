//! Orchestration behind the command-line tool: running a configured
//! experiment, estimating models, computing analyses and exporting fixtures.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::agents::{
    remote_llm_agent, scripted_agent, Agent, AgentError, BayesianUrnPolicy, CRGroupPolicy, CRLogitPolicy,
    ScriptedPolicy,
};
use crate::analysis::{
    classify_motivations, collect_reasons, motivation_distribution, write_distribution_csv, write_labelings_csv,
    AnalysisError, KeywordClassifier, TaxonomyId,
};
use crate::estimation::{
    build_negative_reciprocity_design, build_positive_reciprocity_design, fit_cr, fit_cr_group, fit_logit_regression,
    EstimateTable, EstimationError, PreferenceDataset, RegressionModel,
};
use crate::fixtures::{builtin_game, builtin_game_fixtures, builtin_observed_b1_rates, reconstruct_choices, RECIPROCITY_TRIPLES};
use crate::indirect_reciprocity::{
    image_metrics, run_image_game, run_transfer_session, transfer_rows, write_image_csv, write_transfer_csv,
    IMAGE_AGENTS, TRANSFER_ENDOWMENT, TRANSFER_LABELS,
};
use crate::llm_client::ChatClient;
use crate::prompts::{build_prompt, default_options, ExperimentContext, PromptBundle};
use crate::session::{par_map, AgentFactory, SessionError, SessionMeta};
use crate::social_learning::{learning_metrics, run_urn_session, write_learning_csv, UrnWorld, N_POSITIONS};
use crate::social_preference::{
    b1_rates, observations_from_records, reciprocity_contrast, run_preference_battery, swm_rate, to_dataset,
    write_b1_rates_csv, write_observations_csv, BatteryOptions,
};
use crate::storage::{
    csv_writer, read_transcripts, write_manifest, write_transcripts, AgentSpec, ExperimentConfig, PolicySpec,
    RunManifest, SenderMode, StorageError,
};
use crate::types::{derive_seed, Experiment, GroupCondition, SessionRecord, TransferMode};

pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(StorageError),
    #[error("{0}")]
    InvalidRequest(String),
    #[error("backend failure: {0}")]
    Backend(SessionError),
    #[error(transparent)]
    Session(SessionError),
    #[error(transparent)]
    Storage(StorageError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error("{0} already exists; choose an empty output directory")]
    OutputExists(PathBuf),
}

impl From<SessionError> for RunError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Agent(AgentError::Backend { .. }) => RunError::Backend(e),
            other => RunError::Session(other),
        }
    }
}

impl From<StorageError> for RunError {
    fn from(e: StorageError) -> Self {
        RunError::Storage(e)
    }
}

impl RunError {
    /// Process exit code: 2 for configuration problems, 3 for backend
    /// failures, 4 for estimation failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::InvalidRequest(_) | RunError::OutputExists(_) => 2,
            RunError::Session(SessionError::Parameters(_)) => 2,
            RunError::Backend(_) => 3,
            RunError::Estimation(_) => 4,
            _ => 1,
        }
    }
}

/// Printable key/value report of a command.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    pub title: String,
    pub lines: Vec<(String, String)>,
    pub outputs: Vec<PathBuf>,
}

impl Summary {
    fn new(title: impl Into<String>) -> Self {
        Summary {
            title: title.into(),
            ..Default::default()
        }
    }

    fn add(&mut self, key: impl Into<String>, value: impl fmt::Display) {
        self.lines.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.lines.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.title)?;
        let width = self.lines.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in &self.lines {
            writeln!(f, "  {k:<width$}  {v}")?;
        }
        for p in &self.outputs {
            writeln!(f, "  wrote {}", p.display())?;
        }
        Ok(())
    }
}

fn rate_text(p: &crate::analysis::Proportion) -> String {
    match (p.rate(), p.std_error()) {
        (Some(r), Some(se)) => format!("{r:.4} (se {se:.4}, n {})", p.trials),
        _ => "n/a".into(),
    }
}

/// Scripted policy for the config's policy spec; the random stream is seeded later.
pub fn scripted_policy(spec: &PolicySpec) -> ScriptedPolicy {
    match spec.clone() {
        PolicySpec::BayesianUrn { self_weight } => ScriptedPolicy::BayesianUrn(BayesianUrnPolicy {
            self_weight,
            rng_seed: 0,
        }),
        PolicySpec::CrLogit { rho, sigma, gamma } => ScriptedPolicy::CrLogit(CRLogitPolicy {
            rho,
            sigma,
            gamma,
            rng_seed: 0,
        }),
        PolicySpec::CrLogitGroup {
            rho_in,
            sigma_in,
            rho_out,
            sigma_out,
            gamma,
        } => ScriptedPolicy::CrLogitGroup(CRGroupPolicy {
            rho_in,
            sigma_in,
            rho_out,
            sigma_out,
            gamma,
            rng_seed: 0,
        }),
        PolicySpec::Fixed { answer } => ScriptedPolicy::Fixed { answer },
        PolicySpec::FairSplit => ScriptedPolicy::FairSplit,
        PolicySpec::Selfish => ScriptedPolicy::Selfish,
        PolicySpec::ScoreThreshold { threshold } => ScriptedPolicy::ScoreThreshold { threshold },
        PolicySpec::RandomDonor { p_give } => ScriptedPolicy::RandomDonor { p_give },
    }
}

/// Agent constructor for the config's backend. Remote agents share one client.
pub fn agent_factory(spec: &AgentSpec) -> Result<Box<AgentFactory<'static>>, RunError> {
    match spec {
        AgentSpec::Scripted { policy } => {
            let policy = scripted_policy(policy);
            Ok(Box::new(move |id: &str, seed: u64| {
                Box::new(scripted_agent(id, policy.reseeded(seed), seed)) as Box<dyn Agent>
            }))
        }
        AgentSpec::Remote { model } => {
            let client = ChatClient::new(model.clone())
                .map_err(|e| RunError::Config(StorageError::DomainViolation(e.to_string())))?;
            let client = Arc::new(client);
            Ok(Box::new(move |id: &str, _seed: u64| {
                Box::new(remote_llm_agent(id, client.clone())) as Box<dyn Agent>
            }))
        }
    }
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Concurrent sessions; values below 1 mean 1.
    pub parallel: usize,
    /// Called with (sessions done, sessions total).
    pub progress: Option<&'a (dyn Fn(usize, usize) + Sync)>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<SessionRecord>,
    pub summary: Summary,
}

impl RunOutput {
    pub fn invalid_sessions(&self) -> usize {
        self.records.iter().filter(|r| !r.is_valid()).count()
    }
}

fn link_cost(config: &ExperimentConfig) -> u32 {
    config.condition.link_cost.unwrap_or(0) as u32
}

fn groups(config: &ExperimentConfig) -> Vec<GroupCondition> {
    config.condition.groups.clone().unwrap_or_else(|| GroupCondition::ALL.to_vec())
}

fn games(config: &ExperimentConfig) -> Vec<crate::types::GameSpec> {
    match &config.condition.games {
        Some(ids) => ids.iter().filter_map(|id| builtin_game(id)).collect(),
        None => builtin_game_fixtures(),
    }
}

fn transfer_modes(config: &ExperimentConfig) -> Vec<TransferMode> {
    match config.condition.transfer_mode {
        Some(m) => vec![m],
        None => vec![TransferMode::Direct, TransferMode::Indirect],
    }
}

fn image_cell(config: &ExperimentConfig) -> (u32, u32) {
    (
        config.condition.endowment.unwrap_or(7) as u32,
        config.condition.donor_cost.unwrap_or(2) as u32,
    )
}

/// Runs every session the config describes. Sessions are independent and
/// run on up to `opts.parallel` threads; results do not depend on it.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions<'_>) -> Result<RunOutput, RunError> {
    config.validate().map_err(RunError::Config)?;
    let factory = agent_factory(&config.agent)?;
    let created_at = config.created_at.unwrap_or_else(Utc::now);
    let parallel = opts.parallel.max(1);
    let done = AtomicUsize::new(0);
    let tick = |total: usize| {
        let d = done.fetch_add(1, Ordering::Relaxed) + 1;
        if let Some(p) = opts.progress {
            p(d, total);
        }
    };
    let seed = config.seed;
    let n = config.replicates as usize;

    let records: Vec<SessionRecord> = match config.experiment {
        Experiment::SocialLearning => {
            let cost = link_cost(config);
            let idx: Vec<usize> = (0..n).collect();
            let results = par_map(&idx, parallel, |_, &i| {
                let meta = SessionMeta::new(format!("sl-c{cost}-{:04}", i + 1), derive_seed(seed, i as u64), created_at);
                let mut agents = make_agents(&*factory, &meta, N_POSITIONS as usize, |p| format!("p{}", p + 1));
                let r = run_urn_session(&mut agents, cost, &meta).map(|o| o.record);
                tick(n);
                r
            });
            results.into_iter().collect::<Result<_, _>>()?
        }
        Experiment::SocialPreference => {
            let games = games(config);
            let groups = groups(config);
            let total = games.len() * n * groups.len();
            let counting = |id: &str, s: u64| {
                tick(total);
                factory(id, s)
            };
            let mut out = Vec::new();
            for (gi, &g) in groups.iter().enumerate() {
                let battery = run_preference_battery(
                    &counting,
                    &games,
                    g,
                    config.replicates,
                    derive_seed(seed, gi as u64),
                    &BatteryOptions {
                        created_at,
                        session_prefix: "sp-".into(),
                        parallel,
                    },
                )?;
                out.extend(battery.records);
            }
            out
        }
        Experiment::Upstream => {
            let sender = config.condition.sender.unwrap_or_default();
            let modes = transfer_modes(config);
            let cells: Vec<(TransferMode, usize)> = modes.iter().flat_map(|&m| (0..n).map(move |i| (m, i))).collect();
            let total = cells.len();
            let results = par_map(&cells, parallel, |k, &(mode, i)| {
                let name = if mode == TransferMode::Direct { "direct" } else { "indirect" };
                let meta = SessionMeta::new(format!("up-{name}-{:04}", i + 1), derive_seed(seed, k as u64), created_at);
                let mut agents = make_agents(&*factory, &meta, 4, |p| label_slug(TRANSFER_LABELS[p]));
                let r = run_transfer_session(&mut agents, mode, sender, &meta).map(|o| o.record);
                tick(total);
                r
            });
            results.into_iter().collect::<Result<_, _>>()?
        }
        Experiment::Downstream => {
            let (e, k) = image_cell(config);
            let idx: Vec<usize> = (0..n).collect();
            let results = par_map(&idx, parallel, |_, &i| {
                let meta = SessionMeta::new(format!("dn-e{e}-c{k}-{:04}", i + 1), derive_seed(seed, i as u64), created_at);
                let mut agents = make_agents(&*factory, &meta, IMAGE_AGENTS, |p| format!("a{}", p + 1));
                let r = run_image_game(&mut agents, e, k, &meta).map(|o| o.record);
                tick(n);
                r
            });
            results.into_iter().collect::<Result<_, _>>()?
        }
    };

    let mut summary = Summary::new(format!("run {}", config.experiment));
    summary.add("sessions", records.len());
    summary.add("invalid_sessions", records.iter().filter(|r| !r.is_valid()).count());
    Ok(RunOutput { records, summary })
}

fn label_slug(label: &str) -> String {
    label.replace('\'', "p")
}

fn make_agents(
    factory: &AgentFactory<'_>,
    meta: &SessionMeta,
    count: usize,
    label: impl Fn(usize) -> String,
) -> Vec<Box<dyn Agent>> {
    (0..count)
        .map(|p| factory(&format!("{}-{}", meta.session_id, label(p)), derive_seed(meta.seed, 1000 + p as u64)))
        .collect()
}

/// Writes transcripts, the experiment's metric CSVs and the manifest into
/// `out_dir`. Refuses to touch a directory that already holds transcripts.
pub fn write_run(
    output: &mut RunOutput,
    config: &ExperimentConfig,
    overrides: Vec<String>,
    started_at: DateTime<Utc>,
    out_dir: &Path,
) -> Result<(), RunError> {
    let transcripts = out_dir.join(TRANSCRIPTS_FILE);
    if transcripts.exists() {
        return Err(RunError::OutputExists(transcripts));
    }
    write_transcripts(&output.records, &transcripts)?;
    let mut outputs = vec![transcripts];
    if output.records.iter().any(SessionRecord::is_valid) {
        let metrics = experiment_metrics(config.experiment, &output.records, out_dir)?;
        output.summary.lines.extend(metrics.lines);
        outputs.extend(metrics.outputs);
    }
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut manifest = RunManifest::new(config.clone(), overrides, started_at);
    manifest.finished_at = Utc::now();
    manifest.sessions = output.records.len();
    manifest.invalid_sessions = output.invalid_sessions();
    manifest.outputs = outputs
        .iter()
        .map(|p| p.strip_prefix(out_dir).unwrap_or(p).display().to_string())
        .collect();
    write_manifest(&manifest, &manifest_path)?;
    outputs.push(manifest_path);
    output.summary.outputs = outputs;
    Ok(())
}

fn experiment_metrics(experiment: Experiment, records: &[SessionRecord], dir: &Path) -> Result<Summary, RunError> {
    let analysis = match experiment {
        Experiment::SocialLearning => Analysis::LearningMetrics,
        Experiment::SocialPreference => Analysis::Swm,
        Experiment::Upstream => Analysis::Transfers,
        Experiment::Downstream => Analysis::ImageMetrics,
    };
    let mut s = analyze_records(records, analysis, dir)?;
    if experiment == Experiment::SocialPreference {
        let obs = observations_from_records(records)?;
        let p = dir.join("b1_rates.csv");
        write_b1_rates_csv(&b1_rates(&obs), &p)?;
        s.outputs.push(p);
    }
    Ok(s)
}

/// First prompt the run would send, without building any agent or client.
pub fn first_prompt(config: &ExperimentConfig) -> Result<PromptBundle, RunError> {
    config.validate().map_err(RunError::Config)?;
    let seed = derive_seed(config.seed, 0);
    let ctx = match config.experiment {
        Experiment::SocialLearning => {
            let world = UrnWorld::sample(link_cost(config), seed);
            ExperimentContext::UrnGuess {
                position: 1,
                draw: world.draw(1),
                visible: Vec::new(),
                links_formed: 0,
                link_cost: world.link_cost,
            }
        }
        Experiment::SocialPreference => ExperimentContext::Preference {
            game: games(config).remove(0),
            condition: groups(config)[0],
        },
        Experiment::Upstream => match config.condition.sender.unwrap_or_default() {
            SenderMode::Elicited => ExperimentContext::TransferSend {
                self_label: TRANSFER_LABELS[0].into(),
                endowment: TRANSFER_ENDOWMENT,
            },
            sender => {
                let sent = match sender {
                    SenderMode::Fixed(x) => x as u32,
                    _ => TRANSFER_ENDOWMENT / 2,
                };
                let mode = transfer_modes(config)[0];
                ExperimentContext::TransferReturn {
                    mode,
                    self_label: TRANSFER_LABELS[1].into(),
                    sender_label: TRANSFER_LABELS[0].into(),
                    recipient_label: if mode == TransferMode::Direct { TRANSFER_LABELS[0] } else { TRANSFER_LABELS[2] }
                        .into(),
                    endowment: TRANSFER_ENDOWMENT,
                    sent,
                    received: 3 * sent,
                }
            }
        },
        Experiment::Downstream => {
            let (e, k) = image_cell(config);
            ExperimentContext::ImageDonation {
                round: 1,
                endowment: e,
                balance: i64::from(e),
                donor_cost: k,
                benefit: crate::indirect_reciprocity::IMAGE_BENEFIT,
                receiver_gave: 0,
                receiver_withheld: 0,
            }
        }
    };
    build_prompt(&ctx, &default_options(&ctx)).map_err(|e| RunError::Session(SessionError::Prompt(e)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Analysis {
    LearningMetrics,
    ImageMetrics,
    Swm,
    ReciprocityContrast,
    Motivations,
    Transfers,
}

impl std::str::FromStr for Analysis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "learning_metrics" => Analysis::LearningMetrics,
            "image_metrics" => Analysis::ImageMetrics,
            "swm" => Analysis::Swm,
            "reciprocity_contrast" => Analysis::ReciprocityContrast,
            "motivations" => Analysis::Motivations,
            "transfers" => Analysis::Transfers,
            _ => return Err(format!("unknown analysis {s:?}")),
        })
    }
}

pub fn analyze_transcripts(path: &Path, analysis: Analysis, out_dir: &Path) -> Result<Summary, RunError> {
    let records = read_transcripts(path)?;
    analyze_records(&records, analysis, out_dir)
}

pub fn analyze_records(records: &[SessionRecord], analysis: Analysis, dir: &Path) -> Result<Summary, RunError> {
    let mut s = Summary::new(format!("{analysis:?}"));
    match analysis {
        Analysis::LearningMetrics => {
            let m = learning_metrics(records)?;
            s.add("sessions", m.sessions);
            s.add("invalid_sessions", m.invalid_sessions);
            for (i, a) in m.accuracy.iter().enumerate() {
                s.add(format!("accuracy_position_{}", i + 1), rate_text(a));
            }
            s.add("total_links", m.total_links);
            s.add("mean_points", format!("{:.3}", m.mean_earnings()));
            s.outputs = write_learning_csv(&m, dir)?;
        }
        Analysis::ImageMetrics => {
            let m = image_metrics(records)?;
            s.add("sessions", m.sessions);
            s.add("invalid_sessions", m.invalid_sessions);
            for (score, p) in &m.by_score {
                s.add(format!("p_give_score_{score}"), rate_text(p));
            }
            s.outputs = write_image_csv(&m, dir)?;
        }
        Analysis::Swm => {
            let obs = observations_from_records(records)?;
            let rates = swm_rate(&obs)?;
            s.add("observations", obs.len());
            s.add("invalid", obs.iter().filter(|o| !o.is_valid()).count());
            let p = dir.join("swm_rates.csv");
            let mut w = csv_writer(&p)?;
            w.write_record(["condition", "swm_rate", "std_error", "n"]).map_err(|e| StorageError::csv(&p, e))?;
            for (cond, r) in &rates {
                s.add(format!("swm_{cond}"), rate_text(r));
                w.write_record([
                    cond.to_string(),
                    format!("{:.6}", r.rate().unwrap_or(f64::NAN)),
                    format!("{:.6}", r.std_error().unwrap_or(f64::NAN)),
                    r.trials.to_string(),
                ])
                .map_err(|e| StorageError::csv(&p, e))?;
            }
            w.flush().map_err(|e| StorageError::io(&p, e))?;
            let obs_path = dir.join("observations.csv");
            write_observations_csv(&obs, &obs_path)?;
            s.outputs = vec![p, obs_path];
        }
        Analysis::ReciprocityContrast => {
            let obs = observations_from_records(records)?;
            let contrasts = reciprocity_contrast(&RECIPROCITY_TRIPLES, &obs)?;
            let p = dir.join("reciprocity_contrast.csv");
            let mut w = csv_writer(&p)?;
            w.write_record(["dictator", "good_intention", "misbehave", "condition", "b1_dictator", "b1_good", "b1_bad"])
                .map_err(|e| StorageError::csv(&p, e))?;
            for c in &contrasts {
                let r = c.rates.map(|x| x.rate().map(|v| format!("{v:.6}")).unwrap_or_default());
                s.add(
                    format!("{}/{}/{} {}", c.dictator_id, c.good_id, c.bad_id, c.condition),
                    format!("{} {} {}", r[0], r[1], r[2]),
                );
                w.write_record([
                    c.dictator_id.clone(),
                    c.good_id.clone(),
                    c.bad_id.clone(),
                    c.condition.to_string(),
                    r[0].clone(),
                    r[1].clone(),
                    r[2].clone(),
                ])
                .map_err(|e| StorageError::csv(&p, e))?;
            }
            w.flush().map_err(|e| StorageError::io(&p, e))?;
            s.outputs = vec![p];
        }
        Analysis::Motivations => {
            let experiment = records.first().map(|r| r.experiment).ok_or(AnalysisError::Empty)?;
            let (taxonomy, kind) = match experiment {
                Experiment::SocialLearning => (TaxonomyId::SocialLearning, "urn_guess"),
                Experiment::Upstream => (TaxonomyId::Upstream, "transfer_return"),
                other => {
                    return Err(RunError::InvalidRequest(format!("no motivation taxonomy for {other} transcripts")))
                }
            };
            crate::analysis::require_experiment(records, experiment)?;
            let reasons = collect_reasons(records, |e| {
                e.context.get("kind").and_then(|k| k.as_str()) == Some(kind) && e.context.get("forced").is_none()
            });
            let labels = classify_motivations(&reasons, taxonomy, &mut KeywordClassifier);
            let dist = motivation_distribution(&labels, taxonomy)?;
            s.add("labeled", dist.labeled);
            s.add("abstained", dist.abstained);
            for (c, f) in &dist.frequencies {
                s.add(format!("share_{c}"), format!("{f:.4}"));
            }
            let lp = dir.join("motivation_labels.csv");
            write_labelings_csv(&labels, &lp)?;
            let dp = dir.join("motivation_frequencies.csv");
            write_distribution_csv(&dist, &dp)?;
            s.outputs = vec![lp, dp];
        }
        Analysis::Transfers => {
            let rows = transfer_rows(records)?;
            s.add("returns", rows.len());
            for mode in [TransferMode::Direct, TransferMode::Indirect] {
                let sel: Vec<_> = rows.iter().filter(|r| r.mode == mode && r.received > 0).collect();
                if !sel.is_empty() {
                    let ratio = sel.iter().map(|r| f64::from(r.returned) / f64::from(r.received)).sum::<f64>()
                        / sel.len() as f64;
                    s.add(format!("mean_return_share_{mode:?}").to_lowercase(), format!("{ratio:.4}"));
                }
            }
            let p = dir.join("transfers.csv");
            write_transfer_csv(&rows, &p)?;
            s.outputs = vec![p];
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateModel {
    Cr,
    CrGroup,
    PosRecip,
    NegRecip,
}

impl std::str::FromStr for EstimateModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "cr" => EstimateModel::Cr,
            "cr_group" => EstimateModel::CrGroup,
            "pos_recip" => EstimateModel::PosRecip,
            "neg_recip" => EstimateModel::NegRecip,
            _ => return Err(format!("unknown model {s:?}")),
        })
    }
}

/// Data to estimate on: the reconstructed fixture or a transcript file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EstimateSource {
    Table2,
    Transcripts(PathBuf),
}

impl EstimateSource {
    pub fn parse(s: &str) -> Self {
        if s == "table2" {
            EstimateSource::Table2
        } else {
            EstimateSource::Transcripts(PathBuf::from(s))
        }
    }
}

fn source_dataset(source: &EstimateSource, model: EstimateModel) -> Result<PreferenceDataset, RunError> {
    match source {
        EstimateSource::Table2 => {
            let conditions: &[GroupCondition] = match model {
                EstimateModel::Cr => &[GroupCondition::NoGroup],
                EstimateModel::CrGroup => &[GroupCondition::Ingroup, GroupCondition::Outgroup],
                _ => &GroupCondition::ALL,
            };
            Ok(PreferenceDataset::reconstructed(conditions))
        }
        EstimateSource::Transcripts(path) => {
            let records = read_transcripts(path)?;
            let obs = observations_from_records(&records)?;
            let data = to_dataset(&obs)?;
            Ok(match model {
                // the pooled model uses sessions without a group frame when there are any
                EstimateModel::Cr if data.rows().iter().any(|r| r.condition == GroupCondition::NoGroup) => {
                    data.filter(|r| r.condition == GroupCondition::NoGroup)
                }
                _ => data,
            })
        }
    }
}

/// Fits the requested model and writes one CSV per estimate table.
pub fn estimate(source: &EstimateSource, model: EstimateModel, out_dir: &Path) -> Result<(Vec<EstimateTable>, Summary), RunError> {
    let data = source_dataset(source, model)?;
    let mut tables = Vec::new();
    let mut summary = Summary::new(format!("estimate {model:?}"));
    summary.add("observations", data.len());
    match model {
        EstimateModel::Cr => tables.push(EstimateTable::from_cr("cr", &fit_cr::<f64>(&data)?)),
        EstimateModel::CrGroup => tables.push(EstimateTable::from_group("cr_group", &fit_cr_group::<f64>(&data)?)),
        EstimateModel::PosRecip | EstimateModel::NegRecip => {
            for m in RegressionModel::ALL {
                let (design, y) = if model == EstimateModel::PosRecip {
                    build_positive_reciprocity_design(data.rows(), m)?
                } else {
                    build_negative_reciprocity_design(data.rows(), m)?
                };
                let fit = fit_logit_regression::<f64>(&design, &y)?;
                let name = if model == EstimateModel::PosRecip { "pos_recip" } else { "neg_recip" };
                tables.push(EstimateTable::from_logit(&format!("{name} {}", m.label()), &fit));
            }
        }
    }
    for (i, t) in tables.iter().enumerate() {
        let file = if tables.len() == 1 {
            format!("estimate_{}.csv", t.title)
        } else {
            format!("estimate_{}_{}.csv", t.title.split(' ').next().unwrap_or("model"), i + 1)
        };
        let p = out_dir.join(file);
        t.write_csv(&p)?;
        summary.outputs.push(p);
    }
    Ok((tables, summary))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureKind {
    Games,
    Rates,
    Reconstructed,
}

impl std::str::FromStr for FixtureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "games" => FixtureKind::Games,
            "rates" => FixtureKind::Rates,
            "reconstructed" => FixtureKind::Reconstructed,
            _ => return Err(format!("unknown fixture set {s:?}")),
        })
    }
}

/// Renders a built-in fixture set as CSV text.
pub fn fixture_csv(kind: FixtureKind) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let opt = |x: Option<u32>| x.map(|v| v.to_string()).unwrap_or_default();
    match kind {
        FixtureKind::Games => {
            w.write_record(["game_id", "kind", "pi_a_a1", "pi_b_a1", "pi_a_b1", "pi_b_b1", "pi_a_b2", "pi_b_b2"])
                .expect("in-memory write");
            for g in builtin_game_fixtures() {
                w.write_record([
                    g.game_id.clone(),
                    format!("{:?}", g.kind),
                    opt(g.payoff_a1.map(|p| p.a)),
                    opt(g.payoff_a1.map(|p| p.b)),
                    g.payoff_b1.a.to_string(),
                    g.payoff_b1.b.to_string(),
                    g.payoff_b2.a.to_string(),
                    g.payoff_b2.b.to_string(),
                ])
                .expect("in-memory write");
            }
        }
        FixtureKind::Rates => {
            w.write_record(["game_id", "condition", "b1_rate"]).expect("in-memory write");
            let order: Vec<String> = builtin_game_fixtures().into_iter().map(|g| g.game_id).collect();
            let rates = builtin_observed_b1_rates();
            for id in &order {
                for c in GroupCondition::ALL {
                    w.write_record([id.clone(), c.to_string(), format!("{:.3}", rates[&(id.clone(), c)])])
                        .expect("in-memory write");
                }
            }
        }
        FixtureKind::Reconstructed => {
            w.write_record(["game_id", "condition", "replicate", "choice"]).expect("in-memory write");
            for c in GroupCondition::ALL {
                let mut rep = 0;
                let mut last = String::new();
                for rc in reconstruct_choices(c) {
                    if rc.game.game_id != last {
                        rep = 0;
                        last = rc.game.game_id.clone();
                    }
                    rep += 1;
                    w.write_record([rc.game.game_id, c.to_string(), rep.to_string(), rc.choice.to_string()])
                        .expect("in-memory write");
                }
            }
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::ConditionSpec;

    fn config(experiment: Experiment, policy: PolicySpec, replicates: u32) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(experiment, AgentSpec::Scripted { policy }, replicates, 7);
        c.created_at = Some("2024-05-01T00:00:00Z".parse().unwrap());
        c
    }

    #[test]
    fn urn_run_is_deterministic_across_thread_counts() {
        let mut c = config(Experiment::SocialLearning, PolicySpec::BayesianUrn { self_weight: 1.0 }, 20);
        c.condition = ConditionSpec {
            link_cost: Some(0),
            ..Default::default()
        };
        let a = run_experiment(&c, &RunOptions::default()).unwrap();
        let b = run_experiment(&c, &RunOptions { parallel: 4, progress: None }).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.len(), 20);
        assert_eq!(a.records[0].session_id, "sl-c0-0001");
    }

    #[test]
    fn every_experiment_runs_and_writes() {
        let mut cases = vec![
            config(Experiment::SocialPreference, PolicySpec::CrLogit { rho: 0.4, sigma: -0.1, gamma: 0.01 }, 2),
            config(Experiment::Upstream, PolicySpec::FairSplit, 3),
            config(Experiment::Downstream, PolicySpec::ScoreThreshold { threshold: 0 }, 2),
        ];
        let mut sl = config(Experiment::SocialLearning, PolicySpec::BayesianUrn { self_weight: 1.0 }, 3);
        sl.condition.link_cost = Some(4);
        cases.push(sl);
        for c in cases {
            let dir = tempfile::tempdir().unwrap();
            let mut out = run_experiment(&c, &RunOptions::default()).unwrap();
            write_run(&mut out, &c, vec![], Utc::now(), dir.path()).unwrap();
            let back = read_transcripts(&dir.path().join(TRANSCRIPTS_FILE)).unwrap();
            assert_eq!(back, out.records);
            assert!(dir.path().join(MANIFEST_FILE).exists());
            assert!(out.summary.outputs.len() >= 3, "{:?}", out.summary);
            assert!(matches!(
                write_run(&mut out, &c, vec![], Utc::now(), dir.path()),
                Err(RunError::OutputExists(_))
            ));
            assert!(!first_prompt(&c).unwrap().user_text.is_empty());
        }
    }

    #[test]
    fn upstream_defaults_to_both_modes() {
        let c = config(Experiment::Upstream, PolicySpec::FairSplit, 2);
        let out = run_experiment(&c, &RunOptions::default()).unwrap();
        let ids: Vec<&str> = out.records.iter().map(|r| r.session_id.as_str()).collect();
        assert_eq!(ids, ["up-direct-0001", "up-direct-0002", "up-indirect-0001", "up-indirect-0002"]);
    }

    #[test]
    fn invalid_config_is_a_config_error() {
        let c = config(Experiment::SocialLearning, PolicySpec::BayesianUrn { self_weight: 1.0 }, 2);
        let e = run_experiment(&c, &RunOptions::default()).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn table2_estimates() {
        let dir = tempfile::tempdir().unwrap();
        let (t, s) = estimate(&EstimateSource::Table2, EstimateModel::Cr, dir.path()).unwrap();
        assert_eq!(s.get("observations"), Some("330"));
        assert!(t[0].get("rho").is_some());
        let (t, _) = estimate(&EstimateSource::Table2, EstimateModel::PosRecip, dir.path()).unwrap();
        assert_eq!(t.len(), 3);
        let (t, _) = estimate(&EstimateSource::Table2, EstimateModel::NegRecip, dir.path()).unwrap();
        assert_eq!(t.len(), 3);
    }

    #[test]
    fn empty_transcripts_are_an_estimation_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        std::fs::write(&p, "").unwrap();
        let e = estimate(&EstimateSource::Transcripts(p), EstimateModel::Cr, dir.path()).unwrap_err();
        assert_eq!(e.exit_code(), 4, "{e}");
    }

    #[test]
    fn fixture_tables() {
        assert_eq!(fixture_csv(FixtureKind::Games).lines().count(), 23);
        assert_eq!(fixture_csv(FixtureKind::Rates).lines().count(), 67);
        assert_eq!(fixture_csv(FixtureKind::Reconstructed).lines().count(), 1 + 3 * 22 * 15);
    }

    #[test]
    fn analysis_kind_mismatch() {
        let c = config(Experiment::Upstream, PolicySpec::Selfish, 1);
        let out = run_experiment(&c, &RunOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let e = analyze_records(&out.records, Analysis::LearningMetrics, dir.path()).unwrap_err();
        assert!(matches!(e, RunError::Analysis(AnalysisError::ExperimentMismatch { .. })));
        let s = analyze_records(&out.records, Analysis::Motivations, dir.path()).unwrap();
        assert!(s.get("labeled").is_some());
    }
}
