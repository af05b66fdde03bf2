//! Upstream transfer game and downstream image-scoring donation game.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agents::Agent;
use crate::analysis::{require_experiment, AnalysisError, Proportion};
use crate::prompts::{default_options, ExperimentContext, TEMPLATE_VERSION};
use crate::session::{context_field, context_kind, elicit, SessionError, SessionMeta, Slot};
use crate::storage::{csv_writer, SenderMode, StorageError};
use crate::types::{Condition, Experiment, SessionRecord, TransferMode};

pub const TRANSFER_ENDOWMENT: u32 = 10;
pub const TRANSFER_MULTIPLIER: u32 = 3;
pub const TRANSFER_LABELS: [&str; 4] = ["A", "B", "A'", "B'"];

/// One sender/receiver pair of the transfer game.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferSession {
    pub mode: TransferMode,
    pub endowment: u32,
    pub multiplier: u32,
    pub sender: String,
    pub receiver: String,
    /// Who the receiver's return goes to.
    pub recipient: String,
    pub sent: u32,
    /// `None` when the receiver's answer did not parse.
    pub returned: Option<u32>,
}

impl TransferSession {
    pub fn received(&self) -> u32 {
        self.multiplier * self.sent
    }
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub record: SessionRecord,
    pub pairs: Vec<TransferSession>,
}

pub fn transfer_condition(mode: TransferMode) -> Condition {
    Condition {
        transfer_mode: Some(mode),
        endowment: Some(TRANSFER_ENDOWMENT),
        template_version: TEMPLATE_VERSION.to_string(),
        ..Default::default()
    }
}

/// Plays A→B and A'→B'. In direct mode each receiver returns to its own
/// sender; in indirect mode B returns to A' and B' to A. A receiver with
/// nothing to return is not asked.
pub fn run_transfer_session(
    agents: &mut [Box<dyn Agent>],
    mode: TransferMode,
    sender: SenderMode,
    meta: &SessionMeta,
) -> Result<TransferOutcome, SessionError> {
    if agents.len() != 4 {
        return Err(SessionError::AgentCount {
            expected: 4,
            got: agents.len(),
        });
    }
    if let SenderMode::Fixed(x) = sender {
        if !(0..=i64::from(TRANSFER_ENDOWMENT)).contains(&x) {
            return Err(SessionError::Parameters(format!("fixed send {x} outside 0..={TRANSFER_ENDOWMENT}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(meta.seed);
    let mut record = SessionRecord::new(
        meta.session_id.clone(),
        Experiment::Upstream,
        transfer_condition(mode),
        meta.seed,
        meta.created_at,
    );
    for a in agents.iter_mut() {
        a.reset();
    }

    // (sender index, receiver index, recipient index)
    let routes = match mode {
        TransferMode::Direct => [(0, 1, 0), (2, 3, 2)],
        TransferMode::Indirect => [(0, 1, 2), (2, 3, 0)],
    };
    let mut sent = [0u32; 2];
    for (k, &(s, _, _)) in routes.iter().enumerate() {
        sent[k] = match sender {
            SenderMode::Randomized => rng.gen_range(0..=TRANSFER_ENDOWMENT),
            SenderMode::Fixed(x) => x as u32,
            SenderMode::Elicited => {
                let ctx = ExperimentContext::TransferSend {
                    self_label: TRANSFER_LABELS[s].into(),
                    endowment: TRANSFER_ENDOWMENT,
                };
                let slot = Slot {
                    round: 0,
                    position: s as u32 + 1,
                    role: TRANSFER_LABELS[s].into(),
                };
                let (event, answer) = elicit(agents[s].as_mut(), &ctx, &default_options(&ctx), slot, None)?;
                record.events.push(event);
                match answer.and_then(|a| a.parse().ok()) {
                    Some(x) => x,
                    None => return Ok(TransferOutcome { record, pairs: Vec::new() }),
                }
            }
        };
    }

    let mut pairs = Vec::new();
    for (k, &(s, r, to)) in routes.iter().enumerate() {
        let mut pair = TransferSession {
            mode,
            endowment: TRANSFER_ENDOWMENT,
            multiplier: TRANSFER_MULTIPLIER,
            sender: TRANSFER_LABELS[s].into(),
            receiver: TRANSFER_LABELS[r].into(),
            recipient: TRANSFER_LABELS[to].into(),
            sent: sent[k],
            returned: None,
        };
        let ctx = ExperimentContext::TransferReturn {
            mode,
            self_label: pair.receiver.clone(),
            sender_label: pair.sender.clone(),
            recipient_label: pair.recipient.clone(),
            endowment: TRANSFER_ENDOWMENT,
            sent: pair.sent,
            received: pair.received(),
        };
        let slot = Slot {
            round: 1,
            position: r as u32 + 1,
            role: pair.receiver.clone(),
        };
        if pair.received() == 0 {
            record.events.push(forced_zero(agents[r].id(), &ctx, slot));
            pair.returned = Some(0);
            pairs.push(pair);
            continue;
        }
        let (event, answer) = elicit(agents[r].as_mut(), &ctx, &default_options(&ctx), slot, None)?;
        record.events.push(event);
        pair.returned = answer.and_then(|a| a.parse().ok());
        let failed = pair.returned.is_none();
        pairs.push(pair);
        if failed {
            break;
        }
    }
    Ok(TransferOutcome { record, pairs })
}

fn forced_zero(agent_id: &str, ctx: &ExperimentContext, slot: Slot) -> crate::types::DecisionEvent {
    let mut context = serde_json::to_value(ctx).expect("context serializes");
    context["forced"] = json!(true);
    crate::types::DecisionEvent {
        agent_id: agent_id.to_string(),
        round: slot.round,
        position: slot.position,
        role_or_position: slot.role,
        prompt_text: String::new(),
        raw_response: String::new(),
        parsed_choice: "0".into(),
        reason_text: String::new(),
        context,
        parse_error: None,
    }
}

/// One return decision as stored in a transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRow {
    pub session_id: String,
    pub mode: TransferMode,
    pub sent: u32,
    pub received: u32,
    pub returned: u32,
}

/// Return decisions of all valid sessions.
pub fn transfer_rows(records: &[SessionRecord]) -> Result<Vec<TransferRow>, AnalysisError> {
    require_experiment(records, Experiment::Upstream)?;
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.is_valid()) {
        for e in r.events.iter().filter(|e| context_kind(e) == Some("transfer_return")) {
            let bad = |m: &str| AnalysisError::MalformedEvent {
                session_id: r.session_id.clone(),
                message: m.to_string(),
            };
            let received: u32 = context_field(e, "received").ok_or_else(|| bad("return without received"))?;
            let returned: u32 = e.parsed_choice.parse().map_err(|_| bad("unparsed return"))?;
            if returned > received {
                return Err(bad("return exceeds amount received"));
            }
            out.push(TransferRow {
                session_id: r.session_id.clone(),
                mode: context_field(e, "mode").ok_or_else(|| bad("return without mode"))?,
                sent: context_field(e, "sent").ok_or_else(|| bad("return without sent"))?,
                received,
                returned,
            });
        }
    }
    if out.is_empty() {
        return Err(AnalysisError::Empty);
    }
    Ok(out)
}

pub fn write_transfer_csv(rows: &[TransferRow], path: &Path) -> Result<(), StorageError> {
    let mut w = csv_writer(path)?;
    let err = |e| StorageError::csv(path, e);
    w.write_record(["mode", "sent", "received", "returned"]).map_err(err)?;
    for r in rows {
        let mode = serde_json::to_value(r.mode).expect("mode serializes");
        w.write_record([
            mode.as_str().unwrap_or_default().to_string(),
            r.sent.to_string(),
            r.received.to_string(),
            r.returned.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| StorageError::io(path, e))
}

pub const IMAGE_AGENTS: usize = 10;
pub const IMAGE_ROUNDS: u32 = 6;
pub const IMAGE_BENEFIT: u32 = 4;
pub const BASELINE_ENDOWMENT: u32 = 7;
pub const BASELINE_COST: u32 = 2;

/// A studied (endowment, donor cost) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageCondition {
    pub label: &'static str,
    pub endowment: u32,
    pub donor_cost: u32,
}

impl ImageCondition {
    /// Costs 1 to 4 at the baseline endowment, and endowments 4, 7, 13 at the
    /// baseline cost. The baseline cell appears in both series.
    pub fn studied() -> [ImageCondition; 7] {
        let c = |label, endowment, donor_cost| ImageCondition {
            label,
            endowment,
            donor_cost,
        };
        [
            c("cost_1", 7, 1),
            c("cost_2", 7, 2),
            c("cost_3", 7, 3),
            c("cost_4", 7, 4),
            c("endowment_4", 4, 2),
            c("endowment_7", 7, 2),
            c("endowment_13", 13, 2),
        ]
    }

    pub fn is_studied(endowment: u32, donor_cost: u32) -> bool {
        Self::studied()
            .iter()
            .any(|c| c.endowment == endowment && c.donor_cost == donor_cost)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Donation {
    Gave,
    Withheld,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGameState {
    pub n_agents: usize,
    pub rounds: u32,
    pub endowment: u32,
    pub donor_cost: u32,
    pub benefit: u32,
    pub balances: Vec<i64>,
    /// Each agent's decisions as a donor, in order.
    pub history: Vec<Vec<Donation>>,
    /// (donor, receiver) pairs used so far.
    pub pairs: BTreeSet<(usize, usize)>,
}

impl ImageGameState {
    pub fn new(endowment: u32, donor_cost: u32) -> Self {
        ImageGameState {
            n_agents: IMAGE_AGENTS,
            rounds: IMAGE_ROUNDS,
            endowment,
            donor_cost,
            benefit: IMAGE_BENEFIT,
            balances: vec![i64::from(endowment); IMAGE_AGENTS],
            history: vec![Vec::new(); IMAGE_AGENTS],
            pairs: BTreeSet::new(),
        }
    }

    pub fn counts(&self, agent: usize) -> (u32, u32) {
        let gave = self.history[agent].iter().filter(|&&d| d == Donation::Gave).count() as u32;
        (gave, self.history[agent].len() as u32 - gave)
    }

    pub fn image_score(&self, agent: usize) -> i64 {
        let (g, w) = self.counts(agent);
        i64::from(g) - i64::from(w)
    }

    pub fn apply(&mut self, donor: usize, receiver: usize, decision: Donation) {
        if decision == Donation::Gave {
            self.balances[donor] -= i64::from(self.donor_cost);
            self.balances[receiver] += i64::from(self.benefit);
        }
        self.history[donor].push(decision);
        self.pairs.insert((donor, receiver));
    }

    /// Balances equal the endowment minus costs paid plus benefits received.
    pub fn balances_consistent(&self, received_gifts: &[u32]) -> bool {
        (0..self.n_agents).all(|i| {
            let (gave, _) = self.counts(i);
            self.balances[i]
                == i64::from(self.endowment) - i64::from(gave) * i64::from(self.donor_cost)
                    + i64::from(received_gifts[i]) * i64::from(self.benefit)
        })
    }
}

/// Donor half of a round: agents 0..5 on even rounds, 5..10 on odd rounds.
pub fn donors_in_round(round: u32) -> std::ops::Range<usize> {
    let half = IMAGE_AGENTS / 2;
    if round % 2 == 1 {
        0..half
    } else {
        half..IMAGE_AGENTS
    }
}

/// Uniform matching of donors to receivers among those that repeat no
/// earlier (donor, receiver) pair.
pub fn draw_matching(
    donors: &[usize],
    receivers: &[usize],
    used: &BTreeSet<(usize, usize)>,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<(usize, usize)>> {
    let mut valid = Vec::new();
    let mut perm: Vec<usize> = receivers.to_vec();
    permutations(&mut perm, 0, &mut |p| {
        if donors.iter().zip(p).all(|(&d, &r)| !used.contains(&(d, r))) {
            valid.push(p.to_vec());
        }
    });
    valid
        .choose(rng)
        .map(|p| donors.iter().copied().zip(p.iter().copied()).collect())
}

fn permutations(xs: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == xs.len() {
        visit(xs);
        return;
    }
    for i in k..xs.len() {
        xs.swap(k, i);
        permutations(xs, k + 1, visit);
        xs.swap(k, i);
    }
}

#[derive(Debug, Clone)]
pub struct ImageOutcome {
    pub record: SessionRecord,
    pub state: ImageGameState,
}

pub fn image_condition(endowment: u32, donor_cost: u32) -> Condition {
    Condition {
        endowment: Some(endowment),
        donor_cost: Some(donor_cost),
        template_version: TEMPLATE_VERSION.to_string(),
        ..Default::default()
    }
}

/// Plays six rounds. Halves alternate between donating and receiving; each
/// donor sees only the receiver's give/withhold counts.
pub fn run_image_game(
    agents: &mut [Box<dyn Agent>],
    endowment: u32,
    donor_cost: u32,
    meta: &SessionMeta,
) -> Result<ImageOutcome, SessionError> {
    if agents.len() != IMAGE_AGENTS {
        return Err(SessionError::AgentCount {
            expected: IMAGE_AGENTS,
            got: agents.len(),
        });
    }
    if !ImageCondition::is_studied(endowment, donor_cost) {
        return Err(SessionError::Parameters(format!(
            "endowment {endowment} with donor cost {donor_cost} is not a studied condition"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(meta.seed);
    let mut state = ImageGameState::new(endowment, donor_cost);
    let mut record = SessionRecord::new(
        meta.session_id.clone(),
        Experiment::Downstream,
        image_condition(endowment, donor_cost),
        meta.seed,
        meta.created_at,
    );
    for a in agents.iter_mut() {
        a.reset();
    }

    for round in 1..=IMAGE_ROUNDS {
        let donors: Vec<usize> = donors_in_round(round).collect();
        let receivers: Vec<usize> = (0..IMAGE_AGENTS).filter(|i| !donors.contains(i)).collect();
        let matching = draw_matching(&donors, &receivers, &state.pairs, &mut rng)
            .ok_or_else(|| SessionError::Parameters("no matching avoids repeated pairs".into()))?;
        for (donor, receiver) in matching {
            let (gave, withheld) = state.counts(receiver);
            let ctx = ExperimentContext::ImageDonation {
                round,
                endowment,
                balance: state.balances[donor],
                donor_cost,
                benefit: IMAGE_BENEFIT,
                receiver_gave: gave,
                receiver_withheld: withheld,
            };
            let slot = Slot {
                round,
                position: donor as u32 + 1,
                role: "donor".into(),
            };
            let extra = json!({"donor": donor, "receiver": receiver});
            let (event, answer) = elicit(agents[donor].as_mut(), &ctx, &default_options(&ctx), slot, Some(extra))?;
            record.events.push(event);
            let decision = match answer.as_deref() {
                Some("Give") => Donation::Gave,
                Some(_) => Donation::Withheld,
                None => return Ok(ImageOutcome { record, state }),
            };
            state.apply(donor, receiver, decision);
        }
    }
    Ok(ImageOutcome { record, state })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub sessions: usize,
    pub invalid_sessions: usize,
    /// Donation rate by the receiver's image score.
    pub by_score: BTreeMap<i64, Proportion>,
    /// Donation rate by the receiver's (gave, withheld) counts.
    pub by_history: BTreeMap<(u32, u32), Proportion>,
    /// Donation rate by donor cost, over baseline-endowment sessions.
    pub by_cost: BTreeMap<u32, Proportion>,
    /// Donation rate by endowment, over baseline-cost sessions.
    pub by_endowment: BTreeMap<u32, Proportion>,
}

pub fn image_metrics(records: &[SessionRecord]) -> Result<ImageMetrics, AnalysisError> {
    require_experiment(records, Experiment::Downstream)?;
    let valid: Vec<&SessionRecord> = records.iter().filter(|r| r.is_valid()).collect();
    if valid.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut m = ImageMetrics {
        sessions: valid.len(),
        invalid_sessions: records.len() - valid.len(),
        by_score: BTreeMap::new(),
        by_history: BTreeMap::new(),
        by_cost: BTreeMap::new(),
        by_endowment: BTreeMap::new(),
    };
    for r in valid {
        for e in &r.events {
            let bad = |msg: &str| AnalysisError::MalformedEvent {
                session_id: r.session_id.clone(),
                message: msg.to_string(),
            };
            if context_kind(e) != Some("image_donation") {
                return Err(bad("unexpected event kind"));
            }
            let gave: u32 = context_field(e, "receiver_gave").ok_or_else(|| bad("missing receiver history"))?;
            let withheld: u32 =
                context_field(e, "receiver_withheld").ok_or_else(|| bad("missing receiver history"))?;
            let cost: u32 = context_field(e, "donor_cost").ok_or_else(|| bad("missing donor cost"))?;
            let endowment: u32 = context_field(e, "endowment").ok_or_else(|| bad("missing endowment"))?;
            let give = match e.parsed_choice.as_str() {
                "Give" => true,
                "Withhold" => false,
                _ => return Err(bad("unparsed donation")),
            };
            m.by_score
                .entry(i64::from(gave) - i64::from(withheld))
                .or_default()
                .add(give);
            m.by_history.entry((gave, withheld)).or_default().add(give);
            if endowment == BASELINE_ENDOWMENT {
                m.by_cost.entry(cost).or_default().add(give);
            }
            if cost == BASELINE_COST {
                m.by_endowment.entry(endowment).or_default().add(give);
            }
        }
    }
    Ok(m)
}

/// True when rates never decrease along the key order (empty cells skipped).
pub fn weakly_increasing<K>(rates: &BTreeMap<K, Proportion>) -> bool {
    let r: Vec<f64> = rates.values().filter_map(Proportion::rate).collect();
    r.windows(2).all(|w| w[0] <= w[1] + 1e-12)
}

fn write_rates<K: ToString>(
    path: &Path,
    key_header: &str,
    rates: &BTreeMap<K, Proportion>,
) -> Result<(), StorageError> {
    let mut w = csv_writer(path)?;
    let err = |e| StorageError::csv(path, e);
    w.write_record([key_header, "p_give", "std_error", "n"]).map_err(err)?;
    for (k, p) in rates {
        w.write_record([
            k.to_string(),
            p.rate().map(|x| format!("{x:.6}")).unwrap_or_default(),
            p.std_error().map(|x| format!("{x:.6}")).unwrap_or_default(),
            p.trials.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| StorageError::io(path, e))
}

/// Writes one CSV per breakdown into `dir`; returns the paths written.
pub fn write_image_csv(m: &ImageMetrics, dir: &Path) -> Result<Vec<PathBuf>, StorageError> {
    let score = dir.join("donation_by_score.csv");
    write_rates(&score, "receiver_score", &m.by_score)?;

    let grid = dir.join("donation_by_history.csv");
    let mut w = csv_writer(&grid)?;
    let err = |e| StorageError::csv(&grid, e);
    w.write_record(["gave", "withheld", "p_give", "n"]).map_err(err)?;
    for ((g, wh), p) in &m.by_history {
        w.write_record([
            g.to_string(),
            wh.to_string(),
            p.rate().map(|x| format!("{x:.6}")).unwrap_or_default(),
            p.trials.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| StorageError::io(&grid, e))?;

    let cost = dir.join("donation_by_cost.csv");
    write_rates(&cost, "donor_cost", &m.by_cost)?;
    let endowment = dir.join("donation_by_endowment.csv");
    write_rates(&endowment, "endowment", &m.by_endowment)?;
    Ok(vec![score, grid, cost, endowment])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{scripted_agent, ScriptedPolicy};
    use crate::types::derive_seed;
    use chrono::Utc;

    fn meta(i: u64) -> SessionMeta {
        SessionMeta::new(format!("s{i}"), derive_seed(11, i), "2024-01-01T00:00:00Z".parse().unwrap())
    }

    fn agents(n: usize, policy: impl Fn(usize) -> ScriptedPolicy) -> Vec<Box<dyn Agent>> {
        (0..n)
            .map(|i| Box::new(scripted_agent(format!("agent-{i}"), policy(i), i as u64)) as Box<dyn Agent>)
            .collect()
    }

    #[test]
    fn fair_split_returns_half() {
        for i in 0..40 {
            let mut a = agents(4, |_| ScriptedPolicy::FairSplit);
            let out = run_transfer_session(&mut a, TransferMode::Direct, SenderMode::Randomized, &meta(i)).unwrap();
            assert!(out.record.is_valid() && out.record.events_ordered());
            for p in &out.pairs {
                assert_eq!(p.returned, Some(p.received() / 2));
                assert!(p.sent <= TRANSFER_ENDOWMENT);
            }
        }
        let mut a = agents(4, |_| ScriptedPolicy::FairSplit);
        let out = run_transfer_session(&mut a, TransferMode::Direct, SenderMode::Fixed(10), &meta(0)).unwrap();
        assert_eq!(out.pairs[0].returned, Some(15));
    }

    #[test]
    fn selfish_and_forced_zero() {
        let mut a = agents(4, |_| ScriptedPolicy::Selfish);
        let out = run_transfer_session(&mut a, TransferMode::Indirect, SenderMode::Fixed(10), &meta(0)).unwrap();
        assert!(out.pairs.iter().all(|p| p.returned == Some(0)));
        assert_eq!(out.pairs[0].recipient, "A'");
        assert_eq!(out.pairs[1].recipient, "A");
        let mut a = agents(4, |_| ScriptedPolicy::Fixed { answer: "nonsense".into() });
        let out = run_transfer_session(&mut a, TransferMode::Direct, SenderMode::Fixed(0), &meta(0)).unwrap();
        assert!(out.record.is_valid());
        assert!(out.pairs.iter().all(|p| p.returned == Some(0)));
        assert!(out.record.events.iter().all(|e| e.context["forced"] == json!(true)));
    }

    #[test]
    fn elicited_sender_and_parse_failure() {
        let mut a = agents(4, |_| ScriptedPolicy::FairSplit);
        let out = run_transfer_session(&mut a, TransferMode::Direct, SenderMode::Elicited, &meta(1)).unwrap();
        assert_eq!(out.record.events.len(), 4);
        assert!(out.record.events_ordered());
        assert!(out.pairs.iter().all(|p| p.sent == 5 && p.returned == Some(7)));

        let mut a = agents(4, |i| {
            if i == 1 {
                ScriptedPolicy::Fixed { answer: "99".into() }
            } else {
                ScriptedPolicy::FairSplit
            }
        });
        let out = run_transfer_session(&mut a, TransferMode::Direct, SenderMode::Fixed(3), &meta(1)).unwrap();
        assert!(!out.record.is_valid());
        assert_eq!(out.pairs.len(), 1);
        assert_eq!(out.pairs[0].returned, None);
        assert!(matches!(
            run_transfer_session(&mut a, TransferMode::Direct, SenderMode::Fixed(11), &meta(1)),
            Err(SessionError::Parameters(_))
        ));
    }

    #[test]
    fn transfer_rows_and_csv() {
        let records: Vec<SessionRecord> = (0..5)
            .map(|i| {
                let mut a = agents(4, |_| ScriptedPolicy::FairSplit);
                run_transfer_session(&mut a, TransferMode::Indirect, SenderMode::Randomized, &meta(i))
                    .unwrap()
                    .record
            })
            .collect();
        let rows = transfer_rows(&records).unwrap();
        assert_eq!(rows.len(), 10);
        assert!(rows.iter().all(|r| r.returned == r.received / 2 && r.received == 3 * r.sent));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_transfer_csv(&rows, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("mode,sent,received,returned\nindirect,"));
    }

    #[test]
    fn seven_studied_cells() {
        let cells = ImageCondition::studied();
        assert_eq!(cells.len(), 7);
        let distinct: BTreeSet<(u32, u32)> = cells.iter().map(|c| (c.endowment, c.donor_cost)).collect();
        assert_eq!(distinct.len(), 6);
        assert!(!ImageCondition::is_studied(13, 4));
    }

    #[test]
    fn matching_avoids_repeats() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut used = BTreeSet::new();
        let donors = [0, 1, 2, 3, 4];
        let receivers = [5, 6, 7, 8, 9];
        for _ in 0..5 {
            let m = draw_matching(&donors, &receivers, &used, &mut rng).unwrap();
            for p in m {
                assert!(used.insert(p));
            }
        }
        assert!(draw_matching(&donors, &receivers, &used, &mut rng).is_none());
    }

    #[test]
    fn image_game_invariants() {
        for i in 0..30 {
            let mut a = agents(10, |k| ScriptedPolicy::RandomDonor { p_give: 0.1 * k as f64 });
            let out = run_image_game(&mut a, 7, 3, &meta(i)).unwrap();
            let s = &out.state;
            assert_eq!(out.record.events.len(), 30);
            assert!(out.record.events_ordered());
            assert_eq!(s.pairs.len(), 30);
            let mut gifts = vec![0u32; 10];
            for e in &out.record.events {
                if e.parsed_choice == "Give" {
                    gifts[e.context["receiver"].as_u64().unwrap() as usize] += 1;
                }
            }
            assert!(s.balances_consistent(&gifts));
            for k in 0..10 {
                assert_eq!(s.history[k].len(), 3);
            }
        }
        let mut a = agents(10, |_| ScriptedPolicy::Selfish);
        assert!(matches!(run_image_game(&mut a, 13, 4, &meta(0)), Err(SessionError::Parameters(_))));
    }

    #[test]
    fn threshold_donors_reward_good_scores() {
        let records: Vec<SessionRecord> = (0..50)
            .map(|i| {
                let mut a = agents(10, |k| ScriptedPolicy::ScoreThreshold {
                    threshold: (k % 4) as i64 - 1,
                });
                run_image_game(&mut a, 7, 2, &meta(i)).unwrap().record
            })
            .collect();
        let m = image_metrics(&records).unwrap();
        assert!(weakly_increasing(&m.by_score), "{:?}", m.by_score);
    }

    fn hand_event(gave: u32, withheld: u32, cost: u32, endowment: u32, choice: &str) -> crate::types::DecisionEvent {
        crate::types::DecisionEvent {
            agent_id: "d".into(),
            round: 1,
            position: 1,
            role_or_position: "donor".into(),
            prompt_text: String::new(),
            raw_response: String::new(),
            parsed_choice: choice.into(),
            reason_text: String::new(),
            context: json!({"kind": "image_donation", "receiver_gave": gave, "receiver_withheld": withheld,
                            "donor_cost": cost, "endowment": endowment}),
            parse_error: None,
        }
    }

    #[test]
    fn hand_computed_image_metrics() {
        let mut r1 = SessionRecord::new("r1", Experiment::Downstream, image_condition(7, 2), 0, Utc::now());
        r1.events = vec![
            hand_event(0, 0, 2, 7, "Give"),
            hand_event(0, 0, 2, 7, "Withhold"),
            hand_event(1, 0, 2, 7, "Give"),
            hand_event(1, 1, 2, 7, "Give"),
        ];
        let mut r2 = SessionRecord::new("r2", Experiment::Downstream, image_condition(13, 2), 0, Utc::now());
        r2.events = vec![hand_event(0, 1, 2, 13, "Withhold"), hand_event(2, 0, 2, 13, "Give")];
        let mut r3 = SessionRecord::new("r3", Experiment::Downstream, image_condition(7, 4), 0, Utc::now());
        r3.events = vec![hand_event(0, 0, 4, 7, "Withhold")];
        let m = image_metrics(&[r1, r2, r3]).unwrap();
        assert_eq!(m.by_score[&0], Proportion::new(2, 4));
        assert_eq!(m.by_score[&1], Proportion::new(1, 1));
        assert_eq!(m.by_score[&-1], Proportion::new(0, 1));
        assert_eq!(m.by_score[&2], Proportion::new(1, 1));
        assert_eq!(m.by_history[&(0, 0)], Proportion::new(1, 3));
        assert_eq!(m.by_history[&(1, 1)], Proportion::new(1, 1));
        assert_eq!(m.by_cost[&2], Proportion::new(3, 4));
        assert_eq!(m.by_cost[&4], Proportion::new(0, 1));
        assert_eq!(m.by_endowment[&7], Proportion::new(3, 4));
        assert_eq!(m.by_endowment[&13], Proportion::new(1, 2));
        let dir = tempfile::tempdir().unwrap();
        let files = write_image_csv(&m, dir.path()).unwrap();
        let text = std::fs::read_to_string(&files[0]).unwrap();
        assert!(text.starts_with("receiver_score,p_give,std_error,n\n-1,0.000000,"));
    }

    #[test]
    fn all_give_is_one() {
        let records: Vec<SessionRecord> = (0..3)
            .map(|i| {
                let mut a = agents(10, |_| ScriptedPolicy::Fixed { answer: "Give".into() });
                run_image_game(&mut a, 4, 2, &meta(i)).unwrap().record
            })
            .collect();
        let m = image_metrics(&records).unwrap();
        assert!(m.by_score.values().all(|p| p.rate() == Some(1.0)));
        assert!(m.by_endowment.values().all(|p| p.rate() == Some(1.0)));
        assert_eq!(image_metrics(&[]).unwrap_err(), AnalysisError::Empty);
    }
}
