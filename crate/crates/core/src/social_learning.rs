//! Sequential urn-guessing game with costly links.
//!
//! Four agents act in order. Each privately draws a ball that matches the
//! true urn with probability 2/3. From position 2 on, an agent may pay to link
//! to each earlier position (asked one target at a time, nearest first), then
//! sees the guesses reachable through its links and guesses the urn. A correct
//! guess earns 100 points; each link costs `link_cost`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agents::Agent;
use crate::analysis::{require_experiment, AnalysisError, Proportion};
use crate::prompts::{default_options, ExperimentContext, TEMPLATE_VERSION};
use crate::session::{context_field, context_kind, elicit, SessionError, SessionMeta, Slot};
use crate::storage::{csv_writer, StorageError};
use crate::types::{Condition, Experiment, SessionRecord, Urn};

pub const N_POSITIONS: u32 = 4;
pub const CORRECT_REWARD: i64 = 100;
pub const BALL_MATCH_PROB: f64 = 2.0 / 3.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UrnWorld {
    pub true_urn: Urn,
    /// Draw of positions 1..=4.
    pub draws: [Urn; 4],
    pub link_cost: u32,
    pub rng_seed: u64,
}

impl UrnWorld {
    pub fn sample(link_cost: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let true_urn = if rng.gen_bool(0.5) { Urn::A } else { Urn::B };
        let draws = std::array::from_fn(|_| {
            if rng.gen_bool(BALL_MATCH_PROB) {
                true_urn
            } else {
                true_urn.other()
            }
        });
        UrnWorld {
            true_urn,
            draws,
            link_cost,
            rng_seed: seed,
        }
    }

    pub fn draw(&self, position: u32) -> Urn {
        self.draws[(position - 1) as usize]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearningState {
    /// (from, to) with from > to.
    pub links: BTreeSet<(u32, u32)>,
    pub guesses: BTreeMap<u32, Urn>,
    pub points: BTreeMap<u32, i64>,
}

impl LearningState {
    pub fn links_from(&self, position: u32) -> u32 {
        self.links.iter().filter(|&&(f, _)| f == position).count() as u32
    }

    pub fn visible_guesses(&self, observer: u32) -> Vec<(u32, Urn)> {
        visible_guesses(&self.links, &self.guesses, observer)
    }
}

/// Positions reachable from `observer` by following links transitively.
pub fn reachable(links: &BTreeSet<(u32, u32)>, observer: u32) -> BTreeSet<u32> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![observer];
    while let Some(p) = stack.pop() {
        for &(_, to) in links.range((p, 0)..=(p, u32::MAX)) {
            if seen.insert(to) {
                stack.push(to);
            }
        }
    }
    seen.remove(&observer);
    seen
}

/// Guesses of every position reachable from `observer`, in position order.
pub fn visible_guesses(links: &BTreeSet<(u32, u32)>, guesses: &BTreeMap<u32, Urn>, observer: u32) -> Vec<(u32, Urn)> {
    reachable(links, observer)
        .into_iter()
        .filter_map(|p| guesses.get(&p).map(|&g| (p, g)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct UrnSessionOutcome {
    pub record: SessionRecord,
    pub state: LearningState,
    pub world: UrnWorld,
}

impl UrnSessionOutcome {
    pub fn is_valid(&self) -> bool {
        self.record.is_valid()
    }
}

pub fn urn_condition(link_cost: u32) -> Condition {
    Condition {
        link_cost: Some(link_cost),
        template_version: TEMPLATE_VERSION.to_string(),
        ..Default::default()
    }
}

/// Plays one session. A response that fails to parse ends the session; the
/// returned record then carries the failing event and is marked invalid.
pub fn run_urn_session(
    agents: &mut [Box<dyn Agent>],
    link_cost: u32,
    meta: &SessionMeta,
) -> Result<UrnSessionOutcome, SessionError> {
    if agents.len() != N_POSITIONS as usize {
        return Err(SessionError::AgentCount {
            expected: N_POSITIONS as usize,
            got: agents.len(),
        });
    }
    let world = UrnWorld::sample(link_cost, meta.seed);
    let mut record = SessionRecord::new(
        meta.session_id.clone(),
        Experiment::SocialLearning,
        urn_condition(link_cost),
        meta.seed,
        meta.created_at,
    );
    let mut state = LearningState::default();
    for a in agents.iter_mut() {
        a.reset();
    }

    'positions: for position in 1..=N_POSITIONS {
        let agent = agents[(position - 1) as usize].as_mut();
        let draw = world.draw(position);
        let mut linked = Vec::new();
        for target in (1..position).rev() {
            let ctx = ExperimentContext::UrnLink {
                position,
                target,
                link_cost,
                draw,
                linked: linked.clone(),
            };
            let slot = Slot {
                round: 0,
                position,
                role: format!("position {position} link to {target}"),
            };
            let (event, answer) = elicit(agent, &ctx, &default_options(&ctx), slot, None)?;
            record.events.push(event);
            match answer.as_deref() {
                Some("Yes") => {
                    state.links.insert((position, target));
                    linked.push(target);
                }
                Some(_) => {}
                None => break 'positions,
            }
        }

        let visible = state.visible_guesses(position);
        let links_formed = linked.len() as u32;
        let ctx = ExperimentContext::UrnGuess {
            position,
            draw,
            visible,
            links_formed,
            link_cost,
        };
        let slot = Slot {
            round: 0,
            position,
            role: format!("position {position}"),
        };
        let (mut event, answer) = elicit(agent, &ctx, &default_options(&ctx), slot, None)?;
        let guess = answer.and_then(|a| a.parse::<Urn>().ok());
        if let Some(g) = guess {
            let points = CORRECT_REWARD * i64::from(g == world.true_urn) - i64::from(link_cost) * i64::from(links_formed);
            state.guesses.insert(position, g);
            state.points.insert(position, points);
            if let serde_json::Value::Object(map) = &mut event.context {
                map.insert("true_urn".into(), json!(world.true_urn));
                map.insert("points".into(), json!(points));
            }
        }
        record.events.push(event);
        if guess.is_none() {
            break;
        }
    }
    Ok(UrnSessionOutcome { record, state, world })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearningMetrics {
    pub link_cost: Option<u32>,
    pub sessions: usize,
    pub invalid_sessions: usize,
    /// Guess accuracy by position (index 0 is position 1).
    pub accuracy: Vec<Proportion>,
    /// `link_rates[from-1][to-1]`: share of sessions where `from` linked to `to`.
    pub link_rates: Vec<Vec<Proportion>>,
    /// P(guess == own draw) by (position, number of visible guesses differing from the own draw).
    pub follow_own: BTreeMap<(u32, u32), Proportion>,
    /// Mean points by position.
    pub mean_points: Vec<f64>,
    pub total_links: u64,
}

impl LearningMetrics {
    pub fn mean_earnings(&self) -> f64 {
        self.mean_points.iter().sum::<f64>() / self.mean_points.len() as f64
    }
}

fn malformed(r: &SessionRecord, message: &str) -> AnalysisError {
    AnalysisError::MalformedEvent {
        session_id: r.session_id.clone(),
        message: message.to_string(),
    }
}

/// Aggregates valid sessions of a single cost condition.
pub fn learning_metrics(records: &[SessionRecord]) -> Result<LearningMetrics, AnalysisError> {
    require_experiment(records, Experiment::SocialLearning)?;
    let costs: BTreeSet<Option<u32>> = records.iter().map(|r| r.condition.link_cost).collect();
    if costs.len() > 1 {
        return Err(AnalysisError::MixedConditions(format!("link costs {costs:?}")));
    }
    let valid: Vec<&SessionRecord> = records.iter().filter(|r| r.is_valid()).collect();
    if valid.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let n = N_POSITIONS as usize;
    let mut accuracy = vec![Proportion::default(); n];
    let mut link_rates = vec![vec![Proportion::default(); n]; n];
    let mut follow_own: BTreeMap<(u32, u32), Proportion> = BTreeMap::new();
    let mut points_sum = vec![0i64; n];
    let mut points_n = vec![0u64; n];
    let mut total_links = 0;

    for r in &valid {
        for e in &r.events {
            let position: u32 = context_field(e, "position").ok_or_else(|| malformed(r, "event without position"))?;
            if !(1..=N_POSITIONS).contains(&position) {
                return Err(malformed(r, "position out of range"));
            }
            let pi = (position - 1) as usize;
            match context_kind(e) {
                Some("urn_link") => {
                    let target: u32 = context_field(e, "target").ok_or_else(|| malformed(r, "link without target"))?;
                    if target == 0 || target >= position {
                        return Err(malformed(r, "link target out of range"));
                    }
                    let yes = e.parsed_choice == "Yes";
                    total_links += u64::from(yes);
                    link_rates[pi][(target - 1) as usize].add(yes);
                }
                Some("urn_guess") => {
                    let draw: Urn = context_field(e, "draw").ok_or_else(|| malformed(r, "guess without draw"))?;
                    let truth: Urn =
                        context_field(e, "true_urn").ok_or_else(|| malformed(r, "guess without true urn"))?;
                    let visible: Vec<(u32, Urn)> = context_field(e, "visible").unwrap_or_default();
                    let points: i64 = context_field(e, "points").ok_or_else(|| malformed(r, "guess without points"))?;
                    let guess: Urn = e.parsed_choice.parse().map_err(|_| malformed(r, "unparsed guess"))?;
                    accuracy[pi].add(guess == truth);
                    let differing = visible.iter().filter(|&&(_, g)| g != draw).count() as u32;
                    follow_own.entry((position, differing)).or_default().add(guess == draw);
                    points_sum[pi] += points;
                    points_n[pi] += 1;
                }
                _ => return Err(malformed(r, "unexpected event kind")),
            }
        }
    }
    let mean_points = points_sum
        .iter()
        .zip(&points_n)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s as f64 / c as f64 })
        .collect();
    Ok(LearningMetrics {
        link_cost: costs.into_iter().next().flatten(),
        sessions: valid.len(),
        invalid_sessions: records.len() - valid.len(),
        accuracy,
        link_rates,
        follow_own,
        mean_points,
        total_links,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Writes one CSV per chart into `dir`; returns the paths written.
pub fn write_learning_csv(m: &LearningMetrics, dir: &Path) -> Result<Vec<PathBuf>, StorageError> {
    let mut written = Vec::new();

    let p = dir.join("accuracy_by_position.csv");
    let mut w = csv_writer(&p)?;
    w.write_record(["position", "accuracy", "std_error", "n"]).map_err(|e| StorageError::csv(&p, e))?;
    for (i, a) in m.accuracy.iter().enumerate() {
        w.write_record([(i + 1).to_string(), fmt_opt(a.rate()), fmt_opt(a.std_error()), a.trials.to_string()])
            .map_err(|e| StorageError::csv(&p, e))?;
    }
    w.flush().map_err(|e| StorageError::io(&p, e))?;
    written.push(p);

    let p = dir.join("link_matrix.csv");
    let mut w = csv_writer(&p)?;
    let mut header = vec!["from".to_string()];
    header.extend((1..N_POSITIONS).map(|t| format!("to_{t}")));
    w.write_record(&header).map_err(|e| StorageError::csv(&p, e))?;
    for from in 2..=N_POSITIONS {
        let mut row = vec![from.to_string()];
        for to in 1..N_POSITIONS {
            let cell = if to < from {
                fmt_opt(m.link_rates[(from - 1) as usize][(to - 1) as usize].rate())
            } else {
                String::new()
            };
            row.push(cell);
        }
        w.write_record(&row).map_err(|e| StorageError::csv(&p, e))?;
    }
    w.flush().map_err(|e| StorageError::io(&p, e))?;
    written.push(p);

    let p = dir.join("follow_own_draw.csv");
    let mut w = csv_writer(&p)?;
    w.write_record(["position", "differing_guesses", "p_follow_own", "n"])
        .map_err(|e| StorageError::csv(&p, e))?;
    for ((pos, diff), prop) in &m.follow_own {
        w.write_record([pos.to_string(), diff.to_string(), fmt_opt(prop.rate()), prop.trials.to_string()])
            .map_err(|e| StorageError::csv(&p, e))?;
    }
    w.flush().map_err(|e| StorageError::io(&p, e))?;
    written.push(p);

    let p = dir.join("earnings.csv");
    let mut w = csv_writer(&p)?;
    w.write_record(["position", "mean_points"]).map_err(|e| StorageError::csv(&p, e))?;
    for (i, v) in m.mean_points.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{v:.6}")]).map_err(|e| StorageError::csv(&p, e))?;
    }
    w.write_record(["all".to_string(), format!("{:.6}", m.mean_earnings())])
        .map_err(|e| StorageError::csv(&p, e))?;
    w.flush().map_err(|e| StorageError::io(&p, e))?;
    written.push(p);

    Ok(written)
}
