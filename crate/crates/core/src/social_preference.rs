//! Dictator and response games: B chooses between B1 and B2, possibly after
//! A passed on the outside option A1.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::analysis::{require_experiment, AnalysisError, Proportion};
use crate::estimation::{EstimationError, PreferenceDataset, PreferenceRow};
use crate::fixtures::builtin_game;
use crate::prompts::{default_options, ExperimentContext, TEMPLATE_VERSION};
use crate::session::{context_field, elicit, par_map, AgentFactory, SessionError, SessionMeta, Slot};
use crate::storage::{csv_writer, StorageError};
use crate::types::{derive_seed, BinaryChoice, Condition, Experiment, GameSpec, GroupCondition, SessionRecord};

/// B's choice in one game. `choice` is `None` when the response did not parse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceObservation {
    pub session_id: String,
    pub game: GameSpec,
    pub condition: GroupCondition,
    pub choice: Option<BinaryChoice>,
    pub reason_text: String,
}

impl PreferenceObservation {
    pub fn game_id(&self) -> &str {
        &self.game.game_id
    }

    pub fn is_valid(&self) -> bool {
        self.choice.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct BatteryOptions {
    pub created_at: DateTime<Utc>,
    /// Prepended to every session id.
    pub session_prefix: String,
    pub parallel: usize,
}

#[derive(Debug, Clone)]
pub struct PreferenceBattery {
    pub records: Vec<SessionRecord>,
    pub observations: Vec<PreferenceObservation>,
}

impl PreferenceBattery {
    pub fn invalid_count(&self) -> usize {
        self.observations.iter().filter(|o| !o.is_valid()).count()
    }
}

fn slug(game_id: &str) -> String {
    game_id.to_ascii_lowercase().replace(' ', "_")
}

pub fn preference_condition(condition: GroupCondition) -> Condition {
    Condition {
        group: Some(condition),
        template_version: TEMPLATE_VERSION.to_string(),
        ..Default::default()
    }
}

/// Plays one game with a fresh agent and records B's choice.
pub fn run_preference_game(
    factory: &AgentFactory<'_>,
    game: &GameSpec,
    condition: GroupCondition,
    meta: &SessionMeta,
) -> Result<(SessionRecord, PreferenceObservation), SessionError> {
    let mut agent = factory(&format!("b-{}", meta.session_id), meta.seed);
    let ctx = ExperimentContext::Preference {
        game: game.clone(),
        condition,
    };
    let slot = Slot {
        round: 0,
        position: 1,
        role: "B".into(),
    };
    let (event, answer) = elicit(agent.as_mut(), &ctx, &default_options(&ctx), slot, None)?;
    let obs = PreferenceObservation {
        session_id: meta.session_id.clone(),
        game: game.clone(),
        condition,
        choice: answer.and_then(|a| a.parse().ok()),
        reason_text: event.reason_text.clone(),
    };
    let mut record = SessionRecord::new(
        meta.session_id.clone(),
        Experiment::SocialPreference,
        preference_condition(condition),
        meta.seed,
        meta.created_at,
    );
    record.events.push(event);
    Ok((record, obs))
}

/// Every game times `replicates`, each with a fresh agent.
pub fn run_preference_battery(
    factory: &AgentFactory<'_>,
    games: &[GameSpec],
    condition: GroupCondition,
    replicates: u32,
    seed: u64,
    opts: &BatteryOptions,
) -> Result<PreferenceBattery, SessionError> {
    if replicates == 0 {
        return Err(SessionError::Parameters("replicates must be at least 1".into()));
    }
    let cells: Vec<(usize, u32)> = (0..games.len()).flat_map(|g| (0..replicates).map(move |r| (g, r))).collect();
    let results = par_map(&cells, opts.parallel, |i, &(g, r)| {
        let game = &games[g];
        let meta = SessionMeta::new(
            format!("{}{}-{}-r{:03}", opts.session_prefix, slug(&game.game_id), condition, r + 1),
            derive_seed(seed, i as u64),
            opts.created_at,
        );
        run_preference_game(factory, game, condition, &meta)
    });
    let mut battery = PreferenceBattery {
        records: Vec::with_capacity(cells.len()),
        observations: Vec::with_capacity(cells.len()),
    };
    for r in results {
        let (record, obs) = r?;
        battery.records.push(record);
        battery.observations.push(obs);
    }
    Ok(battery)
}

/// Rebuilds observations from stored transcripts.
pub fn observations_from_records(records: &[SessionRecord]) -> Result<Vec<PreferenceObservation>, AnalysisError> {
    require_experiment(records, Experiment::SocialPreference)?;
    let mut out = Vec::new();
    for r in records {
        for e in &r.events {
            let bad = |m: &str| AnalysisError::MalformedEvent {
                session_id: r.session_id.clone(),
                message: m.to_string(),
            };
            let game: GameSpec = context_field(e, "game").ok_or_else(|| bad("event without game"))?;
            let condition: GroupCondition =
                context_field(e, "condition").ok_or_else(|| bad("event without condition"))?;
            let choice = if e.parse_error.is_some() {
                None
            } else {
                Some(e.parsed_choice.parse().map_err(|_| bad("unparsed choice"))?)
            };
            out.push(PreferenceObservation {
                session_id: r.session_id.clone(),
                game,
                condition,
                choice,
                reason_text: e.reason_text.clone(),
            });
        }
    }
    Ok(out)
}

/// B1 share per (game, condition) over valid observations.
pub fn b1_rates(observations: &[PreferenceObservation]) -> BTreeMap<(String, GroupCondition), Proportion> {
    let mut out: BTreeMap<(String, GroupCondition), Proportion> = BTreeMap::new();
    for o in observations {
        if let Some(c) = o.choice {
            out.entry((o.game.game_id.clone(), o.condition))
                .or_default()
                .add(c == BinaryChoice::B1);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SwmOption {
    Choice(BinaryChoice),
    Tie,
}

/// Option with the larger payoff sum.
pub fn swm_option(game: &GameSpec) -> SwmOption {
    let (s1, s2) = (game.payoff_b1.total(), game.payoff_b2.total());
    match s1.cmp(&s2) {
        std::cmp::Ordering::Greater => SwmOption::Choice(BinaryChoice::B1),
        std::cmp::Ordering::Less => SwmOption::Choice(BinaryChoice::B2),
        std::cmp::Ordering::Equal => SwmOption::Tie,
    }
}

/// Share of valid observations choosing the welfare-maximizing option, per
/// condition. Games with equal sums are excluded.
pub fn swm_rate(observations: &[PreferenceObservation]) -> Result<BTreeMap<GroupCondition, Proportion>, AnalysisError> {
    let mut out: BTreeMap<GroupCondition, Proportion> = BTreeMap::new();
    for o in observations {
        if let (Some(c), SwmOption::Choice(best)) = (o.choice, swm_option(&o.game)) {
            out.entry(o.condition).or_default().add(c == best);
        }
    }
    if out.is_empty() {
        return Err(AnalysisError::Empty);
    }
    Ok(out)
}

/// B1 shares of one payoff structure under the dictator, good-intention and
/// misbehave framings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReciprocityContrast {
    pub dictator_id: String,
    pub good_id: String,
    pub bad_id: String,
    pub condition: GroupCondition,
    pub rates: [Proportion; 3],
}

pub fn reciprocity_contrast(
    triples: &[(&str, &str, &str)],
    observations: &[PreferenceObservation],
) -> Result<Vec<ReciprocityContrast>, AnalysisError> {
    let rates = b1_rates(observations);
    let conditions: std::collections::BTreeSet<GroupCondition> = observations.iter().map(|o| o.condition).collect();
    let mut out = Vec::new();
    for &(d, g, b) in triples {
        let games: Vec<GameSpec> = [d, g, b]
            .iter()
            .map(|id| builtin_game(id).ok_or_else(|| AnalysisError::UnknownGame(id.to_string())))
            .collect::<Result<_, _>>()?;
        let same = |x: &GameSpec| x.payoff_b1 == games[0].payoff_b1 && x.payoff_b2 == games[0].payoff_b2;
        if !games.iter().all(same) {
            return Err(AnalysisError::PayoffMismatch(format!("{d}, {g}, {b}")));
        }
        for &condition in &conditions {
            let get = |id: &str| rates.get(&(id.to_string(), condition)).copied().unwrap_or_default();
            out.push(ReciprocityContrast {
                dictator_id: d.to_string(),
                good_id: g.to_string(),
                bad_id: b.to_string(),
                condition,
                rates: [get(d), get(g), get(b)],
            });
        }
    }
    Ok(out)
}

/// Estimation rows from the valid observations.
pub fn to_dataset(observations: &[PreferenceObservation]) -> Result<PreferenceDataset, EstimationError> {
    let rows = observations
        .iter()
        .filter_map(|o| {
            o.choice.map(|choice| PreferenceRow {
                game_id: o.game.game_id.clone(),
                condition: o.condition,
                choice,
                payoff_b1: o.game.payoff_b1,
                payoff_b2: o.game.payoff_b2,
            })
        })
        .collect();
    PreferenceDataset::new(rows)
}

pub fn write_observations_csv(observations: &[PreferenceObservation], path: &Path) -> Result<(), StorageError> {
    let mut w = csv_writer(path)?;
    let err = |e| StorageError::csv(path, e);
    w.write_record([
        "game_id",
        "condition",
        "choice",
        "pi_a_b1",
        "pi_b_b1",
        "pi_a_b2",
        "pi_b_b2",
        "pi_a_a1",
        "pi_b_a1",
        "swm_choice_flag",
        "reason_text",
    ])
    .map_err(err)?;
    for o in observations {
        let g = &o.game;
        let flag = match (o.choice, swm_option(g)) {
            (Some(c), SwmOption::Choice(best)) => u8::from(c == best).to_string(),
            _ => String::new(),
        };
        w.write_record([
            g.game_id.clone(),
            o.condition.to_string(),
            o.choice.map(|c| c.to_string()).unwrap_or_default(),
            g.payoff_b1.a.to_string(),
            g.payoff_b1.b.to_string(),
            g.payoff_b2.a.to_string(),
            g.payoff_b2.b.to_string(),
            g.payoff_a1.map(|p| p.a.to_string()).unwrap_or_default(),
            g.payoff_a1.map(|p| p.b.to_string()).unwrap_or_default(),
            flag,
            o.reason_text.clone(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| StorageError::io(path, e))
}

/// Writes per-cell B1 shares.
pub fn write_b1_rates_csv(
    rates: &BTreeMap<(String, GroupCondition), Proportion>,
    path: &Path,
) -> Result<(), StorageError> {
    let mut w = csv_writer(path)?;
    let err = |e| StorageError::csv(path, e);
    w.write_record(["game_id", "condition", "b1_rate", "std_error", "n"]).map_err(err)?;
    for ((id, cond), p) in rates {
        w.write_record([
            id.clone(),
            cond.to_string(),
            p.rate().map(|x| format!("{x:.6}")).unwrap_or_default(),
            p.std_error().map(|x| format!("{x:.6}")).unwrap_or_default(),
            p.trials.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| StorageError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{scripted_agent, Agent, CRLogitPolicy, ScriptedPolicy};
    use crate::fixtures::{builtin_game_fixtures, reconstruct_choices, builtin_observed_b1_rates, RECIPROCITY_TRIPLES};
    use crate::types::Payoff;
    use proptest::prelude::*;

    fn opts() -> BatteryOptions {
        BatteryOptions {
            created_at: "2024-01-01T00:00:00Z".parse().unwrap(),
            session_prefix: "t-".into(),
            parallel: 4,
        }
    }

    fn fixed(answer: &'static str) -> impl Fn(&str, u64) -> Box<dyn Agent> + Sync {
        move |id, seed| Box::new(scripted_agent(id, ScriptedPolicy::Fixed { answer: answer.into() }, seed))
    }

    fn reconstructed_obs(cond: GroupCondition) -> Vec<PreferenceObservation> {
        reconstruct_choices(cond)
            .into_iter()
            .map(|rc| PreferenceObservation {
                session_id: String::new(),
                game: rc.game,
                condition: rc.condition,
                choice: Some(rc.choice),
                reason_text: String::new(),
            })
            .collect()
    }

    #[test]
    fn swm_examples() {
        let g = |id| builtin_game(id).unwrap();
        assert_eq!(swm_option(&g("Dict 2")), SwmOption::Choice(BinaryChoice::B2));
        assert_eq!(swm_option(&g("Dict 5")), SwmOption::Tie);
        assert_eq!(swm_option(&g("Resp 13a")), SwmOption::Choice(BinaryChoice::B1));
    }

    proptest! {
        #[test]
        fn swm_symmetric_under_label_swap(a1 in 0u32..2000, b1 in 0u32..2000, a2 in 0u32..2000, b2 in 0u32..2000) {
            let g = GameSpec::new("x", crate::types::GameKind::Dictator, None, Payoff::new(a1, b1), Payoff::new(a2, b2)).unwrap();
            let s = GameSpec::new("x", crate::types::GameKind::Dictator, None, Payoff::new(a2, b2), Payoff::new(a1, b1)).unwrap();
            let swapped = match swm_option(&s) {
                SwmOption::Choice(c) => SwmOption::Choice(c.other()),
                SwmOption::Tie => SwmOption::Tie,
            };
            prop_assert_eq!(swm_option(&g), swapped);
        }
    }

    #[test]
    fn always_b1_battery() {
        let games = builtin_game_fixtures();
        let b = run_preference_battery(&fixed("B1"), &games, GroupCondition::Ingroup, 3, 1, &opts()).unwrap();
        assert_eq!(b.records.len(), 66);
        assert_eq!(b.invalid_count(), 0);
        let rates = b1_rates(&b.observations);
        assert_eq!(rates.len(), 22);
        assert!(rates.values().all(|p| p.rate() == Some(1.0)));
        assert!(b.records.iter().all(|r| r.is_valid() && r.experiment == Experiment::SocialPreference));
        assert_eq!(b.records[0].session_id, "t-dict_1-ingroup-r001");
        let prompt = &b.records[0].events[0].prompt_text;
        assert!(prompt.contains("own group"), "{prompt}");
        assert_eq!(observations_from_records(&b.records).unwrap(), b.observations);
    }

    #[test]
    fn parse_failures_counted_not_rated() {
        let games = builtin_game_fixtures();
        let b = run_preference_battery(&fixed("B3"), &games[..2], GroupCondition::NoGroup, 2, 1, &opts()).unwrap();
        assert_eq!(b.invalid_count(), 4);
        assert!(b1_rates(&b.observations).is_empty());
        assert_eq!(swm_rate(&b.observations).unwrap_err(), AnalysisError::Empty);
        assert!(b.records.iter().all(|r| !r.is_valid()));
        assert!(run_preference_battery(&fixed("B1"), &games, GroupCondition::NoGroup, 0, 1, &opts()).is_err());
    }

    #[test]
    fn battery_is_deterministic_and_parallel_safe() {
        let policy = ScriptedPolicy::CrLogit(CRLogitPolicy {
            rho: 0.4,
            sigma: -0.1,
            gamma: 0.02,
            rng_seed: 0,
        });
        let factory = move |id: &str, seed: u64| {
            Box::new(scripted_agent(id, policy.reseeded(seed), seed)) as Box<dyn Agent>
        };
        let games = builtin_game_fixtures();
        let a = run_preference_battery(&factory, &games, GroupCondition::NoGroup, 5, 9, &opts()).unwrap();
        let serial = BatteryOptions { parallel: 1, ..opts() };
        let b = run_preference_battery(&factory, &games, GroupCondition::NoGroup, 5, 9, &serial).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn cr_logit_rates_match_analytic_probabilities() {
        let p = CRLogitPolicy {
            rho: 0.4,
            sigma: -0.1,
            gamma: 0.02,
            rng_seed: 0,
        };
        let policy = ScriptedPolicy::CrLogit(p);
        let factory = move |id: &str, seed: u64| {
            Box::new(scripted_agent(id, policy.reseeded(seed), seed)) as Box<dyn Agent>
        };
        let dict: Vec<GameSpec> = builtin_game_fixtures().into_iter().filter(|g| g.is_dictator()).collect();
        let n = 400;
        let b = run_preference_battery(&factory, &dict, GroupCondition::NoGroup, n, 3, &opts()).unwrap();
        let rates = b1_rates(&b.observations);
        for g in &dict {
            // independent evaluation of the choice probability
            let u = |x: Payoff| {
                let (a, b) = (f64::from(x.a), f64::from(x.b));
                if b > a {
                    0.4 * a + 0.6 * b
                } else if b < a {
                    -0.1 * a + 1.1 * b
                } else {
                    b
                }
            };
            let expected = 1.0 / (1.0 + (-0.02 * (u(g.payoff_b1) - u(g.payoff_b2))).exp());
            let got = rates[&(g.game_id.clone(), GroupCondition::NoGroup)].rate().unwrap();
            let se = (expected * (1.0 - expected) / f64::from(n)).sqrt().max(1e-3);
            assert!((got - expected).abs() < 4.0 * se, "{}: {got} vs {expected}", g.game_id);
        }
    }

    #[test]
    fn reconstructed_rates_within_rounding_of_table() {
        let table = builtin_observed_b1_rates();
        for cond in GroupCondition::ALL {
            let rates = b1_rates(&reconstructed_obs(cond));
            for ((id, c), p) in rates {
                assert!((p.rate().unwrap() - table[&(id.clone(), c)]).abs() <= 1.0 / 30.0, "{id} {c}");
            }
        }
    }

    #[test]
    fn reciprocity_triples() {
        let obs = reconstructed_obs(GroupCondition::NoGroup);
        let c = reciprocity_contrast(&RECIPROCITY_TRIPLES, &obs).unwrap();
        assert_eq!(c.len(), 3);
        let r: Vec<f64> = c[0].rates.iter().map(|p| p.rate().unwrap()).collect();
        for (got, want) in r.iter().zip([0.133, 0.533, 0.667]) {
            assert!((got - want).abs() < 1e-3);
        }
        assert!(matches!(
            reciprocity_contrast(&[("Dict 1", "Resp 2a", "Resp 1b")], &obs),
            Err(AnalysisError::PayoffMismatch(_))
        ));
        assert!(matches!(
            reciprocity_contrast(&[("Dict 9", "Resp 1a", "Resp 1b")], &obs),
            Err(AnalysisError::UnknownGame(_))
        ));
    }

    #[test]
    fn equal_observations_give_equal_rates() {
        let obs: Vec<PreferenceObservation> = ["Dict 2", "Resp 2a", "Resp 2b"]
            .iter()
            .flat_map(|id| {
                [BinaryChoice::B1, BinaryChoice::B2, BinaryChoice::B1].map(|c| PreferenceObservation {
                    session_id: String::new(),
                    game: builtin_game(id).unwrap(),
                    condition: GroupCondition::Outgroup,
                    choice: Some(c),
                    reason_text: String::new(),
                })
            })
            .collect();
        let c = reciprocity_contrast(&[("Dict 2", "Resp 2a", "Resp 2b")], &obs).unwrap();
        assert_eq!(c[0].rates[0], c[0].rates[1]);
        assert_eq!(c[0].rates[1], c[0].rates[2]);
    }

    #[test]
    fn swm_all_best_is_one() {
        let obs: Vec<PreferenceObservation> = builtin_game_fixtures()
            .into_iter()
            .filter_map(|g| match swm_option(&g) {
                SwmOption::Choice(c) => Some(PreferenceObservation {
                    session_id: String::new(),
                    game: g,
                    condition: GroupCondition::Ingroup,
                    choice: Some(c),
                    reason_text: String::new(),
                }),
                SwmOption::Tie => None,
            })
            .collect();
        let r = swm_rate(&obs).unwrap();
        assert_eq!(r[&GroupCondition::Ingroup].rate(), Some(1.0));
    }

    #[test]
    fn csv_columns_and_dataset() {
        let obs = reconstructed_obs(GroupCondition::Outgroup);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("obs.csv");
        write_observations_csv(&obs, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "game_id,condition,choice,pi_a_b1,pi_b_b1,pi_a_b2,pi_b_b2,pi_a_a1,pi_b_a1,swm_choice_flag,reason_text"
        );
        assert_eq!(lines.next().unwrap(), "Dict 1,outgroup,B1,400,400,750,400,,,0,");
        let d = to_dataset(&obs).unwrap();
        assert_eq!(d.len(), 330);
    }
}
