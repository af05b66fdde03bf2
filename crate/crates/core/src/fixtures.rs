//! Built-in dictator/response game battery and its observed B1 shares.
//!
//! The battery covers five dictator games, seven response games where A
//! showed good intention and ten where A misbehaved. Observed shares were
//! reported to one decimal percent over 15 replicates per cell, which lets the
//! binary-choice data behind each cell be rebuilt exactly.

use std::collections::BTreeMap;

use crate::types::{BinaryChoice, GameKind, GameSpec, GroupCondition, Payoff};

/// Replicates behind every observed share (all shares are multiples of 1/15).
pub const REPLICATES_PER_CELL: u32 = 15;

type Row = (&'static str, GameKind, Option<(u32, u32)>, (u32, u32), (u32, u32), [f64; 3]);

// game, kind, A1, B1, B2, B1 share for [no group, ingroup, outgroup]
const TABLE: [Row; 22] = {
    use GameKind::*;
    [
        ("Dict 1", Dictator, None, (400, 400), (750, 400), [0.133, 0.200, 1.000]),
        ("Dict 2", Dictator, None, (400, 400), (750, 375), [0.933, 0.533, 0.933]),
        ("Dict 3", Dictator, None, (300, 600), (700, 500), [0.800, 0.000, 1.000]),
        ("Dict 4", Dictator, None, (200, 700), (600, 600), [0.200, 0.000, 0.400]),
        ("Dict 5", Dictator, None, (0, 800), (400, 400), [0.133, 0.067, 0.467]),
        ("Resp 1a", ResponseGoodIntention, Some((750, 0)), (400, 400), (750, 400), [0.533, 0.867, 1.000]),
        ("Resp 2a", ResponseGoodIntention, Some((750, 0)), (400, 400), (750, 375), [1.000, 1.000, 1.000]),
        ("Resp 3", ResponseGoodIntention, Some((750, 100)), (300, 600), (700, 500), [1.000, 0.667, 1.000]),
        ("Resp 4", ResponseGoodIntention, Some((700, 200)), (200, 700), (600, 600), [1.000, 0.333, 0.800]),
        ("Resp 5a", ResponseGoodIntention, Some((800, 0)), (0, 800), (400, 400), [0.800, 0.000, 0.600]),
        ("Resp 8", ResponseGoodIntention, Some((725, 0)), (400, 400), (750, 375), [0.933, 0.933, 1.000]),
        ("Resp 9", ResponseGoodIntention, Some((450, 0)), (350, 450), (450, 350), [1.000, 0.333, 1.000]),
        ("Resp 12", ResponseMisbehave, Some((375, 1000)), (400, 400), (250, 350), [1.000, 1.000, 0.933]),
        ("Resp 13a", ResponseMisbehave, Some((750, 750)), (800, 200), (0, 0), [1.000, 1.000, 1.000]),
        ("Resp 13b", ResponseMisbehave, Some((750, 750)), (800, 200), (0, 50), [1.000, 1.000, 0.400]),
        ("Resp 13c", ResponseMisbehave, Some((750, 750)), (800, 200), (0, 100), [1.000, 1.000, 0.533]),
        ("Resp 13d", ResponseMisbehave, Some((750, 750)), (800, 200), (0, 150), [1.000, 1.000, 0.333]),
        ("Resp 1b", ResponseMisbehave, Some((550, 550)), (400, 400), (750, 400), [0.667, 0.400, 0.933]),
        ("Resp 2b", ResponseMisbehave, Some((550, 550)), (400, 400), (750, 375), [1.000, 0.800, 1.000]),
        ("Resp 5b", ResponseMisbehave, Some((0, 800)), (0, 800), (400, 400), [0.933, 0.200, 0.933]),
        ("Resp 6", ResponseMisbehave, Some((100, 1000)), (75, 125), (125, 125), [0.533, 0.000, 0.800]),
        ("Resp 7", ResponseMisbehave, Some((450, 900)), (200, 400), (400, 400), [0.133, 0.133, 0.667]),
    ]
};

/// Triples sharing B's option set across dictator / good-intention / misbehave framings.
pub const RECIPROCITY_TRIPLES: [(&str, &str, &str); 3] = [
    ("Dict 1", "Resp 1a", "Resp 1b"),
    ("Dict 2", "Resp 2a", "Resp 2b"),
    ("Dict 5", "Resp 5a", "Resp 5b"),
];

fn pair(p: (u32, u32)) -> Payoff {
    Payoff::new(p.0, p.1)
}

/// The 22 built-in games in table order.
pub fn builtin_game_fixtures() -> Vec<GameSpec> {
    TABLE
        .iter()
        .map(|&(id, kind, a1, b1, b2, _)| {
            GameSpec::new(id, kind, a1.map(pair), pair(b1), pair(b2))
                .expect("built-in fixture is well formed")
        })
        .collect()
}

pub fn builtin_game(game_id: &str) -> Option<GameSpec> {
    builtin_game_fixtures().into_iter().find(|g| g.game_id == game_id)
}

fn column(condition: GroupCondition) -> usize {
    match condition {
        GroupCondition::NoGroup => 0,
        GroupCondition::Ingroup => 1,
        GroupCondition::Outgroup => 2,
    }
}

/// Observed B1 share for each (game, condition) cell; 66 entries.
pub fn builtin_observed_b1_rates() -> BTreeMap<(String, GroupCondition), f64> {
    let mut out = BTreeMap::new();
    for &(id, _, _, _, _, rates) in TABLE.iter() {
        for cond in GroupCondition::ALL {
            out.insert((id.to_string(), cond), rates[column(cond)]);
        }
    }
    out
}

/// Number of B1 choices behind an observed share.
pub fn b1_count(rate: f64) -> u32 {
    (rate * f64::from(REPLICATES_PER_CELL)).round() as u32
}

/// One rebuilt binary observation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReconstructedChoice {
    pub game: GameSpec,
    pub condition: GroupCondition,
    pub choice: BinaryChoice,
}

/// Rebuilds the binary choices behind the table for one condition:
/// `round(rate * 15)` B1 rows followed by the remaining B2 rows, per game in
/// table order.
pub fn reconstruct_choices(condition: GroupCondition) -> Vec<ReconstructedChoice> {
    let rates = builtin_observed_b1_rates();
    let mut out = Vec::with_capacity(TABLE.len() * REPLICATES_PER_CELL as usize);
    for game in builtin_game_fixtures() {
        let k = b1_count(rates[&(game.game_id.clone(), condition)]);
        for i in 0..REPLICATES_PER_CELL {
            let choice = if i < k { BinaryChoice::B1 } else { BinaryChoice::B2 };
            out.push(ReconstructedChoice {
                game: game.clone(),
                condition,
                choice,
            });
        }
    }
    out
}
