//! Motivation classification of free-text reasons and shared aggregation helpers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::Agent;
use crate::prompts::{build_prompt, default_options, parse_multiselect, ExperimentContext};
use crate::storage::StorageError;
use crate::types::{Experiment, SessionRecord};

/// Count of successes out of trials, with a binomial standard error.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proportion {
    pub successes: u64,
    pub trials: u64,
}

impl Proportion {
    pub fn new(successes: u64, trials: u64) -> Self {
        debug_assert!(successes <= trials);
        Proportion { successes, trials }
    }

    pub fn add(&mut self, success: bool) {
        self.trials += 1;
        if success {
            self.successes += 1;
        }
    }

    /// `None` when there are no trials.
    pub fn rate(&self) -> Option<f64> {
        (self.trials > 0).then(|| self.successes as f64 / self.trials as f64)
    }

    /// Standard error of the mean, `sqrt(p(1-p)/n)`.
    pub fn std_error(&self) -> Option<f64> {
        self.rate().map(|p| (p * (1.0 - p) / self.trials as f64).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaxonomyId {
    SocialLearning,
    Upstream,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MotivationOption {
    pub letter: char,
    pub label: &'static str,
    pub description: &'static str,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MotivationTaxonomy {
    pub id: TaxonomyId,
    pub options: Vec<MotivationOption>,
}

impl MotivationTaxonomy {
    pub fn letters(&self) -> impl Iterator<Item = char> + '_ {
        self.options.iter().map(|o| o.letter)
    }

    pub fn contains(&self, letter: char) -> bool {
        self.options.iter().any(|o| o.letter == letter)
    }
}

impl TaxonomyId {
    pub fn taxonomy(self) -> MotivationTaxonomy {
        let opt = |letter, label, description| MotivationOption { letter, label, description };
        let options = match self {
            TaxonomyId::SocialLearning => vec![
                opt('A', "Private signal integrity", "Prefers their own draw over the decisions of others."),
                opt('B', "Majority influence", "The majority's decision heavily influences the choice."),
                opt('C', "Probability weighing", "The perceived accuracy of their own signal drives the guess."),
                opt('D', "Bayesian reasoning", "Adjusts belief using both others' decisions and their own signal."),
                opt('E', "Independent assessment", "Lack of consensus among earlier reports leads to relying on their own draw."),
            ],
            TaxonomyId::Upstream => vec![
                opt('A', "Trust and Reciprocity", "Feels obliged to return the trust shown by the sender."),
                opt('B', "Financial Incentive", "Points convert to money, so keeping more is attractive."),
                opt('C', "One-time Interaction", "No future interaction, so no long-term consequences."),
                opt('D', "Principle of Fairness", "Returns a fair share without disadvantaging themselves."),
                opt('E', "No Tripling on Return", "Returned points are not tripled, so returning everything is a loss."),
            ],
        };
        MotivationTaxonomy { id: self, options }
    }
}

impl std::str::FromStr for TaxonomyId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "sociallearning" => Ok(TaxonomyId::SocialLearning),
            "upstream" => Ok(TaxonomyId::Upstream),
            _ => Err(format!("unknown taxonomy {s:?}")),
        }
    }
}

/// Where a reason came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonRef {
    pub session_id: String,
    pub event_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotivationLabeling {
    pub source: ReasonRef,
    /// Selected letters in A..E order; empty means the classifier abstained.
    pub selected: Vec<char>,
    pub classifier_id: String,
}

impl MotivationLabeling {
    pub fn abstained(&self) -> bool {
        self.selected.is_empty()
    }
}

pub trait MotivationClassifier {
    fn classifier_id(&self) -> String;

    /// Letters that apply; an empty vector is an abstention.
    fn classify(&mut self, reason: &str, taxonomy: &MotivationTaxonomy) -> Vec<char>;
}

/// Deterministic baseline: curated lower-case stems per option.
#[derive(Debug, Clone, Default)]
pub struct KeywordClassifier;

fn stems(id: TaxonomyId, letter: char) -> &'static [&'static str] {
    match (id, letter) {
        (TaxonomyId::SocialLearning, 'A') => &[
            "own draw", "my draw", "own ball", "my ball", "own signal", "my signal", "private signal",
            "trust my own", "stick with my", "stick to my",
        ],
        (TaxonomyId::SocialLearning, 'B') => &[
            "majority", "most of the others", "most others", "most participants", "follow the others",
            "go with the group", "herd",
        ],
        (TaxonomyId::SocialLearning, 'C') => &["probabilit", "2/3", "two-thirds", "two thirds", "likel", "chance", "odds"],
        (TaxonomyId::SocialLearning, 'D') => &["bayes", "update", "posterior", "prior belief", "my belief", "adjust"],
        (TaxonomyId::SocialLearning, 'E') => &[
            "no consensus", "lack of consensus", "not a consensus", "mixed", "conflicting", "split between",
            "independent",
        ],
        (TaxonomyId::Upstream, 'A') => &["trust", "reciproc", "gratitude", "grateful", "appreciat", "repay", "kindness", "generosity"],
        (TaxonomyId::Upstream, 'B') => &["money", "monetary", "financial", "profit", " nis", "shekel", "keep more", "self-interest", "personal gain"],
        (TaxonomyId::Upstream, 'C') => &[
            "one-time", "one time", "no future", "never interact", "not interact again", "won't interact",
            "anonymous", "never meet",
        ],
        (TaxonomyId::Upstream, 'D') => &["fair", "equal", "equitab", "half", "even split"],
        (TaxonomyId::Upstream, 'E') => &[
            "not tripled", "no tripling", "not be tripled", "won't be tripled", "isn't tripled", "aren't tripled",
            "without tripling", "not multiplied",
        ],
        _ => &[],
    }
}

impl MotivationClassifier for KeywordClassifier {
    fn classifier_id(&self) -> String {
        "keyword-v1".to_string()
    }

    fn classify(&mut self, reason: &str, taxonomy: &MotivationTaxonomy) -> Vec<char> {
        let text = reason.to_lowercase();
        taxonomy
            .letters()
            .filter(|&l| stems(taxonomy.id, l).iter().any(|s| text.contains(s)))
            .collect()
    }
}

/// Sends one classification prompt per reason to an agent and parses a
/// letters-only answer. Any failure is recorded as an abstention.
pub struct LlmClassifier<'a> {
    pub agent: &'a mut dyn Agent,
}

impl MotivationClassifier for LlmClassifier<'_> {
    fn classifier_id(&self) -> String {
        format!("llm:{}", self.agent.id())
    }

    fn classify(&mut self, reason: &str, taxonomy: &MotivationTaxonomy) -> Vec<char> {
        let ctx = ExperimentContext::Classification {
            taxonomy: taxonomy.id,
            reason: reason.to_string(),
        };
        let options = default_options(&ctx);
        let Ok(prompt) = build_prompt(&ctx, &options) else {
            return Vec::new();
        };
        self.agent.reset();
        let Ok(raw) = self.agent.decide(&prompt, &ctx) else {
            return Vec::new();
        };
        match parse_multiselect(&raw, &options) {
            Ok((_, letters)) => letters.iter().filter_map(|l| l.chars().next()).collect(),
            Err(_) => Vec::new(),
        }
    }
}

/// Labels each reason. Empty or blank reasons are abstentions without
/// consulting the classifier.
pub fn classify_motivations(
    reasons: &[(ReasonRef, String)],
    taxonomy: TaxonomyId,
    classifier: &mut dyn MotivationClassifier,
) -> Vec<MotivationLabeling> {
    let tax = taxonomy.taxonomy();
    let classifier_id = classifier.classifier_id();
    reasons
        .iter()
        .map(|(source, reason)| {
            let mut selected = if reason.trim().is_empty() {
                Vec::new()
            } else {
                classifier.classify(reason, &tax)
            };
            selected.retain(|&c| tax.contains(c));
            selected.sort_unstable();
            selected.dedup();
            MotivationLabeling {
                source: source.clone(),
                selected,
                classifier_id: classifier_id.clone(),
            }
        })
        .collect()
}

/// Reasons from valid events, optionally filtered by a predicate on the event.
pub fn collect_reasons(
    records: &[SessionRecord],
    mut keep: impl FnMut(&crate::types::DecisionEvent) -> bool,
) -> Vec<(ReasonRef, String)> {
    let mut out = Vec::new();
    for r in records {
        for (i, e) in r.events.iter().enumerate() {
            if e.parse_error.is_none() && keep(e) {
                out.push((
                    ReasonRef {
                        session_id: r.session_id.clone(),
                        event_index: i,
                    },
                    e.reason_text.clone(),
                ));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotivationDistribution {
    /// (letter, share of non-abstaining reasons selecting it), in A..E order.
    pub frequencies: Vec<(char, f64)>,
    pub labeled: usize,
    pub abstained: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnalysisError {
    #[error("nothing to aggregate")]
    Empty,
    #[error("expected {expected} records, found {found}")]
    ExperimentMismatch { expected: Experiment, found: Experiment },
    #[error("session {session_id}: {message}")]
    MalformedEvent { session_id: String, message: String },
    #[error("records mix conditions: {0}")]
    MixedConditions(String),
    #[error("unknown game id {0:?}")]
    UnknownGame(String),
    #[error("games {0} do not share the same B1/B2 payoffs")]
    PayoffMismatch(String),
}

/// Checks that every record comes from `expected`.
pub fn require_experiment(records: &[SessionRecord], expected: Experiment) -> Result<(), AnalysisError> {
    match records.iter().find(|r| r.experiment != expected) {
        Some(r) => Err(AnalysisError::ExperimentMismatch {
            expected,
            found: r.experiment,
        }),
        None => Ok(()),
    }
}

/// Share of labeled reasons selecting each option. Shares are not normalized
/// across options (multi-select).
pub fn motivation_distribution(
    labelings: &[MotivationLabeling],
    taxonomy: TaxonomyId,
) -> Result<MotivationDistribution, AnalysisError> {
    if labelings.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let abstained = labelings.iter().filter(|l| l.abstained()).count();
    let labeled = labelings.len() - abstained;
    let frequencies = taxonomy
        .taxonomy()
        .letters()
        .map(|c| {
            let hits = labelings.iter().filter(|l| l.selected.contains(&c)).count();
            let f = if labeled == 0 { 0.0 } else { hits as f64 / labeled as f64 };
            (c, f)
        })
        .collect();
    Ok(MotivationDistribution {
        frequencies,
        labeled,
        abstained,
    })
}

pub fn write_labelings_csv(labelings: &[MotivationLabeling], path: &Path) -> Result<(), StorageError> {
    let mut w = crate::storage::csv_writer(path)?;
    w.write_record(["session_id", "event_index", "letters", "classifier_id"])
        .map_err(|e| StorageError::csv(path, e))?;
    for l in labelings {
        let letters: Vec<String> = l.selected.iter().map(|c| c.to_string()).collect();
        w.write_record([
            l.source.session_id.clone(),
            l.source.event_index.to_string(),
            letters.join(";"),
            l.classifier_id.clone(),
        ])
        .map_err(|e| StorageError::csv(path, e))?;
    }
    w.flush().map_err(|e| StorageError::io(path, e))
}

pub fn write_distribution_csv(dist: &MotivationDistribution, path: &Path) -> Result<(), StorageError> {
    let mut w = crate::storage::csv_writer(path)?;
    w.write_record(["option", "frequency", "labeled", "abstained"])
        .map_err(|e| StorageError::csv(path, e))?;
    for (c, f) in &dist.frequencies {
        w.write_record([c.to_string(), format!("{f:.6}"), dist.labeled.to_string(), dist.abstained.to_string()])
            .map_err(|e| StorageError::csv(path, e))?;
    }
    w.flush().map_err(|e| StorageError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reasons(xs: &[&str]) -> Vec<(ReasonRef, String)> {
        xs.iter()
            .enumerate()
            .map(|(i, s)| {
                (
                    ReasonRef {
                        session_id: "s".into(),
                        event_index: i,
                    },
                    s.to_string(),
                )
            })
            .collect()
    }

    #[test]
    fn taxonomies_have_five_fixed_options() {
        let sl = TaxonomyId::SocialLearning.taxonomy();
        let labels: Vec<_> = sl.options.iter().map(|o| o.label).collect();
        assert_eq!(
            labels,
            ["Private signal integrity", "Majority influence", "Probability weighing", "Bayesian reasoning", "Independent assessment"]
        );
        let up = TaxonomyId::Upstream.taxonomy();
        let labels: Vec<_> = up.options.iter().map(|o| o.label).collect();
        assert_eq!(
            labels,
            ["Trust and Reciprocity", "Financial Incentive", "One-time Interaction", "Principle of Fairness", "No Tripling on Return"]
        );
        assert_eq!(sl.letters().collect::<String>(), "ABCDE");
    }

    // Hand-labelled reasons, written down before the stem lists were tuned.
    #[test]
    fn keyword_baseline_oracle() {
        let cases: &[(TaxonomyId, &str, &[char])] = &[
            (TaxonomyId::SocialLearning, "I trust my own draw more than others' guesses", &['A']),
            (TaxonomyId::SocialLearning, "The majority guessed B so I follow", &['B']),
            (TaxonomyId::SocialLearning, "My ball is A with probability 2/3 and I update on the two B guesses", &['A', 'C', 'D']),
            (TaxonomyId::SocialLearning, "Earlier guesses are mixed, so nothing to learn", &['E']),
            (TaxonomyId::Upstream, "Returning half is fair, and points I send back are not tripled.", &['D', 'E']),
            (TaxonomyId::Upstream, "A trusted me, I want to reciprocate", &['A']),
            (TaxonomyId::Upstream, "It is a one-time game and the points are money", &['B', 'C']),
        ];
        for (tax, text, expected) in cases {
            let l = classify_motivations(&reasons(&[text]), *tax, &mut KeywordClassifier);
            assert_eq!(l[0].selected, expected.to_vec(), "{text}");
        }
    }

    #[test]
    fn empty_reason_abstains() {
        let l = classify_motivations(&reasons(&["", "   "]), TaxonomyId::Upstream, &mut KeywordClassifier);
        assert!(l.iter().all(|x| x.abstained()));
    }

    #[test]
    fn keyword_is_case_insensitive_and_idempotent() {
        let text = "RETURNING HALF IS FAIR";
        let a = classify_motivations(&reasons(&[text]), TaxonomyId::Upstream, &mut KeywordClassifier);
        let b = classify_motivations(&reasons(&[&text.to_lowercase()]), TaxonomyId::Upstream, &mut KeywordClassifier);
        let c = classify_motivations(&reasons(&[text]), TaxonomyId::Upstream, &mut KeywordClassifier);
        assert_eq!(a[0].selected, b[0].selected);
        assert_eq!(a, c);
    }

    fn labeling(letters: &[char]) -> MotivationLabeling {
        MotivationLabeling {
            source: ReasonRef {
                session_id: "s".into(),
                event_index: 0,
            },
            selected: letters.to_vec(),
            classifier_id: "t".into(),
        }
    }

    #[test]
    fn distribution_all_c() {
        let ls = vec![labeling(&['C']); 3];
        let d = motivation_distribution(&ls, TaxonomyId::SocialLearning).unwrap();
        assert_eq!(d.frequencies, vec![('A', 0.0), ('B', 0.0), ('C', 1.0), ('D', 0.0), ('E', 0.0)]);
    }

    #[test]
    fn distribution_hand_computed() {
        // {A,C}, {C}, {C,D}, abstain -> 3 labeled; A 1/3, C 3/3, D 1/3
        let ls = vec![labeling(&['A', 'C']), labeling(&['C']), labeling(&['C', 'D']), labeling(&[])];
        let d = motivation_distribution(&ls, TaxonomyId::SocialLearning).unwrap();
        assert_eq!(d.labeled, 3);
        assert_eq!(d.abstained, 1);
        let f: Vec<f64> = d.frequencies.iter().map(|x| x.1).collect();
        assert_eq!(f, vec![1.0 / 3.0, 0.0, 1.0, 1.0 / 3.0, 0.0]);
        assert!(motivation_distribution(&[], TaxonomyId::SocialLearning).is_err());
    }

    #[test]
    fn proportion_se() {
        let p = Proportion::new(2, 3);
        assert!((p.rate().unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.std_error().unwrap() - (2.0 / 9.0 / 3.0_f64).sqrt()).abs() < 1e-15);
        assert_eq!(Proportion::default().rate(), None);
    }
}
