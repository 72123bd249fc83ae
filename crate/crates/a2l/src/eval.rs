//! Scoring of rollout logs with partial-credit rubrics and keyword-based
//! task-decomposition checks, latency statistics, and the representation
//! log-probability probe.
//!
//! Scoring is pure and stateless; episodes can be scored in parallel.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChatMessage, Client};
use crate::codec::{encode_at, serialize_chunk, CodecError, TokenMap};
use crate::model::ActionChunk;
use crate::rollout::RolloutLog;
use crate::sim::FinalState;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("rubric references unknown entity {0:?}")]
    UnknownEntity(String),
    #[error("bad rubric: {0}")]
    BadRubric(String),
    #[error("no durations supplied")]
    EmptyInput,
    #[error("durations must be positive and finite, got {0}")]
    NonPositiveDuration(f64),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Synonym groups that must all be present (case-insensitive substrings)
/// for planning credit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSpec {
    pub groups: Vec<Vec<String>>,
}

impl KeywordSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.groups.iter().any(|g| g.is_empty()) {
            return Err(EvalError::BadRubric("empty synonym group".into()));
        }
        Ok(())
    }
}

/// True iff every required group has at least one member present in `text`
/// as a case-insensitive substring. Word order is irrelevant.
pub fn keyword_score(text: &str, spec: &KeywordSpec) -> bool {
    let haystack = text.to_lowercase();
    spec.groups.iter().all(|group| {
        group
            .iter()
            .any(|member| haystack.contains(&member.to_lowercase()))
    })
}

/// A milestone check over the rollout log and final environment state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Predicate {
    /// Episode-minimum end-effector distance to the object fell below the
    /// contact radius.
    Contacted(String),
    /// The object rests inside the region and is not held.
    Placed(String, String),
    /// The object, while held, rose past the lift threshold.
    Lifted(String),
    /// The plan/reasoning text passes the rubric's keyword spec.
    PlanningKeywords,
}

impl Predicate {
    fn parse(text: &str) -> Result<Self, EvalError> {
        let parts: Vec<&str> = text.split(':').collect();
        match parts.as_slice() {
            ["planning_keywords"] => Ok(Predicate::PlanningKeywords),
            ["contacted", object] => Ok(Predicate::Contacted(object.to_string())),
            ["lifted", object] => Ok(Predicate::Lifted(object.to_string())),
            ["placed", object, region] => {
                Ok(Predicate::Placed(object.to_string(), region.to_string()))
            }
            _ => Err(EvalError::BadRubric(format!("unknown predicate {text:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Milestone {
    pub points: u32,
    pub name: String,
    pub requires: Vec<Predicate>,
}

/// An ordered partial-credit rubric: points equal the highest milestone
/// whose predicates, and all lower milestones', hold.
#[derive(Debug, Clone, PartialEq)]
pub struct Rubric {
    pub id: String,
    pub max_points: u32,
    pub milestones: Vec<Milestone>,
    pub keywords: Option<KeywordSpec>,
}

impl Rubric {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.milestones.len() != self.max_points as usize {
            return Err(EvalError::BadRubric(format!(
                "{} milestones for max_points {}",
                self.milestones.len(),
                self.max_points
            )));
        }
        for (i, milestone) in self.milestones.iter().enumerate() {
            if milestone.points != i as u32 + 1 {
                return Err(EvalError::BadRubric(
                    "milestone points must be strictly increasing 1..max".into(),
                ));
            }
            if milestone.requires.is_empty() {
                return Err(EvalError::BadRubric(format!(
                    "milestone {:?} has no predicates",
                    milestone.name
                )));
            }
        }
        let wants_keywords = self
            .milestones
            .iter()
            .flat_map(|m| &m.requires)
            .any(|p| *p == Predicate::PlanningKeywords);
        match (&self.keywords, wants_keywords) {
            (None, true) => Err(EvalError::BadRubric(
                "planning_keywords predicate requires a [keywords] table".into(),
            )),
            (Some(spec), _) => spec.validate(),
            _ => Ok(()),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RubricFile {
    id: String,
    max_points: u32,
    keywords: Option<KeywordSpec>,
    #[serde(rename = "milestones")]
    milestones: Vec<MilestoneFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MilestoneFile {
    points: u32,
    name: String,
    requires: Vec<String>,
}

pub fn parse_rubric(text: &str) -> Result<Rubric, EvalError> {
    let file: RubricFile =
        toml::from_str(text).map_err(|e| EvalError::BadRubric(e.to_string()))?;
    let rubric = Rubric {
        id: file.id,
        max_points: file.max_points,
        milestones: file
            .milestones
            .into_iter()
            .map(|m| {
                Ok(Milestone {
                    points: m.points,
                    name: m.name,
                    requires: m
                        .requires
                        .iter()
                        .map(|r| Predicate::parse(r))
                        .collect::<Result<_, _>>()?,
                })
            })
            .collect::<Result<_, EvalError>>()?,
        keywords: file.keywords,
    };
    rubric.validate()?;
    Ok(rubric)
}

pub fn load_rubric(path: &Path) -> Result<Rubric, EvalError> {
    parse_rubric(&std::fs::read_to_string(path)?)
}

/// The rubrics shipped for the five evaluation tasks.
pub fn builtin_rubric(id: &str) -> Option<Rubric> {
    let text = match id {
        "pick_up" => include_str!("../assets/rubrics/pick_up.toml"),
        "pick_and_place" => include_str!("../assets/rubrics/pick_and_place.toml"),
        "pick_place_lift" => include_str!("../assets/rubrics/pick_place_lift.toml"),
        "pick_up_t" => include_str!("../assets/rubrics/pick_up_t.toml"),
        "pick_up_a" => include_str!("../assets/rubrics/pick_up_a.toml"),
        _ => return None,
    };
    Some(parse_rubric(text).expect("shipped rubrics parse"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilestoneOutcome {
    pub name: String,
    pub points: u32,
    pub achieved: bool,
}

/// Rubric-scored outcome of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub episode_id: String,
    pub rubric_id: String,
    pub points: u32,
    pub max: u32,
    pub milestones: Vec<MilestoneOutcome>,
    pub keyword_flag: Option<bool>,
}

fn check_predicate(
    predicate: &Predicate,
    log: &RolloutLog,
    final_state: &FinalState,
    rubric: &Rubric,
) -> Result<bool, EvalError> {
    match predicate {
        Predicate::Contacted(object) => {
            let object = final_state
                .object(object)
                .ok_or_else(|| EvalError::UnknownEntity(object.clone()))?;
            Ok(object.min_distance < final_state.contact_radius)
        }
        Predicate::Lifted(object) => {
            let object = final_state
                .object(object)
                .ok_or_else(|| EvalError::UnknownEntity(object.clone()))?;
            Ok(object.lifted)
        }
        Predicate::Placed(object, region) => {
            let region = final_state
                .region(region)
                .ok_or_else(|| EvalError::UnknownEntity(region.clone()))?;
            let object = final_state
                .object(object)
                .ok_or_else(|| EvalError::UnknownEntity(object.clone()))?;
            Ok(!object.held && region.bounds.contains(object.position, 1e-9))
        }
        Predicate::PlanningKeywords => {
            let spec = rubric
                .keywords
                .as_ref()
                .expect("validated: keywords present");
            Ok(keyword_score(&log.planning_text(), spec))
        }
    }
}

/// Scores one episode: points are the highest milestone whose predicates,
/// and every lower milestone's, all hold. Pure in (log, final state, rubric).
pub fn score_trial(
    log: &RolloutLog,
    final_state: &FinalState,
    rubric: &Rubric,
) -> Result<ScoreCard, EvalError> {
    rubric.validate()?;
    let mut milestones = Vec::with_capacity(rubric.milestones.len());
    for milestone in &rubric.milestones {
        let mut achieved = true;
        for predicate in &milestone.requires {
            achieved &= check_predicate(predicate, log, final_state, rubric)?;
        }
        milestones.push(MilestoneOutcome {
            name: milestone.name.clone(),
            points: milestone.points,
            achieved,
        });
    }
    let points = milestones
        .iter()
        .take_while(|m| m.achieved)
        .map(|m| m.points)
        .last()
        .unwrap_or(0);
    let keyword_flag = rubric
        .keywords
        .as_ref()
        .map(|spec| keyword_score(&log.planning_text(), spec));
    Ok(ScoreCard {
        episode_id: log.episode_id.clone(),
        rubric_id: rubric.id.clone(),
        points,
        max: rubric.max_points,
        milestones,
        keyword_flag,
    })
}

/// Summary statistics over a latency sample, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median: f64,
    pub mean: f64,
    pub std_dev: f64,
    pub p25: f64,
    pub p75: f64,
    pub min: f64,
    pub max: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = q * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Median (midpoint of the middle two for even counts), mean, sample
/// standard deviation (n-1 form; 0 for a singleton), interquartile range by
/// linear interpolation, min, and max.
pub fn latency_stats(durations: &[f64]) -> Result<LatencyStats, EvalError> {
    if durations.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    for &d in durations {
        if !(d.is_finite() && d > 0.0) {
            return Err(EvalError::NonPositiveDuration(d));
        }
    }
    let mut sorted = durations.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let std_dev = if n == 1 {
        0.0
    } else {
        let ss: f64 = sorted.iter().map(|d| (d - mean) * (d - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    };
    Ok(LatencyStats {
        median: percentile(&sorted, 0.5),
        mean,
        std_dev,
        p25: percentile(&sorted, 0.25),
        p75: percentile(&sorted, 0.75),
        min: sorted[0],
        max: sorted[n - 1],
    })
}

/// Mean log-probabilities of one chunk scored as a forced completion under
/// the same prompt in both representations: plain text and the
/// reserved-token encoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbePair {
    pub language_mean: f64,
    pub action_token_mean: f64,
}

/// Scores `serialize_chunk(chunk)` and its token-encoded form as forced
/// completions under `prompt` and returns both mean log-probabilities.
pub fn representation_probe(
    backend: &Client,
    prompt: &[ChatMessage],
    chunk: &ActionChunk,
    map: &TokenMap,
) -> Result<ProbePair, EvalError> {
    let language = serialize_chunk(chunk)?;
    let action_token = encode_at(&language, map);
    let language_mean = backend.score_completion(prompt, &language)?.mean;
    let action_token_mean = backend.score_completion(prompt, &action_token)?.mean;
    Ok(ProbePair {
        language_mean,
        action_token_mean,
    })
}

/// Scores a batch of chunks with [`representation_probe`].
pub fn probe_chunks(
    backend: &Client,
    prompt: &[ChatMessage],
    chunks: &[ActionChunk],
    map: &TokenMap,
) -> Result<Vec<ProbePair>, EvalError> {
    chunks
        .iter()
        .map(|chunk| representation_probe(backend, prompt, chunk, map))
        .collect()
}

/// Buckets the per-chunk differences (language minus action-token mean) into
/// a fixed-width histogram keyed by bucket lower bound.
pub fn difference_histogram(pairs: &[ProbePair], bin_width: f64) -> BTreeMap<String, u32> {
    let mut bins = BTreeMap::new();
    for pair in pairs {
        let diff = pair.language_mean - pair.action_token_mean;
        let lower = (diff / bin_width).floor() * bin_width;
        *bins.entry(format!("{lower:.2}")).or_insert(0) += 1;
    }
    bins
}

/// Per-rubric aggregate over a batch of score cards.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RubricAggregate {
    pub rubric_id: String,
    pub trials: u32,
    pub mean_points: f64,
    pub max: u32,
    pub mean_fraction: f64,
}

/// Aggregates score cards per rubric and renders both a machine-readable
/// summary and a plain-text table.
pub fn aggregate_report(cards: &[ScoreCard]) -> (Vec<RubricAggregate>, String) {
    let mut grouped: BTreeMap<&str, Vec<&ScoreCard>> = BTreeMap::new();
    for card in cards {
        grouped.entry(&card.rubric_id).or_default().push(card);
    }
    let aggregates: Vec<RubricAggregate> = grouped
        .into_iter()
        .map(|(rubric_id, group)| {
            let trials = group.len() as u32;
            let mean_points =
                group.iter().map(|c| c.points as f64).sum::<f64>() / trials as f64;
            let max = group[0].max;
            RubricAggregate {
                rubric_id: rubric_id.to_string(),
                trials,
                mean_points,
                max,
                mean_fraction: if max == 0 {
                    0.0
                } else {
                    mean_points / max as f64
                },
            }
        })
        .collect();
    let mut table = format!(
        "{:<20} {:>6} {:>12} {:>14}\n",
        "rubric", "trials", "mean_points", "mean_fraction"
    );
    for aggregate in &aggregates {
        table.push_str(&format!(
            "{:<20} {:>6} {:>9.3}/{} {:>14.3}\n",
            aggregate.rubric_id,
            aggregate.trials,
            aggregate.mean_points,
            aggregate.max,
            aggregate.mean_fraction
        ));
    }
    (aggregates, table)
}
