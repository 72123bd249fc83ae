//! Relabeling of raw teleoperation trajectories into hierarchical
//! natural-language annotations via an external chat-completion model, with
//! action-fidelity validation, plus the two augmentation sample generators
//! (subtask-completion verifier pairs and direction prediction).
//!
//! Trajectories are annotated independently under a bounded-parallelism
//! contract; results are collected in submission order.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use thiserror::Error;

use crate::backend::{BackendError, ChatMessage, ChatRequest, Client, Part, Role, TokenUsage};
use crate::codec::{coalesce, strip_fences, CoalesceConfig, CodecError};
use crate::model::{
    Action, AnnotatedStep, AnnotatedTrajectory, Axis, Component, Provenance, RawTrajectory,
};
use crate::prompts::{annotation_template, render_annotation_prompt, PromptError};

/// Net per-axis movement below this labels a direction sample "none".
pub const DIRECTION_THRESHOLD: f64 = 0.025;

const GRIPPER_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("step {step}: missing or invalid key {key}")]
    SchemaViolation { key: &'static str, step: usize },
    #[error("step {step}: bad actions: {reason}")]
    ActionParseError { step: usize, reason: String },
    #[error("action count mismatch: expected {expected}, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("action value mismatch at flat index {flat_index} ({component}): delta {delta}")]
    ValueMismatch {
        flat_index: usize,
        component: Component,
        delta: f64,
    },
    #[error("too few steps for verifier pairs")]
    TooFewSteps,
    #[error("annotation exhausted for trajectory {trajectory} after {attempts} attempts: {last}")]
    Exhausted {
        trajectory: String,
        attempts: u32,
        last: String,
    },
    #[error("backend failure: {0}")]
    Backend(#[from] BackendError),
    #[error("coalesce failure: {0}")]
    Coalesce(#[from] CodecError),
    #[error("model error: {0}")]
    Model(#[from] crate::model::ModelError),
}

/// Settings for one annotation job.
#[derive(Debug, Clone)]
pub struct AnnotationJobConfig {
    /// Annotator model id, recorded in provenance.
    pub model: String,
    pub max_attempts: u32,
    pub concurrency: usize,
    pub prompt_version: String,
    pub coalesce: CoalesceConfig,
    /// Provenance timestamp. Fixed by default so identical inputs produce
    /// byte-identical outputs; override for wall-clock stamping.
    pub timestamp: String,
}

impl Default for AnnotationJobConfig {
    fn default() -> Self {
        Self {
            model: "annotator".to_string(),
            max_attempts: 3,
            concurrency: 4,
            prompt_version: "v1".to_string(),
            coalesce: CoalesceConfig::default(),
            timestamp: "1970-01-01T00:00:00Z".to_string(),
        }
    }
}

/// One step as parsed from the annotator's reply, before observation
/// alignment and index assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFragment {
    pub subtask: String,
    pub reasoning: String,
    pub main_movements: String,
    pub actions: Vec<Action>,
}

/// One structured progress line per annotation attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct AttemptRecord {
    pub trajectory: String,
    pub attempt: u32,
    pub outcome: String,
    pub usage: Option<TokenUsage>,
}

pub trait ProgressSink: Send + Sync {
    fn record(&self, record: &AttemptRecord);
}

/// Discards progress records.
pub struct NullProgress;

impl ProgressSink for NullProgress {
    fn record(&self, _record: &AttemptRecord) {}
}

/// Collects progress records in memory.
#[derive(Default)]
pub struct MemoryProgress(Mutex<Vec<AttemptRecord>>);

impl MemoryProgress {
    pub fn records(&self) -> Vec<AttemptRecord> {
        self.0.lock().unwrap().clone()
    }
}

impl ProgressSink for MemoryProgress {
    fn record(&self, record: &AttemptRecord) {
        self.0.lock().unwrap().push(record.clone());
    }
}

/// Builds the relabeling request for one trajectory: every observation
/// attached in temporal order, followed by the filled prompt (coordinate
/// convention preamble, instruction, and the full action log).
pub fn build_annotation_request(
    raw: &RawTrajectory,
    cfg: &AnnotationJobConfig,
) -> Result<ChatRequest, AnnotateError> {
    let template = annotation_template(&cfg.prompt_version)?;
    let actions: Vec<Action> = raw.actions().copied().collect();
    let prompt = render_annotation_prompt(template, raw.instruction(), &actions);
    let mut parts: Vec<Part> = raw
        .frames()
        .iter()
        .map(|f| Part::Image(f.obs_ref.clone()))
        .collect();
    parts.push(Part::Text(prompt));
    Ok(ChatRequest::new(cfg.model.clone()).message(ChatMessage::user(parts)))
}

fn fragment_string(obj: &Value, key: &'static str, step: usize) -> Result<String, AnnotateError> {
    obj.get(key)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or(AnnotateError::SchemaViolation { key, step })
}

fn fragment_action(step: usize, row: &Value) -> Result<Action, AnnotateError> {
    let fields = row
        .as_array()
        .ok_or_else(|| AnnotateError::ActionParseError {
            step,
            reason: "action row is not an array".into(),
        })?;
    if fields.len() != 4 {
        return Err(AnnotateError::ActionParseError {
            step,
            reason: format!("action row has {} fields, expected 4", fields.len()),
        });
    }
    let mut values = [0.0f64; 4];
    for (slot, field) in values.iter_mut().zip(fields) {
        *slot = field
            .as_f64()
            .ok_or_else(|| AnnotateError::ActionParseError {
                step,
                reason: format!("non-numeric field {field}"),
            })?;
    }
    let gripper = if values[3].abs() <= GRIPPER_EPS {
        0.0
    } else if (values[3] - 1.0).abs() <= GRIPPER_EPS {
        1.0
    } else {
        return Err(AnnotateError::ActionParseError {
            step,
            reason: format!("gripper value {} is not binary", values[3]),
        });
    };
    Action::new(values[0], values[1], values[2], gripper).map_err(|e| {
        AnnotateError::ActionParseError {
            step,
            reason: e.to_string(),
        }
    })
}

/// Parses the annotator's reply: code fences stripped, then a top-level
/// array of objects each carrying `STEP_DESCRIPTION`, `REASONING`,
/// `MAIN_MOVEMENTS`, and `ACTIONS`. Step order is preserved; observation
/// refs and indices are assigned later by alignment.
pub fn parse_annotation(text: &str) -> Result<Vec<StepFragment>, AnnotateError> {
    let schema_err = AnnotateError::SchemaViolation {
        key: "top-level array",
        step: 0,
    };
    let body = strip_fences(text);
    let start = match body.find('[') {
        Some(start) => start,
        None => return Err(schema_err),
    };
    let mut stream = serde_json::Deserializer::from_str(&body[start..]).into_iter::<Value>();
    let value = match stream.next() {
        Some(Ok(value)) => value,
        _ => return Err(schema_err),
    };
    let items = match value.as_array() {
        Some(items) if !items.is_empty() => items,
        _ => return Err(schema_err),
    };
    let mut fragments = Vec::with_capacity(items.len());
    for (step, item) in items.iter().enumerate() {
        let rows = item
            .get("ACTIONS")
            .and_then(Value::as_array)
            .ok_or(AnnotateError::SchemaViolation {
                key: "ACTIONS",
                step,
            })?;
        if rows.is_empty() {
            return Err(AnnotateError::SchemaViolation {
                key: "ACTIONS",
                step,
            });
        }
        let actions = rows
            .iter()
            .map(|row| fragment_action(step, row))
            .collect::<Result<Vec<_>, _>>()?;
        fragments.push(StepFragment {
            subtask: fragment_string(item, "STEP_DESCRIPTION", step)?,
            reasoning: fragment_string(item, "REASONING", step)?,
            main_movements: fragment_string(item, "MAIN_MOVEMENTS", step)?,
            actions,
        });
    }
    Ok(fragments)
}

/// Checks that the concatenated fragment actions echo the raw sequence
/// (count-exact, each component within `tolerance`), and returns the
/// alignment: for each step, the index of the first raw frame it consumes.
pub fn validate_partition(
    raw: &RawTrajectory,
    fragments: &[StepFragment],
    tolerance: f64,
) -> Result<Vec<usize>, AnnotateError> {
    let expected = raw.frames().len();
    let got: usize = fragments.iter().map(|f| f.actions.len()).sum();
    if expected != got {
        return Err(AnnotateError::CountMismatch { expected, got });
    }
    let mut flat_index = 0usize;
    let mut alignment = Vec::with_capacity(fragments.len());
    for fragment in fragments {
        alignment.push(flat_index);
        for action in &fragment.actions {
            let reference = &raw.frames()[flat_index].action;
            for component in [
                Component::Dx,
                Component::Dy,
                Component::Dz,
                Component::Gripper,
            ] {
                let delta = action.component(component) - reference.component(component);
                if delta.abs() > tolerance {
                    return Err(AnnotateError::ValueMismatch {
                        flat_index,
                        component,
                        delta,
                    });
                }
            }
            flat_index += 1;
        }
    }
    Ok(alignment)
}

fn corrective_notice(failure: &AnnotateError) -> String {
    format!(
        "Your previous reply could not be used: {failure}. Respond again with only the \
         corrected JSON array of steps (keys STEP_DESCRIPTION, REASONING, MAIN_MOVEMENTS, \
         ACTIONS); the concatenation of all ACTIONS must match the provided action log \
         exactly."
    )
}

/// Annotates one trajectory, retrying up to `max_attempts` on parse or
/// validation failure; each retry appends the model's reply and a corrective
/// notice to the conversation. Backend failures abort immediately. On
/// success, each step's chunk is coalesced and provenance recorded.
pub fn annotate(
    raw: &RawTrajectory,
    client: &Client,
    cfg: &AnnotationJobConfig,
    progress: &dyn ProgressSink,
) -> Result<AnnotatedTrajectory, AnnotateError> {
    let initial = build_annotation_request(raw, cfg)?;
    let mut messages = initial.messages;
    let mut last_failure = String::from("no attempts made");
    for attempt in 1..=cfg.max_attempts.max(1) {
        let mut request = ChatRequest::new(cfg.model.clone());
        request.messages = messages.clone();
        let response = client.complete(&request)?;
        let outcome = parse_annotation(&response.text).and_then(|fragments| {
            validate_partition(raw, &fragments, cfg.coalesce.partition_tolerance)
                .map(|alignment| (fragments, alignment))
        });
        match outcome {
            Ok((fragments, alignment)) => {
                progress.record(&AttemptRecord {
                    trajectory: raw.id().to_string(),
                    attempt,
                    outcome: "ok".into(),
                    usage: response.usage,
                });
                let steps = fragments
                    .into_iter()
                    .zip(&alignment)
                    .enumerate()
                    .map(|(index, (fragment, &frame_index))| {
                        Ok(AnnotatedStep {
                            index,
                            subtask: fragment.subtask,
                            reasoning: fragment.reasoning,
                            main_movements: fragment.main_movements,
                            obs_ref: raw.frames()[frame_index].obs_ref.clone(),
                            chunk: coalesce(&fragment.actions, &cfg.coalesce)?,
                        })
                    })
                    .collect::<Result<Vec<_>, AnnotateError>>()?;
                return Ok(AnnotatedTrajectory::new(
                    raw.id().to_string(),
                    raw.instruction().to_string(),
                    steps,
                    Provenance {
                        model: cfg.model.clone(),
                        prompt_version: cfg.prompt_version.clone(),
                        ts: cfg.timestamp.clone(),
                        attempts: attempt,
                    },
                )?);
            }
            Err(failure) => {
                progress.record(&AttemptRecord {
                    trajectory: raw.id().to_string(),
                    attempt,
                    outcome: failure.to_string(),
                    usage: response.usage,
                });
                last_failure = failure.to_string();
                messages.push(ChatMessage::text(Role::Assistant, response.text));
                messages.push(ChatMessage::text(Role::User, corrective_notice(&failure)));
            }
        }
    }
    Err(AnnotateError::Exhausted {
        trajectory: raw.id().to_string(),
        attempts: cfg.max_attempts,
        last: last_failure,
    })
}

/// Annotates a batch with at most `cfg.concurrency` in-flight backend calls.
/// Results are returned in submission order.
pub fn annotate_all(
    raws: &[RawTrajectory],
    client: &Client,
    cfg: &AnnotationJobConfig,
    progress: &dyn ProgressSink,
) -> Vec<Result<AnnotatedTrajectory, AnnotateError>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<AnnotatedTrajectory, AnnotateError>>>> =
        raws.iter().map(|_| Mutex::new(None)).collect();
    let workers = cfg.concurrency.max(1).min(raws.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= raws.len() {
                    break;
                }
                let result = annotate(&raws[index], client, cfg, progress);
                *slots[index].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("worker filled slot"))
        .collect()
}

/// A subtask-completion example: observations before/after plus the subtask,
/// labeled successful iff the after-observation is the step's true successor.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifierPairSample {
    pub obs_before: String,
    pub obs_after: String,
    pub subtask: String,
    pub next_subtask: Option<String>,
    pub label: bool,
}

/// Builds one positive pair per step (`j = i+1`) and one seeded-uniform
/// negative per positive (`j != i+1`, `j != i`). The terminal observation,
/// when supplied, serves as the successor of the final step. Deterministic
/// given the seed.
pub fn make_verifier_pairs(
    traj: &AnnotatedTrajectory,
    terminal_obs: Option<&str>,
    seed: u64,
) -> Result<Vec<VerifierPairSample>, AnnotateError> {
    let mut observations: Vec<String> = traj.steps().iter().map(|s| s.obs_ref.clone()).collect();
    if let Some(terminal) = terminal_obs {
        observations.push(terminal.to_string());
    }
    let steps = traj.steps();
    let positive_count = steps.len().min(observations.len().saturating_sub(1));
    if positive_count == 0 {
        return Err(AnnotateError::TooFewSteps);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for (i, step) in steps.iter().take(positive_count).enumerate() {
        let next_subtask = steps.get(i + 1).map(|s| s.subtask.clone());
        samples.push(VerifierPairSample {
            obs_before: step.obs_ref.clone(),
            obs_after: observations[i + 1].clone(),
            subtask: step.subtask.clone(),
            next_subtask: next_subtask.clone(),
            label: true,
        });
        let candidates: Vec<usize> = (0..observations.len())
            .filter(|&j| j != i + 1 && j != i)
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let j = candidates[rng.gen_range(0..candidates.len())];
        samples.push(VerifierPairSample {
            obs_before: step.obs_ref.clone(),
            obs_after: observations[j].clone(),
            subtask: step.subtask.clone(),
            next_subtask,
            label: false,
        });
    }
    Ok(samples)
}

/// Direction word for one axis, following the base-frame convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionLabel {
    Forward,
    Backward,
    Left,
    Right,
    Up,
    Down,
    None,
}

impl DirectionLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            DirectionLabel::Forward => "forward",
            DirectionLabel::Backward => "backward",
            DirectionLabel::Left => "left",
            DirectionLabel::Right => "right",
            DirectionLabel::Up => "up",
            DirectionLabel::Down => "down",
            DirectionLabel::None => "none",
        }
    }
}

impl std::fmt::Display for DirectionLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Labels `net` displacement on `axis`: the positive/negative direction word
/// when |net| reaches the 2.5 cm movement threshold, otherwise "none".
pub fn direction_label(axis: Axis, net: f64) -> DirectionLabel {
    if net.abs() < DIRECTION_THRESHOLD {
        return DirectionLabel::None;
    }
    match (axis, net > 0.0) {
        (Axis::X, true) => DirectionLabel::Forward,
        (Axis::X, false) => DirectionLabel::Backward,
        (Axis::Y, true) => DirectionLabel::Left,
        (Axis::Y, false) => DirectionLabel::Right,
        (Axis::Z, true) => DirectionLabel::Up,
        (Axis::Z, false) => DirectionLabel::Down,
    }
}

/// One direction-prediction training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSample {
    pub obs_ref: String,
    pub subtask: String,
    pub axis: Axis,
    pub label: DirectionLabel,
}

/// Emits one sample per step and axis, labeling the thresholded sign of the
/// step chunk's net displacement.
pub fn make_direction_samples(traj: &AnnotatedTrajectory) -> Vec<DirectionSample> {
    let mut samples = Vec::with_capacity(traj.steps().len() * 3);
    for step in traj.steps() {
        for axis in Axis::ALL {
            samples.push(DirectionSample {
                obs_ref: step.obs_ref.clone(),
                subtask: step.subtask.clone(),
                axis,
                label: direction_label(axis, step.chunk.net_axis(axis)),
            });
        }
    }
    samples
}
