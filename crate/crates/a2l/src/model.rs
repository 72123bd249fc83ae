//! Shared domain types for trajectories, annotations, and datasets, plus
//! newline-delimited on-disk persistence.
//!
//! All types are immutable after construction and safe to share across
//! concurrent readers. Load/save operations are single-writer; callers must
//! not interleave writers on one path.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Current version of the on-disk line formats. Bump on any schema change.
pub const SCHEMA_VERSION: u32 = 1;

/// Largest plausible single-step teleop displacement, in meters.
pub const MAX_COMPONENT: f64 = 0.10;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("path not found: {0}")]
    MissingPath(PathBuf),
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("invariant violation in trajectory {trajectory}: {field}")]
    InvariantViolation { trajectory: String, field: String },
    #[error("refusing to save an empty dataset")]
    EmptyDataset,
    #[error("serialization failed for trajectory {0}")]
    SerializationFailure(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// A spatial axis of the end-effector workspace (base frame).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Axis::X => write!(f, "x"),
            Axis::Y => write!(f, "y"),
            Axis::Z => write!(f, "z"),
        }
    }
}

/// One of the four command fields of an [`Action`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Dx,
    Dy,
    Dz,
    Gripper,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component::Dx => write!(f, "dx"),
            Component::Dy => write!(f, "dy"),
            Component::Dz => write!(f, "dz"),
            Component::Gripper => write!(f, "gripper"),
        }
    }
}

/// A relative end-effector displacement command in the robot base frame:
/// `+x` forward, `+y` left, `+z` up, gripper `1.0` open / `0.0` closed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    dx: f64,
    dy: f64,
    dz: f64,
    gripper: f64,
}

impl Action {
    /// Validates all invariants: finite components, `|d| <= 0.10 m`, and a
    /// strictly binary gripper command.
    pub fn new(dx: f64, dy: f64, dz: f64, gripper: f64) -> Result<Self, InvariantError> {
        for (value, component) in [
            (dx, Component::Dx),
            (dy, Component::Dy),
            (dz, Component::Dz),
        ] {
            if !value.is_finite() {
                return Err(InvariantError::new(component, value, "must be finite"));
            }
            if value.abs() > MAX_COMPONENT {
                return Err(InvariantError::new(component, value, "exceeds 0.10 m bound"));
            }
        }
        if gripper != 0.0 && gripper != 1.0 {
            return Err(InvariantError::new(
                Component::Gripper,
                gripper,
                "must be exactly 0 or 1",
            ));
        }
        // Canonicalize -0.0 so formatting and equality are stable.
        Ok(Self {
            dx: dx + 0.0,
            dy: dy + 0.0,
            dz: dz + 0.0,
            gripper: gripper + 0.0,
        })
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    pub fn dz(&self) -> f64 {
        self.dz
    }

    pub fn gripper(&self) -> f64 {
        self.gripper
    }

    pub fn is_open(&self) -> bool {
        self.gripper == 1.0
    }

    pub fn axis(&self, axis: Axis) -> f64 {
        match axis {
            Axis::X => self.dx,
            Axis::Y => self.dy,
            Axis::Z => self.dz,
        }
    }

    pub fn component(&self, component: Component) -> f64 {
        match component {
            Component::Dx => self.dx,
            Component::Dy => self.dy,
            Component::Dz => self.dz,
            Component::Gripper => self.gripper,
        }
    }
}

/// A failed [`Action`] invariant check.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantError {
    pub component: Component,
    pub value: f64,
    pub reason: &'static str,
}

impl InvariantError {
    fn new(component: Component, value: f64, reason: &'static str) -> Self {
        Self {
            component,
            value,
            reason,
        }
    }
}

impl fmt::Display for InvariantError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}: {}", self.component, self.value, self.reason)
    }
}

impl std::error::Error for InvariantError {}

/// An ordered, variable-length sequence of actions executed for one subtask.
///
/// May be empty only as an intermediate value, never as a model target.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActionChunk(Vec<Action>);

impl ActionChunk {
    pub fn new(actions: Vec<Action>) -> Self {
        Self(actions)
    }

    pub fn actions(&self) -> &[Action] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Action> {
        self.0.iter()
    }

    /// Net displacement along one axis, summed at double precision.
    pub fn net_axis(&self, axis: Axis) -> f64 {
        self.0.iter().map(|a| a.axis(axis)).sum()
    }
}

impl From<Vec<Action>> for ActionChunk {
    fn from(actions: Vec<Action>) -> Self {
        Self(actions)
    }
}

impl<'a> IntoIterator for &'a ActionChunk {
    type Item = &'a Action;
    type IntoIter = std::slice::Iter<'a, Action>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// One recorded frame of a teleoperation trajectory: an observation locator
/// paired with the action taken from that observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub obs_ref: String,
    pub action: Action,
}

/// A raw teleoperation trajectory: an id, the main-task instruction, and the
/// ordered state-action frames.
///
/// Observation locators are opaque strings (relative file paths by
/// convention); nothing in this crate decodes image bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrajectory {
    id: String,
    instruction: String,
    frames: Vec<Frame>,
}

impl RawTrajectory {
    pub fn new(id: String, instruction: String, frames: Vec<Frame>) -> Result<Self, ModelError> {
        if frames.is_empty() {
            return Err(ModelError::InvariantViolation {
                trajectory: id,
                field: "frames (must be nonempty)".into(),
            });
        }
        let mut seen = HashSet::new();
        for frame in &frames {
            if !seen.insert(frame.obs_ref.as_str()) {
                return Err(ModelError::InvariantViolation {
                    trajectory: id,
                    field: format!("frames.obs ({:?} repeats)", frame.obs_ref),
                });
            }
        }
        Ok(Self {
            id,
            instruction,
            frames,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn actions(&self) -> impl Iterator<Item = &Action> {
        self.frames.iter().map(|f| &f.action)
    }
}

/// One annotated step: an immediate subtask, the annotator's reasoning, the
/// coarse motion description, the step's initial observation, and its chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedStep {
    pub index: usize,
    pub subtask: String,
    pub reasoning: String,
    pub main_movements: String,
    pub obs_ref: String,
    pub chunk: ActionChunk,
}

impl AnnotatedStep {
    pub fn validate(&self, trajectory: &str) -> Result<(), ModelError> {
        let fail = |field: String| ModelError::InvariantViolation {
            trajectory: trajectory.to_string(),
            field,
        };
        if self.subtask.trim().is_empty() {
            return Err(fail(format!("steps[{}].subtask (must be nonempty)", self.index)));
        }
        if self.main_movements.trim().is_empty() {
            return Err(fail(format!(
                "steps[{}].main_movements (must be nonempty)",
                self.index
            )));
        }
        if self.chunk.is_empty() {
            return Err(fail(format!("steps[{}].actions (must be nonempty)", self.index)));
        }
        Ok(())
    }
}

/// Who produced an annotation, with which prompt revision, when, and after
/// how many attempts.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub model: String,
    pub prompt_version: String,
    pub ts: String,
    pub attempts: u32,
}

/// A trajectory relabeled into ordered natural-language steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedTrajectory {
    id: String,
    instruction: String,
    steps: Vec<AnnotatedStep>,
    provenance: Provenance,
}

impl AnnotatedTrajectory {
    pub fn new(
        id: String,
        instruction: String,
        steps: Vec<AnnotatedStep>,
        provenance: Provenance,
    ) -> Result<Self, ModelError> {
        if steps.is_empty() {
            return Err(ModelError::InvariantViolation {
                trajectory: id,
                field: "steps (must be nonempty)".into(),
            });
        }
        for (expected, step) in steps.iter().enumerate() {
            if step.index != expected {
                return Err(ModelError::InvariantViolation {
                    trajectory: id,
                    field: format!("steps[{expected}].index (= {})", step.index),
                });
            }
            step.validate(&id)?;
        }
        Ok(Self {
            id,
            instruction,
            steps,
            provenance,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    pub fn steps(&self) -> &[AnnotatedStep] {
        &self.steps
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// All step chunks flattened back into one action sequence.
    pub fn flattened_actions(&self) -> Vec<Action> {
        self.steps
            .iter()
            .flat_map(|s| s.chunk.iter().copied())
            .collect()
    }
}

/// Summary of one persisted dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub record_counts: BTreeMap<String, u64>,
    pub schema_version: u32,
    pub source_corpus: String,
}

/// Formats a displacement with exactly three fractional digits, the storage
/// precision of the line formats.
pub fn fmt_displacement(value: f64) -> String {
    format!("{value:.3}")
}

/// Formats a gripper command as `1.0` / `0.0`.
pub fn fmt_gripper(value: f64) -> String {
    if value == 0.0 {
        "0.0".to_string()
    } else {
        "1.0".to_string()
    }
}

fn fmt_action_array(action: &Action) -> String {
    format!(
        "[{},{},{},{}]",
        fmt_displacement(action.dx()),
        fmt_displacement(action.dy()),
        fmt_displacement(action.dz()),
        fmt_gripper(action.gripper())
    )
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

// Serde mirrors of the line formats. Validation happens in the domain
// constructors after decode, so these stay dumb.

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLine {
    id: String,
    instruction: String,
    frames: Vec<RawFrameLine>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrameLine {
    obs: String,
    action: [f64; 4],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotatedLine {
    id: String,
    instruction: String,
    provenance: ProvenanceLine,
    steps: Vec<AnnotatedStepLine>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProvenanceLine {
    model: String,
    prompt_version: String,
    ts: String,
    #[serde(default = "default_attempts")]
    attempts: u32,
}

fn default_attempts() -> u32 {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotatedStepLine {
    index: usize,
    subtask: String,
    reasoning: String,
    main_movements: String,
    obs: String,
    actions: Vec<[f64; 4]>,
}

fn action_from_array(trajectory: &str, field: &str, raw: [f64; 4]) -> Result<Action, ModelError> {
    Action::new(raw[0], raw[1], raw[2], raw[3]).map_err(|e| ModelError::InvariantViolation {
        trajectory: trajectory.to_string(),
        field: format!("{field}.{} ({})", e.component, e.reason),
    })
}

fn jsonl_sources(path: &Path) -> Result<Vec<PathBuf>, ModelError> {
    if !path.exists() {
        return Err(ModelError::MissingPath(path.to_path_buf()));
    }
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().map(|e| e == "jsonl").unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(ModelError::MissingPath(path.join("*.jsonl")));
    }
    Ok(files)
}

/// Loads a raw teleoperation dataset from a `.jsonl` file or a directory of
/// `.jsonl` files (read in lexicographic order).
///
/// Loading is fail-fast: a malformed line at position `k` prevents any
/// record from being returned, so corrupted corpora are repaired rather than
/// silently truncated.
pub fn load_raw_dataset(path: &Path) -> Result<Vec<RawTrajectory>, ModelError> {
    let mut out = Vec::new();
    for file in jsonl_sources(path)? {
        let reader = BufReader::new(fs::File::open(&file)?);
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: RawLine =
                serde_json::from_str(&line).map_err(|e| ModelError::MalformedRecord {
                    line: lineno + 1,
                    reason: format!("{} ({})", e, file.display()),
                })?;
            let frames = parsed
                .frames
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    Ok(Frame {
                        obs_ref: f.obs.clone(),
                        action: action_from_array(
                            &parsed.id,
                            &format!("frames[{i}].action"),
                            f.action,
                        )?,
                    })
                })
                .collect::<Result<Vec<_>, ModelError>>()?;
            out.push(RawTrajectory::new(parsed.id, parsed.instruction, frames)?);
        }
    }
    Ok(out)
}

/// Serializes one raw trajectory as its canonical single-line record.
pub fn raw_trajectory_line(traj: &RawTrajectory) -> String {
    let frames = traj
        .frames()
        .iter()
        .map(|f| {
            format!(
                "{{\"obs\":{},\"action\":{}}}",
                json_str(&f.obs_ref),
                fmt_action_array(&f.action)
            )
        })
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "{{\"id\":{},\"instruction\":{},\"frames\":[{}]}}",
        json_str(traj.id()),
        json_str(traj.instruction()),
        frames
    )
}

/// Writes a raw dataset, one record per line, UTF-8 with LF endings.
pub fn save_raw_dataset(
    records: &[RawTrajectory],
    path: &Path,
) -> Result<DatasetManifest, ModelError> {
    if records.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut file = fs::File::create(path)?;
    for traj in records {
        file.write_all(raw_trajectory_line(traj).as_bytes())?;
        file.write_all(b"\n")?;
    }
    let mut counts = BTreeMap::new();
    counts.insert("trajectories".to_string(), records.len() as u64);
    counts.insert(
        "frames".to_string(),
        records.iter().map(|t| t.frames().len() as u64).sum(),
    );
    Ok(DatasetManifest {
        dataset_id: dataset_id_from(path),
        record_counts: counts,
        schema_version: SCHEMA_VERSION,
        source_corpus: dataset_id_from(path),
    })
}

fn annotated_step_json(step: &AnnotatedStep) -> String {
    let actions = step
        .chunk
        .iter()
        .map(fmt_action_array)
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "{{\"index\":{},\"subtask\":{},\"reasoning\":{},\"main_movements\":{},\"obs\":{},\"actions\":[{}]}}",
        step.index,
        json_str(&step.subtask),
        json_str(&step.reasoning),
        json_str(&step.main_movements),
        json_str(&step.obs_ref),
        actions
    )
}

/// Serializes one annotated trajectory as its canonical single-line record.
pub fn annotated_trajectory_line(traj: &AnnotatedTrajectory) -> String {
    let steps = traj
        .steps()
        .iter()
        .map(annotated_step_json)
        .collect::<Vec<_>>()
        .join(",");
    let p = traj.provenance();
    format!(
        "{{\"id\":{},\"instruction\":{},\"provenance\":{{\"model\":{},\"prompt_version\":{},\"ts\":{},\"attempts\":{}}},\"steps\":[{}]}}",
        json_str(traj.id()),
        json_str(traj.instruction()),
        json_str(&p.model),
        json_str(&p.prompt_version),
        json_str(&p.ts),
        p.attempts,
        steps
    )
}

/// Writes an annotated dataset, one record per line. Displacements are
/// persisted at exactly three fractional digits; re-serializing the same
/// records is byte-stable.
pub fn save_annotated_dataset(
    records: &[AnnotatedTrajectory],
    path: &Path,
) -> Result<DatasetManifest, ModelError> {
    if records.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut file = fs::File::create(path)?;
    for traj in records {
        file.write_all(annotated_trajectory_line(traj).as_bytes())?;
        file.write_all(b"\n")?;
    }
    let mut counts = BTreeMap::new();
    counts.insert("trajectories".to_string(), records.len() as u64);
    counts.insert(
        "steps".to_string(),
        records.iter().map(|t| t.steps().len() as u64).sum(),
    );
    Ok(DatasetManifest {
        dataset_id: dataset_id_from(path),
        record_counts: counts,
        schema_version: SCHEMA_VERSION,
        source_corpus: dataset_id_from(path),
    })
}

/// Loads an annotated dataset from a `.jsonl` file or directory, fail-fast.
pub fn load_annotated_dataset(path: &Path) -> Result<Vec<AnnotatedTrajectory>, ModelError> {
    let mut out = Vec::new();
    for file in jsonl_sources(path)? {
        let reader = BufReader::new(fs::File::open(&file)?);
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: AnnotatedLine =
                serde_json::from_str(&line).map_err(|e| ModelError::MalformedRecord {
                    line: lineno + 1,
                    reason: format!("{} ({})", e, file.display()),
                })?;
            let steps = parsed
                .steps
                .into_iter()
                .map(|s| {
                    let actions = s
                        .actions
                        .iter()
                        .enumerate()
                        .map(|(i, a)| {
                            action_from_array(
                                &parsed.id,
                                &format!("steps[{}].actions[{i}]", s.index),
                                *a,
                            )
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    Ok(AnnotatedStep {
                        index: s.index,
                        subtask: s.subtask,
                        reasoning: s.reasoning,
                        main_movements: s.main_movements,
                        obs_ref: s.obs,
                        chunk: ActionChunk::new(actions),
                    })
                })
                .collect::<Result<Vec<_>, ModelError>>()?;
            out.push(AnnotatedTrajectory::new(
                parsed.id,
                parsed.instruction,
                steps,
                Provenance {
                    model: parsed.provenance.model,
                    prompt_version: parsed.provenance.prompt_version,
                    ts: parsed.provenance.ts,
                    attempts: parsed.provenance.attempts,
                },
            )?);
        }
    }
    Ok(out)
}

fn dataset_id_from(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act(dx: f64, dy: f64, dz: f64, g: f64) -> Action {
        Action::new(dx, dy, dz, g).unwrap()
    }

    fn sample_annotated(id: &str) -> AnnotatedTrajectory {
        AnnotatedTrajectory::new(
            id.to_string(),
            "open the silver pot".to_string(),
            vec![
                AnnotatedStep {
                    index: 0,
                    subtask: "Move to Lid Handle".into(),
                    reasoning: "navigate above the handle".into(),
                    main_movements: "Primarily backward (-dx)".into(),
                    obs_ref: "obs_0.jpg".into(),
                    chunk: ActionChunk::new(vec![act(-0.002, -0.002, -0.013, 1.0)]),
                },
                AnnotatedStep {
                    index: 1,
                    subtask: "Grasp Lid Handle".into(),
                    reasoning: "close the gripper".into(),
                    main_movements: "Close gripper (0)".into(),
                    obs_ref: "obs_1.jpg".into(),
                    chunk: ActionChunk::new(vec![act(0.002, -0.007, -0.010, 0.0)]),
                },
            ],
            Provenance {
                model: "annotator-x".into(),
                prompt_version: "v1".into(),
                ts: "2026-01-01T00:00:00Z".into(),
                attempts: 1,
            },
        )
        .unwrap()
    }

    #[test]
    fn action_rejects_out_of_range_gripper() {
        let err = Action::new(0.0, 0.0, 0.0, 0.5).unwrap_err();
        assert_eq!(err.component, Component::Gripper);
    }

    #[test]
    fn action_rejects_oversized_displacement() {
        assert!(Action::new(0.11, 0.0, 0.0, 1.0).is_err());
        assert!(Action::new(0.10, 0.0, 0.0, 1.0).is_ok());
    }

    #[test]
    fn action_rejects_non_finite() {
        assert!(Action::new(f64::NAN, 0.0, 0.0, 1.0).is_err());
        assert!(Action::new(0.0, f64::INFINITY, 0.0, 1.0).is_err());
    }

    #[test]
    fn negative_zero_is_canonicalized() {
        let a = act(-0.0, 0.0, 0.0, 1.0);
        assert_eq!(fmt_displacement(a.dx()), "0.000");
    }

    #[test]
    fn raw_trajectory_rejects_duplicate_obs() {
        let frames = vec![
            Frame {
                obs_ref: "o.jpg".into(),
                action: act(0.0, 0.0, 0.0, 1.0),
            },
            Frame {
                obs_ref: "o.jpg".into(),
                action: act(0.0, 0.0, 0.0, 1.0),
            },
        ];
        assert!(matches!(
            RawTrajectory::new("t".into(), "i".into(), frames),
            Err(ModelError::InvariantViolation { .. })
        ));
    }

    #[test]
    fn load_single_valid_record_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("raw.jsonl");
        fs::write(
            &file,
            "{\"id\":\"t0\",\"instruction\":\"pick\",\"frames\":[{\"obs\":\"o0\",\"action\":[0.001,0.000,-0.003,1.0]}]}\n",
        )
        .unwrap();
        let records = load_raw_dataset(dir.path()).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].id(), "t0");
        assert_eq!(records[0].frames()[0].action.dz(), -0.003);
    }

    #[test]
    fn load_rejects_nonbinary_gripper() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("raw.jsonl");
        fs::write(
            &file,
            "{\"id\":\"t0\",\"instruction\":\"pick\",\"frames\":[{\"obs\":\"o0\",\"action\":[0.001,0.000,-0.003,0.5]}]}\n",
        )
        .unwrap();
        match load_raw_dataset(&file) {
            Err(ModelError::InvariantViolation { trajectory, field }) => {
                assert_eq!(trajectory, "t0");
                assert!(field.contains("gripper"), "{field}");
            }
            other => panic!("expected invariant violation, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_fails_fast() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("raw.jsonl");
        let good = "{\"id\":\"t0\",\"instruction\":\"a\",\"frames\":[{\"obs\":\"o0\",\"action\":[0.0,0.0,0.0,1.0]}]}";
        let bad = "{\"id\":\"t1\",\"instruction\":\"b\",\"frames\":[{\"obs\":\"o1\",\"action\":[0.0,0.0,\"oops\",1.0]}]}";
        fs::write(&file, format!("{good}\n{bad}\n{good}\n")).unwrap();
        match load_raw_dataset(&file) {
            Err(ModelError::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed record, got {other:?}"),
        }
    }

    #[test]
    fn missing_path_is_reported() {
        assert!(matches!(
            load_raw_dataset(Path::new("/nonexistent/nowhere")),
            Err(ModelError::MissingPath(_))
        ));
    }

    #[test]
    fn annotated_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("annotated.jsonl");
        let traj = sample_annotated("t0");
        save_annotated_dataset(std::slice::from_ref(&traj), &file).unwrap();
        let loaded = load_annotated_dataset(&file).unwrap();
        assert_eq!(loaded, vec![traj]);
    }

    #[test]
    fn save_empty_dataset_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("annotated.jsonl");
        assert!(matches!(
            save_annotated_dataset(&[], &file),
            Err(ModelError::EmptyDataset)
        ));
    }

    #[test]
    fn save_is_byte_stable_and_counts_match() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<_> = (0..5).map(|i| sample_annotated(&format!("t{i}"))).collect();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        let manifest = save_annotated_dataset(&records, &a).unwrap();
        save_annotated_dataset(&records, &b).unwrap();
        assert_eq!(manifest.record_counts["trajectories"], 5);
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn annotated_indices_must_be_contiguous() {
        let mut steps = sample_annotated("t0").steps().to_vec();
        steps[1].index = 7;
        let result = AnnotatedTrajectory::new(
            "t0".into(),
            "i".into(),
            steps,
            Provenance {
                model: "m".into(),
                prompt_version: "v1".into(),
                ts: "t".into(),
                attempts: 1,
            },
        );
        assert!(result.is_err());
    }
}
