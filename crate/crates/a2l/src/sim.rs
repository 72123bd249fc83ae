//! Deterministic desk-scale 4-DoF environment: an end-effector point, a
//! binary gripper, named graspable objects, placement regions, and an
//! axis-aligned workspace box. Stands in for a real arm and kitchen during
//! rollouts; observations are structured scene descriptors, not images.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Action, ActionChunk};

pub const DEFAULT_CONTACT_RADIUS: f64 = 0.02;
pub const DEFAULT_LIFT_THRESHOLD: f64 = 0.05;
pub const DEFAULT_GRASP_RADIUS: f64 = 0.03;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("workspace box is not well-ordered on axis {0}")]
    BadBox(usize),
    #[error("start position lies outside the workspace box")]
    StartOutsideWorkspace,
    #[error("bad scenario file: {0}")]
    BadScenario(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Axis-aligned box, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Box3 {
    pub fn validate(&self) -> Result<(), SimError> {
        for axis in 0..3 {
            if !(self.min[axis] <= self.max[axis])
                || !self.min[axis].is_finite()
                || !self.max[axis].is_finite()
            {
                return Err(SimError::BadBox(axis));
            }
        }
        Ok(())
    }

    pub fn contains(&self, point: [f64; 3], tolerance: f64) -> bool {
        (0..3).all(|axis| {
            point[axis] >= self.min[axis] - tolerance && point[axis] <= self.max[axis] + tolerance
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GripperState {
    Open,
    Closed,
}

impl GripperState {
    pub fn as_str(&self) -> &'static str {
        match self {
            GripperState::Open => "open",
            GripperState::Closed => "closed",
        }
    }
}

/// A named graspable point with its grasp radius.
#[derive(Debug, Clone, PartialEq)]
pub struct SimObject {
    pub name: String,
    pub position: [f64; 3],
    pub grasp_radius: f64,
}

/// A named placement box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub bounds: Box3,
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// The live environment. The end-effector is always inside the workspace
/// box (callers run chunks through [`SimEnv::safety_filter`] first); a held
/// object tracks the end-effector exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SimEnv {
    ee: [f64; 3],
    gripper: GripperState,
    objects: Vec<SimObject>,
    held: Option<usize>,
    pub workspace: Box3,
    pub contact_radius: f64,
    pub lift_threshold: f64,
    pub regions: Vec<Region>,
    min_distance: Vec<f64>,
    initial_z: Vec<f64>,
    ever_lifted: Vec<bool>,
}

impl SimEnv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        workspace: Box3,
        start: [f64; 3],
        gripper: GripperState,
        objects: Vec<SimObject>,
        regions: Vec<Region>,
        contact_radius: f64,
        lift_threshold: f64,
    ) -> Result<Self, SimError> {
        workspace.validate()?;
        if !workspace.contains(start, 0.0) {
            return Err(SimError::StartOutsideWorkspace);
        }
        let min_distance = objects.iter().map(|o| distance(start, o.position)).collect();
        let initial_z = objects.iter().map(|o| o.position[2]).collect();
        let ever_lifted = vec![false; objects.len()];
        Ok(Self {
            ee: start,
            gripper,
            objects,
            held: None,
            workspace,
            contact_radius,
            lift_threshold,
            regions,
            min_distance,
            initial_z,
            ever_lifted,
        })
    }

    pub fn ee(&self) -> [f64; 3] {
        self.ee
    }

    pub fn gripper(&self) -> GripperState {
        self.gripper
    }

    pub fn objects(&self) -> &[SimObject] {
        &self.objects
    }

    pub fn held_object(&self) -> Option<&str> {
        self.held.map(|i| self.objects[i].name.as_str())
    }

    pub fn min_distance(&self, name: &str) -> Option<f64> {
        self.objects
            .iter()
            .position(|o| o.name == name)
            .map(|i| self.min_distance[i])
    }

    pub fn ever_lifted(&self, name: &str) -> Option<bool> {
        self.objects
            .iter()
            .position(|o| o.name == name)
            .map(|i| self.ever_lifted[i])
    }

    fn update_stats(&mut self) {
        for (i, object) in self.objects.iter().enumerate() {
            let d = distance(self.ee, object.position);
            if d < self.min_distance[i] {
                self.min_distance[i] = d;
            }
            if self.held == Some(i)
                && object.position[2] - self.initial_z[i] >= self.lift_threshold
            {
                self.ever_lifted[i] = true;
            }
        }
    }

    /// Applies one command: translate (a held object co-moves), then run the
    /// gripper transition. Closing attaches the nearest object within its
    /// grasp radius; opening detaches at the current position. Bounds are
    /// the caller's responsibility via [`SimEnv::safety_filter`].
    pub fn step(&mut self, action: &Action) {
        let delta = [action.dx(), action.dy(), action.dz()];
        for axis in 0..3 {
            self.ee[axis] += delta[axis];
        }
        if let Some(held) = self.held {
            for axis in 0..3 {
                self.objects[held].position[axis] += delta[axis];
            }
        }
        self.update_stats();
        match (self.gripper, action.is_open()) {
            (GripperState::Open, false) => {
                self.gripper = GripperState::Closed;
                let nearest = self
                    .objects
                    .iter()
                    .enumerate()
                    .map(|(i, o)| (i, distance(self.ee, o.position), o.grasp_radius))
                    .filter(|&(_, d, r)| d <= r)
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                if let Some((index, _, _)) = nearest {
                    self.held = Some(index);
                }
            }
            (GripperState::Closed, true) => {
                self.gripper = GripperState::Open;
                self.held = None;
            }
            _ => {}
        }
    }

    /// Simulates the chunk action-by-action and clamps every component that
    /// would move the end-effector outside the workspace box, so the
    /// resulting position lands exactly on the boundary. Gripper commands
    /// pass through.
    pub fn safety_filter(&self, chunk: &ActionChunk) -> ActionChunk {
        let mut position = self.ee;
        let mut filtered = Vec::with_capacity(chunk.len());
        for action in chunk {
            let mut delta = [action.dx(), action.dy(), action.dz()];
            for axis in 0..3 {
                let target = position[axis] + delta[axis];
                let clamped = target.clamp(self.workspace.min[axis], self.workspace.max[axis]);
                if clamped != target {
                    delta[axis] = clamped - position[axis];
                }
                position[axis] += delta[axis];
            }
            filtered.push(
                Action::new(delta[0], delta[1], delta[2], action.gripper())
                    .expect("clamped deltas stay within action bounds"),
            );
        }
        ActionChunk::new(filtered)
    }

    /// Structured scene descriptor used as the textual observation.
    pub fn descriptor(&self) -> String {
        let fmt3 = |p: [f64; 3]| format!("[{:.3}, {:.3}, {:.3}]", p[0], p[1], p[2]);
        let mut out = String::from("SCENE STATE\n");
        out.push_str(&format!("end_effector: {}\n", fmt3(self.ee)));
        out.push_str(&format!("gripper: {}\n", self.gripper.as_str()));
        for (i, object) in self.objects.iter().enumerate() {
            out.push_str(&format!(
                "object {}: {}{}\n",
                object.name,
                fmt3(object.position),
                if self.held == Some(i) { " (held)" } else { "" }
            ));
        }
        for region in &self.regions {
            out.push_str(&format!(
                "region {}: {} to {}\n",
                region.name,
                fmt3(region.bounds.min),
                fmt3(region.bounds.max)
            ));
        }
        out
    }

    pub fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            ee: round3_point(self.ee),
            gripper: self.gripper,
            objects: self
                .objects
                .iter()
                .enumerate()
                .map(|(i, o)| ObjectSnapshot {
                    name: o.name.clone(),
                    position: round3_point(o.position),
                    held: self.held == Some(i),
                })
                .collect(),
        }
    }

    /// Everything scoring needs, detached from the live environment.
    pub fn final_state(&self) -> FinalState {
        FinalState {
            ee: round6_point(self.ee),
            gripper: self.gripper,
            contact_radius: self.contact_radius,
            objects: self
                .objects
                .iter()
                .enumerate()
                .map(|(i, o)| ObjectFinal {
                    name: o.name.clone(),
                    position: round6_point(o.position),
                    held: self.held == Some(i),
                    min_distance: round6(self.min_distance[i]),
                    lifted: self.ever_lifted[i],
                })
                .collect(),
            regions: self.regions.clone(),
        }
    }
}

fn round3(v: f64) -> f64 {
    (v * 1e3).round() / 1e3
}

fn round3_point(p: [f64; 3]) -> [f64; 3] {
    [round3(p[0]), round3(p[1]), round3(p[2])]
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn round6_point(p: [f64; 3]) -> [f64; 3] {
    [round6(p[0]), round6(p[1]), round6(p[2])]
}

/// Compact environment view recorded around each cycle (mm resolution).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub ee: [f64; 3],
    pub gripper: GripperState,
    pub objects: Vec<ObjectSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSnapshot {
    pub name: String,
    pub position: [f64; 3],
    pub held: bool,
}

/// Scoring-facing episode outcome (micrometer resolution).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalState {
    pub ee: [f64; 3],
    pub gripper: GripperState,
    pub contact_radius: f64,
    pub objects: Vec<ObjectFinal>,
    pub regions: Vec<Region>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectFinal {
    pub name: String,
    pub position: [f64; 3],
    pub held: bool,
    /// Minimum end-effector distance over the whole episode.
    pub min_distance: f64,
    /// Whether the object, while held, ever rose past the lift threshold.
    pub lifted: bool,
}

impl FinalState {
    pub fn object(&self, name: &str) -> Option<&ObjectFinal> {
        self.objects.iter().find(|o| o.name == name)
    }

    pub fn region(&self, name: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.name == name)
    }
}

/// Declarative episode setup: instruction, layout, rubric id, the
/// subtask-temperature flag, and seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub instruction: String,
    pub rubric: String,
    /// Out-of-distribution flag: selects the higher subtask-planning
    /// temperature.
    pub ood: bool,
    pub seed: u64,
    pub trials: u32,
    pub workspace: Box3,
    pub start_position: [f64; 3],
    pub start_gripper: GripperState,
    pub objects: Vec<SimObject>,
    pub regions: Vec<Region>,
    pub contact_radius: f64,
    pub lift_threshold: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: Option<String>,
    instruction: String,
    rubric: String,
    #[serde(default)]
    ood: bool,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_trials")]
    trials: u32,
    contact_radius: Option<f64>,
    lift_threshold: Option<f64>,
    workspace: BoxFile,
    start: StartFile,
    #[serde(default)]
    objects: Vec<ObjectFile>,
    #[serde(default)]
    regions: Vec<RegionFile>,
}

fn default_trials() -> u32 {
    1
}

#[derive(Deserialize)]
struct BoxFile {
    min: [f64; 3],
    max: [f64; 3],
}

#[derive(Deserialize)]
struct StartFile {
    position: [f64; 3],
    gripper: Option<String>,
}

#[derive(Deserialize)]
struct ObjectFile {
    name: String,
    position: [f64; 3],
    grasp_radius: Option<f64>,
}

#[derive(Deserialize)]
struct RegionFile {
    name: String,
    min: [f64; 3],
    max: [f64; 3],
}

/// Loads a scenario TOML file. The scenario name defaults to the file stem.
pub fn load_scenario(path: &Path) -> Result<Scenario, SimError> {
    let text = std::fs::read_to_string(path)?;
    let file: ScenarioFile =
        toml::from_str(&text).map_err(|e| SimError::BadScenario(e.to_string()))?;
    let gripper = match file.start.gripper.as_deref() {
        None | Some("open") => GripperState::Open,
        Some("closed") => GripperState::Closed,
        Some(other) => {
            return Err(SimError::BadScenario(format!(
                "unknown gripper state {other:?}"
            )))
        }
    };
    let scenario = Scenario {
        name: file.name.unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "scenario".into())
        }),
        instruction: file.instruction,
        rubric: file.rubric,
        ood: file.ood,
        seed: file.seed,
        trials: file.trials,
        workspace: Box3 {
            min: file.workspace.min,
            max: file.workspace.max,
        },
        start_position: file.start.position,
        start_gripper: gripper,
        objects: file
            .objects
            .into_iter()
            .map(|o| SimObject {
                name: o.name,
                position: o.position,
                grasp_radius: o.grasp_radius.unwrap_or(DEFAULT_GRASP_RADIUS),
            })
            .collect(),
        regions: file
            .regions
            .into_iter()
            .map(|r| Region {
                name: r.name,
                bounds: Box3 { min: r.min, max: r.max },
            })
            .collect(),
        contact_radius: file.contact_radius.unwrap_or(DEFAULT_CONTACT_RADIUS),
        lift_threshold: file.lift_threshold.unwrap_or(DEFAULT_LIFT_THRESHOLD),
    };
    scenario.workspace.validate()?;
    for region in &scenario.regions {
        region.bounds.validate()?;
    }
    Ok(scenario)
}

/// Instantiates the live environment a scenario describes.
pub fn build_env(scenario: &Scenario) -> Result<SimEnv, SimError> {
    SimEnv::new(
        scenario.workspace,
        scenario.start_position,
        scenario.start_gripper,
        scenario.objects.clone(),
        scenario.regions.clone(),
        scenario.contact_radius,
        scenario.lift_threshold,
    )
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    /// Desk-scale environment with a single carrot, shared across module
    /// tests.
    pub fn desk_env_with_carrot() -> SimEnv {
        SimEnv::new(
            Box3 {
                min: [0.0, -0.3, 0.0],
                max: [0.6, 0.3, 0.4],
            },
            [0.30, 0.0, 0.15],
            GripperState::Open,
            vec![SimObject {
                name: "carrot".into(),
                position: [0.35, 0.05, 0.02],
                grasp_radius: DEFAULT_GRASP_RADIUS,
            }],
            vec![Region {
                name: "plate".into(),
                bounds: Box3 {
                    min: [0.10, -0.20, 0.0],
                    max: [0.20, -0.10, 0.05],
                },
            }],
            DEFAULT_CONTACT_RADIUS,
            DEFAULT_LIFT_THRESHOLD,
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::desk_env_with_carrot as desk_env;
    use super::*;

    fn act(dx: f64, dy: f64, dz: f64, g: f64) -> Action {
        Action::new(dx, dy, dz, g).unwrap()
    }

    #[test]
    fn zero_action_leaves_env_unchanged() {
        let mut env = desk_env();
        let before = env.clone();
        env.step(&act(0.0, 0.0, 0.0, 1.0));
        assert_eq!(env, before);
    }

    fn assert_close(a: [f64; 3], b: [f64; 3]) {
        for axis in 0..3 {
            assert!((a[axis] - b[axis]).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn close_within_radius_attaches_and_comoves() {
        let mut env = desk_env();
        // Move onto the carrot, then close.
        env.step(&act(0.05, 0.05, -0.10, 1.0));
        env.step(&act(0.0, 0.0, -0.03, 1.0));
        assert_close(env.ee(), [0.35, 0.05, 0.02]);
        env.step(&act(0.0, 0.0, 0.0, 0.0));
        assert_eq!(env.held_object(), Some("carrot"));
        env.step(&act(0.0, 0.0, 0.10, 0.0));
        assert!((env.objects()[0].position[2] - 0.12).abs() < 1e-12);
        assert_eq!(env.ever_lifted("carrot"), Some(true));
        // Opening releases at the current position.
        env.step(&act(0.0, 0.0, 0.0, 1.0));
        assert_eq!(env.held_object(), None);
        let resting_z = env.objects()[0].position[2];
        env.step(&act(0.0, 0.0, 0.05, 1.0));
        assert_eq!(env.objects()[0].position[2], resting_z);
    }

    #[test]
    fn close_out_of_radius_grabs_nothing() {
        let mut env = desk_env();
        env.step(&act(0.0, 0.0, 0.0, 0.0));
        assert_eq!(env.held_object(), None);
        assert_eq!(env.gripper(), GripperState::Closed);
    }

    #[test]
    fn filter_zeroes_downward_commands_at_floor() {
        let env = SimEnv::new(
            Box3 {
                min: [0.0, -0.3, 0.0],
                max: [0.6, 0.3, 0.4],
            },
            [0.3, 0.0, 0.0],
            GripperState::Open,
            vec![],
            vec![],
            DEFAULT_CONTACT_RADIUS,
            DEFAULT_LIFT_THRESHOLD,
        )
        .unwrap();
        let filtered = env.safety_filter(&ActionChunk::new(vec![act(0.0, 0.0, -0.02, 1.0)]));
        assert_eq!(filtered.actions()[0].dz(), 0.0);
    }

    #[test]
    fn filter_passes_in_bounds_chunks_unchanged() {
        let env = desk_env();
        let chunk = ActionChunk::new(vec![act(0.01, -0.02, 0.03, 1.0), act(0.0, 0.0, 0.0, 0.0)]);
        assert_eq!(env.safety_filter(&chunk), chunk);
    }

    #[test]
    fn filter_clamps_partial_overshoot_at_ceiling() {
        let env = SimEnv::new(
            Box3 {
                min: [0.0, -0.3, 0.0],
                max: [0.6, 0.3, 0.4],
            },
            [0.3, 0.0, 0.39],
            GripperState::Open,
            vec![],
            vec![],
            DEFAULT_CONTACT_RADIUS,
            DEFAULT_LIFT_THRESHOLD,
        )
        .unwrap();
        let filtered = env.safety_filter(&ActionChunk::new(vec![act(0.0, 0.0, 0.03, 1.0)]));
        assert!((filtered.actions()[0].dz() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn executed_chunk_conserves_position_exactly() {
        let mut env = desk_env();
        let chunk = ActionChunk::new(vec![
            act(0.013, -0.007, 0.021, 1.0),
            act(-0.002, 0.004, -0.015, 1.0),
            act(0.030, 0.001, 0.002, 0.0),
        ]);
        let filtered = env.safety_filter(&chunk);
        let initial = env.ee();
        for action in &filtered {
            env.step(action);
        }
        let mut expected = initial;
        for action in &filtered {
            expected[0] += action.dx();
            expected[1] += action.dy();
            expected[2] += action.dz();
        }
        assert_eq!(env.ee(), expected);
    }

    #[test]
    fn contact_stat_tracks_episode_minimum() {
        let mut env = desk_env();
        let start_distance = env.min_distance("carrot").unwrap();
        env.step(&act(0.05, 0.05, -0.10, 1.0));
        env.step(&act(0.0, 0.0, -0.03, 1.0));
        let near = env.min_distance("carrot").unwrap();
        assert!(near < start_distance);
        assert!(near < env.contact_radius);
        // Retreating does not erase the minimum.
        env.step(&act(0.0, 0.0, 0.10, 1.0));
        assert_eq!(env.min_distance("carrot").unwrap(), near);
    }

    #[test]
    fn scenario_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pick_up.toml");
        std::fs::write(
            &path,
            r#"
instruction = "pick up the carrot"
rubric = "pick_up"
seed = 7

[workspace]
min = [0.0, -0.3, 0.0]
max = [0.6, 0.3, 0.4]

[start]
position = [0.3, 0.0, 0.15]

[[objects]]
name = "carrot"
position = [0.35, 0.05, 0.02]
"#,
        )
        .unwrap();
        let scenario = load_scenario(&path).unwrap();
        assert_eq!(scenario.name, "pick_up");
        assert_eq!(scenario.trials, 1);
        assert!(!scenario.ood);
        assert_eq!(scenario.objects[0].grasp_radius, DEFAULT_GRASP_RADIUS);
        let env = build_env(&scenario).unwrap();
        assert_eq!(env.ee(), [0.3, 0.0, 0.15]);
        assert!(env.descriptor().contains("object carrot: [0.350, 0.050, 0.020]"));
    }

    #[test]
    fn start_outside_workspace_is_rejected() {
        let result = SimEnv::new(
            Box3 {
                min: [0.0; 3],
                max: [0.1; 3],
            },
            [0.5, 0.0, 0.0],
            GripperState::Open,
            vec![],
            vec![],
            DEFAULT_CONTACT_RADIUS,
            DEFAULT_LIFT_THRESHOLD,
        );
        assert!(matches!(result, Err(SimError::StartOutsideWorkspace)));
    }
}
