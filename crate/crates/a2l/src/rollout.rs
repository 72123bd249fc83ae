//! The closed-loop three-stage inference procedure: plan all subtasks once
//! from the initial observation, then per subtask generate a motion plan,
//! generate an action chunk, filter and execute it, and ask the external
//! verifier whether to advance or retry. Retries are bounded; exhausted
//! subtasks advance with a recorded "forced-advance" status so long-horizon
//! episodes still produce scoreable logs.
//!
//! One episode runs on a single logical thread of control; multiple episodes
//! may run concurrently, each owning its environment and log.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{BackendError, ChatMessage, ChatRequest, Client, Clock, Part, Role};
use crate::codec::{parse_chunk, strip_fences, CodecError};
use crate::model::ActionChunk;
use crate::prompts::{
    parse_subtask_list, render_action_prompt, render_motion_prompt, render_subtask_prompt,
    render_verifier_prompt, PromptError,
};
use crate::sim::{EnvSnapshot, FinalState, SimEnv, SimError};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("subtask plan parse failed after {attempts} attempts: {last}")]
    PlanParseFailure { attempts: u32, last: String },
    #[error("subtask plan is empty")]
    EmptyPlan,
    #[error("empty subtask")]
    EmptySubtask,
    #[error("empty motion plan")]
    EmptyMotionPlan,
    #[error("action parse failed after reprompt for subtask {subtask:?}: {source}")]
    ActionParseFailure {
        subtask: String,
        source: CodecError,
    },
    #[error("episode aborted: {0}")]
    EpisodeAborted(String),
    #[error("backend failure: {0}")]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("bad rollout log: {0}")]
    BadLog(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Sampling and control settings for the inference loop.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    /// Subtask-planning temperature for in-distribution scenarios.
    pub subtask_temperature: f64,
    /// Subtask-planning temperature when the scenario is flagged
    /// out-of-distribution.
    pub ood_subtask_temperature: f64,
    pub motion_temperature: f64,
    pub action_temperature: f64,
    pub top_p: f64,
    /// Verifier-rejected retries allowed per subtask (attempts are capped at
    /// `1 + max_retries`).
    pub max_retries: u32,
    /// Hard cap on executed cycles per episode.
    pub max_cycles: u32,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            subtask_temperature: 0.5,
            ood_subtask_temperature: 1.0,
            motion_temperature: 0.1,
            action_temperature: 0.5,
            top_p: 0.95,
            max_retries: 3,
            max_cycles: 30,
        }
    }
}

impl RolloutConfig {
    pub fn subtask_temperature_for(&self, ood: bool) -> f64 {
        if ood {
            self.ood_subtask_temperature
        } else {
            self.subtask_temperature
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Confidence {
    High,
    Medium,
    Low,
}

/// The verifier's structured judgment of one cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierVerdict {
    pub success: bool,
    pub confidence: Confidence,
    pub reasoning: String,
}

fn observation_message(observations: &[&str], prompt: String) -> ChatMessage {
    let mut parts: Vec<Part> = observations
        .iter()
        .map(|obs| Part::Text(format!("OBSERVATION:\n{obs}")))
        .collect();
    parts.push(Part::Text(prompt));
    ChatMessage::user(parts)
}

/// Issues the subtask-prediction prompt against the initial observation and
/// parses the bracketed quoted list. The returned plan is fixed for the
/// whole episode. Parse failures are retried up to `max_retries` with fresh
/// samples, then abort the episode.
pub fn plan_subtasks(
    policy: &Client,
    obs: &str,
    instruction: &str,
    cfg: &RolloutConfig,
    ood: bool,
) -> Result<Vec<String>, RolloutError> {
    let request = ChatRequest::new(policy.config().model.clone())
        .message(observation_message(
            &[obs],
            render_subtask_prompt(instruction),
        ))
        .sampling(cfg.subtask_temperature_for(ood), cfg.top_p);
    let mut last = String::new();
    for _attempt in 0..=cfg.max_retries {
        let response = policy.complete(&request)?;
        match parse_subtask_list(&response.text) {
            Ok(subtasks) => return Ok(subtasks),
            Err(PromptError::EmptyList) => return Err(RolloutError::EmptyPlan),
            Err(err) => last = format!("{err} in {:?}", response.text),
        }
    }
    Err(RolloutError::PlanParseFailure {
        attempts: cfg.max_retries + 1,
        last,
    })
}

/// Generates the spatial motion plan for one subtask (temperature 0.1).
pub fn gen_motion_plan(
    policy: &Client,
    obs: &str,
    subtask: &str,
    cfg: &RolloutConfig,
) -> Result<String, RolloutError> {
    if subtask.trim().is_empty() {
        return Err(RolloutError::EmptySubtask);
    }
    let request = ChatRequest::new(policy.config().model.clone())
        .message(observation_message(&[obs], render_motion_prompt(subtask)))
        .sampling(cfg.motion_temperature, cfg.top_p);
    Ok(policy.complete(&request)?.text)
}

/// Generates and parses one action chunk (temperature 0.5). On parse
/// failure, issues one corrective reprompt before giving up.
pub fn gen_actions(
    policy: &Client,
    obs: &str,
    subtask: &str,
    motion_plan: &str,
    cfg: &RolloutConfig,
) -> Result<(ActionChunk, String), RolloutError> {
    if motion_plan.trim().is_empty() {
        return Err(RolloutError::EmptyMotionPlan);
    }
    let base = observation_message(&[obs], render_action_prompt(subtask, motion_plan));
    let request = ChatRequest::new(policy.config().model.clone())
        .message(base.clone())
        .sampling(cfg.action_temperature, cfg.top_p);
    let response = policy.complete(&request)?;
    match parse_chunk(&response.text) {
        Ok((chunk, _)) => return Ok((chunk, response.text)),
        Err(first_err) => {
            let mut retry = ChatRequest::new(policy.config().model.clone())
                .sampling(cfg.action_temperature, cfg.top_p);
            retry.messages = vec![
                base,
                ChatMessage::text(Role::Assistant, response.text.clone()),
                ChatMessage::text(
                    Role::User,
                    format!(
                        "Your previous reply could not be parsed: {first_err}. \
                         PROVIDE ONLY THE PYTHON LIST."
                    ),
                ),
            ];
            let second = policy.complete(&retry)?;
            match parse_chunk(&second.text) {
                Ok((chunk, _)) => Ok((chunk, second.text)),
                Err(source) => Err(RolloutError::ActionParseFailure {
                    subtask: subtask.to_string(),
                    source,
                }),
            }
        }
    }
}

fn parse_verdict(text: &str) -> Result<VerifierVerdict, String> {
    let body = strip_fences(text);
    let start = body.find('{').ok_or("no JSON object in reply")?;
    let mut stream = serde_json::Deserializer::from_str(&body[start..]).into_iter::<Value>();
    let value = match stream.next() {
        Some(Ok(value)) => value,
        _ => return Err("unparseable JSON object".into()),
    };
    let success = value
        .get("success")
        .and_then(Value::as_bool)
        .ok_or("missing boolean key \"success\"")?;
    let confidence = match value.get("confidence").and_then(Value::as_str) {
        Some(c) if c.eq_ignore_ascii_case("high") => Confidence::High,
        Some(c) if c.eq_ignore_ascii_case("medium") => Confidence::Medium,
        Some(c) if c.eq_ignore_ascii_case("low") => Confidence::Low,
        Some(other) => return Err(format!("unknown confidence {other:?}")),
        None => return Err("missing string key \"confidence\"".into()),
    };
    let reasoning = value
        .get("reasoning")
        .and_then(Value::as_str)
        .ok_or("missing string key \"reasoning\"")?
        .to_string();
    Ok(VerifierVerdict {
        success,
        confidence,
        reasoning,
    })
}

/// Asks the verifier whether the executed subtask succeeded, given the
/// observations before and after execution plus the current and next
/// subtask. One reprompt on schema failure; a second failure is logged and
/// treated as a failure verdict with low confidence.
pub fn verify(
    verifier: &Client,
    obs_before: &str,
    obs_after: &str,
    subtask: &str,
    next_subtask: Option<&str>,
) -> Result<(VerifierVerdict, bool), RolloutError> {
    let base = observation_message(
        &[obs_before, obs_after],
        render_verifier_prompt(subtask, next_subtask),
    );
    let request = ChatRequest::new(verifier.config().model.clone())
        .message(base.clone())
        .sampling(0.0, 1.0);
    let response = verifier.complete(&request)?;
    let first = match parse_verdict(&response.text) {
        Ok(verdict) => return Ok((verdict, false)),
        Err(err) => err,
    };
    let mut retry = ChatRequest::new(verifier.config().model.clone()).sampling(0.0, 1.0);
    retry.messages = vec![
        base,
        ChatMessage::text(Role::Assistant, response.text),
        ChatMessage::text(
            Role::User,
            format!(
                "Your reply was not valid ({first}). Respond with only a JSON object with \
                 keys \"success\" (boolean), \"confidence\" (High/Medium/Low), and \
                 \"reasoning\" (string)."
            ),
        ),
    ];
    let second = verifier.complete(&retry)?;
    match parse_verdict(&second.text) {
        Ok(verdict) => Ok((verdict, false)),
        Err(err) => Ok((
            VerifierVerdict {
                success: false,
                confidence: Confidence::Low,
                reasoning: format!("unparseable verifier reply: {err}"),
            },
            true,
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CycleStatus {
    Advanced,
    Retried,
    ForcedAdvance,
    ParseFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalStatus {
    Complete,
    CapExceeded,
}

/// Wall-clock seconds per stage of one cycle, millisecond resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageLatencies {
    pub motion_s: f64,
    pub action_s: f64,
    pub verify_s: f64,
}

impl StageLatencies {
    /// One inference cycle: the reasoning trace plus the action prediction.
    pub fn cycle_s(&self) -> f64 {
        self.motion_s + self.action_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub subtask_index: usize,
    pub attempt: u32,
    pub started_at_s: f64,
    pub motion_plan: String,
    pub raw_action_text: String,
    pub parsed_actions: Vec<[f64; 4]>,
    pub filtered_actions: Vec<[f64; 4]>,
    pub verdict: VerifierVerdict,
    pub verdict_parse_failed: bool,
    pub latencies: StageLatencies,
    pub status: CycleStatus,
    pub env_before: EnvSnapshot,
    pub env_after: EnvSnapshot,
}

/// Full trace of one episode, persisted as a single structured document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutLog {
    pub episode_id: String,
    pub instruction: String,
    pub subtasks: Vec<String>,
    pub plan_latency_s: f64,
    pub cycles: Vec<CycleRecord>,
    pub terminal: TerminalStatus,
    pub env_initial: EnvSnapshot,
    pub final_state: FinalState,
}

impl RolloutLog {
    /// Per-cycle inference durations (motion + action stages), in order.
    pub fn cycle_durations(&self) -> Vec<f64> {
        self.cycles.iter().map(|c| c.latencies.cycle_s()).collect()
    }

    /// Text surface for keyword scoring: the planned subtasks plus every
    /// generated motion plan.
    pub fn planning_text(&self) -> String {
        let mut out = self.subtasks.join("\n");
        for cycle in &self.cycles {
            out.push('\n');
            out.push_str(&cycle.motion_plan);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), RolloutError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| RolloutError::BadLog(e.to_string()))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RolloutError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| RolloutError::BadLog(e.to_string()))
    }
}

/// Loads every `*.json` rollout log under `dir`, sorted by file name.
pub fn load_rollout_logs(dir: &Path) -> Result<Vec<RolloutLog>, RolloutError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "json").unwrap_or(false))
        .collect();
    paths.sort();
    paths.iter().map(|p| RolloutLog::load(p)).collect()
}

fn secs(duration: Duration) -> f64 {
    (duration.as_secs_f64() * 1e3).round() / 1e3
}

fn chunk_rows(chunk: &ActionChunk) -> Vec<[f64; 4]> {
    chunk
        .iter()
        .map(|a| {
            [
                round6(a.dx()),
                round6(a.dy()),
                round6(a.dz()),
                a.gripper(),
            ]
        })
        .collect()
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Runs one episode: plan once, then cycle through the subtasks under the
/// verifier's advance/retry control. Returns the log plus the final
/// environment.
pub fn run_episode(
    policy: &Client,
    verifier: &Client,
    mut env: SimEnv,
    episode_id: &str,
    instruction: &str,
    ood: bool,
    cfg: &RolloutConfig,
    clock: &dyn Clock,
) -> Result<(RolloutLog, SimEnv), RolloutError> {
    let env_initial = env.snapshot();
    let obs0 = env.descriptor();
    let plan_started = clock.now();
    let subtasks = plan_subtasks(policy, &obs0, instruction, cfg, ood)?;
    let plan_latency_s = secs(clock.now() - plan_started);

    let mut cycles: Vec<CycleRecord> = Vec::new();
    let mut terminal = TerminalStatus::Complete;

    'subtasks: for (index, subtask) in subtasks.iter().enumerate() {
        let next_subtask = subtasks.get(index + 1).map(String::as_str);
        let mut attempt = 0u32;
        loop {
            if cycles.len() as u32 >= cfg.max_cycles {
                terminal = TerminalStatus::CapExceeded;
                break 'subtasks;
            }
            attempt += 1;
            let started_at_s = secs(clock.now());
            let env_before = env.snapshot();
            let obs_before = env.descriptor();

            let motion_started = clock.now();
            let motion_plan = gen_motion_plan(policy, &obs_before, subtask, cfg)?;
            let motion_s = secs(clock.now() - motion_started);

            let action_started = clock.now();
            let generated = gen_actions(policy, &obs_before, subtask, &motion_plan, cfg);
            let action_s = secs(clock.now() - action_started);

            let (parsed, raw_action_text, filtered, verdict, verdict_parse_failed, verify_s) =
                match generated {
                    Ok((parsed, raw_text)) => {
                        let filtered = env.safety_filter(&parsed);
                        for action in &filtered {
                            env.step(action);
                        }
                        let obs_after = env.descriptor();
                        let verify_started = clock.now();
                        let (verdict, parse_failed) =
                            verify(verifier, &obs_before, &obs_after, subtask, next_subtask)?;
                        let verify_s = secs(clock.now() - verify_started);
                        (parsed, raw_text, filtered, verdict, parse_failed, verify_s)
                    }
                    Err(RolloutError::Backend(err)) => return Err(RolloutError::Backend(err)),
                    Err(err) => (
                        ActionChunk::default(),
                        String::new(),
                        ActionChunk::default(),
                        VerifierVerdict {
                            success: false,
                            confidence: Confidence::Low,
                            reasoning: format!("cycle failed before execution: {err}"),
                        },
                        false,
                        0.0,
                    ),
                };

            let executed = !raw_action_text.is_empty();
            let success = verdict.success;
            let status = if success {
                CycleStatus::Advanced
            } else if !executed {
                CycleStatus::ParseFailure
            } else if attempt <= cfg.max_retries {
                CycleStatus::Retried
            } else {
                CycleStatus::ForcedAdvance
            };
            cycles.push(CycleRecord {
                subtask_index: index,
                attempt,
                started_at_s,
                motion_plan,
                raw_action_text,
                parsed_actions: chunk_rows(&parsed),
                filtered_actions: chunk_rows(&filtered),
                verdict,
                verdict_parse_failed,
                latencies: StageLatencies {
                    motion_s,
                    action_s,
                    verify_s,
                },
                status,
                env_before,
                env_after: env.snapshot(),
            });
            if success {
                break;
            }
            if attempt > cfg.max_retries {
                // Exhausted: advance anyway so the episode stays scoreable.
                let last = cycles.last_mut().expect("cycle just pushed");
                last.status = CycleStatus::ForcedAdvance;
                break;
            }
        }
    }

    let log = RolloutLog {
        episode_id: episode_id.to_string(),
        instruction: instruction.to_string(),
        subtasks,
        plan_latency_s,
        cycles,
        terminal,
        env_initial,
        final_state: env.final_state(),
    };
    Ok((log, env))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{
        BackendConfig, MockBackend, ScriptEntry, VirtualClock,
    };
    use crate::sim::tests_support::desk_env_with_carrot;
    use std::sync::Arc;

    const VERIFIER_OK: &str =
        "{\n  \"success\": true,\n  \"confidence\": \"High\",\n  \"reasoning\": \"clearly done\"\n}";
    const VERIFIER_FAIL: &str =
        "{\"success\": false, \"confidence\": \"Medium\", \"reasoning\": \"misaligned\"}";

    fn client_with(entries: Vec<ScriptEntry>, model: &str) -> (Arc<MockBackend>, Client, Arc<VirtualClock>) {
        let clock = Arc::new(VirtualClock::new());
        let backend = Arc::new(MockBackend::with_clock(entries, clock.clone()).unwrap());
        let cfg = BackendConfig {
            model: model.to_string(),
            ..BackendConfig::default()
        };
        let client = Client::new(backend.clone(), cfg, clock.clone());
        (backend, client, clock)
    }

    #[test]
    fn plan_parses_quoted_list() {
        let (_, policy, _) = client_with(
            vec![ScriptEntry::reply("['Move to Carrot', 'Grasp Carrot', 'Lift Carrot']")],
            "p",
        );
        let plan = plan_subtasks(&policy, "obs", "pick up the carrot", &RolloutConfig::default(), false)
            .unwrap();
        assert_eq!(plan.len(), 3);
        assert_eq!(plan[0], "Move to Carrot");
    }

    #[test]
    fn plan_parses_reference_six_item_example() {
        let (_, policy, _) = client_with(
            vec![ScriptEntry::reply(
                "['Move Down to Pot', 'Grasp Pot', 'Lift Pot High', 'Move Pot Left to the Sink', 'Lower Pot to Sink', 'Release']",
            )],
            "p",
        );
        let plan = plan_subtasks(&policy, "obs", "put the pot in the sink", &RolloutConfig::default(), false)
            .unwrap();
        assert_eq!(plan.len(), 6);
    }

    #[test]
    fn plan_retries_then_aborts_on_prose() {
        let entries: Vec<_> = (0..4)
            .map(|_| ScriptEntry::reply("I would move toward the carrot first."))
            .collect();
        let (backend, policy, _) = client_with(entries, "p");
        let err = plan_subtasks(&policy, "obs", "task", &RolloutConfig::default(), false).unwrap_err();
        assert!(matches!(err, RolloutError::PlanParseFailure { attempts: 4, .. }));
        assert_eq!(backend.transcript().len(), 4);
    }

    #[test]
    fn plan_uses_configured_subtask_temperature() {
        let cfg = RolloutConfig::default();
        for (ood, expected) in [(false, 0.5), (true, 1.0)] {
            let (backend, policy, _) = client_with(vec![ScriptEntry::reply("['Move to X']")], "p");
            plan_subtasks(&policy, "obs", "task", &cfg, ood).unwrap();
            let transcript = backend.transcript();
            assert_eq!(transcript[0].temperature, expected);
            assert_eq!(transcript[0].top_p, 0.95);
        }
    }

    #[test]
    fn motion_request_carries_subtask_and_temperature() {
        let (backend, policy, _) = client_with(vec![ScriptEntry::reply("move down")], "p");
        let text = gen_motion_plan(&policy, "OBS-DESC", "Grasp Carrot", &RolloutConfig::default())
            .unwrap();
        assert_eq!(text, "move down");
        let transcript = backend.transcript();
        let flat = transcript[0].flat_text();
        assert!(flat.contains("Grasp Carrot"));
        assert!(flat.contains("OBS-DESC"));
        assert_eq!(transcript[0].temperature, 0.1);
        assert!(matches!(
            gen_motion_plan(&policy, "obs", "  ", &RolloutConfig::default()),
            Err(RolloutError::EmptySubtask)
        ));
    }

    #[test]
    fn actions_parse_with_fences() {
        let (_, policy, _) = client_with(
            vec![ScriptEntry::reply("```\n[[0.0, 0.0, -0.006, 1.0]]\n```")],
            "p",
        );
        let (chunk, _) = gen_actions(&policy, "obs", "Grasp", "move down", &RolloutConfig::default())
            .unwrap();
        assert_eq!(chunk.len(), 1);
        assert_eq!(chunk.actions()[0].dz(), -0.006);
    }

    #[test]
    fn actions_reprompt_once_then_succeed() {
        let (backend, policy, _) = client_with(
            vec![
                ScriptEntry::reply("thinking about it..."),
                ScriptEntry::reply("[[0.01, 0.0, 0.0, 1.0]]"),
            ],
            "p",
        );
        let (chunk, _) = gen_actions(&policy, "obs", "Grasp", "move", &RolloutConfig::default())
            .unwrap();
        assert_eq!(chunk.len(), 1);
        let transcript = backend.transcript();
        assert_eq!(transcript.len(), 2);
        assert!(transcript[1]
            .flat_text()
            .contains("PROVIDE ONLY THE PYTHON LIST"));
    }

    #[test]
    fn actions_fail_after_single_reprompt() {
        let (backend, policy, _) = client_with(
            vec![
                ScriptEntry::reply("[[1, 2]]"),
                ScriptEntry::reply("[[1, 2]]"),
            ],
            "p",
        );
        let err = gen_actions(&policy, "obs", "Grasp", "move", &RolloutConfig::default())
            .unwrap_err();
        assert!(matches!(err, RolloutError::ActionParseFailure { .. }));
        assert_eq!(backend.transcript().len(), 2);
    }

    #[test]
    fn verifier_parses_reference_reply() {
        let (backend, verifier, _) = client_with(vec![ScriptEntry::reply(VERIFIER_OK)], "v");
        let (verdict, parse_failed) =
            verify(&verifier, "before", "after", "Grasp Carrot", Some("Lift Carrot")).unwrap();
        assert!(verdict.success);
        assert!(!parse_failed);
        assert_eq!(verdict.confidence, Confidence::High);
        let flat = backend.transcript()[0].flat_text();
        assert!(flat.contains("precision-oriented robot inspector"));
        assert!(flat.contains("Current Subtask: Grasp Carrot"));
        assert!(flat.contains("Next Subtask: Lift Carrot"));
    }

    #[test]
    fn verifier_double_failure_becomes_low_confidence_failure() {
        let (_, verifier, _) = client_with(
            vec![
                ScriptEntry::reply("success-ish?"),
                ScriptEntry::reply("still not json"),
            ],
            "v",
        );
        let (verdict, parse_failed) = verify(&verifier, "b", "a", "Grasp", None).unwrap();
        assert!(!verdict.success);
        assert!(parse_failed);
        assert_eq!(verdict.confidence, Confidence::Low);
    }

    fn policy_script_for(plan: &str, chunks: &[&str]) -> Vec<ScriptEntry> {
        let mut entries = vec![ScriptEntry::reply(plan)];
        for chunk in chunks {
            entries.push(ScriptEntry::reply("motion: approach the target"));
            entries.push(ScriptEntry::reply(*chunk));
        }
        entries
    }

    #[test]
    fn all_success_episode_runs_one_cycle_per_subtask() {
        let plan = "['Move to Carrot', 'Grasp Carrot', 'Lift Carrot']";
        let chunks = [
            "[[0.05, 0.05, -0.10, 1.0], [0.0, 0.0, -0.03, 1.0]]",
            "[[0.0, 0.0, 0.0, 0.0]]",
            "[[0.0, 0.0, 0.10, 0.0]]",
        ];
        let (policy_mock, policy, clock) = client_with(policy_script_for(plan, &chunks), "p");
        let (_, verifier, _) = client_with(
            (0..3).map(|_| ScriptEntry::reply(VERIFIER_OK)).collect(),
            "v",
        );
        let (log, env) = run_episode(
            &policy,
            &verifier,
            desk_env_with_carrot(),
            "ep-0",
            "pick up the carrot",
            false,
            &RolloutConfig::default(),
            clock.as_ref(),
        )
        .unwrap();
        assert_eq!(log.cycles.len(), 3);
        assert_eq!(log.terminal, TerminalStatus::Complete);
        assert!(log.cycles.iter().all(|c| c.status == CycleStatus::Advanced));
        assert_eq!(env.held_object(), Some("carrot"));
        assert_eq!(env.ever_lifted("carrot"), Some(true));
        // Plan immutability: the planned list is echoed in the log.
        assert_eq!(log.subtasks.len(), 3);
        // Conditioning: motion request has subtask + observation; action
        // request also carries the motion plan.
        let transcript = policy_mock.transcript();
        let motion_flat = transcript[1].flat_text();
        assert!(motion_flat.contains("Move to Carrot"));
        assert!(motion_flat.contains("SCENE STATE"));
        let action_flat = transcript[2].flat_text();
        assert!(action_flat.contains("Move to Carrot"));
        assert!(action_flat.contains("motion: approach the target"));
        assert!(action_flat.contains("SCENE STATE"));
        assert_eq!(transcript[1].temperature, 0.1);
        assert_eq!(transcript[2].temperature, 0.5);
    }

    #[test]
    fn verifier_rejection_adds_one_retry_cycle() {
        let plan = "['Move to Carrot', 'Grasp Carrot', 'Lift Carrot']";
        let chunks = [
            "[[0.05, 0.05, -0.10, 1.0], [0.0, 0.0, -0.03, 1.0]]",
            "[[0.0, 0.0, 0.0, 0.0]]",
            "[[0.0, 0.0, 0.0, 0.0]]", // retried grasp
            "[[0.0, 0.0, 0.10, 0.0]]",
        ];
        let (_, policy, clock) = client_with(policy_script_for(plan, &chunks), "p");
        let (_, verifier, _) = client_with(
            vec![
                ScriptEntry::reply(VERIFIER_OK),
                ScriptEntry::reply(VERIFIER_FAIL),
                ScriptEntry::reply(VERIFIER_OK),
                ScriptEntry::reply(VERIFIER_OK),
            ],
            "v",
        );
        let (log, _) = run_episode(
            &policy,
            &verifier,
            desk_env_with_carrot(),
            "ep-1",
            "pick up the carrot",
            false,
            &RolloutConfig::default(),
            clock.as_ref(),
        )
        .unwrap();
        assert_eq!(log.cycles.len(), 4);
        let second_subtask: Vec<_> = log
            .cycles
            .iter()
            .filter(|c| c.subtask_index == 1)
            .collect();
        assert_eq!(second_subtask.len(), 2);
        assert_eq!(second_subtask[0].status, CycleStatus::Retried);
        assert_eq!(second_subtask[0].attempt, 1);
        assert_eq!(second_subtask[1].status, CycleStatus::Advanced);
        assert_eq!(second_subtask[1].attempt, 2);
    }

    #[test]
    fn cycle_cap_stops_episode() {
        let plan = "['Move to Carrot', 'Grasp Carrot', 'Lift Carrot']";
        let chunks = ["[[0.01, 0.0, 0.0, 1.0]]"];
        let (_, policy, clock) = client_with(policy_script_for(plan, &chunks), "p");
        let (_, verifier, _) = client_with(vec![ScriptEntry::reply(VERIFIER_OK)], "v");
        let cfg = RolloutConfig {
            max_cycles: 1,
            ..RolloutConfig::default()
        };
        let (log, _) = run_episode(
            &policy,
            &verifier,
            desk_env_with_carrot(),
            "ep-2",
            "pick up the carrot",
            false,
            &cfg,
            clock.as_ref(),
        )
        .unwrap();
        assert_eq!(log.cycles.len(), 1);
        assert_eq!(log.terminal, TerminalStatus::CapExceeded);
    }

    #[test]
    fn exhausted_retries_force_advance() {
        let plan = "['Move to Carrot']";
        let chunks = ["[[0.01, 0.0, 0.0, 1.0]]", "[[0.01, 0.0, 0.0, 1.0]]"];
        let (_, policy, clock) = client_with(policy_script_for(plan, &chunks), "p");
        let (_, verifier, _) = client_with(
            vec![
                ScriptEntry::reply(VERIFIER_FAIL),
                ScriptEntry::reply(VERIFIER_FAIL),
            ],
            "v",
        );
        let cfg = RolloutConfig {
            max_retries: 1,
            ..RolloutConfig::default()
        };
        let (log, _) = run_episode(
            &policy,
            &verifier,
            desk_env_with_carrot(),
            "ep-3",
            "pick up the carrot",
            false,
            &cfg,
            clock.as_ref(),
        )
        .unwrap();
        assert_eq!(log.cycles.len(), 2); // 1 + max_retries
        assert_eq!(log.cycles[1].status, CycleStatus::ForcedAdvance);
        assert_eq!(log.terminal, TerminalStatus::Complete);
    }

    #[test]
    fn scripted_latencies_land_in_the_log() {
        let plan_entry = ScriptEntry::reply("['Move to Carrot']")
            .with_latency(Duration::from_millis(800));
        let motion_entry =
            ScriptEntry::reply("motion").with_latency(Duration::from_millis(2500));
        let action_entry = ScriptEntry::reply("[[0.01, 0.0, 0.0, 1.0]]")
            .with_latency(Duration::from_millis(3600));
        let (_, policy, clock) = client_with(vec![plan_entry, motion_entry, action_entry], "p");
        let (_, verifier, _) = client_with(
            vec![ScriptEntry::reply(VERIFIER_OK).with_latency(Duration::from_millis(500))],
            "v",
        );
        let (log, _) = run_episode(
            &policy,
            &verifier,
            desk_env_with_carrot(),
            "ep-4",
            "pick up the carrot",
            false,
            &RolloutConfig::default(),
            clock.as_ref(),
        )
        .unwrap();
        assert_eq!(log.plan_latency_s, 0.8);
        assert_eq!(log.cycles[0].latencies.motion_s, 2.5);
        assert_eq!(log.cycles[0].latencies.action_s, 3.6);
        assert_eq!(log.cycles[0].latencies.cycle_s(), 6.1);
        assert_eq!(log.cycle_durations(), vec![6.1]);
    }

    #[test]
    fn log_round_trips_through_disk() {
        let plan = "['Move to Carrot']";
        let chunks = ["[[0.01, 0.0, 0.0, 1.0]]"];
        let (_, policy, clock) = client_with(policy_script_for(plan, &chunks), "p");
        let (_, verifier, _) = client_with(vec![ScriptEntry::reply(VERIFIER_OK)], "v");
        let (log, _) = run_episode(
            &policy,
            &verifier,
            desk_env_with_carrot(),
            "ep-5",
            "pick up the carrot",
            false,
            &RolloutConfig::default(),
            clock.as_ref(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep-5.json");
        log.save(&path).unwrap();
        let loaded = RolloutLog::load(&path).unwrap();
        assert_eq!(loaded, log);
        let all = load_rollout_logs(dir.path()).unwrap();
        assert_eq!(all.len(), 1);
    }
}
