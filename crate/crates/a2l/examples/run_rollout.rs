//! Run one closed-loop episode against the simulated arm with scripted
//! policy and verifier backends, then print the cycle trace.
//!
//! Run: cargo run -p a2l --example run_rollout

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use a2l::backend::{BackendConfig, Client, MockBackend, ScriptEntry, VirtualClock};
use a2l::rollout::{run_episode, RolloutConfig};
use a2l::sim::{build_env, load_scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let manifest_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let scenario = load_scenario(&manifest_dir.join("assets/scenarios/pick_up.toml"))?;
    let env = build_env(&scenario)?;
    println!("scenario {:?}: {:?}", scenario.name, scenario.instruction);
    println!("{}", env.descriptor());

    // One shared script serves both roles; entries route on prompt text.
    // Latencies advance the virtual clock, so timings are deterministic.
    let script = vec![
        ScriptEntry::reply_on(
            "remaining high-level steps",
            "['Move to Carrot', 'Grasp Carrot', 'Lift Carrot']",
        )
        .with_latency(Duration::from_millis(800)),
        ScriptEntry::reply_on(
            "precision-oriented robot inspector",
            r#"{"success": true, "confidence": "High", "reasoning": "subtask completed"}"#,
        )
        .recurring()
        .with_latency(Duration::from_millis(400)),
        ScriptEntry::reply_on(
            "sub-task 'Move to Carrot'",
            "[[0.05, 0.05, -0.10, 1.0], [0.0, 0.0, -0.03, 1.0]]",
        )
        .with_latency(Duration::from_millis(3000)),
        ScriptEntry::reply_on("sub-task 'Grasp Carrot'", "[[0.0, 0.0, 0.0, 0.0]]")
            .with_latency(Duration::from_millis(2800)),
        ScriptEntry::reply_on("sub-task 'Lift Carrot'", "[[0.0, 0.0, 0.10, 0.0]]")
            .with_latency(Duration::from_millis(3200)),
        ScriptEntry::reply_on(
            "reason about what high-level actions",
            "Move toward the carrot and adjust the height before closing the gripper.",
        )
        .recurring()
        .with_latency(Duration::from_millis(2000)),
    ];
    let clock = Arc::new(VirtualClock::new());
    let shared = Arc::new(MockBackend::with_clock(script, clock.clone())?);
    let policy = Client::new(shared.clone(), BackendConfig::default(), clock.clone());
    let verifier = Client::new(shared, BackendConfig::default(), clock.clone());

    let (log, final_env) = run_episode(
        &policy,
        &verifier,
        env,
        "example-episode",
        &scenario.instruction,
        scenario.ood,
        &RolloutConfig::default(),
        clock.as_ref(),
    )?;

    println!("plan: {:?} ({}s)", log.subtasks, log.plan_latency_s);
    for cycle in &log.cycles {
        println!(
            "cycle: subtask {} attempt {} -> {:?} (motion {}s, action {}s, verify {}s)",
            cycle.subtask_index,
            cycle.attempt,
            cycle.status,
            cycle.latencies.motion_s,
            cycle.latencies.action_s,
            cycle.latencies.verify_s,
        );
    }
    println!("terminal: {:?}", log.terminal);
    println!("held at episode end: {:?}", final_env.held_object());
    println!("carrot lifted: {:?}", final_env.ever_lifted("carrot"));
    Ok(())
}
