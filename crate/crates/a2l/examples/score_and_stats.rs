//! Score a hand-driven episode against a shipped rubric and compute latency
//! statistics over a sample of cycle durations.
//!
//! Run: cargo run -p a2l --example score_and_stats

use a2l::eval::{aggregate_report, builtin_rubric, latency_stats, score_trial};
use a2l::model::{Action, ActionChunk};
use a2l::rollout::{RolloutLog, TerminalStatus};
use a2l::sim::{build_env, load_scenario, SimEnv};
use std::path::Path;

fn drive(env: &mut SimEnv, moves: &[[f64; 4]]) {
    for m in moves {
        let chunk = ActionChunk::new(vec![Action::new(m[0], m[1], m[2], m[3]).unwrap()]);
        for action in &env.safety_filter(&chunk) {
            env.step(action);
        }
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let manifest_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let scenario = load_scenario(&manifest_dir.join("assets/scenarios/pick_up.toml"))?;
    let mut env = build_env(&scenario)?;

    // Touch the carrot, grasp it, lift it past the threshold.
    drive(
        &mut env,
        &[
            [0.05, 0.05, -0.10, 1.0],
            [0.0, 0.0, -0.03, 1.0],
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.10, 0.0],
        ],
    );

    let log = RolloutLog {
        episode_id: "example-scoring".into(),
        instruction: scenario.instruction.clone(),
        subtasks: vec!["Move to Carrot".into(), "Grasp Carrot".into(), "Lift Carrot".into()],
        plan_latency_s: 0.8,
        cycles: vec![],
        terminal: TerminalStatus::Complete,
        env_initial: env.snapshot(),
        final_state: env.final_state(),
    };
    let rubric = builtin_rubric(&scenario.rubric).expect("shipped rubric");
    let card = score_trial(&log, &log.final_state, &rubric)?;
    println!("episode {} scored {}/{}", card.episode_id, card.points, card.max);
    for milestone in &card.milestones {
        println!("  [{}] {}", if milestone.achieved { "x" } else { " " }, milestone.name);
    }

    let (_, table) = aggregate_report(std::slice::from_ref(&card));
    println!("\n{table}");

    // Latency statistics over a synthetic batch of cycle durations.
    let durations = [6.1, 5.4, 5.0, 6.7, 48.8, 3.8, 5.9, 6.3, 5.2, 6.0];
    let stats = latency_stats(&durations)?;
    println!("cycle latency over {} samples:", durations.len());
    println!("  median {:.3}s  mean {:.3}s  std {:.3}s", stats.median, stats.mean, stats.std_dev);
    println!("  iqr {:.3}-{:.3}s  min {:.3}s  max {:.3}s", stats.p25, stats.p75, stats.min, stats.max);
    Ok(())
}
