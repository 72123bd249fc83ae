//! Relabel a raw teleoperation trajectory into hierarchical annotations
//! using a scripted annotator backend (no network, no credentials).
//!
//! Run: cargo run -p a2l --example annotate_dataset

use std::sync::Arc;

use a2l::annotate::{annotate, AnnotationJobConfig, MemoryProgress};
use a2l::backend::{BackendConfig, Client, MockBackend, ScriptEntry, VirtualClock};
use a2l::model::{annotated_trajectory_line, Action, Frame, RawTrajectory};

const SCRIPTED_ANNOTATION: &str = r#"[
  {"STEP_DESCRIPTION": "Move to Carrot",
   "REASONING": "Approach the carrot by moving forward and down.",
   "MAIN_MOVEMENTS": "Primarily forward (+dx) and downward (-dz). Gripper remains open (1).",
   "ACTIONS": [[0.020, 0.010, -0.040, 1.0], [0.020, 0.010, -0.040, 1.0]]},
  {"STEP_DESCRIPTION": "Grasp and Lift Carrot",
   "REASONING": "Close the gripper and raise the carrot clear of the counter.",
   "MAIN_MOVEMENTS": "Close gripper (0), then upward (+dz).",
   "ACTIONS": [[0.000, 0.000, 0.000, 0.0], [0.000, 0.000, 0.060, 0.0]]}
]"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // The raw trajectory the scripted annotation must echo exactly.
    let rows = [
        [0.020, 0.010, -0.040, 1.0],
        [0.020, 0.010, -0.040, 1.0],
        [0.000, 0.000, 0.000, 0.0],
        [0.000, 0.000, 0.060, 0.0],
    ];
    let frames = rows
        .iter()
        .enumerate()
        .map(|(t, r)| {
            Ok(Frame {
                obs_ref: format!("obs_{t}.jpg"),
                action: Action::new(r[0], r[1], r[2], r[3])?,
            })
        })
        .collect::<Result<Vec<_>, a2l::model::InvariantError>>()?;
    let raw = RawTrajectory::new("demo-01".into(), "pick up the carrot".into(), frames)?;

    let clock = Arc::new(VirtualClock::new());
    let backend = Arc::new(MockBackend::with_clock(
        vec![ScriptEntry::reply(SCRIPTED_ANNOTATION)],
        clock.clone(),
    )?);
    let client = Client::new(backend, BackendConfig::default(), clock);

    let cfg = AnnotationJobConfig::default();
    let progress = MemoryProgress::default();
    let annotated = annotate(&raw, &client, &cfg, &progress)?;

    println!("trajectory {} -> {} steps", annotated.id(), annotated.steps().len());
    for step in annotated.steps() {
        println!(
            "  step {} {:?}: {} coalesced action(s), obs {}",
            step.index,
            step.subtask,
            step.chunk.len(),
            step.obs_ref
        );
    }
    for record in progress.records() {
        println!("attempt {} -> {}", record.attempt, record.outcome);
    }
    println!("\nstored line format:\n{}", annotated_trajectory_line(&annotated));
    Ok(())
}
