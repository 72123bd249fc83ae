//! Export stage-tagged supervised fine-tuning conversations from an
//! annotated trajectory, derive the action-token variant, and emit the
//! training-hyperparameter manifest.
//!
//! Run: cargo run -p a2l --example export_sft

use a2l::codec::TokenMap;
use a2l::model::{ActionChunk, AnnotatedStep, AnnotatedTrajectory, Action, Provenance};
use a2l::sft::{
    emit_training_manifest, export_stage_samples, to_at_variant, write_sft_jsonl, ExportConfig,
    Stage,
};

fn step(
    index: usize,
    subtask: &str,
    movements: &str,
    actions: &[[f64; 4]],
) -> AnnotatedStep {
    AnnotatedStep {
        index,
        subtask: subtask.into(),
        reasoning: format!("reasoning for {subtask}"),
        main_movements: movements.into(),
        obs_ref: format!("obs_{index}.jpg"),
        chunk: ActionChunk::new(
            actions
                .iter()
                .map(|a| Action::new(a[0], a[1], a[2], a[3]).unwrap())
                .collect(),
        ),
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let traj = AnnotatedTrajectory::new(
        "demo-02".into(),
        "put the spoon on the towel".into(),
        vec![
            step(0, "Move to Spoon", "Primarily forward (+dx) and downward (-dz).", &[[0.030, -0.020, -0.030, 1.0]]),
            step(1, "Grasp Spoon", "Close gripper (0).", &[[0.0, 0.0, 0.0, 0.0]]),
            step(2, "Move Spoon to Towel", "Backward (-dx), right (-dy), slightly up (+dz).", &[[-0.040, -0.030, 0.020, 0.0]]),
        ],
        Provenance {
            model: "scripted-annotator".into(),
            prompt_version: "v1".into(),
            ts: "1970-01-01T00:00:00Z".into(),
            attempts: 1,
        },
    )?;

    let samples = export_stage_samples(&traj, &ExportConfig::default())?;
    println!("{} samples (1 subtask + 3 motion_plan + 3 action):", samples.len());
    for sample in &samples {
        println!(
            "  [{}] step {} -> {:?}",
            sample.stage.as_str(),
            sample.source.step,
            sample.assistant_text()
        );
    }

    // The ablation corpus re-encodes action targets with reserved tokens.
    let map = TokenMap::gemma3_default();
    let action_sample = samples.iter().find(|s| s.stage == Stage::Action).unwrap();
    let at = to_at_variant(action_sample, &map)?;
    println!("\naction-token variant of the first action target:\n  {}", at.assistant_text());

    // Seeded shuffle makes the written corpus byte-reproducible.
    let dir = std::env::temp_dir().join("a2l_export_sft_example");
    std::fs::create_dir_all(&dir)?;
    let out = dir.join("sft.jsonl");
    let manifest = write_sft_jsonl(&samples, &out, 7)?;
    println!("\nwrote {} -> counts {:?}", out.display(), manifest.record_counts);

    let training = emit_training_manifest(&[])?;
    println!("\ntraining manifest:\n{}", training.to_flat_string());
    Ok(())
}
