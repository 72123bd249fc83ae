//! Converts annotated trajectories into stage-tagged supervised fine-tuning
//! conversations (subtask prediction, motion planning, action generation,
//! plus the two augmentation stages), the reserved-token variant transform,
//! and the training-hyperparameter manifest.
//!
//! Exporting is a pure transformation, parallelizable per trajectory, with a
//! deterministic merge order (trajectory id, step, stage) ahead of the
//! seeded shuffle.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::{make_direction_samples, make_verifier_pairs, AnnotateError};
use crate::codec::{encode_at, serialize_chunk, CodecError, TokenMap};
use crate::model::{AnnotatedTrajectory, DatasetManifest, SCHEMA_VERSION};
use crate::prompts::{
    render_action_prompt, render_motion_prompt, render_subtask_list, render_subtask_prompt,
};

#[derive(Debug, Error)]
pub enum SftError {
    #[error("wrong stage: expected a language-variant action sample, got {got}")]
    WrongStage { got: String },
    #[error("unknown manifest field {0:?}")]
    UnknownField(String),
    #[error("bad value {value:?} for manifest field {field}")]
    BadValue { field: String, value: String },
    #[error("no samples to write")]
    EmptySamples,
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Augmentation(#[from] AnnotateError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Subtask,
    MotionPlan,
    Action,
    VerifierPair,
    DirectionAux,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Subtask => "subtask",
            Stage::MotionPlan => "motion_plan",
            Stage::Action => "action",
            Stage::VerifierPair => "verifier_pair",
            Stage::DirectionAux => "direction_aux",
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Stage::Subtask => 0,
            Stage::MotionPlan => 1,
            Stage::Action => 2,
            Stage::VerifierPair => 3,
            Stage::DirectionAux => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Language,
    ActionToken,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftMessage {
    pub role: String,
    pub text: String,
    pub images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSource {
    pub traj: String,
    pub step: usize,
}

/// One supervised fine-tuning conversation in the generic role-tagged
/// schema. Model-specific chat templating belongs to the trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSample {
    pub stage: Stage,
    pub variant: Variant,
    pub source: SampleSource,
    pub messages: Vec<SftMessage>,
}

impl SftSample {
    fn conversation(
        stage: Stage,
        source: SampleSource,
        user_text: String,
        images: Vec<String>,
        assistant_text: String,
    ) -> Self {
        Self {
            stage,
            variant: Variant::Language,
            source,
            messages: vec![
                SftMessage {
                    role: "user".into(),
                    text: user_text,
                    images,
                },
                SftMessage {
                    role: "assistant".into(),
                    text: assistant_text,
                    images: Vec::new(),
                },
            ],
        }
    }

    pub fn assistant_text(&self) -> &str {
        self.messages
            .last()
            .map(|m| m.text.as_str())
            .unwrap_or_default()
    }

    pub fn validate(&self) -> Result<(), SftError> {
        let assistants = self
            .messages
            .iter()
            .filter(|m| m.role == "assistant")
            .count();
        if assistants != 1 || self.messages.last().map(|m| m.role.as_str()) != Some("assistant") {
            return Err(SftError::InvalidSample(
                "exactly one assistant turn, last".into(),
            ));
        }
        let user_has_image = self
            .messages
            .iter()
            .any(|m| m.role == "user" && !m.images.is_empty());
        if !user_has_image {
            return Err(SftError::InvalidSample(
                "user turn must carry at least one image ref".into(),
            ));
        }
        Ok(())
    }
}

/// Options for stage-sample export.
#[derive(Debug, Clone, Default)]
pub struct ExportConfig {
    /// Also emit one remaining-subtask-list sample per intermediate step,
    /// not just the episode-start sample.
    pub per_step_subtask: bool,
}

/// Emits the per-trajectory stage samples: one subtask-prediction sample
/// (anchored at step 0, target = the full ordered subtask list), and one
/// motion-planning plus one action-generation sample per step.
pub fn export_stage_samples(
    traj: &AnnotatedTrajectory,
    cfg: &ExportConfig,
) -> Result<Vec<SftSample>, SftError> {
    let subtasks: Vec<String> = traj.steps().iter().map(|s| s.subtask.clone()).collect();
    let mut samples = Vec::new();
    samples.push(SftSample::conversation(
        Stage::Subtask,
        SampleSource {
            traj: traj.id().to_string(),
            step: 0,
        },
        render_subtask_prompt(traj.instruction()),
        vec![traj.steps()[0].obs_ref.clone()],
        render_subtask_list(&subtasks),
    ));
    if cfg.per_step_subtask {
        for (i, step) in traj.steps().iter().enumerate().skip(1) {
            samples.push(SftSample::conversation(
                Stage::Subtask,
                SampleSource {
                    traj: traj.id().to_string(),
                    step: i,
                },
                render_subtask_prompt(traj.instruction()),
                vec![step.obs_ref.clone()],
                render_subtask_list(&subtasks[i..]),
            ));
        }
    }
    for step in traj.steps() {
        let source = SampleSource {
            traj: traj.id().to_string(),
            step: step.index,
        };
        samples.push(SftSample::conversation(
            Stage::MotionPlan,
            source.clone(),
            render_motion_prompt(&step.subtask),
            vec![step.obs_ref.clone()],
            step.main_movements.clone(),
        ));
        samples.push(SftSample::conversation(
            Stage::Action,
            source,
            render_action_prompt(&step.subtask, &step.main_movements),
            vec![step.obs_ref.clone()],
            serialize_chunk(&step.chunk)?,
        ));
    }
    Ok(samples)
}

fn step_index_for_obs(traj: &AnnotatedTrajectory, obs_ref: &str) -> usize {
    traj.steps()
        .iter()
        .position(|s| s.obs_ref == obs_ref)
        .unwrap_or(0)
}

/// Emits the augmentation stages for one trajectory: subtask-completion
/// verifier pairs (yes/no over before/after observations) and per-axis
/// direction prediction. Seeded for the negative-pair draw.
pub fn export_augmentation_samples(
    traj: &AnnotatedTrajectory,
    terminal_obs: Option<&str>,
    seed: u64,
) -> Result<Vec<SftSample>, SftError> {
    let mut samples = Vec::new();
    for pair in make_verifier_pairs(traj, terminal_obs, seed)? {
        let step = step_index_for_obs(traj, &pair.obs_before);
        let user_text = format!(
            "Subtask: '{}'. Given the before and after images, did the robot successfully \
             complete this subtask? Answer 'yes' or 'no'.",
            pair.subtask
        );
        samples.push(SftSample::conversation(
            Stage::VerifierPair,
            SampleSource {
                traj: traj.id().to_string(),
                step,
            },
            user_text,
            vec![pair.obs_before, pair.obs_after],
            if pair.label { "yes" } else { "no" }.to_string(),
        ));
    }
    for sample in make_direction_samples(traj) {
        let step = step_index_for_obs(traj, &sample.obs_ref);
        let options = match sample.axis {
            crate::model::Axis::X => "'forward', 'backward'",
            crate::model::Axis::Y => "'left', 'right'",
            crate::model::Axis::Z => "'up', 'down'",
        };
        let user_text = format!(
            "To complete the subtask '{}', in which direction should the robot move along \
             the {} axis? Answer with one of: {options}, or 'none'.",
            sample.subtask, sample.axis
        );
        samples.push(SftSample::conversation(
            Stage::DirectionAux,
            SampleSource {
                traj: traj.id().to_string(),
                step,
            },
            user_text,
            vec![sample.obs_ref],
            sample.label.as_str().to_string(),
        ));
    }
    Ok(samples)
}

/// Re-encodes a language-variant action sample's assistant text with the
/// reserved-token digit mapping. User turns are unchanged.
pub fn to_at_variant(sample: &SftSample, map: &TokenMap) -> Result<SftSample, SftError> {
    if sample.stage != Stage::Action || sample.variant != Variant::Language {
        return Err(SftError::WrongStage {
            got: format!("{}/{:?}", sample.stage.as_str(), sample.variant),
        });
    }
    let mut out = sample.clone();
    out.variant = Variant::ActionToken;
    if let Some(last) = out.messages.last_mut() {
        last.text = encode_at(&last.text, map);
    }
    Ok(out)
}

/// Training hyper-parameters, defaulting to the published recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingManifest {
    pub base_model: String,
    pub rank: u32,
    pub alpha: u32,
    pub target_modules: Vec<String>,
    pub learning_rate: f64,
    pub lr_scheduler: String,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub per_device_batch_size: u32,
    pub gradient_accumulation_steps: u32,
    pub effective_batch_size: u32,
    pub max_sequence_length: u32,
    pub precision: String,
    pub epochs: u32,
}

impl Default for TrainingManifest {
    fn default() -> Self {
        Self {
            base_model: "Gemma-3-12B-IT".to_string(),
            rank: 16,
            alpha: 32,
            target_modules: [
                "q_proj", "k_proj", "v_proj", "o_proj", "up_proj", "down_proj", "gate_proj",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            learning_rate: 5e-5,
            lr_scheduler: "linear decay".to_string(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            per_device_batch_size: 1,
            gradient_accumulation_steps: 2,
            effective_batch_size: 8,
            max_sequence_length: 1024,
            precision: "bfloat16".to_string(),
            epochs: 1,
        }
    }
}

impl TrainingManifest {
    fn set(&mut self, field: &str, value: &str) -> Result<(), SftError> {
        let bad = || SftError::BadValue {
            field: field.to_string(),
            value: value.to_string(),
        };
        match field {
            "base_model" => self.base_model = value.to_string(),
            "rank" => self.rank = value.parse().map_err(|_| bad())?,
            "alpha" => self.alpha = value.parse().map_err(|_| bad())?,
            "target_modules" => {
                self.target_modules = value.split(',').map(|s| s.trim().to_string()).collect()
            }
            "learning_rate" => self.learning_rate = value.parse().map_err(|_| bad())?,
            "lr_scheduler" => self.lr_scheduler = value.to_string(),
            "adam_beta1" => self.adam_beta1 = value.parse().map_err(|_| bad())?,
            "adam_beta2" => self.adam_beta2 = value.parse().map_err(|_| bad())?,
            "adam_epsilon" => self.adam_epsilon = value.parse().map_err(|_| bad())?,
            "per_device_batch_size" => {
                self.per_device_batch_size = value.parse().map_err(|_| bad())?
            }
            "gradient_accumulation_steps" => {
                self.gradient_accumulation_steps = value.parse().map_err(|_| bad())?
            }
            "effective_batch_size" => {
                self.effective_batch_size = value.parse().map_err(|_| bad())?
            }
            "max_sequence_length" => {
                self.max_sequence_length = value.parse().map_err(|_| bad())?
            }
            "precision" => self.precision = value.to_string(),
            "epochs" => self.epochs = value.parse().map_err(|_| bad())?,
            other => return Err(SftError::UnknownField(other.to_string())),
        }
        Ok(())
    }

    /// Flat `key = value` rendering, losslessly re-loadable.
    pub fn to_flat_string(&self) -> String {
        format!(
            "base_model = {}\n\
             rank = {}\n\
             alpha = {}\n\
             target_modules = {}\n\
             learning_rate = {:e}\n\
             lr_scheduler = {}\n\
             adam_beta1 = {}\n\
             adam_beta2 = {}\n\
             adam_epsilon = {:e}\n\
             per_device_batch_size = {}\n\
             gradient_accumulation_steps = {}\n\
             effective_batch_size = {}\n\
             max_sequence_length = {}\n\
             precision = {}\n\
             epochs = {}\n",
            self.base_model,
            self.rank,
            self.alpha,
            self.target_modules.join(","),
            self.learning_rate,
            self.lr_scheduler,
            self.adam_beta1,
            self.adam_beta2,
            self.adam_epsilon,
            self.per_device_batch_size,
            self.gradient_accumulation_steps,
            self.effective_batch_size,
            self.max_sequence_length,
            self.precision,
            self.epochs,
        )
    }

    pub fn from_flat_string(text: &str) -> Result<Self, SftError> {
        let mut manifest = Self::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (field, value) = line
                .split_once('=')
                .ok_or_else(|| SftError::MalformedManifest(line.to_string()))?;
            manifest.set(field.trim(), value.trim())?;
        }
        Ok(manifest)
    }
}

/// Builds a manifest from the default recipe plus `field=value` overrides.
pub fn emit_training_manifest(overrides: &[(String, String)]) -> Result<TrainingManifest, SftError> {
    let mut manifest = TrainingManifest::default();
    for (field, value) in overrides {
        manifest.set(field, value)?;
    }
    Ok(manifest)
}

/// Sorts samples by (trajectory, step, stage, variant), applies the seeded
/// shuffle, and writes one conversation per line. Byte-identical across runs
/// for identical inputs and seed.
pub fn write_sft_jsonl(
    samples: &[SftSample],
    path: &Path,
    shuffle_seed: u64,
) -> Result<DatasetManifest, SftError> {
    if samples.is_empty() {
        return Err(SftError::EmptySamples);
    }
    for sample in samples {
        sample.validate()?;
    }
    let mut ordered: Vec<&SftSample> = samples.iter().collect();
    ordered.sort_by(|a, b| {
        (
            &a.source.traj,
            a.source.step,
            a.stage.rank(),
            a.variant == Variant::ActionToken,
        )
            .cmp(&(
                &b.source.traj,
                b.source.step,
                b.stage.rank(),
                b.variant == Variant::ActionToken,
            ))
    });
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    ordered.shuffle(&mut rng);

    let mut file = fs::File::create(path)?;
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for sample in &ordered {
        let line = serde_json::to_string(sample)
            .map_err(|e| SftError::InvalidSample(e.to_string()))?;
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
        *counts.entry(sample.stage.as_str().to_string()).or_insert(0) += 1;
    }
    counts.insert("total".to_string(), ordered.len() as u64);
    Ok(DatasetManifest {
        dataset_id: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sft".into()),
        record_counts: counts,
        schema_version: SCHEMA_VERSION,
        source_corpus: "annotated".to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::test_fixtures::silver_pot_annotated;
    use crate::codec::decode_at;

    #[test]
    fn six_step_trajectory_yields_thirteen_samples() {
        let traj = silver_pot_annotated();
        let samples = export_stage_samples(&traj, &ExportConfig::default()).unwrap();
        assert_eq!(samples.len(), 13);
        let count = |stage: Stage| samples.iter().filter(|s| s.stage == stage).count();
        assert_eq!(count(Stage::Subtask), 1);
        assert_eq!(count(Stage::MotionPlan), 6);
        assert_eq!(count(Stage::Action), 6);
        for sample in &samples {
            sample.validate().unwrap();
        }
    }

    #[test]
    fn subtask_sample_renders_full_plan_list() {
        let traj = silver_pot_annotated();
        let samples = export_stage_samples(&traj, &ExportConfig::default()).unwrap();
        let subtask = samples.iter().find(|s| s.stage == Stage::Subtask).unwrap();
        assert!(subtask.assistant_text().starts_with("['Move to Lid Handle', 'Grasp Lid Handle'"));
        assert_eq!(subtask.messages[0].images, vec!["obs_0.jpg"]);
        assert!(subtask.messages[0]
            .text
            .contains("'open the silver pot'"));
    }

    #[test]
    fn per_step_subtask_flag_adds_remaining_lists() {
        let traj = silver_pot_annotated();
        let cfg = ExportConfig {
            per_step_subtask: true,
        };
        let samples = export_stage_samples(&traj, &cfg).unwrap();
        let subtask_samples: Vec<_> = samples.iter().filter(|s| s.stage == Stage::Subtask).collect();
        assert_eq!(subtask_samples.len(), 6);
        assert_eq!(subtask_samples[5].assistant_text(), "['Retract']");
    }

    #[test]
    fn motion_and_action_prompts_are_slot_filled_templates() {
        let traj = silver_pot_annotated();
        let samples = export_stage_samples(&traj, &ExportConfig::default()).unwrap();
        let motion = samples
            .iter()
            .find(|s| s.stage == Stage::MotionPlan && s.source.step == 1)
            .unwrap();
        assert_eq!(
            motion.messages[0].text,
            crate::prompts::render_motion_prompt("Grasp Lid Handle")
        );
        assert_eq!(motion.assistant_text(), traj.steps()[1].main_movements);
        let action = samples
            .iter()
            .find(|s| s.stage == Stage::Action && s.source.step == 1)
            .unwrap();
        assert!(action.messages[0].text.contains("'Grasp Lid Handle'"));
        assert_eq!(
            action.assistant_text(),
            serialize_chunk(&traj.steps()[1].chunk).unwrap()
        );
    }

    #[test]
    fn one_step_trajectory_yields_three_samples() {
        let traj = silver_pot_annotated();
        let one = AnnotatedTrajectory::new(
            "one".into(),
            traj.instruction().to_string(),
            vec![crate::model::AnnotatedStep {
                index: 0,
                ..traj.steps()[0].clone()
            }],
            traj.provenance().clone(),
        )
        .unwrap();
        let samples = export_stage_samples(&one, &ExportConfig::default()).unwrap();
        assert_eq!(samples.len(), 3);
    }

    #[test]
    fn at_variant_round_trips_through_decode() {
        let traj = silver_pot_annotated();
        let samples = export_stage_samples(&traj, &ExportConfig::default()).unwrap();
        let map = TokenMap::gemma3_default();
        for sample in samples.iter().filter(|s| s.stage == Stage::Action) {
            let at = to_at_variant(sample, &map).unwrap();
            assert_eq!(at.variant, Variant::ActionToken);
            assert_eq!(at.messages[0], sample.messages[0]);
            assert_eq!(
                decode_at(at.assistant_text(), &map),
                sample.assistant_text()
            );
            // Outside the inserted token strings, no digits survive encoding.
            let mut residue = at.assistant_text().to_string();
            for digit in '0'..='9' {
                residue = residue.replace(map.token_for(digit).unwrap(), "");
            }
            assert!(!residue.contains(|c: char| c.is_ascii_digit()), "{residue}");
        }
    }

    #[test]
    fn at_variant_rejects_other_stages() {
        let traj = silver_pot_annotated();
        let samples = export_stage_samples(&traj, &ExportConfig::default()).unwrap();
        let motion = samples
            .iter()
            .find(|s| s.stage == Stage::MotionPlan)
            .unwrap();
        assert!(matches!(
            to_at_variant(motion, &TokenMap::gemma3_default()),
            Err(SftError::WrongStage { .. })
        ));
    }

    #[test]
    fn augmentation_samples_have_expected_shape() {
        let traj = silver_pot_annotated();
        let samples = export_augmentation_samples(&traj, Some("obs_terminal.jpg"), 7).unwrap();
        let pairs = samples
            .iter()
            .filter(|s| s.stage == Stage::VerifierPair)
            .count();
        let directions = samples
            .iter()
            .filter(|s| s.stage == Stage::DirectionAux)
            .count();
        assert_eq!(pairs, 12);
        assert_eq!(directions, 18);
        let pair = samples
            .iter()
            .find(|s| s.stage == Stage::VerifierPair)
            .unwrap();
        assert_eq!(pair.messages[0].images.len(), 2);
        assert!(matches!(pair.assistant_text(), "yes" | "no"));
        for sample in &samples {
            sample.validate().unwrap();
        }
    }

    #[test]
    fn manifest_defaults_match_published_recipe() {
        let manifest = emit_training_manifest(&[]).unwrap();
        assert_eq!(manifest.learning_rate, 5e-5);
        assert_eq!(manifest.rank, 16);
        assert_eq!(manifest.alpha, 32);
        assert_eq!(manifest.adam_beta1, 0.9);
        assert_eq!(manifest.adam_beta2, 0.999);
        assert_eq!(manifest.adam_epsilon, 1e-8);
        assert_eq!(manifest.per_device_batch_size, 1);
        assert_eq!(manifest.gradient_accumulation_steps, 2);
        assert_eq!(manifest.effective_batch_size, 8);
        assert_eq!(manifest.max_sequence_length, 1024);
        assert_eq!(manifest.epochs, 1);
        assert_eq!(manifest.target_modules.len(), 7);
    }

    #[test]
    fn manifest_overrides_apply_and_unknown_fields_fail() {
        let manifest =
            emit_training_manifest(&[("epochs".to_string(), "2".to_string())]).unwrap();
        assert_eq!(manifest.epochs, 2);
        assert_eq!(manifest.rank, 16);
        assert!(matches!(
            emit_training_manifest(&[("rnak".to_string(), "8".to_string())]),
            Err(SftError::UnknownField(field)) if field == "rnak"
        ));
    }

    #[test]
    fn manifest_flat_round_trip_is_lossless() {
        let manifest = TrainingManifest::default();
        let text = manifest.to_flat_string();
        assert!(text.contains("learning_rate = 5e-5"));
        assert!(text.contains("adam_epsilon = 1e-8"));
        assert!(text.contains("lr_scheduler = linear decay"));
        let reloaded = TrainingManifest::from_flat_string(&text).unwrap();
        assert_eq!(reloaded, manifest);
    }

    #[test]
    fn jsonl_writes_are_seed_deterministic() {
        let traj = silver_pot_annotated();
        let samples = export_stage_samples(&traj, &ExportConfig::default()).unwrap();
        assert_eq!(samples.len(), 13);
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        let manifest = write_sft_jsonl(&samples, &a, 7).unwrap();
        write_sft_jsonl(&samples, &b, 7).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let total: u64 = manifest.record_counts["total"];
        assert_eq!(total, 13);
        assert_eq!(
            manifest.record_counts["subtask"]
                + manifest.record_counts["motion_plan"]
                + manifest.record_counts["action"],
            13
        );
        // A different seed produces a different permutation.
        let c = dir.path().join("c.jsonl");
        write_sft_jsonl(&samples, &c, 8).unwrap();
        assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    }

    #[test]
    fn empty_sample_set_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_sft_jsonl(&[], &dir.path().join("x.jsonl"), 0),
            Err(SftError::EmptySamples)
        ));
    }
}
