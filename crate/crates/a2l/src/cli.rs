//! Subcommand dispatch for the thin `a2l` binary. Every subcommand is
//! idempotent given identical inputs and seeds; exit codes are stable per
//! error class (see the `EXIT_*` constants).

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::annotate::{annotate_all, AnnotateError, AttemptRecord, ProgressSink};
use crate::backend::http::HttpBackend;
use crate::backend::{
    load_script, Backend, BackendError, ChatMessage, Client, Clock, MockBackend, Role,
    SystemClock, VirtualClock,
};
use crate::codec::{coalesce, serialize_chunk, CodecError, TokenMap};
use crate::config::{AppConfig, BackendRole, ConfigError};
use crate::eval::{
    aggregate_report, builtin_rubric, difference_histogram, latency_stats, load_rubric,
    probe_chunks, score_trial, EvalError,
};
use crate::model::{
    load_annotated_dataset, load_raw_dataset, save_annotated_dataset, ModelError,
};
use crate::rollout::{load_rollout_logs, run_episode, RolloutError};
use crate::sft::{
    emit_training_manifest, export_augmentation_samples, export_stage_samples, to_at_variant,
    write_sft_jsonl, ExportConfig, SftError, Stage,
};
use crate::sim::{build_env, load_scenario, SimError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_BACKEND: i32 = 5;
pub const EXIT_EVAL: i32 = 6;
pub const EXIT_CONFIG: i32 = 7;

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    Sft(#[from] SftError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{message}")]
    Other { message: String, code: i32 },
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Model(e) => match e {
                ModelError::MissingPath(_) | ModelError::Io(_) => EXIT_IO,
                _ => EXIT_DATA,
            },
            CliError::Codec(_) => EXIT_DATA,
            CliError::Annotate(e) => match e {
                AnnotateError::Backend(_) | AnnotateError::Exhausted { .. } => EXIT_BACKEND,
                AnnotateError::Model(ModelError::Io(_)) => EXIT_IO,
                _ => EXIT_DATA,
            },
            CliError::Sft(e) => match e {
                SftError::Io(_) => EXIT_IO,
                _ => EXIT_DATA,
            },
            CliError::Sim(e) => match e {
                SimError::Io(_) => EXIT_IO,
                _ => EXIT_DATA,
            },
            CliError::Rollout(e) => match e {
                RolloutError::Backend(_) | RolloutError::EpisodeAborted(_) => EXIT_BACKEND,
                RolloutError::Io(_) => EXIT_IO,
                _ => EXIT_DATA,
            },
            CliError::Eval(e) => match e {
                EvalError::Backend(_) => EXIT_BACKEND,
                EvalError::Io(_) => EXIT_IO,
                _ => EXIT_EVAL,
            },
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Backend(_) => EXIT_BACKEND,
            CliError::Io(_) => EXIT_IO,
            CliError::Other { code, .. } => *code,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "a2l",
    version,
    about = "Actions-as-language toolkit: relabel robot trajectories, export SFT data, and run verified closed-loop rollouts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Relabel a raw teleoperation dataset into hierarchical annotations.
    Annotate {
        /// Raw dataset: a .jsonl file or a directory of .jsonl files.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output annotated .jsonl path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Mock backend script (TOML); replaces the HTTP annotator.
        #[arg(long)]
        mock: Option<PathBuf>,
        /// Bound on in-flight annotator calls.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Coalesce micro-actions in a raw or annotated file.
    Chunk {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export supervised fine-tuning conversations from an annotated dataset.
    ExportSft {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output SFT .jsonl path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the action-token variant corpus alongside.
        #[arg(long)]
        at: bool,
        /// Include verifier-pair and direction augmentation samples.
        #[arg(long)]
        augment: bool,
        /// Write the training-hyperparameter manifest to this path.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Shuffle seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run scenario episodes against the simulated arm.
    Rollout {
        #[arg(long)]
        scenario: PathBuf,
        /// Directory for per-episode logs.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Mock backend script (TOML) shared by policy and verifier.
        #[arg(long)]
        mock: Option<PathBuf>,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Parallel trials (HTTP backends only; mock runs are sequential).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Score rollout logs against a rubric.
    Eval {
        /// Directory of rollout logs.
        #[arg(long)]
        logs: PathBuf,
        /// Built-in rubric id or a rubric TOML path.
        #[arg(long)]
        rubric: String,
        /// Write the JSON report here (table always prints to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Latency statistics over rollout logs.
    Stats {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare log-probabilities of both action representations.
    Probe {
        /// Annotated dataset supplying the probed chunks.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Mock backend script (TOML) with score entries.
        #[arg(long)]
        mock: Option<PathBuf>,
        /// Context text to score the completions under.
        #[arg(long, default_value = "Score the following robot action sequence.")]
        prompt: String,
    },
}

/// Parses argv and dispatches. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(err) => {
            eprintln!("error: {err}");
            err.code()
        }
    }
}

struct StderrProgress;

impl ProgressSink for StderrProgress {
    fn record(&self, record: &AttemptRecord) {
        let usage = record.usage.map(|u| [u.prompt, u.completion]);
        eprintln!(
            "{}",
            serde_json::json!({
                "trajectory": record.trajectory,
                "attempt": record.attempt,
                "outcome": record.outcome,
                "usage": usage,
            })
        );
    }
}

fn make_client(
    config: &AppConfig,
    role: BackendRole,
    mock: Option<&Path>,
    force_logprobs: bool,
) -> Result<Client, CliError> {
    let resolved = config.backend_for(role)?;
    let mut cfg = resolved.cfg;
    if force_logprobs && mock.is_some() {
        cfg.supports_logprobs = true;
    }
    match mock {
        Some(script) => {
            let clock = Arc::new(VirtualClock::new());
            let backend = Arc::new(MockBackend::with_clock(load_script(script)?, clock.clone())?);
            Ok(Client::new(backend, cfg, clock))
        }
        None => {
            let backend = Arc::new(HttpBackend::new(cfg.clone(), resolved.wire)?);
            Ok(Client::new(
                backend,
                cfg,
                Arc::new(SystemClock::new()),
            ))
        }
    }
}

fn write_manifest_sidecar(
    manifest: &crate::model::DatasetManifest,
    out: &Path,
) -> Result<(), CliError> {
    let path = out.with_extension("manifest.json");
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| CliError::Other {
            message: e.to_string(),
            code: EXIT_DATA,
        })?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn cmd_annotate(
    input: &Path,
    out: &Path,
    config: Option<&Path>,
    mock: Option<&Path>,
    jobs: Option<usize>,
) -> Result<(), CliError> {
    let mut app = AppConfig::load(config)?;
    if let Some(jobs) = jobs {
        app.annotation.concurrency = jobs.max(1);
    }
    let raws = load_raw_dataset(input)?;
    let client = make_client(&app, BackendRole::Annotator, mock, false)?;
    let results = annotate_all(&raws, &client, &app.annotation, &StderrProgress);
    let mut annotated = Vec::with_capacity(results.len());
    for result in results {
        annotated.push(result?);
    }
    let manifest = save_annotated_dataset(&annotated, out)?;
    write_manifest_sidecar(&manifest, out)?;
    Ok(())
}

/// `chunk` accepts either line format and coalesces accordingly: raw
/// trajectories become one canonical chunk literal per line; annotated
/// trajectories get each step chunk coalesced in place.
fn cmd_chunk(input: &Path, out: &Path, config: Option<&Path>) -> Result<(), CliError> {
    let app = AppConfig::load(config)?;
    let first_line = {
        let text = std::fs::read_to_string(input).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::Model(ModelError::MissingPath(input.to_path_buf()))
            } else {
                CliError::Io(e)
            }
        })?;
        text.lines()
            .find(|l| !l.trim().is_empty())
            .unwrap_or_default()
            .to_string()
    };
    let probe: serde_json::Value =
        serde_json::from_str(&first_line).map_err(|e| CliError::Model(
            ModelError::MalformedRecord {
                line: 1,
                reason: e.to_string(),
            },
        ))?;
    if probe.get("frames").is_some() {
        let raws = load_raw_dataset(input)?;
        let mut lines = String::new();
        for raw in &raws {
            let actions: Vec<_> = raw.actions().copied().collect();
            let chunk = coalesce(&actions, &app.coalesce)?;
            lines.push_str(&serialize_chunk(&chunk)?);
            lines.push('\n');
        }
        std::fs::write(out, lines)?;
    } else {
        let annotated = load_annotated_dataset(input)?;
        let mut coalesced = Vec::with_capacity(annotated.len());
        for traj in &annotated {
            let steps = traj
                .steps()
                .iter()
                .map(|step| {
                    let mut step = step.clone();
                    step.chunk = coalesce(step.chunk.actions(), &app.coalesce)?;
                    Ok(step)
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            coalesced.push(crate::model::AnnotatedTrajectory::new(
                traj.id().to_string(),
                traj.instruction().to_string(),
                steps,
                traj.provenance().clone(),
            )?);
        }
        let manifest = save_annotated_dataset(&coalesced, out)?;
        write_manifest_sidecar(&manifest, out)?;
    }
    Ok(())
}

fn cmd_export_sft(
    input: &Path,
    out: &Path,
    config: Option<&Path>,
    at: bool,
    augment: bool,
    manifest_path: Option<&Path>,
    seed: u64,
) -> Result<(), CliError> {
    let app = AppConfig::load(config)?;
    let annotated = load_annotated_dataset(input)?;
    let export_cfg = ExportConfig {
        per_step_subtask: app.export.per_step_subtask,
    };
    let mut samples = Vec::new();
    for traj in &annotated {
        samples.extend(export_stage_samples(traj, &export_cfg)?);
        if augment || app.export.augment {
            samples.extend(export_augmentation_samples(traj, None, seed)?);
        }
    }
    let manifest = write_sft_jsonl(&samples, out, seed)?;
    write_manifest_sidecar(&manifest, out)?;
    if at {
        let map = TokenMap::gemma3_default();
        let at_samples = samples
            .iter()
            .map(|sample| {
                if sample.stage == Stage::Action {
                    to_at_variant(sample, &map)
                } else {
                    Ok(sample.clone())
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let stem = out
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sft".into());
        let at_path = out.with_file_name(format!("{stem}-at.jsonl"));
        let at_manifest = write_sft_jsonl(&at_samples, &at_path, seed)?;
        write_manifest_sidecar(&at_manifest, &at_path)?;
    }
    if let Some(path) = manifest_path {
        let manifest = emit_training_manifest(&app.training_overrides)?;
        std::fs::write(path, manifest.to_flat_string())?;
    }
    Ok(())
}

fn cmd_rollout(
    scenario_path: &Path,
    out: &Path,
    config: Option<&Path>,
    mock: Option<&Path>,
    seed: Option<u64>,
    jobs: Option<usize>,
) -> Result<(), CliError> {
    let app = AppConfig::load(config)?;
    let scenario = load_scenario(scenario_path)?;
    let seed = seed.unwrap_or(scenario.seed);
    std::fs::create_dir_all(out)?;

    // One shared transport so a single script file can serve both roles;
    // the virtual clock makes mock latencies deterministic.
    let (policy, verifier, clock): (Client, Client, Arc<dyn Clock>) = match mock {
        Some(script) => {
            let clock = Arc::new(VirtualClock::new());
            let shared: Arc<dyn Backend> =
                Arc::new(MockBackend::with_clock(load_script(script)?, clock.clone())?);
            let policy_cfg = app.backend_for(BackendRole::Policy)?.cfg;
            let verifier_cfg = app.backend_for(BackendRole::Verifier)?.cfg;
            (
                Client::new(shared.clone(), policy_cfg, clock.clone()),
                Client::new(shared, verifier_cfg, clock.clone()),
                clock,
            )
        }
        None => {
            let clock = Arc::new(SystemClock::new());
            let p = app.backend_for(BackendRole::Policy)?;
            let v = app.backend_for(BackendRole::Verifier)?;
            (
                Client::new(
                    Arc::new(HttpBackend::new(p.cfg.clone(), p.wire)?),
                    p.cfg,
                    clock.clone(),
                ),
                Client::new(
                    Arc::new(HttpBackend::new(v.cfg.clone(), v.wire)?),
                    v.cfg,
                    clock.clone(),
                ),
                clock,
            )
        }
    };

    let trials = scenario.trials.max(1);
    let jobs = match (mock, jobs) {
        (Some(_), Some(j)) if j > 1 => {
            eprintln!("note: mock rollouts run sequentially for deterministic scripts");
            1
        }
        (Some(_), _) => 1,
        (None, j) => j.unwrap_or(1).max(1),
    };

    let episode = |trial: u32| -> Result<(), CliError> {
        let env = build_env(&scenario)?;
        let episode_id = format!("{}-seed{}-t{}", scenario.name, seed, trial);
        let (log, _) = run_episode(
            &policy,
            &verifier,
            env,
            &episode_id,
            &scenario.instruction,
            scenario.ood,
            &app.rollout,
            clock.as_ref(),
        )?;
        log.save(&out.join(format!("{episode_id}.json")))?;
        Ok(())
    };

    if jobs <= 1 {
        for trial in 0..trials {
            episode(trial)?;
        }
    } else {
        let next = AtomicUsize::new(0);
        let failures: Mutex<Vec<CliError>> = Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(trials as usize) {
                scope.spawn(|| loop {
                    let trial = next.fetch_add(1, Ordering::SeqCst);
                    if trial >= trials as usize {
                        break;
                    }
                    if let Err(err) = episode(trial as u32) {
                        failures.lock().unwrap().push(err);
                        break;
                    }
                });
            }
        });
        if let Some(err) = failures.into_inner().unwrap().into_iter().next() {
            return Err(err);
        }
    }
    Ok(())
}

fn cmd_eval(
    logs_dir: &Path,
    rubric_arg: &str,
    out: Option<&Path>,
    _config: Option<&Path>,
) -> Result<(), CliError> {
    let logs = load_rollout_logs(logs_dir)?;
    if logs.is_empty() {
        return Err(CliError::Other {
            message: format!("no rollout logs found under {}", logs_dir.display()),
            code: EXIT_IO,
        });
    }
    let rubric = match builtin_rubric(rubric_arg) {
        Some(rubric) => rubric,
        None => load_rubric(Path::new(rubric_arg))?,
    };
    let cards = logs
        .iter()
        .map(|log| score_trial(log, &log.final_state, &rubric))
        .collect::<Result<Vec<_>, _>>()?;
    let (aggregates, table) = aggregate_report(&cards);
    print!("{table}");
    if let Some(path) = out {
        let report = serde_json::json!({
            "rubric": rubric.id,
            "cards": cards,
            "aggregates": aggregates,
        });
        std::fs::write(
            path,
            serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
        )?;
    }
    Ok(())
}

fn cmd_stats(logs_dir: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let logs = load_rollout_logs(logs_dir)?;
    let durations: Vec<f64> = logs.iter().flat_map(|l| l.cycle_durations()).collect();
    if durations.is_empty() {
        return Err(CliError::Other {
            message: "no durations found in rollout logs".into(),
            code: EXIT_EVAL,
        });
    }
    let stats = latency_stats(&durations)?;
    println!("statistic            value [s]");
    println!("median               {:.3}", stats.median);
    println!("mean                 {:.3}", stats.mean);
    println!("std_dev              {:.3}", stats.std_dev);
    println!("iqr                  {:.3} - {:.3}", stats.p25, stats.p75);
    println!("min                  {:.3}", stats.min);
    println!("max                  {:.3}", stats.max);
    println!("n                    {}", durations.len());
    if let Some(path) = out {
        let report = serde_json::json!({"n": durations.len(), "stats": stats});
        std::fs::write(
            path,
            serde_json::to_string_pretty(&report).expect("stats serialize") + "\n",
        )?;
    }
    Ok(())
}

fn cmd_probe(
    input: &Path,
    out: Option<&Path>,
    config: Option<&Path>,
    mock: Option<&Path>,
    prompt: &str,
) -> Result<(), CliError> {
    let app = AppConfig::load(config)?;
    let annotated = load_annotated_dataset(input)?;
    let chunks: Vec<_> = annotated
        .iter()
        .flat_map(|t| t.steps().iter().map(|s| s.chunk.clone()))
        .collect();
    if chunks.is_empty() {
        return Err(CliError::Other {
            message: "no chunks to probe".into(),
            code: EXIT_DATA,
        });
    }
    let client = make_client(&app, BackendRole::Policy, mock, true)?;
    let map = TokenMap::gemma3_default();
    let prompt_messages = vec![ChatMessage::text(Role::User, prompt)];
    let pairs = probe_chunks(&client, &prompt_messages, &chunks, &map)?;
    let histogram = difference_histogram(&pairs, 0.5);
    let report = serde_json::json!({
        "chunks": pairs.len(),
        "pairs": pairs,
        "difference_histogram_bin_width": 0.5,
        "difference_histogram": histogram,
    });
    let text = serde_json::to_string_pretty(&report).expect("probe report serializes") + "\n";
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Annotate {
            input,
            out,
            config,
            mock,
            jobs,
            seed: _,
        } => cmd_annotate(&input, &out, config.as_deref(), mock.as_deref(), jobs),
        Command::Chunk { input, out, config } => cmd_chunk(&input, &out, config.as_deref()),
        Command::ExportSft {
            input,
            out,
            config,
            at,
            augment,
            manifest,
            seed,
        } => cmd_export_sft(
            &input,
            &out,
            config.as_deref(),
            at,
            augment,
            manifest.as_deref(),
            seed,
        ),
        Command::Rollout {
            scenario,
            out,
            config,
            mock,
            seed,
            jobs,
        } => cmd_rollout(&scenario, &out, config.as_deref(), mock.as_deref(), seed, jobs),
        Command::Eval {
            logs,
            rubric,
            out,
            config,
        } => cmd_eval(&logs, &rubric, out.as_deref(), config.as_deref()),
        Command::Stats { logs, out } => cmd_stats(&logs, out.as_deref()),
        Command::Probe {
            input,
            out,
            config,
            mock,
            prompt,
        } => cmd_probe(&input, out.as_deref(), config.as_deref(), mock.as_deref(), &prompt),
    }
}
