//! Layered run configuration: built-in defaults, overridden by an optional
//! TOML file, overridden by environment variables, overridden by CLI flags.
//! Credentials never live in the file; only the env-var *name* does.

use std::path::Path;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::annotate::AnnotationJobConfig;
use crate::backend::http::WireFormat;
use crate::backend::BackendConfig;
use crate::codec::CoalesceConfig;
use crate::rollout::RolloutConfig;

/// Environment variable overriding every backend endpoint.
pub const ENV_ENDPOINT: &str = "A2L_ENDPOINT";
/// Environment variable overriding every backend model id.
pub const ENV_MODEL: &str = "A2L_MODEL";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad config: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendRole {
    Policy,
    Verifier,
    Annotator,
}

/// Backend settings plus the wire family used to reach it.
#[derive(Debug, Clone)]
pub struct ResolvedBackend {
    pub cfg: BackendConfig,
    pub wire: WireFormat,
}

/// Export-stage options.
#[derive(Debug, Clone, Default)]
pub struct ExportSettings {
    pub per_step_subtask: bool,
    pub augment: bool,
}

/// Fully resolved application configuration.
#[derive(Debug, Clone)]
pub struct AppConfig {
    pub coalesce: CoalesceConfig,
    pub annotation: AnnotationJobConfig,
    pub export: ExportSettings,
    pub rollout: RolloutConfig,
    backend_base: BackendFileEntry,
    backend_policy: BackendFileEntry,
    backend_verifier: BackendFileEntry,
    backend_annotator: BackendFileEntry,
    /// `field = value` overrides applied to the training manifest.
    pub training_overrides: Vec<(String, String)>,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            coalesce: CoalesceConfig::default(),
            annotation: AnnotationJobConfig::default(),
            export: ExportSettings::default(),
            rollout: RolloutConfig::default(),
            backend_base: BackendFileEntry::default(),
            backend_policy: BackendFileEntry::default(),
            backend_verifier: BackendFileEntry::default(),
            backend_annotator: BackendFileEntry::default(),
            training_overrides: Vec::new(),
        }
    }
}

impl AppConfig {
    /// Loads defaults, then the file (if given), then the environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config = AppConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            let file: ConfigFile =
                toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
            config.apply_file(file)?;
        }
        config.apply_env();
        Ok(config)
    }

    fn apply_file(&mut self, file: ConfigFile) -> Result<(), ConfigError> {
        if let Some(c) = file.coalesce {
            if let Some(v) = c.axis_cap {
                self.coalesce.axis_cap = v;
            }
            if let Some(v) = c.sign_conflict {
                self.coalesce.sign_conflict_enabled = v;
            }
            if let Some(v) = c.per_axis_note {
                self.coalesce.per_axis_note = v;
            }
            if let Some(v) = c.partition_tolerance {
                self.coalesce.partition_tolerance = v;
            }
        }
        self.annotation.coalesce = self.coalesce.clone();
        if let Some(a) = file.annotation {
            if let Some(v) = a.model {
                self.annotation.model = v;
            }
            if let Some(v) = a.max_attempts {
                self.annotation.max_attempts = v;
            }
            if let Some(v) = a.concurrency {
                self.annotation.concurrency = v;
            }
            if let Some(v) = a.prompt_version {
                self.annotation.prompt_version = v;
            }
            if let Some(v) = a.timestamp {
                self.annotation.timestamp = v;
            }
        }
        if let Some(e) = file.export {
            if let Some(v) = e.per_step_subtask {
                self.export.per_step_subtask = v;
            }
            if let Some(v) = e.augment {
                self.export.augment = v;
            }
        }
        if let Some(r) = file.rollout {
            if let Some(v) = r.subtask_temperature {
                self.rollout.subtask_temperature = v;
            }
            if let Some(v) = r.ood_subtask_temperature {
                self.rollout.ood_subtask_temperature = v;
            }
            if let Some(v) = r.motion_temperature {
                self.rollout.motion_temperature = v;
            }
            if let Some(v) = r.action_temperature {
                self.rollout.action_temperature = v;
            }
            if let Some(v) = r.top_p {
                self.rollout.top_p = v;
            }
            if let Some(v) = r.max_retries {
                self.rollout.max_retries = v;
            }
            if let Some(v) = r.max_cycles {
                self.rollout.max_cycles = v;
            }
        }
        if let Some(b) = file.backend {
            self.backend_base = b.base;
            self.backend_policy = b.policy.unwrap_or_default();
            self.backend_verifier = b.verifier.unwrap_or_default();
            self.backend_annotator = b.annotator.unwrap_or_default();
        }
        if let Some(t) = file.training {
            self.training_overrides = t.into_iter().collect();
        }
        Ok(())
    }

    fn apply_env(&mut self) {
        if let Ok(endpoint) = std::env::var(ENV_ENDPOINT) {
            self.backend_base.endpoint = Some(endpoint);
        }
        if let Ok(model) = std::env::var(ENV_MODEL) {
            self.backend_base.model = Some(model);
        }
    }

    /// Resolves one backend role: role-specific entries override the base
    /// `[backend]` table, which overrides built-in defaults.
    pub fn backend_for(&self, role: BackendRole) -> Result<ResolvedBackend, ConfigError> {
        let overlay = match role {
            BackendRole::Policy => &self.backend_policy,
            BackendRole::Verifier => &self.backend_verifier,
            BackendRole::Annotator => &self.backend_annotator,
        };
        let pick_str = |o: &Option<String>, b: &Option<String>, d: &str| {
            o.clone().or_else(|| b.clone()).unwrap_or_else(|| d.to_string())
        };
        let defaults = BackendConfig::default();
        let base = &self.backend_base;
        let cfg = BackendConfig {
            endpoint: pick_str(&overlay.endpoint, &base.endpoint, &defaults.endpoint),
            model: pick_str(&overlay.model, &base.model, &defaults.model),
            credential_env: pick_str(
                &overlay.credential_env,
                &base.credential_env,
                &defaults.credential_env,
            ),
            timeout: Duration::from_secs_f64(
                overlay
                    .timeout_s
                    .or(base.timeout_s)
                    .unwrap_or(defaults.timeout.as_secs_f64()),
            ),
            max_retries: overlay
                .max_retries
                .or(base.max_retries)
                .unwrap_or(defaults.max_retries),
            requests_per_minute: overlay
                .requests_per_minute
                .or(base.requests_per_minute)
                .unwrap_or(defaults.requests_per_minute),
            supports_images: overlay
                .images
                .or(base.images)
                .unwrap_or(defaults.supports_images),
            supports_logprobs: overlay
                .logprobs
                .or(base.logprobs)
                .unwrap_or(defaults.supports_logprobs),
            initial_backoff: Duration::from_secs_f64(
                overlay
                    .initial_backoff_s
                    .or(base.initial_backoff_s)
                    .unwrap_or(defaults.initial_backoff.as_secs_f64()),
            ),
        };
        let wire_name = pick_str(&overlay.wire, &base.wire, "chat_completions");
        let wire = wire_name
            .parse::<WireFormat>()
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        Ok(ResolvedBackend { cfg, wire })
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    coalesce: Option<CoalesceFile>,
    annotation: Option<AnnotationFile>,
    export: Option<ExportFile>,
    rollout: Option<RolloutFile>,
    backend: Option<BackendFile>,
    training: Option<std::collections::BTreeMap<String, String>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoalesceFile {
    axis_cap: Option<f64>,
    sign_conflict: Option<bool>,
    per_axis_note: Option<f64>,
    partition_tolerance: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    model: Option<String>,
    max_attempts: Option<u32>,
    concurrency: Option<usize>,
    prompt_version: Option<String>,
    timestamp: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExportFile {
    per_step_subtask: Option<bool>,
    augment: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RolloutFile {
    subtask_temperature: Option<f64>,
    ood_subtask_temperature: Option<f64>,
    motion_temperature: Option<f64>,
    action_temperature: Option<f64>,
    top_p: Option<f64>,
    max_retries: Option<u32>,
    max_cycles: Option<u32>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct BackendFileEntry {
    endpoint: Option<String>,
    model: Option<String>,
    wire: Option<String>,
    credential_env: Option<String>,
    timeout_s: Option<f64>,
    max_retries: Option<u32>,
    requests_per_minute: Option<u32>,
    images: Option<bool>,
    logprobs: Option<bool>,
    initial_backoff_s: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
struct BackendFile {
    #[serde(flatten)]
    base: BackendFileEntry,
    policy: Option<BackendFileEntry>,
    verifier: Option<BackendFileEntry>,
    annotator: Option<BackendFileEntry>,
}
