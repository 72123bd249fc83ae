//! Toolkit for training and driving language-native robot manipulation
//! policies: relabel teleoperation trajectories into hierarchical text
//! annotations, encode low-level actions as plain text (or as reserved
//! vocabulary tokens for the token-assignment ablation), export supervised
//! fine-tuning conversations, and run the closed-loop three-stage inference
//! state machine with an external verifier against a simulated 4-DoF arm.
//!
//! Start with the runnable examples, one per capability:
//!
//! ```bash
//! cargo run -p a2l --example coalesce_actions
//! cargo run -p a2l --example digit_tokens
//! cargo run -p a2l --example annotate_dataset
//! cargo run -p a2l --example export_sft
//! cargo run -p a2l --example run_rollout
//! cargo run -p a2l --example score_and_stats
//! cargo run -p a2l --example representation_probe
//! ```
//!
//! The same capabilities are scriptable through the thin `a2l` binary
//! (`annotate`, `chunk`, `export-sft`, `rollout`, `eval`, `stats`, `probe`).

pub mod annotate;
pub mod backend;
pub mod cli;
pub mod codec;
pub mod config;
pub mod eval;
pub mod model;
pub mod prompts;
pub mod rollout;
pub mod sft;
pub mod sim;

pub use codec::{coalesce, decode_at, encode_at, parse_chunk, serialize_chunk, CoalesceConfig, TokenMap};
pub use model::{Action, ActionChunk, AnnotatedTrajectory, RawTrajectory};
