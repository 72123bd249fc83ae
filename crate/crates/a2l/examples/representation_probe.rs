//! Compare the log-probability a backend assigns to an action chunk in the
//! two representations: plain text vs reserved-token encoding. A scripted
//! backend stands in for a real model here; point the CLI's `probe`
//! subcommand at a logprob-capable endpoint for live measurements.
//!
//! Run: cargo run -p a2l --example representation_probe

use std::sync::Arc;

use a2l::backend::{
    BackendConfig, ChatMessage, Client, MockBackend, Role, ScriptEntry, VirtualClock,
};
use a2l::codec::TokenMap;
use a2l::eval::{difference_histogram, probe_chunks};
use a2l::model::{Action, ActionChunk};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // The script routes on content: token-encoded completions contain
    // "<unused", language completions do not. Scores mimic a backbone that
    // prefers text over reserved tokens.
    let script = vec![
        ScriptEntry::score_on("<unused", vec![-6.0, -5.5, -5.8]).recurring(),
        ScriptEntry::score(vec![-1.1, -0.9, -1.0]).recurring(),
    ];
    let clock = Arc::new(VirtualClock::new());
    let backend = Arc::new(MockBackend::with_clock(script, clock.clone())?);
    let client = Client::new(
        backend,
        BackendConfig {
            supports_logprobs: true,
            ..BackendConfig::default()
        },
        clock,
    );

    let chunks: Vec<ActionChunk> = vec![
        ActionChunk::new(vec![Action::new(0.0, 0.0, -0.006, 1.0)?]),
        ActionChunk::new(vec![
            Action::new(0.007, -0.002, -0.045, 1.0)?,
            Action::new(0.001, -0.003, -0.003, 0.0)?,
        ]),
    ];
    let prompt = vec![ChatMessage::text(
        Role::User,
        "Score the following robot action sequence.",
    )];
    let pairs = probe_chunks(&client, &prompt, &chunks, &TokenMap::gemma3_default())?;

    for (i, pair) in pairs.iter().enumerate() {
        println!(
            "chunk {i}: language mean {:.3}, action-token mean {:.3}, gap {:.3}",
            pair.language_mean,
            pair.action_token_mean,
            pair.language_mean - pair.action_token_mean
        );
    }
    println!("\ngap histogram (bin width 0.5): {:?}", difference_histogram(&pairs, 0.5));
    Ok(())
}
