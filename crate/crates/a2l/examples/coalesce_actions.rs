//! Coalesce a sub-trajectory of micro-actions into larger chunks and print
//! the canonical text form the policy is trained to emit.
//!
//! Run: cargo run -p a2l --example coalesce_actions

use a2l::codec::{coalesce, parse_chunk, serialize_chunk, CoalesceConfig};
use a2l::model::Action;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // A 10-step "grasp the pepper" approach recorded at teleop granularity.
    let raw: Vec<Action> = [
        [0.000, 0.000, 0.000, 1.0],
        [-0.002, 0.000, -0.007, 1.0],
        [0.000, -0.004, -0.016, 1.0],
        [0.002, -0.002, -0.014, 1.0],
        [0.003, 0.000, -0.008, 1.0],
        [0.002, 0.000, -0.011, 1.0],
        [0.000, 0.000, -0.005, 1.0],
        [0.000, 0.000, -0.007, 1.0],
        [0.000, 0.000, -0.006, 1.0],
        [0.001, -0.003, -0.003, 0.0],
    ]
    .iter()
    .map(|a| Action::new(a[0], a[1], a[2], a[3]))
    .collect::<Result<_, _>>()?;

    println!("input: {} micro-actions", raw.len());

    // Boundaries fall on gripper changes, per-axis sign conflicts, and the
    // 5 cm per-axis cap; each group is summed into one larger action.
    let cfg = CoalesceConfig::default();
    let chunk = coalesce(&raw, &cfg)?;
    println!("coalesced: {} groups", chunk.len());

    let text = serialize_chunk(&chunk)?;
    println!("as text:   {text}");

    // The canonical text form round-trips exactly.
    let (parsed, diagnostics) = parse_chunk(&text)?;
    assert_eq!(parsed, chunk);
    println!("round-trip ok (span {:?})", diagnostics.source_span);
    Ok(())
}
