//! Encode action text into reserved vocabulary tokens (the action-token
//! ablation) and decode back.
//!
//! Run: cargo run -p a2l --example digit_tokens

use a2l::codec::{decode_at, encode_at, TokenMap};

fn main() {
    let map = TokenMap::gemma3_default();

    println!("digit-to-token table:\n{}", map.to_table());

    let action_text = "[[0.001, -0.003, -0.003, 0.0]]";
    let encoded = encode_at(action_text, &map);
    println!("language:     {action_text}");
    println!("action-token: {encoded}");

    let decoded = decode_at(&encoded, &map);
    assert_eq!(decoded, action_text);
    println!("decoded back: {decoded}");

    // Non-digit text passes through untouched.
    let prose = "move the gripper down";
    assert_eq!(encode_at(prose, &map), prose);
    println!("prose is unchanged: {prose:?}");
}
