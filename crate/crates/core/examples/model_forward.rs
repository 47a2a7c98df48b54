//! Deterministic forward pass of the toy MoE model, and the window-attention
//! masking identity.

use std::collections::BTreeSet;
use std::error::Error;

use puzzle_nas::config::{AttentionVariant, ModelConfig};
use puzzle_nas::library::ArchitectureSpec;
use puzzle_nas::model::{forward, init_model};

fn main() -> Result<(), Box<dyn Error>> {
    let cfg = ModelConfig::toy();
    let params = init_model(&cfg, 0)?;
    println!("toy model: {} params, checksum {}", params.param_count(), params.checksum());

    let tokens: Vec<u32> = (0..48).map(|i| (i * 37 % 256) as u32).collect();
    let parent = ArchitectureSpec::parent(&cfg);
    let trace = forward(&params, &parent, &tokens, &BTreeSet::new())?;
    let last = trace.logits.row(tokens.len() - 1);
    let argmax = (0..last.len()).max_by(|&a, &b| last[a].total_cmp(&last[b]).then(b.cmp(&a))).unwrap();
    println!("next-token argmax after {} tokens: {argmax}", tokens.len());

    // A window at least as long as the sequence sees everything a global layer does.
    let widened = parent.clone().with_attention(1, AttentionVariant::window(tokens.len()));
    let same = forward(&params, &widened, &tokens, &BTreeSet::new())?;
    let diff = trace
        .final_hidden
        .data
        .iter()
        .zip(&same.final_hidden.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("max |Δ| global vs window-{}: {diff:e}", tokens.len());

    let narrowed = parent.with_attention(1, AttentionVariant::window(8));
    let other = forward(&params, &narrowed, &tokens, &BTreeSet::new())?;
    let mse = puzzle_nas::tensor::mse(&trace.final_hidden.data, &other.final_hidden.data);
    println!("final-hidden MSE global vs window-8 at layer 1: {mse:.3e}");
    Ok(())
}
