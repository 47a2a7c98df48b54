//! KV-cache bytes per sequence and the analytic roofline cost of each block.

use std::error::Error;

use puzzle_nas::config::{AttentionVariant, ModelConfig};
use puzzle_nas::cost::{analytic_costs, kv_bytes_for_layout, kv_token_slots, total_time, HardwareProfile, KvPrecision, Scenario};
use puzzle_nas::library::{build_library, ArchitectureSpec, LibraryMenu, VariantId};

fn main() -> Result<(), Box<dyn Error>> {
    let big = ModelConfig::gpt_oss_120b();
    let l = 131_072;
    let parent = big.attn_pattern.clone();
    let mut child = parent.clone();
    // Convert 8 of the 18 global layers to a 8192-token window.
    for layer in child.iter_mut().filter(|a| a.is_global()).take(8) {
        *layer = AttentionVariant::window(8192);
    }
    let (p, c) = (kv_token_slots(&parent, l), kv_token_slots(&child, l));
    println!("token slots at L={l}: parent {p}, child {c}, reduction {:.1}%", 100.0 * (1.0 - c as f64 / p as f64));
    for precision in [KvPrecision::Bf16, KvPrecision::Fp8] {
        let gib = |x: u64| x as f64 / (1u64 << 30) as f64;
        println!(
            "{precision}: parent {:.2} GiB/seq, child {:.2} GiB/seq",
            gib(kv_bytes_for_layout(&parent, l, precision, &big)),
            gib(kv_bytes_for_layout(&child, l, precision, &big))
        );
    }

    let toy = ModelConfig::toy();
    let library = build_library(&toy, &LibraryMenu::toy())?;
    let scenario = Scenario::new("64/64", 64, 64, 4, HardwareProfile::desk());
    let costs = analytic_costs(&library, std::slice::from_ref(&scenario), &toy)?;
    for id in ["attn/global", "attn/window-32", "ffn/experts-16", "ffn/experts-8", "ffn/experts-4"] {
        let c = costs.require(1, &VariantId(id.into()), &scenario.name)?;
        println!("layer 1 {id:<15} {:>10.3} µs  kv {:>6} B/seq  weights {:>6} B", c.time * 1e6, c.kv_bytes_per_seq, c.weight_bytes);
    }
    let t = total_time(&ArchitectureSpec::parent(&toy), &costs, &scenario.name)?;
    println!("parent request time in {}: {:.3} ms", scenario.name, t * 1e3);
    Ok(())
}
