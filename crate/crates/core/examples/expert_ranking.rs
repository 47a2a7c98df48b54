//! Expert contribution scores, per-layer rankings and a pruned child.

use std::error::Error;

use puzzle_nas::config::ModelConfig;
use puzzle_nas::library::{assemble, ArchitectureSpec};
use puzzle_nas::model::init_model;
use puzzle_nas::probes::ProbeSpec;
use puzzle_nas::scoring::rank_experts;

fn main() -> Result<(), Box<dyn Error>> {
    let cfg = ModelConfig::toy();
    let params = init_model(&cfg, 0)?;
    let probes = ProbeSpec::language_modeling(0, 16, 64).generate(&cfg)?;
    let ranking = rank_experts(&params, &probes)?;

    for (l, r) in ranking.layers.iter().enumerate() {
        let top: Vec<String> = r.order.iter().take(4).map(|&e| format!("{e}:{:.2e}", r.scores[e])).collect();
        println!("layer {l}: top experts {}", top.join("  "));
    }

    // Keep the top half of the experts in layers 0 and 6.
    let spec = ArchitectureSpec::parent(&cfg)
        .with_keep_set(0, ranking.layers[0].keep_set(8))
        .with_keep_set(6, ranking.layers[6].keep_set(8));
    let (child, filled) = assemble(&params, &ranking, &spec)?;
    println!("layer 0 keeps {:?}", filled.layers[0].expert_keep_set);
    println!("parent {} params, child {} params", params.param_count(), child.param_count());
    Ok(())
}
