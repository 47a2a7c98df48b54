//! Replace-1-block activation MSE per sample, layer rank averaging and the
//! retrieval task drop for attention alternatives.

use std::collections::BTreeMap;
use std::error::Error;

use puzzle_nas::config::ModelConfig;
use puzzle_nas::library::{build_library, ExpertRanking, LibraryMenu, VariantId};
use puzzle_nas::model::init_model;
use puzzle_nas::probes::ProbeSpec;
use puzzle_nas::scoring::{long_context_task_score, rank_average, swap_in, ReplaceOneScorer};

fn main() -> Result<(), Box<dyn Error>> {
    let cfg = ModelConfig::toy();
    let params = init_model(&cfg, 0)?;
    let library = build_library(&cfg, &LibraryMenu::toy())?;
    let ranking = ExpertRanking::identity(&cfg);
    let probes = ProbeSpec::language_modeling(1, 8, 64).generate(&cfg)?;
    let scorer = ReplaceOneScorer::new(&params, &probes)?;

    let window = VariantId("attn/window-32".into());
    let mut per_sample = BTreeMap::new();
    for l in (1..cfg.n_layers).step_by(2) {
        let scores = scorer.score_variant(&library, &ranking, l, &window)?;
        println!("layer {l} window-32: mean MSE {:.3e}", scores.iter().sum::<f64>() / scores.len() as f64);
        per_sample.insert(l, scores);
    }
    for r in rank_average(&per_sample)? {
        println!("layer {} mean rank {:.2}", r.layer, r.mean_rank);
    }

    let parent_scores = scorer.score_variant(&library, &ranking, 3, &VariantId("attn/global".into()))?;
    println!("parent block replaced by itself: {parent_scores:?}");

    let task = ProbeSpec::retrieval(2, 16, 128).generate(&cfg)?;
    let parent = scorer.parent_arch().clone();
    let base = long_context_task_score(&params, &parent, &task)?;
    let swapped = swap_in(&parent, &library, &ranking, 3, &window)?;
    let acc = long_context_task_score(&params, &swapped, &task)?;
    println!("retrieval accuracy parent {base:.3}, layer 3 windowed {acc:.3}, raw drop {:.3}", base - acc);
    Ok(())
}
