//! Exact block selection: branch and bound against brute force, then the
//! full search over the toy library with a hand-built score table.

use std::error::Error;

use puzzle_nas::config::{AttentionVariant, ModelConfig};
use puzzle_nas::cost::{analytic_costs, HardwareProfile, Scenario};
use puzzle_nas::library::{build_library, LibraryMenu, Subblock};
use puzzle_nas::scoring::{ScoreSignal, ScoreTable};
use puzzle_nas::search::{brute_force, build_selection_problem, choice_table, search_pipeline, solve, SearchOptions, SpeedupTarget};

fn main() -> Result<(), Box<dyn Error>> {
    let cfg = ModelConfig::toy();
    let library = build_library(&cfg, &LibraryMenu::toy())?;
    let scenarios = [
        Scenario::new("long", 192, 64, 16, HardwareProfile::desk()),
        Scenario::new("short", 32, 32, 64, HardwareProfile::desk()),
    ];
    let costs = analytic_costs(&library, &scenarios, &cfg)?;

    // Windowing layers 1 and 5 is free; elsewhere it hurts. Halving experts
    // is cheap everywhere, quartering them is not.
    let scores = ScoreTable::from_fn(&library, ScoreSignal::TaskDrop, |l, sb| match sb {
        Subblock::Attention(AttentionVariant::Window { window: 32 }) => if l == 1 || l == 5 { 0.0 } else { 1.0 },
        Subblock::Attention(_) => 0.0,
        Subblock::Ffn { experts_kept: 16 } => 0.0,
        Subblock::Ffn { experts_kept: 8 } => 0.2 + 0.01 * l as f64,
        Subblock::Ffn { .. } => 1.5,
    });
    let targets = [
        SpeedupTarget { scenario: "long".into(), target_speedup: 1.25 },
        SpeedupTarget { scenario: "short".into(), target_speedup: 1.05 },
    ];
    let options = SearchOptions::default();
    let (spec, report) = search_pipeline(&cfg, &library, &scores, &costs, &targets, None, &options)?;
    print!("{}", choice_table(&spec, &cfg));
    println!("objective {:.4} ({})", report.objective, report.normalization);
    for b in &report.budgets {
        println!("{}: total {} of {} ns, slack {}", b.name, b.total, b.limit, b.slack);
    }

    let (problem, _) = build_selection_problem(&cfg, &library, &scores, &costs, &targets, None, &options)?;
    let exact = brute_force(&problem)?;
    println!(
        "brute force over {} selections agrees: {}",
        problem.search_space(),
        exact.choices == solve(&problem)?.choices
    );

    let strict = [SpeedupTarget { scenario: "long".into(), target_speedup: 50.0 }];
    match search_pipeline(&cfg, &library, &scores, &costs, &strict, None, &options) {
        Err(e) => println!("50x target: {e}"),
        Ok(_) => println!("50x target unexpectedly feasible"),
    }
    Ok(())
}
