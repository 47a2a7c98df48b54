mod common;

use proptest::prelude::*;
use puzzle_nas::config::AttentionVariant;
use puzzle_nas::library::{ArchitectureSpec, Subblock};
use puzzle_nas::scoring::{ScoreSignal, ScoreTable};
use puzzle_nas::search::{
    brute_force, search_pipeline, solve, BudgetConstraint, BudgetKind, Candidate, LayerChoices,
    SearchOptions, SelectionProblem, SolveStatus, SpeedupTarget,
};

use common::{planted, random_problem};

/// Independent oracle: plain recursion over every selection, objective summed
/// in f64 (exact here because degradations sit on a quarter grid).
fn oracle_min(p: &SelectionProblem) -> Option<f64> {
    fn go(p: &SelectionProblem, l: usize, costs: &mut Vec<u64>, deg: f64, best: &mut Option<f64>) {
        if l == p.layers.len() {
            if costs.iter().zip(&p.budgets).all(|(c, b)| *c <= b.limit) && best.is_none_or(|b| deg < b) {
                *best = Some(deg);
            }
            return;
        }
        for c in &p.layers[l].variants {
            for (t, x) in costs.iter_mut().zip(&c.costs) {
                *t += x;
            }
            go(p, l + 1, costs, deg + c.degradation, best);
            for (t, x) in costs.iter_mut().zip(&c.costs) {
                *t -= x;
            }
        }
    }
    let mut best = None;
    go(p, 0, &mut vec![0; p.budgets.len()], 0.0, &mut best);
    best
}

#[test]
fn solver_matches_enumeration_oracle_on_seeded_instances() {
    let mut infeasible = 0;
    for seed in 0..300 {
        let p = random_problem(10_000 + seed);
        let s = solve(&p).unwrap();
        match oracle_min(&p) {
            None => {
                infeasible += 1;
                assert_eq!(s.status, SolveStatus::Infeasible, "seed {seed}");
                assert!(s.binding.is_some());
            }
            Some(best) => {
                assert!(s.is_optimal(), "seed {seed}");
                assert_eq!(s.total_degradation, best, "seed {seed}");
                for (b, budget) in p.budgets.iter().enumerate() {
                    assert_eq!(s.totals[b] + s.slacks[b], budget.limit);
                }
            }
        }
    }
    // The generator is meant to exercise both outcomes.
    assert!(infeasible > 0 && infeasible < 150, "{infeasible} infeasible");
}

#[test]
fn infeasible_names_only_the_binding_budget() {
    let mut p = random_problem(5);
    p.budgets[0].limit = 0;
    p.budgets[1].limit = u64::MAX / 2;
    let s = solve(&p).unwrap();
    assert_eq!(s.status, SolveStatus::Infeasible);
    assert_eq!(s.binding.as_deref(), Some("b0"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Loosening a budget never worsens the optimum.
    #[test]
    fn objective_is_monotone_in_budget(seed in 0u64..10_000, extra in 1u64..2_000) {
        let p = random_problem(seed);
        let mut looser = p.clone();
        looser.budgets[0].limit += extra;
        let (a, b) = (solve(&p).unwrap(), solve(&looser).unwrap());
        if a.is_optimal() {
            prop_assert!(b.is_optimal());
            prop_assert!(b.total_degradation <= a.total_degradation);
        }
    }

    /// Permuting layers permutes the solution's objective not at all.
    #[test]
    fn objective_is_invariant_to_layer_order(seed in 0u64..10_000) {
        let p = random_problem(seed);
        let mut rev = p.clone();
        rev.layers.reverse();
        let (a, b) = (solve(&p).unwrap(), solve(&rev).unwrap());
        prop_assert_eq!(a.status, b.status);
        if a.is_optimal() {
            prop_assert_eq!(oracle_min(&p), Some(b.total_degradation));
            prop_assert_eq!(a.totals.len(), b.totals.len());
        }
    }
}

#[test]
fn identical_variants_resolve_to_the_lower_index() {
    let c = |label: &str| Candidate { label: label.into(), degradation: 1.0, costs: vec![5] };
    let p = SelectionProblem {
        layers: vec![LayerChoices { variants: vec![c("a"), c("b")] }; 3],
        budgets: vec![BudgetConstraint { name: "t".into(), kind: BudgetKind::Time, limit: 100 }],
    };
    let s = solve(&p).unwrap();
    assert_eq!(s.choices, vec![0, 0, 0]);
    assert_eq!(brute_force(&p).unwrap().choices, s.choices);
}

#[test]
fn solve_is_deterministic_and_agrees_with_brute_force_choices() {
    for seed in 0..50 {
        let p = random_problem(seed);
        let a = solve(&p).unwrap();
        assert_eq!(a, solve(&p).unwrap());
        assert_eq!(a, brute_force(&p).unwrap(), "seed {seed}");
    }
}

#[test]
fn unit_targets_select_the_parent() {
    let inst = planted::instance();
    let cfg = inst.config.clone();
    // Every non-parent block degrades, as measured scores do.
    let scores = ScoreTable::from_fn(&inst.library, ScoreSignal::TaskDrop, |l, sub| match sub {
        Subblock::Attention(a) if *a == cfg.attn_pattern[l] => 0.0,
        Subblock::Ffn { experts_kept } if *experts_kept == cfg.n_experts => 0.0,
        _ => 0.25,
    });
    let targets = vec![SpeedupTarget { scenario: "long".into(), target_speedup: 1.0 }];
    let (spec, report) =
        search_pipeline(&cfg, &inst.library, &scores, &inst.costs, &targets, None, &SearchOptions::default())
            .unwrap();
    assert_eq!(report.objective, 0.0);
    let parent = ArchitectureSpec::parent(&inst.config);
    for (a, b) in spec.layers.iter().zip(&parent.layers) {
        assert_eq!((a.attention, a.experts_kept), (b.attention, b.experts_kept));
    }
}

#[test]
fn planted_optimum_is_recovered() {
    let inst = planted::instance();
    let opts = SearchOptions::default();
    let (spec, report) =
        search_pipeline(&inst.config, &inst.library, &inst.scores, &inst.costs, &inst.targets, None, &opts).unwrap();
    assert_eq!(report.objective, 0.0);
    assert_eq!(brute_force(&report.problem).unwrap(), report.solution);
    for (l, s) in spec.layers.iter().enumerate() {
        let windowed = planted::WINDOW_LAYERS.contains(&l);
        assert_eq!(s.attention, if windowed { AttentionVariant::window(32) } else { inst.config.attn_pattern[l] });
        let pruned = planted::PRUNED_LAYERS.contains(&l);
        assert_eq!(s.experts_kept, if pruned { planted::PRUNED_KEEP } else { inst.config.n_experts });
    }
    // Sixteen zero-degradation selections exist; only the planted one fits the limit.
    let zero_cost: Vec<_> = report.problem.layers.iter().map(|l| l.variants.iter().filter(|c| c.degradation == 0.0).count()).collect();
    assert_eq!(zero_cost.iter().product::<usize>(), 16);
}
