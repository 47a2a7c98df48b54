//! Exact block selection: one variant per layer, minimum total degradation
//! under additive integer budgets.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{AttentionVariant, ModelConfig};
use crate::cost::{CostVector, KvPrecision};
use crate::error::{Error, Result};
use crate::library::{load_json, save_json, ArchitectureSpec, BlockLibrary, LayerSpec, VariantId};
use crate::scoring::{ScoreSignal, ScoreTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub label: String,
    pub degradation: f64,
    /// One entry per budget, in the problem's budget order.
    pub costs: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerChoices {
    pub variants: Vec<Candidate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetKind {
    /// Nanoseconds.
    Time,
    /// Bytes per sequence.
    KvBytes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetConstraint {
    pub name: String,
    pub kind: BudgetKind,
    pub limit: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionProblem {
    pub layers: Vec<LayerChoices>,
    pub budgets: Vec<BudgetConstraint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    ProvenOptimal,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub status: SolveStatus,
    /// Chosen variant index per layer; empty when infeasible.
    pub choices: Vec<usize>,
    pub total_degradation: f64,
    /// Per-budget cost totals of the choice.
    pub totals: Vec<u64>,
    pub slacks: Vec<u64>,
    /// Name of the constraint that rules out every selection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binding: Option<String>,
}

impl Solution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::ProvenOptimal
    }
}

impl SelectionProblem {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::MalformedProblem(m));
        if self.layers.is_empty() {
            return bad("no layers".into());
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.variants.is_empty() {
                return bad(format!("layer {l} has no variants"));
            }
            if layer.variants.len() > u16::MAX as usize {
                return bad(format!("layer {l} has too many variants"));
            }
            for (v, c) in layer.variants.iter().enumerate() {
                if !(c.degradation.is_finite() && c.degradation >= 0.0) {
                    return bad(format!("layer {l} variant {v} degradation {}", c.degradation));
                }
                if c.costs.len() != self.budgets.len() {
                    return bad(format!(
                        "layer {l} variant {v} has {} costs for {} budgets",
                        c.costs.len(),
                        self.budgets.len()
                    ));
                }
            }
        }
        Ok(())
    }

    /// Number of complete selections.
    pub fn search_space(&self) -> u128 {
        self.layers
            .iter()
            .map(|l| l.variants.len() as u128)
            .fold(1u128, |a, n| a.saturating_mul(n))
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        save_json(path.as_ref(), self)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        load_json(path.as_ref())
    }

    /// Degradations as fixed-point integers whose sum over any selection fits
    /// in `u64`, so objective comparisons are exact.
    fn quantized_degradations(&self) -> Vec<Vec<u64>> {
        let span: f64 = self
            .layers
            .iter()
            .map(|l| l.variants.iter().map(|c| c.degradation).fold(0.0, f64::max))
            .sum();
        let scale = if span > 0.0 { (1u64 << 62) as f64 / span } else { 0.0 };
        self.layers
            .iter()
            .map(|l| l.variants.iter().map(|c| (c.degradation * scale).round() as u64).collect())
            .collect()
    }

    fn evaluate(&self, choices: &[usize]) -> (f64, Vec<u64>) {
        let mut deg = 0.0;
        let mut totals = vec![0u64; self.budgets.len()];
        for (layer, &v) in self.layers.iter().zip(choices) {
            let c = &layer.variants[v];
            deg += c.degradation;
            for (t, x) in totals.iter_mut().zip(&c.costs) {
                *t += x;
            }
        }
        (deg, totals)
    }

    fn solution(&self, choices: Vec<usize>) -> Solution {
        let (total_degradation, totals) = self.evaluate(&choices);
        let slacks = totals.iter().zip(&self.budgets).map(|(t, b)| b.limit - t).collect();
        Solution { status: SolveStatus::ProvenOptimal, choices, total_degradation, totals, slacks, binding: None }
    }

    fn infeasible(&self) -> Solution {
        let min_totals = self.min_cost_suffix()[0].clone();
        let binding: Vec<&str> = self
            .budgets
            .iter()
            .zip(&min_totals)
            .filter(|(b, &m)| m > b.limit)
            .map(|(b, _)| b.name.as_str())
            .collect();
        let binding = if binding.is_empty() {
            self.budgets.iter().map(|b| b.name.as_str()).collect::<Vec<_>>().join(" + ")
        } else {
            binding.join(" + ")
        };
        Solution {
            status: SolveStatus::Infeasible,
            choices: Vec::new(),
            total_degradation: f64::INFINITY,
            totals: Vec::new(),
            slacks: Vec::new(),
            binding: Some(binding),
        }
    }

    /// `suffix[d][b]` = Σ over layers `d..` of the cheapest cost under budget `b`.
    fn min_cost_suffix(&self) -> Vec<Vec<u64>> {
        let nb = self.budgets.len();
        let mut suffix = vec![vec![0u64; nb]; self.layers.len() + 1];
        for d in (0..self.layers.len()).rev() {
            for b in 0..nb {
                let m = self.layers[d].variants.iter().map(|c| c.costs[b]).min().expect("non-empty");
                suffix[d][b] = suffix[d + 1][b] + m;
            }
        }
        suffix
    }
}

#[derive(PartialEq, Eq)]
struct Node {
    bound: u64,
    prefix: Vec<u16>,
    deg: u64,
    costs: Vec<u64>,
}

impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound.cmp(&other.bound).then_with(|| self.prefix.cmp(&other.prefix))
    }
}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Best-first branch and bound over layers. Nodes are ordered by (bound,
/// prefix), so the first complete node popped is the lexicographically
/// smallest optimal selection.
pub fn solve(problem: &SelectionProblem) -> Result<Solution> {
    problem.validate()?;
    let n = problem.n_layers();
    let nb = problem.budgets.len();
    let limits: Vec<u64> = problem.budgets.iter().map(|b| b.limit).collect();
    let q = problem.quantized_degradations();
    let suffix = problem.min_cost_suffix();
    if (0..nb).any(|b| suffix[0][b] > limits[b]) {
        return Ok(problem.infeasible());
    }

    // Lower bound for layers `depth..` given the partial costs: each remaining
    // layer takes its best variant that is feasible when every other remaining
    // layer takes its cheapest.
    let bound_rest = |depth: usize, costs: &[u64]| -> Option<u64> {
        let mut total = 0u64;
        for d in depth..n {
            let mut best: Option<u64> = None;
            for (v, c) in problem.layers[d].variants.iter().enumerate() {
                let ok = (0..nb).all(|b| {
                    let others = suffix[depth][b] - (suffix[d][b] - suffix[d + 1][b]);
                    costs[b] + others + c.costs[b] <= limits[b]
                });
                if ok {
                    best = Some(best.map_or(q[d][v], |x: u64| x.min(q[d][v])));
                }
            }
            total += best?;
        }
        Some(total)
    };

    let mut heap = BinaryHeap::new();
    let root_costs = vec![0u64; nb];
    if let Some(b) = bound_rest(0, &root_costs) {
        heap.push(Reverse(Node { bound: b, prefix: Vec::new(), deg: 0, costs: root_costs }));
    }
    while let Some(Reverse(node)) = heap.pop() {
        let depth = node.prefix.len();
        if depth == n {
            return Ok(problem.solution(node.prefix.iter().map(|&v| v as usize).collect()));
        }
        for (v, c) in problem.layers[depth].variants.iter().enumerate() {
            let costs: Vec<u64> = node.costs.iter().zip(&c.costs).map(|(a, b)| a + b).collect();
            if (0..nb).any(|b| costs[b] + suffix[depth + 1][b] > limits[b]) {
                continue;
            }
            let deg = node.deg + q[depth][v];
            let Some(rest) = bound_rest(depth + 1, &costs) else { continue };
            let mut prefix = node.prefix.clone();
            prefix.push(v as u16);
            heap.push(Reverse(Node { bound: deg + rest, prefix, deg, costs }));
        }
    }
    Ok(problem.infeasible())
}

pub const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

/// Exhaustive enumeration in lexicographic order, keeping the first selection
/// with the strictly smallest objective.
pub fn brute_force(problem: &SelectionProblem) -> Result<Solution> {
    problem.validate()?;
    let space = problem.search_space();
    if space > BRUTE_FORCE_LIMIT {
        return Err(Error::InstanceTooLarge(space));
    }
    let n = problem.n_layers();
    let q = problem.quantized_degradations();
    let mut choice = vec![0usize; n];
    let mut best: Option<(u64, Vec<usize>)> = None;
    loop {
        let mut totals = vec![0u64; problem.budgets.len()];
        let mut deg = 0u64;
        for (l, &v) in choice.iter().enumerate() {
            deg += q[l][v];
            for (t, c) in totals.iter_mut().zip(&problem.layers[l].variants[v].costs) {
                *t += c;
            }
        }
        let feasible = totals.iter().zip(&problem.budgets).all(|(t, b)| *t <= b.limit);
        if feasible && best.as_ref().is_none_or(|(d, _)| deg < *d) {
            best = Some((deg, choice.clone()));
        }
        // Odometer increment, last layer fastest.
        let mut l = n;
        loop {
            if l == 0 {
                return Ok(match best {
                    Some((_, c)) => problem.solution(c),
                    None => problem.infeasible(),
                });
            }
            l -= 1;
            choice[l] += 1;
            if choice[l] < problem.layers[l].variants.len() {
                break;
            }
            choice[l] = 0;
        }
    }
}

/// A run-config budget: the child must be `target_speedup` times faster than
/// the parent in `scenario`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupTarget {
    pub scenario: String,
    pub target_speedup: f64,
}

/// KV bytes per sequence at the scenario's final context, relative to the parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvBudget {
    pub scenario: String,
    pub max_fraction: f64,
}

/// Which score signal feeds each subblock kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalChoice {
    pub attention: ScoreSignal,
    pub ffn: ScoreSignal,
}

impl Default for SignalChoice {
    fn default() -> Self {
        Self { attention: ScoreSignal::TaskDrop, ffn: ScoreSignal::ActivationMse }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub signals: SignalChoice,
    /// Min-max normalize each signal to [0, 1] before summing.
    pub normalize: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self { signals: SignalChoice::default(), normalize: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub name: String,
    pub kind: BudgetKind,
    pub limit: u64,
    pub total: u64,
    pub slack: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub objective: f64,
    pub normalization: String,
    pub budgets: Vec<BudgetReport>,
    pub choices: Vec<String>,
    pub problem: SelectionProblem,
    pub solution: Solution,
}

/// Seconds to whole nanoseconds, rounded up.
pub fn time_units(seconds: f64) -> u64 {
    (seconds * 1e9).ceil() as u64
}

struct Normalizer {
    ranges: BTreeMap<ScoreSignal, (f64, f64)>,
    enabled: bool,
}

impl Normalizer {
    fn apply(&self, signal: ScoreSignal, d: f64) -> f64 {
        if !self.enabled {
            return d;
        }
        let (lo, hi) = self.ranges[&signal];
        if hi > lo {
            (d - lo) / (hi - lo)
        } else {
            0.0
        }
    }
}

/// Layer variants are the cross product of attention and FFN options, in
/// library order (attention outer).
pub fn build_selection_problem(
    config: &ModelConfig,
    library: &BlockLibrary,
    scores: &ScoreTable,
    costs: &CostVector,
    targets: &[SpeedupTarget],
    kv_budget: Option<&KvBudget>,
    options: &SearchOptions,
) -> Result<(SelectionProblem, Vec<Vec<(AttentionVariant, usize)>>)> {
    if library.layers.len() != config.n_layers {
        return Err(Error::InvalidLibrary(format!(
            "library has {} layers, config has {}",
            library.layers.len(),
            config.n_layers
        )));
    }
    let lookup = |l: usize, id: &VariantId, signal: ScoreSignal| -> Result<f64> {
        scores.get(l, id, signal).map(|e| e.degradation).ok_or_else(|| Error::MissingScore {
            layer: l,
            variant: id.to_string(),
            signal: signal.to_string(),
        })
    };
    let mut ranges: BTreeMap<ScoreSignal, (f64, f64)> = BTreeMap::new();
    let mut widen = |signal: ScoreSignal, d: f64| {
        let r = ranges.entry(signal).or_insert((d, d));
        r.0 = r.0.min(d);
        r.1 = r.1.max(d);
    };
    for (l, layer) in library.layers.iter().enumerate() {
        for a in &layer.attention {
            widen(options.signals.attention, lookup(l, &a.id, options.signals.attention)?);
        }
        for f in &layer.ffn {
            widen(options.signals.ffn, lookup(l, &f.id, options.signals.ffn)?);
        }
    }
    let norm = Normalizer { ranges, enabled: options.normalize };

    let parent = ArchitectureSpec::parent(config);
    let mut budgets = Vec::new();
    for t in targets {
        if !(t.target_speedup.is_finite() && t.target_speedup > 0.0) {
            return Err(Error::NonPositive(format!("target speedup {} for `{}`", t.target_speedup, t.scenario)));
        }
        let overhead = time_units(
            costs.overhead(&t.scenario).ok_or_else(|| Error::InvalidInput(format!("unknown scenario `{}`", t.scenario)))?,
        );
        let mut parent_units = overhead;
        for (l, spec) in parent.layers.iter().enumerate() {
            parent_units += time_units(costs.require(l, &VariantId::attention(&spec.attention), &t.scenario)?.time);
            parent_units += time_units(costs.require(l, &VariantId::ffn(spec.experts_kept), &t.scenario)?.time);
        }
        let total_limit = (parent_units as f64 / t.target_speedup).floor() as u64;
        budgets.push(BudgetConstraint {
            name: format!("time:{}", t.scenario),
            kind: BudgetKind::Time,
            limit: total_limit.saturating_sub(overhead),
        });
    }
    if let Some(kv) = kv_budget {
        if !(kv.max_fraction.is_finite() && kv.max_fraction > 0.0) {
            return Err(Error::NonPositive(format!("kv budget fraction {}", kv.max_fraction)));
        }
        let mut parent_kv = 0u64;
        for (l, spec) in parent.layers.iter().enumerate() {
            parent_kv += costs.require(l, &VariantId::attention(&spec.attention), &kv.scenario)?.kv_bytes_per_seq;
        }
        budgets.push(BudgetConstraint {
            name: format!("kv:{}", kv.scenario),
            kind: BudgetKind::KvBytes,
            limit: (parent_kv as f64 * kv.max_fraction).floor() as u64,
        });
    }

    let mut layers = Vec::with_capacity(config.n_layers);
    let mut decode = Vec::with_capacity(config.n_layers);
    for (l, layer) in library.layers.iter().enumerate() {
        let mut variants = Vec::new();
        let mut map = Vec::new();
        for a in &layer.attention {
            let da = norm.apply(options.signals.attention, lookup(l, &a.id, options.signals.attention)?);
            for f in &layer.ffn {
                let df = norm.apply(options.signals.ffn, lookup(l, &f.id, options.signals.ffn)?);
                let mut cost = Vec::with_capacity(budgets.len());
                for t in targets {
                    cost.push(
                        time_units(costs.require(l, &a.id, &t.scenario)?.time)
                            + time_units(costs.require(l, &f.id, &t.scenario)?.time),
                    );
                }
                if let Some(kv) = kv_budget {
                    cost.push(costs.require(l, &a.id, &kv.scenario)?.kv_bytes_per_seq);
                }
                variants.push(Candidate { label: format!("{}+{}", a.id, f.id), degradation: da + df, costs: cost });
                map.push((a.variant, f.experts_kept));
            }
        }
        layers.push(LayerChoices { variants });
        decode.push(map);
    }
    Ok((SelectionProblem { layers, budgets }, decode))
}

/// Builds the selection problem, solves it exactly and returns the chosen
/// architecture. Keep sets are left empty until assembly fills them from a
/// ranking.
pub fn search_pipeline(
    config: &ModelConfig,
    library: &BlockLibrary,
    scores: &ScoreTable,
    costs: &CostVector,
    targets: &[SpeedupTarget],
    kv_budget: Option<&KvBudget>,
    options: &SearchOptions,
) -> Result<(ArchitectureSpec, SearchReport)> {
    let (problem, decode) = build_selection_problem(config, library, scores, costs, targets, kv_budget, options)?;
    let solution = solve(&problem)?;
    if !solution.is_optimal() {
        return Err(Error::Infeasible { binding: solution.binding.clone().unwrap_or_default() });
    }
    let spec = ArchitectureSpec {
        layers: solution
            .choices
            .iter()
            .enumerate()
            .map(|(l, &v)| {
                let (attention, experts_kept) = decode[l][v];
                LayerSpec { attention, experts_kept, expert_keep_set: Vec::new() }
            })
            .collect(),
    };
    let budgets = problem
        .budgets
        .iter()
        .enumerate()
        .map(|(b, c)| BudgetReport {
            name: c.name.clone(),
            kind: c.kind,
            limit: c.limit,
            total: solution.totals[b],
            slack: solution.slacks[b],
        })
        .collect();
    let normalization = if options.normalize {
        format!(
            "per-signal min-max to [0,1]; attention={}, ffn={}",
            options.signals.attention, options.signals.ffn
        )
    } else {
        format!("raw; attention={}, ffn={}", options.signals.attention, options.signals.ffn)
    };
    let report = SearchReport {
        objective: solution.total_degradation,
        normalization,
        budgets,
        choices: solution.choices.iter().enumerate().map(|(l, &v)| problem.layers[l].variants[v].label.clone()).collect(),
        problem,
        solution,
    };
    Ok((spec, report))
}

/// One line per layer: index, attention kind, kept experts.
pub fn choice_table(spec: &ArchitectureSpec, config: &ModelConfig) -> String {
    let mut out = String::from("layer  attention    experts\n");
    for (l, s) in spec.layers.iter().enumerate() {
        let mark = if s.attention != config.attn_pattern[l] { "*" } else { " " };
        let _ = writeln!(out, "{l:>5}  {:<11}{mark} {:>3}/{}", s.attention.to_string(), s.experts_kept, config.n_experts);
    }
    out
}

/// KV bytes per sequence of a spec's attention layout.
pub fn spec_kv_bytes(spec: &ArchitectureSpec, context_len: usize, precision: KvPrecision, config: &ModelConfig) -> u64 {
    let layout: Vec<AttentionVariant> = spec.layers.iter().map(|l| l.attention).collect();
    crate::cost::kv_bytes_for_layout(&layout, context_len, precision, config)
}
