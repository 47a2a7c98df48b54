#![allow(dead_code)]

use puzzle_nas::config::{AttentionVariant, ModelConfig};
use puzzle_nas::model::{init_model, ModelParams};
use puzzle_nas::probes::{ProbeSet, ProbeSpec, RetrievalLayout};
use puzzle_nas::search::{BudgetConstraint, BudgetKind, Candidate, LayerChoices, SelectionProblem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small config for tests that need a real forward pass but not the full toy.
pub fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    cfg.vocab_size = 32;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.n_kv_heads = 1;
    cfg.head_dim = 8;
    cfg.n_experts = 4;
    cfg.top_k = 2;
    cfg.expert_hidden = 8;
    cfg.max_seq_len = 64;
    cfg.attn_pattern = vec![AttentionVariant::window(4), AttentionVariant::Global];
    cfg
}

fn zero(params: &mut ModelParams) {
    for m in [&mut params.embedding, &mut params.lm_head] {
        m.data.fill(0.0);
    }
    for layer in &mut params.layers {
        let a = &mut layer.attention;
        for m in [&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo] {
            m.data.fill(0.0);
        }
        let moe = &mut layer.moe;
        moe.router.data.fill(0.0);
        moe.router_bias.fill(0.0);
        for e in &mut moe.experts {
            for m in [&mut e.gate, &mut e.up, &mut e.down] {
                m.data.fill(0.0);
            }
        }
    }
}

pub const INDUCTION_VOCAB: usize = 16;
pub const INDUCTION_QUERY: u32 = 15;

/// Hand-wired two-layer induction circuit that solves the retrieval task.
///
/// Residual layout: dims `0..16` hold the current token one-hot, `16..32`
/// the previous token one-hot (written by layer 0), dim 32 a constant.
/// Layer 0 (`Window(4)`) attends one step back through the first rotary
/// pair. Layer 1 (`Global`) matches the current token against each
/// position's previous token (minus its current token) and copies the
/// matched token into the one-hot dims, which the LM head reads.
pub fn induction_model() -> ModelParams {
    let v = INDUCTION_VOCAB;
    let cfg = ModelConfig {
        vocab_size: v,
        d_model: 48,
        n_layers: 2,
        n_heads: 1,
        n_kv_heads: 1,
        head_dim: 18,
        n_experts: 2,
        top_k: 1,
        expert_hidden: 2,
        max_seq_len: 64,
        rope_base: 1e300,
        rope_scale_factor: 1.0,
        attn_pattern: vec![AttentionVariant::window(4), AttentionVariant::Global],
    };
    let mut p = init_model(&cfg, 0).unwrap();
    zero(&mut p);
    const CONST_DIM: usize = 32;
    for t in 0..v {
        p.embedding.set(t, t, 1.0);
        p.embedding.set(t, CONST_DIM, 1.0);
        p.lm_head.set(t, t, 1.0);
    }
    // rms-norm gains: two unit entries over 48 dims after layer 0's input,
    // three after layer 1's.
    let g0 = (48.0f32 / 2.0).sqrt();
    let g1 = (48.0f32 / 3.0).sqrt();

    let alpha = 3.0;
    let a0 = &mut p.layers[0].attention;
    a0.wq.set(0, CONST_DIM, alpha);
    a0.wk.set(0, CONST_DIM, alpha * 1f32.cos());
    a0.wk.set(1, CONST_DIM, alpha * 1f32.sin());
    for j in 0..v {
        a0.wv.set(j, j, 1.0 / g0);
        a0.wo.set(16 + j, j, 1.0);
    }

    let gamma = 3.26;
    let beta = 3.0;
    let a1 = &mut p.layers[1].attention;
    for j in 0..v {
        a1.wq.set(2 + j, j, gamma);
        a1.wk.set(2 + j, 16 + j, gamma);
        // Position 0 sees only itself, so its "previous token" is its own;
        // subtracting the current token keeps it from matching.
        a1.wk.set(2 + j, j, -gamma);
        a1.wv.set(j, j, 1.0 / g1);
        a1.wo.set(j, j, beta);
    }
    p
}

/// Retrieval probes matching [`induction_model`]'s vocabulary.
pub fn induction_task(seed: u64, count: usize, length: usize) -> ProbeSpec {
    let mut spec = ProbeSpec::retrieval(seed, count, length);
    spec.layout = Some(RetrievalLayout {
        n_pairs: 4,
        query_token: INDUCTION_QUERY,
        key_range: (1, 8),
        value_range: (8, 15),
    });
    spec
}

pub fn induction_probes(seed: u64, count: usize, length: usize) -> ProbeSet {
    induction_task(seed, count, length)
        .generate(&induction_model().config)
        .unwrap()
}

/// Random multiple-choice instance with two budgets. Limits fall between the
/// cheapest and the dearest assignment so most instances are feasible but
/// binding; a few are made infeasible on purpose.
pub fn random_problem(seed: u64) -> SelectionProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = rng.random_range(1..=10);
    let mut min = [0u64; 2];
    let mut max = [0u64; 2];
    let layers: Vec<LayerChoices> = (0..n_layers)
        .map(|l| {
            let n = rng.random_range(1..=4);
            let variants: Vec<Candidate> = (0..n)
                .map(|v| Candidate {
                    label: format!("l{l}v{v}"),
                    // Small integer grid so ties between assignments occur.
                    degradation: rng.random_range(0..20) as f64 / 4.0,
                    costs: vec![rng.random_range(1..1000), rng.random_range(0..500)],
                })
                .collect();
            for b in 0..2 {
                min[b] += variants.iter().map(|c| c.costs[b]).min().unwrap();
                max[b] += variants.iter().map(|c| c.costs[b]).max().unwrap();
            }
            LayerChoices { variants }
        })
        .collect();
    let mut budgets = Vec::new();
    for (b, kind) in [BudgetKind::Time, BudgetKind::KvBytes].into_iter().enumerate() {
        let frac: f64 = rng.random_range(-0.1..1.1);
        let limit = min[b] as f64 + frac * (max[b] - min[b]) as f64;
        budgets.push(BudgetConstraint {
            name: format!("b{b}"),
            kind,
            limit: limit.max(0.0).round() as u64,
        });
    }
    SelectionProblem { layers, budgets }
}

pub fn tiny_params(seed: u64) -> ModelParams {
    init_model(&tiny_config(), seed).unwrap()
}

pub mod planted {
    use puzzle_nas::config::{AttentionVariant, ModelConfig};
    use puzzle_nas::cost::{analytic_costs, CostVector, HardwareProfile, Scenario};
    use puzzle_nas::library::{build_library, BlockLibrary, LibraryMenu, Subblock, VariantId};
    use puzzle_nas::scoring::{ScoreSignal, ScoreTable};
    use puzzle_nas::search::{time_units, SpeedupTarget};

    pub const WINDOW_LAYERS: [usize; 2] = [1, 5];
    pub const PRUNED_LAYERS: [usize; 2] = [0, 6];
    pub const PRUNED_KEEP: usize = 8;

    /// Toy search instance whose unique zero-degradation optimum windows
    /// exactly [`WINDOW_LAYERS`] and prunes [`PRUNED_LAYERS`] to
    /// [`PRUNED_KEEP`] experts.
    pub struct Instance {
        pub config: ModelConfig,
        pub library: BlockLibrary,
        pub scores: ScoreTable,
        pub costs: CostVector,
        pub targets: Vec<SpeedupTarget>,
    }

    pub fn scenario() -> Scenario {
        Scenario::new("long", 192, 64, 16, HardwareProfile::desk())
    }

    pub fn is_planted(layer: usize, sub: &Subblock) -> bool {
        match sub {
            Subblock::Attention(a) => !a.is_global() && WINDOW_LAYERS.contains(&layer),
            Subblock::Ffn { experts_kept } => *experts_kept == PRUNED_KEEP && PRUNED_LAYERS.contains(&layer),
        }
    }

    pub fn instance() -> Instance {
        let config = ModelConfig::toy();
        let library = build_library(&config, &LibraryMenu::toy()).unwrap();
        let parent = config.clone();
        let scores = ScoreTable::from_fn(&library, ScoreSignal::TaskDrop, |l, sub| {
            let is_parent = match sub {
                Subblock::Attention(a) => *a == parent.attn_pattern[l],
                Subblock::Ffn { experts_kept } => *experts_kept == parent.n_experts,
            };
            if is_parent || is_planted(l, sub) {
                0.0
            } else {
                1.0 + l as f64 / 10.0
            }
        });
        let s = scenario();
        let costs = analytic_costs(&library, std::slice::from_ref(&s), &config).unwrap();
        let units = |l: usize, id: &VariantId| time_units(costs.require(l, id, &s.name).unwrap().time);
        let overhead = time_units(costs.overhead(&s.name).unwrap());
        let (mut parent_units, mut planted_units) = (overhead, overhead);
        for l in 0..config.n_layers {
            let attn = config.attn_pattern[l];
            parent_units += units(l, &VariantId::attention(&attn)) + units(l, &VariantId::ffn(config.n_experts));
            let a = if WINDOW_LAYERS.contains(&l) { AttentionVariant::window(32) } else { attn };
            let k = if PRUNED_LAYERS.contains(&l) { PRUNED_KEEP } else { config.n_experts };
            planted_units += units(l, &VariantId::attention(&a)) + units(l, &VariantId::ffn(k));
        }
        // Puts the time limit exactly on the planted architecture's cost.
        let target_speedup = parent_units as f64 / (planted_units as f64 + 0.5);
        let targets = vec![SpeedupTarget { scenario: s.name.clone(), target_speedup }];
        Instance { config, library, scores, costs, targets }
    }
}

pub fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// Published relative rates keyed `(model, precision, effort)`.
pub fn expected_rates() -> Vec<(String, String, String, f64)> {
    let mut r = csv::Reader::from_path(fixture("frontier_64k_node_expected.csv")).unwrap();
    r.records()
        .map(|row| {
            let row = row.unwrap();
            (row[2].to_string(), row[1].to_string(), row[0].to_string(), row[3].parse().unwrap())
        })
        .collect()
}

/// The bundled toy run with probe sets shrunk so a full pipeline takes about a second.
pub fn quick_config() -> puzzle_nas::pipeline::RunConfig {
    let mut c = puzzle_nas::pipeline::RunConfig::toy();
    c.probes = puzzle_nas::pipeline::ProbeConfig { lm_count: 4, lm_length: 32, task_count: 8, task_length: 64 };
    c.eval.prompts = 2;
    c
}
