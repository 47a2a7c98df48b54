//! Analytic roofline costs per subblock and scenario, KV-cache footprint,
//! speedup budgets and measured-cost ingestion.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{AttentionVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::library::{ArchitectureSpec, BlockLibrary, Subblock, VariantId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KvPrecision {
    Bf16,
    Fp8,
}

impl KvPrecision {
    pub fn bytes(&self) -> usize {
        match self {
            KvPrecision::Bf16 => 2,
            KvPrecision::Fp8 => 1,
        }
    }
}

impl std::fmt::Display for KvPrecision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(match self {
            KvPrecision::Bf16 => "bf16",
            KvPrecision::Fp8 => "fp8",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    /// Bytes per second.
    pub mem_bandwidth: f64,
    /// Flops per second.
    pub compute: f64,
    pub n_devices: usize,
    /// Seconds per layer per forward step.
    #[serde(default)]
    pub layer_overhead: f64,
    #[serde(default = "default_weight_bytes")]
    pub weight_bytes_per_param: f64,
}

fn default_weight_bytes() -> f64 {
    2.0
}

impl HardwareProfile {
    /// A laptop-class CPU.
    pub fn desk() -> Self {
        Self {
            mem_bandwidth: 1.0e9,
            compute: 5.0e10,
            n_devices: 1,
            layer_overhead: 0.0,
            weight_bytes_per_param: 2.0,
        }
    }

    /// Eight H100 SXM devices.
    pub fn h100_node() -> Self {
        Self {
            mem_bandwidth: 3.35e12,
            compute: 9.89e14,
            n_devices: 8,
            layer_overhead: 0.0,
            weight_bytes_per_param: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mem_bandwidth", self.mem_bandwidth),
            ("compute", self.compute),
            ("weight_bytes_per_param", self.weight_bytes_per_param),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::NonPositive(format!("hardware {name} = {v}")));
            }
        }
        if self.n_devices == 0 {
            return Err(Error::NonPositive("hardware n_devices = 0".into()));
        }
        if !(self.layer_overhead.is_finite() && self.layer_overhead >= 0.0) {
            return Err(Error::NonPositive(format!("hardware layer_overhead = {}", self.layer_overhead)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub isl: usize,
    pub osl: usize,
    pub batch: usize,
    pub kv_precision: KvPrecision,
    pub hw: HardwareProfile,
}

impl Scenario {
    pub fn new(name: impl Into<String>, isl: usize, osl: usize, batch: usize, hw: HardwareProfile) -> Self {
        Self { name: name.into(), isl, osl, batch, kv_precision: KvPrecision::Bf16, hw }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("isl", self.isl), ("osl", self.osl), ("batch", self.batch)] {
            if v == 0 {
                return Err(Error::NonPositive(format!("scenario `{}` {field} = 0", self.name)));
            }
        }
        self.hw.validate()
    }

    /// Context length assumed for decode-time KV reads.
    pub fn avg_decode_context(&self) -> f64 {
        self.isl as f64 + self.osl as f64 / 2.0
    }

    /// Full context length at the end of generation.
    pub fn final_context(&self) -> usize {
        self.isl + self.osl
    }
}

/// Cached token slots summed over layers at context `context_len`.
pub fn kv_token_slots(layout: &[AttentionVariant], context_len: usize) -> u64 {
    layout.iter().map(|a| a.effective_span(context_len) as u64).sum()
}

pub fn kv_bytes_for_layout(
    layout: &[AttentionVariant],
    context_len: usize,
    precision: KvPrecision,
    config: &ModelConfig,
) -> u64 {
    let per_slot = 2 * config.n_kv_heads as u64 * config.head_dim as u64 * precision.bytes() as u64;
    per_slot * kv_token_slots(layout, context_len)
}

pub fn kv_bytes_per_sequence(
    arch: &ArchitectureSpec,
    context_len: usize,
    precision: KvPrecision,
    config: &ModelConfig,
) -> Result<u64> {
    if context_len == 0 {
        return Err(Error::NonPositive("context length = 0".into()));
    }
    let layout: Vec<AttentionVariant> = arch.layers.iter().map(|l| l.attention).collect();
    Ok(kv_bytes_for_layout(&layout, context_len, precision, config))
}

/// `Σ_{t=1..n} min(t, span_limit)`.
fn sum_min_span(n: usize, attention: &AttentionVariant) -> f64 {
    let n = n as f64;
    match *attention {
        AttentionVariant::Global => n * (n + 1.0) / 2.0,
        AttentionVariant::Window { window } => {
            let w = window as f64;
            if n <= w {
                n * (n + 1.0) / 2.0
            } else {
                w * (w + 1.0) / 2.0 + (n - w) * w
            }
        }
    }
}

fn span_at(attention: &AttentionVariant, context: f64) -> f64 {
    match *attention {
        AttentionVariant::Global => context,
        AttentionVariant::Window { window } => context.min(window as f64),
    }
}

/// Decode and prefill time of one subblock, before device split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeBreakdown {
    pub decode_bandwidth: f64,
    pub decode_compute: f64,
    pub prefill: f64,
}

impl TimeBreakdown {
    pub fn decode(&self) -> f64 {
        self.decode_bandwidth.max(self.decode_compute)
    }

    pub fn total(&self, scenario: &Scenario) -> f64 {
        (self.prefill + scenario.osl as f64 * self.decode()) / scenario.hw.n_devices as f64
    }
}

pub fn attention_time(attention: &AttentionVariant, scenario: &Scenario, config: &ModelConfig) -> TimeBreakdown {
    let hw = &scenario.hw;
    let b = scenario.batch as f64;
    let params = config.attention_params() as f64;
    let span = span_at(attention, scenario.avg_decode_context());
    let kv_read = 2.0 * (config.n_kv_heads * config.head_dim * scenario.kv_precision.bytes()) as f64 * span;
    let score_flops = 4.0 * (config.n_heads * config.head_dim) as f64;
    let decode_flops = b * (2.0 * params + score_flops * span);
    let prefill_flops =
        b * (2.0 * params * scenario.isl as f64 + score_flops * sum_min_span(scenario.isl, attention));
    TimeBreakdown {
        decode_bandwidth: (params * hw.weight_bytes_per_param + b * kv_read) / hw.mem_bandwidth,
        decode_compute: decode_flops / hw.compute,
        prefill: prefill_flops / hw.compute,
    }
}

/// Bytes of expert weights read per decode step with `kept` experts.
pub fn ffn_expert_traffic_bytes(kept: usize, scenario: &Scenario, config: &ModelConfig) -> f64 {
    let touched = kept.min(scenario.batch * config.top_k);
    touched as f64 * config.expert_params() as f64 * scenario.hw.weight_bytes_per_param
}

pub fn ffn_time(kept: usize, scenario: &Scenario, config: &ModelConfig) -> TimeBreakdown {
    let hw = &scenario.hw;
    let b = scenario.batch as f64;
    let shared = config.moe_shared_params(kept) as f64 * hw.weight_bytes_per_param;
    let active = config.top_k.min(kept) as f64;
    let flops_per_token = 2.0 * (active * config.expert_params() as f64 + (kept * config.d_model) as f64);
    TimeBreakdown {
        decode_bandwidth: (ffn_expert_traffic_bytes(kept, scenario, config) + shared) / hw.mem_bandwidth,
        decode_compute: b * flops_per_token / hw.compute,
        prefill: b * scenario.isl as f64 * flops_per_token / hw.compute,
    }
}

/// Time of one subblock in one scenario.
pub fn block_time_cost(subblock: &Subblock, scenario: &Scenario, config: &ModelConfig) -> f64 {
    let breakdown = match subblock {
        Subblock::Attention(a) => attention_time(a, scenario, config),
        Subblock::Ffn { experts_kept } => ffn_time(*experts_kept, scenario, config),
    };
    breakdown.total(scenario)
}

/// Embedding lookup, final norm and LM head, plus per-layer overhead.
pub fn constant_overhead(scenario: &Scenario, config: &ModelConfig) -> f64 {
    let hw = &scenario.hw;
    let b = scenario.batch as f64;
    let head_params = (config.vocab_size * config.d_model + config.d_model) as f64;
    let head = TimeBreakdown {
        decode_bandwidth: head_params * hw.weight_bytes_per_param / hw.mem_bandwidth,
        decode_compute: b * 2.0 * head_params / hw.compute,
        prefill: b * scenario.isl as f64 * 2.0 * head_params / hw.compute,
    };
    let steps = (scenario.osl + 1) as f64;
    head.total(scenario) + steps * config.n_layers as f64 * hw.layer_overhead / hw.n_devices as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockCost {
    pub time: f64,
    pub kv_bytes_per_seq: u64,
    pub weight_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct CostKey {
    layer: usize,
    variant: VariantId,
    scenario: String,
}

/// Subblock costs keyed by (layer, variant, scenario) plus each scenario's
/// constant overhead.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostVector {
    entries: BTreeMap<CostKey, BlockCost>,
    overhead: BTreeMap<String, f64>,
}

impl CostVector {
    pub fn get(&self, layer: usize, variant: &VariantId, scenario: &str) -> Option<&BlockCost> {
        self.entries.get(&CostKey { layer, variant: variant.clone(), scenario: scenario.to_string() })
    }

    pub fn require(&self, layer: usize, variant: &VariantId, scenario: &str) -> Result<&BlockCost> {
        self.get(layer, variant, scenario).ok_or_else(|| Error::MissingCost {
            layer,
            variant: variant.to_string(),
            scenario: scenario.to_string(),
        })
    }

    pub fn insert(&mut self, layer: usize, variant: VariantId, scenario: impl Into<String>, cost: BlockCost) {
        self.entries.insert(CostKey { layer, variant, scenario: scenario.into() }, cost);
    }

    pub fn overhead(&self, scenario: &str) -> Option<f64> {
        self.overhead.get(scenario).copied()
    }

    pub fn set_overhead(&mut self, scenario: impl Into<String>, seconds: f64) {
        self.overhead.insert(scenario.into(), seconds);
    }

    pub fn scenarios(&self) -> impl Iterator<Item = &str> {
        self.overhead.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn records(&self) -> Vec<CostRecord> {
        let overhead = self.overhead.iter().map(|(s, &t)| CostRecord {
            layer: None,
            variant: None,
            scenario: s.clone(),
            time: t,
            kv_bytes_per_seq: None,
            weight_bytes: None,
        });
        let blocks = self.entries.iter().map(|(k, c)| CostRecord {
            layer: Some(k.layer),
            variant: Some(k.variant.clone()),
            scenario: k.scenario.clone(),
            time: c.time,
            kv_bytes_per_seq: Some(c.kv_bytes_per_seq),
            weight_bytes: Some(c.weight_bytes),
        });
        overhead.chain(blocks).collect()
    }

    /// One record per line; overhead records omit `layer` and `variant`.
    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for r in self.records() {
            serde_json::to_writer(&mut w, &r).map_err(|e| Error::json(path, e))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CostRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    variant: Option<VariantId>,
    scenario: String,
    time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kv_bytes_per_seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_bytes: Option<u64>,
}

fn subblock_weight_bytes(subblock: &Subblock, config: &ModelConfig, hw: &HardwareProfile) -> u64 {
    let params = match subblock {
        Subblock::Attention(_) => config.attention_params(),
        Subblock::Ffn { experts_kept } => {
            experts_kept * config.expert_params() + config.moe_shared_params(*experts_kept)
        }
    };
    (params as f64 * hw.weight_bytes_per_param).round() as u64
}

/// Analytic costs for every library variant in every scenario.
pub fn analytic_costs(library: &BlockLibrary, scenarios: &[Scenario], config: &ModelConfig) -> Result<CostVector> {
    let mut out = CostVector::default();
    for s in scenarios {
        s.validate()?;
        if out.overhead.contains_key(&s.name) {
            return Err(Error::InvalidInput(format!("duplicate scenario name `{}`", s.name)));
        }
        out.set_overhead(s.name.clone(), constant_overhead(s, config));
        for (l, layer) in library.layers.iter().enumerate() {
            let subblocks = layer
                .attention
                .iter()
                .map(|a| (a.id.clone(), Subblock::Attention(a.variant)))
                .chain(layer.ffn.iter().map(|f| (f.id.clone(), Subblock::Ffn { experts_kept: f.experts_kept })));
            for (id, sb) in subblocks {
                let kv = match &sb {
                    Subblock::Attention(a) => kv_bytes_for_layout(&[*a], s.final_context(), s.kv_precision, config),
                    Subblock::Ffn { .. } => 0,
                };
                out.insert(
                    l,
                    id,
                    s.name.clone(),
                    BlockCost {
                        time: block_time_cost(&sb, s, config),
                        kv_bytes_per_seq: kv,
                        weight_bytes: subblock_weight_bytes(&sb, config, &s.hw),
                    },
                );
            }
        }
    }
    Ok(out)
}

/// Overrides entries of `base` from a JSON-lines cost file. Records without
/// `layer` and `variant` override the scenario's constant overhead; omitted
/// byte fields keep the base values. Every key must already exist in `base`.
pub fn load_measured_costs(path: impl AsRef<Path>, base: &CostVector) -> Result<CostVector> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = base.clone();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let schema = |reason: String| Error::CostSchema { path: path.to_path_buf(), line: i + 1, reason };
        if line.trim().is_empty() {
            continue;
        }
        let r: CostRecord = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        if !(r.time.is_finite() && r.time >= 0.0) {
            return Err(schema(format!("time must be finite and >= 0, got {}", r.time)));
        }
        match (r.layer, r.variant) {
            (None, None) => {
                if !out.overhead.contains_key(&r.scenario) {
                    return Err(schema(format!("unknown scenario `{}`", r.scenario)));
                }
                if r.kv_bytes_per_seq.is_some() || r.weight_bytes.is_some() {
                    return Err(schema("overhead records carry only `time`".into()));
                }
                out.set_overhead(r.scenario, r.time);
            }
            (Some(layer), Some(variant)) => {
                let key = CostKey { layer, variant, scenario: r.scenario };
                let entry = out.entries.get_mut(&key).ok_or_else(|| {
                    schema(format!(
                        "unknown entry layer {} variant `{}` scenario `{}`",
                        key.layer, key.variant, key.scenario
                    ))
                })?;
                entry.time = r.time;
                if let Some(kv) = r.kv_bytes_per_seq {
                    entry.kv_bytes_per_seq = kv;
                }
                if let Some(w) = r.weight_bytes {
                    entry.weight_bytes = w;
                }
            }
            _ => return Err(schema("`layer` and `variant` must be given together".into())),
        }
    }
    Ok(out)
}

/// Cost of a full architecture: Σ layers (attention + FFN) + overhead.
pub fn total_time(arch: &ArchitectureSpec, costs: &CostVector, scenario: &str) -> Result<f64> {
    let mut total = costs
        .overhead(scenario)
        .ok_or_else(|| Error::InvalidInput(format!("unknown scenario `{scenario}`")))?;
    for (l, spec) in arch.layers.iter().enumerate() {
        total += costs.require(l, &VariantId::attention(&spec.attention), scenario)?.time;
        total += costs.require(l, &VariantId::ffn(spec.experts_kept), scenario)?.time;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub scenario: String,
    pub max_total_time: f64,
}

pub fn scenario_budget(
    parent: &ArchitectureSpec,
    costs: &CostVector,
    scenario: &str,
    target_speedup: f64,
) -> Result<Budget> {
    if !(target_speedup.is_finite() && target_speedup > 0.0) {
        return Err(Error::NonPositive(format!("target speedup {target_speedup}")));
    }
    Ok(Budget {
        scenario: scenario.to_string(),
        max_total_time: total_time(parent, costs, scenario)? / target_speedup,
    })
}
