//! Quality signals: expert contribution scores, replace-1-block activation
//! MSE, layer rank averaging and the long-context retrieval task score.
//!
//! Every reduction walks probes and tokens in a fixed order, so scores are
//! bit-stable for a given `(params, library, probes)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::library::{ArchitectureSpec, BlockLibrary, ExpertRanking, LayerRanking, Subblock, VariantId};
use crate::model::{Forward, ModelParams, MoeParams, NoKvHook};
use crate::probes::ProbeSet;
use crate::tensor::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSignal {
    ActivationMse,
    TaskDrop,
}

impl fmt::Display for ScoreSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreSignal::ActivationMse => "activation_mse",
            ScoreSignal::TaskDrop => "task_drop",
        })
    }
}

/// Mean over probe tokens of `MSE(f(x), f_without_i(x))` for each expert of
/// one MoE layer, where `x` are the layer's inputs under the full model.
pub fn expert_contribution_scores(
    params: &ModelParams,
    layer: usize,
    probes: &ProbeSet,
) -> Result<LayerRanking> {
    if layer >= params.layers.len() {
        return Err(Error::InvalidInput(format!("layer {layer} out of range")));
    }
    let mut ranking = rank_layers(params, probes, &BTreeSet::from([layer]))?;
    Ok(ranking.remove(&layer).expect("requested layer scored"))
}

/// Expert rankings for every layer from one pass over the probes.
pub fn rank_experts(params: &ModelParams, probes: &ProbeSet) -> Result<ExpertRanking> {
    let all: BTreeSet<usize> = (0..params.layers.len()).collect();
    let mut ranked = rank_layers(params, probes, &all)?;
    Ok(ExpertRanking {
        layers: all.iter().map(|l| ranked.remove(l).expect("layer scored")).collect(),
    })
}

fn rank_layers(
    params: &ModelParams,
    probes: &ProbeSet,
    layers: &BTreeSet<usize>,
) -> Result<BTreeMap<usize, LayerRanking>> {
    if probes.is_empty() {
        return Err(Error::EmptyProbes);
    }
    let cfg = &params.config;
    for &l in layers {
        if params.layers[l].moe.n_local() != cfg.n_experts {
            return Err(Error::InvalidInput(format!(
                "layer {l} has {} experts; contribution scores need the unpruned parent",
                params.layers[l].moe.n_local()
            )));
        }
    }
    let arch = ArchitectureSpec::from_params(params);
    let fw = Forward::new(params, &arch)?;
    let mut sums: BTreeMap<usize, Vec<f64>> =
        layers.iter().map(|&l| (l, vec![0.0; cfg.n_experts])).collect();
    let mut n_tokens = 0usize;
    for seq in &probes.sequences {
        let trace = fw.run(&seq.tokens, layers, &mut NoKvHook)?;
        n_tokens += seq.tokens.len();
        for (l, capture) in &trace.ffn_io {
            let moe = &params.layers[*l].moe;
            accumulate_removal_mse(moe, &capture.input, cfg.top_k, sums.get_mut(l).expect("layer"));
        }
    }
    Ok(sums
        .into_iter()
        .map(|(l, s)| {
            let scores = s.into_iter().map(|v| v / n_tokens as f64).collect();
            (l, LayerRanking::from_scores(scores))
        })
        .collect())
}

/// Adds `MSE(f(x), f^(i)(x))` for every token row to `sums[id(i)]`. Experts
/// outside a token's top-k leave the routing unchanged and contribute 0.
fn accumulate_removal_mse(moe: &MoeParams, inputs: &Matrix, top_k: usize, sums: &mut [f64]) {
    let all = moe.all_allowed();
    let mut mask = all.clone();
    for t in 0..inputs.rows {
        let x = inputs.row(t);
        let full = moe.forward_token(x, &all, top_k);
        for (j, _) in moe.route(x, &all, top_k) {
            mask[j] = false;
            let without = moe.forward_token(x, &mask, top_k);
            mask[j] = true;
            sums[moe.expert_ids[j]] += tensor::mse(&full, &without);
        }
    }
}

/// Caches the parent's per-layer residual inputs and final hidden states so
/// each single-layer replacement only recomputes the layers from the swap on.
pub struct ReplaceOneScorer<'a> {
    params: &'a ModelParams,
    parent_arch: ArchitectureSpec,
    layer_inputs: Vec<Vec<Matrix>>,
    parent_final: Vec<Matrix>,
}

impl<'a> ReplaceOneScorer<'a> {
    pub fn new(params: &'a ModelParams, probes: &ProbeSet) -> Result<Self> {
        if probes.is_empty() {
            return Err(Error::EmptyProbes);
        }
        let parent_arch = ArchitectureSpec::from_params(params);
        let fw = Forward::new(params, &parent_arch)?;
        let mut layer_inputs = Vec::with_capacity(probes.len());
        let mut parent_final = Vec::with_capacity(probes.len());
        for seq in &probes.sequences {
            let mut x = fw.embed(&seq.tokens)?;
            let mut inputs = Vec::with_capacity(fw.n_layers());
            for l in 0..fw.n_layers() {
                inputs.push(x.clone());
                fw.layer(l, &mut x, None, &mut NoKvHook);
            }
            parent_final.push(fw.final_hidden(&x));
            layer_inputs.push(inputs);
        }
        Ok(Self { params, parent_arch, layer_inputs, parent_final })
    }

    pub fn parent_arch(&self) -> &ArchitectureSpec {
        &self.parent_arch
    }

    /// Per-probe MSE of final hidden states between the parent and `arch`,
    /// where `arch` may differ from the parent only at `layer` and later.
    pub fn score(&self, layer: usize, arch: &ArchitectureSpec) -> Result<Vec<f64>> {
        if self.parent_arch.layers[..layer] != arch.layers[..layer] {
            return Err(Error::InvalidArchitecture(format!(
                "replacement differs from the parent before layer {layer}"
            )));
        }
        let fw = Forward::new(self.params, arch)?;
        Ok(self
            .layer_inputs
            .iter()
            .zip(&self.parent_final)
            .map(|(inputs, parent)| {
                let mut x = inputs[layer].clone();
                for l in layer..fw.n_layers() {
                    fw.layer(l, &mut x, None, &mut NoKvHook);
                }
                tensor::mse(&fw.final_hidden(&x).data, &parent.data)
            })
            .collect())
    }

    pub fn score_variant(
        &self,
        library: &BlockLibrary,
        ranking: &ExpertRanking,
        layer: usize,
        variant: &VariantId,
    ) -> Result<Vec<f64>> {
        let arch = swap_in(&self.parent_arch, library, ranking, layer, variant)?;
        self.score(layer, &arch)
    }
}

/// The parent architecture with only `(layer, variant)` replaced.
pub fn swap_in(
    parent: &ArchitectureSpec,
    library: &BlockLibrary,
    ranking: &ExpertRanking,
    layer: usize,
    variant: &VariantId,
) -> Result<ArchitectureSpec> {
    let unknown = || Error::UnknownVariant { layer, variant: variant.to_string() };
    match library.variant(layer, variant).ok_or_else(unknown)? {
        Subblock::Attention(a) => Ok(parent.clone().with_attention(layer, a)),
        Subblock::Ffn { experts_kept } => {
            let rank = ranking.layers.get(layer).ok_or_else(unknown)?;
            Ok(parent.clone().with_keep_set(layer, rank.keep_set(experts_kept)))
        }
    }
}

/// Per-sample activation MSE at the LM-head input when only `(layer, variant)`
/// is swapped into the parent.
pub fn replace_one_block_score(
    params: &ModelParams,
    library: &BlockLibrary,
    ranking: &ExpertRanking,
    layer: usize,
    variant: &VariantId,
    probes: &ProbeSet,
) -> Result<Vec<f64>> {
    ReplaceOneScorer::new(params, probes)?.score_variant(library, ranking, layer, variant)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerImportance {
    pub layer: usize,
    pub mean_rank: f64,
}

/// Ranks layers within each sample (rank 1 = largest score, ties to the lower
/// layer index) and averages the ranks. Output is sorted most important first.
pub fn rank_average(per_sample: &BTreeMap<usize, Vec<f64>>) -> Result<Vec<LayerImportance>> {
    let n = match per_sample.values().next() {
        Some(v) => v.len(),
        None => return Ok(Vec::new()),
    };
    if let Some((l, v)) = per_sample.iter().find(|(_, v)| v.len() != n) {
        return Err(Error::RaggedSamples(format!("layer {l} has {} samples, expected {n}", v.len())));
    }
    if n == 0 {
        return Err(Error::RaggedSamples("no samples".into()));
    }
    let layers: Vec<usize> = per_sample.keys().copied().collect();
    let mut rank_sums = vec![0.0f64; layers.len()];
    let mut order: Vec<usize> = (0..layers.len()).collect();
    for s in 0..n {
        let score = |i: usize| per_sample[&layers[i]][s];
        order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(layers[a].cmp(&layers[b])));
        for (rank, &i) in order.iter().enumerate() {
            rank_sums[i] += (rank + 1) as f64;
        }
    }
    let mut out: Vec<LayerImportance> = layers
        .iter()
        .zip(rank_sums)
        .map(|(&layer, sum)| LayerImportance { layer, mean_rank: sum / n as f64 })
        .collect();
    out.sort_by(|a, b| a.mean_rank.total_cmp(&b.mean_rank).then(a.layer.cmp(&b.layer)));
    Ok(out)
}

/// Fraction of retrieval queries whose greedy next token is the planted value.
pub fn long_context_task_score(
    params: &ModelParams,
    arch: &ArchitectureSpec,
    task: &ProbeSet,
) -> Result<f64> {
    task.validate_retrieval()?;
    if task.is_empty() {
        return Err(Error::EmptyProbes);
    }
    let fw = Forward::new(params, arch)?;
    let mut correct = 0usize;
    for seq in &task.sequences {
        let trace = fw.run(&seq.tokens, &BTreeSet::new(), &mut NoKvHook)?;
        let last = trace.logits.row(trace.logits.rows - 1);
        if Some(tensor::argmax(last) as u32) == seq.answer {
            correct += 1;
        }
    }
    Ok(correct as f64 / task.len() as f64)
}

/// Raw `parent − variant` task accuracy; may be negative.
pub fn task_drop(
    params: &ModelParams,
    parent: &ArchitectureSpec,
    variant: &ArchitectureSpec,
    task: &ProbeSet,
) -> Result<f64> {
    Ok(long_context_task_score(params, parent, task)? - long_context_task_score(params, variant, task)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub layer: usize,
    pub variant: VariantId,
    pub signal: ScoreSignal,
    /// Non-negative degradation consumed by the search.
    pub degradation: f64,
    /// Signed value before clamping (equal to `degradation` for activation MSE).
    pub raw: f64,
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub entries: Vec<ScoreEntry>,
}

impl ScoreTable {
    pub fn get(&self, layer: usize, variant: &VariantId, signal: ScoreSignal) -> Option<&ScoreEntry> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && &e.variant == variant && e.signal == signal)
    }

    pub fn push(&mut self, entry: ScoreEntry) {
        self.entries.push(entry);
    }

    pub fn filter(&self, signal: ScoreSignal) -> ScoreTable {
        ScoreTable {
            entries: self.entries.iter().filter(|e| e.signal == signal).cloned().collect(),
        }
    }

    pub fn merge(mut self, other: ScoreTable) -> ScoreTable {
        self.entries.extend(other.entries);
        self
    }

    /// Sets an entry, replacing any existing one with the same key.
    pub fn set(&mut self, layer: usize, variant: VariantId, signal: ScoreSignal, degradation: f64) {
        self.entries.retain(|e| !(e.layer == layer && e.variant == variant && e.signal == signal));
        self.entries.push(ScoreEntry {
            layer,
            variant,
            signal,
            degradation,
            raw: degradation,
            n_samples: 0,
            per_sample: None,
        });
    }

    /// A table covering every library variant with degradations from `f`:
    /// attention variants under `attention_signal`, FFN variants under
    /// activation MSE.
    pub fn from_fn(
        library: &BlockLibrary,
        attention_signal: ScoreSignal,
        mut f: impl FnMut(usize, &Subblock) -> f64,
    ) -> ScoreTable {
        let mut table = ScoreTable::default();
        for (l, layer) in library.layers.iter().enumerate() {
            for a in &layer.attention {
                let d = f(l, &Subblock::Attention(a.variant));
                table.set(l, a.id.clone(), attention_signal, d);
            }
            for o in &layer.ffn {
                let d = f(l, &Subblock::Ffn { experts_kept: o.experts_kept });
                table.set(l, o.id.clone(), ScoreSignal::ActivationMse, d);
            }
        }
        table
    }

    /// One JSON record per line.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for e in &self.entries {
            serde_json::to_writer(&mut w, e).map_err(|err| Error::json(path, err))?;
            w.write_all(b"\n").map_err(|err| Error::io(path, err))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
        }
        Ok(Self { entries })
    }
}

/// Which signals to compute for attention variants. FFN variants always get
/// activation MSE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionSignals {
    Both,
    ActivationMse,
    TaskDrop,
}

impl AttentionSignals {
    fn wants(&self, signal: ScoreSignal) -> bool {
        matches!(
            (self, signal),
            (AttentionSignals::Both, _)
                | (AttentionSignals::ActivationMse, ScoreSignal::ActivationMse)
                | (AttentionSignals::TaskDrop, ScoreSignal::TaskDrop)
        )
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Scores every library variant. `task` is required whenever the attention
/// signals include the task drop.
pub fn score_library(
    params: &ModelParams,
    library: &BlockLibrary,
    ranking: &ExpertRanking,
    lm_probes: &ProbeSet,
    task: Option<&ProbeSet>,
    attention: AttentionSignals,
) -> Result<ScoreTable> {
    if library.layers.len() != params.layers.len() {
        return Err(Error::InvalidLibrary(format!(
            "library has {} layers, model has {}",
            library.layers.len(),
            params.layers.len()
        )));
    }
    let scorer = ReplaceOneScorer::new(params, lm_probes)?;
    let mut table = ScoreTable::default();
    let mse_entry = |layer: usize, id: &VariantId, per_sample: Vec<f64>| {
        let degradation = mean(&per_sample);
        ScoreEntry {
            layer,
            variant: id.clone(),
            signal: ScoreSignal::ActivationMse,
            degradation,
            raw: degradation,
            n_samples: per_sample.len(),
            per_sample: Some(per_sample),
        }
    };
    for (l, lib) in library.layers.iter().enumerate() {
        for opt in &lib.ffn {
            let scores = scorer.score_variant(library, ranking, l, &opt.id)?;
            table.push(mse_entry(l, &opt.id, scores));
        }
        if attention.wants(ScoreSignal::ActivationMse) {
            for opt in &lib.attention {
                let scores = scorer.score_variant(library, ranking, l, &opt.id)?;
                table.push(mse_entry(l, &opt.id, scores));
            }
        }
    }
    if attention.wants(ScoreSignal::TaskDrop) {
        let task = task.ok_or_else(|| Error::InvalidInput("task-drop scoring needs a retrieval task".into()))?;
        let parent_arch = scorer.parent_arch();
        let parent_acc = long_context_task_score(params, parent_arch, task)?;
        for (l, lib) in library.layers.iter().enumerate() {
            for opt in &lib.attention {
                let arch = swap_in(parent_arch, library, ranking, l, &opt.id)?;
                let raw = if &arch == parent_arch {
                    0.0
                } else {
                    parent_acc - long_context_task_score(params, &arch, task)?
                };
                table.push(ScoreEntry {
                    layer: l,
                    variant: opt.id.clone(),
                    signal: ScoreSignal::TaskDrop,
                    degradation: raw.max(0.0),
                    raw,
                    n_samples: task.len(),
                    per_sample: None,
                });
            }
        }
    }
    Ok(table)
}
