//! Block library, expert rankings, architecture specs and child assembly.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{AttentionVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::model::{ModelParams, MoeParams};

/// Per-layer choice of the search output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub attention: AttentionVariant,
    pub experts_kept: usize,
    /// Kept parent expert ids, most important first when filled from a ranking.
    pub expert_keep_set: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub layers: Vec<LayerSpec>,
}

impl ArchitectureSpec {
    /// The parent layout with every expert kept.
    pub fn parent(config: &ModelConfig) -> Self {
        Self {
            layers: config
                .attn_pattern
                .iter()
                .map(|&attention| LayerSpec {
                    attention,
                    experts_kept: config.n_experts,
                    expert_keep_set: (0..config.n_experts).collect(),
                })
                .collect(),
        }
    }

    /// The layout the parameters themselves describe: their attention pattern
    /// and whichever experts they contain.
    pub fn from_params(params: &ModelParams) -> Self {
        Self {
            layers: params
                .config
                .attn_pattern
                .iter()
                .zip(&params.layers)
                .map(|(&attention, layer)| LayerSpec {
                    attention,
                    experts_kept: layer.moe.expert_ids.len(),
                    expert_keep_set: layer.moe.expert_ids.clone(),
                })
                .collect(),
        }
    }

    pub fn with_attention(mut self, layer: usize, attention: AttentionVariant) -> Self {
        self.layers[layer].attention = attention;
        self
    }

    pub fn with_keep_set(mut self, layer: usize, keep: Vec<usize>) -> Self {
        self.layers[layer].experts_kept = keep.len();
        self.layers[layer].expert_keep_set = keep;
        self
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.n_layers {
            return Err(Error::InvalidArchitecture(format!(
                "{} layers in spec, model has {}",
                self.layers.len(),
                config.n_layers
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if let AttentionVariant::Window { window: 0 } = layer.attention {
                return Err(Error::InvalidArchitecture(format!("layer {l}: window size 0")));
            }
            let set = &layer.expert_keep_set;
            if layer.experts_kept != set.len() {
                return Err(Error::InvalidArchitecture(format!(
                    "layer {l}: experts_kept {} but keep set has {} entries",
                    layer.experts_kept,
                    set.len()
                )));
            }
            if set.len() > config.n_experts || set.len() < config.top_k {
                return Err(Error::InvalidArchitecture(format!(
                    "layer {l}: keeps {} experts, need between top_k {} and {}",
                    set.len(),
                    config.top_k,
                    config.n_experts
                )));
            }
            let unique: BTreeSet<_> = set.iter().collect();
            if unique.len() != set.len() || set.iter().any(|&e| e >= config.n_experts) {
                return Err(Error::InvalidArchitecture(format!(
                    "layer {l}: keep set has duplicate or out-of-range ids"
                )));
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        save_json(path.as_ref(), self)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        load_json(path.as_ref())
    }
}

pub(crate) fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Library identifier of a subblock variant, e.g. `attn/window-32` or `ffn/experts-8`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VariantId(pub String);

impl VariantId {
    pub fn attention(v: &AttentionVariant) -> Self {
        VariantId(format!("attn/{v}"))
    }

    pub fn ffn(experts_kept: usize) -> Self {
        VariantId(format!("ffn/experts-{experts_kept}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Parent,
    Alternative,
}

/// One candidate subblock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subblock {
    Attention(AttentionVariant),
    Ffn { experts_kept: usize },
}

impl Subblock {
    pub fn id(&self) -> VariantId {
        match self {
            Subblock::Attention(v) => VariantId::attention(v),
            Subblock::Ffn { experts_kept } => VariantId::ffn(*experts_kept),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionOption {
    pub id: VariantId,
    pub variant: AttentionVariant,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnOption {
    pub id: VariantId,
    pub experts_kept: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLibrary {
    pub attention: Vec<AttentionOption>,
    pub ffn: Vec<FfnOption>,
}

impl LayerLibrary {
    pub fn parent_attention(&self) -> &AttentionOption {
        self.attention
            .iter()
            .find(|o| o.provenance == Provenance::Parent)
            .expect("library layer has a parent attention block")
    }

    pub fn parent_ffn(&self) -> &FfnOption {
        self.ffn
            .iter()
            .find(|o| o.provenance == Provenance::Parent)
            .expect("library layer has a parent FFN block")
    }
}

/// Configuration of the candidate menu.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryMenu {
    /// Fractions of the parent expert count to offer, each in (0, 1].
    pub keep_fractions: Vec<f64>,
    /// Window size offered as an alternative to every global layer.
    pub window_alternative: Option<usize>,
}

impl LibraryMenu {
    pub fn toy() -> Self {
        Self {
            keep_fractions: vec![0.25, 0.5, 1.0],
            window_alternative: Some(32),
        }
    }

    /// Keep counts this menu yields for `n_experts`, ascending, parent count included.
    pub fn keep_counts(&self, n_experts: usize, top_k: usize) -> Result<Vec<usize>> {
        let mut counts = BTreeSet::from([n_experts]);
        for &f in &self.keep_fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidLibrary(format!("keep fraction {f} outside (0, 1]")));
            }
            let c = (f * n_experts as f64).round() as usize;
            if c < top_k {
                return Err(Error::InvalidLibrary(format!(
                    "keep fraction {f} yields {c} experts, below top_k {top_k}"
                )));
            }
            counts.insert(c);
        }
        Ok(counts.into_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockLibrary {
    pub layers: Vec<LayerLibrary>,
}

impl BlockLibrary {
    pub fn variant(&self, layer: usize, id: &VariantId) -> Option<Subblock> {
        let lib = self.layers.get(layer)?;
        lib.attention
            .iter()
            .find(|o| &o.id == id)
            .map(|o| Subblock::Attention(o.variant))
            .or_else(|| {
                lib.ffn
                    .iter()
                    .find(|o| &o.id == id)
                    .map(|o| Subblock::Ffn { experts_kept: o.experts_kept })
            })
    }

    pub fn n_variants(&self) -> usize {
        self.layers.iter().map(|l| l.attention.len() + l.ffn.len()).sum()
    }
}

/// Enumerates per-layer candidates: every global layer gains the menu's
/// window alternative, every layer gets one FFN option per keep count.
pub fn build_library(config: &ModelConfig, menu: &LibraryMenu) -> Result<BlockLibrary> {
    config.validate()?;
    if menu.window_alternative == Some(0) {
        return Err(Error::InvalidLibrary("alternative window size must be at least 1".into()));
    }
    let counts = menu.keep_counts(config.n_experts, config.top_k)?;
    let layers = config
        .attn_pattern
        .iter()
        .map(|&parent| {
            let mut attention = vec![AttentionOption {
                id: VariantId::attention(&parent),
                variant: parent,
                provenance: Provenance::Parent,
            }];
            if let (AttentionVariant::Global, Some(w)) = (parent, menu.window_alternative) {
                let alt = AttentionVariant::window(w);
                attention.push(AttentionOption {
                    id: VariantId::attention(&alt),
                    variant: alt,
                    provenance: Provenance::Alternative,
                });
            }
            let ffn = counts
                .iter()
                .map(|&c| FfnOption {
                    id: VariantId::ffn(c),
                    experts_kept: c,
                    provenance: if c == config.n_experts {
                        Provenance::Parent
                    } else {
                        Provenance::Alternative
                    },
                })
                .collect();
            LayerLibrary { attention, ffn }
        })
        .collect();
    Ok(BlockLibrary { layers })
}

/// Experts of one layer ordered by importance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRanking {
    /// Expert ids, most important first.
    pub order: Vec<usize>,
    /// Contribution score indexed by expert id.
    pub scores: Vec<f64>,
}

impl LayerRanking {
    /// Sorts by score descending; equal scores keep the lower expert id first.
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Self { order, scores }
    }

    /// The `count` most important experts.
    pub fn keep_set(&self, count: usize) -> Vec<usize> {
        self.order[..count.min(self.order.len())].to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRanking {
    pub layers: Vec<LayerRanking>,
}

impl ExpertRanking {
    /// Ranking that orders experts by id, for runs without contribution scores.
    pub fn identity(config: &ModelConfig) -> Self {
        Self {
            layers: (0..config.n_layers)
                .map(|_| LayerRanking::from_scores(vec![0.0; config.n_experts]))
                .collect(),
        }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        save_json(path.as_ref(), self)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        load_json(path.as_ref())
    }
}

/// Copy of `moe` restricted to `keep_set`. Kept experts retain their parent
/// order and bit-identical weights; router rows of removed experts are dropped.
pub fn prune_layer(moe: &MoeParams, keep_set: &[usize], top_k: usize) -> Result<MoeParams> {
    if keep_set.is_empty() {
        return Err(Error::InvalidKeepSet("empty keep set".into()));
    }
    if keep_set.len() < top_k {
        return Err(Error::InvalidKeepSet(format!(
            "keeps {} experts, fewer than top_k {top_k}",
            keep_set.len()
        )));
    }
    let wanted: BTreeSet<usize> = keep_set.iter().copied().collect();
    if wanted.len() != keep_set.len() {
        return Err(Error::InvalidKeepSet("duplicate expert id".into()));
    }
    if let Some(missing) = wanted.iter().find(|id| !moe.expert_ids.contains(id)) {
        return Err(Error::InvalidKeepSet(format!("expert {missing} not present in layer")));
    }
    let local: Vec<usize> = (0..moe.n_local())
        .filter(|&j| wanted.contains(&moe.expert_ids[j]))
        .collect();
    let d = moe.router.cols;
    let mut router = crate::tensor::Matrix::zeros(local.len(), d);
    for (r, &j) in local.iter().enumerate() {
        router.row_mut(r).copy_from_slice(moe.router.row(j));
    }
    Ok(MoeParams {
        norm: moe.norm.clone(),
        router,
        router_bias: local.iter().map(|&j| moe.router_bias[j]).collect(),
        experts: local.iter().map(|&j| moe.experts[j].clone()).collect(),
        expert_ids: local.iter().map(|&j| moe.expert_ids[j]).collect(),
    })
}

/// Builds the child model: per layer keeps the top `experts_kept` experts of
/// `ranking` and installs the chosen attention variant. Returns the child and
/// the architecture with keep sets filled in from the ranking.
pub fn assemble(
    parent: &ModelParams,
    ranking: &ExpertRanking,
    spec: &ArchitectureSpec,
) -> Result<(ModelParams, ArchitectureSpec)> {
    let cfg = &parent.config;
    if spec.layers.len() != cfg.n_layers || ranking.layers.len() != cfg.n_layers {
        return Err(Error::InvalidArchitecture(format!(
            "spec has {} layers, ranking {}, parent {}",
            spec.layers.len(),
            ranking.layers.len(),
            cfg.n_layers
        )));
    }
    let mut filled = spec.clone();
    let mut child = parent.clone();
    for (l, layer) in filled.layers.iter_mut().enumerate() {
        let rank = &ranking.layers[l];
        if rank.order.len() != parent.layers[l].moe.n_local() {
            return Err(Error::InvalidArchitecture(format!(
                "layer {l}: ranking covers {} experts, parent layer has {}",
                rank.order.len(),
                parent.layers[l].moe.n_local()
            )));
        }
        if layer.experts_kept > rank.order.len() {
            return Err(Error::InvalidArchitecture(format!(
                "layer {l}: keeps {} of {} experts",
                layer.experts_kept,
                rank.order.len()
            )));
        }
        layer.expert_keep_set = rank.keep_set(layer.experts_kept);
        child.layers[l].moe = prune_layer(&parent.layers[l].moe, &layer.expert_keep_set, cfg.top_k)?;
        child.config.attn_pattern[l] = layer.attention;
    }
    filled.validate(cfg)?;
    Ok((child, filled))
}
