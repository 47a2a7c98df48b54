//! Model configuration and attention variants.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How far back a layer's attention can see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionVariant {
    Global,
    /// Attends to the most recent `window` positions, the query position included.
    Window { window: usize },
}

impl AttentionVariant {
    pub fn window(window: usize) -> Self {
        AttentionVariant::Window { window }
    }

    /// Number of cached positions this layer needs at context length `context_len`.
    pub fn effective_span(&self, context_len: usize) -> usize {
        match *self {
            AttentionVariant::Global => context_len,
            AttentionVariant::Window { window } => window.min(context_len),
        }
    }

    /// True when key position `key` is visible from query position `query`.
    #[inline]
    pub fn visible(&self, query: usize, key: usize) -> bool {
        key <= query
            && match *self {
                AttentionVariant::Global => true,
                AttentionVariant::Window { window } => query - key < window,
            }
    }

    pub fn is_global(&self) -> bool {
        matches!(self, AttentionVariant::Global)
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionVariant::Global => write!(f, "global"),
            AttentionVariant::Window { window } => write!(f, "window-{window}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    /// YaRN-style context extension factor; 1.0 leaves the rotary angles untouched.
    pub rope_scale_factor: f64,
    pub attn_pattern: Vec<AttentionVariant>,
}

impl ModelConfig {
    /// The desk-scale parent: 8 layers alternating `Window(4)` and `Global`,
    /// 16 experts with top-2 routing.
    pub fn toy() -> Self {
        let n_layers = 8;
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            n_experts: 16,
            top_k: 2,
            expert_hidden: 64,
            max_seq_len: 256,
            rope_base: 10_000.0,
            rope_scale_factor: 1.0,
            attn_pattern: alternating_pattern(n_layers, 4),
        }
    }

    /// Published shape of the 120B open-weights parent (36 layers alternating
    /// 128-token windows and global attention). Used for cost arithmetic only.
    pub fn gpt_oss_120b() -> Self {
        let n_layers = 36;
        Self {
            vocab_size: 201_088,
            d_model: 2880,
            n_layers,
            n_heads: 64,
            n_kv_heads: 8,
            head_dim: 64,
            n_experts: 128,
            top_k: 4,
            expert_hidden: 2880,
            max_seq_len: 131_072,
            rope_base: 150_000.0,
            rope_scale_factor: 32.0,
            attn_pattern: alternating_pattern(n_layers, 128),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts: [(&'static str, usize); 9] = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("n_experts", self.n_experts),
            ("top_k", self.top_k),
            ("expert_hidden", self.expert_hidden),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(invalid(field, "must be at least 1"));
            }
        }
        if self.max_seq_len == 0 {
            return Err(invalid("max_seq_len", "must be at least 1"));
        }
        if self.top_k > self.n_experts {
            return Err(invalid(
                "top_k",
                format!("{} exceeds n_experts {}", self.top_k, self.n_experts),
            ));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(invalid(
                "n_kv_heads",
                format!("{} does not divide n_heads {}", self.n_kv_heads, self.n_heads),
            ));
        }
        if self.head_dim % 2 != 0 {
            return Err(invalid("head_dim", "must be even for rotary pairs"));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return Err(invalid("rope_base", "must be finite and > 1"));
        }
        if !(self.rope_scale_factor.is_finite() && self.rope_scale_factor >= 1.0) {
            return Err(invalid("rope_scale_factor", "must be finite and >= 1"));
        }
        if self.attn_pattern.len() != self.n_layers {
            return Err(invalid(
                "attn_pattern",
                format!("{} entries for {} layers", self.attn_pattern.len(), self.n_layers),
            ));
        }
        if self
            .attn_pattern
            .iter()
            .any(|a| matches!(a, AttentionVariant::Window { window: 0 }))
        {
            return Err(invalid("attn_pattern", "window size must be at least 1"));
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn q_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// Parameters of one expert (gate, up and down projections).
    pub fn expert_params(&self) -> usize {
        3 * self.d_model * self.expert_hidden
    }

    /// Parameters of one attention subblock including its norm.
    pub fn attention_params(&self) -> usize {
        2 * self.d_model * self.q_dim() + 2 * self.d_model * self.kv_dim() + self.d_model
    }

    /// Non-expert MoE parameters for `kept` experts: router rows, router bias, norm.
    pub fn moe_shared_params(&self, kept: usize) -> usize {
        kept * self.d_model + kept + self.d_model
    }
}

/// `Window(window)` on even layers and `Global` on odd layers.
pub fn alternating_pattern(n_layers: usize, window: usize) -> Vec<AttentionVariant> {
    (0..n_layers)
        .map(|l| {
            if l % 2 == 0 {
                AttentionVariant::window(window)
            } else {
                AttentionVariant::Global
            }
        })
        .collect()
}

fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidConfig {
        field,
        reason: reason.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_is_valid() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::gpt_oss_120b().validate().unwrap();
    }

    #[test]
    fn top_k_above_experts_names_field() {
        let mut cfg = ModelConfig::toy();
        cfg.top_k = 17;
        match cfg.validate() {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "top_k"),
            other => panic!("expected top_k error, got {other:?}"),
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut cfg = ModelConfig::toy();
        cfg.n_kv_heads = 3;
        assert!(matches!(
            cfg.validate(),
            Err(Error::InvalidConfig { field: "n_kv_heads", .. })
        ));
    }

    #[test]
    fn odd_head_dim_rejected() {
        let mut cfg = ModelConfig::toy();
        cfg.head_dim = 15;
        assert!(matches!(
            cfg.validate(),
            Err(Error::InvalidConfig { field: "head_dim", .. })
        ));
    }

    #[test]
    fn window_counts_query_position() {
        let w = AttentionVariant::window(4);
        assert!(w.visible(10, 7));
        assert!(!w.visible(10, 6));
        assert!(!w.visible(3, 4));
        assert_eq!(w.effective_span(2), 2);
        assert_eq!(AttentionVariant::Global.effective_span(99), 99);
    }

    #[test]
    fn variant_json_shape() {
        let s = serde_json::to_string(&AttentionVariant::window(8192)).unwrap();
        assert_eq!(s, r#"{"kind":"window","window":8192}"#);
        let g: AttentionVariant = serde_json::from_str(r#"{"kind":"global"}"#).unwrap();
        assert_eq!(g, AttentionVariant::Global);
    }
}
