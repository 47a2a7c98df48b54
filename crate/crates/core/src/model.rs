//! Deterministic toy decoder-only MoE transformer (forward pass only).
//!
//! Pre-norm residual blocks: `x += attn(norm(x)); x += moe(norm(x))`, a final
//! norm, then an untied LM head. Attention is grouped-query with rotary
//! position embeddings; each layer's span comes from the [`ArchitectureSpec`]
//! passed to the forward call, not from the parameters.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{AttentionVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::library::ArchitectureSpec;
use crate::rng;
use crate::tensor::{self, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    /// `[expert_hidden × d_model]`
    pub gate: Matrix,
    /// `[expert_hidden × d_model]`
    pub up: Matrix,
    /// `[d_model × expert_hidden]`
    pub down: Matrix,
}

impl Expert {
    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        let g = self.gate.matvec(x);
        let u = self.up.matvec(x);
        let act: Vec<f32> = g.iter().zip(&u).map(|(&g, &u)| tensor::silu(g) * u).collect();
        self.down.matvec(&act)
    }

    fn param_count(&self) -> usize {
        self.gate.data.len() + self.up.data.len() + self.down.data.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

/// An MoE feed-forward subblock. `experts[j]` is the parent expert
/// `expert_ids[j]`; router rows follow the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams {
    pub norm: Vec<f32>,
    pub router: Matrix,
    pub router_bias: Vec<f32>,
    pub experts: Vec<Expert>,
    pub expert_ids: Vec<usize>,
}

impl MoeParams {
    pub fn n_local(&self) -> usize {
        self.experts.len()
    }

    /// Top-k routing over the allowed experts. Returns `(local index, weight)`
    /// pairs ordered by router logit (ties to the lower expert id); weights
    /// are a softmax over the selected logits only.
    pub fn route(&self, x: &[f32], allowed: &[bool], top_k: usize) -> Vec<(usize, f32)> {
        let mut cands: Vec<(usize, f32)> = (0..self.n_local())
            .filter(|&j| allowed[j])
            .map(|j| (j, tensor::dot(self.router.row(j), x) + self.router_bias[j]))
            .collect();
        cands.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.expert_ids[a.0].cmp(&self.expert_ids[b.0]))
        });
        cands.truncate(top_k);
        let mut w: Vec<f32> = cands.iter().map(|c| c.1).collect();
        tensor::softmax_in_place(&mut w);
        cands.iter().zip(w).map(|(c, w)| (c.0, w)).collect()
    }

    pub fn forward_token(&self, x: &[f32], allowed: &[bool], top_k: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; x.len()];
        for (j, w) in self.route(x, allowed, top_k) {
            let y = self.experts[j].forward(x);
            for (o, v) in out.iter_mut().zip(y) {
                *o += w * v;
            }
        }
        out
    }

    pub fn all_allowed(&self) -> Vec<bool> {
        vec![true; self.n_local()]
    }

    pub fn expert_param_count(&self) -> usize {
        self.experts.iter().map(Expert::param_count).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attention: AttentionParams,
    pub moe: MoeParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `[vocab × d_model]`
    pub embedding: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_norm: Vec<f32>,
    /// `[vocab × d_model]`
    pub lm_head: Matrix,
}

/// Stream ids: 0 = embedding, 1 = LM head, then one block of ids per layer.
fn layer_stream(layer: usize, local: u64) -> u64 {
    ((layer as u64 + 1) << 32) | local
}

fn uniform(seed: u64, stream: u64, rows: usize, cols: usize, scale: f32) -> Matrix {
    Matrix::from_vec(rows, cols, rng::uniform_vec(seed, stream, rows * cols, scale))
}

fn fan_in_scale(fan_in: usize) -> f32 {
    1.0 / (fan_in as f32).sqrt()
}

/// Builds parameters by scaled-uniform init: each weight is drawn from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, norms start at 1, router bias at 0.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let d = config.d_model;
    let (qd, kvd, h, e) = (config.q_dim(), config.kv_dim(), config.expert_hidden, config.n_experts);
    let layers = (0..config.n_layers)
        .map(|l| {
            let s = |local| layer_stream(l, local);
            let attention = AttentionParams {
                norm: vec![1.0; d],
                wq: uniform(seed, s(0), qd, d, fan_in_scale(d)),
                wk: uniform(seed, s(1), kvd, d, fan_in_scale(d)),
                wv: uniform(seed, s(2), kvd, d, fan_in_scale(d)),
                wo: uniform(seed, s(3), d, qd, fan_in_scale(qd)),
            };
            let experts = (0..e)
                .map(|x| {
                    let base = 16 + 3 * x as u64;
                    Expert {
                        gate: uniform(seed, s(base), h, d, fan_in_scale(d)),
                        up: uniform(seed, s(base + 1), h, d, fan_in_scale(d)),
                        down: uniform(seed, s(base + 2), d, h, fan_in_scale(h)),
                    }
                })
                .collect();
            let moe = MoeParams {
                norm: vec![1.0; d],
                router: uniform(seed, s(4), e, d, fan_in_scale(d)),
                router_bias: vec![0.0; e],
                experts,
                expert_ids: (0..e).collect(),
            };
            LayerParams { attention, moe }
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        embedding: uniform(seed, 0, config.vocab_size, d, 1.0),
        layers,
        final_norm: vec![1.0; d],
        lm_head: uniform(seed, 1, config.vocab_size, d, fan_in_scale(d)),
    })
}

impl ModelParams {
    /// Every tensor in serialization order as `(name, shape, values)`.
    pub fn tensors(&self) -> Vec<(String, (usize, usize), &[f32])> {
        let mut out: Vec<(String, (usize, usize), &[f32])> = Vec::new();
        let vec_shape = |v: &Vec<f32>| (1, v.len());
        out.push(("embedding".into(), self.embedding.shape(), &self.embedding.data));
        for (l, layer) in self.layers.iter().enumerate() {
            let a = &layer.attention;
            out.push((format!("layers.{l}.attn.norm"), vec_shape(&a.norm), &a.norm));
            out.push((format!("layers.{l}.attn.wq"), a.wq.shape(), &a.wq.data));
            out.push((format!("layers.{l}.attn.wk"), a.wk.shape(), &a.wk.data));
            out.push((format!("layers.{l}.attn.wv"), a.wv.shape(), &a.wv.data));
            out.push((format!("layers.{l}.attn.wo"), a.wo.shape(), &a.wo.data));
            let m = &layer.moe;
            out.push((format!("layers.{l}.moe.norm"), vec_shape(&m.norm), &m.norm));
            out.push((format!("layers.{l}.moe.router"), m.router.shape(), &m.router.data));
            out.push((format!("layers.{l}.moe.router_bias"), vec_shape(&m.router_bias), &m.router_bias));
            for (ex, id) in m.experts.iter().zip(&m.expert_ids) {
                out.push((format!("layers.{l}.moe.experts.{id}.gate"), ex.gate.shape(), &ex.gate.data));
                out.push((format!("layers.{l}.moe.experts.{id}.up"), ex.up.shape(), &ex.up.data));
                out.push((format!("layers.{l}.moe.experts.{id}.down"), ex.down.shape(), &ex.down.data));
            }
        }
        out.push(("final_norm".into(), vec_shape(&self.final_norm), &self.final_norm));
        out.push(("lm_head".into(), self.lm_head.shape(), &self.lm_head.data));
        out
    }

    /// Mutable views of every tensor, in the same order as [`Self::tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out: Vec<&mut Vec<f32>> = vec![&mut self.embedding.data];
        for layer in &mut self.layers {
            let a = &mut layer.attention;
            out.push(&mut a.norm);
            out.push(&mut a.wq.data);
            out.push(&mut a.wk.data);
            out.push(&mut a.wv.data);
            out.push(&mut a.wo.data);
            let m = &mut layer.moe;
            out.push(&mut m.norm);
            out.push(&mut m.router.data);
            out.push(&mut m.router_bias);
            for ex in &mut m.experts {
                out.push(&mut ex.gate.data);
                out.push(&mut ex.up.data);
                out.push(&mut ex.down.data);
            }
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head.data);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn expert_param_count(&self) -> usize {
        self.layers.iter().map(|l| l.moe.expert_param_count()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.2.iter().all(|v| v.is_finite()))
    }

    /// Little-endian f32 bytes of every tensor, concatenated.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let mut out = Vec::with_capacity(4 * tensors.iter().map(|t| t.2.len()).sum::<usize>());
        for (_, _, data) in tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 over the parameter bytes and expert layout.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for layer in &self.layers {
            for id in &layer.moe.expert_ids {
                h.update((*id as u64).to_le_bytes());
            }
        }
        h.update(self.to_le_bytes());
        hex::encode(h.finalize())
    }

    /// Writes `<stem>.bin` (flat little-endian f32) and `<stem>.json` (shape manifest).
    pub fn save(&self, bin_path: impl AsRef<Path>, manifest_path: impl AsRef<Path>) -> Result<()> {
        let (bin_path, manifest_path) = (bin_path.as_ref(), manifest_path.as_ref());
        let mut offset = 0usize;
        let tensors = self
            .tensors()
            .into_iter()
            .map(|(name, shape, data)| {
                let t = TensorEntry { name, shape: [shape.0, shape.1], offset, len: data.len() };
                offset += data.len();
                t
            })
            .collect();
        let manifest = ParamsManifest {
            config: self.config.clone(),
            expert_ids: self.layers.iter().map(|l| l.moe.expert_ids.clone()).collect(),
            tensors,
        };
        std::fs::write(bin_path, self.to_le_bytes()).map_err(|e| Error::io(bin_path, e))?;
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(manifest_path, e))?;
        std::fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))
    }

    pub fn load(bin_path: impl AsRef<Path>, manifest_path: impl AsRef<Path>) -> Result<Self> {
        let (bin_path, manifest_path) = (bin_path.as_ref(), manifest_path.as_ref());
        let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: ParamsManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(manifest_path, e))?;
        manifest.config.validate()?;
        let bytes = std::fs::read(bin_path).map_err(|e| Error::io(bin_path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{}: byte length {} is not a multiple of 4",
                bin_path.display(),
                bytes.len()
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut params = skeleton(&manifest.config, &manifest.expert_ids)?;
        let expected: Vec<(String, (usize, usize))> =
            params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected.len() != manifest.tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "manifest lists {} tensors, layout needs {}",
                manifest.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
            if *name != entry.name || [shape.0, shape.1] != entry.shape {
                return Err(Error::ShapeMismatch(format!(
                    "tensor `{}` {:?} does not match expected `{}` {:?}",
                    entry.name, entry.shape, name, shape
                )));
            }
            if entry.offset + entry.len > values.len() {
                return Err(Error::ShapeMismatch(format!("tensor `{}` runs past end of file", entry.name)));
            }
        }
        for (slot, entry) in params.tensors_mut().into_iter().zip(&manifest.tensors) {
            slot.copy_from_slice(&values[entry.offset..entry.offset + entry.len]);
        }
        Ok(params)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamsManifest {
    config: ModelConfig,
    expert_ids: Vec<Vec<usize>>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
    len: usize,
}

/// Zero-filled parameters with the given expert layout.
fn skeleton(config: &ModelConfig, expert_ids: &[Vec<usize>]) -> Result<ModelParams> {
    if expert_ids.len() != config.n_layers {
        return Err(Error::ShapeMismatch(format!(
            "{} expert-id lists for {} layers",
            expert_ids.len(),
            config.n_layers
        )));
    }
    let d = config.d_model;
    let (qd, kvd, h) = (config.q_dim(), config.kv_dim(), config.expert_hidden);
    let layers = expert_ids
        .iter()
        .map(|ids| LayerParams {
            attention: AttentionParams {
                norm: vec![0.0; d],
                wq: Matrix::zeros(qd, d),
                wk: Matrix::zeros(kvd, d),
                wv: Matrix::zeros(kvd, d),
                wo: Matrix::zeros(d, qd),
            },
            moe: MoeParams {
                norm: vec![0.0; d],
                router: Matrix::zeros(ids.len(), d),
                router_bias: vec![0.0; ids.len()],
                experts: ids
                    .iter()
                    .map(|_| Expert {
                        gate: Matrix::zeros(h, d),
                        up: Matrix::zeros(h, d),
                        down: Matrix::zeros(d, h),
                    })
                    .collect(),
                expert_ids: ids.clone(),
            },
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        embedding: Matrix::zeros(config.vocab_size, d),
        layers,
        final_norm: vec![0.0; d],
        lm_head: Matrix::zeros(config.vocab_size, d),
    })
}

/// Elementwise mean of two checkpoints with identical layout.
pub fn average_checkpoints(a: &ModelParams, b: &ModelParams) -> Result<ModelParams> {
    if a.config != b.config {
        return Err(Error::ShapeMismatch("checkpoints have different configs".into()));
    }
    for (l, (la, lb)) in a.layers.iter().zip(&b.layers).enumerate() {
        if la.moe.expert_ids != lb.moe.expert_ids {
            return Err(Error::ShapeMismatch(format!("layer {l} keeps different experts")));
        }
    }
    let mut out = a.clone();
    let others = b.tensors();
    for (dst, (_, _, src)) in out.tensors_mut().into_iter().zip(others) {
        for (x, &y) in dst.iter_mut().zip(src) {
            *x = (*x + y) / 2.0;
        }
    }
    Ok(out)
}

/// Rotary frequencies per dimension pair.
///
/// With `rope_scale_factor == 1` these are exactly `base^(-2i/head_dim)`.
/// Otherwise YaRN interpolation is applied with the original context taken as
/// `max_seq_len / factor`: high-frequency pairs (many periods within the
/// original context) keep their frequency, low-frequency pairs are divided by
/// the factor, and pairs in between are blended linearly.
pub fn rope_frequencies(config: &ModelConfig) -> Vec<f64> {
    const BETA_SLOW: f64 = 1.0;
    const BETA_FAST: f64 = 32.0;
    let half = config.head_dim / 2;
    let base: Vec<f64> = (0..half)
        .map(|i| config.rope_base.powf(-(2.0 * i as f64) / config.head_dim as f64))
        .collect();
    let s = config.rope_scale_factor;
    if s == 1.0 {
        return base;
    }
    let original_ctx = config.max_seq_len as f64 / s;
    base.into_iter()
        .map(|theta| {
            let rotations = original_ctx * theta / (2.0 * PI);
            let keep = ((rotations - BETA_SLOW) / (BETA_FAST - BETA_SLOW)).clamp(0.0, 1.0);
            (1.0 - keep) * theta / s + keep * theta
        })
        .collect()
}

/// Attention-logit temperature that accompanies YaRN scaling.
pub fn rope_attention_scale(config: &ModelConfig) -> f32 {
    let s = config.rope_scale_factor;
    if s == 1.0 {
        1.0
    } else {
        let m = 0.1 * s.ln() + 1.0;
        (m * m) as f32
    }
}

struct RopeTable {
    half: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    fn new(config: &ModelConfig, positions: usize) -> Self {
        let freqs = rope_frequencies(config);
        let half = freqs.len();
        let mut cos = Vec::with_capacity(positions * half);
        let mut sin = Vec::with_capacity(positions * half);
        for p in 0..positions {
            for &f in &freqs {
                let angle = p as f64 * f;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates each `(2i, 2i+1)` pair of every head in `row` by position `pos`.
    fn apply(&self, row: &mut [f32], pos: usize) {
        let (c, s) = (&self.cos[pos * self.half..], &self.sin[pos * self.half..]);
        for head in row.chunks_exact_mut(2 * self.half) {
            for i in 0..self.half {
                let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = x0 * c[i] - x1 * s[i];
                head[2 * i + 1] = x0 * s[i] + x1 * c[i];
            }
        }
    }
}

/// Captured input and output of one MoE subblock, `[seq × d_model]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnCapture {
    pub input: Matrix,
    pub output: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Normalized hidden state fed to the LM head, `[seq × d_model]`.
    pub final_hidden: Matrix,
    /// `[seq × vocab]`
    pub logits: Matrix,
    pub ffn_io: BTreeMap<usize, FfnCapture>,
}

/// Hook that sees (and may rewrite) each layer's post-rotary keys and values
/// before attention reads them.
pub(crate) trait KvHook {
    fn on_kv(&mut self, layer: usize, keys: &mut Matrix, values: &mut Matrix);
}

pub(crate) struct NoKvHook;

impl KvHook for NoKvHook {
    fn on_kv(&mut self, _: usize, _: &mut Matrix, _: &mut Matrix) {}
}

/// A validated (params, arch) pair ready to run.
pub(crate) struct Forward<'a> {
    params: &'a ModelParams,
    arch: &'a ArchitectureSpec,
    allowed: Vec<Vec<bool>>,
    rope: RopeTable,
    attn_scale: f32,
}

impl<'a> Forward<'a> {
    pub(crate) fn new(params: &'a ModelParams, arch: &'a ArchitectureSpec) -> Result<Self> {
        let cfg = &params.config;
        arch.validate(cfg)?;
        let allowed = params
            .layers
            .iter()
            .zip(&arch.layers)
            .enumerate()
            .map(|(l, (layer, spec))| {
                let ids = &layer.moe.expert_ids;
                let mut mask = vec![false; ids.len()];
                for id in &spec.expert_keep_set {
                    match ids.iter().position(|x| x == id) {
                        Some(j) => mask[j] = true,
                        None => {
                            return Err(Error::InvalidArchitecture(format!(
                                "layer {l} keeps expert {id}, which the parameters do not contain"
                            )))
                        }
                    }
                }
                Ok(mask)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params,
            arch,
            allowed,
            rope: RopeTable::new(cfg, cfg.max_seq_len),
            attn_scale: rope_attention_scale(cfg) / (cfg.head_dim as f32).sqrt(),
        })
    }

    pub(crate) fn n_layers(&self) -> usize {
        self.params.layers.len()
    }

    pub(crate) fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        let cfg = &self.params.config;
        if tokens.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if tokens.len() > cfg.max_seq_len {
            return Err(Error::SequenceTooLong { len: tokens.len(), max: cfg.max_seq_len });
        }
        let mut x = Matrix::zeros(tokens.len(), cfg.d_model);
        for (t, &tok) in tokens.iter().enumerate() {
            if tok as usize >= cfg.vocab_size {
                return Err(Error::InvalidInput(format!(
                    "token {tok} at position {t} outside vocab of {}",
                    cfg.vocab_size
                )));
            }
            x.row_mut(t).copy_from_slice(self.params.embedding.row(tok as usize));
        }
        Ok(x)
    }

    fn attention(&self, l: usize, x: &mut Matrix, kv_hook: &mut dyn KvHook) {
        let cfg = &self.params.config;
        let a = &self.params.layers[l].attention;
        let variant: AttentionVariant = self.arch.layers[l].attention;
        let seq = x.rows;
        let mut h = Matrix::zeros(seq, cfg.d_model);
        for t in 0..seq {
            tensor::rms_norm(x.row(t), &a.norm, h.row_mut(t));
        }
        let mut q = a.wq.apply_rows(&h);
        let mut k = a.wk.apply_rows(&h);
        let mut v = a.wv.apply_rows(&h);
        for t in 0..seq {
            self.rope.apply(q.row_mut(t), t);
            self.rope.apply(k.row_mut(t), t);
        }
        kv_hook.on_kv(l, &mut k, &mut v);
        let hd = cfg.head_dim;
        let group = cfg.n_heads / cfg.n_kv_heads;
        let mut out = Matrix::zeros(seq, cfg.q_dim());
        let mut scores = Vec::with_capacity(seq);
        for t in 0..seq {
            let start = t + 1 - variant.effective_span(t + 1);
            for head in 0..cfg.n_heads {
                let kvh = head / group;
                let qh = &q.row(t)[head * hd..(head + 1) * hd];
                scores.clear();
                for j in start..=t {
                    let kh = &k.row(j)[kvh * hd..(kvh + 1) * hd];
                    scores.push(tensor::dot(qh, kh) * self.attn_scale);
                }
                tensor::softmax_in_place(&mut scores);
                let o = &mut out.row_mut(t)[head * hd..(head + 1) * hd];
                for (p, j) in scores.iter().zip(start..=t) {
                    let vh = &v.row(j)[kvh * hd..(kvh + 1) * hd];
                    for (oi, &vi) in o.iter_mut().zip(vh) {
                        *oi += p * vi;
                    }
                }
            }
        }
        let proj = a.wo.apply_rows(&out);
        for (xi, pi) in x.data.iter_mut().zip(&proj.data) {
            *xi += pi;
        }
    }

    /// Normalized MoE input for every position.
    pub(crate) fn moe_input(&self, l: usize, x: &Matrix) -> Matrix {
        let m = &self.params.layers[l].moe;
        let mut h = Matrix::zeros(x.rows, x.cols);
        for t in 0..x.rows {
            tensor::rms_norm(x.row(t), &m.norm, h.row_mut(t));
        }
        h
    }

    /// Runs layer `l` in place on the residual stream `x`.
    pub(crate) fn layer(
        &self,
        l: usize,
        x: &mut Matrix,
        capture: Option<&mut Option<FfnCapture>>,
        kv_hook: &mut dyn KvHook,
    ) {
        self.attention(l, x, kv_hook);
        let m = &self.params.layers[l].moe;
        let top_k = self.params.config.top_k;
        let h = self.moe_input(l, x);
        let mut f = Matrix::zeros(x.rows, x.cols);
        for t in 0..x.rows {
            let y = m.forward_token(h.row(t), &self.allowed[l], top_k);
            f.row_mut(t).copy_from_slice(&y);
        }
        for (xi, fi) in x.data.iter_mut().zip(&f.data) {
            *xi += fi;
        }
        if let Some(slot) = capture {
            *slot = Some(FfnCapture { input: h, output: f });
        }
    }

    pub(crate) fn final_hidden(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows, x.cols);
        for t in 0..x.rows {
            tensor::rms_norm(x.row(t), &self.params.final_norm, out.row_mut(t));
        }
        out
    }

    pub(crate) fn logits(&self, final_hidden: &Matrix) -> Matrix {
        self.params.lm_head.apply_rows(final_hidden)
    }

    pub(crate) fn run(
        &self,
        tokens: &[u32],
        capture_layers: &BTreeSet<usize>,
        kv_hook: &mut dyn KvHook,
    ) -> Result<ForwardTrace> {
        if let Some(&bad) = capture_layers.iter().find(|&&l| l >= self.n_layers()) {
            return Err(Error::InvalidInput(format!("capture layer {bad} out of range")));
        }
        let mut x = self.embed(tokens)?;
        let mut ffn_io = BTreeMap::new();
        for l in 0..self.n_layers() {
            let mut slot = None;
            let capture = capture_layers.contains(&l).then_some(&mut slot);
            self.layer(l, &mut x, capture, &mut *kv_hook);
            if let Some(c) = slot {
                ffn_io.insert(l, c);
            }
        }
        let final_hidden = self.final_hidden(&x);
        let logits = self.logits(&final_hidden);
        Ok(ForwardTrace { final_hidden, logits, ffn_io })
    }
}

/// Runs the model on `tokens` under `arch` (attention spans and allowed experts).
pub fn forward(
    params: &ModelParams,
    arch: &ArchitectureSpec,
    tokens: &[u32],
    capture_layers: &BTreeSet<usize>,
) -> Result<ForwardTrace> {
    Forward::new(params, arch)?.run(tokens, capture_layers, &mut NoKvHook)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        let mut cfg = ModelConfig::toy();
        cfg.n_layers = 2;
        cfg.attn_pattern.truncate(2);
        cfg.n_experts = 4;
        cfg.vocab_size = 32;
        cfg.max_seq_len = 32;
        cfg
    }

    #[test]
    fn init_rejects_bad_config() {
        let mut cfg = small();
        cfg.top_k = 9;
        assert!(init_model(&cfg, 1).is_err());
    }

    #[test]
    fn average_with_self_is_identity() {
        let p = init_model(&small(), 3).unwrap();
        assert_eq!(average_checkpoints(&p, &p).unwrap(), p);
    }

    #[test]
    fn average_of_zero_and_two_is_one() {
        let mut a = init_model(&small(), 3).unwrap();
        let mut b = a.clone();
        for t in a.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        for t in b.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 2.0);
        }
        let avg = average_checkpoints(&a, &b).unwrap();
        assert!(avg.tensors().iter().all(|t| t.2.iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn average_rejects_mismatched_layout() {
        let a = init_model(&small(), 3).unwrap();
        let mut b = a.clone();
        b.layers[0].moe.expert_ids.swap(0, 1);
        assert!(matches!(average_checkpoints(&a, &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn rope_scale_one_is_unscaled_baseline() {
        let cfg = small();
        let freqs = rope_frequencies(&cfg);
        for (i, f) in freqs.iter().enumerate() {
            assert_eq!(*f, cfg.rope_base.powf(-(2.0 * i as f64) / cfg.head_dim as f64));
        }
        assert_eq!(rope_attention_scale(&cfg), 1.0);
    }

    #[test]
    fn rope_scaling_slows_low_frequencies() {
        let mut cfg = small();
        cfg.max_seq_len = 131072;
        cfg.rope_base = 1.0e6;
        let base = rope_frequencies(&cfg);
        cfg.rope_scale_factor = 32.0;
        let scaled = rope_frequencies(&cfg);
        assert_eq!(scaled[0], base[0]);
        let last = base.len() - 1;
        assert!((scaled[last] - base[last] / 32.0).abs() < 1e-15);
        assert!(scaled.iter().zip(&base).all(|(s, b)| s <= b));
    }

    #[test]
    fn empty_and_oversized_sequences_rejected() {
        let p = init_model(&small(), 1).unwrap();
        let arch = ArchitectureSpec::from_params(&p);
        let none = BTreeSet::new();
        assert!(forward(&p, &arch, &[], &none).is_err());
        let long = vec![1u32; 33];
        assert!(matches!(
            forward(&p, &arch, &long, &none),
            Err(Error::SequenceTooLong { len: 33, max: 32 })
        ));
        assert!(forward(&p, &arch, &[40], &none).is_err());
    }
}
