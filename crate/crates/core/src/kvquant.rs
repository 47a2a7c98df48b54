//! FP8 KV-cache simulation: max calibration, power-of-two scales and forward
//! passes whose keys and values go through quantize/dequantize.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fp8;
use crate::library::{load_json, save_json, ArchitectureSpec};
use crate::model::{Forward, ForwardTrace, KvHook, ModelParams, NoKvHook};
use crate::probes::ProbeSet;
use crate::tensor::Matrix;

pub const ZERO_LAYER_SCALE: f64 = 1.0 / (1u64 << 20) as f64;

/// Smallest power of two `>= x`.
pub fn round_up_pow2(x: f64) -> Result<f64> {
    if !(x.is_finite() && x > 0.0) {
        return Err(Error::NonPositive(format!("round_up_pow2 input {x}")));
    }
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7FF) as i32;
    let mant = bits & ((1u64 << 52) - 1);
    if exp == 0 {
        // Subnormal: the result is the next power of two above the mantissa.
        let p = mant.next_power_of_two();
        return Ok(p as f64 * 2f64.powi(-1074));
    }
    if mant == 0 {
        return Ok(x);
    }
    Ok(f64::from_bits(((exp + 1) as u64) << 52))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantStats {
    pub saturations: usize,
    pub nans: usize,
}

impl QuantStats {
    fn add(&mut self, other: QuantStats) {
        self.saturations += other.saturations;
        self.nans += other.nans;
    }
}

pub fn quantize(values: &[f32], scale: f64) -> Result<(Vec<u8>, QuantStats)> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::NonPositive(format!("quantization scale {scale}")));
    }
    let mut stats = QuantStats::default();
    let codes = values
        .iter()
        .map(|&v| {
            let x = v as f64 / scale;
            if x.is_nan() {
                stats.nans += 1;
            } else if x.abs() > fp8::MAX_FINITE {
                stats.saturations += 1;
            }
            fp8::encode(x)
        })
        .collect();
    Ok((codes, stats))
}

pub fn dequantize(codes: &[u8], scale: f64) -> Vec<f32> {
    codes.iter().map(|&c| (fp8::decode(c) as f64 * scale) as f32).collect()
}

fn roundtrip_in_place(values: &mut [f32], scale: f64) -> QuantStats {
    let mut stats = QuantStats::default();
    for v in values.iter_mut() {
        let x = *v as f64 / scale;
        if x.is_nan() {
            stats.nans += 1;
        } else if x.abs() > fp8::MAX_FINITE {
            stats.saturations += 1;
        }
        *v = (fp8::decode(fp8::encode(x)) as f64 * scale) as f32;
    }
    stats
}

/// Round-to-nearest-even to bfloat16, kept in an `f32`.
pub fn round_bf16(x: f32) -> f32 {
    if x.is_nan() {
        return x;
    }
    let bits = x.to_bits();
    let lsb = (bits >> 16) & 1;
    f32::from_bits((bits.wrapping_add(0x7FFF + lsb)) & 0xFFFF_0000)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerScales {
    pub layer: usize,
    pub k_scale: f64,
    pub v_scale: f64,
    /// Calibrated values before power-of-two rounding.
    pub k_raw: f64,
    pub v_raw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantScales {
    pub layers: Vec<LayerScales>,
    pub rounded: bool,
}

impl QuantScales {
    /// Scale 1 everywhere: plain FP8 casting.
    pub fn unit(n_layers: usize) -> Self {
        Self {
            layers: (0..n_layers)
                .map(|layer| LayerScales { layer, k_scale: 1.0, v_scale: 1.0, k_raw: 1.0, v_raw: 1.0 })
                .collect(),
            rounded: false,
        }
    }

    /// The same calibration with the raw scales in effect.
    pub fn raw(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|s| LayerScales { k_scale: s.k_raw, v_scale: s.v_raw, ..*s })
                .collect(),
            rounded: false,
        }
    }

    pub fn for_layer(&self, layer: usize) -> Result<&LayerScales> {
        self.layers.iter().find(|s| s.layer == layer).ok_or(Error::MissingScales(layer))
    }

    pub fn all_below_one(&self) -> bool {
        self.layers.iter().all(|s| s.k_scale < 1.0 && s.v_scale < 1.0)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        save_json(path.as_ref(), self)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        load_json(path.as_ref())
    }
}

struct MaxAbs {
    k: Vec<f32>,
    v: Vec<f32>,
}

impl KvHook for MaxAbs {
    fn on_kv(&mut self, layer: usize, keys: &mut Matrix, values: &mut Matrix) {
        let m = |xs: &[f32], acc: f32| xs.iter().fold(acc, |a, x| a.max(x.abs()));
        self.k[layer] = m(&keys.data, self.k[layer]);
        self.v[layer] = m(&values.data, self.v[layer]);
    }
}

/// Raw scale `max / 448`, nudged up until dividing the max by it stays
/// within range.
pub fn max_calibrated_scale(max_abs: f32) -> f64 {
    if max_abs == 0.0 {
        return ZERO_LAYER_SCALE;
    }
    let m = max_abs as f64;
    let mut s = m / fp8::MAX_FINITE;
    while m / s > fp8::MAX_FINITE {
        s = s.next_up();
    }
    s
}

/// Per-layer max calibration of K (post-rotary) and V over the probes with
/// an unquantized cache.
pub fn calibrate_scales(params: &ModelParams, arch: &ArchitectureSpec, probes: &ProbeSet) -> Result<QuantScales> {
    if probes.is_empty() {
        return Err(Error::EmptyProbes);
    }
    let fw = Forward::new(params, arch)?;
    let n = fw.n_layers();
    let mut hook = MaxAbs { k: vec![0.0; n], v: vec![0.0; n] };
    for seq in &probes.sequences {
        fw.run(&seq.tokens, &BTreeSet::new(), &mut hook)?;
    }
    let mut layers = Vec::with_capacity(n);
    for l in 0..n {
        if hook.k[l] == 0.0 || hook.v[l] == 0.0 {
            log::warn!("layer {l}: all-zero K or V activations, using scale 2^-20");
        }
        let k_raw = max_calibrated_scale(hook.k[l]);
        let v_raw = max_calibrated_scale(hook.v[l]);
        layers.push(LayerScales {
            layer: l,
            k_scale: round_up_pow2(k_raw)?,
            v_scale: round_up_pow2(v_raw)?,
            k_raw,
            v_raw,
        });
    }
    Ok(QuantScales { layers, rounded: true })
}

struct SaturationCounter<'a> {
    scales: &'a QuantScales,
    counts: Vec<QuantStats>,
}

impl KvHook for SaturationCounter<'_> {
    fn on_kv(&mut self, layer: usize, keys: &mut Matrix, values: &mut Matrix) {
        let s = self.scales.for_layer(layer).expect("scales checked before the pass");
        for (xs, scale) in [(&keys.data, s.k_scale), (&values.data, s.v_scale)] {
            for &v in xs.iter() {
                let x = v as f64 / scale;
                if x.is_nan() {
                    self.counts[layer].nans += 1;
                } else if x.abs() > fp8::MAX_FINITE {
                    self.counts[layer].saturations += 1;
                }
            }
        }
    }
}

/// Per-layer saturation counts of the unquantized K and V under `scales`,
/// i.e. on exactly the activations calibration sees.
pub fn count_saturations(
    params: &ModelParams,
    arch: &ArchitectureSpec,
    scales: &QuantScales,
    probes: &ProbeSet,
) -> Result<Vec<QuantStats>> {
    let fw = Forward::new(params, arch)?;
    for l in 0..fw.n_layers() {
        scales.for_layer(l)?;
    }
    let mut hook = SaturationCounter { scales, counts: vec![QuantStats::default(); fw.n_layers()] };
    for seq in &probes.sequences {
        fw.run(&seq.tokens, &BTreeSet::new(), &mut hook)?;
    }
    Ok(hook.counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum KvMode {
    /// Full-precision cache; identical to the plain forward pass.
    Exact,
    Bf16,
    Fp8 { scales: QuantScales },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerKvStats {
    pub k_mse: f64,
    pub v_mse: f64,
    pub k: QuantStats,
    pub v: QuantStats,
    pub elements: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KvQuantReport {
    pub layers: Vec<LayerKvStats>,
}

impl KvQuantReport {
    pub fn saturations(&self) -> usize {
        self.layers.iter().map(|l| l.k.saturations + l.v.saturations).sum()
    }

    pub fn nans(&self) -> usize {
        self.layers.iter().map(|l| l.k.nans + l.v.nans).sum()
    }

    fn merge(&mut self, other: &KvQuantReport) {
        if self.layers.is_empty() {
            self.layers = vec![LayerKvStats::default(); other.layers.len()];
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            let total = (a.elements + b.elements) as f64;
            if total > 0.0 {
                a.k_mse = (a.k_mse * a.elements as f64 + b.k_mse * b.elements as f64) / total;
                a.v_mse = (a.v_mse * a.elements as f64 + b.v_mse * b.elements as f64) / total;
            }
            a.elements += b.elements;
            a.k.add(b.k);
            a.v.add(b.v);
        }
    }
}

struct QuantHook<'a> {
    mode: &'a KvMode,
    report: KvQuantReport,
}

fn sq_err(before: &[f32], after: &[f32]) -> f64 {
    before.iter().zip(after).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum()
}

impl KvHook for QuantHook<'_> {
    fn on_kv(&mut self, layer: usize, keys: &mut Matrix, values: &mut Matrix) {
        let (k0, v0) = (keys.data.clone(), values.data.clone());
        let stats = &mut self.report.layers[layer];
        match self.mode {
            KvMode::Exact => {}
            KvMode::Bf16 => {
                keys.data.iter_mut().for_each(|x| *x = round_bf16(*x));
                values.data.iter_mut().for_each(|x| *x = round_bf16(*x));
            }
            KvMode::Fp8 { scales } => {
                let s = scales.for_layer(layer).expect("scales checked before the pass");
                stats.k.add(roundtrip_in_place(&mut keys.data, s.k_scale));
                stats.v.add(roundtrip_in_place(&mut values.data, s.v_scale));
            }
        }
        // One call per layer covers every cached position.
        let n = k0.len();
        stats.k_mse = sq_err(&k0, &keys.data) / n as f64;
        stats.v_mse = sq_err(&v0, &values.data) / n as f64;
        stats.elements = n;
    }
}

/// Forward pass with the KV cache stored under `mode`, plus per-layer
/// quantization error and saturation counts.
pub fn forward_with_quantized_kv(
    params: &ModelParams,
    arch: &ArchitectureSpec,
    mode: &KvMode,
    tokens: &[u32],
) -> Result<(ForwardTrace, KvQuantReport)> {
    let fw = Forward::new(params, arch)?;
    if let KvMode::Fp8 { scales } = mode {
        for l in 0..fw.n_layers() {
            let s = scales.for_layer(l)?;
            for v in [s.k_scale, s.v_scale] {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::NonPositive(format!("layer {l} scale {v}")));
                }
            }
        }
    }
    if matches!(mode, KvMode::Exact) {
        let trace = fw.run(tokens, &BTreeSet::new(), &mut NoKvHook)?;
        let layers = vec![LayerKvStats::default(); fw.n_layers()];
        return Ok((trace, KvQuantReport { layers }));
    }
    let mut hook = QuantHook {
        mode,
        report: KvQuantReport { layers: vec![LayerKvStats::default(); fw.n_layers()] },
    };
    let trace = fw.run(tokens, &BTreeSet::new(), &mut hook)?;
    Ok((trace, hook.report))
}

/// Aggregated report over a probe set.
pub fn quantization_report(
    params: &ModelParams,
    arch: &ArchitectureSpec,
    mode: &KvMode,
    probes: &ProbeSet,
) -> Result<KvQuantReport> {
    let mut total = KvQuantReport::default();
    for seq in &probes.sequences {
        let (_, r) = forward_with_quantized_kv(params, arch, mode, &seq.tokens)?;
        total.merge(&r);
    }
    Ok(total)
}
