mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use puzzle_nas::fp8;
use puzzle_nas::kvquant::{
    calibrate_scales, count_saturations, dequantize, forward_with_quantized_kv, max_calibrated_scale, quantize,
    round_up_pow2, KvMode,
};
use puzzle_nas::library::ArchitectureSpec;
use puzzle_nas::model::forward;
use puzzle_nas::probes::ProbeSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// E4M3FN from the bit layout: 1 sign, 4 exponent (bias 7), 3 mantissa; the
/// all-ones exponent and mantissa pattern is NaN and there are no infinities.
fn oracle_decode(code: u8) -> Option<f64> {
    let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
    let e = ((code >> 3) & 0xF) as i32;
    let m = (code & 0x7) as f64;
    if e == 0xF && m == 7.0 {
        return None;
    }
    let mag = if e == 0 { 2f64.powi(-6) * m / 8.0 } else { 2f64.powi(e - 7) * (1.0 + m / 8.0) };
    Some(sign * mag)
}

const POW2_SCALES: [i32; 9] = [-20, -12, -6, -2, 0, 1, 3, 8, 16];

#[test]
fn decode_matches_bit_layout_oracle() {
    let mut finite = 0;
    for code in 0..=255u8 {
        match oracle_decode(code) {
            None => assert!(fp8::decode(code).is_nan() && fp8::is_nan_code(code)),
            Some(v) => {
                finite += 1;
                assert_eq!(fp8::decode(code) as f64, v, "code {code:#04x}");
            }
        }
    }
    assert_eq!(finite, 254);
    assert_eq!(fp8::finite_codes().count(), 254);
    assert_eq!(oracle_decode(0x7E), Some(448.0));
}

#[test]
fn every_finite_code_round_trips_at_power_of_two_scales() {
    for e in POW2_SCALES {
        let scale = 2f64.powi(e);
        let codes: Vec<u8> = fp8::finite_codes().collect();
        let values = dequantize(&codes, scale);
        let (back, stats) = quantize(&values, scale).unwrap();
        assert_eq!(stats.saturations + stats.nans, 0);
        for ((&c, &b), &v) in codes.iter().zip(&back).zip(&values) {
            // ±0 share a value, so compare decoded values.
            assert_eq!(dequantize(&[b], scale)[0], v, "code {c:#04x} scale 2^{e}");
            if c & 0x7F != 0 {
                assert_eq!(b, c);
            }
        }
    }
}

#[test]
fn dequantize_is_monotone_in_signed_code_order() {
    let mut pos: Vec<u8> = (0x00..=0x7E).collect();
    let mut neg: Vec<u8> = (0x80..=0xFE).collect();
    neg.reverse();
    neg.append(&mut pos);
    let vals: Vec<f32> = neg.iter().map(|&c| fp8::decode(c)).collect();
    assert!(vals.windows(2).all(|w| w[0] <= w[1]));
}

/// Nearest representable value with ties to the even mantissa, clamped to ±448.
fn oracle_round(x: f64) -> f64 {
    let x = x.clamp(-448.0, 448.0);
    let mut best: Option<(f64, u8)> = None;
    for code in fp8::finite_codes() {
        let v = oracle_decode(code).unwrap();
        let better = match best {
            None => true,
            Some((b, bc)) => {
                let (d, db) = ((x - v).abs(), (x - b).abs());
                d < db || (d == db && code & 1 == 0 && bc & 1 == 1)
            }
        };
        if better {
            best = Some((v, code));
        }
    }
    best.unwrap().0
}

proptest! {
    #[test]
    fn encode_rounds_to_nearest_even(x in -600.0f64..600.0) {
        let got = fp8::decode(fp8::encode(x)) as f64;
        prop_assert_eq!(got.abs(), oracle_round(x).abs());
        if got != 0.0 {
            prop_assert_eq!(got.signum(), x.signum());
        }
    }

    #[test]
    fn encode_handles_exact_midpoints(code in 0u8..0x7E) {
        let (a, b) = (oracle_decode(code).unwrap(), oracle_decode(code + 1).unwrap());
        let mid = (a + b) / 2.0;
        let want = if code & 1 == 0 { a } else { b };
        prop_assert_eq!(fp8::decode(fp8::encode(mid)) as f64, want);
    }

    #[test]
    fn pow2_scales_are_homogeneous(xs in prop::collection::vec(-1000.0f32..1000.0, 1..64), e in -8i32..8, s in 0.01f64..10.0) {
        let a = 2f64.powi(e);
        let scaled: Vec<f32> = xs.iter().map(|&x| (x as f64 * a) as f32).collect();
        prop_assert_eq!(quantize(&xs, s).unwrap(), quantize(&scaled, s * a).unwrap());
    }

    #[test]
    fn rounded_scales_never_saturate_more(xs in prop::collection::vec(-1e4f32..1e4, 1..128), s in 1e-3f64..50.0) {
        let r = round_up_pow2(s).unwrap();
        let raw = quantize(&xs, s).unwrap().1.saturations;
        prop_assert!(quantize(&xs, r).unwrap().1.saturations <= raw);
    }
}

#[test]
fn round_up_pow2_brackets_ten_thousand_randoms() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10_000 {
        let x = 2f64.powf(rng.random_range(-60.0..60.0)) * rng.random_range(0.5..1.0);
        let r = round_up_pow2(x).unwrap();
        assert!(r >= x && r < 2.0 * x, "{x} -> {r}");
        assert_eq!(r.to_bits() & ((1u64 << 52) - 1), 0, "{r} not a power of two");
    }
    assert_eq!(round_up_pow2(f64::MIN_POSITIVE).unwrap(), f64::MIN_POSITIVE);
    assert!(round_up_pow2(0.0).is_err() && round_up_pow2(-1.0).is_err() && round_up_pow2(f64::NAN).is_err());
}

#[test]
fn max_of_one_hundred_scales_to_a_quarter() {
    let raw = max_calibrated_scale(100.0);
    assert!((raw - 100.0 / 448.0).abs() < 1e-15);
    assert_eq!(round_up_pow2(raw).unwrap(), 0.25);
}

#[test]
fn max_calibration_never_saturates_its_probes() {
    let params = common::tiny_params(3);
    let arch = ArchitectureSpec::parent(&params.config);
    for seed in 0..4 {
        let probes = ProbeSpec::language_modeling(seed, 4, 32).generate(&params.config).unwrap();
        let scales = calibrate_scales(&params, &arch, &probes).unwrap();
        for s in [&scales, &scales.raw()] {
            let stats = count_saturations(&params, &arch, s, &probes).unwrap();
            assert!(stats.iter().all(|q| q.saturations == 0 && q.nans == 0), "{stats:?}");
        }
        for l in &scales.layers {
            assert!(l.k_raw <= l.k_scale && l.k_scale < 2.0 * l.k_raw);
            assert!(l.v_raw <= l.v_scale && l.v_scale < 2.0 * l.v_raw);
        }
    }
}

#[test]
fn exact_mode_equals_plain_forward() {
    let params = common::tiny_params(3);
    let arch = ArchitectureSpec::parent(&params.config);
    let tokens: Vec<u32> = (0..24).map(|t| (t * 7 % 32) as u32).collect();
    let (trace, report) = forward_with_quantized_kv(&params, &arch, &KvMode::Exact, &tokens).unwrap();
    assert_eq!(trace, forward(&params, &arch, &tokens, &BTreeSet::new()).unwrap());
    assert!(report.layers.iter().all(|l| l.k_mse == 0.0 && l.v_mse == 0.0));
}

#[test]
fn fp8_cache_error_exceeds_bf16_error() {
    let params = common::tiny_params(3);
    let arch = ArchitectureSpec::parent(&params.config);
    let probes = ProbeSpec::language_modeling(1, 2, 32).generate(&params.config).unwrap();
    let scales = calibrate_scales(&params, &arch, &probes).unwrap();
    let tokens = &probes.sequences[0].tokens;
    let (_, bf16) = forward_with_quantized_kv(&params, &arch, &KvMode::Bf16, tokens).unwrap();
    let (_, fp8) = forward_with_quantized_kv(&params, &arch, &KvMode::Fp8 { scales }, tokens).unwrap();
    for (a, b) in bf16.layers.iter().zip(&fp8.layers) {
        assert!(a.k_mse > 0.0 && a.k_mse < b.k_mse);
    }
}
