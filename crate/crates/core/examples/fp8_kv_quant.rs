//! FP8 E4M3 KV-cache simulation: max calibration, power-of-two scales and
//! the accuracy cost of quantized keys and values.

use std::error::Error;

use puzzle_nas::config::ModelConfig;
use puzzle_nas::fp8;
use puzzle_nas::kvquant::{calibrate_scales, forward_with_quantized_kv, quantization_report, KvMode, QuantScales};
use puzzle_nas::library::ArchitectureSpec;
use puzzle_nas::model::init_model;
use puzzle_nas::probes::ProbeSpec;

fn main() -> Result<(), Box<dyn Error>> {
    println!("E4M3 finite codes: {}, max {}", fp8::finite_codes().count(), fp8::decode(0x7E));
    let cfg = ModelConfig::toy();
    let params = init_model(&cfg, 0)?;
    let arch = ArchitectureSpec::parent(&cfg);
    let calib = ProbeSpec::language_modeling(0, 8, 64).generate(&cfg)?;
    let scales = calibrate_scales(&params, &arch, &calib)?;
    for s in scales.layers.iter().take(3) {
        println!("layer {}: k raw {:.4e} -> {:e}, v raw {:.4e} -> {:e}", s.layer, s.k_raw, s.k_scale, s.v_raw, s.v_scale);
    }
    println!("all scales below one: {}", scales.all_below_one());

    let modes = [
        ("bf16", KvMode::Bf16),
        ("fp8 no scales", KvMode::Fp8 { scales: QuantScales::unit(cfg.n_layers) }),
        ("fp8 raw scales", KvMode::Fp8 { scales: scales.raw() }),
        ("fp8 pow2 scales", KvMode::Fp8 { scales: scales.clone() }),
    ];
    let tokens = &calib.sequences[0].tokens;
    let (exact, _) = forward_with_quantized_kv(&params, &arch, &KvMode::Exact, tokens)?;
    for (name, mode) in &modes {
        let report = quantization_report(&params, &arch, mode, &calib)?;
        let (trace, _) = forward_with_quantized_kv(&params, &arch, mode, tokens)?;
        let drift = puzzle_nas::tensor::mse(&exact.final_hidden.data, &trace.final_hidden.data);
        let k_mse: f64 = report.layers.iter().map(|l| l.k_mse).sum::<f64>() / report.layers.len() as f64;
        println!("{name:<16} mean K MSE {k_mse:.3e}  saturations {}  final-hidden drift {drift:.3e}", report.saturations());
    }
    Ok(())
}
