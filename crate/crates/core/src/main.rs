use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use puzzle_nas::cost::KvPrecision;
use puzzle_nas::error::Result;
use puzzle_nas::pipeline::{ModelChoice, Run, RunConfig, ScalesChoice};
use puzzle_nas::scoring::{AttentionSignals, ScoreSignal};
use puzzle_nas::search;

#[derive(Parser)]
#[command(name = "puzzle", version, about = "Block search over a toy MoE transformer")]
struct Cli {
    /// Run config JSON; the built-in toy run when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SignalArg {
    Both,
    ActivationMse,
    TaskDrop,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttnSignalArg {
    ActivationMse,
    TaskDrop,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Parent,
    Child,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Bf16,
    Fp8,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScalesArg {
    None,
    Calibrated,
}

#[derive(Subcommand)]
enum Command {
    /// Rank experts and score every library variant.
    Score {
        #[arg(long, value_enum)]
        signal: Option<SignalArg>,
    },
    /// Select one variant per layer under the scenario budgets.
    Search {
        #[arg(long)]
        measured_costs: Option<PathBuf>,
        #[arg(long, value_enum)]
        attention_signal: Option<AttnSignalArg>,
    },
    /// Build the child model from the searched spec.
    Assemble,
    /// Write FP8 KV scales.
    Quantize {
        #[arg(long, value_enum, default_value = "calibrated")]
        kv_scales: ScalesArg,
        #[arg(long, value_enum, default_value = "child")]
        model: ModelArg,
    },
    /// Task accuracy and generation lengths per effort level.
    Eval {
        #[arg(long, value_enum, default_value = "child")]
        model: ModelArg,
        #[arg(long, value_enum, default_value = "bf16")]
        kv_precision: PrecisionArg,
        #[arg(long, value_enum, default_value = "none")]
        kv_scales: ScalesArg,
    },
    /// Emit relative request rates as CSV and JSON.
    Frontier {
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long, default_value = "parent/bf16/high")]
        baseline: String,
    },
}

fn model(m: ModelArg) -> ModelChoice {
    match m {
        ModelArg::Parent => ModelChoice::Parent,
        ModelArg::Child => ModelChoice::Child,
    }
}

fn scales(s: ScalesArg) -> ScalesChoice {
    match s {
        ScalesArg::None => ScalesChoice::None,
        ScalesArg::Calibrated => ScalesChoice::Calibrated,
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::toy(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let run = Run::new(&cli.out, config)?;
    match cli.command {
        Command::Score { signal } => {
            let signals = signal.map(|s| match s {
                SignalArg::Both => AttentionSignals::Both,
                SignalArg::ActivationMse => AttentionSignals::ActivationMse,
                SignalArg::TaskDrop => AttentionSignals::TaskDrop,
            });
            let table = run.cmd_score(signals)?;
            println!("scored {} entries into {}", table.entries.len(), run.dir.display());
        }
        Command::Search { measured_costs, attention_signal } => {
            let attn = attention_signal.map(|s| match s {
                AttnSignalArg::ActivationMse => ScoreSignal::ActivationMse,
                AttnSignalArg::TaskDrop => ScoreSignal::TaskDrop,
            });
            let (spec, report) = run.cmd_search(measured_costs.as_deref(), attn)?;
            print!("{}", search::choice_table(&spec, &run.config.model));
            println!("objective {:.6}", report.objective);
            for b in &report.budgets {
                println!("{:<16} limit {:>14} total {:>14} slack {:>12}", b.name, b.limit, b.total, b.slack);
            }
        }
        Command::Assemble => {
            let (child, _) = run.cmd_assemble()?;
            println!("child: {} params, checksum {}", child.param_count(), child.checksum());
        }
        Command::Quantize { kv_scales, model: m } => {
            let s = run.cmd_quantize(model(m), scales(kv_scales))?;
            for l in &s.scales.layers {
                println!("layer {:>2}  k {:.6e} (raw {:.6e})  v {:.6e} (raw {:.6e})", l.layer, l.k_scale, l.k_raw, l.v_scale, l.v_raw);
            }
            println!(
                "saturations: calibration {}, quantized pass {}",
                s.calibration_saturations, s.quantized_pass_saturations
            );
        }
        Command::Eval { model: m, kv_precision, kv_scales } => {
            let precision = match kv_precision {
                PrecisionArg::Bf16 => KvPrecision::Bf16,
                PrecisionArg::Fp8 => KvPrecision::Fp8,
            };
            let r = run.cmd_eval(model(m), precision, scales(kv_scales))?;
            println!("task accuracy {:.4}", r.task_accuracy);
            for (effort, stats) in &r.efforts {
                println!("{effort:<7} cap {:>4} mean length {:.2}", stats.cap, stats.mean_length);
            }
        }
        Command::Frontier { records, baseline } => {
            for p in run.cmd_frontier(records.as_deref(), &baseline)? {
                println!("{:<24} {:<5} {:<7} {:>8.3} {:>7.2}", p.model, p.kv_precision, p.effort, p.relative_request_rate, p.avg_accuracy);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_infeasible() { 2 } else { 1 })
        }
    }
}
