//! Stage runner behind the `puzzle` binary: score → search → assemble →
//! quantize → eval → frontier, each reading and writing plain files in one
//! run directory with a hashed manifest.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::cost::{self, CostVector, HardwareProfile, KvPrecision, Scenario};
use crate::error::{Error, Result};
use crate::kvquant::{self, KvMode, QuantScales};
use crate::library::{self, build_library, load_json, save_json, ArchitectureSpec, BlockLibrary, ExpertRanking, LibraryMenu};
use crate::metrics::{self, Effort, RunRecord};
use crate::model::{init_model, ModelParams};
use crate::probes::ProbeSpec;
use crate::scoring::{self, AttentionSignals, ScoreSignal, ScoreTable};
use crate::search::{self, KvBudget, SearchOptions, SignalChoice, SpeedupTarget};
use crate::tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lm_count: usize,
    pub lm_length: usize,
    pub task_count: usize,
    pub task_length: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { lm_count: 64, lm_length: 128, task_count: 64, task_length: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub isl: usize,
    pub osl: usize,
    pub batch: usize,
    #[serde(default = "bf16")]
    pub kv_precision: KvPrecision,
    pub target_speedup: f64,
}

fn bf16() -> KvPrecision {
    KvPrecision::Bf16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub prompts: usize,
    pub prompt_length: usize,
    pub end_token: u32,
    /// Generation cap per effort level.
    pub max_new_tokens: BTreeMap<Effort, usize>,
    /// Scenario whose analytic throughput feeds the run records.
    pub throughput_scenario: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub menu: LibraryMenu,
    #[serde(default)]
    pub probes: ProbeConfig,
    /// Which attention signals `score` computes.
    pub score_signals: AttentionSignals,
    /// Which signal `search` uses for attention variants.
    pub attention_signal: ScoreSignal,
    #[serde(default = "yes")]
    pub normalize: bool,
    pub hardware: HardwareProfile,
    pub scenarios: Vec<ScenarioConfig>,
    #[serde(default)]
    pub kv_budget: Option<KvBudget>,
    pub eval: EvalConfig,
}

fn yes() -> bool {
    true
}

impl RunConfig {
    /// The bundled toy run.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            seed: 0,
            menu: LibraryMenu::toy(),
            probes: ProbeConfig::default(),
            score_signals: AttentionSignals::Both,
            attention_signal: ScoreSignal::TaskDrop,
            normalize: true,
            hardware: HardwareProfile::desk(),
            scenarios: vec![
                ScenarioConfig {
                    name: "long".into(),
                    isl: 192,
                    osl: 64,
                    batch: 16,
                    kv_precision: KvPrecision::Bf16,
                    target_speedup: 1.3,
                },
                ScenarioConfig {
                    name: "short".into(),
                    isl: 32,
                    osl: 32,
                    batch: 64,
                    kv_precision: KvPrecision::Bf16,
                    target_speedup: 1.1,
                },
            ],
            kv_budget: None,
            eval: EvalConfig {
                prompts: 8,
                prompt_length: 16,
                end_token: 0,
                max_new_tokens: BTreeMap::from([(Effort::High, 48), (Effort::Medium, 16), (Effort::Low, 4)]),
                throughput_scenario: "long".into(),
            },
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = load_json(path.as_ref())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.hardware.validate()?;
        self.menu.keep_counts(self.model.n_experts, self.model.top_k)?;
        for s in self.scenarios() {
            s.validate()?;
        }
        if self.scenarios.is_empty() {
            return Err(Error::InvalidConfig { field: "scenarios", reason: "at least one scenario required".into() });
        }
        if !self.scenarios.iter().any(|s| s.name == self.eval.throughput_scenario) {
            return Err(Error::InvalidConfig {
                field: "eval.throughput_scenario",
                reason: format!("no scenario named `{}`", self.eval.throughput_scenario),
            });
        }
        if self.eval.prompt_length == 0 {
            return Err(Error::InvalidConfig { field: "eval.prompt_length", reason: "must be positive".into() });
        }
        Ok(())
    }

    pub fn scenarios(&self) -> Vec<Scenario> {
        self.scenarios
            .iter()
            .map(|s| Scenario {
                name: s.name.clone(),
                isl: s.isl,
                osl: s.osl,
                batch: s.batch,
                kv_precision: s.kv_precision,
                hw: self.hardware.clone(),
            })
            .collect()
    }

    pub fn targets(&self) -> Vec<SpeedupTarget> {
        self.scenarios
            .iter()
            .map(|s| SpeedupTarget { scenario: s.name.clone(), target_speedup: s.target_speedup })
            .collect()
    }

    pub fn lm_probes(&self) -> ProbeSpec {
        ProbeSpec::language_modeling(self.seed, self.probes.lm_count, self.probes.lm_length)
    }

    pub fn task_probes(&self) -> ProbeSpec {
        ProbeSpec::retrieval(self.seed, self.probes.task_count, self.probes.task_length)
    }

    /// Held out from scoring.
    pub fn eval_task(&self) -> ProbeSpec {
        ProbeSpec::retrieval(self.seed.wrapping_add(1), self.probes.task_count, self.probes.task_length)
    }

    pub fn eval_prompts(&self) -> ProbeSpec {
        ProbeSpec::language_modeling(self.seed.wrapping_add(2), self.eval.prompts, self.eval.prompt_length)
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// File names inside a run directory.
pub mod files {
    pub const MANIFEST: &str = "manifest.json";
    pub const LOCK: &str = ".lock";
    pub const CONFIG: &str = "config.json";
    pub const PARENT_BIN: &str = "parent.bin";
    pub const PARENT_JSON: &str = "parent.json";
    pub const LIBRARY: &str = "library.json";
    pub const RANKING: &str = "expert_ranking.json";
    pub const SCORES: &str = "scores.jsonl";
    pub const LAYER_RANKS: &str = "layer_ranks.json";
    pub const COSTS: &str = "costs.jsonl";
    pub const SPEC: &str = "spec.json";
    pub const SEARCH_REPORT: &str = "search_report.json";
    pub const SEARCH_TABLE: &str = "search_table.txt";
    pub const CHILD_BIN: &str = "child.bin";
    pub const CHILD_JSON: &str = "child.json";
    pub const CHILD_SPEC: &str = "child_spec.json";
    pub const RECORDS: &str = "records.jsonl";

    pub fn kv_scales(mode: &str) -> String {
        format!("kv_scales_{mode}.json")
    }

    pub fn eval_report(model: &str, precision: &str, scales: &str) -> String {
        format!("eval_{model}_{precision}_{scales}.json")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub params: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub probes: Vec<ProbeSpec>,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Exclusive hold on a run directory for one stage.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(files::LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// A run directory plus the config every stage shares.
pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
}

struct StageCtx<'a> {
    run: &'a Run,
    name: &'static str,
    record: StageRecord,
    _lock: RunLock,
}

impl<'a> StageCtx<'a> {
    fn begin(run: &'a Run, name: &'static str) -> Result<Self> {
        std::fs::create_dir_all(&run.dir).map_err(|e| Error::io(&run.dir, e))?;
        let lock = RunLock::acquire(&run.dir)?;
        Ok(Self {
            run,
            name,
            record: StageRecord {
                inputs: Vec::new(),
                outputs: Vec::new(),
                params: BTreeMap::new(),
                started_unix: now_unix(),
                finished_unix: 0,
            },
            _lock: lock,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.run.dir.join(name)
    }

    /// Records an input, checking it against the hash of the stage that wrote it.
    fn input(&mut self, path: &Path) -> Result<PathBuf> {
        let hash = sha256_file(path)?;
        let shown = self.run.display_path(path);
        if let Some(m) = self.run.read_manifest()? {
            for (stage, rec) in &m.stages {
                if let Some(out) = rec.outputs.iter().find(|o| o.path == shown) {
                    if out.sha256 != hash {
                        return Err(Error::InvalidInput(format!(
                            "{shown} changed since stage `{stage}` wrote it; re-run that stage"
                        )));
                    }
                }
            }
        }
        self.record.inputs.push(FileHash { path: shown, sha256: hash });
        Ok(path.to_path_buf())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        let hash = sha256_file(path)?;
        self.record.outputs.push(FileHash { path: self.run.display_path(path), sha256: hash });
        Ok(())
    }

    fn param(&mut self, key: &str, value: impl ToString) {
        self.record.params.insert(key.to_string(), value.to_string());
    }

    fn finish(mut self) -> Result<()> {
        self.record.finished_unix = now_unix();
        let mut m = self.run.read_manifest()?.unwrap_or_else(|| self.run.fresh_manifest());
        m.config_hash = self.run.config.hash();
        m.seed = self.run.config.seed;
        m.tool_version = env!("CARGO_PKG_VERSION").to_string();
        m.stages.insert(self.name.to_string(), self.record);
        save_json(&self.run.dir.join(files::MANIFEST), &m)
    }
}

/// Runs `body` as stage `name`, tagging any failure with the stage.
fn stage<T>(run: &Run, name: &'static str, body: impl FnOnce(&mut StageCtx) -> Result<T>) -> Result<T> {
    let mut ctx = StageCtx::begin(run, name).map_err(|e| e.in_stage(name))?;
    let out = body(&mut ctx).map_err(|e| e.in_stage(name))?;
    ctx.finish().map_err(|e| e.in_stage(name))?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    Parent,
    Child,
}

impl ModelChoice {
    pub fn name(&self) -> &'static str {
        match self {
            ModelChoice::Parent => "parent",
            ModelChoice::Child => "child",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalesChoice {
    None,
    Calibrated,
}

impl ScalesChoice {
    pub fn name(&self) -> &'static str {
        match self {
            ScalesChoice::None => "none",
            ScalesChoice::Calibrated => "calibrated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeSummary {
    pub model: String,
    pub scales: QuantScales,
    /// Saturations of the unquantized calibration K/V under these scales.
    pub calibration_saturations: usize,
    /// Saturations during a forward pass with the quantized cache.
    pub quantized_pass_saturations: usize,
    pub all_scales_below_one: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffortStats {
    pub cap: usize,
    pub mean_length: f64,
    pub lengths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub kv_precision: KvPrecision,
    pub kv_scales: String,
    pub task_accuracy: f64,
    pub max_throughput: f64,
    pub efforts: BTreeMap<Effort, EffortStats>,
    pub effort_length_ratio: Option<f64>,
}

/// Greedy decoding until `end_token` or `max_new` new tokens; returns the
/// generated tokens.
pub fn generate_greedy(
    params: &ModelParams,
    arch: &ArchitectureSpec,
    mode: &KvMode,
    prompt: &[u32],
    max_new: usize,
    end_token: u32,
) -> Result<Vec<u32>> {
    let mut tokens = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && tokens.len() < params.config.max_seq_len {
        let (trace, _) = kvquant::forward_with_quantized_kv(params, arch, mode, &tokens)?;
        let next = tensor::argmax(trace.logits.row(trace.logits.rows - 1)) as u32;
        out.push(next);
        tokens.push(next);
        if next == end_token {
            break;
        }
    }
    Ok(out)
}

impl Run {
    pub fn new(dir: impl Into<PathBuf>, config: RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { dir: dir.into(), config })
    }

    fn display_path(&self, path: &Path) -> String {
        path.strip_prefix(&self.dir).unwrap_or(path).display().to_string()
    }

    pub fn read_manifest(&self) -> Result<Option<RunManifest>> {
        let path = self.dir.join(files::MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        load_json(&path).map(Some)
    }

    fn fresh_manifest(&self) -> RunManifest {
        let c = &self.config;
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: c.hash(),
            seed: c.seed,
            probes: vec![c.lm_probes(), c.task_probes(), c.eval_task(), c.eval_prompts()],
            stages: BTreeMap::new(),
        }
    }

    fn load_model(ctx: &mut StageCtx, which: ModelChoice) -> Result<(ModelParams, ArchitectureSpec)> {
        match which {
            ModelChoice::Parent => {
                let bin = ctx.input(&ctx.path(files::PARENT_BIN))?;
                let json = ctx.input(&ctx.path(files::PARENT_JSON))?;
                let p = ModelParams::load(bin, json)?;
                let arch = ArchitectureSpec::from_params(&p);
                Ok((p, arch))
            }
            ModelChoice::Child => {
                let bin = ctx.input(&ctx.path(files::CHILD_BIN))?;
                let json = ctx.input(&ctx.path(files::CHILD_JSON))?;
                let p = ModelParams::load(bin, json)?;
                let arch = ArchitectureSpec::from_params(&p);
                Ok((p, arch))
            }
        }
    }

    /// Initializes the parent from the seed, ranks experts and scores every
    /// library variant.
    pub fn cmd_score(&self, signals: Option<AttentionSignals>) -> Result<ScoreTable> {
        stage(self, "score", |ctx| {
            let c = &self.config;
            let signals = signals.unwrap_or(c.score_signals);
            ctx.param("signals", format!("{signals:?}"));
            let config_path = ctx.path(files::CONFIG);
            save_json(&config_path, c)?;
            ctx.output(&config_path)?;

            let parent = init_model(&c.model, c.seed)?;
            let (bin, json) = (ctx.path(files::PARENT_BIN), ctx.path(files::PARENT_JSON));
            parent.save(&bin, &json)?;
            ctx.output(&bin)?;
            ctx.output(&json)?;
            ctx.param("parent_checksum", parent.checksum());

            let library = build_library(&c.model, &c.menu)?;
            let lib_path = ctx.path(files::LIBRARY);
            save_json(&lib_path, &library)?;
            ctx.output(&lib_path)?;

            let lm = c.lm_probes().generate(&c.model)?;
            let ranking = scoring::rank_experts(&parent, &lm)?;
            let rank_path = ctx.path(files::RANKING);
            ranking.save_json(&rank_path)?;
            ctx.output(&rank_path)?;

            let task = match signals {
                AttentionSignals::ActivationMse => None,
                _ => Some(c.task_probes().generate(&c.model)?),
            };
            let table = scoring::score_library(&parent, &library, &ranking, &lm, task.as_ref(), signals)?;
            let scores_path = ctx.path(files::SCORES);
            table.write_jsonl(&scores_path)?;
            ctx.output(&scores_path)?;

            let ranks = layer_ranks(&table, &library)?;
            let ranks_path = ctx.path(files::LAYER_RANKS);
            save_json(&ranks_path, &ranks)?;
            ctx.output(&ranks_path)?;
            Ok(table)
        })
    }

    /// Solves the selection problem and writes the chosen spec.
    pub fn cmd_search(
        &self,
        measured_costs: Option<&Path>,
        attention_signal: Option<ScoreSignal>,
    ) -> Result<(ArchitectureSpec, search::SearchReport)> {
        stage(self, "search", |ctx| {
            let c = &self.config;
            let library: BlockLibrary = load_json(&ctx.input(&ctx.path(files::LIBRARY))?)?;
            let scores = ScoreTable::read_jsonl(ctx.input(&ctx.path(files::SCORES))?)?;
            let mut costs = cost::analytic_costs(&library, &c.scenarios(), &c.model)?;
            if let Some(p) = measured_costs {
                let p = ctx.input(p)?;
                costs = cost::load_measured_costs(&p, &costs)?;
            }
            let costs_path = ctx.path(files::COSTS);
            costs.save_jsonl(&costs_path)?;
            ctx.output(&costs_path)?;

            let options = SearchOptions {
                signals: SignalChoice {
                    attention: attention_signal.unwrap_or(c.attention_signal),
                    ffn: ScoreSignal::ActivationMse,
                },
                normalize: c.normalize,
            };
            let targets = c.targets();
            let (spec, report) =
                search::search_pipeline(&c.model, &library, &scores, &costs, &targets, c.kv_budget.as_ref(), &options)?;
            ctx.param("objective", report.objective);
            ctx.param("normalization", &report.normalization);
            for b in &report.budgets {
                ctx.param(&format!("budget:{}", b.name), format!("limit={} total={} slack={}", b.limit, b.total, b.slack));
            }
            let spec_path = ctx.path(files::SPEC);
            spec.save_json(&spec_path)?;
            ctx.output(&spec_path)?;
            let report_path = ctx.path(files::SEARCH_REPORT);
            save_json(&report_path, &report)?;
            ctx.output(&report_path)?;
            let table_path = ctx.path(files::SEARCH_TABLE);
            let table = search::choice_table(&spec, &c.model);
            std::fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
            ctx.output(&table_path)?;
            Ok((spec, report))
        })
    }

    /// Prunes experts and installs attention variants per the searched spec.
    pub fn cmd_assemble(&self) -> Result<(ModelParams, ArchitectureSpec)> {
        stage(self, "assemble", |ctx| {
            let (parent, _) = Self::load_model(ctx, ModelChoice::Parent)?;
            let ranking = ExpertRanking::load_json(ctx.input(&ctx.path(files::RANKING))?)?;
            let spec = ArchitectureSpec::load_json(ctx.input(&ctx.path(files::SPEC))?)?;
            let (child, filled) = library::assemble(&parent, &ranking, &spec)?;
            let (bin, json, spec_path) =
                (ctx.path(files::CHILD_BIN), ctx.path(files::CHILD_JSON), ctx.path(files::CHILD_SPEC));
            child.save(&bin, &json)?;
            filled.save_json(&spec_path)?;
            for p in [&bin, &json, &spec_path] {
                ctx.output(p)?;
            }
            ctx.param("parent_params", parent.param_count());
            ctx.param("child_params", child.param_count());
            ctx.param("child_checksum", child.checksum());
            Ok((child, filled))
        })
    }

    /// Writes `kv_scales_<mode>.json` for the chosen model.
    pub fn cmd_quantize(&self, model: ModelChoice, scales: ScalesChoice) -> Result<QuantizeSummary> {
        stage(self, "quantize", |ctx| {
            let c = &self.config;
            let (params, arch) = Self::load_model(ctx, model)?;
            let calib = c.lm_probes().generate(&c.model)?;
            let q = match scales {
                ScalesChoice::None => QuantScales::unit(params.layers.len()),
                ScalesChoice::Calibrated => kvquant::calibrate_scales(&params, &arch, &calib)?,
            };
            let report = kvquant::quantization_report(&params, &arch, &KvMode::Fp8 { scales: q.clone() }, &calib)?;
            let calibration = kvquant::count_saturations(&params, &arch, &q, &calib)?;
            let summary = QuantizeSummary {
                model: model.name().into(),
                calibration_saturations: calibration.iter().map(|s| s.saturations).sum(),
                quantized_pass_saturations: report.saturations(),
                all_scales_below_one: q.all_below_one(),
                scales: q,
            };
            let path = ctx.path(&files::kv_scales(scales.name()));
            save_json(&path, &summary)?;
            ctx.output(&path)?;
            ctx.param("model", model.name());
            ctx.param("kv_scales", scales.name());
            Ok(summary)
        })
    }

    /// Task accuracy and per-effort generation lengths; appends run records.
    pub fn cmd_eval(&self, model: ModelChoice, precision: KvPrecision, scales: ScalesChoice) -> Result<EvalReport> {
        stage(self, "eval", |ctx| {
            let c = &self.config;
            let (params, arch) = Self::load_model(ctx, model)?;
            let mode = match precision {
                KvPrecision::Bf16 => KvMode::Bf16,
                KvPrecision::Fp8 => {
                    let path = ctx.input(&ctx.path(&files::kv_scales(scales.name())))?;
                    let summary: QuantizeSummary = load_json(&path)?;
                    if summary.model != model.name() {
                        return Err(Error::InvalidInput(format!(
                            "{} holds scales for the {} model",
                            path.display(),
                            summary.model
                        )));
                    }
                    KvMode::Fp8 { scales: summary.scales }
                }
            };

            let task = c.eval_task().generate(&c.model)?;
            task.validate_retrieval()?;
            let mut correct = 0usize;
            for seq in &task.sequences {
                let (trace, _) = kvquant::forward_with_quantized_kv(&params, &arch, &mode, &seq.tokens)?;
                let guess = tensor::argmax(trace.logits.row(trace.logits.rows - 1)) as u32;
                correct += usize::from(Some(guess) == seq.answer);
            }
            let task_accuracy = correct as f64 / task.len() as f64;

            let prompts = c.eval_prompts().generate(&c.model)?;
            let mut efforts = BTreeMap::new();
            for (&effort, &cap) in &c.eval.max_new_tokens {
                let lengths = prompts
                    .sequences
                    .iter()
                    .map(|p| generate_greedy(&params, &arch, &mode, &p.tokens, cap, c.eval.end_token).map(|g| g.len()))
                    .collect::<Result<Vec<_>>>()?;
                let mean_length = lengths.iter().sum::<usize>() as f64 / lengths.len().max(1) as f64;
                efforts.insert(effort, EffortStats { cap, mean_length, lengths });
            }
            let effort_length_ratio = match (efforts.get(&Effort::High), efforts.get(&Effort::Low)) {
                (Some(h), Some(l)) => metrics::effort_length_ratio(h.mean_length, l.mean_length).ok(),
                _ => None,
            };

            let max_throughput = analytic_throughput(c, &params, precision)?;
            let report = EvalReport {
                model: model.name().into(),
                kv_precision: precision,
                kv_scales: scales.name().into(),
                task_accuracy,
                max_throughput,
                efforts,
                effort_length_ratio,
            };
            let name = files::eval_report(model.name(), &precision.to_string(), scales.name());
            let path = ctx.path(&name);
            save_json(&path, &report)?;
            ctx.output(&path)?;

            let records_path = ctx.path(files::RECORDS);
            let mut records =
                if records_path.exists() { metrics::read_records_jsonl(&records_path)? } else { Vec::new() };
            let model_id = match precision {
                KvPrecision::Fp8 => format!("{}-{}", model.name(), scales.name()),
                KvPrecision::Bf16 => model.name().to_string(),
            };
            for (effort, stats) in &report.efforts {
                records.retain(|r| !(r.model_id == model_id && r.kv_precision == precision && r.effort == *effort));
                records.push(RunRecord {
                    model_id: model_id.clone(),
                    kv_precision: precision,
                    effort: *effort,
                    max_throughput,
                    avg_tokens_per_request: stats.mean_length.max(1.0),
                    suite_avg_accuracy: 100.0 * task_accuracy,
                    suite_id: "toy-retrieval".into(),
                    per_benchmark: BTreeMap::from([("retrieval".to_string(), 100.0 * task_accuracy)]),
                });
            }
            metrics::write_records_jsonl(&records_path, &records)?;
            ctx.output(&records_path)?;
            ctx.param("model", model.name());
            ctx.param("kv_precision", precision);
            ctx.param("kv_scales", scales.name());
            Ok(report)
        })
    }

    /// Writes `frontier.csv` and `frontier.json`.
    pub fn cmd_frontier(&self, records: Option<&Path>, baseline: &str) -> Result<Vec<metrics::FrontierPoint>> {
        stage(self, "frontier", |ctx| {
            let path = match records {
                Some(p) => p.to_path_buf(),
                None => ctx.path(files::RECORDS),
            };
            let records = metrics::read_records_jsonl(ctx.input(&path)?)?;
            let points = metrics::emit_frontier(&records, baseline, &self.dir)?;
            ctx.output(&ctx.path(metrics::FRONTIER_CSV))?;
            ctx.output(&ctx.path(metrics::FRONTIER_JSON))?;
            ctx.param("baseline", baseline);
            Ok(points)
        })
    }

    /// Every stage in order on the parent and child, with both FP8 scale
    /// modes, ending in a frontier normalized to the BF16 parent at high effort.
    pub fn run_all(&self) -> Result<Vec<metrics::FrontierPoint>> {
        self.cmd_score(None)?;
        self.cmd_search(None, None)?;
        self.cmd_assemble()?;
        for model in [ModelChoice::Parent, ModelChoice::Child] {
            self.cmd_eval(model, KvPrecision::Bf16, ScalesChoice::None)?;
        }
        self.cmd_quantize(ModelChoice::Child, ScalesChoice::None)?;
        self.cmd_eval(ModelChoice::Child, KvPrecision::Fp8, ScalesChoice::None)?;
        self.cmd_quantize(ModelChoice::Child, ScalesChoice::Calibrated)?;
        self.cmd_eval(ModelChoice::Child, KvPrecision::Fp8, ScalesChoice::Calibrated)?;
        self.cmd_frontier(None, "parent/bf16/high")
    }
}

/// Generated tokens per second in the throughput scenario under the
/// analytic cost model.
fn analytic_throughput(config: &RunConfig, params: &ModelParams, precision: KvPrecision) -> Result<f64> {
    let mut scenario = config
        .scenarios()
        .into_iter()
        .find(|s| s.name == config.eval.throughput_scenario)
        .expect("validated");
    scenario.kv_precision = precision;
    let arch = ArchitectureSpec::from_params(params);
    let library = build_library(&config.model, &config.menu)?;
    let mut costs = cost::analytic_costs(&library, std::slice::from_ref(&scenario), &config.model)?;
    // Child keep counts may fall outside the menu when the parent is edited by hand.
    for (l, spec) in arch.layers.iter().enumerate() {
        let id = library::VariantId::ffn(spec.experts_kept);
        if costs.get(l, &id, &scenario.name).is_none() {
            let sb = library::Subblock::Ffn { experts_kept: spec.experts_kept };
            let time = cost::block_time_cost(&sb, &scenario, &config.model);
            costs.insert(l, id, scenario.name.clone(), cost::BlockCost { time, kv_bytes_per_seq: 0, weight_bytes: 0 });
        }
        let id = library::VariantId::attention(&spec.attention);
        if costs.get(l, &id, &scenario.name).is_none() {
            let sb = library::Subblock::Attention(spec.attention);
            let time = cost::block_time_cost(&sb, &scenario, &config.model);
            costs.insert(l, id, scenario.name.clone(), cost::BlockCost { time, kv_bytes_per_seq: 0, weight_bytes: 0 });
        }
    }
    let t = cost::total_time(&arch, &costs, &scenario.name)?;
    Ok((scenario.batch * scenario.osl) as f64 / t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRankReport {
    pub signal: ScoreSignal,
    pub variant_kind: String,
    pub ranking: Vec<scoring::LayerImportance>,
}

/// Rank-averaged layer importance of each non-parent alternative, one report
/// per (signal, alternative kind) that has per-sample scores.
fn layer_ranks(table: &ScoreTable, library: &BlockLibrary) -> Result<Vec<LayerRankReport>> {
    let mut groups: BTreeMap<(ScoreSignal, String), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for (l, layer) in library.layers.iter().enumerate() {
        let parent_attn = &layer.parent_attention().id;
        let parent_ffn = &layer.parent_ffn().id;
        let ids = layer.attention.iter().map(|a| &a.id).chain(layer.ffn.iter().map(|f| &f.id));
        for id in ids {
            if id == parent_attn || id == parent_ffn {
                continue;
            }
            for e in table.entries.iter().filter(|e| e.layer == l && &e.variant == id) {
                if let Some(ps) = &e.per_sample {
                    let kind = if id.as_str().starts_with("attn/") { "attention-alternative" } else { id.as_str() };
                    groups.entry((e.signal, kind.to_string())).or_default().entry(l).or_insert_with(|| ps.clone());
                }
            }
        }
    }
    groups
        .into_iter()
        .map(|((signal, variant_kind), per_layer)| {
            Ok(LayerRankReport { signal, variant_kind, ranking: scoring::rank_average(&per_layer)? })
        })
        .collect()
}

/// Costs computed for a run's library and scenarios.
pub fn run_costs(config: &RunConfig) -> Result<CostVector> {
    let library = build_library(&config.model, &config.menu)?;
    cost::analytic_costs(&library, &config.scenarios(), &config.model)
}
