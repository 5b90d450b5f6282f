//! Reproducible experiment runs: calibration, prefill, scheduling, reporting.
//!
//! Every command reads an [`ExperimentConfig`] and writes its artifacts into
//! `out_dir`. All randomness derives from the config seed through named
//! streams, and no wall-clock value reaches a report unless the measured cost
//! mode is selected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{partition_sharing_graph, plan_chunks};
use crate::model::{build_model, Model, ModelConfig, WeightManifest, PAD_TOKEN};
use crate::prefill::{calibrate_model, chunked_prefill, full_prefill, greedy_decode, QuantMode, QuantizedWeights, Trace};
use crate::quant::{
    build_hot_channels, HotChannelTable, ImportanceTable, ModelCalibration, CALIBRATION_VERSION, DEFAULT_HOT_COVERAGE,
    DEFAULT_PERCENTILE, DEFAULT_PRUNE_RATE,
};
use crate::rng;
use crate::scheduler::{
    derive_costs, derive_costs_measured, schedule_greedy, schedule_inorder, schedule_optimal, validate_schedule,
    CostMode, CostModel, CostOptions, ScheduleEvent, ScheduleReport, DEFAULT_OPTIMAL_LIMIT,
};
use crate::shadow::memory_footprint;

pub const REPORT_VERSION: u32 = 1;

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const HOT_CHANNELS_FILE: &str = "hot_channels.json";
pub const IMPORTANCE_FILE: &str = "importance.json";
pub const COLD_FILE: &str = "cold.bin";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub prompts: usize,
    pub prompt_len: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            prompts: 4,
            prompt_len: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub mode: CostMode,
    pub npu_speedup: f64,
    pub npu_cpu_ratio: f64,
    pub anchor_tokens: usize,
    pub unit_work: f64,
    pub noise: f64,
    /// Prefill repetitions per median in measured mode.
    pub repeats: usize,
}

impl Default for CostConfig {
    fn default() -> Self {
        let o = CostOptions::default();
        Self {
            mode: CostMode::Synthetic,
            npu_speedup: o.npu_speedup,
            npu_cpu_ratio: o.npu_cpu_ratio,
            anchor_tokens: o.anchor_tokens,
            unit_work: o.unit_work,
            noise: o.noise,
            repeats: 3,
        }
    }
}

/// Experiment settings. Values come from, in increasing priority: defaults,
/// the TOML config file, environment variables, command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Required; every random stream derives from it.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub prompt_lens: Vec<usize>,
    pub chunk_len: usize,
    pub quant_modes: Vec<QuantMode>,
    pub percentile: f64,
    pub prune_rate: f64,
    pub hot_coverage: f64,
    pub calibration: CalibrationConfig,
    pub cost: CostConfig,
    /// Also run the exhaustive scheduler; fails on instances above `optimal_limit`.
    pub optimal: bool,
    pub optimal_limit: usize,
    pub decode_tokens: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out_dir: PathBuf::from("out"),
            model: ModelConfig::default(),
            prompt_lens: vec![256, 1024],
            chunk_len: 256,
            quant_modes: QuantMode::ALL.to_vec(),
            percentile: DEFAULT_PERCENTILE,
            prune_rate: DEFAULT_PRUNE_RATE,
            hot_coverage: DEFAULT_HOT_COVERAGE,
            calibration: CalibrationConfig::default(),
            cost: CostConfig::default(),
            optimal: false,
            optimal_limit: DEFAULT_OPTIMAL_LIMIT,
            decode_tokens: 16,
        }
    }
}

/// Values supplied on the command line or through the environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub chunk_len: Option<usize>,
    pub quant_mode: Option<QuantMode>,
    pub prune_rate: Option<f64>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = Some(s);
        }
        if let Some(c) = o.chunk_len {
            self.chunk_len = c;
        }
        if let Some(m) = o.quant_mode {
            self.quant_modes = vec![m];
        }
        if let Some(r) = o.prune_rate {
            self.prune_rate = r;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
    }

    /// Checks every field and returns the seed.
    pub fn validate(&self) -> Result<u64> {
        let seed = self
            .seed
            .ok_or_else(|| Error::InvalidConfig("a seed is required (config, env or --seed)".into()))?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.chunk_len == 0 {
            return bad("chunk_len must be positive".into());
        }
        if self.prompt_lens.is_empty() || self.prompt_lens.contains(&0) {
            return bad(format!("prompt_lens must be non-empty and positive, got {:?}", self.prompt_lens));
        }
        if self.quant_modes.is_empty() {
            return bad("quant_modes is empty".into());
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return bad(format!("percentile {} outside (0, 100]", self.percentile));
        }
        if !(0.0..=1.0).contains(&self.prune_rate) {
            return bad(format!("prune_rate {} outside [0, 1]", self.prune_rate));
        }
        if !(self.hot_coverage > 0.0 && self.hot_coverage <= 1.0) {
            return bad(format!("hot_coverage {} outside (0, 1]", self.hot_coverage));
        }
        if self.calibration.prompts == 0 || self.calibration.prompt_len == 0 {
            return bad("calibration corpus is empty".into());
        }
        self.model_config(seed).validate()?;
        Ok(seed)
    }

    /// The model settings with the experiment seed and chunk length applied.
    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            seed,
            chunk_len: self.chunk_len,
            ..self.model.clone()
        }
    }

    fn cost_options(&self, seed: u64) -> CostOptions {
        CostOptions {
            npu_speedup: self.cost.npu_speedup,
            npu_cpu_ratio: self.cost.npu_cpu_ratio,
            anchor_tokens: self.cost.anchor_tokens,
            unit_work: self.cost.unit_work,
            noise: self.cost.noise,
            seed,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

/// Seeded prompt of `len` tokens; never contains the pad token.
pub fn prompt_tokens(seed: u64, stream: &str, len: usize, vocab: usize) -> Vec<u32> {
    let mut r = rng::stream(seed, stream);
    (0..len).map(|_| r.gen_range(PAD_TOKEN + 1..vocab as u32)).collect()
}

fn eval_prompt(seed: u64, len: usize, vocab: usize) -> Vec<u32> {
    prompt_tokens(seed, &format!("prompts-{len}"), len, vocab)
}

fn calibration_corpus(cfg: &ExperimentConfig, seed: u64, vocab: usize) -> Vec<Vec<u32>> {
    (0..cfg.calibration.prompts)
        .map(|i| prompt_tokens(seed, &format!("corpus-{i}"), cfg.calibration.prompt_len, vocab))
        .collect()
}

// ---------------------------------------------------------------- reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub percentile: f64,
    pub hot_coverage: f64,
    pub prune_rate: f64,
    pub sites: usize,
    pub total_outliers: u64,
    pub total_elements: u64,
    pub hot_channels: usize,
    pub total_channels: usize,
    pub pruned_layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub mode: QuantMode,
    /// Max absolute logit difference against the float32 single-pass prefill.
    pub max_abs_error: f64,
    pub fetched_rows: usize,
    pub fetched_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub naive_graph_bytes: u64,
    pub shared_graph_bytes: u64,
    pub static_graph_bytes: u64,
    pub naive_over_shared: f64,
    pub int8_weight_bytes: u64,
    pub shadow_resident_float_bytes: u64,
    pub shadow_full_copy_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefillReport {
    pub modes: Vec<ModeResult>,
    pub memory: MemoryReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerResult {
    pub makespan: u64,
    pub npu_busy: u64,
    pub cpu_busy: u64,
    pub bubble_rate: f64,
    /// Prompt tokens per second, one time unit taken as one microsecond.
    pub tokens_per_sec: f64,
    pub events: Vec<ScheduleEvent>,
}

impl SchedulerResult {
    fn new(r: &ScheduleReport, prompt_len: usize) -> Self {
        Self {
            makespan: r.makespan,
            npu_busy: r.npu_busy,
            cpu_busy: r.cpu_busy,
            bubble_rate: r.bubble_rate,
            tokens_per_sec: prompt_len as f64 / (r.makespan as f64 * 1e-6),
            events: r.events.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSummary {
    pub cost_mode: CostMode,
    pub subgraphs: usize,
    pub npu_total: u64,
    pub cpu_total: u64,
    pub inorder: SchedulerResult,
    pub greedy: SchedulerResult,
    pub optimal: Option<SchedulerResult>,
    /// Makespan reduction of greedy over in-order, percent.
    pub improvement_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptReport {
    pub prompt_len: usize,
    pub chunk_len: usize,
    pub num_chunks: usize,
    pub prefill: Option<PrefillReport>,
    pub schedule: Option<ScheduleSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeReport {
    pub prompt_len: usize,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub seed: u64,
    pub calibration: Option<CalibrationSummary>,
    /// Sorted by prompt length.
    pub prompts: Vec<PromptReport>,
    pub decode: Option<DecodeReport>,
}

impl RunReport {
    fn empty(seed: u64) -> Self {
        Self {
            version: REPORT_VERSION,
            seed,
            calibration: None,
            prompts: Vec::new(),
            decode: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Parses a fragment, rejecting other schema versions.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let found = v.get("version").and_then(|x| x.as_u64()).unwrap_or(0) as u32;
        if found != REPORT_VERSION {
            return Err(Error::VersionMismatch {
                expected: REPORT_VERSION,
                found,
            });
        }
        Ok(serde_json::from_value(v)?)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed {}", self.seed);
        if let Some(c) = &self.calibration {
            let _ = writeln!(
                s,
                "calibration: p{} {} outliers / {} values, {} of {} channels hot, pruned layers {:?}",
                c.percentile, c.total_outliers, c.total_elements, c.hot_channels, c.total_channels, c.pruned_layers
            );
        }
        for p in &self.prompts {
            let _ = writeln!(s, "prompt {} ({} x {}):", p.prompt_len, p.num_chunks, p.chunk_len);
            if let Some(pre) = &p.prefill {
                for m in &pre.modes {
                    let _ = writeln!(
                        s,
                        "  {:<12} max |err| {:.3e}  fetched {} rows",
                        m.mode.as_str(),
                        m.max_abs_error,
                        m.fetched_rows
                    );
                }
                let mem = &pre.memory;
                let _ = writeln!(
                    s,
                    "  graph memory naive {} B, shared {} B ({:.2}x); shadow float {} B of {} B",
                    mem.naive_graph_bytes,
                    mem.shared_graph_bytes,
                    mem.naive_over_shared,
                    mem.shadow_resident_float_bytes,
                    mem.shadow_full_copy_bytes
                );
            }
            if let Some(sc) = &p.schedule {
                let mut line = |name: &str, r: &SchedulerResult| {
                    let _ = writeln!(
                        s,
                        "  {:<8} makespan {:>8}  bubble {:.3}  {:.0} tok/s",
                        name, r.makespan, r.bubble_rate, r.tokens_per_sec
                    );
                };
                line("inorder", &sc.inorder);
                line("greedy", &sc.greedy);
                if let Some(o) = &sc.optimal {
                    line("optimal", o);
                }
                let _ = writeln!(s, "  greedy improvement {:.1}%", sc.improvement_pct);
            }
        }
        if let Some(d) = &self.decode {
            let _ = writeln!(s, "decode after {} tokens: {:?}", d.prompt_len, d.tokens);
        }
        s
    }
}

/// Merges fragments of one run. Sections missing from earlier fragments are
/// filled from later ones; the first fragment wins where both have a value.
pub fn merge_reports(fragments: &[RunReport]) -> Result<RunReport> {
    let first = fragments
        .first()
        .ok_or_else(|| Error::InvalidArgument("no report fragments to merge".into()))?;
    let mut out = RunReport::empty(first.seed);
    let mut prompts: BTreeMap<(usize, usize), PromptReport> = BTreeMap::new();
    for f in fragments {
        if f.version != REPORT_VERSION {
            return Err(Error::VersionMismatch {
                expected: REPORT_VERSION,
                found: f.version,
            });
        }
        if f.seed != first.seed {
            return Err(Error::InvalidArgument(format!(
                "fragments from different seeds ({} and {})",
                first.seed, f.seed
            )));
        }
        if out.calibration.is_none() {
            out.calibration = f.calibration.clone();
        }
        if out.decode.is_none() {
            out.decode = f.decode.clone();
        }
        for p in &f.prompts {
            let e = prompts.entry((p.prompt_len, p.chunk_len)).or_insert_with(|| PromptReport {
                prefill: None,
                schedule: None,
                ..p.clone()
            });
            if e.prefill.is_none() {
                e.prefill = p.prefill.clone();
            }
            if e.schedule.is_none() {
                e.schedule = p.schedule.clone();
            }
        }
    }
    out.prompts = prompts.into_values().collect();
    Ok(out)
}

// ---------------------------------------------------------------- commands

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write(path, (serde_json::to_string_pretty(v)? + "\n").as_bytes())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))
}

/// Builds the toy model, calibrates it on a seeded corpus, and writes the
/// weights, calibration profiles, hot-channel table and layer importance.
pub fn cmd_calibrate(cfg: &ExperimentConfig) -> Result<RunReport> {
    let seed = cfg.validate()?;
    ensure_out_dir(cfg)?;
    let mcfg = cfg.model_config(seed);
    let model = build_model(&mcfg)?;
    model.export(&cfg.path(WEIGHTS_FILE), &cfg.path(MANIFEST_FILE))?;
    let corpus = calibration_corpus(cfg, seed, mcfg.vocab);
    let calibration = calibrate_model(&model, &corpus, cfg.percentile)?;
    let hot = build_hot_channels(&calibration.profiles, cfg.hot_coverage)?;
    let importance = ImportanceTable::build(&calibration.profiles, cfg.prune_rate)?;
    write_json(&cfg.path(CALIBRATION_FILE), &calibration)?;
    write_json(&cfg.path(HOT_CHANNELS_FILE), &hot)?;
    write_json(&cfg.path(IMPORTANCE_FILE), &importance)?;
    let mut report = RunReport::empty(seed);
    report.calibration = Some(CalibrationSummary {
        percentile: cfg.percentile,
        hot_coverage: cfg.hot_coverage,
        prune_rate: cfg.prune_rate,
        sites: calibration.profiles.len(),
        total_outliers: calibration.profiles.iter().map(|p| p.total_outliers()).sum(),
        total_elements: calibration
            .profiles
            .iter()
            .map(|p| (p.rows * p.channel_counts.len()) as u64)
            .sum(),
        hot_channels: hot.entries.iter().map(|e| e.hot_channels.len()).sum(),
        total_channels: calibration.profiles.iter().map(|p| p.channel_counts.len()).sum(),
        pruned_layers: importance.pruned_layers().into_iter().collect(),
    });
    Ok(report)
}

/// Calibration artifacts loaded from `out_dir`.
pub struct Artifacts {
    pub model: Model,
    pub calibration: ModelCalibration,
    pub hot: HotChannelTable,
    pub importance: ImportanceTable,
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingCalibration(path))
    }
}

pub fn load_artifacts(cfg: &ExperimentConfig, seed: u64) -> Result<Artifacts> {
    let manifest_path = require(cfg.path(MANIFEST_FILE))?;
    let manifest: WeightManifest = read_json(&manifest_path)?;
    if manifest.config != cfg.model_config(seed) {
        return Err(Error::InvalidConfig(format!(
            "{} was written for a different model config or seed",
            manifest_path.display()
        )));
    }
    let model = Model::import(&manifest_path)?;
    let calibration: ModelCalibration = read_json(&require(cfg.path(CALIBRATION_FILE))?)?;
    let hot: HotChannelTable = read_json(&require(cfg.path(HOT_CHANNELS_FILE))?)?;
    let mut importance: ImportanceTable = read_json(&require(cfg.path(IMPORTANCE_FILE))?)?;
    for found in [calibration.version, hot.version, importance.version] {
        if found != CALIBRATION_VERSION {
            return Err(Error::VersionMismatch {
                expected: CALIBRATION_VERSION,
                found,
            });
        }
    }
    for p in &calibration.profiles {
        p.validate()?;
    }
    if importance.prune_rate != cfg.prune_rate {
        importance = ImportanceTable::build(&calibration.profiles, cfg.prune_rate)?;
    }
    Ok(Artifacts {
        model,
        calibration,
        hot,
        importance,
    })
}

fn trace_file(len: usize) -> String {
    format!("trace_{len}.json")
}

/// Runs chunked prefill in every configured mode for every prompt length and
/// compares logits with a float32 single-pass prefill.
pub fn cmd_prefill(cfg: &ExperimentConfig) -> Result<RunReport> {
    let seed = cfg.validate()?;
    ensure_out_dir(cfg)?;
    let quantized = cfg.quant_modes.iter().any(|&m| m != QuantMode::Float32);
    let art = if quantized { Some(load_artifacts(cfg, seed)?) } else { None };
    let built;
    let model = match &art {
        Some(a) => &a.model,
        None => {
            built = build_model(&cfg.model_config(seed))?;
            &built
        }
    };
    let qw = match &art {
        Some(a) => Some(QuantizedWeights::build(
            &a.model,
            &a.calibration,
            &a.hot,
            &a.importance,
            &cfg.path(COLD_FILE),
        )?),
        None => None,
    };
    let mut report = RunReport::empty(seed);
    for &len in &cfg.prompt_lens {
        let tokens = eval_prompt(seed, len, model.cfg.vocab);
        let plan = plan_chunks(len, cfg.chunk_len)?;
        let oracle = full_prefill(model, &tokens, QuantMode::Float32, None)?;
        let mut modes = Vec::new();
        let mut trace: Option<Trace> = None;
        for &mode in &cfg.quant_modes {
            let out = chunked_prefill(model, &tokens, &plan, mode, qw.as_ref())?;
            if !out.logits.all_finite() {
                return Err(Error::Invariant(format!("non-finite logits in {mode} prefill of {len} tokens")));
            }
            let fetched: Vec<_> = out.fetch.fetched().collect();
            modes.push(ModeResult {
                mode,
                max_abs_error: out.logits.max_abs_diff(&oracle.logits)? as f64,
                fetched_rows: fetched.len(),
                fetched_bytes: out.fetch.fetched_bytes,
            });
            trace.get_or_insert(out.trace);
        }
        let trace = trace.expect("at least one mode");
        write_json(&cfg.path(&trace_file(len)), &trace)?;
        let (_, sharing) = partition_sharing_graph(&model.cfg, &plan);
        let foot = qw.as_ref().map(|q| memory_footprint(&q.linears())).unwrap_or_default();
        report.prompts.push(PromptReport {
            prompt_len: len,
            chunk_len: cfg.chunk_len,
            num_chunks: plan.num_chunks,
            prefill: Some(PrefillReport {
                modes,
                memory: MemoryReport {
                    naive_graph_bytes: sharing.naive_bytes,
                    shared_graph_bytes: sharing.shared_bytes,
                    static_graph_bytes: sharing.static_bytes(),
                    naive_over_shared: sharing.naive_over_shared(),
                    int8_weight_bytes: foot.int8_bytes,
                    shadow_resident_float_bytes: foot.hot_float_bytes + foot.hot_index_bytes,
                    shadow_full_copy_bytes: foot.full_copy_float_bytes,
                },
            }),
            schedule: None,
        });
    }
    report.prompts.sort_by_key(|p| p.prompt_len);
    Ok(report)
}

fn load_or_trace(cfg: &ExperimentConfig, seed: u64, len: usize, model: &mut Option<Model>) -> Result<Trace> {
    let path = cfg.path(&trace_file(len));
    if path.is_file() {
        let t: Trace = read_json(&path)?;
        if t.prompt_len == len && t.chunk_len == cfg.chunk_len && t.layers == cfg.model.layers {
            return Ok(t);
        }
    }
    let m = match model {
        Some(m) => m,
        None => model.insert(build_model(&cfg.model_config(seed))?),
    };
    let tokens = eval_prompt(seed, len, m.cfg.vocab);
    let plan = plan_chunks(len, cfg.chunk_len)?;
    let t = chunked_prefill(m, &tokens, &plan, QuantMode::Float32, None)?.trace;
    write_json(&path, &t)?;
    Ok(t)
}

/// Derives a cost table from each prompt's trace, runs the in-order and
/// greedy schedulers (and the exhaustive one when enabled), validates every
/// schedule, and writes the cost table and a Gantt CSV per prompt length.
pub fn cmd_schedule(cfg: &ExperimentConfig) -> Result<RunReport> {
    let seed = cfg.validate()?;
    ensure_out_dir(cfg)?;
    let mut model = None;
    let mut report = RunReport::empty(seed);
    for &len in &cfg.prompt_lens {
        let (costs, trace) = match cfg.cost.mode {
            CostMode::Synthetic => {
                let trace = load_or_trace(cfg, seed, len, &mut model)?;
                let cm = derive_costs(&cfg.model_config(seed), &trace, &cfg.cost_options(seed))?;
                (cm, trace)
            }
            CostMode::Measured => {
                let m = match &mut model {
                    Some(m) => m,
                    None => model.insert(build_model(&cfg.model_config(seed))?),
                };
                let tokens = eval_prompt(seed, len, m.cfg.vocab);
                derive_costs_measured(
                    m,
                    &tokens,
                    cfg.chunk_len,
                    QuantMode::Float32,
                    None,
                    cfg.cost.repeats,
                    cfg.cost.npu_speedup,
                )?
            }
        };
        write(&cfg.path(&format!("costs_{len}.json")), costs.to_json()?.as_bytes())?;
        let summary = run_schedulers(cfg, &costs, &trace)?;
        report.prompts.push(PromptReport {
            prompt_len: len,
            chunk_len: cfg.chunk_len,
            num_chunks: trace.num_chunks,
            prefill: None,
            schedule: Some(summary.0),
        });
        write(&cfg.path(&format!("gantt_{len}.csv")), summary.1.as_bytes())?;
    }
    report.prompts.sort_by_key(|p| p.prompt_len);
    Ok(report)
}

fn run_schedulers(cfg: &ExperimentConfig, costs: &CostModel, trace: &Trace) -> Result<(ScheduleSummary, String)> {
    let (graph, nc) = costs.node_costs(trace)?;
    let inorder = schedule_inorder(&graph, &nc)?;
    let greedy = schedule_greedy(&graph, &nc)?;
    validate_schedule(&graph, &nc, &inorder)?;
    validate_schedule(&graph, &nc, &greedy)?;
    let optimal = if cfg.optimal {
        let o = schedule_optimal(&graph, &nc, cfg.optimal_limit)?;
        validate_schedule(&graph, &nc, &o)?;
        if o.makespan > greedy.makespan || o.makespan > inorder.makespan {
            return Err(Error::Invariant(format!(
                "optimal makespan {} exceeds a heuristic schedule",
                o.makespan
            )));
        }
        Some(o)
    } else {
        None
    };
    let mut csv = inorder.gantt_csv();
    for r in std::iter::once(&greedy).chain(optimal.as_ref()) {
        csv.push_str(r.gantt_csv().split_once('\n').map_or("", |x| x.1));
    }
    let (npu_total, cpu_total) = nc.totals(&graph);
    let len = trace.prompt_len;
    Ok((
        ScheduleSummary {
            cost_mode: costs.mode,
            subgraphs: graph.len(),
            npu_total,
            cpu_total,
            improvement_pct: 100.0 * (1.0 - greedy.makespan as f64 / inorder.makespan as f64),
            inorder: SchedulerResult::new(&inorder, len),
            greedy: SchedulerResult::new(&greedy, len),
            optimal: optimal.as_ref().map(|o| SchedulerResult::new(o, len)),
        },
        csv,
    ))
}

/// Reads report fragments, merges them, and returns the merged report with
/// its human-readable summary.
pub fn cmd_report(paths: &[PathBuf]) -> Result<(RunReport, String)> {
    let fragments = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            RunReport::from_json(&text)
        })
        .collect::<Result<Vec<_>>>()?;
    let merged = merge_reports(&fragments)?;
    let summary = merged.summary();
    Ok((merged, summary))
}

/// Calibrate, prefill, schedule, then greedily decode after the shortest
/// prompt; writes `report.json` and `summary.txt` into `out_dir`.
pub fn cmd_demo(cfg: &ExperimentConfig) -> Result<RunReport> {
    let seed = cfg.validate()?;
    let cal = cmd_calibrate(cfg)?;
    let pre = cmd_prefill(cfg)?;
    let sched = cmd_schedule(cfg)?;
    let mut report = merge_reports(&[cal, pre, sched])?;
    let model = Model::import(&cfg.path(MANIFEST_FILE))?;
    let len = *cfg.prompt_lens.iter().min().expect("validated non-empty");
    let tokens = eval_prompt(seed, len, model.cfg.vocab);
    let plan = plan_chunks(len, cfg.chunk_len)?;
    let mut out = chunked_prefill(&model, &tokens, &plan, QuantMode::Float32, None)?;
    report.decode = Some(DecodeReport {
        prompt_len: len,
        tokens: greedy_decode(&model, &mut out.kv, &out.logits, cfg.decode_tokens)?,
    });
    write(&cfg.path(REPORT_FILE), report.to_json()?.as_bytes())?;
    write(&cfg.path(SUMMARY_FILE), report.summary().as_bytes())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            seed: Some(3),
            out_dir: dir.to_path_buf(),
            model: ModelConfig {
                layers: 2,
                hidden: 32,
                heads: 4,
                vocab: 128,
                ..ModelConfig::default()
            },
            prompt_lens: vec![20, 48],
            chunk_len: 16,
            calibration: CalibrationConfig {
                prompts: 2,
                prompt_len: 40,
            },
            decode_tokens: 4,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn seed_is_mandatory() {
        let cfg = ExperimentConfig::default();
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn toml_nesting_and_overrides() {
        let mut cfg = ExperimentConfig::from_toml(
            "seed = 5\nprompt_lens = [64]\n[model]\nlayers = 20\n[cost]\nnpu_speedup = 4.0\n",
        )
        .unwrap();
        assert_eq!(cfg.model.layers, 20);
        assert_eq!(cfg.model.hidden, 256);
        assert_eq!(cfg.cost.npu_speedup, 4.0);
        cfg.apply(&Overrides {
            seed: Some(9),
            quant_mode: Some(QuantMode::W8A8Naive),
            ..Overrides::default()
        });
        assert_eq!(cfg.seed, Some(9));
        assert_eq!(cfg.quant_modes, vec![QuantMode::W8A8Naive]);
        assert!(matches!(ExperimentConfig::from_toml("sed = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn missing_calibration() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        assert!(matches!(cmd_prefill(&cfg), Err(Error::MissingCalibration(_))));
        let float_only = ExperimentConfig {
            quant_modes: vec![QuantMode::Float32],
            ..cfg
        };
        let r = cmd_prefill(&float_only).unwrap();
        assert!(r.prompts[0].prefill.as_ref().unwrap().modes[0].max_abs_error <= 1e-4);
    }

    #[test]
    fn demo_is_reproducible_and_merges() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let a = cmd_demo(&cfg).unwrap();
        let bytes = fs::read(dir.path().join(REPORT_FILE)).unwrap();
        let cal = fs::read(dir.path().join(CALIBRATION_FILE)).unwrap();
        let b = cmd_demo(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(bytes, fs::read(dir.path().join(REPORT_FILE)).unwrap());
        assert_eq!(cal, fs::read(dir.path().join(CALIBRATION_FILE)).unwrap());
        assert_eq!(a.prompts.len(), 2);
        assert_eq!(a.prompts[1].num_chunks, 3);
        assert_eq!(a.decode.as_ref().unwrap().tokens.len(), 4);
        let (merged, text) = cmd_report(&[dir.path().join(REPORT_FILE)]).unwrap();
        assert_eq!(merged, a);
        assert!(text.contains("greedy improvement"));
    }

    #[test]
    fn merge_rules() {
        assert!(matches!(merge_reports(&[]), Err(Error::InvalidArgument(_))));
        let a = RunReport::empty(1);
        let mut b = RunReport::empty(1);
        b.version = 99;
        assert!(matches!(merge_reports(&[a.clone(), b]), Err(Error::VersionMismatch { .. })));
        let json = a.to_json().unwrap().replace("\"version\": 1", "\"version\": 2");
        assert!(matches!(RunReport::from_json(&json), Err(Error::VersionMismatch { found: 2, .. })));
        assert!(merge_reports(&[a, RunReport::empty(2)]).is_err());
    }

    #[test]
    fn optimal_on_oversized_instance_fails() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            optimal: true,
            ..small(dir.path())
        };
        assert!(matches!(cmd_schedule(&cfg), Err(Error::InstanceTooLarge { .. })));
    }

    #[test]
    fn single_chunk_schedules_tie() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            prompt_lens: vec![16],
            ..small(dir.path())
        };
        let r = cmd_schedule(&cfg).unwrap();
        assert_eq!(r.prompts[0].schedule.as_ref().unwrap().improvement_pct, 0.0);
    }
}
