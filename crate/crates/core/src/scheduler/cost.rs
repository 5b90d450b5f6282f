//! Per-subgraph duration tables.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{plan_chunks, Processor, StageKind};
use crate::model::{Model, ModelConfig};
use crate::prefill::{chunked_prefill_observed, duration_key, PrefillObserver, QuantMode, QuantizedWeights, Trace, TraceEntry};
use crate::rng;

use super::deps::{build_dependencies, DependencyGraph, NodeCosts, StageDesc};

pub const COST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostMode {
    Synthetic,
    Measured,
}

impl std::str::FromStr for CostMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(CostMode::Synthetic),
            "measured" => Ok(CostMode::Measured),
            _ => Err(Error::InvalidArgument(format!("unknown cost mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CostEntry {
    pub stage_kind: StageKind,
    pub chunk: usize,
    pub processor: Processor,
    pub shape_key: String,
    pub duration: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostOptions {
    /// CPU time over NPU time for the same int8 work.
    pub npu_speedup: f64,
    /// Target total NPU time over total CPU time for one anchor-sized chunk.
    pub npu_cpu_ratio: f64,
    pub anchor_tokens: usize,
    /// Operations per simulated time unit at CPU speed.
    pub unit_work: f64,
    /// Relative multiplicative jitter, 0 disables it.
    pub noise: f64,
    pub seed: u64,
}

impl Default for CostOptions {
    fn default() -> Self {
        Self {
            npu_speedup: 5.0,
            npu_cpu_ratio: 2.0,
            anchor_tokens: 256,
            unit_work: 10_000.0,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl CostOptions {
    fn check(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.npu_speedup) || !pos(self.npu_cpu_ratio) || !pos(self.unit_work) || self.anchor_tokens == 0 {
            return Err(Error::InvalidCost(format!("bad cost options {self:?}")));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::InvalidCost(format!("noise {} outside [0, 1)", self.noise)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub version: u32,
    pub mode: CostMode,
    pub npu_speedup: f64,
    /// Multiplier applied to CPU stage work (1 in measured mode).
    pub cpu_scale: f64,
    /// Sorted by `(stage_kind, chunk, processor, shape_key)`.
    pub entries: Vec<CostEntry>,
}

type Key = (StageKind, usize, Processor, String);

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if self.version != COST_VERSION {
            return Err(Error::VersionMismatch {
                expected: COST_VERSION,
                found: self.version,
            });
        }
        let mut prev: Option<Key> = None;
        for e in &self.entries {
            if e.duration == 0 {
                return Err(Error::InvalidCost(format!("zero duration for {} chunk {}", e.shape_key, e.chunk)));
            }
            if e.processor != e.stage_kind.processor() {
                return Err(Error::InvalidCost(format!("{} placed on {}", e.stage_kind, e.processor)));
            }
            let k = key(e);
            if prev.as_ref().is_some_and(|p| *p >= k) {
                return Err(Error::InvalidCost(format!("entries unsorted or duplicated at {k:?}")));
            }
            prev = Some(k);
        }
        Ok(())
    }

    pub fn lookup(&self, kind: StageKind, chunk: usize, processor: Processor, shape_key: &str) -> Option<u64> {
        let k = (kind, chunk, processor, shape_key.to_string());
        self.entries
            .binary_search_by(|e| key(e).cmp(&k))
            .ok()
            .map(|i| self.entries[i].duration)
    }

    /// Dependency graph and per-node durations for the subgraphs of `trace`.
    pub fn node_costs(&self, trace: &Trace) -> Result<(DependencyGraph, NodeCosts)> {
        self.validate()?;
        let m = trace.stages();
        let graph = build_dependencies(trace.num_chunks, &StageDesc::for_layers(trace.layers))?;
        if trace.entries.len() != graph.len() {
            return Err(Error::InvalidCost(format!(
                "trace has {} entries for {} subgraphs",
                trace.entries.len(),
                graph.len()
            )));
        }
        let mut d = vec![0u64; graph.len()];
        for e in &trace.entries {
            if e.chunk >= trace.num_chunks || e.stage >= m {
                return Err(Error::InvalidCost(format!("trace entry ({},{}) out of range", e.chunk, e.stage)));
            }
            d[graph.id(e.chunk, e.stage)] = self
                .lookup(e.kind, e.chunk, e.processor, &e.key)
                .ok_or_else(|| Error::InvalidCost(format!("no cost for {} chunk {}", e.key, e.chunk)))?;
        }
        Ok((graph, NodeCosts::new(d)?))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: CostModel = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }
}

fn key(e: &CostEntry) -> Key {
    (e.stage_kind, e.chunk, e.processor, e.shape_key.clone())
}

/// Arithmetic operation count of one stage: multiply-accumulates of the
/// linears and attention products plus a few ops per elementwise element.
pub fn stage_work(cfg: &ModelConfig, kind: StageKind, chunk_len: usize, kv_len: usize) -> u64 {
    let (h, f, c, kv) = (cfg.hidden as u64, cfg.ffn() as u64, chunk_len as u64, kv_len as u64);
    match kind {
        // norm (square, sum, scale), quantize, qkv
        StageKind::NormQkv => 4 * c * h + c * h + c * h * 3 * h,
        // rope on q and k, q.k^T and p.v per head, softmax
        StageKind::Attention => 2 * 3 * c * h + 2 * c * kv * h + 5 * c * kv * cfg.heads as u64,
        StageKind::OutProj => c * h + c * h * h + c * h,
        StageKind::FfnNorm => 4 * c * h,
        // quantize, gate|up, silu * up, quantize, down, residual
        StageKind::Ffn => c * h + c * h * 2 * f + 5 * c * f + c * f + c * f * h + c * h,
    }
}

/// Analytic durations: NPU stages take `work / npu_speedup`, CPU stages take
/// `work * cpu_scale`, where `cpu_scale` makes one anchor-sized chunk spend
/// `npu_cpu_ratio` times as long on the NPU as on the CPU.
pub fn derive_costs(cfg: &ModelConfig, trace: &Trace, opts: &CostOptions) -> Result<CostModel> {
    opts.check()?;
    let a = opts.anchor_tokens;
    let (mut npu, mut cpu) = (0.0, 0.0);
    for kind in StageKind::LAYER {
        let w = stage_work(cfg, kind, a, a) as f64;
        match kind.processor() {
            Processor::Npu => npu += w / opts.npu_speedup,
            Processor::Cpu => cpu += w,
        }
    }
    let cpu_scale = npu / (opts.npu_cpu_ratio * cpu);
    let mut shapes: BTreeMap<Key, u64> = BTreeMap::new();
    for e in &trace.entries {
        let w = stage_work(cfg, e.kind, e.chunk_len, e.kv_len) as f64;
        let t = match e.processor {
            Processor::Npu => w / opts.npu_speedup,
            Processor::Cpu => w * cpu_scale,
        };
        shapes.insert((e.kind, e.chunk, e.processor, e.key.clone()), to_units(t / opts.unit_work));
    }
    let mut noise = rng::stream(opts.seed, "cost-noise");
    let entries = shapes
        .into_iter()
        .map(|((stage_kind, chunk, processor, shape_key), d)| {
            let duration = if opts.noise > 0.0 {
                to_units(d as f64 * (1.0 + opts.noise * noise.gen_range(-1.0..=1.0)))
            } else {
                d
            };
            CostEntry {
                stage_kind,
                chunk,
                processor,
                shape_key,
                duration,
            }
        })
        .collect();
    let model = CostModel {
        version: COST_VERSION,
        mode: CostMode::Synthetic,
        npu_speedup: opts.npu_speedup,
        cpu_scale,
        entries,
    };
    model.validate()?;
    Ok(model)
}

fn to_units(t: f64) -> u64 {
    (t.ceil() as u64).max(1)
}

#[derive(Default)]
struct Timer {
    samples: BTreeMap<Key, Vec<Duration>>,
}

impl PrefillObserver for Timer {
    fn stage_done(&mut self, e: &TraceEntry, wall: Duration) {
        self.samples
            .entry((e.kind, e.chunk, e.processor, e.key.clone()))
            .or_default()
            .push(wall);
    }
}

/// Wall-clock medians over `repeats` prefill runs of the toy kernels, in
/// microseconds; NPU stages are divided by `npu_speedup`. Not reproducible
/// across runs.
pub fn derive_costs_measured(
    model: &Model,
    tokens: &[u32],
    chunk_len: usize,
    mode: QuantMode,
    quant: Option<&QuantizedWeights>,
    repeats: usize,
    npu_speedup: f64,
) -> Result<(CostModel, Trace)> {
    if repeats == 0 || !(npu_speedup.is_finite() && npu_speedup > 0.0) {
        return Err(Error::InvalidCost(format!("repeats {repeats}, speedup {npu_speedup}")));
    }
    let plan = plan_chunks(tokens.len(), chunk_len)?;
    let mut timer = Timer::default();
    let mut trace = None;
    for _ in 0..repeats {
        trace = Some(chunked_prefill_observed(model, tokens, &plan, mode, quant, &mut timer)?.trace);
    }
    let entries = timer
        .samples
        .into_iter()
        .map(|((stage_kind, chunk, processor, shape_key), mut v)| {
            v.sort_unstable();
            let us = v[v.len() / 2].as_secs_f64() * 1e6;
            let t = if processor == Processor::Npu { us / npu_speedup } else { us };
            CostEntry {
                stage_kind,
                chunk,
                processor,
                shape_key,
                duration: to_units(t),
            }
        })
        .collect();
    let cm = CostModel {
        version: COST_VERSION,
        mode: CostMode::Measured,
        npu_speedup,
        cpu_scale: 1.0,
        entries,
    };
    cm.validate()?;
    Ok((cm, trace.expect("repeats > 0")))
}

/// Shape key of a stage execution, re-exported for callers building tables by hand.
pub fn shape_key(kind: StageKind, chunk_len: usize, kv_len: usize) -> String {
    duration_key(kind, chunk_len, kv_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::STAGES_PER_LAYER;
    use crate::prefill::TRACE_VERSION;

    fn synthetic_trace(cfg: &ModelConfig, prompt: usize, chunk_len: usize) -> Trace {
        let plan = plan_chunks(prompt, chunk_len).unwrap();
        let mut entries = Vec::new();
        for i in 0..plan.num_chunks {
            for j in 0..cfg.layers * STAGES_PER_LAYER {
                let kind = StageKind::LAYER[j % STAGES_PER_LAYER];
                let kv = plan.kv_len(i);
                entries.push(TraceEntry {
                    chunk: i,
                    layer: j / STAGES_PER_LAYER,
                    stage: j,
                    kind,
                    processor: kind.processor(),
                    chunk_len,
                    kv_len: kv,
                    key: duration_key(kind, chunk_len, kv),
                });
            }
        }
        Trace {
            version: TRACE_VERSION,
            prompt_len: prompt,
            chunk_len,
            num_chunks: plan.num_chunks,
            layers: cfg.layers,
            mode: QuantMode::Float32,
            entries,
        }
    }

    #[test]
    fn anchor_ratio() {
        let cfg = ModelConfig::default();
        let t = synthetic_trace(&cfg, 256, 256);
        let cm = derive_costs(&cfg, &t, &CostOptions::default()).unwrap();
        let (g, c) = cm.node_costs(&t).unwrap();
        let (npu, cpu) = c.totals(&g);
        let r = npu as f64 / cpu as f64;
        assert!((r - 2.0).abs() < 0.05, "ratio {r}");
    }

    #[test]
    fn attention_outgrows_linears_at_long_kv() {
        let cfg = ModelConfig::default();
        let t = synthetic_trace(&cfg, 4096, 256);
        let cm = derive_costs(&cfg, &t, &CostOptions::default()).unwrap();
        let last = t.num_chunks - 1;
        let kv = 4096;
        let attn = cm.lookup(StageKind::Attention, last, Processor::Cpu, &shape_key(StageKind::Attention, 256, kv)).unwrap();
        for k in [StageKind::NormQkv, StageKind::OutProj, StageKind::Ffn] {
            let d = cm.lookup(k, last, Processor::Npu, &shape_key(k, 256, kv)).unwrap();
            assert!(attn > d, "{k}: attention {attn} vs {d}");
        }
    }

    #[test]
    fn zero_cost_rejected() {
        let cfg = ModelConfig::default();
        let t = synthetic_trace(&cfg, 16, 8);
        let mut cm = derive_costs(&cfg, &t, &CostOptions::default()).unwrap();
        cm.entries[0].duration = 0;
        assert!(matches!(cm.validate(), Err(Error::InvalidCost(_))));
        let json = cm.to_json().unwrap();
        assert!(CostModel::from_json(&json).is_err());
    }

    #[test]
    fn json_roundtrip_and_noise_determinism() {
        let cfg = ModelConfig::default();
        let t = synthetic_trace(&cfg, 40, 16);
        let opts = CostOptions {
            noise: 0.2,
            seed: 9,
            ..CostOptions::default()
        };
        let a = derive_costs(&cfg, &t, &opts).unwrap();
        let b = derive_costs(&cfg, &t, &opts).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(CostModel::from_json(&a.to_json().unwrap()).unwrap(), a);
        let plain = derive_costs(&cfg, &t, &CostOptions::default()).unwrap();
        assert_ne!(a, plain);
    }

    #[test]
    fn missing_entry() {
        let cfg = ModelConfig::default();
        let t = synthetic_trace(&cfg, 40, 16);
        let mut cm = derive_costs(&cfg, &t, &CostOptions::default()).unwrap();
        cm.entries.pop();
        assert!(matches!(cm.node_costs(&t), Err(Error::InvalidCost(_))));
    }
}
