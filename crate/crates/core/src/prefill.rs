//! Chunked prefill through the chunk-sharing graph, plus a greedy decoder.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{plan_chunks, stage_kind, ChunkPlan, Processor, StageKind, STAGES_PER_LAYER};
use crate::kernels::{causal_attention, matmul_f32, matmul_i8, quantize_clamp, rmsnorm, rope, silu};
use crate::model::{LayerWeights, Model, PAD_TOKEN};
use crate::quant::{calibrate, HotChannelTable, ImportanceTable, LinearSite, ModelCalibration, SiteId};
use crate::shadow::{quantize_weight, shadow_matmul, write_cold_store, FetchLog, ShadowLinear};
use crate::tensor::Tensor;

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QuantMode {
    #[serde(rename = "float32")]
    Float32,
    #[serde(rename = "w8a8-naive")]
    W8A8Naive,
    #[serde(rename = "w8a8-shadow")]
    W8A8Shadow,
}

impl QuantMode {
    pub const ALL: [QuantMode; 3] = [QuantMode::Float32, QuantMode::W8A8Naive, QuantMode::W8A8Shadow];

    pub fn as_str(self) -> &'static str {
        match self {
            QuantMode::Float32 => "float32",
            QuantMode::W8A8Naive => "w8a8-naive",
            QuantMode::W8A8Shadow => "w8a8-shadow",
        }
    }
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QuantMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown quant mode {s:?}")))
    }
}

/// Per-site scale and shadow linear for the W8A8 modes.
#[derive(Debug, Clone)]
pub struct QuantSite {
    pub scale: f32,
    pub linear: ShadowLinear,
}

#[derive(Debug, Clone)]
pub struct QuantizedWeights {
    pub sites: BTreeMap<SiteId, QuantSite>,
}

fn site_weight(layer: &LayerWeights, site: LinearSite) -> &Tensor {
    match site {
        LinearSite::Qkv => &layer.wqkv,
        LinearSite::Out => &layer.wo,
        LinearSite::FfnIn => &layer.w_gate_up,
        LinearSite::FfnDown => &layer.w_down,
    }
}

impl QuantizedWeights {
    /// Quantizes every linear, writes the float cold copy to `cold_path`, and
    /// keeps hot rows resident according to `hot`.
    pub fn build(
        model: &Model,
        calibration: &ModelCalibration,
        hot: &HotChannelTable,
        importance: &ImportanceTable,
        cold_path: &Path,
    ) -> Result<Self> {
        let mut ids = Vec::new();
        let mut qs = Vec::new();
        for (l, layer) in model.layers.iter().enumerate() {
            for site in LinearSite::ALL {
                ids.push(SiteId::new(l, site));
                qs.push(quantize_weight(site_weight(layer, site))?);
            }
        }
        let refs: Vec<(SiteId, &_)> = ids.iter().copied().zip(qs.iter()).collect();
        let colds = write_cold_store(cold_path, &refs)?;
        let mut sites = BTreeMap::new();
        for ((id, q), cold) in ids.into_iter().zip(qs).zip(colds) {
            let linear = ShadowLinear::new(id, q, hot.get(id), cold, importance.is_pruned(id.layer))?;
            sites.insert(
                id,
                QuantSite {
                    scale: calibration.scale(id)?,
                    linear,
                },
            );
        }
        Ok(Self { sites })
    }

    pub fn site(&self, id: SiteId) -> Result<&QuantSite> {
        self.sites
            .get(&id)
            .ok_or_else(|| Error::InvalidArgument(format!("no quantized weights for site {id}")))
    }

    pub fn linears(&self) -> Vec<ShadowLinear> {
        self.sites.values().map(|s| s.linear.clone()).collect()
    }

    /// Marks exactly the given layers as pruned.
    pub fn set_pruned(&mut self, pruned: &std::collections::BTreeSet<usize>) {
        for (id, s) in &mut self.sites {
            s.linear.pruned = pruned.contains(&id.layer);
        }
    }
}

/// Keys and values per layer and head; rows are real tokens only.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    keys: Vec<Vec<Tensor>>,
    values: Vec<Vec<Tensor>>,
    len: usize,
}

impl KVCache {
    pub fn new(layers: usize, heads: usize, head_dim: usize) -> Self {
        let empty = || (0..heads).map(|_| Tensor::zeros(0, head_dim)).collect::<Vec<_>>();
        Self {
            keys: (0..layers).map(|_| empty()).collect(),
            values: (0..layers).map(|_| empty()).collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn keys(&self, layer: usize, head: usize) -> &Tensor {
        &self.keys[layer][head]
    }

    pub fn values(&self, layer: usize, head: usize) -> &Tensor {
        &self.values[layer][head]
    }

    /// Checks every per-head tensor has exactly `len` rows.
    pub fn check(&self) -> Result<()> {
        for t in self.keys.iter().chain(&self.values).flatten() {
            if t.dims2("KVCache")?.0 != self.len {
                return Err(Error::Invariant(format!(
                    "KV tensor has {} rows, cache length is {}",
                    t.rows(),
                    self.len
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub chunk: usize,
    pub layer: usize,
    /// Global stage index `layer * 5 + position`.
    pub stage: usize,
    pub kind: StageKind,
    pub processor: Processor,
    pub chunk_len: usize,
    pub kv_len: usize,
    /// Cost-model lookup key.
    pub key: String,
}

/// Cost-table key for a stage execution.
pub fn duration_key(kind: StageKind, chunk_len: usize, kv_len: usize) -> String {
    if kind.is_cross_chunk() {
        format!("{kind}:c{chunk_len}:kv{kv_len}")
    } else {
        format!("{kind}:c{chunk_len}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub version: u32,
    pub prompt_len: usize,
    pub chunk_len: usize,
    pub num_chunks: usize,
    pub layers: usize,
    pub mode: QuantMode,
    pub entries: Vec<TraceEntry>,
}

impl Trace {
    pub fn stages(&self) -> usize {
        self.layers * STAGES_PER_LAYER
    }
}

/// Hooks into a prefill run.
pub trait PrefillObserver {
    /// Input of a linear site, real rows only.
    fn linear_input(&mut self, _site: SiteId, _x: &Tensor) {}

    fn stage_done(&mut self, _entry: &TraceEntry, _wall: Duration) {}
}

pub struct NoObserver;

impl PrefillObserver for NoObserver {}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    /// Logits of the last real prompt token, `1 x vocab`.
    pub logits: Tensor,
    pub kv: KVCache,
    pub trace: Trace,
    pub fetch: FetchLog,
}

struct Exec<'a, O: PrefillObserver> {
    model: &'a Model,
    mode: QuantMode,
    quant: Option<&'a QuantizedWeights>,
    obs: &'a mut O,
    fetch: FetchLog,
}

impl<O: PrefillObserver> Exec<'_, O> {
    fn linear(&mut self, id: SiteId, x: &Tensor, real_rows: usize) -> Result<Tensor> {
        if real_rows == x.rows() {
            self.obs.linear_input(id, x);
        } else {
            self.obs.linear_input(id, &x.slice_rows(0, real_rows)?);
        }
        let w = site_weight(&self.model.layers[id.layer], id.site);
        match self.mode {
            QuantMode::Float32 => matmul_f32(x, w),
            QuantMode::W8A8Naive => {
                let q = self.quant_site(id)?;
                matmul_i8(&quantize_clamp(x, q.scale)?, &q.linear.weight_q)
            }
            QuantMode::W8A8Shadow => {
                let q = self.quant_site(id)?;
                let (y, log) = shadow_matmul(x, &q.linear, q.scale)?;
                self.fetch.extend(log);
                Ok(y)
            }
        }
    }

    fn quant_site(&self, id: SiteId) -> Result<&QuantSite> {
        self.quant
            .ok_or_else(|| Error::InvalidArgument(format!("{} needs quantized weights", self.mode)))?
            .site(id)
    }

    /// Runs one chunk through every layer; returns the final hidden states.
    fn run_chunk(
        &mut self,
        kv: &mut KVCache,
        chunk: usize,
        tokens: &[u32],
        real_rows: usize,
        trace: &mut Vec<TraceEntry>,
    ) -> Result<Tensor> {
        let cfg = &self.model.cfg;
        let (heads, hd, h) = (cfg.heads, cfg.head_dim(), cfg.hidden);
        let rows = tokens.len();
        let offset = kv.len;
        let kv_len = offset + rows;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let mut x = self.model.embed.gather_rows(&ids)?;

        for (l, lw) in self.model.layers.iter().enumerate() {
            let mut qkv = Tensor::zeros(0, 0);
            let mut attn = Tensor::zeros(0, 0);
            let mut normed = Tensor::zeros(0, 0);
            for (p, &kind) in StageKind::LAYER.iter().enumerate() {
                let t0 = Instant::now();
                match kind {
                    StageKind::NormQkv => {
                        let xn = rmsnorm(&x, &lw.attn_norm)?;
                        qkv = self.linear(SiteId::new(l, LinearSite::Qkv), &xn, real_rows)?;
                    }
                    StageKind::Attention => {
                        let q = rope(&qkv.slice_cols(0, h)?, offset, hd)?;
                        let k = rope(&qkv.slice_cols(h, h)?, offset, hd)?;
                        let v = qkv.slice_cols(2 * h, h)?;
                        attn = Tensor::zeros(rows, h);
                        for head in 0..heads {
                            let (kc, vc) = (&mut kv.keys[l][head], &mut kv.values[l][head]);
                            kc.append_rows(&k.slice_cols(head * hd, hd)?)?;
                            vc.append_rows(&v.slice_cols(head * hd, hd)?)?;
                            let out = causal_attention(&q.slice_cols(head * hd, hd)?, kc, vc, offset)?;
                            attn.write_cols(head * hd, &out)?;
                            // padded rows never stay in the cache
                            kc.truncate_rows(offset + real_rows);
                            vc.truncate_rows(offset + real_rows);
                        }
                    }
                    StageKind::OutProj => {
                        let o = self.linear(SiteId::new(l, LinearSite::Out), &attn, real_rows)?;
                        x.add_assign(&o)?;
                    }
                    StageKind::FfnNorm => {
                        normed = rmsnorm(&x, &lw.ffn_norm)?;
                    }
                    StageKind::Ffn => {
                        let f = cfg.ffn();
                        let gu = self.linear(SiteId::new(l, LinearSite::FfnIn), &normed, real_rows)?;
                        let act = silu(&gu.slice_cols(0, f)?).mul(&gu.slice_cols(f, f)?)?;
                        let down = self.linear(SiteId::new(l, LinearSite::FfnDown), &act, real_rows)?;
                        x.add_assign(&down)?;
                    }
                }
                let entry = TraceEntry {
                    chunk,
                    layer: l,
                    stage: l * STAGES_PER_LAYER + p,
                    kind,
                    processor: kind.processor(),
                    chunk_len: rows,
                    kv_len,
                    key: duration_key(kind, rows, kv_len),
                };
                self.obs.stage_done(&entry, t0.elapsed());
                trace.push(entry);
            }
        }
        kv.len = offset + real_rows;
        if !x.all_finite() {
            return Err(Error::Invariant(format!("non-finite activation in chunk {chunk}")));
        }
        Ok(x)
    }

    fn logits(&self, hidden_row: &Tensor) -> Result<Tensor> {
        let n = rmsnorm(hidden_row, &self.model.final_norm)?;
        matmul_f32(&n, &self.model.lm_head)
    }
}

fn check_tokens(model: &Model, tokens: &[u32]) -> Result<()> {
    let vocab = model.cfg.vocab;
    match tokens.iter().find(|&&t| t as usize >= vocab) {
        Some(&token) => Err(Error::TokenOutOfRange { token, vocab }),
        None => Ok(()),
    }
}

pub fn chunked_prefill(
    model: &Model,
    tokens: &[u32],
    plan: &ChunkPlan,
    mode: QuantMode,
    quant: Option<&QuantizedWeights>,
) -> Result<PrefillOutput> {
    chunked_prefill_observed(model, tokens, plan, mode, quant, &mut NoObserver)
}

/// Processes the prompt chunk by chunk in causal order. The last chunk is
/// padded to `chunk_len`; padded rows are masked out of attention and never
/// enter the KV cache.
pub fn chunked_prefill_observed<O: PrefillObserver>(
    model: &Model,
    tokens: &[u32],
    plan: &ChunkPlan,
    mode: QuantMode,
    quant: Option<&QuantizedWeights>,
    obs: &mut O,
) -> Result<PrefillOutput> {
    if tokens.len() != plan.prompt_len {
        return Err(Error::InvalidArgument(format!(
            "{} tokens for a plan of {}",
            tokens.len(),
            plan.prompt_len
        )));
    }
    check_tokens(model, tokens)?;
    let cfg = &model.cfg;
    let mut kv = KVCache::new(cfg.layers, cfg.heads, cfg.head_dim());
    let mut exec = Exec {
        model,
        mode,
        quant,
        obs,
        fetch: FetchLog::default(),
    };
    let mut entries = Vec::with_capacity(plan.num_chunks * cfg.layers * STAGES_PER_LAYER);
    let mut last_hidden = None;
    for i in 0..plan.num_chunks {
        let start = plan.offset(i);
        let real = plan.real_len(i);
        let mut chunk: Vec<u32> = tokens[start..start + real].to_vec();
        chunk.resize(plan.chunk_len, PAD_TOKEN);
        let x = exec.run_chunk(&mut kv, i, &chunk, real, &mut entries)?;
        last_hidden = Some(x.slice_rows(real - 1, 1)?);
    }
    kv.check()?;
    if kv.len() != plan.prompt_len {
        return Err(Error::Invariant(format!(
            "KV holds {} rows after a {}-token prompt",
            kv.len(),
            plan.prompt_len
        )));
    }
    let logits = exec.logits(&last_hidden.expect("at least one chunk"))?;
    let fetch = std::mem::take(&mut exec.fetch);
    Ok(PrefillOutput {
        logits,
        kv,
        trace: Trace {
            version: TRACE_VERSION,
            prompt_len: plan.prompt_len,
            chunk_len: plan.chunk_len,
            num_chunks: plan.num_chunks,
            layers: cfg.layers,
            mode,
            entries,
        },
        fetch,
    })
}

/// Single-shot prefill of the whole prompt as one unpadded chunk.
pub fn full_prefill(
    model: &Model,
    tokens: &[u32],
    mode: QuantMode,
    quant: Option<&QuantizedWeights>,
) -> Result<PrefillOutput> {
    let plan = plan_chunks(tokens.len(), tokens.len())?;
    chunked_prefill(model, tokens, &plan, mode, quant)
}

/// Index of the largest logit; the lower index wins ties.
pub fn argmax(logits: &Tensor) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > logits.data()[best] {
            best = i;
        }
    }
    best as u32
}

/// Float32 greedy decoding on top of a prefilled cache.
pub fn greedy_decode(model: &Model, kv: &mut KVCache, last_logits: &Tensor, max_new: usize) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(max_new);
    if max_new == 0 {
        return Ok(out);
    }
    let mut obs = NoObserver;
    let mut exec = Exec {
        model,
        mode: QuantMode::Float32,
        quant: None,
        obs: &mut obs,
        fetch: FetchLog::default(),
    };
    let mut tok = argmax(last_logits);
    let mut scratch = Vec::new();
    loop {
        out.push(tok);
        if out.len() == max_new {
            return Ok(out);
        }
        let step = kv.len();
        let x = exec.run_chunk(kv, step, &[tok], 1, &mut scratch)?;
        scratch.clear();
        tok = argmax(&exec.logits(&x)?);
    }
}

#[derive(Default)]
struct Capture {
    acts: BTreeMap<SiteId, Vec<Tensor>>,
}

impl PrefillObserver for Capture {
    fn linear_input(&mut self, site: SiteId, x: &Tensor) {
        self.acts.entry(site).or_default().push(x.clone());
    }
}

/// Runs float32 prefills over `corpus` and calibrates every linear site.
pub fn calibrate_model(model: &Model, corpus: &[Vec<u32>], percentile: f64) -> Result<ModelCalibration> {
    if corpus.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let mut cap = Capture::default();
    for prompt in corpus {
        let plan = plan_chunks(prompt.len(), model.cfg.chunk_len)?;
        chunked_prefill_observed(model, prompt, &plan, QuantMode::Float32, None, &mut cap)?;
    }
    let profiles = cap
        .acts
        .iter()
        .map(|(&id, samples)| calibrate(id, samples, percentile))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelCalibration::new(percentile, profiles))
}

/// Stage index `j` of the trace's graph resolved to its kind.
pub fn trace_stage_kinds(trace: &Trace) -> Vec<StageKind> {
    (0..trace.stages()).map(stage_kind).collect()
}
