//! Chunk planning and the chunk-sharing graph.
//!
//! Each decoder layer is cut into five stages. Four of them only depend on the
//! chunk length and are built once for every chunk (static); attention depends
//! on how much KV precedes the chunk and gets its own buffers per chunk
//! (dynamic).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Processor {
    Npu,
    Cpu,
}

impl Processor {
    pub fn other(self) -> Self {
        match self {
            Processor::Npu => Processor::Cpu,
            Processor::Cpu => Processor::Npu,
        }
    }
}

impl fmt::Display for Processor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Processor::Npu => "npu",
            Processor::Cpu => "cpu",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub prompt_len: usize,
    pub chunk_len: usize,
    pub num_chunks: usize,
    /// Padded positions at the end of the last chunk.
    pub pad: usize,
}

pub fn plan_chunks(prompt_len: usize, chunk_len: usize) -> Result<ChunkPlan> {
    if prompt_len == 0 || chunk_len == 0 {
        return Err(Error::InvalidArgument(format!(
            "prompt_len {prompt_len} and chunk_len {chunk_len} must be >= 1"
        )));
    }
    let num_chunks = prompt_len.div_ceil(chunk_len);
    Ok(ChunkPlan {
        prompt_len,
        chunk_len,
        num_chunks,
        pad: num_chunks * chunk_len - prompt_len,
    })
}

impl ChunkPlan {
    /// Absolute position of the first token of chunk `i`.
    pub fn offset(&self, i: usize) -> usize {
        i * self.chunk_len
    }

    /// Real (unpadded) tokens in chunk `i`.
    pub fn real_len(&self, i: usize) -> usize {
        if i + 1 == self.num_chunks {
            self.chunk_len - self.pad
        } else {
            self.chunk_len
        }
    }

    /// KV rows visible to the last query of chunk `i`, padding included.
    pub fn kv_len(&self, i: usize) -> usize {
        (i + 1) * self.chunk_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    RmsNorm,
    Quantize,
    Linear,
    Rope,
    Attention,
    ResidualAdd,
    Silu,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// RMSNorm + fused QKV projection.
    NormQkv,
    /// RoPE + causal attention against the growing KV.
    Attention,
    /// Output projection + residual.
    OutProj,
    /// RMSNorm ahead of the FFN.
    FfnNorm,
    /// Gate/up projection, SiLU gate, down projection + residual.
    Ffn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shareability {
    Static,
    Dynamic,
}

/// Operators of one decoder layer in execution order.
pub const LAYER_OPS: [OpKind; 16] = [
    OpKind::RmsNorm,
    OpKind::Quantize,
    OpKind::Linear,
    OpKind::Rope,
    OpKind::Attention,
    OpKind::Quantize,
    OpKind::Linear,
    OpKind::ResidualAdd,
    OpKind::RmsNorm,
    OpKind::Quantize,
    OpKind::Linear,
    OpKind::Silu,
    OpKind::Mul,
    OpKind::Quantize,
    OpKind::Linear,
    OpKind::ResidualAdd,
];

impl StageKind {
    pub const LAYER: [StageKind; 5] = [
        StageKind::NormQkv,
        StageKind::Attention,
        StageKind::OutProj,
        StageKind::FfnNorm,
        StageKind::Ffn,
    ];

    pub fn ops(self) -> &'static [OpKind] {
        match self {
            StageKind::NormQkv => &[OpKind::RmsNorm, OpKind::Quantize, OpKind::Linear],
            StageKind::Attention => &[OpKind::Rope, OpKind::Attention],
            StageKind::OutProj => &[OpKind::Quantize, OpKind::Linear, OpKind::ResidualAdd],
            StageKind::FfnNorm => &[OpKind::RmsNorm],
            StageKind::Ffn => &[
                OpKind::Quantize,
                OpKind::Linear,
                OpKind::Silu,
                OpKind::Mul,
                OpKind::Quantize,
                OpKind::Linear,
                OpKind::ResidualAdd,
            ],
        }
    }

    pub fn processor(self) -> Processor {
        match self {
            StageKind::NormQkv | StageKind::OutProj | StageKind::Ffn => Processor::Npu,
            StageKind::Attention | StageKind::FfnNorm => Processor::Cpu,
        }
    }

    pub fn shareability(self) -> Shareability {
        if self == StageKind::Attention {
            Shareability::Dynamic
        } else {
            Shareability::Static
        }
    }

    /// Whether the stage reads state produced by earlier chunks.
    pub fn is_cross_chunk(self) -> bool {
        self.shareability() == Shareability::Dynamic
    }

    pub fn name(self) -> &'static str {
        match self {
            StageKind::NormQkv => "norm_qkv",
            StageKind::Attention => "attention",
            StageKind::OutProj => "out_proj",
            StageKind::FfnNorm => "ffn_norm",
            StageKind::Ffn => "ffn",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const STAGES_PER_LAYER: usize = StageKind::LAYER.len();

/// Stage kind of global stage index `j` (layer-major).
pub fn stage_kind(j: usize) -> StageKind {
    StageKind::LAYER[j % STAGES_PER_LAYER]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgraphSpec {
    pub layer: usize,
    /// Global stage index `layer * 5 + position`.
    pub stage: usize,
    pub kind: StageKind,
    pub shareability: Shareability,
    pub ops: Vec<OpKind>,
    pub processor: Processor,
    /// Activation buffer bytes; one entry for a static stage, one per chunk
    /// for a dynamic stage.
    pub activation_bytes: Vec<u64>,
    pub weight_bytes: u64,
}

const F32: u64 = 4;

/// Weight bytes held by a stage graph: int8 linears plus f32 norm gains.
pub fn stage_weight_bytes(cfg: &ModelConfig, kind: StageKind) -> u64 {
    let (h, f) = (cfg.hidden as u64, cfg.ffn() as u64);
    match kind {
        StageKind::NormQkv => F32 * h + 3 * h * h,
        StageKind::Attention => 0,
        StageKind::OutProj => h * h,
        StageKind::FfnNorm => F32 * h,
        StageKind::Ffn => 2 * h * f + f * h,
    }
}

/// Activation buffer bytes of a stage for one chunk whose queries see `kv_len` keys.
///
/// Attention runs its heads one after another, so a single
/// `chunk x kv_len` score buffer is reused across heads.
pub fn stage_activation_bytes(cfg: &ModelConfig, kind: StageKind, chunk_len: usize, kv_len: usize) -> u64 {
    let (h, f, c, kv) = (cfg.hidden as u64, cfg.ffn() as u64, chunk_len as u64, kv_len as u64);
    F32 * match kind {
        // input, normed, qkv output
        StageKind::NormQkv => c * (h + h + 3 * h),
        // q, out, k and v over the whole KV, score buffer
        StageKind::Attention => 2 * c * h + 2 * kv * h + c * kv,
        // attention output, residual in, residual out
        StageKind::OutProj => 3 * c * h,
        StageKind::FfnNorm => 2 * c * h,
        // input, gate|up, gated activation, output
        StageKind::Ffn => c * (h + 2 * f + f + h),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharingReport {
    pub num_chunks: usize,
    /// Subgraphs in one per-chunk graph (layers x 5).
    pub subgraphs_per_chunk: usize,
    /// Of those, how many are shareable across chunks.
    pub shared_subgraphs: usize,
    /// Subgraphs built with one graph per chunk.
    pub built_naive: usize,
    /// Subgraphs built with the sharing graph.
    pub built_shared: usize,
    pub static_weight_bytes: u64,
    pub static_activation_bytes: u64,
    /// Dynamic buffer bytes for each chunk, summed over layers.
    pub dynamic_bytes_per_chunk: Vec<u64>,
    pub naive_bytes: u64,
    pub shared_bytes: u64,
}

impl SharingReport {
    pub fn static_bytes(&self) -> u64 {
        self.static_weight_bytes + self.static_activation_bytes
    }

    pub fn naive_over_shared(&self) -> f64 {
        self.naive_bytes as f64 / self.shared_bytes as f64
    }

    pub fn reduction(&self) -> f64 {
        1.0 - self.shared_bytes as f64 / self.naive_bytes as f64
    }
}

/// Emits the sharing graph for `plan` and compares its memory with building
/// one full graph per chunk.
pub fn partition_sharing_graph(cfg: &ModelConfig, plan: &ChunkPlan) -> (Vec<SubgraphSpec>, SharingReport) {
    let n = plan.num_chunks;
    let mut specs = Vec::with_capacity(cfg.layers * STAGES_PER_LAYER);
    let mut static_w = 0;
    let mut static_a = 0;
    let mut dynamic = vec![0u64; n];
    for layer in 0..cfg.layers {
        for (p, &kind) in StageKind::LAYER.iter().enumerate() {
            let share = kind.shareability();
            let activation_bytes: Vec<u64> = match share {
                Shareability::Static => {
                    vec![stage_activation_bytes(cfg, kind, plan.chunk_len, plan.chunk_len)]
                }
                Shareability::Dynamic => (0..n)
                    .map(|i| stage_activation_bytes(cfg, kind, plan.chunk_len, plan.kv_len(i)))
                    .collect(),
            };
            let weight_bytes = stage_weight_bytes(cfg, kind);
            match share {
                Shareability::Static => {
                    static_w += weight_bytes;
                    static_a += activation_bytes[0];
                }
                Shareability::Dynamic => {
                    for (d, b) in dynamic.iter_mut().zip(&activation_bytes) {
                        *d += b + weight_bytes;
                    }
                }
            }
            specs.push(SubgraphSpec {
                layer,
                stage: layer * STAGES_PER_LAYER + p,
                kind,
                shareability: share,
                ops: kind.ops().to_vec(),
                processor: kind.processor(),
                activation_bytes,
                weight_bytes,
            });
        }
    }
    let per_chunk = cfg.layers * STAGES_PER_LAYER;
    let shared = specs.iter().filter(|s| s.shareability == Shareability::Static).count();
    let dyn_total: u64 = dynamic.iter().sum();
    let report = SharingReport {
        num_chunks: n,
        subgraphs_per_chunk: per_chunk,
        shared_subgraphs: shared,
        built_naive: n * per_chunk,
        built_shared: shared + n * (per_chunk - shared),
        static_weight_bytes: static_w,
        static_activation_bytes: static_a,
        dynamic_bytes_per_chunk: dynamic,
        naive_bytes: n as u64 * (static_w + static_a) + dyn_total,
        shared_bytes: static_w + static_a + dyn_total,
    };
    (specs, report)
}
