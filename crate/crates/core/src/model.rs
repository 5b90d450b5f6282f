//! Toy decoder-only transformer: config, seeded weights, import/export.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::store::{RecordHeader, RecordRef, RecordWriter};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

/// Token id used to pad the tail of the last chunk.
pub const PAD_TOKEN: u32 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub vocab: usize,
    pub chunk_len: usize,
    pub seed: u64,
    /// Magnitude multiplier of the embedding spikes planted on outlier
    /// channels; 0 disables them.
    pub outlier_scale: f32,
    /// Fraction of the vocabulary whose embeddings carry spikes.
    pub outlier_token_frac: f64,
    /// Number of hidden channels spikes are planted on.
    pub outlier_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 256,
            heads: 8,
            ffn_mult: 4,
            vocab: 1024,
            chunk_len: 256,
            seed: 0,
            outlier_scale: 50.0,
            outlier_token_frac: 0.02,
            outlier_channels: 2,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn ffn(&self) -> usize {
        self.hidden * self.ffn_mult
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.vocab < 2 || self.ffn_mult == 0 {
            return bad(format!("all dimensions must be positive: {self:?}"));
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dim {} must be even for rotary pairs", self.head_dim()));
        }
        if self.chunk_len == 0 {
            return bad("chunk_len must be >= 1".into());
        }
        if self.outlier_channels > self.hidden || !(0.0..=1.0).contains(&self.outlier_token_frac) {
            return bad("outlier settings out of range".into());
        }
        if !(self.outlier_scale >= 0.0 && self.outlier_scale.is_finite()) {
            return bad(format!("outlier_scale {} must be finite and >= 0", self.outlier_scale));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (h, f, v) = (self.hidden, self.ffn(), self.vocab);
        let per_layer = h + 3 * h * h + h * h + h + 2 * h * f + f * h;
        v * h + self.layers * per_layer + h + h * v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    /// Fused `[Wq | Wk | Wv]`, `hidden x 3*hidden`.
    pub wqkv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    /// Fused `[Wgate | Wup]`, `hidden x 2*ffn`.
    pub w_gate_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
    /// Tokens whose embeddings carry outlier spikes.
    pub spike_tokens: BTreeSet<u32>,
    pub spike_channels: Vec<usize>,
}

fn normal(g: &mut impl Rng, rows: usize, cols: usize, std: f32) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| g.sample::<f32, _>(StandardNormal) * std)
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![1, n], vec![1.0; n]).expect("1 x n")
}

pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let (h, f, v) = (cfg.hidden, cfg.ffn(), cfg.vocab);
    let mut g = rng::stream(cfg.seed, "model-weights");
    let mut embed = normal(&mut g, v, h, 1.0);
    let mut layers = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        layers.push(LayerWeights {
            attn_norm: ones(h),
            wqkv: normal(&mut g, h, 3 * h, 1.0 / (h as f32).sqrt()),
            wo: normal(&mut g, h, h, 1.0 / (h as f32).sqrt()),
            ffn_norm: ones(h),
            w_gate_up: normal(&mut g, h, 2 * f, 1.0 / (h as f32).sqrt()),
            w_down: normal(&mut g, f, h, 1.0 / (f as f32).sqrt()),
        });
    }
    let final_norm = ones(h);
    let lm_head = normal(&mut g, h, v, 1.0 / (h as f32).sqrt());

    let mut spikes = rng::stream(cfg.seed, "model-outliers");
    let (spike_tokens, spike_channels) = if cfg.outlier_scale > 0.0 && cfg.outlier_channels > 0 {
        let n_tok = ((v - 1) as f64 * cfg.outlier_token_frac).round() as usize;
        // never the pad token
        let toks: BTreeSet<u32> = sample(&mut spikes, v - 1, n_tok)
            .into_iter()
            .map(|t| t as u32 + 1)
            .collect();
        let mut chans = sample(&mut spikes, h, cfg.outlier_channels).into_vec();
        chans.sort_unstable();
        for &t in &toks {
            for &c in &chans {
                let sign = if spikes.gen_bool(0.5) { 1.0 } else { -1.0 };
                embed.set(t as usize, c, sign * cfg.outlier_scale);
            }
        }
        (toks, chans)
    } else {
        (BTreeSet::new(), Vec::new())
    };

    Ok(Model {
        cfg: cfg.clone(),
        embed,
        layers,
        final_norm,
        lm_head,
        spike_tokens,
        spike_channels,
    })
}

impl Model {
    pub fn param_count(&self) -> usize {
        let mut n = self.embed.numel() + self.final_norm.numel() + self.lm_head.numel();
        for l in &self.layers {
            n += l.attn_norm.numel() + l.wqkv.numel() + l.wo.numel();
            n += l.ffn_norm.numel() + l.w_gate_up.numel() + l.w_down.numel();
        }
        n
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push((format!("layers.{i}.wqkv"), &l.wqkv));
            out.push((format!("layers.{i}.wo"), &l.wo));
            out.push((format!("layers.{i}.ffn_norm"), &l.ffn_norm));
            out.push((format!("layers.{i}.w_gate_up"), &l.w_gate_up));
            out.push((format!("layers.{i}.w_down"), &l.w_down));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Writes `weights.bin` (little-endian f32 records) and a JSON manifest.
    pub fn export(&self, weights: &Path, manifest: &Path) -> Result<WeightManifest> {
        let mut w = RecordWriter::create(weights)?;
        let mut tensors = Vec::new();
        for (id, (name, t)) in self.named_tensors().into_iter().enumerate() {
            let offset = w.write(id as u32, t)?;
            let (rows, cols) = t.dims2("export")?;
            tensors.push(TensorEntry {
                name,
                id: id as u32,
                offset,
                rows,
                cols,
            });
        }
        w.finish()?;
        let m = WeightManifest {
            version: MANIFEST_VERSION,
            config: self.cfg.clone(),
            weights_file: weights
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            spike_tokens: self.spike_tokens.iter().copied().collect(),
            spike_channels: self.spike_channels.clone(),
            tensors,
        };
        let text = serde_json::to_string_pretty(&m)?;
        std::fs::write(manifest, text).map_err(|e| Error::io(manifest, e))?;
        Ok(m)
    }

    /// Loads a model written by [`Model::export`]; the weights file is
    /// resolved relative to the manifest.
    pub fn import(manifest: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let m: WeightManifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::VersionMismatch {
                expected: MANIFEST_VERSION,
                found: m.version,
            });
        }
        m.config.validate()?;
        let weights = manifest.with_file_name(&m.weights_file);
        let load = |name: &str| -> Result<Tensor> {
            let e = m
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::CorruptWeights {
                    path: weights.clone(),
                    detail: format!("manifest lacks {name}"),
                })?;
            let header = RecordHeader {
                id: e.id,
                rows: e.rows as u32,
                cols: e.cols as u32,
            };
            RecordRef::open(&weights, e.offset, header)?.read_all()
        };
        let mut layers = Vec::with_capacity(m.config.layers);
        for i in 0..m.config.layers {
            layers.push(LayerWeights {
                attn_norm: load(&format!("layers.{i}.attn_norm"))?,
                wqkv: load(&format!("layers.{i}.wqkv"))?,
                wo: load(&format!("layers.{i}.wo"))?,
                ffn_norm: load(&format!("layers.{i}.ffn_norm"))?,
                w_gate_up: load(&format!("layers.{i}.w_gate_up"))?,
                w_down: load(&format!("layers.{i}.w_down"))?,
            });
        }
        Ok(Model {
            cfg: m.config.clone(),
            embed: load("embed")?,
            layers,
            final_norm: load("final_norm")?,
            lm_head: load("lm_head")?,
            spike_tokens: m.spike_tokens.iter().copied().collect(),
            spike_channels: m.spike_channels.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub id: u32,
    pub offset: u64,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub version: u32,
    pub config: ModelConfig,
    pub weights_file: String,
    pub spike_tokens: Vec<u32>,
    pub spike_channels: Vec<usize>,
    pub tensors: Vec<TensorEntry>,
}
