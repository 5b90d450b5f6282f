//! Shadow outlier execution for one linear layer.
//!
//! The clamped activation goes through the int8 matmul (the NPU half). The
//! residual of every outlier channel is multiplied on the float path (the CPU
//! half) by the matching float weight rows, which are either memory-resident
//! (hot channels) or read from the cold weight file on demand.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{matmul_f32, matmul_i8, quantize_clamp, symmetric_scale};
use crate::quant::{split_outliers, LinearSite, ResidualMode, SiteId};
use crate::store::{RecordHeader, RecordRef, RecordWriter, HEADER_BYTES};
use crate::tensor::{QTensor, Tensor};

#[derive(Debug, Clone)]
pub struct ShadowLinear {
    pub site: SiteId,
    pub weight_q: QTensor,
    /// Ascending hot channel indices; row `i` of `weight_f_hot` belongs to `hot_channels[i]`.
    pub hot_channels: Vec<usize>,
    pub weight_f_hot: Tensor,
    pub cold: RecordRef,
    pub pruned: bool,
}

/// Stable record id for a site inside a cold weight file.
pub fn site_record_id(site: SiteId) -> u32 {
    let s = LinearSite::ALL.iter().position(|&x| x == site.site).expect("known site");
    (site.layer * LinearSite::ALL.len() + s) as u32
}

/// Per-tensor symmetric int8 quantization of a weight matrix.
pub fn quantize_weight(w: &Tensor) -> Result<QTensor> {
    quantize_clamp(w, symmetric_scale(w))
}

/// Writes the dequantized float copy of every weight to `path` and returns a
/// handle per weight, in input order.
pub fn write_cold_store(path: &Path, weights: &[(SiteId, &QTensor)]) -> Result<Vec<RecordRef>> {
    let mut w = RecordWriter::create(path)?;
    let mut placed = Vec::with_capacity(weights.len());
    for (site, q) in weights {
        let (k, n) = q.dims2("write_cold_store")?;
        let off = w.write(site_record_id(*site), &q.dequantize())?;
        placed.push((
            off,
            RecordHeader {
                id: site_record_id(*site),
                rows: k as u32,
                cols: n as u32,
            },
        ));
    }
    w.finish()?;
    placed
        .into_iter()
        .map(|(off, h)| RecordRef::open(path, off, h))
        .collect()
}

impl ShadowLinear {
    /// Builds the layer; hot rows are taken from the dequantized int8 weights.
    pub fn new(
        site: SiteId,
        weight_q: QTensor,
        hot_channels: &[usize],
        cold: RecordRef,
        pruned: bool,
    ) -> Result<Self> {
        let (k, n) = weight_q.dims2("ShadowLinear::new")?;
        if cold.header.rows as usize != k || cold.header.cols as usize != n {
            return Err(Error::shape(
                "ShadowLinear::new",
                format!("cold record {:?} does not match weight {k}x{n}", cold.header),
            ));
        }
        let mut hot = hot_channels.to_vec();
        hot.sort_unstable();
        hot.dedup();
        if hot.last().is_some_and(|&c| c >= k) {
            return Err(Error::shape("ShadowLinear::new", "hot channel beyond weight rows"));
        }
        let weight_f_hot = weight_q.dequantize().gather_rows(&hot)?;
        Ok(Self {
            site,
            weight_q,
            hot_channels: hot,
            weight_f_hot,
            cold,
            pruned,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight_q.rows()
    }

    pub fn out_features(&self) -> usize {
        self.weight_q.cols()
    }

    fn hot_slot(&self, channel: usize) -> Option<usize> {
        self.hot_channels.binary_search(&channel).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowSource {
    Resident,
    Fetched,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchEntry {
    pub layer: usize,
    pub site: LinearSite,
    pub channel: usize,
    pub source: RowSource,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchLog {
    pub entries: Vec<FetchEntry>,
    pub resident_bytes: u64,
    pub fetched_bytes: u64,
}

impl FetchLog {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn fetched(&self) -> impl Iterator<Item = &FetchEntry> {
        self.entries.iter().filter(|e| e.source == RowSource::Fetched)
    }

    pub fn extend(&mut self, other: FetchLog) {
        self.entries.extend(other.entries);
        self.resident_bytes += other.resident_bytes;
        self.fetched_bytes += other.fetched_bytes;
    }
}

pub fn shadow_matmul(x: &Tensor, layer: &ShadowLinear, s: f32) -> Result<(Tensor, FetchLog)> {
    shadow_matmul_with(x, layer, s, ResidualMode::Exact)
}

/// `int8(clamp(x)) x W_q` plus, unless the layer is pruned, the outlier
/// residuals times their float weight rows.
pub fn shadow_matmul_with(
    x: &Tensor,
    layer: &ShadowLinear,
    s: f32,
    mode: ResidualMode,
) -> Result<(Tensor, FetchLog)> {
    let (_, k) = x.dims2("shadow_matmul")?;
    if k != layer.in_features() {
        return Err(Error::shape(
            "shadow_matmul",
            format!("activation has {k} channels, weight expects {}", layer.in_features()),
        ));
    }
    let (q, outliers) = split_outliers(x, s, mode)?;
    let mut y = matmul_i8(&q, &layer.weight_q)?;
    let mut log = FetchLog::default();
    if layer.pruned || outliers.is_empty() {
        return Ok((y, log));
    }

    let n = layer.out_features();
    let row_bytes = (n * 4) as u64;
    let cold: Vec<usize> = outliers
        .channels
        .iter()
        .copied()
        .filter(|&c| layer.hot_slot(c).is_none())
        .collect();
    let mut fetched = layer.cold.read_rows(&cold)?.into_iter();

    let mut gathered = Vec::with_capacity(outliers.channels.len() * n);
    for &c in &outliers.channels {
        let source = match layer.hot_slot(c) {
            Some(slot) => {
                gathered.extend_from_slice(layer.weight_f_hot.row(slot));
                log.resident_bytes += row_bytes;
                RowSource::Resident
            }
            None => {
                gathered.extend(fetched.next().expect("one fetched row per cold channel"));
                log.fetched_bytes += row_bytes;
                RowSource::Fetched
            }
        };
        log.entries.push(FetchEntry {
            layer: layer.site.layer,
            site: layer.site.site,
            channel: c,
            source,
        });
    }
    let rows = Tensor::new(vec![outliers.channels.len(), n], gathered)?;
    // NPU partial first, CPU residual added second.
    y.add_assign(&matmul_f32(&outliers.values, &rows)?)?;
    Ok((y, log))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryFootprint {
    pub int8_bytes: u64,
    pub hot_float_bytes: u64,
    /// Channel index list kept next to the hot rows (u32 per channel).
    pub hot_index_bytes: u64,
    /// int8 weights + hot rows + hot index.
    pub resident_bytes: u64,
    /// Float bytes a full shadow copy of every weight would need.
    pub full_copy_float_bytes: u64,
}

impl MemoryFootprint {
    /// Fraction of the full float copy avoided by keeping only hot rows.
    pub fn shadow_savings(&self) -> f64 {
        if self.full_copy_float_bytes == 0 {
            return 0.0;
        }
        1.0 - (self.hot_float_bytes + self.hot_index_bytes) as f64 / self.full_copy_float_bytes as f64
    }
}

pub fn memory_footprint(layers: &[ShadowLinear]) -> MemoryFootprint {
    let mut m = MemoryFootprint::default();
    for l in layers {
        m.int8_bytes += l.weight_q.byte_len() as u64;
        m.hot_float_bytes += l.weight_f_hot.byte_len() as u64;
        m.hot_index_bytes += 4 * l.hot_channels.len() as u64;
        m.full_copy_float_bytes += 4 * l.weight_q.data().len() as u64;
    }
    m.resident_bytes = m.int8_bytes + m.hot_float_bytes + m.hot_index_bytes;
    m
}

/// Bytes a cold file holds for `layers`, headers included.
pub fn cold_file_bytes(layers: &[ShadowLinear]) -> u64 {
    layers
        .iter()
        .map(|l| HEADER_BYTES + l.cold.header.payload_bytes())
        .sum()
}
