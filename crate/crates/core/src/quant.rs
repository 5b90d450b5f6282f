//! Offline calibration and outlier bookkeeping for per-tensor W8A8.
//!
//! A site's scale `s` is fixed offline so that at runtime an element is an
//! outlier iff `|x| / s > 127`. Whole channels (columns) containing an outlier
//! are split off into a compact float [`OutlierSlice`]; the rest stays on the
//! int8 grid.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::quantize_clamp;
use crate::tensor::{check_scale, QTensor, Tensor, QMAX};

pub const CALIBRATION_VERSION: u32 = 1;
pub const DEFAULT_PERCENTILE: f64 = 99.9;
pub const DEFAULT_HOT_COVERAGE: f64 = 0.8;
pub const DEFAULT_PRUNE_RATE: f64 = 0.85;

/// The four activation sites feeding a linear in one decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearSite {
    /// Input of the fused QKV projection.
    Qkv,
    /// Input of the attention output projection.
    Out,
    /// Input shared by the FFN gate and up projections.
    FfnIn,
    /// Input of the FFN down projection.
    FfnDown,
}

impl LinearSite {
    pub const ALL: [LinearSite; 4] = [
        LinearSite::Qkv,
        LinearSite::Out,
        LinearSite::FfnIn,
        LinearSite::FfnDown,
    ];
}

impl fmt::Display for LinearSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LinearSite::Qkv => "qkv",
            LinearSite::Out => "out",
            LinearSite::FfnIn => "ffn_in",
            LinearSite::FfnDown => "ffn_down",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SiteId {
    pub layer: usize,
    pub site: LinearSite,
}

impl SiteId {
    pub fn new(layer: usize, site: LinearSite) -> Self {
        Self { layer, site }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.site)
    }
}

#[inline]
pub fn is_outlier(v: f32, s: f32) -> bool {
    (v / s).abs() > QMAX as f32
}

/// Per-site calibration result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub layer: usize,
    pub site: LinearSite,
    pub scale: f32,
    /// Outlier occurrences per channel at `scale`, summed over all samples.
    pub channel_counts: Vec<u64>,
    /// Largest magnitude seen in any sample.
    pub max_abs: f32,
    pub sample_count: usize,
    /// Total rows (tokens) across all samples.
    pub rows: usize,
}

impl CalibrationProfile {
    pub fn id(&self) -> SiteId {
        SiteId::new(self.layer, self.site)
    }

    pub fn total_outliers(&self) -> u64 {
        self.channel_counts.iter().sum()
    }

    /// Largest observed magnitude relative to the clip threshold `127 * scale`,
    /// floored at 1 when nothing was clipped.
    pub fn outlier_ratio(&self) -> f64 {
        (f64::from(self.max_abs) / (f64::from(self.scale) * f64::from(QMAX))).max(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        check_scale(self.scale)?;
        if let Some(c) = self.channel_counts.iter().find(|&&c| c > self.rows as u64) {
            return Err(Error::Invariant(format!(
                "site {}: channel count {c} exceeds {} rows",
                self.id(),
                self.rows
            )));
        }
        Ok(())
    }
}

/// Scale from the `percentile`-th magnitude (nearest rank) over all samples,
/// plus per-channel outlier counts at that scale.
pub fn calibrate(site: SiteId, samples: &[Tensor], percentile: f64) -> Result<CalibrationProfile> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "percentile {percentile} outside (0, 100]"
        )));
    }
    let total: usize = samples.iter().map(Tensor::numel).sum();
    if total == 0 {
        return Err(Error::EmptyCalibration);
    }
    let cols = samples[0].dims2("calibrate")?.1;
    let mut mags = Vec::with_capacity(total);
    let mut rows = 0;
    for t in samples {
        let (r, c) = t.dims2("calibrate")?;
        if c != cols {
            return Err(Error::shape("calibrate", format!("sample has {c} channels, expected {cols}")));
        }
        rows += r;
        mags.extend(t.data().iter().map(|v| v.abs()));
    }
    let rank = ((percentile / 100.0) * total as f64).ceil() as usize;
    let idx = rank.clamp(1, total) - 1;
    let (_, &mut pth, _) = mags.select_nth_unstable_by(idx, f32::total_cmp);
    let max_abs = mags.iter().copied().fold(0.0f32, f32::max);
    // All-zero activations: any positive scale is exact, use the unit grid.
    let scale = if pth > 0.0 { pth / QMAX as f32 } else { 1.0 / QMAX as f32 };

    let mut channel_counts = vec![0u64; cols];
    for t in samples {
        for r in 0..t.rows() {
            for (c, &v) in t.row(r).iter().enumerate() {
                if is_outlier(v, scale) {
                    channel_counts[c] += 1;
                }
            }
        }
    }
    let profile = CalibrationProfile {
        layer: site.layer,
        site: site.site,
        scale,
        channel_counts,
        max_abs,
        sample_count: samples.len(),
        rows,
    };
    profile.validate()?;
    Ok(profile)
}

/// Versioned calibration document covering every site of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCalibration {
    pub version: u32,
    pub percentile: f64,
    pub profiles: Vec<CalibrationProfile>,
}

impl ModelCalibration {
    pub fn new(percentile: f64, mut profiles: Vec<CalibrationProfile>) -> Self {
        profiles.sort_by_key(CalibrationProfile::id);
        Self {
            version: CALIBRATION_VERSION,
            percentile,
            profiles,
        }
    }

    pub fn get(&self, id: SiteId) -> Option<&CalibrationProfile> {
        self.profiles.iter().find(|p| p.id() == id)
    }

    pub fn scale(&self, id: SiteId) -> Result<f32> {
        self.get(id)
            .map(|p| p.scale)
            .ok_or_else(|| Error::InvalidArgument(format!("no calibration for site {id}")))
    }
}

/// Channels whose float weight rows stay resident, per site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotChannelTable {
    pub version: u32,
    pub coverage: f64,
    pub entries: Vec<HotChannels>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotChannels {
    pub layer: usize,
    pub site: LinearSite,
    /// Ascending channel indices.
    pub hot_channels: Vec<usize>,
    pub covered: u64,
    pub total: u64,
}

impl HotChannelTable {
    pub fn get(&self, id: SiteId) -> &[usize] {
        self.entries
            .iter()
            .find(|e| e.layer == id.layer && e.site == id.site)
            .map_or(&[], |e| e.hot_channels.as_slice())
    }
}

/// Minimal set of channels, taken by descending count (lower index first on
/// ties), whose counts reach `coverage` of the total. Returned ascending.
pub fn hot_channels_for_counts(counts: &[u64], coverage: f64) -> Result<Vec<usize>> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "coverage {coverage} outside (0, 1]"
        )));
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Ok(Vec::new());
    }
    // Smallest integer count that meets the fraction; the epsilon absorbs
    // representation error in e.g. 0.8 * 100.
    let target = ((coverage * total as f64) - 1e-9).ceil().max(1.0) as u64;
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut acc = 0u64;
    let mut picked = Vec::new();
    for c in order {
        if acc >= target {
            break;
        }
        acc += counts[c];
        picked.push(c);
    }
    picked.sort_unstable();
    Ok(picked)
}

pub fn build_hot_channels(profiles: &[CalibrationProfile], coverage: f64) -> Result<HotChannelTable> {
    let mut entries = Vec::with_capacity(profiles.len());
    for p in profiles {
        let hot = hot_channels_for_counts(&p.channel_counts, coverage)?;
        let covered = hot.iter().map(|&c| p.channel_counts[c]).sum();
        entries.push(HotChannels {
            layer: p.layer,
            site: p.site,
            hot_channels: hot,
            covered,
            total: p.total_outliers(),
        });
    }
    entries.sort_by_key(|e| (e.layer, e.site));
    Ok(HotChannelTable {
        version: CALIBRATION_VERSION,
        coverage,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerImportance {
    pub layer: usize,
    pub ratio: f64,
    pub pruned: bool,
}

/// Importance per decoder layer: the largest outlier ratio over its sites.
/// Sorted by descending ratio, lower layer first on ties.
pub fn rank_layer_importance(profiles: &[CalibrationProfile]) -> Vec<LayerImportance> {
    let mut by_layer: Vec<LayerImportance> = Vec::new();
    for p in profiles {
        let r = p.outlier_ratio();
        match by_layer.iter_mut().find(|l| l.layer == p.layer) {
            Some(l) => l.ratio = l.ratio.max(r),
            None => by_layer.push(LayerImportance {
                layer: p.layer,
                ratio: r,
                pruned: false,
            }),
        }
    }
    by_layer.sort_by(|a, b| b.ratio.total_cmp(&a.ratio).then(a.layer.cmp(&b.layer)));
    by_layer
}

/// Picks `floor(prune_rate * layers)` layers with the lowest ratio; on equal
/// ratios the lower layer index is pruned first.
pub fn prune_unimportant(importances: &[LayerImportance], prune_rate: f64) -> Result<BTreeSet<usize>> {
    // A rate of exactly 1 is accepted so sweeps can reach "prune everything".
    if !(0.0..=1.0).contains(&prune_rate) {
        return Err(Error::InvalidArgument(format!(
            "prune rate {prune_rate} outside [0, 1]"
        )));
    }
    let n = ((prune_rate * importances.len() as f64) + 1e-9).floor() as usize;
    let mut order: Vec<&LayerImportance> = importances.iter().collect();
    order.sort_by(|a, b| a.ratio.total_cmp(&b.ratio).then(a.layer.cmp(&b.layer)));
    Ok(order.into_iter().take(n).map(|l| l.layer).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub version: u32,
    pub prune_rate: f64,
    pub layers: Vec<LayerImportance>,
}

impl ImportanceTable {
    pub fn build(profiles: &[CalibrationProfile], prune_rate: f64) -> Result<Self> {
        let mut layers = rank_layer_importance(profiles);
        let pruned = prune_unimportant(&layers, prune_rate)?;
        for l in &mut layers {
            l.pruned = pruned.contains(&l.layer);
        }
        Ok(Self {
            version: CALIBRATION_VERSION,
            prune_rate,
            layers,
        })
    }

    pub fn is_pruned(&self, layer: usize) -> bool {
        self.layers.iter().any(|l| l.layer == layer && l.pruned)
    }

    pub fn pruned_layers(&self) -> BTreeSet<usize> {
        self.layers.iter().filter(|l| l.pruned).map(|l| l.layer).collect()
    }
}

/// Channels (columns) holding at least one element with `|x| / s > 127`.
pub fn detect_outlier_channels(x: &Tensor, s: f32) -> Result<Vec<usize>> {
    check_scale(s)?;
    let (rows, cols) = x.dims2("detect_outlier_channels")?;
    let mut hit = vec![false; cols];
    for r in 0..rows {
        for (c, &v) in x.row(r).iter().enumerate() {
            if !hit[c] && is_outlier(v, s) {
                hit[c] = true;
            }
        }
    }
    Ok((0..cols).filter(|&c| hit[c]).collect())
}

/// How the float residual of an outlier channel is formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// `x - s * q`: reconstruction is exact.
    #[default]
    Exact,
    /// `s * floor(x / s / 128) * 128`, kept only for comparison; it does not
    /// reconstruct `x` and is sign-inconsistent for negative outliers.
    PaperFloor,
}

/// Extracted outlier channels as a dense `rows x channels.len()` tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierSlice {
    pub channels: Vec<usize>,
    pub values: Tensor,
    pub origin_shape: [usize; 2],
}

impl OutlierSlice {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            channels: Vec::new(),
            values: Tensor::zeros(rows, 0),
            origin_shape: [rows, cols],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// Residuals placed back at their channels in a zero tensor of the origin shape.
    pub fn scatter(&self) -> Tensor {
        let [rows, cols] = self.origin_shape;
        let mut out = Tensor::zeros(rows, cols);
        let w = self.channels.len();
        for r in 0..rows {
            for (j, &c) in self.channels.iter().enumerate() {
                out.set(r, c, self.values.data()[r * w + j]);
            }
        }
        out
    }
}

/// Splits `x` into its clamped int8 part and the compact residual of every
/// outlier channel.
pub fn split_outliers(x: &Tensor, s: f32, mode: ResidualMode) -> Result<(QTensor, OutlierSlice)> {
    let (rows, cols) = x.dims2("split_outliers")?;
    let q = quantize_clamp(x, s)?;
    let channels = detect_outlier_channels(x, s)?;
    if channels.is_empty() {
        return Ok((q, OutlierSlice::empty(rows, cols)));
    }
    let w = channels.len();
    let mut values = Vec::with_capacity(rows * w);
    for r in 0..rows {
        let xr = x.row(r);
        let qr = q.row(r);
        for &c in &channels {
            let v = match mode {
                ResidualMode::Exact => xr[c] - f32::from(qr[c]) * s,
                ResidualMode::PaperFloor => (xr[c] / s / 128.0).floor() * 128.0 * s,
            };
            values.push(v);
        }
    }
    let slice = OutlierSlice {
        channels,
        values: Tensor::new(vec![rows, w], values)?,
        origin_shape: [rows, cols],
    };
    Ok((q, slice))
}
