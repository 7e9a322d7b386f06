//! Whole-model orchestration: the built-in layer catalog, per-layer
//! compression, ε sweeps, and exact parameter accounting.
//!
//! Storage cost model, all integer arithmetic:
//! dense `P(W) = I·J·Kx·Ky`, factors `P(L) = r·(I+J+Kx+Ky)`, sparse
//! `P(S) = ceil(1.5·nnz) + I`. A layer whose decomposed cost is not strictly
//! below `P(W)` is kept in its original form and flagged.

use serde::Serialize;

use crate::decomp::{
    equilibrate_factors, search_min_rank_cached, tensor_param_count, DecompConfig,
    DecomposedLayer, RankCache,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Non-convolutional parameter count of the reference model (total parameters
/// minus convolution parameters: 26,128,695 − 23,454,912).
pub const DEFAULT_NON_CONV_PARAMS: u64 = 2_673_783;

/// One convolution layer's shape bookkeeping: input `(C, H, W)`, output
/// channel count, kernel extents, and an optional measured dense time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCatalogEntry {
    pub index: usize,
    pub in_shape: (usize, usize, usize),
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub dense_time_ms: Option<f64>,
}

impl LayerCatalogEntry {
    pub fn new(
        index: usize,
        in_shape: (usize, usize, usize),
        out_channels: usize,
        kernel: (usize, usize),
    ) -> Result<Self> {
        let (c, h, w) = in_shape;
        if c == 0 || h == 0 || w == 0 || out_channels == 0 || kernel.0 == 0 || kernel.1 == 0 {
            return Err(Error::Shape(format!(
                "catalog entry {index} has a zero extent: in {in_shape:?}, out {out_channels}, kernel {kernel:?}"
            )));
        }
        Ok(Self {
            index,
            in_shape,
            out_channels,
            kernel,
            dense_time_ms: None,
        })
    }

    /// Weight tensor extents `(I, J, Kx, Ky)`.
    #[inline]
    pub fn weight_dims(&self) -> (usize, usize, usize, usize) {
        (
            self.in_shape.0,
            self.out_channels,
            self.kernel.0,
            self.kernel.1,
        )
    }

    /// Dense parameter count `P(W)`.
    pub fn param_count(&self) -> u64 {
        tensor_param_count(self.weight_dims())
    }

    /// Input dims with the spatial extents scaled by `scale`.
    pub fn input_dims(&self, scale: usize) -> (usize, usize, usize) {
        (
            self.in_shape.0,
            self.in_shape.1 * scale,
            self.in_shape.2 * scale,
        )
    }
}

// (index, in_c, in_h, in_w, out_c, kx, ky) for every conv layer of the
// 53-layer reference model. Parameter counts sum to 23,454,912.
const RESNET50: [(usize, usize, usize, usize, usize, usize, usize); 53] = [
    (0, 3, 224, 224, 64, 7, 7),
    (1, 64, 56, 56, 64, 1, 1),
    (2, 64, 56, 56, 64, 3, 3),
    (3, 64, 56, 56, 256, 1, 1),
    (4, 64, 56, 56, 256, 1, 1),
    (5, 256, 56, 56, 64, 1, 1),
    (6, 64, 56, 56, 64, 3, 3),
    (7, 64, 56, 56, 256, 1, 1),
    (8, 256, 56, 56, 64, 1, 1),
    (9, 64, 56, 56, 64, 3, 3),
    (10, 64, 56, 56, 256, 1, 1),
    (11, 256, 56, 56, 128, 1, 1),
    (12, 128, 56, 56, 128, 3, 3),
    (13, 128, 28, 28, 512, 1, 1),
    (14, 256, 56, 56, 512, 1, 1),
    (15, 512, 28, 28, 128, 1, 1),
    (16, 128, 28, 28, 128, 3, 3),
    (17, 128, 28, 28, 512, 1, 1),
    (18, 512, 28, 28, 128, 1, 1),
    (19, 128, 28, 28, 128, 3, 3),
    (20, 128, 28, 28, 512, 1, 1),
    (21, 512, 28, 28, 128, 1, 1),
    (22, 128, 28, 28, 128, 3, 3),
    (23, 128, 28, 28, 512, 1, 1),
    (24, 512, 28, 28, 256, 1, 1),
    (25, 256, 28, 28, 256, 3, 3),
    (26, 256, 14, 14, 1024, 1, 1),
    (27, 512, 28, 28, 1024, 1, 1),
    (28, 1024, 14, 14, 256, 1, 1),
    (29, 256, 14, 14, 256, 3, 3),
    (30, 256, 14, 14, 1024, 1, 1),
    (31, 1024, 14, 14, 256, 1, 1),
    (32, 256, 14, 14, 256, 3, 3),
    (33, 256, 14, 14, 1024, 1, 1),
    (34, 1024, 14, 14, 256, 1, 1),
    (35, 256, 14, 14, 256, 3, 3),
    (36, 256, 14, 14, 1024, 1, 1),
    (37, 1024, 14, 14, 256, 1, 1),
    (38, 256, 14, 14, 256, 3, 3),
    (39, 256, 14, 14, 1024, 1, 1),
    (40, 1024, 14, 14, 256, 1, 1),
    (41, 256, 14, 14, 256, 3, 3),
    (42, 256, 14, 14, 1024, 1, 1),
    (43, 1024, 14, 14, 512, 1, 1),
    (44, 512, 14, 14, 512, 3, 3),
    (45, 512, 7, 7, 2048, 1, 1),
    (46, 1024, 14, 14, 2048, 1, 1),
    (47, 2048, 7, 7, 512, 1, 1),
    (48, 512, 7, 7, 512, 3, 3),
    (49, 512, 7, 7, 2048, 1, 1),
    (50, 2048, 7, 7, 512, 1, 1),
    (51, 512, 7, 7, 512, 3, 3),
    (52, 512, 7, 7, 2048, 1, 1),
];

/// The embedded 53-layer reference catalog.
pub fn resnet50_catalog() -> Vec<LayerCatalogEntry> {
    RESNET50
        .iter()
        .map(|&(index, c, h, w, out, kx, ky)| LayerCatalogEntry {
            index,
            in_shape: (c, h, w),
            out_channels: out,
            kernel: (kx, ky),
            dense_time_ms: None,
        })
        .collect()
}

pub const CATALOG_CSV_HEADER: &str = "index,in_c,in_h,in_w,out_c,kx,ky";

pub fn catalog_to_csv(entries: &[LayerCatalogEntry]) -> String {
    let mut out = String::from(CATALOG_CSV_HEADER);
    out.push('\n');
    for e in entries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.index, e.in_shape.0, e.in_shape.1, e.in_shape.2, e.out_channels, e.kernel.0, e.kernel.1
        ));
    }
    out
}

/// Parse a catalog CSV. Lines starting with `#` and blank lines are skipped;
/// a leading header row matching the column names is optional.
pub fn parse_catalog_csv(text: &str) -> Result<Vec<LayerCatalogEntry>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line == CATALOG_CSV_HEADER {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 7 {
            return Err(Error::Parse(format!(
                "line {}: expected 7 columns ({CATALOG_CSV_HEADER}), got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let mut nums = [0usize; 7];
        for (slot, field) in nums.iter_mut().zip(&fields) {
            *slot = field.parse().map_err(|_| {
                Error::Parse(format!("line {}: '{field}' is not an integer", lineno + 1))
            })?;
        }
        out.push(LayerCatalogEntry::new(
            nums[0],
            (nums[1], nums[2], nums[3]),
            nums[4],
            (nums[5], nums[6]),
        )?);
    }
    Ok(out)
}

/// Catalog positions sorted by dense parameter count descending, ties broken
/// by the entry's own index ascending.
pub fn order_layers(catalog: &[LayerCatalogEntry]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..catalog.len()).collect();
    order.sort_by(|&x, &y| {
        catalog[y]
            .param_count()
            .cmp(&catalog[x].param_count())
            .then(catalog[x].index.cmp(&catalog[y].index))
    });
    order
}

/// Rank at which the factor form stores about `factor`× fewer parameters
/// than the dense kernel (never below 1).
pub fn rank_for_compression(dims: (usize, usize, usize, usize), factor: f64) -> usize {
    let dense = tensor_param_count(dims) as f64;
    let per_rank = (dims.0 + dims.1 + dims.2 + dims.3) as f64;
    ((dense / (factor * per_rank)).floor() as usize).max(1)
}

/// Minimal-rank decomposition at the configured budget with the factors
/// norm-balanced afterwards. Layers the decomposition cannot shrink come back
/// with `is_compressed() == false`.
pub fn compress_layer(w: &Tensor4, cfg: &DecompConfig) -> Result<DecomposedLayer> {
    let mut cache = RankCache::new();
    compress_layer_cached(w, cfg, &mut cache)
}

fn compress_layer_cached(
    w: &Tensor4,
    cfg: &DecompConfig,
    cache: &mut RankCache,
) -> Result<DecomposedLayer> {
    let layer = search_min_rank_cached(w, cfg, cache)?;
    let balanced = equilibrate_factors(layer.low_rank());
    DecomposedLayer::from_parts(balanced, layer.sparse().clone(), layer.achieved_epsilon())
}

/// One grid point of an ε sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub rank: usize,
    pub achieved_epsilon: f32,
    pub compression_ratio: f64,
}

/// Compress one kernel at every ε of an ascending grid. Decomposition runs
/// are shared across grid points (the rank evaluations depend only on the
/// seed, not on ε), which also makes the reported compression ratio
/// non-decreasing in ε.
pub fn sweep_epsilon(
    w: &Tensor4,
    eps_grid: &[f64],
    cfg: &DecompConfig,
) -> Result<Vec<SweepPoint>> {
    if eps_grid.is_empty() {
        return Err(Error::Config("epsilon grid must be nonempty".into()));
    }
    for pair in eps_grid.windows(2) {
        if pair[1] < pair[0] {
            return Err(Error::Config(format!(
                "epsilon grid must be ascending, got {} after {}",
                pair[1], pair[0]
            )));
        }
    }
    let mut cache = RankCache::new();
    let mut points = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let mut point_cfg = cfg.clone();
        point_cfg.epsilon = eps;
        let layer = compress_layer_cached(w, &point_cfg, &mut cache)?;
        let pc = layer.param_counts();
        points.push(SweepPoint {
            epsilon: eps,
            rank: layer.rank(),
            achieved_epsilon: layer.achieved_epsilon(),
            compression_ratio: pc.original as f64 / (pc.low_rank + pc.sparse) as f64,
        });
    }
    Ok(points)
}

/// Input to the aggregate accounting: a decomposed layer or one kept dense.
/// The decomposed payload is boxed so a mixed list stays small per entry.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerResult {
    Decomposed(Box<DecomposedLayer>),
    Original { dims: (usize, usize, usize, usize) },
}

impl From<DecomposedLayer> for LayerResult {
    fn from(l: DecomposedLayer) -> Self {
        LayerResult::Decomposed(Box::new(l))
    }
}

/// Per-layer accounting row. `stored_params` is what the model actually
/// keeps: the decomposed count when it wins, the original count otherwise.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRecord {
    pub position: usize,
    pub rank: Option<usize>,
    pub achieved_epsilon: Option<f32>,
    pub original_params: u64,
    pub stored_params: u64,
    pub compression_ratio: f64,
    pub compressed: bool,
}

/// Whole-model accounting. Ratios carry exact integer numerators and
/// denominators alongside their floating-point values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionReport {
    pub layers: Vec<LayerRecord>,
    pub non_conv_params: u64,
    /// Sums over compressed layers only.
    pub partial_original_params: u64,
    pub partial_stored_params: u64,
    pub partial_compression: f64,
    /// Sums over the whole model including `non_conv_params`.
    pub total_original_params: u64,
    pub total_stored_params: u64,
    pub total_compression: f64,
}

impl CompressionReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# non_conv_params,{}\n", self.non_conv_params));
        out.push_str(&format!(
            "# partial_compression,{:.6} ({}/{})\n",
            self.partial_compression, self.partial_original_params, self.partial_stored_params
        ));
        out.push_str(&format!(
            "# total_compression,{:.6} ({}/{})\n",
            self.total_compression, self.total_original_params, self.total_stored_params
        ));
        out.push_str(
            "position,rank,achieved_epsilon,original_params,stored_params,compression_ratio,compressed\n",
        );
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{}\n",
                l.position,
                l.rank.map_or(String::new(), |r| r.to_string()),
                l.achieved_epsilon
                    .map_or(String::new(), |e| format!("{e:e}")),
                l.original_params,
                l.stored_params,
                l.compression_ratio,
                l.compressed
            ));
        }
        out
    }
}

/// Aggregate accounting over a model: partial compression covers compressed
/// layers only; total compression covers every layer plus `m`
/// non-convolutional parameters on both sides. All sums are exact.
pub fn aggregate_report(layers: &[LayerResult], m: u64) -> CompressionReport {
    let mut records = Vec::with_capacity(layers.len());
    let mut partial_orig = 0u64;
    let mut partial_stored = 0u64;
    let mut total_orig = m;
    let mut total_stored = m;
    for (position, layer) in layers.iter().enumerate() {
        let record = match layer {
            LayerResult::Decomposed(l) => {
                let pc = l.param_counts();
                let compressed = l.is_compressed();
                let stored = if compressed {
                    pc.low_rank + pc.sparse
                } else {
                    pc.original
                };
                if compressed {
                    partial_orig += pc.original;
                    partial_stored += stored;
                }
                LayerRecord {
                    position,
                    rank: Some(l.rank()),
                    achieved_epsilon: Some(l.achieved_epsilon()),
                    original_params: pc.original,
                    stored_params: stored,
                    compression_ratio: pc.original as f64 / stored as f64,
                    compressed,
                }
            }
            LayerResult::Original { dims } => {
                let p = tensor_param_count(*dims);
                LayerRecord {
                    position,
                    rank: None,
                    achieved_epsilon: None,
                    original_params: p,
                    stored_params: p,
                    compression_ratio: 1.0,
                    compressed: false,
                }
            }
        };
        total_orig += record.original_params;
        total_stored += record.stored_params;
        records.push(record);
    }
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    CompressionReport {
        layers: records,
        non_conv_params: m,
        partial_original_params: partial_orig,
        partial_stored_params: partial_stored,
        partial_compression: ratio(partial_orig, partial_stored),
        total_original_params: total_orig,
        total_stored_params: total_stored,
        total_compression: ratio(total_orig, total_stored),
    }
}
