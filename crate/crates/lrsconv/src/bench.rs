//! Wall-clock comparison of the execution paths on catalog layers.
//!
//! Protocol, fixed for every row: seeded synthetic input and operator, two
//! untimed warm-up runs, at least five timed runs, median wall time. Speedups
//! are always relative to this harness's own direct path on the same input.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::compress::{rank_for_compression, LayerCatalogEntry};
use crate::conv::{
    conv_cp, conv_dense, conv_sparse, pack_sparse_kernel, ConvSpec, FeatureMap, SparseKernel,
};
use crate::decomp::{CpFactors, SparseTensor4};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor4};

/// Untimed runs before measurement starts.
pub const WARMUP_RUNS: usize = 2;
/// Fewer timed runs than this and the median is too noisy to report.
pub const MIN_REPEATS: usize = 5;
/// Scales beyond 3 square the working set past what the protocol covers.
pub const MAX_SCALE: usize = 3;

const DEFAULT_MEMORY_LIMIT: u64 = 4 << 30;

/// Which convolution implementation a benchmark row exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvPath {
    Dense,
    Cp,
    Sparse,
}

pub const ALL_PATHS: [ConvPath; 3] = [ConvPath::Dense, ConvPath::Cp, ConvPath::Sparse];

impl fmt::Display for ConvPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConvPath::Dense => "dense",
            ConvPath::Cp => "cp",
            ConvPath::Sparse => "sparse",
        })
    }
}

impl FromStr for ConvPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "dense" => Ok(ConvPath::Dense),
            "cp" => Ok(ConvPath::Cp),
            "sparse" => Ok(ConvPath::Sparse),
            other => Err(Error::Parse(format!(
                "unknown path '{other}' (expected dense, cp, or sparse)"
            ))),
        }
    }
}

/// Operator knobs for a single benchmark row. `rank` applies to the
/// factorized path, `density` to the sparse path; the seed drives both the
/// synthetic input and the synthetic operator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathParams {
    pub rank: usize,
    pub density: f64,
    pub seed: u64,
    pub memory_limit_bytes: u64,
}

impl Default for PathParams {
    fn default() -> Self {
        Self {
            rank: 1,
            density: 0.01,
            seed: 0,
            memory_limit_bytes: DEFAULT_MEMORY_LIMIT,
        }
    }
}

/// Host description attached to every report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MachineInfo {
    pub cpu_model: String,
    pub logical_cores: usize,
    pub pinned_core: Option<usize>,
}

impl MachineInfo {
    pub fn detect() -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|text| {
                text.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|v| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        let logical_cores = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1);
        Self {
            cpu_model,
            logical_cores,
            pinned_core: None,
        }
    }
}

/// Pin the calling thread to one CPU so timed runs stop migrating.
#[cfg(target_os = "linux")]
pub fn pin_to_core(core: usize) -> Result<()> {
    if core >= libc::CPU_SETSIZE as usize {
        return Err(Error::Config(format!(
            "core {core} is out of range (max {})",
            libc::CPU_SETSIZE - 1
        )));
    }
    // SAFETY: zeroed cpu_set_t is a valid empty set; the libc macros only
    // write within it, and sched_setaffinity just reads it.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_ZERO(&mut set);
        libc::CPU_SET(core, &mut set);
        if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
            return Err(Error::Config(format!(
                "failed to pin to core {core}: {}",
                std::io::Error::last_os_error()
            )));
        }
    }
    Ok(())
}

#[cfg(not(target_os = "linux"))]
pub fn pin_to_core(_core: usize) -> Result<()> {
    Err(Error::Config("CPU pinning is only supported on Linux".into()))
}

/// One measured row. `macs` is the path's theoretical multiply-accumulate
/// count for this input size, reported for context next to the wall time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub layer_index: usize,
    pub path: ConvPath,
    pub scale: usize,
    pub repeats: usize,
    pub seed: u64,
    pub rank: Option<usize>,
    pub nnz: Option<usize>,
    pub macs: u64,
    pub median_ms: f64,
    pub dense_median_ms: Option<f64>,
    pub speedup: Option<f64>,
}

enum Operator {
    Dense(Tensor4),
    Cp(CpFactors),
    Sparse(SparseKernel),
}

/// Time one path on one catalog layer. The input and operator are drawn from
/// `params.seed`; the result's `dense_median_ms`/`speedup` stay empty here and
/// are filled in by [`run_suite`], which owns the baseline measurement.
pub fn bench_layer(
    entry: &LayerCatalogEntry,
    path: ConvPath,
    params: &PathParams,
    scale: usize,
    repeats: usize,
) -> Result<BenchResult> {
    if !(1..=MAX_SCALE).contains(&scale) {
        return Err(Error::Config(format!(
            "scale must be between 1 and {MAX_SCALE}, got {scale}"
        )));
    }
    if repeats < MIN_REPEATS {
        return Err(Error::Config(format!(
            "repeats must be at least {MIN_REPEATS}, got {repeats}"
        )));
    }
    if params.rank == 0 {
        return Err(Error::Config("rank must be at least 1".into()));
    }
    if !(params.density > 0.0 && params.density <= 1.0) {
        return Err(Error::Config(format!(
            "density must lie in (0, 1], got {}",
            params.density
        )));
    }
    check_memory(entry, path, params, scale)?;

    let spec = ConvSpec::new(entry.in_shape.0, entry.out_channels, entry.kernel)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let x = FeatureMap::from_fn(entry.input_dims(scale), |_, _, _| {
        rng.random_range(-1.0f32..1.0)
    })?;
    let op = build_operator(&spec, path, params, &mut rng)?;
    let run = |op: &Operator| -> Result<FeatureMap> {
        match op {
            Operator::Dense(w) => conv_dense(&x, w, &spec),
            Operator::Cp(f) => conv_cp(&x, f, &spec),
            Operator::Sparse(k) => conv_sparse(&x, k, &spec),
        }
    };

    for _ in 0..WARMUP_RUNS {
        std::hint::black_box(run(&op)?);
    }
    let mut times_ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let y = run(&op)?;
        let elapsed = start.elapsed();
        std::hint::black_box(y.data());
        times_ms.push(elapsed.as_secs_f64() * 1e3);
    }

    let (rank, nnz) = match &op {
        Operator::Dense(_) => (None, None),
        Operator::Cp(f) => (Some(f.rank()), None),
        Operator::Sparse(k) => (None, Some(k.nnz())),
    };
    let (_, h, w) = entry.input_dims(scale);
    Ok(BenchResult {
        layer_index: entry.index,
        path,
        scale,
        repeats,
        seed: params.seed,
        rank,
        nnz,
        macs: per_pixel_macs(entry, path, params.rank, nnz.unwrap_or(0)) * (h * w) as u64,
        median_ms: median(&mut times_ms),
        dense_median_ms: None,
        speedup: None,
    })
}

fn per_pixel_macs(entry: &LayerCatalogEntry, path: ConvPath, rank: usize, nnz: usize) -> u64 {
    let (i, j, kx, ky) = entry.weight_dims();
    match path {
        ConvPath::Dense => (i * j * kx * ky) as u64,
        ConvPath::Cp => (rank * (i + j + kx + ky)) as u64,
        ConvPath::Sparse => nnz as u64,
    }
}

fn sparse_cell_count(entry: &LayerCatalogEntry, density: f64) -> usize {
    let numel = entry.param_count() as f64;
    ((density * numel).round() as usize).clamp(1, numel as usize)
}

/// Refuse rows whose working set would not fit: all buffers are f32, and the
/// factorized path keeps two rank-sized intermediates alive at its peak.
fn check_memory(
    entry: &LayerCatalogEntry,
    path: ConvPath,
    params: &PathParams,
    scale: usize,
) -> Result<()> {
    let (c, h, w) = entry.input_dims(scale);
    let input = c * h * w;
    let output = entry.out_channels * h * w;
    let operator = match path {
        ConvPath::Dense => entry.param_count() as usize,
        ConvPath::Cp => {
            let (i, j, kx, ky) = entry.weight_dims();
            params.rank * (i + j + kx + ky) + 2 * params.rank * h * w
        }
        // Values plus one u32-sized packed index per entry.
        ConvPath::Sparse => 2 * sparse_cell_count(entry, params.density),
    };
    let bytes = 4 * (input + output + operator) as u64;
    if bytes > params.memory_limit_bytes {
        return Err(Error::ResourceLimit(format!(
            "layer {} ({path}) at scale {scale} needs about {bytes} bytes \
             (input {c}x{h}x{w}, weights {:?}), limit {}",
            entry.index,
            entry.weight_dims(),
            params.memory_limit_bytes
        )));
    }
    Ok(())
}

fn build_operator(
    spec: &ConvSpec,
    path: ConvPath,
    params: &PathParams,
    rng: &mut ChaCha8Rng,
) -> Result<Operator> {
    let dims = spec.weight_dims();
    Ok(match path {
        ConvPath::Dense => {
            Operator::Dense(Tensor4::from_fn(dims, |_, _, _, _| {
                rng.random_range(-1.0f32..1.0)
            })?)
        }
        ConvPath::Cp => {
            let mut factor = |rows: usize| {
                Matrix::from_fn(rows, params.rank, |_, _| rng.random_range(-1.0f32..1.0))
            };
            let (a, b, c, d) = (factor(dims.0)?, factor(dims.1)?, factor(dims.2)?, factor(dims.3)?);
            Operator::Cp(CpFactors::new(a, b, c, d)?)
        }
        ConvPath::Sparse => {
            let entry_count = {
                let numel = (dims.0 * dims.1 * dims.2 * dims.3) as f64;
                ((params.density * numel).round() as usize).clamp(1, numel as usize)
            };
            let numel = dims.0 * dims.1 * dims.2 * dims.3;
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < entry_count {
                picked.insert(rng.random_range(0..numel as u32));
            }
            let entries: Vec<(u32, f32)> = picked
                .into_iter()
                .map(|idx| (idx, rng.random_range(-1.0f32..1.0)))
                .collect();
            Operator::Sparse(pack_sparse_kernel(&SparseTensor4::new(dims, entries)?))
        }
    })
}

fn median(times: &mut [f64]) -> f64 {
    times.sort_by(f64::total_cmp);
    let n = times.len();
    if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    }
}

/// Suite-wide settings. The factorized path picks each layer's rank from
/// `compression_factor`; the sparse path keeps `density` of each kernel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchConfig {
    pub paths: Vec<ConvPath>,
    pub scales: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    pub compression_factor: f64,
    pub density: f64,
    pub memory_limit_bytes: u64,
    pub pin_core: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            paths: ALL_PATHS.to_vec(),
            scales: vec![1],
            repeats: MIN_REPEATS,
            seed: 0,
            compression_factor: 5.0,
            density: 0.01,
            memory_limit_bytes: DEFAULT_MEMORY_LIMIT,
            pin_core: None,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.paths.is_empty() {
            return Err(Error::Config("at least one path is required".into()));
        }
        if self.scales.is_empty() {
            return Err(Error::Config("at least one scale is required".into()));
        }
        for &s in &self.scales {
            if !(1..=MAX_SCALE).contains(&s) {
                return Err(Error::Config(format!(
                    "scale must be between 1 and {MAX_SCALE}, got {s}"
                )));
            }
        }
        if self.repeats < MIN_REPEATS {
            return Err(Error::Config(format!(
                "repeats must be at least {MIN_REPEATS}, got {}",
                self.repeats
            )));
        }
        if self.compression_factor < 1.0 {
            return Err(Error::Config(format!(
                "compression factor must be at least 1, got {}",
                self.compression_factor
            )));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!(
                "density must lie in (0, 1], got {}",
                self.density
            )));
        }
        Ok(())
    }
}

/// One suite row: either a measurement or the error that kept the row from
/// running. Exactly one of `result`/`error` is set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub layer_index: usize,
    pub path: ConvPath,
    pub scale: usize,
    pub result: Option<BenchResult>,
    pub error: Option<String>,
}

impl BenchRow {
    fn ok(result: BenchResult) -> Self {
        Self {
            layer_index: result.layer_index,
            path: result.path,
            scale: result.scale,
            result: Some(result),
            error: None,
        }
    }

    fn failed(layer_index: usize, path: ConvPath, scale: usize, err: &Error) -> Self {
        Self {
            layer_index,
            path,
            scale,
            result: None,
            error: Some(err.to_string()),
        }
    }
}

pub const BENCH_CSV_HEADER: &str =
    "layer,path,scale,repeats,seed,rank,nnz,macs,median_ms,dense_median_ms,speedup,error";

/// Every row of a suite run plus the settings and host that produced them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub machine: MachineInfo,
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# cpu_model,{}\n", self.machine.cpu_model));
        out.push_str(&format!("# logical_cores,{}\n", self.machine.logical_cores));
        out.push_str(&format!(
            "# pinned_core,{}\n",
            self.machine
                .pinned_core
                .map_or(String::from("none"), |c| c.to_string())
        ));
        out.push_str(&format!("# repeats,{}\n", self.config.repeats));
        out.push_str(&format!("# seed,{}\n", self.config.seed));
        out.push_str(&format!(
            "# compression_factor,{}\n",
            self.config.compression_factor
        ));
        out.push_str(&format!("# density,{}\n", self.config.density));
        out.push_str(BENCH_CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            let blank = String::new();
            let fmt_opt_u = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
            let fmt_opt_f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
            match &row.result {
                Some(r) => out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{:.6},{},{},\n",
                    r.layer_index,
                    r.path,
                    r.scale,
                    r.repeats,
                    r.seed,
                    fmt_opt_u(r.rank),
                    fmt_opt_u(r.nnz),
                    r.macs,
                    r.median_ms,
                    fmt_opt_f(r.dense_median_ms),
                    fmt_opt_f(r.speedup),
                )),
                None => out.push_str(&format!(
                    "{},{},{},,,,,,,,,\"{}\"\n",
                    row.layer_index,
                    row.path,
                    row.scale,
                    row.error
                        .as_deref()
                        .unwrap_or(&blank)
                        .replace('"', "'")
                )),
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

// Distinct rows get decorrelated input/operator streams (splitmix finalizer).
fn derive_seed(base: u64, layer: usize, scale: usize, path: ConvPath) -> u64 {
    let mut z = base
        ^ ((layer as u64) << 32)
        ^ ((scale as u64) << 8)
        ^ path as u64;
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Run every requested path over every catalog entry and scale, in catalog
/// order. The direct path is measured once per entry and scale and reused as
/// the baseline for that group's speedups. A row that fails (for instance on
/// the memory guard) is reported with its error; the suite keeps going.
pub fn run_suite(catalog: &[LayerCatalogEntry], config: &BenchConfig) -> Result<BenchReport> {
    config.validate()?;
    let mut machine = MachineInfo::detect();
    if let Some(core) = config.pin_core {
        pin_to_core(core)?;
        machine.pinned_core = Some(core);
    }
    let mut rows = Vec::with_capacity(catalog.len() * config.scales.len() * config.paths.len());
    for entry in catalog {
        for &scale in &config.scales {
            let base_params = PathParams {
                rank: 1,
                density: config.density,
                seed: derive_seed(config.seed, entry.index, scale, ConvPath::Dense),
                memory_limit_bytes: config.memory_limit_bytes,
            };
            let baseline = bench_layer(entry, ConvPath::Dense, &base_params, scale, config.repeats);
            let dense_median = baseline.as_ref().ok().map(|r| r.median_ms);
            for &path in &config.paths {
                let row = if path == ConvPath::Dense {
                    match &baseline {
                        Ok(r) => {
                            let mut r = r.clone();
                            r.dense_median_ms = Some(r.median_ms);
                            r.speedup = Some(1.0);
                            BenchRow::ok(r)
                        }
                        Err(e) => BenchRow::failed(entry.index, path, scale, e),
                    }
                } else {
                    let params = PathParams {
                        rank: rank_for_compression(
                            entry.weight_dims(),
                            config.compression_factor,
                        ),
                        density: config.density,
                        seed: derive_seed(config.seed, entry.index, scale, path),
                        memory_limit_bytes: config.memory_limit_bytes,
                    };
                    match bench_layer(entry, path, &params, scale, config.repeats) {
                        Ok(mut r) => {
                            r.dense_median_ms = dense_median;
                            r.speedup = dense_median.map(|d| d / r.median_ms);
                            BenchRow::ok(r)
                        }
                        Err(e) => BenchRow::failed(entry.index, path, scale, &e),
                    }
                };
                rows.push(row);
            }
        }
    }
    Ok(BenchReport {
        machine,
        config: config.clone(),
        rows,
    })
}
