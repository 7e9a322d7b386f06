//! Convolution kernels split into a low-rank factor stack plus a sparse
//! residual, with direct CPU execution paths for both parts.
//!
//! The pipeline: [`decompose_lrs`] alternates a least-squares sweep on the
//! factor form with a largest-magnitude projection for the residual;
//! [`search_min_rank`] finds the smallest rank meeting a relative-error
//! budget; [`compress_layer`] norm-balances the winning factors and does the
//! parameter accounting. Compressed layers run without reconstruction:
//! [`conv_cp`] chains four small convolutions (channel mix, two depthwise
//! strips, channel expand) and [`conv_sparse`] scatter-adds the stored
//! weights, each position touched exactly once per input pixel. [`run_suite`]
//! times all paths against the direct convolution on the built-in layer
//! catalog, and the `lrst`/`lrsd` byte formats round-trip kernels and
//! decompositions bit-exactly.
//!
//! ```
//! use lrsconv::{compress_layer, DecompConfig, Tensor4};
//!
//! // A separable kernel collapses to rank one and a handful of residuals.
//! let w = Tensor4::from_fn((16, 16, 3, 3), |i, j, k, t| {
//!     (i as f32 - 7.5) * (j as f32 * 0.1) * (k as f32 + 1.0) * (t as f32 - 1.0)
//! })?;
//! let layer = compress_layer(&w, &DecompConfig::default())?;
//! assert_eq!(layer.rank(), 1);
//! assert!(layer.is_compressed());
//! # Ok::<(), lrsconv::Error>(())
//! ```

pub mod bench;
pub mod compress;
pub mod conv;
pub mod decomp;
pub mod error;
pub mod io;
pub mod tensor;

pub use bench::{
    bench_layer, pin_to_core, run_suite, BenchConfig, BenchReport, BenchResult, BenchRow,
    ConvPath, MachineInfo, PathParams,
};
pub use compress::{
    aggregate_report, catalog_to_csv, compress_layer, order_layers, parse_catalog_csv,
    rank_for_compression, resnet50_catalog, sweep_epsilon, CompressionReport, LayerCatalogEntry,
    LayerRecord, LayerResult, SweepPoint, DEFAULT_NON_CONV_PARAMS,
};
pub use conv::{
    conv_cp, conv_decomposed, conv_dense, conv_sparse, pack_sparse_kernel, relative_error,
    ConvSpec, FeatureMap, SparseKernel,
};
pub use decomp::{
    cp_als_step, decompose_lrs, equilibrate_factors, project_sparse, reconstruct_cp,
    search_min_rank, CpFactors, DecompConfig, DecomposedLayer, ParamCounts, SparseTensor4,
};
pub use error::{Error, Result};
pub use io::{
    layer_from_bytes, layer_to_bytes, read_layer, read_tensor, tensor_from_bytes,
    tensor_to_bytes, write_layer, write_tensor,
};
pub use tensor::{fold, frobenius_norm, khatri_rao, unfold, Matrix, Tensor4};
