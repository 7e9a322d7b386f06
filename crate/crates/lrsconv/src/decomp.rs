//! Low-rank plus sparse factorization of 4-way kernels.
//!
//! A kernel `W` is split as `W ≈ L + S`: `L` is a CP model of fixed rank
//! (four factor matrices), `S` keeps a fixed fraction of entries chosen by
//! magnitude. The two parts are fitted alternately: one ALS sweep on `W - S`,
//! then a top-magnitude projection of `W - L`. Storage is `f32`; all solves
//! and accumulations run in `f64`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{sum_sq, unfold, Matrix, Tensor4};

/// CP factor matrices `(a, b, c, d)` with row counts matching the tensor
/// extents `(I, J, K, T)` and a shared column count (the rank).
#[derive(Debug, Clone, PartialEq)]
pub struct CpFactors {
    a: Matrix,
    b: Matrix,
    c: Matrix,
    d: Matrix,
}

impl CpFactors {
    pub fn new(a: Matrix, b: Matrix, c: Matrix, d: Matrix) -> Result<Self> {
        let r = a.cols();
        if b.cols() != r || c.cols() != r || d.cols() != r {
            return shape_err(format!(
                "factors must share a column count, got {}/{}/{}/{}",
                a.cols(),
                b.cols(),
                c.cols(),
                d.cols()
            ));
        }
        Ok(Self { a, b, c, d })
    }

    pub fn zeros(dims: (usize, usize, usize, usize), rank: usize) -> Result<Self> {
        Ok(Self {
            a: Matrix::zeros(dims.0, rank)?,
            b: Matrix::zeros(dims.1, rank)?,
            c: Matrix::zeros(dims.2, rank)?,
            d: Matrix::zeros(dims.3, rank)?,
        })
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.a.rows(), self.b.rows(), self.c.rows(), self.d.rows())
    }

    #[inline]
    pub fn a(&self) -> &Matrix {
        &self.a
    }

    #[inline]
    pub fn b(&self) -> &Matrix {
        &self.b
    }

    #[inline]
    pub fn c(&self) -> &Matrix {
        &self.c
    }

    #[inline]
    pub fn d(&self) -> &Matrix {
        &self.d
    }

    /// Parameters stored by the factor form: `r·(I + J + K + T)`.
    pub fn param_count(&self) -> u64 {
        let (i, j, k, t) = self.dims();
        (self.rank() as u64) * ((i + j + k + t) as u64)
    }
}

/// Sparse 4-way tensor: linear indices (strictly ascending, `u32`) paired
/// with values. Indexing follows the dense row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor4 {
    dims: (usize, usize, usize, usize),
    entries: Vec<(u32, f32)>,
}

impl SparseTensor4 {
    pub fn new(dims: (usize, usize, usize, usize), entries: Vec<(u32, f32)>) -> Result<Self> {
        let numel = Tensor4::zeros(dims)?.numel();
        if numel > u32::MAX as usize + 1 {
            return Err(Error::Sparse(format!(
                "numel {numel} exceeds u32 index range"
            )));
        }
        let mut prev: Option<u32> = None;
        for &(idx, _) in &entries {
            if (idx as usize) >= numel {
                return Err(Error::Sparse(format!(
                    "index {idx} out of range for dims {dims:?} (numel {numel})"
                )));
            }
            if let Some(p) = prev {
                if idx <= p {
                    return Err(Error::Sparse(format!(
                        "indices must be strictly ascending, got {p} then {idx}"
                    )));
                }
            }
            prev = Some(idx);
        }
        Ok(Self { dims, entries })
    }

    pub fn empty(dims: (usize, usize, usize, usize)) -> Result<Self> {
        Self::new(dims, Vec::new())
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.dims
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    #[inline]
    pub fn entries(&self) -> &[(u32, f32)] {
        &self.entries
    }

    pub fn to_dense(&self) -> Tensor4 {
        let mut t = Tensor4::zeros(self.dims).expect("dims validated at construction");
        for &(idx, v) in &self.entries {
            t.data_mut()[idx as usize] = v;
        }
        t
    }

    /// Storage cost in 32-bit words: each entry is one value plus one 16-bit
    /// packed index (1.5 words), plus one slice offset per input channel.
    pub fn param_count(&self) -> u64 {
        (3 * self.nnz() as u64).div_ceil(2) + self.dims.0 as u64
    }
}

/// Knobs for the decomposition and the rank search.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecompConfig {
    /// Relative Frobenius residual budget, in `[0, 1]`.
    pub epsilon: f64,
    /// Fraction of entries kept in the sparse term, in `[0, 1)`.
    pub cardinality: f64,
    /// Upper bound for the rank search.
    pub max_rank: usize,
    /// Outer iteration cap shared by the ALS and projection loop.
    pub als_max_iters: usize,
    /// Stop when the fit `1 - ε` improves by less than this between iterations.
    pub als_tol: f64,
    /// Seed for the deterministic initialization.
    pub seed: u64,
}

impl Default for DecompConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            cardinality: 0.01,
            max_rank: 512,
            als_max_iters: 100,
            als_tol: 1e-6,
            seed: 0,
        }
    }
}

impl DecompConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "epsilon must be in [0, 1], got {}",
                self.epsilon
            )));
        }
        if !self.cardinality.is_finite() || !(0.0..1.0).contains(&self.cardinality) {
            return Err(Error::Config(format!(
                "cardinality must be in [0, 1), got {}",
                self.cardinality
            )));
        }
        if self.max_rank == 0 {
            return Err(Error::Config("max_rank must be >= 1".into()));
        }
        if self.als_max_iters == 0 {
            return Err(Error::Config("als_max_iters must be >= 1".into()));
        }
        if !self.als_tol.is_finite() || self.als_tol < 0.0 {
            return Err(Error::Config(format!(
                "als_tol must be finite and >= 0, got {}",
                self.als_tol
            )));
        }
        Ok(())
    }
}

/// Parameter counts of one decomposed layer, exact integer arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub original: u64,
    pub low_rank: u64,
    pub sparse: u64,
}

/// One kernel's full decomposition result.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedLayer {
    low_rank: CpFactors,
    sparse: SparseTensor4,
    achieved_epsilon: f32,
    rank: usize,
    original_dims: (usize, usize, usize, usize),
    param_counts: ParamCounts,
}

impl DecomposedLayer {
    pub fn from_parts(
        low_rank: CpFactors,
        sparse: SparseTensor4,
        achieved_epsilon: f32,
    ) -> Result<Self> {
        let dims = low_rank.dims();
        if sparse.dims() != dims {
            return shape_err(format!(
                "factor dims {:?} and sparse dims {:?} disagree",
                dims,
                sparse.dims()
            ));
        }
        let param_counts = ParamCounts {
            original: tensor_param_count(dims),
            low_rank: low_rank.param_count(),
            sparse: sparse.param_count(),
        };
        Ok(Self {
            rank: low_rank.rank(),
            low_rank,
            sparse,
            achieved_epsilon,
            original_dims: dims,
            param_counts,
        })
    }

    #[inline]
    pub fn low_rank(&self) -> &CpFactors {
        &self.low_rank
    }

    #[inline]
    pub fn sparse(&self) -> &SparseTensor4 {
        &self.sparse
    }

    #[inline]
    pub fn achieved_epsilon(&self) -> f32 {
        self.achieved_epsilon
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.rank
    }

    #[inline]
    pub fn original_dims(&self) -> (usize, usize, usize, usize) {
        self.original_dims
    }

    #[inline]
    pub fn param_counts(&self) -> ParamCounts {
        self.param_counts
    }

    pub fn compressed_param_count(&self) -> u64 {
        self.param_counts.low_rank + self.param_counts.sparse
    }

    /// The decomposed form must be strictly smaller to count as compressed.
    pub fn is_compressed(&self) -> bool {
        self.compressed_param_count() < self.param_counts.original
    }
}

pub(crate) fn tensor_param_count(dims: (usize, usize, usize, usize)) -> u64 {
    dims.0 as u64 * dims.1 as u64 * dims.2 as u64 * dims.3 as u64
}

/// Dense tensor represented by the factors: entry `(i,j,k,t)` is
/// `Σ_r a[i,r]·b[j,r]·c[k,r]·d[t,r]`, accumulated in `f64`.
pub fn reconstruct_cp(f: &CpFactors) -> Tensor4 {
    let (di, dj, dk, dt) = f.dims();
    let numel = di * dj * dk * dt;
    let mut acc = vec![0f64; numel];
    for r in 0..f.rank() {
        let mut idx = 0;
        for i in 0..di {
            let av = f.a.at(i, r) as f64;
            for j in 0..dj {
                let ab = av * f.b.at(j, r) as f64;
                for k in 0..dk {
                    let abc = ab * f.c.at(k, r) as f64;
                    for t in 0..dt {
                        acc[idx] += abc * f.d.at(t, r) as f64;
                        idx += 1;
                    }
                }
            }
        }
    }
    let data: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
    Tensor4::new(f.dims(), data).expect("factor dims are valid tensor dims")
}

/// Keep the `round(cardinality · numel)` entries of largest magnitude;
/// ties break toward the smaller linear index. Kept values are copied
/// unmodified.
pub fn project_sparse(t: &Tensor4, cardinality: f64) -> Result<SparseTensor4> {
    if !cardinality.is_finite() || !(0.0..1.0).contains(&cardinality) {
        return Err(Error::Config(format!(
            "cardinality must be in [0, 1), got {cardinality}"
        )));
    }
    let numel = t.numel();
    if numel > u32::MAX as usize + 1 {
        return Err(Error::Sparse(format!(
            "numel {numel} exceeds u32 index range"
        )));
    }
    let n = (cardinality * numel as f64).round() as usize;
    let n = n.min(numel);
    if n == 0 {
        return SparseTensor4::empty(t.dims());
    }
    let data = t.data();
    let mut order: Vec<u32> = (0..numel as u32).collect();
    let by_magnitude_then_index = |&x: &u32, &y: &u32| {
        let ax = data[x as usize].abs();
        let ay = data[y as usize].abs();
        ay.total_cmp(&ax).then(x.cmp(&y))
    };
    if n < numel {
        order.select_nth_unstable_by(n - 1, by_magnitude_then_index);
    }
    let mut kept = order[..n].to_vec();
    kept.sort_unstable();
    let entries = kept
        .into_iter()
        .map(|idx| (idx, data[idx as usize]))
        .collect();
    SparseTensor4::new(t.dims(), entries)
}

/// One full alternating-least-squares sweep: each factor in turn is solved
/// from the mode unfolding of `target` against the Khatri-Rao product of the
/// other three, using a pseudo-inverse (relative singular-value cutoff 1e-10)
/// so rank-deficient normal equations never abort.
pub fn cp_als_step(factors: &CpFactors, target: &Tensor4) -> Result<CpFactors> {
    if factors.dims() != target.dims() {
        return shape_err(format!(
            "factor dims {:?} do not match target dims {:?}",
            factors.dims(),
            target.dims()
        ));
    }
    let mut f = [
        to_f64(&factors.a),
        to_f64(&factors.b),
        to_f64(&factors.c),
        to_f64(&factors.d),
    ];
    // For each mode, the other factors in descending mode order; their
    // Khatri-Rao columns then enumerate the unfolding's columns (lowest
    // remaining mode fastest).
    const OTHERS: [[usize; 3]; 4] = [[3, 2, 1], [3, 2, 0], [3, 1, 0], [2, 1, 0]];
    for mode in 0..4 {
        let [o1, o2, o3] = OTHERS[mode];
        let kr = khatri_rao_f64(&[&f[o1], &f[o2], &f[o3]]);
        let unf = to_f64(&unfold(target, mode + 1)?);
        let mttkrp = &unf * &kr;
        let mut v = gram(&f[o1]);
        v.component_mul_assign(&gram(&f[o2]));
        v.component_mul_assign(&gram(&f[o3]));
        f[mode] = &mttkrp * pinv_psd(&v);
    }
    let [fa, fb, fc, fd] = f;
    CpFactors::new(to_f32(&fa), to_f32(&fb), to_f32(&fc), to_f32(&fd))
}

/// Alternate one ALS sweep on `w - S` with a magnitude projection of `w - L`
/// until the fit improvement drops below `als_tol` or `als_max_iters` is
/// reached. Returns the factors, the sparse term, and the relative residual
/// `‖w - L - S‖_F / ‖w‖_F`.
pub fn decompose_lrs(
    w: &Tensor4,
    rank: usize,
    cfg: &DecompConfig,
) -> Result<(CpFactors, SparseTensor4, f32)> {
    cfg.validate()?;
    if rank == 0 || rank > cfg.max_rank {
        return Err(Error::Config(format!(
            "rank must be in 1..={}, got {rank}",
            cfg.max_rank
        )));
    }
    let norm_w = sum_sq(w.data()).sqrt();
    if norm_w == 0.0 {
        return Ok((
            CpFactors::zeros(w.dims(), rank)?,
            SparseTensor4::empty(w.dims())?,
            0.0,
        ));
    }
    // With no factors yet the sparse term starts as the projection of `w`
    // itself; initializing the factors on `w - S` keeps a handful of large
    // outliers from dominating the unfoldings' leading singular vectors.
    let mut sparse = project_sparse(w, cfg.cardinality)?;
    let mut init_target = w.clone();
    for &(idx, v) in sparse.entries() {
        init_target.data_mut()[idx as usize] -= v;
    }
    let mut factors = init_factors(&init_target, rank, cfg.seed)?;
    let mut prev_fit: Option<f64> = None;
    let mut eps = 1.0f64;
    for _ in 0..cfg.als_max_iters {
        let mut target = w.clone();
        for &(idx, v) in sparse.entries() {
            target.data_mut()[idx as usize] -= v;
        }
        factors = cp_als_step(&factors, &target)?;
        let low = reconstruct_cp(&factors);
        let mut resid = w.clone();
        for (rv, &lv) in resid.data_mut().iter_mut().zip(low.data()) {
            *rv -= lv;
        }
        sparse = project_sparse(&resid, cfg.cardinality)?;
        // The projection keeps residual values verbatim, so the remaining
        // residual energy is the total minus the kept part.
        let ss_all = sum_sq(resid.data());
        let ss_kept: f64 = sparse
            .entries()
            .iter()
            .map(|&(_, v)| (v as f64) * (v as f64))
            .sum();
        eps = (ss_all - ss_kept).max(0.0).sqrt() / norm_w;
        let fit = 1.0 - eps;
        if let Some(p) = prev_fit {
            if (fit - p).abs() < cfg.als_tol {
                break;
            }
        }
        prev_fit = Some(fit);
    }
    Ok((factors, sparse, eps as f32))
}

pub(crate) type RankCache = BTreeMap<usize, (CpFactors, SparseTensor4, f32)>;

/// Smallest rank in `[1, max_rank]` whose achieved residual meets
/// `cfg.epsilon`, found by doubling then bisection. The returned rank and its
/// predecessor are always evaluated (the predecessor fails whenever rank > 1).
/// If no rank within `max_rank` meets the budget, the `max_rank` result is
/// returned with `achieved_epsilon > epsilon` as the flag.
pub fn search_min_rank(w: &Tensor4, cfg: &DecompConfig) -> Result<DecomposedLayer> {
    let mut cache = RankCache::new();
    search_min_rank_cached(w, cfg, &mut cache)
}

pub(crate) fn search_min_rank_cached(
    w: &Tensor4,
    cfg: &DecompConfig,
    cache: &mut RankCache,
) -> Result<DecomposedLayer> {
    cfg.validate()?;
    if cfg.epsilon <= 0.0 {
        return Err(Error::Config(
            "rank search requires epsilon > 0".into(),
        ));
    }
    let pass = |eps: f32| (eps as f64) <= cfg.epsilon;
    let mr = cfg.max_rank;

    let mut candidate = if pass(eval_rank(w, cfg, 1, cache)?) {
        1
    } else if mr == 1 {
        return layer_from_cache(cache, 1);
    } else {
        // Doubling phase: grow until the budget is met or max_rank fails too.
        let mut lo = 1;
        let mut hi = None;
        let mut r = 2;
        loop {
            if pass(eval_rank(w, cfg, r, cache)?) {
                hi = Some(r);
                break;
            }
            lo = r;
            if r == mr {
                break;
            }
            r = (r * 2).min(mr);
        }
        match hi {
            None => return layer_from_cache(cache, mr),
            Some(mut h) => {
                while h - lo > 1 {
                    let mid = lo + (h - lo) / 2;
                    if pass(eval_rank(w, cfg, mid, cache)?) {
                        h = mid;
                    } else {
                        lo = mid;
                    }
                }
                h
            }
        }
    };
    // Confirmation: the predecessor must fail the budget; otherwise descend.
    while candidate > 1 && pass(eval_rank(w, cfg, candidate - 1, cache)?) {
        candidate -= 1;
    }
    layer_from_cache(cache, candidate)
}

fn eval_rank(w: &Tensor4, cfg: &DecompConfig, rank: usize, cache: &mut RankCache) -> Result<f32> {
    if let Some((_, _, eps)) = cache.get(&rank) {
        return Ok(*eps);
    }
    let run = decompose_lrs(w, rank, cfg)?;
    let eps = run.2;
    cache.insert(rank, run);
    Ok(eps)
}

fn layer_from_cache(cache: &RankCache, rank: usize) -> Result<DecomposedLayer> {
    let (f, s, eps) = cache.get(&rank).expect("rank evaluated before selection");
    DecomposedLayer::from_parts(f.clone(), s.clone(), *eps)
}

/// Rescale each rank-1 component so all four factor columns carry the same
/// norm (the 4th root of the product of the originals). The represented
/// tensor is unchanged; columns with any zero norm are left untouched.
pub fn equilibrate_factors(f: &CpFactors) -> CpFactors {
    let mut out = f.clone();
    for r in 0..f.rank() {
        let norms = [
            col_norm(&out.a, r),
            col_norm(&out.b, r),
            col_norm(&out.c, r),
            col_norm(&out.d, r),
        ];
        if norms.contains(&0.0) {
            continue;
        }
        let g = (norms[0] * norms[1] * norms[2] * norms[3]).powf(0.25);
        scale_col(&mut out.a, r, g / norms[0]);
        scale_col(&mut out.b, r, g / norms[1]);
        scale_col(&mut out.c, r, g / norms[2]);
        scale_col(&mut out.d, r, g / norms[3]);
    }
    out
}

fn col_norm(m: &Matrix, c: usize) -> f64 {
    let mut s = 0f64;
    for r in 0..m.rows() {
        let v = m.at(r, c) as f64;
        s += v * v;
    }
    s.sqrt()
}

fn scale_col(m: &mut Matrix, c: usize, s: f64) {
    for r in 0..m.rows() {
        let v = m.at(r, c) as f64 * s;
        m.set(r, c, v as f32);
    }
}

/// Deterministic initialization: leading left singular vectors of each mode
/// unfolding (sign fixed so the largest-magnitude entry is positive), with
/// seeded random fill for columns beyond an unfolding's singular-vector
/// supply. Each singular-vector entry gets a small seeded jitter: exactly
/// orthonormal columns drawn independently per mode can land on a stationary
/// configuration of the alternating update, which would freeze every sweep.
fn init_factors(w: &Tensor4, rank: usize, seed: u64) -> Result<CpFactors> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mats: Vec<Matrix> = Vec::with_capacity(4);
    for mode in 1..=4 {
        let unf = to_f64(&unfold(w, mode)?);
        let rows = unf.nrows();
        let svd = unf.svd(true, false);
        let u = svd.u.as_ref().expect("u requested");
        let nsv = svd.singular_values.len();
        let mut order: Vec<usize> = (0..nsv).collect();
        order.sort_by(|&x, &y| {
            svd.singular_values[y]
                .total_cmp(&svd.singular_values[x])
                .then(x.cmp(&y))
        });
        let take = rank.min(nsv);
        let mut m = Matrix::zeros(rows, rank)?;
        for (c, &oi) in order.iter().take(take).enumerate() {
            let col = u.column(oi);
            let mut best = 0;
            let mut best_abs = -1.0f64;
            for (ri, &v) in col.iter().enumerate() {
                if v.abs() > best_abs {
                    best_abs = v.abs();
                    best = ri;
                }
            }
            let flip = if col[best] < 0.0 { -1.0 } else { 1.0 };
            for ri in 0..rows {
                let jitter = 0.01 * rng.random_range(-1.0f64..1.0);
                m.set(ri, c, (col[ri] * flip + jitter) as f32);
            }
        }
        for c in take..rank {
            for ri in 0..rows {
                m.set(ri, c, rng.random_range(-1.0f32..1.0));
            }
        }
        mats.push(m);
    }
    let d = mats.pop().expect("four modes");
    let c = mats.pop().expect("four modes");
    let b = mats.pop().expect("four modes");
    let a = mats.pop().expect("four modes");
    CpFactors::new(a, b, c, d)
}

fn to_f64(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |r, c| m.at(r, c) as f64)
}

fn to_f32(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)] as f32)
        .expect("nalgebra matrix dims are positive")
}

fn gram(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.tr_mul(m)
}

fn khatri_rao_f64(mats: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let r = mats[0].ncols();
    let rows: usize = mats.iter().map(|m| m.nrows()).product();
    let mut out = DMatrix::zeros(rows, r);
    let mut acc: Vec<f64> = Vec::with_capacity(rows);
    let mut next: Vec<f64> = Vec::with_capacity(rows);
    for c in 0..r {
        acc.clear();
        acc.push(1.0);
        for m in mats {
            next.clear();
            for &a in &acc {
                for mr in 0..m.nrows() {
                    next.push(a * m[(mr, c)]);
                }
            }
            std::mem::swap(&mut acc, &mut next);
        }
        for (row, &v) in acc.iter().enumerate() {
            out[(row, c)] = v;
        }
    }
    out
}

/// Pseudo-inverse of a symmetric PSD matrix; singular values below
/// `1e-10 · σ_max` are dropped, so a singular system yields the minimum-norm
/// solution instead of an error.
fn pinv_psd(v: &DMatrix<f64>) -> DMatrix<f64> {
    let n = v.nrows();
    let svd = v.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &b| a.max(b));
    if smax == 0.0 {
        return DMatrix::zeros(n, n);
    }
    let cutoff = 1e-10 * smax;
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let mut ut = u.transpose();
    for (i, &s) in svd.singular_values.iter().enumerate() {
        let inv = if s > cutoff { 1.0 / s } else { 0.0 };
        ut.row_mut(i).scale_mut(inv);
    }
    vt.transpose() * ut
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{frobenius_norm, khatri_rao};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0f32..1.0)).unwrap()
    }

    fn random_factors(
        dims: (usize, usize, usize, usize),
        rank: usize,
        seed: u64,
    ) -> CpFactors {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CpFactors::new(
            random_matrix(dims.0, rank, &mut rng),
            random_matrix(dims.1, rank, &mut rng),
            random_matrix(dims.2, rank, &mut rng),
            random_matrix(dims.3, rank, &mut rng),
        )
        .unwrap()
    }

    fn random_tensor(dims: (usize, usize, usize, usize), seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-1.0f32..1.0)).unwrap()
    }

    fn normalized(mut t: Tensor4) -> Tensor4 {
        let n = frobenius_norm(&t);
        for v in t.data_mut() {
            *v /= n;
        }
        t
    }

    fn rel_residual(w: &Tensor4, f: &CpFactors) -> f64 {
        let low = reconstruct_cp(f);
        let mut ss = 0f64;
        for (a, b) in w.data().iter().zip(low.data()) {
            let d = (*a - *b) as f64;
            ss += d * d;
        }
        ss.sqrt() / sum_sq(w.data()).sqrt()
    }

    #[test]
    fn reconstruct_rank1_ones_is_all_ones() {
        let f = CpFactors::new(
            Matrix::from_fn(2, 1, |_, _| 1.0).unwrap(),
            Matrix::from_fn(3, 1, |_, _| 1.0).unwrap(),
            Matrix::from_fn(2, 1, |_, _| 1.0).unwrap(),
            Matrix::from_fn(2, 1, |_, _| 1.0).unwrap(),
        )
        .unwrap();
        let t = reconstruct_cp(&f);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn reconstruct_ignores_appended_zero_column() {
        let dims = (3, 4, 3, 3);
        let f2 = random_factors(dims, 2, 21);
        let widen = |m: &Matrix| {
            Matrix::from_fn(m.rows(), 3, |r, c| if c < 2 { m.at(r, c) } else { 0.0 }).unwrap()
        };
        let f3 = CpFactors::new(widen(f2.a()), widen(f2.b()), widen(f2.c()), widen(f2.d())).unwrap();
        assert_eq!(reconstruct_cp(&f2).data(), reconstruct_cp(&f3).data());
    }

    #[test]
    fn reconstruct_matches_quadruple_loop_oracle() {
        let dims = (4, 5, 3, 3);
        let f = random_factors(dims, 3, 22);
        let got = reconstruct_cp(&f);
        for i in 0..dims.0 {
            for j in 0..dims.1 {
                for k in 0..dims.2 {
                    for t in 0..dims.3 {
                        let mut want = 0f64;
                        for r in 0..3 {
                            want += f.a().at(i, r) as f64
                                * f.b().at(j, r) as f64
                                * f.c().at(k, r) as f64
                                * f.d().at(t, r) as f64;
                        }
                        let g = got.at(i, j, k, t) as f64;
                        assert!(
                            (g - want).abs() <= 1e-6 * want.abs().max(1e-3),
                            "mismatch at ({i},{j},{k},{t}): {g} vs {want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn reconstruct_scales_linearly_per_column() {
        let dims = (3, 4, 3, 3);
        let f = random_factors(dims, 2, 23);
        let base = reconstruct_cp(&f);
        let scaled_a =
            Matrix::from_fn(dims.0, 2, |r, c| {
                if c == 0 {
                    2.0 * f.a().at(r, c)
                } else {
                    f.a().at(r, c)
                }
            })
            .unwrap();
        let f_scaled =
            CpFactors::new(scaled_a, f.b().clone(), f.c().clone(), f.d().clone()).unwrap();
        let scaled = reconstruct_cp(&f_scaled);
        // The difference is exactly the first rank-1 term.
        let term0 = CpFactors::new(
            Matrix::from_fn(dims.0, 1, |r, _| f.a().at(r, 0)).unwrap(),
            Matrix::from_fn(dims.1, 1, |r, _| f.b().at(r, 0)).unwrap(),
            Matrix::from_fn(dims.2, 1, |r, _| f.c().at(r, 0)).unwrap(),
            Matrix::from_fn(dims.3, 1, |r, _| f.d().at(r, 0)).unwrap(),
        )
        .unwrap();
        let t0 = reconstruct_cp(&term0);
        for ((&s, &b), &t) in scaled.data().iter().zip(base.data()).zip(t0.data()) {
            assert!(((s - b) - t).abs() <= 1e-5);
        }
    }

    #[test]
    fn mode1_unfolding_equals_factor_times_khatri_rao() {
        let dims = (4, 3, 3, 2);
        let f = random_factors(dims, 2, 24);
        let low = reconstruct_cp(&f);
        let unf = unfold(&low, 1).unwrap();
        let kr = khatri_rao(&[f.d(), f.c(), f.b()]).unwrap();
        let mut max_rel = 0f64;
        for i in 0..unf.rows() {
            for col in 0..unf.cols() {
                let mut want = 0f64;
                for r in 0..2 {
                    want += f.a().at(i, r) as f64 * kr.at(col, r) as f64;
                }
                let got = unf.at(i, col) as f64;
                let rel = (got - want).abs() / want.abs().max(1e-3);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel <= 1e-5, "max relative mismatch {max_rel}");
    }

    #[test]
    fn project_zero_cardinality_is_empty() {
        let t = random_tensor((4, 4, 3, 3), 25);
        let s = project_sparse(&t, 0.0).unwrap();
        assert_eq!(s.nnz(), 0);
    }

    #[test]
    fn project_keeps_sparse_input_and_pads_with_lowest_zero_indices() {
        let mut t = Tensor4::zeros((4, 4, 1, 1)).unwrap();
        t.data_mut()[3] = 5.0;
        t.data_mut()[9] = -7.0;
        let s = project_sparse(&t, 0.25).unwrap();
        // 4 slots for 2 nonzeros: both kept, zero ties resolved to indices 0, 1.
        let idx: Vec<u32> = s.entries().iter().map(|e| e.0).collect();
        assert_eq!(idx, vec![0, 1, 3, 9]);
        assert_eq!(s.entries()[2].1, 5.0);
        assert_eq!(s.entries()[3].1, -7.0);
        assert_eq!(s.entries()[0].1, 0.0);
    }

    #[test]
    fn project_matches_full_sort_oracle() {
        for seed in 0..20 {
            let t = random_tensor((4, 4, 3, 3), 100 + seed);
            let s = project_sparse(&t, 0.01).unwrap();
            let mut all: Vec<(u32, f32)> = t
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| (i as u32, v))
                .collect();
            all.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
            let n = (0.01 * t.numel() as f64).round() as usize;
            let mut want: Vec<(u32, f32)> = all[..n].to_vec();
            want.sort_unstable_by_key(|e| e.0);
            assert_eq!(s.entries(), &want[..]);
        }
    }

    #[test]
    fn project_count_follows_round() {
        let t = random_tensor((10, 10, 1, 1), 26);
        assert_eq!(project_sparse(&t, 0.015).unwrap().nnz(), 2);
        assert_eq!(project_sparse(&t, 0.005).unwrap().nnz(), 1);
        assert_eq!(project_sparse(&t, 0.004).unwrap().nnz(), 0);
    }

    #[test]
    fn als_step_keeps_exact_fixed_point() {
        let dims = (4, 5, 3, 3);
        let f = random_factors(dims, 2, 27);
        let target = reconstruct_cp(&f);
        let stepped = cp_als_step(&f, &target).unwrap();
        assert!(rel_residual(&target, &stepped) < 1e-4);
    }

    #[test]
    fn als_converges_on_exact_rank2_target_from_random_init() {
        let dims = (4, 5, 3, 3);
        let target = reconstruct_cp(&random_factors(dims, 2, 28));
        let mut f = random_factors(dims, 2, 29);
        let mut reached = false;
        for _ in 0..200 {
            f = cp_als_step(&f, &target).unwrap();
            if rel_residual(&target, &f) < 1e-4 {
                reached = true;
                break;
            }
        }
        assert!(reached, "final residual {}", rel_residual(&target, &f));
    }

    #[test]
    fn als_residual_is_non_increasing_over_50_sweeps() {
        let target = normalized(random_tensor((4, 4, 3, 3), 30));
        let mut f = random_factors(target.dims(), 3, 31);
        let mut prev = rel_residual(&target, &f);
        for _ in 0..50 {
            f = cp_als_step(&f, &target).unwrap();
            let cur = rel_residual(&target, &f);
            assert!(cur <= prev + 1e-6, "residual rose from {prev} to {cur}");
            prev = cur;
        }
    }

    #[test]
    fn als_step_rejects_mismatched_dims() {
        let f = random_factors((3, 3, 3, 3), 2, 32);
        let t = random_tensor((3, 3, 3, 1), 33);
        assert!(matches!(cp_als_step(&f, &t), Err(Error::Shape(_))));
    }

    #[test]
    fn decompose_fits_exact_rank1_tensor() {
        let w = reconstruct_cp(&random_factors((4, 4, 3, 3), 1, 34));
        let cfg = DecompConfig {
            cardinality: 0.0,
            als_max_iters: 50,
            als_tol: 0.0,
            ..Default::default()
        };
        let (_, s, eps) = decompose_lrs(&w, 1, &cfg).unwrap();
        assert_eq!(s.nnz(), 0);
        assert!(eps < 1e-4, "achieved epsilon {eps}");
    }

    #[test]
    fn decompose_recovers_planted_spikes() {
        let dims = (16, 16, 3, 3);
        let numel = 16 * 16 * 9;
        let mut w = reconstruct_cp(&random_factors(dims, 2, 35));
        let n_spikes = (0.01 * numel as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let mut spots = std::collections::BTreeSet::new();
        while spots.len() < n_spikes {
            spots.insert(rng.random_range(0..numel));
        }
        for &p in &spots {
            let sign = if rng.random_range(0..2) == 0 { -1.0 } else { 1.0 };
            w.data_mut()[p] += sign * 10.0;
        }
        let cfg = DecompConfig {
            cardinality: 0.01,
            als_max_iters: 200,
            als_tol: 1e-9,
            ..Default::default()
        };
        let (_, s, eps) = decompose_lrs(&w, 2, &cfg).unwrap();
        assert!(eps < 1e-3, "achieved epsilon {eps}");
        let recovered = s
            .entries()
            .iter()
            .filter(|(i, _)| spots.contains(&(*i as usize)))
            .count();
        assert!(
            recovered as f64 >= 0.95 * n_spikes as f64,
            "recovered {recovered} of {n_spikes}"
        );
    }

    #[test]
    fn decompose_with_zero_cardinality_equals_manual_als_loop() {
        let w = random_tensor((4, 5, 3, 3), 37);
        let cfg = DecompConfig {
            cardinality: 0.0,
            als_max_iters: 7,
            als_tol: 0.0,
            seed: 5,
            ..Default::default()
        };
        let (f, s, eps) = decompose_lrs(&w, 2, &cfg).unwrap();
        assert_eq!(s.nnz(), 0);
        let mut manual = init_factors(&w, 2, 5).unwrap();
        for _ in 0..7 {
            manual = cp_als_step(&manual, &w).unwrap();
        }
        assert_eq!(f.a().data(), manual.a().data());
        assert_eq!(f.d().data(), manual.d().data());
        let manual_eps = rel_residual(&w, &manual);
        assert!((eps as f64 - manual_eps).abs() < 1e-6);
    }

    #[test]
    fn decompose_zero_tensor_short_circuits() {
        let w = Tensor4::zeros((3, 3, 3, 3)).unwrap();
        let (f, s, eps) = decompose_lrs(&w, 2, &DecompConfig::default()).unwrap();
        assert_eq!(eps, 0.0);
        assert_eq!(s.nnz(), 0);
        assert!(f.a().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decompose_outer_residual_is_non_increasing() {
        let w = normalized(random_tensor((6, 6, 3, 3), 38));
        let mut prev = f32::INFINITY;
        for iters in 1..=8 {
            let cfg = DecompConfig {
                cardinality: 0.01,
                als_max_iters: iters,
                als_tol: 0.0,
                seed: 9,
                ..Default::default()
            };
            let (_, _, eps) = decompose_lrs(&w, 2, &cfg).unwrap();
            assert!(
                eps <= prev + 1e-6,
                "outer residual rose from {prev} to {eps} at iter {iters}"
            );
            prev = eps;
        }
    }

    #[test]
    fn search_finds_planted_rank_exactly() {
        let w = reconstruct_cp(&random_factors((6, 6, 3, 3), 3, 39));
        let cfg = DecompConfig {
            epsilon: 1e-3,
            cardinality: 0.0,
            max_rank: 16,
            als_max_iters: 200,
            als_tol: 1e-8,
            seed: 1,
        };
        let layer = search_min_rank(&w, &cfg).unwrap();
        assert_eq!(layer.rank(), 3);
        assert!((layer.achieved_epsilon() as f64) <= 1e-3);
    }

    #[test]
    fn search_with_loosest_budget_returns_rank1() {
        let w = random_tensor((5, 5, 3, 3), 40);
        let cfg = DecompConfig {
            epsilon: 1.0,
            ..Default::default()
        };
        let layer = search_min_rank(&w, &cfg).unwrap();
        assert_eq!(layer.rank(), 1);
    }

    #[test]
    fn search_rank_is_monotone_in_epsilon() {
        let w = random_tensor((6, 6, 3, 3), 41);
        let mut prev_rank = 0;
        for eps in [0.5, 0.3, 0.1] {
            let cfg = DecompConfig {
                epsilon: eps,
                cardinality: 0.01,
                max_rank: 64,
                als_max_iters: 60,
                als_tol: 1e-7,
                seed: 2,
            };
            let layer = search_min_rank(&w, &cfg).unwrap();
            assert!(
                layer.rank() >= prev_rank,
                "rank shrank from {prev_rank} to {} when tightening to {eps}",
                layer.rank()
            );
            prev_rank = layer.rank();
        }
    }

    #[test]
    fn search_flags_unreachable_budget_via_achieved_epsilon() {
        let w = reconstruct_cp(&random_factors((6, 6, 3, 3), 4, 42));
        let cfg = DecompConfig {
            epsilon: 1e-3,
            cardinality: 0.0,
            max_rank: 2,
            als_max_iters: 100,
            als_tol: 1e-8,
            seed: 3,
        };
        let layer = search_min_rank(&w, &cfg).unwrap();
        assert_eq!(layer.rank(), 2);
        assert!((layer.achieved_epsilon() as f64) > 1e-3);
    }

    #[test]
    fn search_requires_positive_epsilon() {
        let w = random_tensor((3, 3, 1, 1), 43);
        let cfg = DecompConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(matches!(search_min_rank(&w, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn equilibrate_is_idempotent_within_roundoff() {
        let f = equilibrate_factors(&random_factors((4, 4, 3, 3), 3, 44));
        let again = equilibrate_factors(&f);
        for (m1, m2) in [
            (f.a(), again.a()),
            (f.b(), again.b()),
            (f.c(), again.c()),
            (f.d(), again.d()),
        ] {
            for (&x, &y) in m1.data().iter().zip(m2.data()) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-6));
            }
        }
    }

    #[test]
    fn equilibrate_balances_8_1_1_1_to_fourth_root() {
        let f = CpFactors::new(
            Matrix::new(1, 1, vec![8.0]).unwrap(),
            Matrix::new(1, 1, vec![1.0]).unwrap(),
            Matrix::new(1, 1, vec![1.0]).unwrap(),
            Matrix::new(1, 1, vec![1.0]).unwrap(),
        )
        .unwrap();
        let e = equilibrate_factors(&f);
        let want = 8f64.powf(0.25) as f32;
        for m in [e.a(), e.b(), e.c(), e.d()] {
            assert!((m.at(0, 0) - want).abs() < 1e-5);
        }
        let recon = reconstruct_cp(&e);
        assert!((recon.at(0, 0, 0, 0) - 8.0).abs() < 1e-5);
    }

    #[test]
    fn equilibrate_leaves_zero_columns_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let a = random_matrix(3, 2, &mut rng);
        let mut b = random_matrix(4, 2, &mut rng);
        for r in 0..4 {
            b.set(r, 1, 0.0);
        }
        let c = random_matrix(3, 2, &mut rng);
        let d = random_matrix(3, 2, &mut rng);
        let f = CpFactors::new(a, b, c, d).unwrap();
        let e = equilibrate_factors(&f);
        for r in 0..3 {
            assert_eq!(e.a().at(r, 1), f.a().at(r, 1));
            assert_eq!(e.c().at(r, 1), f.c().at(r, 1));
            assert_eq!(e.d().at(r, 1), f.d().at(r, 1));
        }
    }

    #[test]
    fn equilibrate_preserves_reconstruction() {
        let f = random_factors((5, 6, 3, 3), 4, 46);
        let before = reconstruct_cp(&f);
        let after = reconstruct_cp(&equilibrate_factors(&f));
        let mut ss = 0f64;
        for (&x, &y) in before.data().iter().zip(after.data()) {
            ss += ((x - y) as f64).powi(2);
        }
        let rel = ss.sqrt() / sum_sq(before.data()).sqrt();
        assert!(rel < 1e-5, "relative change {rel}");
    }

    #[test]
    fn layer_param_counts_follow_the_formulas() {
        let w = random_tensor((8, 8, 3, 3), 47);
        let cfg = DecompConfig {
            cardinality: 0.01,
            als_max_iters: 10,
            ..Default::default()
        };
        let (f, s, eps) = decompose_lrs(&w, 3, &cfg).unwrap();
        let nnz = s.nnz() as u64;
        let layer = DecomposedLayer::from_parts(f, s, eps).unwrap();
        let pc = layer.param_counts();
        assert_eq!(pc.original, 8 * 8 * 3 * 3);
        assert_eq!(pc.low_rank, 3 * (8 + 8 + 3 + 3));
        assert_eq!(pc.sparse, (3 * nnz).div_ceil(2) + 8);
        assert!(layer.is_compressed());
    }

    #[test]
    fn config_validation_bounds() {
        let ok = DecompConfig {
            epsilon: 1.0,
            ..Default::default()
        };
        assert!(ok.validate().is_ok());
        for bad in [
            DecompConfig {
                epsilon: 1.5,
                ..Default::default()
            },
            DecompConfig {
                epsilon: -0.1,
                ..Default::default()
            },
            DecompConfig {
                cardinality: 1.0,
                ..Default::default()
            },
            DecompConfig {
                max_rank: 0,
                ..Default::default()
            },
            DecompConfig {
                als_max_iters: 0,
                ..Default::default()
            },
            DecompConfig {
                als_tol: f64::NAN,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?} should fail validation");
        }
    }

    #[test]
    fn sparse_tensor_validation() {
        assert!(SparseTensor4::new((2, 2, 1, 1), vec![(0, 1.0), (3, 2.0)]).is_ok());
        assert!(matches!(
            SparseTensor4::new((2, 2, 1, 1), vec![(3, 1.0), (0, 2.0)]),
            Err(Error::Sparse(_))
        ));
        assert!(matches!(
            SparseTensor4::new((2, 2, 1, 1), vec![(1, 1.0), (1, 2.0)]),
            Err(Error::Sparse(_))
        ));
        assert!(matches!(
            SparseTensor4::new((2, 2, 1, 1), vec![(4, 1.0)]),
            Err(Error::Sparse(_))
        ));
    }

    #[test]
    fn factors_must_share_column_count() {
        let a = Matrix::zeros(2, 2).unwrap();
        let b = Matrix::zeros(2, 3).unwrap();
        let c = Matrix::zeros(2, 2).unwrap();
        let d = Matrix::zeros(2, 2).unwrap();
        assert!(matches!(CpFactors::new(a, b, c, d), Err(Error::Shape(_))));
    }
}
