//! Three interchangeable convolution paths over `(C, H, W)` feature maps:
//! dense direct (the reference), CP-factorized four-stage, and packed-index
//! sparse scatter-add. Stride is fixed at 1 with zero "same" padding and
//! centered odd kernels, so output spatial size always equals input.

use crate::decomp::{CpFactors, DecomposedLayer, SparseTensor4};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor4;

/// Activation tensor: `(channels, height, width)`, row-major, last index
/// fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    dims: (usize, usize, usize),
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(dims: (usize, usize, usize), data: Vec<f32>) -> Result<Self> {
        let (c, h, w) = dims;
        if c == 0 || h == 0 || w == 0 {
            return shape_err(format!("feature map extents must be >= 1, got {dims:?}"));
        }
        let n = c
            .checked_mul(h)
            .and_then(|n| n.checked_mul(w))
            .ok_or_else(|| Error::Shape(format!("feature map dims {dims:?} overflow usize")))?;
        if data.len() != n {
            return shape_err(format!(
                "feature map data length {} does not match dims {dims:?}",
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Result<Self> {
        let (c, h, w) = dims;
        Self::new(dims, vec![0.0; c.checked_mul(h).and_then(|n| n.checked_mul(w)).unwrap_or(0)])
    }

    pub fn from_fn(
        dims: (usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut m = Self::zeros(dims)?;
        let (c, h, w) = dims;
        let mut idx = 0;
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    m.data[idx] = f(ci, hi, wi);
                    idx += 1;
                }
            }
        }
        Ok(m)
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, c: usize, h: usize, w: usize) -> f32 {
        self.data[(c * self.dims.1 + h) * self.dims.2 + w]
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f32] {
        let plane = self.dims.1 * self.dims.2;
        &self.data[c * plane..(c + 1) * plane]
    }

    #[inline]
    fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let plane = self.dims.1 * self.dims.2;
        &mut self.data[c * plane..(c + 1) * plane]
    }
}

/// Shape contract for one convolution: channel counts and an odd, centered
/// kernel. Stride 1 and zero "same" padding are fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    in_channels: usize,
    out_channels: usize,
    kernel: (usize, usize),
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return shape_err("channel counts must be >= 1".to_string());
        }
        let (kx, ky) = kernel;
        if kx == 0 || ky == 0 || kx % 2 == 0 || ky % 2 == 0 {
            return shape_err(format!("kernel extents must be odd and >= 1, got {kernel:?}"));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
        })
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    #[inline]
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    #[inline]
    pub fn kernel(&self) -> (usize, usize) {
        self.kernel
    }

    /// Weight tensor extents implied by this spec: `(I, J, Kx, Ky)`.
    #[inline]
    pub fn weight_dims(&self) -> (usize, usize, usize, usize) {
        (
            self.in_channels,
            self.out_channels,
            self.kernel.0,
            self.kernel.1,
        )
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if x.dims().0 != self.in_channels {
            return shape_err(format!(
                "input has {} channels, spec expects {}",
                x.dims().0,
                self.in_channels
            ));
        }
        Ok(())
    }

    fn check_weight_dims(&self, dims: (usize, usize, usize, usize)) -> Result<()> {
        if dims != self.weight_dims() {
            return shape_err(format!(
                "weight dims {dims:?} do not match spec dims {:?}",
                self.weight_dims()
            ));
        }
        Ok(())
    }
}

/// Valid source-index window `[start, end)` such that `src + disp` stays in
/// `[0, len)`. Empty windows come back as `(0, 0)`.
#[inline]
fn window(len: usize, disp: isize) -> (usize, usize) {
    let start = (-disp).max(0) as usize;
    let end = (len as isize - disp).clamp(0, len as isize) as usize;
    if start >= end {
        (0, 0)
    } else {
        (start, end)
    }
}

/// Direct dense convolution, the reference for every other path:
/// `Y[j,h,w] = Σ_{i,kx,ky} X[i, h+kx-Kx/2, w+ky-Ky/2] · W[i,j,kx,ky]`
/// with out-of-range reads treated as zero. Each output element accumulates
/// its terms in `(i, kx, ky)` order.
pub fn conv_dense(x: &FeatureMap, w: &Tensor4, spec: &ConvSpec) -> Result<FeatureMap> {
    spec.check_input(x)?;
    spec.check_weight_dims(w.dims())?;
    let (ci, h, wd) = x.dims();
    let (_, co, kx, ky) = w.dims();
    let (cx, cy) = (kx / 2, ky / 2);
    let mut out = FeatureMap::zeros((co, h, wd))?;
    for j in 0..co {
        let oplane = out.plane_mut(j);
        for i in 0..ci {
            let xplane = x.plane(i);
            for dx in 0..kx {
                let dh = dx as isize - cx as isize;
                let (h0, h1) = window(h, dh);
                for dy in 0..ky {
                    let wv = w.at(i, j, dx, dy);
                    let dw = dy as isize - cy as isize;
                    let (w0, w1) = window(wd, dw);
                    if w0 == w1 {
                        continue;
                    }
                    for hh in h0..h1 {
                        let src_row = ((hh as isize + dh) as usize) * wd;
                        let dst_row = hh * wd;
                        let src = &xplane
                            [(src_row as isize + w0 as isize + dw) as usize
                                ..(src_row as isize + w1 as isize + dw) as usize];
                        let dst = &mut oplane[dst_row + w0..dst_row + w1];
                        for (o, &s) in dst.iter_mut().zip(src) {
                            *o += wv * s;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// CP-factorized convolution as four stages: a 1×1 mixing `I -> r` (factor
/// `a`), a depthwise `Kx`×1 pass along height (factor `c`), a depthwise
/// 1×`Ky` pass along width (factor `d`), and a closing 1×1 `r -> J`
/// (factor `b`). Equal to `conv_dense` on the reconstructed kernel up to
/// accumulation-order round-off.
pub fn conv_cp(x: &FeatureMap, f: &CpFactors, spec: &ConvSpec) -> Result<FeatureMap> {
    spec.check_input(x)?;
    spec.check_weight_dims(f.dims())?;
    let (ci, h, wd) = x.dims();
    let (kx, ky) = spec.kernel();
    let (cx, cy) = (kx / 2, ky / 2);
    let r = f.rank();
    let co = spec.out_channels();

    let mut mixed = FeatureMap::zeros((r, h, wd))?;
    for rr in 0..r {
        let plane = mixed.plane_mut(rr);
        for i in 0..ci {
            let av = f.a().at(i, rr);
            for (o, &s) in plane.iter_mut().zip(x.plane(i)) {
                *o += av * s;
            }
        }
    }

    let mut tall = FeatureMap::zeros((r, h, wd))?;
    for rr in 0..r {
        let src = mixed.plane(rr);
        let dst = tall.plane_mut(rr);
        for dx in 0..kx {
            let cv = f.c().at(dx, rr);
            let dh = dx as isize - cx as isize;
            let (h0, h1) = window(h, dh);
            for hh in h0..h1 {
                let srow = ((hh as isize + dh) as usize) * wd;
                let drow = hh * wd;
                for (o, &s) in dst[drow..drow + wd].iter_mut().zip(&src[srow..srow + wd]) {
                    *o += cv * s;
                }
            }
        }
    }

    let mut wide = FeatureMap::zeros((r, h, wd))?;
    for rr in 0..r {
        let src = tall.plane(rr);
        let dst = wide.plane_mut(rr);
        for dy in 0..ky {
            let dv = f.d().at(dy, rr);
            let dw = dy as isize - cy as isize;
            let (w0, w1) = window(wd, dw);
            if w0 == w1 {
                continue;
            }
            for hh in 0..h {
                let row = hh * wd;
                let s0 = (row as isize + w0 as isize + dw) as usize;
                let s1 = (row as isize + w1 as isize + dw) as usize;
                for (o, &s) in dst[row + w0..row + w1].iter_mut().zip(&src[s0..s1]) {
                    *o += dv * s;
                }
            }
        }
    }

    let mut out = FeatureMap::zeros((co, h, wd))?;
    for j in 0..co {
        let oplane = out.plane_mut(j);
        for rr in 0..r {
            let bv = f.b().at(j, rr);
            for (o, &s) in oplane.iter_mut().zip(wide.plane(rr)) {
                *o += bv * s;
            }
        }
    }
    Ok(out)
}

/// Per-entry index arrays of a packed sparse kernel. `U16` is chosen whenever
/// `J·Kx·Ky <= 65535`, matching the compact storage costing.
#[derive(Debug, Clone, PartialEq)]
pub enum PackedIndices {
    U16(Vec<Vec<u16>>),
    U32(Vec<Vec<u32>>),
}

/// Sparse kernel grouped by input channel: slice `i` holds parallel arrays of
/// values and packed indices, `packed = j·(Kx·Ky) + kx·Ky + ky`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseKernel {
    dims: (usize, usize, usize, usize),
    values: Vec<Vec<f32>>,
    indices: PackedIndices,
}

impl SparseKernel {
    #[inline]
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.dims
    }

    #[inline]
    pub fn values(&self) -> &[Vec<f32>] {
        &self.values
    }

    #[inline]
    pub fn indices(&self) -> &PackedIndices {
        &self.indices
    }

    pub fn is_u16(&self) -> bool {
        matches!(self.indices, PackedIndices::U16(_))
    }

    pub fn nnz(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    /// Exact inverse of [`pack_sparse_kernel`].
    pub fn unpack(&self) -> SparseTensor4 {
        let (_, dj, dk, dt) = self.dims;
        let cell = (dk * dt) as u32;
        let mut entries: Vec<(u32, f32)> = Vec::with_capacity(self.nnz());
        let mut push = |i: usize, packed: u32, v: f32| {
            let j = packed / cell;
            let rem = packed % cell;
            let kx = rem / dt as u32;
            let ky = rem % dt as u32;
            let linear = ((i as u32 * dj as u32 + j) * dk as u32 + kx) * dt as u32 + ky;
            entries.push((linear, v));
        };
        match &self.indices {
            PackedIndices::U16(slices) => {
                for (i, (vals, idxs)) in self.values.iter().zip(slices).enumerate() {
                    for (&v, &p) in vals.iter().zip(idxs) {
                        push(i, p as u32, v);
                    }
                }
            }
            PackedIndices::U32(slices) => {
                for (i, (vals, idxs)) in self.values.iter().zip(slices).enumerate() {
                    for (&v, &p) in vals.iter().zip(idxs) {
                        push(i, p, v);
                    }
                }
            }
        }
        SparseTensor4::new(self.dims, entries).expect("packed entries decode in sorted order")
    }
}

/// Group sparse entries by input channel and encode each as
/// `(value, j·Kx·Ky + kx·Ky + ky)`. `u16` indices are used unless
/// `J·Kx·Ky > 65535`.
pub fn pack_sparse_kernel(s: &SparseTensor4) -> SparseKernel {
    let dims = s.dims();
    let (di, dj, dk, dt) = dims;
    let cell = dj * dk * dt;
    let use_u16 = cell <= u16::MAX as usize;
    let mut values: Vec<Vec<f32>> = vec![Vec::new(); di];
    let mut u16s: Vec<Vec<u16>> = vec![Vec::new(); di];
    let mut u32s: Vec<Vec<u32>> = vec![Vec::new(); di];
    for &(idx, v) in s.entries() {
        let idx = idx as usize;
        let i = idx / cell;
        let packed = (idx % cell) as u32;
        values[i].push(v);
        if use_u16 {
            u16s[i].push(packed as u16);
        } else {
            u32s[i].push(packed);
        }
    }
    SparseKernel {
        dims,
        values,
        indices: if use_u16 {
            PackedIndices::U16(u16s)
        } else {
            PackedIndices::U32(u32s)
        },
    }
}

/// Sparse convolution by scatter-add: for each input channel and each packed
/// entry, the whole input plane (read contiguously row by row) is scaled and
/// added into output channel `j` at spatial displacement
/// `(-(kx - Kx/2), -(ky - Ky/2))`; the displaced write window is clipped at
/// the borders instead of branching per pixel.
pub fn conv_sparse(x: &FeatureMap, k: &SparseKernel, spec: &ConvSpec) -> Result<FeatureMap> {
    spec.check_input(x)?;
    spec.check_weight_dims(k.dims())?;
    let (ci, h, wd) = x.dims();
    let (kx, ky) = spec.kernel();
    let mut out = FeatureMap::zeros((spec.out_channels(), h, wd))?;
    for i in 0..ci {
        let xplane = x.plane(i);
        match &k.indices {
            PackedIndices::U16(slices) => {
                scatter_slice(&mut out, xplane, &k.values[i], &slices[i], kx, ky);
            }
            PackedIndices::U32(slices) => {
                scatter_slice(&mut out, xplane, &k.values[i], &slices[i], kx, ky);
            }
        }
    }
    Ok(out)
}

fn scatter_slice<I: Copy + Into<u32>>(
    out: &mut FeatureMap,
    xplane: &[f32],
    values: &[f32],
    packed: &[I],
    kx: usize,
    ky: usize,
) {
    let (_, h, wd) = out.dims();
    let (cx, cy) = (kx / 2, ky / 2);
    let cell = (kx * ky) as u32;
    for (&v, &p) in values.iter().zip(packed) {
        let p: u32 = p.into();
        let j = (p / cell) as usize;
        let rem = p % cell;
        let dx = (rem / ky as u32) as usize;
        let dy = (rem % ky as u32) as usize;
        let dh = cx as isize - dx as isize;
        let dw = cy as isize - dy as isize;
        let (h0, h1) = window(h, dh);
        let (w0, w1) = window(wd, dw);
        if w0 == w1 {
            continue;
        }
        let oplane = out.plane_mut(j);
        for hi in h0..h1 {
            let drow = ((hi as isize + dh) as usize) * wd;
            let srow = hi * wd;
            let dst = &mut oplane
                [(drow as isize + w0 as isize + dw) as usize
                    ..(drow as isize + w1 as isize + dw) as usize];
            let src = &xplane[srow + w0..srow + w1];
            for (o, &s) in dst.iter_mut().zip(src) {
                *o += v * s;
            }
        }
    }
}

/// Sum of the CP path on the low-rank term and the scatter path on the sparse
/// term; equals the dense path on `reconstruct + densify` up to round-off.
pub fn conv_decomposed(
    x: &FeatureMap,
    layer: &DecomposedLayer,
    spec: &ConvSpec,
) -> Result<FeatureMap> {
    let mut out = conv_cp(x, layer.low_rank(), spec)?;
    let packed = pack_sparse_kernel(layer.sparse());
    let sparse_out = conv_sparse(x, &packed, spec)?;
    for (o, &s) in out.data.iter_mut().zip(sparse_out.data()) {
        *o += s;
    }
    Ok(out)
}

/// `‖a - b‖_F / ‖b‖_F` with `b` as the reference; returns the absolute diff
/// norm when the reference is exactly zero.
pub fn relative_error(a: &FeatureMap, b: &FeatureMap) -> Result<f32> {
    if a.dims() != b.dims() {
        return shape_err(format!(
            "feature map dims {:?} vs {:?} cannot be compared",
            a.dims(),
            b.dims()
        ));
    }
    let mut diff = 0f64;
    let mut base = 0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        diff += ((x - y) as f64).powi(2);
        base += (y as f64).powi(2);
    }
    let diff = diff.sqrt();
    let base = base.sqrt();
    Ok(if base == 0.0 {
        diff as f32
    } else {
        (diff / base) as f32
    })
}
