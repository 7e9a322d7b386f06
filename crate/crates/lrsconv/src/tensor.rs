//! Dense 4-way tensors, their matricizations, and the Khatri-Rao product.
//!
//! Layout contract used everywhere in this crate: a `Tensor4` with extents
//! `(I, J, K, T)` stores entry `(i, j, k, t)` at linear offset
//! `((i*J + j)*K + k)*T + t` (row-major, last index fastest). Matricization
//! and the Khatri-Rao product follow the matching convention: mode-n rows are
//! mode-n fibers, and the remaining modes enumerate columns with the lowest
//! remaining mode varying fastest.

use crate::error::{shape_err, Error, Result};

/// Dense rank-4 tensor over `f32`, extents `(I, J, K, T)`, all extents >= 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: (usize, usize, usize, usize),
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn new(dims: (usize, usize, usize, usize), data: Vec<f32>) -> Result<Self> {
        let n = checked_numel(dims)?;
        if data.len() != n {
            return shape_err(format!(
                "tensor data length {} does not match dims {:?} (numel {})",
                data.len(),
                dims,
                n
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: (usize, usize, usize, usize)) -> Result<Self> {
        let n = checked_numel(dims)?;
        Ok(Self {
            dims,
            data: vec![0.0; n],
        })
    }

    pub fn from_fn(
        dims: (usize, usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut t = Self::zeros(dims)?;
        let (di, dj, dk, dt) = dims;
        let mut idx = 0;
        for i in 0..di {
            for j in 0..dj {
                for k in 0..dk {
                    for l in 0..dt {
                        t.data[idx] = f(i, j, k, l);
                        idx += 1;
                    }
                }
            }
        }
        Ok(t)
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.dims
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Linear offset of `(i, j, k, t)`; callers must stay in range.
    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize, t: usize) -> usize {
        let (_, dj, dk, dt) = self.dims;
        ((i * dj + j) * dk + k) * dt + t
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize, t: usize) -> f32 {
        self.data[self.offset(i, j, k, t)]
    }

    /// Coordinates of a linear offset, inverse of [`Tensor4::offset`].
    #[inline]
    pub fn coords(&self, mut idx: usize) -> (usize, usize, usize, usize) {
        let (_, dj, dk, dt) = self.dims;
        let t = idx % dt;
        idx /= dt;
        let k = idx % dk;
        idx /= dk;
        let j = idx % dj;
        let i = idx / dj;
        (i, j, k, t)
    }
}

fn checked_numel(dims: (usize, usize, usize, usize)) -> Result<usize> {
    let (i, j, k, t) = dims;
    if i == 0 || j == 0 || k == 0 || t == 0 {
        return shape_err(format!("tensor extents must all be >= 1, got {dims:?}"));
    }
    i.checked_mul(j)
        .and_then(|n| n.checked_mul(k))
        .and_then(|n| n.checked_mul(t))
        .ok_or_else(|| Error::Shape(format!("tensor extents {dims:?} overflow usize")))
}

/// Dense row-major matrix over `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return shape_err(format!("matrix dims must be >= 1, got {rows}x{cols}"));
        }
        if data.len() != rows * cols {
            return shape_err(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows.checked_mul(cols).ok_or_else(|| {
            Error::Shape(format!("matrix dims {rows}x{cols} overflow usize"))
        })?])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut m = Self::zeros(rows, cols)?;
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        Ok(m)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Frobenius norm, accumulated in `f64` so large tensors keep full `f32`
/// significance.
pub fn frobenius_norm(t: &Tensor4) -> f32 {
    sum_sq(t.data()).sqrt() as f32
}

pub(crate) fn sum_sq(data: &[f32]) -> f64 {
    data.iter().map(|&v| (v as f64) * (v as f64)).sum()
}

/// Mode-n matricization, `mode` in `1..=4`. Row `r` of the result is the
/// mode-n fiber at index `r`; columns run over the remaining modes with the
/// lowest remaining mode fastest.
pub fn unfold(t: &Tensor4, mode: usize) -> Result<Matrix> {
    let (di, dj, dk, dt) = t.dims();
    let (rows, cols) = mode_shape(t.dims(), mode)?;
    let mut m = Matrix::zeros(rows, cols)?;
    let mut idx = 0;
    for i in 0..di {
        for j in 0..dj {
            for k in 0..dk {
                for l in 0..dt {
                    let v = t.data()[idx];
                    idx += 1;
                    let (r, c) = mode_position((i, j, k, l), (di, dj, dk, dt), mode);
                    m.set(r, c, v);
                }
            }
        }
    }
    Ok(m)
}

/// Inverse of [`unfold`]: reassemble a tensor of extents `dims` from its
/// mode-n matricization.
pub fn fold(m: &Matrix, mode: usize, dims: (usize, usize, usize, usize)) -> Result<Tensor4> {
    let (rows, cols) = mode_shape(dims, mode)?;
    if m.rows() != rows || m.cols() != cols {
        return shape_err(format!(
            "mode-{mode} matrix of dims {dims:?} must be {rows}x{cols}, got {}x{}",
            m.rows(),
            m.cols()
        ));
    }
    let (di, dj, dk, dt) = dims;
    let mut t = Tensor4::zeros(dims)?;
    let mut idx = 0;
    for i in 0..di {
        for j in 0..dj {
            for k in 0..dk {
                for l in 0..dt {
                    let (r, c) = mode_position((i, j, k, l), dims, mode);
                    t.data_mut()[idx] = m.at(r, c);
                    idx += 1;
                }
            }
        }
    }
    Ok(t)
}

fn mode_shape(dims: (usize, usize, usize, usize), mode: usize) -> Result<(usize, usize)> {
    let (di, dj, dk, dt) = dims;
    let numel = checked_numel(dims)?;
    let rows = match mode {
        1 => di,
        2 => dj,
        3 => dk,
        4 => dt,
        _ => return shape_err(format!("mode must be in 1..=4, got {mode}")),
    };
    Ok((rows, numel / rows))
}

#[inline]
fn mode_position(
    coords: (usize, usize, usize, usize),
    dims: (usize, usize, usize, usize),
    mode: usize,
) -> (usize, usize) {
    let (i, j, k, t) = coords;
    let (di, dj, dk, _) = dims;
    match mode {
        1 => (i, (t * dk + k) * dj + j),
        2 => (j, i + di * (k + dk * t)),
        3 => (k, i + di * (j + dj * t)),
        4 => (t, i + di * (j + dj * k)),
        _ => unreachable!("mode validated by mode_shape"),
    }
}

/// Column-wise Khatri-Rao product. All inputs must share a column count `R`;
/// column `r` of the result is the Kronecker product of the inputs' `r`-th
/// columns with the first input varying slowest. A single input is returned
/// unchanged.
pub fn khatri_rao(mats: &[&Matrix]) -> Result<Matrix> {
    let first = match mats.first() {
        Some(m) => m,
        None => return shape_err("khatri_rao needs at least one input"),
    };
    let r = first.cols();
    let mut rows = 1usize;
    for m in mats {
        if m.cols() != r {
            return shape_err(format!(
                "khatri_rao inputs must share a column count, got {} and {r}",
                m.cols()
            ));
        }
        rows = rows
            .checked_mul(m.rows())
            .ok_or_else(|| Error::Shape("khatri_rao row count overflows usize".into()))?;
    }
    if mats.len() == 1 {
        return Ok((*first).clone());
    }
    let mut out = Matrix::zeros(rows, r)?;
    let mut acc: Vec<f32> = Vec::with_capacity(rows);
    let mut next: Vec<f32> = Vec::with_capacity(rows);
    for c in 0..r {
        acc.clear();
        acc.push(1.0);
        for m in mats {
            next.clear();
            for &a in &acc {
                for mr in 0..m.rows() {
                    next.push(a * m.at(mr, c));
                }
            }
            std::mem::swap(&mut acc, &mut next);
        }
        for (row, &v) in acc.iter().enumerate() {
            out.set(row, c, v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(dims: (usize, usize, usize, usize), seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-1.0f32..1.0)).unwrap()
    }

    #[test]
    fn frobenius_zero_tensor_is_zero() {
        let t = Tensor4::zeros((2, 2, 1, 1)).unwrap();
        assert_eq!(frobenius_norm(&t), 0.0);
    }

    #[test]
    fn frobenius_single_entry_is_its_magnitude() {
        let mut t = Tensor4::zeros((1, 1, 1, 1)).unwrap();
        t.data_mut()[0] = 3.0;
        assert_eq!(frobenius_norm(&t), 3.0);
        t.data_mut()[0] = -3.0;
        assert_eq!(frobenius_norm(&t), 3.0);
    }

    #[test]
    fn frobenius_matches_sum_of_squares_oracle() {
        let t = random_tensor((4, 4, 3, 3), 11);
        let oracle: f64 = t.data().iter().map(|&v| (v as f64).powi(2)).sum();
        let oracle = oracle.sqrt();
        let got = frobenius_norm(&t) as f64;
        assert!((got - oracle).abs() <= 1e-6 * oracle.max(1.0));
    }

    #[test]
    fn frobenius_is_unfold_invariant() {
        let t = random_tensor((3, 4, 3, 3), 12);
        let base = frobenius_norm(&t) as f64;
        for mode in 1..=4 {
            let m = unfold(&t, mode).unwrap();
            let n = sum_sq(m.data()).sqrt();
            assert!((n - base).abs() <= 1e-6 * base);
        }
    }

    #[test]
    fn unfold_singleton_is_one_by_one() {
        let t = Tensor4::new((1, 1, 1, 1), vec![5.0]).unwrap();
        for mode in 1..=4 {
            let m = unfold(&t, mode).unwrap();
            assert_eq!((m.rows(), m.cols()), (1, 1));
            assert_eq!(m.at(0, 0), 5.0);
        }
    }

    #[test]
    fn unfold_mode1_of_flat_tensor_enumerated() {
        // (2,3,1,1): entry (i,j) stored at 3i+j; mode-1 columns run over j.
        let t = Tensor4::from_fn((2, 3, 1, 1), |i, j, _, _| (i * 3 + j) as f32).unwrap();
        let m = unfold(&t, 1).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 3));
        assert_eq!(m.row(0), &[0.0, 1.0, 2.0]);
        assert_eq!(m.row(1), &[3.0, 4.0, 5.0]);
        // Mode 2 of the same tensor is its transpose: columns run over i.
        let m2 = unfold(&t, 2).unwrap();
        assert_eq!((m2.rows(), m2.cols()), (3, 2));
        assert_eq!(m2.row(0), &[0.0, 3.0]);
        assert_eq!(m2.row(2), &[2.0, 5.0]);
    }

    #[test]
    fn unfold_mode3_columns_lowest_mode_fastest() {
        // Entry value = linear offset, so positions are directly readable.
        let t = Tensor4::from_fn((2, 2, 2, 1), |i, j, k, _| ((i * 2 + j) * 2 + k) as f32).unwrap();
        let m = unfold(&t, 3).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 4));
        // Columns enumerate (i, j) with i fastest: (0,0), (1,0), (0,1), (1,1).
        assert_eq!(m.row(0), &[0.0, 4.0, 2.0, 6.0]);
        assert_eq!(m.row(1), &[1.0, 5.0, 3.0, 7.0]);
    }

    #[test]
    fn fold_inverts_unfold_bit_exactly() {
        let t = random_tensor((3, 4, 3, 3), 13);
        for mode in 1..=4 {
            let m = unfold(&t, mode).unwrap();
            let back = fold(&m, mode, t.dims()).unwrap();
            assert_eq!(back.data(), t.data());
        }
    }

    #[test]
    fn unfold_rejects_bad_mode() {
        let t = Tensor4::zeros((2, 2, 2, 2)).unwrap();
        assert!(matches!(unfold(&t, 0), Err(Error::Shape(_))));
        assert!(matches!(unfold(&t, 5), Err(Error::Shape(_))));
    }

    #[test]
    fn khatri_rao_single_input_is_identity() {
        let m = Matrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = khatri_rao(&[&m]).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn khatri_rao_of_column_vectors_is_kronecker() {
        let a = Matrix::new(2, 1, vec![1.0, 2.0]).unwrap();
        let b = Matrix::new(2, 1, vec![3.0, 4.0]).unwrap();
        let out = khatri_rao(&[&a, &b]).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn khatri_rao_two_columns_first_input_slowest() {
        let a = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::new(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let out = khatri_rao(&[&a, &b]).unwrap();
        assert_eq!((out.rows(), out.cols()), (4, 2));
        assert_eq!(out.row(0), &[5.0, 12.0]);
        assert_eq!(out.row(1), &[7.0, 16.0]);
        assert_eq!(out.row(2), &[15.0, 24.0]);
        assert_eq!(out.row(3), &[21.0, 32.0]);
    }

    #[test]
    fn khatri_rao_rejects_mismatched_columns_and_empty_input() {
        let a = Matrix::zeros(2, 2).unwrap();
        let b = Matrix::zeros(2, 3).unwrap();
        assert!(matches!(khatri_rao(&[&a, &b]), Err(Error::Shape(_))));
        assert!(matches!(khatri_rao(&[]), Err(Error::Shape(_))));
    }

    #[test]
    fn construction_rejects_zero_extents_and_bad_lengths() {
        assert!(matches!(Tensor4::zeros((0, 1, 1, 1)), Err(Error::Shape(_))));
        assert!(matches!(
            Tensor4::new((2, 2, 1, 1), vec![0.0; 3]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(Matrix::new(2, 2, vec![0.0; 5]), Err(Error::Shape(_))));
    }
}
