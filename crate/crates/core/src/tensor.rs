//! Dense strided tensors, row-major matrices, and the linear-algebra
//! primitives the convolution and rank-analysis code is built on.
//!
//! Feature volumes are 4-axis tensors laid out as `[C, B, H, W]`
//! (channel, spectral band, vertical, horizontal). Kernel weights are
//! 5-axis tensors `[M, C, kb, kh, kw]`.

use std::borrow::Cow;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, NumCast};

use crate::error::{Error, Result};

/// Maximum number of axes a [`Tensor`] may carry.
pub const MAX_AXES: usize = 5;

/// Floating-point element type usable by every kernel in the crate.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + AddAssign + MulAssign + Sum + 'static
{
    /// `c = alpha * a * b + beta * c` for strided row/column views.
    ///
    /// # Safety
    /// Every index reachable from the dimensions and strides must be in
    /// bounds of the corresponding pointer's allocation.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 converts to every Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("every Scalar converts to f64")
    }
}

impl Scalar for f32 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Borrowed strided matrix view.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c = alpha * a * b + beta * c` with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(c.len(), a.rows * b.cols);
    gemm_ld(alpha, a, b, beta, c, b.cols);
}

/// As [`gemm`], but row `i` of `c` starts at `c[i * ldc]`.
pub(crate) fn gemm_ld<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T], ldc: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    assert!(a.span() <= a.data.len() && b.span() <= b.data.len());
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    assert!(ldc >= b.cols && c.len() >= (a.rows - 1) * ldc + b.cols, "gemm output span");
    if a.cols == 0 {
        for row in 0..a.rows {
            for v in &mut c[row * ldc..][..b.cols] {
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: spans were checked against the slice lengths above.
    unsafe {
        T::raw_gemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Dense tensor with explicit strides over an owned buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    strides: Vec<usize>,
    data: Vec<T>,
}

/// `[C, B, H, W]` activation volume.
pub type FeatureVolume<T> = Tensor<T>;

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_AXES {
            return Err(Error::shape(
                "Tensor::new",
                format!("{} axes (1..={MAX_AXES} supported)", shape.len()),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            strides: contiguous_strides(shape),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![T::zero(); numel]).expect("zeros shape")
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("full shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, (0..numel).map(&mut f).collect()).expect("from_fn shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_contiguous(&self) -> bool {
        self.strides == contiguous_strides(&self.shape)
    }

    /// Underlying buffer in storage order. Equals logical order only when
    /// [`Tensor::is_contiguous`] holds.
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        if self.is_contiguous() {
            self.data
        } else {
            self.contiguous().data
        }
    }

    fn offset(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut off = 0;
        for ((&i, &n), &s) in index.iter().zip(&self.shape).zip(&self.strides) {
            if i >= n {
                return None;
            }
            off += i * s;
        }
        Some(off)
    }

    pub fn get(&self, index: &[usize]) -> Option<T> {
        self.offset(index).map(|o| self.data[o])
    }

    pub fn set(&mut self, index: &[usize], value: T) -> Result<()> {
        let off = self.offset(index).ok_or_else(|| {
            Error::shape("Tensor::set", format!("index {index:?} outside {:?}", self.shape))
        })?;
        self.data[off] = value;
        Ok(())
    }

    /// Reorders axes without moving data.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.ndim()];
        if axes.len() != self.ndim() || axes.iter().any(|&a| a >= self.ndim() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("Tensor::permute", format!("{axes:?} is not a permutation of {} axes", self.ndim())));
        }
        Ok(Tensor {
            shape: axes.iter().map(|&a| self.shape[a]).collect(),
            strides: axes.iter().map(|&a| self.strides[a]).collect(),
            data: self.data.clone(),
        })
    }

    /// Borrows when already row-major, otherwise copies like [`Tensor::contiguous`].
    pub fn as_contiguous(&self) -> Cow<'_, Self> {
        if self.is_contiguous() {
            Cow::Borrowed(self)
        } else {
            Cow::Owned(self.contiguous())
        }
    }

    /// Copy into row-major storage matching the logical element order.
    pub fn contiguous(&self) -> Self {
        if self.is_contiguous() {
            return self.clone();
        }
        let numel = self.numel();
        let mut out = Vec::with_capacity(numel);
        let mut index = vec![0usize; self.ndim()];
        for _ in 0..numel {
            let off: usize = index.iter().zip(&self.strides).map(|(i, s)| i * s).sum();
            out.push(self.data[off]);
            for ax in (0..index.len()).rev() {
                index[ax] += 1;
                if index[ax] < self.shape[ax] {
                    break;
                }
                index[ax] = 0;
            }
        }
        Tensor::new(&self.shape, out).expect("same numel")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(
                "Tensor::reshape",
                format!("{:?} -> {shape:?} changes element count", self.shape),
            ));
        }
        Tensor::new(shape, self.contiguous().data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let src = self.as_contiguous();
        Tensor { shape: self.shape.clone(), strides: contiguous_strides(&self.shape), data: src.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "Tensor::zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let a = self.as_contiguous();
        let b = other.as_contiguous();
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(&self.shape, data)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self += alpha * other`, in place.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "Tensor::axpy",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        if !self.is_contiguous() {
            *self = self.contiguous();
        }
        let o = other.as_contiguous();
        for (d, &s) in self.data.iter_mut().zip(&o.data) {
            *d += alpha * s;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.as_f64().abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let c = self.contiguous();
        Tensor {
            shape: c.shape,
            strides: c.strides,
            data: c.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols} needs {} elements, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows"));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub(crate) fn view(&self) -> MatRef<'_, T> {
        MatRef::row_major(&self.data, self.rows, self.cols)
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Number of entries with a nonzero value.
    pub fn nnz(&self) -> usize {
        self.data.iter().filter(|v| !v.is_zero()).count()
    }

    /// Column indices holding at least one nonzero entry.
    pub fn nonzero_columns(&self) -> Vec<usize> {
        (0..self.cols)
            .filter(|&j| (0..self.rows).any(|i| !self.get(i, j).is_zero()))
            .collect()
    }
}

pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm(T::one(), a.view(), b.view(), T::zero(), &mut out.data);
    Ok(out)
}

/// Output extent of a stride-1 convolution along one axis.
pub fn conv_output_len(input: usize, kernel: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(kernel).map(|d| d + 1)
}

pub(crate) fn volume_dims<T: Scalar>(op: &'static str, v: &Tensor<T>) -> Result<[usize; 4]> {
    match *v.shape() {
        [c, b, h, w] => Ok([c, b, h, w]),
        ref s => Err(Error::shape(op, format!("expected [C, B, H, W] volume, got {s:?}"))),
    }
}

/// Unfolds a `[C, B, H, W]` volume into a `(C*kb*kh*kw) x (B'*H'*W')`
/// matrix. Column `j` holds the zero-padded receptive field of output
/// position `j`, rows ordered `(c, kb, kh, kw)` lexicographically.
pub fn unfold_input<T: Scalar>(
    input: &FeatureVolume<T>,
    kernel: [usize; 3],
    padding: [usize; 3],
) -> Result<Matrix<T>> {
    let [c_in, b, h, w] = volume_dims("unfold_input", input)?;
    let dims = [b, h, w];
    let mut out_dims = [0; 3];
    for ax in 0..3 {
        out_dims[ax] = conv_output_len(dims[ax], kernel[ax], padding[ax])
            .filter(|&n| n > 0 && kernel[ax] > 0)
            .ok_or_else(|| {
                Error::shape(
                    "unfold_input",
                    format!("kernel {kernel:?} larger than padded input {dims:?} (padding {padding:?})"),
                )
            })?;
    }
    let input = input.as_contiguous();
    let src = input.data();
    let [ob, oh, ow] = out_dims;
    let ncols = ob * oh * ow;
    let nrows = c_in * kernel.iter().product::<usize>();
    let mut out = vec![T::zero(); nrows * ncols];
    let mut row = 0;
    for c in 0..c_in {
        for tb in 0..kernel[0] {
            for th in 0..kernel[1] {
                for tw in 0..kernel[2] {
                    let dst = &mut out[row * ncols..(row + 1) * ncols];
                    for y in 0..ob {
                        let sb = (y + tb) as isize - padding[0] as isize;
                        if sb < 0 || sb >= b as isize {
                            continue;
                        }
                        for i in 0..oh {
                            let sh = (i + th) as isize - padding[1] as isize;
                            if sh < 0 || sh >= h as isize {
                                continue;
                            }
                            let base = ((c * b + sb as usize) * h + sh as usize) * w;
                            for j in 0..ow {
                                let sw = (j + tw) as isize - padding[2] as isize;
                                if sw >= 0 && sw < w as isize {
                                    dst[(y * oh + i) * ow + j] = src[base + sw as usize];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    Matrix::new(nrows, ncols, out)
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// Singular values in descending order, via one-sided (Hestenes) Jacobi
/// rotations on the columns of the taller orientation of `m`.
pub fn svd_singular_values(m: &Matrix<f64>) -> Result<Vec<f64>> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::shape("svd_singular_values", "empty matrix"));
    }
    if let Some(pos) = m.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite entry at ({}, {})",
            pos / m.cols(),
            pos % m.cols()
        )));
    }
    // Columns to orthogonalize: `n` vectors of length `len`.
    let (n, len) = if m.rows() >= m.cols() {
        (m.cols(), m.rows())
    } else {
        (m.rows(), m.cols())
    };
    let mut cols: Vec<Vec<f64>> = if m.rows() >= m.cols() {
        (0..n).map(|j| (0..len).map(|i| m.get(i, j)).collect()).collect()
    } else {
        (0..n).map(|i| m.row(i).to_vec()).collect()
    };
    let mut norms: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();
    let tol = 1e-15;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                let (cp, cq) = (&mut lo[p], &mut hi[0]);
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (xp, xq) = (*x, *y);
                    *x = c * xp - s * xq;
                    *y = s * xp + c * xq;
                }
                norms[p] = dot(cp, cp);
                norms[q] = dot(cq, cq);
            }
        }
        if !rotated {
            let mut sv: Vec<f64> = norms.iter().map(|v| v.sqrt()).collect();
            sv.sort_by(|a, b| b.total_cmp(a));
            return Ok(sv);
        }
    }
    Err(Error::Numeric(format!(
        "Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps"
    )))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Count of singular values above `rel_tol * sigma_max`.
pub fn numerical_rank(m: &Matrix<f64>, rel_tol: f64) -> Result<usize> {
    let sv = svd_singular_values(m)?;
    Ok(rank_from_singular_values(&sv, rel_tol))
}

pub fn rank_from_singular_values(sv: &[f64], rel_tol: f64) -> usize {
    let max = sv.first().copied().unwrap_or(0.0);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

pub const DEFAULT_RANK_TOL: f64 = 1e-8;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
        })
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let i = Matrix::<f64>::identity(2);
        let v = Matrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&i, &v).unwrap(), v);
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 8, 12);
        let b = random_matrix(&mut rng, 12, 5);
        let fast = matmul(&a, &b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::<f64>::zeros(2, 3);
        let err = matmul(&a, &a).unwrap_err();
        assert!(err.to_string().contains("2x3 * 2x3"), "{err}");
    }

    #[test]
    fn permute_then_contiguous() {
        let t = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        let p = t.permute(&[1, 0]).unwrap();
        assert!(!p.is_contiguous());
        assert_eq!(p.get(&[2, 1]), Some(5.0));
        assert_eq!(p.contiguous().data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(t.permute(&[0, 0]).is_err());
        assert_eq!(t.get(&[2, 0]), None);
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(&[1; 6], vec![0.0]).is_err());
        assert!(Tensor::<f32>::zeros(&[4]).reshape(&[3]).is_err());
    }

    #[test]
    fn unfold_unit_kernel_is_flatten() {
        let x = Tensor::<f64>::from_fn(&[2, 2, 3, 2], |i| i as f64);
        let m = unfold_input(&x, [1, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 12));
        assert_eq!(m.data(), x.data());
    }

    #[test]
    fn unfold_center_column_is_whole_input() {
        // Oracle: enumerate each patch directly.
        let x = Tensor::<f64>::from_fn(&[1, 3, 3, 3], |i| i as f64 + 1.0);
        let m = unfold_input(&x, [3, 3, 3], [1, 1, 1]).unwrap();
        assert_eq!((m.rows(), m.cols()), (27, 27));
        for j in 0..27 {
            let (pb, ph, pw) = ((j / 9) as isize, ((j / 3) % 3) as isize, (j % 3) as isize);
            for r in 0..27 {
                let (tb, th, tw) = ((r / 9) as isize, ((r / 3) % 3) as isize, (r % 3) as isize);
                let (sb, sh, sw) = (pb + tb - 1, ph + th - 1, pw + tw - 1);
                let inside = (0..3).contains(&sb) && (0..3).contains(&sh) && (0..3).contains(&sw);
                let want = if inside { (sb * 9 + sh * 3 + sw) as f64 + 1.0 } else { 0.0 };
                assert_eq!(m.get(r, j), want);
            }
        }
        let center: Vec<f64> = (0..27).map(|r| m.get(r, 13)).collect();
        assert_eq!(center, x.data());
    }

    #[test]
    fn unfold_rejects_oversized_kernel() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        assert!(unfold_input(&x, [3, 1, 1], [0, 0, 0]).is_err());
        assert!(unfold_input(&x, [3, 1, 1], [1, 0, 0]).is_ok());
    }

    #[test]
    fn svd_trivial_cases() {
        let sv = svd_singular_values(&Matrix::identity(3)).unwrap();
        assert_eq!(sv, vec![1.0, 1.0, 1.0]);
        let d = Matrix::from_fn(3, 3, |i, j| if i == j { [1.0, 3.0, 2.0][i] } else { 0.0 });
        assert_eq!(svd_singular_values(&d).unwrap(), vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn svd_matches_gram_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_matrix(&mut rng, 6, 10);
        let sv = svd_singular_values(&m).unwrap();
        assert_eq!(sv.len(), 6);
        let a = nalgebra::DMatrix::from_row_slice(6, 10, m.data());
        let gram = &a * a.transpose();
        let mut eig: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        for (s, e) in sv.iter().zip(&eig) {
            assert!((s - e).abs() <= 1e-8 * sv[0], "{s} vs {e}");
        }
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut m = Matrix::<f64>::identity(2);
        m.set(1, 0, f64::NAN);
        assert!(matches!(svd_singular_values(&m), Err(Error::Numeric(_))));
    }

    #[test]
    fn rank_examples() {
        assert_eq!(numerical_rank(&Matrix::identity(4), DEFAULT_RANK_TOL).unwrap(), 4);
        assert_eq!(numerical_rank(&Matrix::zeros(3, 5), DEFAULT_RANK_TOL).unwrap(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_matrix(&mut rng, 10, 2);
        let v = random_matrix(&mut rng, 2, 10);
        let m = naive_matmul(&u, &v);
        assert_eq!(numerical_rank(&m, DEFAULT_RANK_TOL).unwrap(), 2);
    }

    proptest! {
        #[test]
        fn reshape_preserves_sequence(data in prop::collection::vec(-10.0f64..10.0, 24)) {
            let t = Tensor::new(&[2, 3, 4], data.clone()).unwrap();
            let r = t.reshape(&[4, 6]).unwrap().contiguous();
            prop_assert_eq!(r.data(), &data[..]);
        }

        #[test]
        fn matmul_is_associative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, 3, 4);
            let b = random_matrix(&mut rng, 4, 5);
            let c = random_matrix(&mut rng, 5, 2);
            let l = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let r = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in l.data().iter().zip(r.data()) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
        }

        #[test]
        fn unfold_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::from_fn(&[2, 3, 4, 3], |_| rng.random_range(-1.0..1.0));
            let y = Tensor::<f64>::from_fn(&[2, 3, 4, 3], |_| rng.random_range(-1.0..1.0));
            let combo = x.scale(a).add(&y.scale(b)).unwrap();
            let lhs = unfold_input(&combo, [3, 1, 3], [1, 0, 1]).unwrap();
            let ux = unfold_input(&x, [3, 1, 3], [1, 0, 1]).unwrap();
            let uy = unfold_input(&y, [3, 1, 3], [1, 0, 1]).unwrap();
            for ((l, p), q) in lhs.data().iter().zip(ux.data()).zip(uy.data()) {
                prop_assert!((l - (a * p + b * q)).abs() <= 1e-12);
            }
        }

        #[test]
        fn rank_never_exceeds_min_dim(seed in any::<u64>(), r in 1usize..7, c in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, r, c);
            prop_assert!(numerical_rank(&m, DEFAULT_RANK_TOL).unwrap() <= r.min(c));
        }
    }
}
