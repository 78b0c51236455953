//! Row-major tensors and the matrix kernels everything else is built on.
//!
//! Only what the model needs is here: 2-D contractions (with an optional
//! transposed operand), the block-diagonal contraction, and a softmax that
//! understands masked (`-inf`) entries. Leading dimensions of a left operand
//! are flattened, so a `[.., m, k]` tensor multiplies a `[k, n]` matrix as a
//! single `[rows, k]` block.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

/// Element type of a [`Tensor`]: `f64` for verification, `f32` for speed.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// Converts an `f64` constant, rounding to the nearest representable value.
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::dim("tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    /// Builds a matrix from `f64` rows; panics on ragged input. Test helper.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows
                .iter()
                .flat_map(|r| r.iter().map(|&x| T::of(x)))
                .collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max))
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::Contract(format!(
                "transpose needs a matrix, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    /// `self · rhs` for `self: [.., m, k]`, `rhs: [k, n]`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if rhs.shape.len() != 2 || self.cols() != rhs.shape[0] {
            return Err(Error::dim("matmul", &self.shape, &rhs.shape));
        }
        let (m, k, n) = (self.rows(), self.cols(), rhs.shape[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, &self.data, k, &rhs.data, n, &mut out, n);
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = n;
        Ok(Self { shape, data: out })
    }

    /// `self · rhsᵀ` for `self: [m, k]`, `rhs: [n, k]`.
    pub fn matmul_t(&self, rhs: &Self) -> Result<Self> {
        if rhs.shape.len() != 2 || self.cols() != rhs.shape[1] {
            return Err(Error::dim("matmul_t", &self.shape, &rhs.shape));
        }
        let (m, k, n) = (self.rows(), self.cols(), rhs.shape[0]);
        let mut out = vec![T::zero(); m * n];
        gemm_nt(m, k, n, &self.data, k, &rhs.data, k, &mut out, n);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `selfᵀ · rhs` for `self: [m, p]`, `rhs: [m, n]` (leading axes flattened).
    pub fn t_matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rows() != rhs.rows() {
            return Err(Error::dim("t_matmul", &self.shape, &rhs.shape));
        }
        let (m, p, n) = (self.rows(), self.cols(), rhs.cols());
        let mut out = vec![T::zero(); p * n];
        gemm_tn(m, p, n, &self.data, p, &rhs.data, n, &mut out, n);
        Ok(Self {
            shape: vec![p, n],
            data: out,
        })
    }

    /// Contracts `self: [rows, k·m]` with per-block kernels `blocks: [k, m, n]`,
    /// giving `[rows, k·n]` where output block `i` is input block `i` times
    /// kernel `i`. Identical to multiplying by the expanded block-diagonal matrix.
    pub fn block_matmul(&self, blocks: &Self) -> Result<Self> {
        let (k, m, n) = block_dims(blocks)?;
        if self.cols() != k * m {
            return Err(Error::dim("block_matmul", &self.shape, &blocks.shape));
        }
        let rows = self.rows();
        let (in_dim, out_dim) = (k * m, k * n);
        let mut out = vec![T::zero(); rows * out_dim];
        for b in 0..k {
            gemm_nn(
                rows,
                m,
                n,
                &self.data[b * m..],
                in_dim,
                &blocks.data[b * m * n..],
                n,
                &mut out[b * n..],
                out_dim,
            );
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = out_dim;
        Ok(Self { shape, data: out })
    }

    /// Gradient of [`Tensor::block_matmul`] with respect to its input.
    pub(crate) fn block_matmul_input_grad(grad_out: &Self, blocks: &Self) -> Result<Self> {
        let (k, m, n) = block_dims(blocks)?;
        if grad_out.cols() != k * n {
            return Err(Error::dim(
                "block_matmul_grad",
                &grad_out.shape,
                &blocks.shape,
            ));
        }
        let rows = grad_out.rows();
        let (in_dim, out_dim) = (k * m, k * n);
        let mut dx = vec![T::zero(); rows * in_dim];
        for b in 0..k {
            gemm_nt(
                rows,
                n,
                m,
                &grad_out.data[b * n..],
                out_dim,
                &blocks.data[b * m * n..],
                n,
                &mut dx[b * m..],
                in_dim,
            );
        }
        let mut shape = grad_out.shape.clone();
        *shape.last_mut().unwrap() = in_dim;
        Ok(Self { shape, data: dx })
    }

    /// Gradient of [`Tensor::block_matmul`] with respect to the block kernels.
    pub(crate) fn block_matmul_kernel_grad(
        input: &Self,
        grad_out: &Self,
        blocks: usize,
    ) -> Result<Self> {
        let rows = input.rows();
        if rows != grad_out.rows()
            || !input.cols().is_multiple_of(blocks)
            || !grad_out.cols().is_multiple_of(blocks)
        {
            return Err(Error::dim(
                "block_matmul_grad",
                &input.shape,
                &grad_out.shape,
            ));
        }
        let (in_dim, out_dim) = (input.cols(), grad_out.cols());
        let (m, n) = (in_dim / blocks, out_dim / blocks);
        let mut dw = vec![T::zero(); blocks * m * n];
        for b in 0..blocks {
            gemm_tn(
                rows,
                m,
                n,
                &input.data[b * m..],
                in_dim,
                &grad_out.data[b * n..],
                out_dim,
                &mut dw[b * m * n..],
                n,
            );
        }
        Ok(Self {
            shape: vec![blocks, m, n],
            data: dw,
        })
    }

    /// Softmax over the last axis, stabilised by subtracting the row maximum.
    ///
    /// `-inf` entries receive probability zero. A row that is entirely `-inf`
    /// becomes all zeros when `all_masked_ok` is set and is an error otherwise.
    pub fn softmax_lastdim(&self, all_masked_ok: bool) -> Result<Self> {
        let cols = self.cols();
        let mut out = self.data.clone();
        for (r, row) in out.chunks_mut(cols).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                if !all_masked_ok {
                    return Err(Error::Masking { row: r });
                }
                row.iter_mut().for_each(|x| *x = T::zero());
                continue;
            }
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }
}

fn block_dims<T: Real>(blocks: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *blocks.shape() {
        [k, m, n] => Ok((k, m, n)),
        _ => Err(Error::Contract(format!(
            "block kernel must be [blocks, in/blocks, out/blocks], got {:?}",
            blocks.shape()
        ))),
    }
}

// Strided kernels. Each accumulates into `c`; `ld*` are row strides.

/// `c[m, n] += a[m, k] · b[k, n]`
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_nn<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    lda: usize,
    b: &[T],
    ldb: usize,
    c: &mut [T],
    ldc: usize,
) {
    for i in 0..m {
        let c_row = &mut c[i * ldc..i * ldc + n];
        let a_row = &a[i * lda..i * lda + k];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * ldb..p * ldb + n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m, n] += a[m, k] · b[n, k]ᵀ`
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_nt<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    lda: usize,
    b: &[T],
    ldb: usize,
    c: &mut [T],
    ldc: usize,
) {
    for i in 0..m {
        let a_row = &a[i * lda..i * lda + k];
        for j in 0..n {
            c[i * ldc + j] += dot(a_row, &b[j * ldb..j * ldb + k]);
        }
    }
}

/// `c[p, n] += a[m, p]ᵀ · b[m, n]`
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_tn<T: Real>(
    m: usize,
    p: usize,
    n: usize,
    a: &[T],
    lda: usize,
    b: &[T],
    ldb: usize,
    c: &mut [T],
    ldc: usize,
) {
    for r in 0..m {
        let a_row = &a[r * lda..r * lda + p];
        let b_row = &b[r * ldb..r * ldb + n];
        for (i, &ari) in a_row.iter().enumerate() {
            let c_row = &mut c[i * ldc..i * ldc + n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += ari * bv;
            }
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorises.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let (xa, xb) = (
            &a[c * LANES..(c + 1) * LANES],
            &b[c * LANES..(c + 1) * LANES],
        );
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.at(p, j);
                }
                out.data_mut()[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn identity_matmul() {
        let i = Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(i.matmul(&b).unwrap(), b);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0]]);
        let b = Tensor::from_rows(&[&[3.0], &[4.0]]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let diff = a
            .matmul(&b)
            .unwrap()
            .max_abs_diff(&naive_matmul(&a, &b))
            .unwrap();
        assert!(diff <= 1e-12, "{diff}");
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&[5, 11], &mut rng);
        let b = random(&[7, 11], &mut rng);
        let c = random(&[5, 3], &mut rng);
        let nt = a.matmul_t(&b).unwrap();
        assert!(
            nt.max_abs_diff(&a.matmul(&b.transpose().unwrap()).unwrap())
                .unwrap()
                < 1e-12
        );
        let tn = a.t_matmul(&c).unwrap();
        assert!(
            tn.max_abs_diff(&a.transpose().unwrap().matmul(&c).unwrap())
                .unwrap()
                < 1e-12
        );
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn leading_axes_are_flattened() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&[2, 3, 4], &mut rng);
        let b = random(&[4, 5], &mut rng);
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.shape(), &[2, 3, 5]);
        let flat = a.clone().reshape(&[6, 4]).unwrap().matmul(&b).unwrap();
        assert_eq!(out.data(), flat.data());
    }

    #[test]
    fn softmax_cases() {
        let t = Tensor::<f64>::from_rows(&[&[0.0, 0.0]]);
        assert_eq!(t.softmax_lastdim(false).unwrap().data(), &[0.5, 0.5]);

        let ninf = f64::NEG_INFINITY;
        let t = Tensor::<f64>::from_rows(&[&[ninf, 0.0]]);
        assert_eq!(t.softmax_lastdim(false).unwrap().data(), &[0.0, 1.0]);

        let t = Tensor::<f64>::from_rows(&[&[ninf, ninf]]);
        assert_eq!(t.softmax_lastdim(true).unwrap().data(), &[0.0, 0.0]);
        assert!(matches!(
            t.softmax_lastdim(false),
            Err(Error::Masking { row: 0 })
        ));
    }

    #[test]
    fn softmax_is_shift_stable() {
        let t = Tensor::<f64>::from_rows(&[&[1000.0, 1001.0, 999.0]]);
        let p = t.softmax_lastdim(false).unwrap();
        assert!(p.all_finite());
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (0..19).map(|x| x as f64).collect();
        let expect: f64 = a.iter().map(|x| x * x).sum();
        assert_eq!(dot(&a, &a), expect);
    }

    #[test]
    fn matmul_is_associative() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&[3, 4], &mut rng);
            let b = random(&[4, 5], &mut rng);
            let c = random(&[5, 2], &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            assert!(left.max_abs_diff(&right).unwrap() < 1e-10);
        }
    }
}
