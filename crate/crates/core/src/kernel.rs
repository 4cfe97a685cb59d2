//! Dense row-major matrix primitives shared by every other module.
//!
//! Everything is generic over [`Real`] so correctness work runs in `f64` and
//! benchmark runs can drop to `f32`. The matrix product is dispatched to the
//! `matrixmultiply` gemm kernels; the rest is plain loops.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Scalar element type of every kernel.
pub trait Real:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Bit width, used in reports and CLI flags.
    const BITS: u32;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `exp` as used by softmax. The `f32` form is a branch-free
    /// polynomial that vectorizes; `f64` is the libm call.
    #[inline]
    fn softmax_exp(self) -> Self {
        self.exp()
    }

    /// `c = a * b` for strided operands.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing `m×k`, `k×n`
    /// and `m×n` regions.
    #[doc(hidden)]
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f64 {
    const BITS: u32 = 64;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc);
    }
}

impl Real for f32 {
    const BITS: u32 = 32;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn softmax_exp(self) -> Self {
        exp_f32(self)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc);
    }
}

/// `2^n · p(r)` with `x = n·ln2 + r`, `|r| ≤ ln2/2`; within 2 ulp of
/// `exp` on `[-87, 88]`, clamped outside it.
#[inline]
fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // Adding and subtracting 1.5·2^23 rounds to the nearest integer.
    const ROUND: f32 = 12_582_912.0;
    let x = x.clamp(-87.0, 88.0);
    let shifted = x * LOG2E + ROUND;
    let n = shifted - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.987_569_2e-4;
    let p = p * r + 1.398_2e-3;
    let p = p * r + 8.333_452e-3;
    let p = p * r + 4.166_579_6e-2;
    let p = p * r + 1.666_666_5e-1;
    let p = p * r + 0.5;
    let p = p * r * r + r + 1.0;
    // The low mantissa bits of `shifted` hold `n`.
    let e = shifted
        .to_bits()
        .wrapping_sub(ROUND.to_bits())
        .wrapping_add(127);
    p * f32::from_bits(e << 23)
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Debug> Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix {}x{}", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "matrix",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds from nested rows given in `f64`; rows must be equally long.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape(
                "matrix",
                format!("ragged rows: {} vs {cols}", bad.len()),
            ));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.iter().map(|&x| T::of(x)))
            .collect();
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Uniform samples in `[-scale, scale]`.
    pub fn random(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| T::of(rng.uniform(scale)))
            .collect();
        Self { rows, cols, data }
    }

    /// Weight matrix for a `fan_in -> fan_out` linear map, uniform in `±1/√fan_in`.
    pub fn init_linear(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
        Self::random(fan_in, fan_out, scale, rng)
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub(crate) fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{}x{} times {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(gemm(self, other, false))
    }

    /// `self * otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_t",
                format!(
                    "{}x{} times ({}x{})ᵀ",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(gemm(self, other, true))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Adds `bias` to every row.
    pub fn add_row(&self, bias: &[T]) -> Result<Self> {
        if bias.len() != self.cols {
            return Err(Error::shape(
                "add_row",
                format!("bias of {} for {} columns", bias.len(), self.cols),
            ));
        }
        let mut out = self.clone();
        for i in 0..out.rows {
            for (x, &b) in out.row_mut(i).iter_mut().zip(bias) {
                *x += b;
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.rows, "row range out of bounds");
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stacks matrices vertically; all must share a column count.
    pub fn vstack(parts: &[&Self]) -> Result<Self> {
        let cols = match parts.first() {
            Some(p) => p.cols,
            None => return Ok(Self::zeros(0, 0)),
        };
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape(
                    "vstack",
                    format!("{} columns vs {cols}", p.cols),
                ));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self { rows, cols, data })
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest elementwise absolute difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.shape() != other.shape() {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| (a - b).abs().as_f64())
                .fold(0.0, f64::max),
        )
    }

    pub fn frobenius_sq(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }
}

fn gemm<T: Real>(a: &Matrix<T>, b: &Matrix<T>, transpose_b: bool) -> Matrix<T> {
    let (m, k) = a.shape();
    let n = if transpose_b { b.rows } else { b.cols };
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let (rsb, csb) = if transpose_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: shapes were checked by the caller; `out` is freshly allocated
    // with m*n elements and does not alias either operand.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.data.as_ptr(),
            k as isize,
            1,
            b.data.as_ptr(),
            rsb,
            csb,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    a.matmul(b)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    softmax_rows_in_place(&mut out);
    out
}

pub(crate) fn softmax_rows_in_place<T: Real>(m: &mut Matrix<T>) {
    for i in 0..m.rows {
        let row = m.row_mut(i);
        let max = lane_fold(row, T::neg_infinity(), |a, b| if b > a { b } else { a });
        for x in row.iter_mut() {
            *x = (*x - max).softmax_exp();
        }
        let inv = lane_fold(row, T::zero(), |a, b| a + b).recip();
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

/// Folds eight interleaved lanes, then the lanes and the tail.
#[inline]
fn lane_fold<T: Real>(xs: &[T], init: T, f: impl Fn(T, T) -> T) -> T {
    let mut acc = [init; 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &x) in acc.iter_mut().zip(c) {
            *a = f(*a, x);
        }
    }
    acc.into_iter().chain(tail.iter().copied()).fold(init, f)
}

/// Per-row normalization to zero mean and unit (population) variance,
/// followed by the affine `gain`, `bias`.
pub fn layer_norm<T: Real>(m: &Matrix<T>, gain: &[T], bias: &[T], eps: T) -> Result<Matrix<T>> {
    if gain.len() != m.cols || bias.len() != m.cols {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "gain {} / bias {} for {} columns",
                gain.len(),
                bias.len(),
                m.cols
            ),
        ));
    }
    let n = T::of(m.cols as f64);
    let mut out = m.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
        let inv = (var + eps).sqrt().recip();
        for ((x, &g), &b) in row.iter_mut().zip(gain).zip(bias) {
            *x = (*x - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + T::of(0.044715) * x * x * x)).tanh())
}

/// Seeded generator. Identical seeds give identical streams.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[-a, a]`.
    pub fn uniform(&mut self, a: f64) -> f64 {
        if a == 0.0 {
            return 0.0;
        }
        self.inner.gen_range(-a..=a)
    }

    /// Uniform in `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Independent child stream, seeded from this one.
    pub fn split(&mut self) -> Rng {
        Rng::new(self.inner.next_u64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_exp_tracks_libm() {
        let mut worst = 0.0f64;
        for i in 0..=1_750_000 {
            let x = -87.0 + i as f32 * 1e-4;
            let want = (x as f64).exp();
            worst = worst.max(((exp_f32(x) as f64) - want).abs() / want);
        }
        assert!(worst < 2.5e-7, "{worst}");
        assert_eq!(exp_f32(0.0), 1.0);
        assert!(exp_f32(-1e4) > 0.0 && exp_f32(1e4).is_finite());
    }

    fn naive(a: &Matrix<f64>, b: &Matrix<f64>) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.as_slice()[i * a.cols() + k] * b.as_slice()[k * b.cols() + j];
                }
                out[i * b.cols() + j] = s;
            }
        }
        out
    }

    #[test]
    fn identity_times_m_is_m() {
        let m = Matrix::<f64>::from_rows(&[&[1.5, -2.0], &[0.25, 7.0]]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Matrix::<f64>::from_rows(&[&[0.0], &[1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = Rng::new(11);
        let a = Matrix::<f64>::random(5, 7, 1.0, &mut rng);
        let b = Matrix::<f64>::random(7, 3, 1.0, &mut rng);
        let got = a.matmul(&b).unwrap();
        for (x, y) in got.as_slice().iter().zip(naive(&a, &b)) {
            assert!((x - y).abs() <= 1e-12);
        }
        let bt = b.transpose();
        let got_t = a.matmul_t(&bt).unwrap();
        assert!(got_t.max_abs_diff(&got).unwrap() <= 1e-12);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::<f64>::zeros(2, 3);
        let err = a.matmul(&Matrix::zeros(2, 3)).unwrap_err();
        assert!(err.to_string().contains("2x3 times 2x3"), "{err}");
    }

    #[test]
    fn zero_inner_dimension() {
        let a = Matrix::<f64>::zeros(3, 0);
        let b = Matrix::<f64>::zeros(0, 2);
        assert_eq!(a.matmul(&b).unwrap(), Matrix::zeros(3, 2));
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_rows(&Matrix::<f64>::zeros(1, 3));
        for &x in s.as_slice() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&Matrix::<f64>::from_rows(&[&[1000.0, 1000.0]]).unwrap());
        assert_eq!(s.as_slice(), &[0.5, 0.5]);
        // e^k / (e + e^2 + e^3), correctly rounded.
        let s = softmax_rows(&Matrix::<f64>::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap());
        let expected = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_64,
            0.665_240_955_774_821_9,
        ];
        for (x, e) in s.as_slice().iter().zip(expected) {
            assert!((x - e).abs() < 1e-15, "{x} vs {e}");
        }
    }

    #[test]
    fn layer_norm_cases() {
        let one = [1.0; 4];
        let zero = [0.0; 4];
        let c = Matrix::<f64>::filled(1, 4, 3.5);
        let out = layer_norm(&c, &one, &zero, 1e-6).unwrap();
        assert!(out.as_slice().iter().all(|&x| x == 0.0));

        let r = Matrix::<f64>::from_rows(&[&[1.0, -1.0]]).unwrap();
        let out = layer_norm(&r, &[1.0, 1.0], &[0.0, 0.0], 1e-14).unwrap();
        assert!(out.max_abs_diff(&r).unwrap() < 1e-12);

        let mut rng = Rng::new(3);
        let m = Matrix::<f64>::random(3, 8, 5.0, &mut rng);
        let out = layer_norm(&m, &[1.0; 8], &[0.0; 8], 1e-14).unwrap();
        for i in 0..3 {
            let row = out.row(i);
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
        assert!(layer_norm(&m, &[1.0; 7], &[0.0; 8], 1e-6).is_err());
    }

    #[test]
    fn rng_is_reproducible_and_bounded() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..1000 {
            let x = a.uniform(0.5);
            assert_eq!(x, b.uniform(0.5));
            assert!((-0.5..=0.5).contains(&x));
        }
    }

    #[test]
    fn f32_product_close_to_f64() {
        let mut rng = Rng::new(5);
        let a = Matrix::<f64>::random(9, 17, 1.0, &mut rng);
        let b = Matrix::<f64>::random(17, 4, 1.0, &mut rng);
        let exact = a.matmul(&b).unwrap();
        let lowp = a
            .cast::<f32>()
            .matmul(&b.cast::<f32>())
            .unwrap()
            .cast::<f64>();
        assert!(exact.max_abs_diff(&lowp).unwrap() < 1e-5);
    }
}
