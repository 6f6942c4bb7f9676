//! Scalar abstraction and dense row-major matrices.
//!
//! The model runs at either f32 or f64; everything numeric is generic over
//! [`Real`]. Matrices are plain `Vec`-backed row-major buffers. Vectors
//! (biases, layer-norm gains) are stored as 1×n matrices so one type covers
//! all parameter tensors.

use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

/// Storage type tag used in checkpoint headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Scalar type the model computes in.
pub trait Real:
    Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Draw from N(0, std²). Sampling happens in f64 so f32 and f64 models
    /// initialized from the same seed agree up to rounding.
    fn sample_normal<R: Rng>(rng: &mut R, std: f64) -> Self {
        let z: f64 = rng.sample(StandardNormal);
        Self::from_f64(z * std)
    }

    /// Bit pattern, widened to u64, for bitwise equality checks.
    fn bits(self) -> u64;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn bits(self) -> u64 {
        u64::from(self.to_bits())
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn bits(self) -> u64 {
        self.to_bits()
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn normal<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| T::sample_normal(rng, std))
            .collect();
        Self { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// True when both dimensions exceed 1; drives the factored/full split in
    /// the optimizer's second-moment state.
    pub fn is_matrix_shaped(&self) -> bool {
        self.rows > 1 && self.cols > 1
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// self += s · other
    pub fn add_scaled(&mut self, other: &Self, s: T) {
        assert!(self.same_shape(other), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * *b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        self.same_shape(other)
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }

    /// Root mean square of all entries.
    pub fn rms(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        let sum_sq = self
            .data
            .iter()
            .fold(T::zero(), |acc, &x| acc + x * x);
        (sum_sq / T::from_f64(self.data.len() as f64)).sqrt()
    }

    /// Y = self · otherᵀ, with self n×k and other m×k.
    pub fn matmul_nt(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dim mismatch");
        let (n, m, k) = (self.rows, other.rows, self.cols);
        let mut out = Matrix::zeros(n, m);
        for i in 0..n {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for j in 0..m {
                out_row[j] = dot(a_row, other.row(j));
            }
        }
        let _ = k;
        out
    }

    /// Y = self · other, with self n×k and other k×m.
    pub fn matmul_nn(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul_nn inner dim mismatch");
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(n, m);
        for i in 0..n {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (l, &a_il) in a_row.iter().enumerate().take(k) {
                let b_row = other.row(l);
                for j in 0..m {
                    out_row[j] += a_il * b_row[j];
                }
            }
        }
        out
    }

    /// Y = selfᵀ · other, with self k×n and other k×m; accumulates into `out`.
    pub fn matmul_tn_into(&self, other: &Self, out: &mut Self) {
        assert_eq!(self.rows, other.rows, "matmul_tn outer dim mismatch");
        assert_eq!(out.rows, self.cols, "matmul_tn out rows mismatch");
        assert_eq!(out.cols, other.cols, "matmul_tn out cols mismatch");
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let _ = n;
        for l in 0..k {
            let a_row = self.row(l);
            let b_row = other.row(l);
            for (i, &a_li) in a_row.iter().enumerate() {
                let out_row = out.row_mut(i);
                for j in 0..m {
                    out_row[j] += a_li * b_row[j];
                }
            }
        }
    }
}

/// Dot product of two equal-length slices.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}
