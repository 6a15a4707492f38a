//! Dense row-major matrices.

use std::fmt::Debug;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};
use crate::rng;

/// Element type of a [`Matrix`]. Implemented for `f32` (training and
/// benchmarks) and `f64` (gradient checking).
pub trait Scalar: Float + FromPrimitive + AddAssign + Default + Debug + Send + Sync + 'static {
    fn from_f64_lossy(v: f64) -> Self;

    /// Raw IEEE-754 bits widened to `u64`, for bitwise comparisons.
    fn bits(self) -> u64;
}

impl Scalar for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn bits(self) -> u64 {
        u64::from(self.to_bits())
    }
}

impl Scalar for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn bits(self) -> u64 {
        self.to_bits()
    }
}

/// A dense `rows x cols` matrix stored row-major: element `(i, j)` lives at
/// `data[i * cols + j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::InvalidShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// # Panics
    /// If either dimension is zero.
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::one())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Uniform entries in `[-1, 1)` drawn from the counter-based hash, so the
    /// same `(rows, cols, seed)` always gives the same matrix.
    pub fn random(rows: usize, cols: usize, seed: u64) -> Self {
        Self::from_fn(rows, cols, |i, j| {
            let u = rng::unit_f64(rng::hash3(seed, i as u64, j as u64));
            T::from_f64_lossy(2.0 * u - 1.0)
        })
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
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn elementwise_mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other)?;
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

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| s * v)
    }

    /// Materialised transpose; the result owns a fresh row-major buffer.
    pub fn transpose(&self) -> Self {
        let (rows, cols) = (self.rows, self.cols);
        let mut data = vec![T::zero(); rows * cols];
        // 8x8 blocks keep both sides of the copy in cache.
        const B: usize = 8;
        for i0 in (0..rows).step_by(B) {
            for j0 in (0..cols).step_by(B) {
                for i in i0..(i0 + B).min(rows) {
                    for j in j0..(j0 + B).min(cols) {
                        data[j * rows + i] = self.data[i * cols + j];
                    }
                }
            }
        }
        Self {
            rows: cols,
            cols: rows,
            data,
        }
    }

    /// True when every element has identical IEEE-754 bits.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }

    /// Bitwise equality except that `+0` and `-0` compare equal. Masking by
    /// multiplication yields `-0` where a zero-initialised output holds `+0`.
    pub fn bitwise_eq_up_to_zero_sign(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits() || (a.is_zero() && b.is_zero()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let v = v.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// `||self - reference||_F / ||reference||_F`, or the absolute difference
    /// norm when the reference is exactly zero.
    pub fn rel_frobenius_error(&self, reference: &Self) -> Result<f64> {
        self.check_same_shape(reference)?;
        let diff: f64 = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(&a, &b)| {
                let d = a.to_f64().unwrap_or(f64::NAN) - b.to_f64().unwrap_or(f64::NAN);
                d * d
            })
            .sum::<f64>()
            .sqrt();
        let norm = reference.frobenius_norm();
        Ok(if norm == 0.0 { diff } else { diff / norm })
    }

    pub fn convert<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }
}

pub fn elementwise_mul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    a.elementwise_mul(b)
}

pub fn transpose<T: Scalar>(a: &Matrix<T>) -> Matrix<T> {
    a.transpose()
}

pub fn scale<T: Scalar>(a: &Matrix<T>, s: T) -> Matrix<T> {
    a.scale(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_rejects_bad_lengths() {
        assert!(Matrix::<f32>::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::<f32>::new(0, 2, vec![]).is_err());
        let m = Matrix::<f32>::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.get(1, 0), 4.0);
    }

    #[test]
    fn elementwise_identities() {
        let a = Matrix::<f32>::random(5, 7, 3);
        assert!(a.elementwise_mul(&Matrix::ones(5, 7)).unwrap().bitwise_eq(&a));
        let z = a.elementwise_mul(&Matrix::zeros(5, 7)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elementwise_matches_scalar_loop() {
        let a = Matrix::<f32>::random(2, 2, 11);
        let b = Matrix::<f32>::random(2, 2, 12);
        let c = a.elementwise_mul(&b).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(c.get(i, j).to_bits(), (a.get(i, j) * b.get(i, j)).to_bits());
            }
        }
    }

    #[test]
    fn elementwise_shape_mismatch_names_both_shapes() {
        let err = Matrix::<f32>::zeros(2, 3)
            .elementwise_mul(&Matrix::zeros(3, 2))
            .unwrap_err();
        match err {
            Error::ShapeMismatch { left, right } => {
                assert_eq!(left, (2, 3));
                assert_eq!(right, (3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn transpose_cases() {
        let id = Matrix::<f64>::identity(9);
        assert!(id.transpose().bitwise_eq(&id));
        let row = Matrix::<f32>::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let col = row.transpose();
        assert_eq!(col.shape(), (3, 1));
        assert_eq!(col.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn scale_cases() {
        let a = Matrix::<f32>::random(3, 4, 5);
        assert!(a.scale(1.0).bitwise_eq(&a));
        assert!(a.scale(0.0).data().iter().all(|&v| v == 0.0));
        let d = a.scale(2.0);
        for (x, y) in a.data().iter().zip(d.data()) {
            assert_eq!((2.0 * x).to_bits(), y.to_bits());
        }
    }

    fn matrix_strategy() -> impl Strategy<Value = Matrix<f32>> {
        (1usize..20, 1usize..20).prop_flat_map(|(r, c)| {
            prop::collection::vec(-1e6f32..1e6, r * c)
                .prop_map(move |data| Matrix::new(r, c, data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn transpose_is_involution(a in matrix_strategy()) {
            prop_assert!(a.transpose().transpose().bitwise_eq(&a));
            let t = a.transpose();
            for i in 0..a.rows() {
                for j in 0..a.cols() {
                    prop_assert_eq!(t.get(j, i).to_bits(), a.get(i, j).to_bits());
                }
            }
        }

        #[test]
        fn elementwise_mul_commutes(a in matrix_strategy(), seed in any::<u64>()) {
            let b = Matrix::<f32>::random(a.rows(), a.cols(), seed);
            prop_assert!(a.elementwise_mul(&b).unwrap().bitwise_eq(&b.elementwise_mul(&a).unwrap()));
        }

        #[test]
        fn power_of_two_scale_roundtrips(a in matrix_strategy(), e in -8i32..8) {
            let s = 2f32.powi(e);
            prop_assert!(a.scale(s).scale(1.0 / s).bitwise_eq(&a));
        }
    }
}
