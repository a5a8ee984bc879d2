//! Minimal dense linear algebra used by the flow model.
//!
//! The model code is generic over [`Real`] so the same forward/backward
//! implementation runs in f32 for training and inference and in f64 for
//! finite-difference gradient verification.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Real:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn of(x: f64) -> Self;
    fn of_f32(x: f32) -> Self;
    fn to_f64(self) -> f64;
    fn to_f32(self) -> f32;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, other: Self) -> Self;
    fn minv(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

/// Polynomial `exp` with two-power range reduction: ~5e-9 relative error,
/// several times faster than libm. Hot loops (softmax, activations) burn
/// millions of these per training step.
#[inline]
pub fn fast_exp_f64(x: f64) -> f64 {
    let x = x.clamp(-690.0, 690.0);
    const INV_LN2: f64 = std::f64::consts::LOG2_E;
    const LN2: f64 = std::f64::consts::LN_2;
    let k = (x * INV_LN2).round();
    let r = x - k * LN2;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0
                        + r * (1.0 / 120.0 + r * (1.0 / 720.0 + r * (1.0 / 5040.0)))))));
    let bits = (((k as i64) + 1023) as u64) << 52;
    f64::from_bits(bits) * p
}

#[inline]
pub fn fast_exp_f32(x: f32) -> f32 {
    let x = x.clamp(-85.0, 85.0);
    const INV_LN2: f32 = std::f32::consts::LOG2_E;
    const LN2: f32 = std::f32::consts::LN_2;
    let k = (x * INV_LN2).round();
    let r = x - k * LN2;
    let p = 1.0
        + r * (1.0
            + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r / 720.0)))));
    let bits = (((k as i32) + 127) as u32) << 23;
    f32::from_bits(bits) * p
}

#[inline]
fn fast_tanh_f64(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return if x > 0.0 { 1.0 } else { -1.0 };
    }
    let e = fast_exp_f64(-2.0 * x.abs());
    let t = (1.0 - e) / (1.0 + e);
    if x >= 0.0 {
        t
    } else {
        -t
    }
}

#[inline]
fn fast_tanh_f32(x: f32) -> f32 {
    if x.abs() > 10.0 {
        return if x > 0.0 { 1.0 } else { -1.0 };
    }
    let e = fast_exp_f32(-2.0 * x.abs());
    let t = (1.0 - e) / (1.0 + e);
    if x >= 0.0 {
        t
    } else {
        -t
    }
}

macro_rules! impl_real {
    ($t:ty, $fexp:ident, $ftanh:ident) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn of_f32(x: f32) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn to_f32(self) -> f32 {
                self as f32
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn exp(self) -> Self {
                $fexp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn tanh(self) -> Self {
                $ftanh(self)
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn maxv(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            #[inline]
            fn minv(self, other: Self) -> Self {
                if self < other {
                    self
                } else {
                    other
                }
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_real!(f32, fast_exp_f32, fast_tanh_f32);
impl_real!(f64, fast_exp_f64, fast_tanh_f64);

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn transpose(&self) -> Mat<T> {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map_convert<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.to_f64())).collect(),
        }
    }
}

/// `c += a * b` where `a` is m×k and `b` is k×n.
pub fn matmul_acc<T: Real>(a: &Mat<T>, b: &Mat<T>, c: &mut Mat<T>) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(c.rows, a.rows);
    assert_eq!(c.cols, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let arow = a.row(i);
        let crow = c.row_mut(i);
        for (p, &ap) in arow.iter().enumerate() {
            if ap == T::ZERO {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += ap * bv;
            }
        }
    }
}

/// `a * b` into a fresh matrix.
pub fn matmul<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut c = Mat::zeros(a.rows, b.cols);
    matmul_acc(a, b, &mut c);
    c
}

/// `c += a * b^T` where `a` is m×k and `b` is n×k.
pub fn matmul_transb_acc<T: Real>(a: &Mat<T>, b: &Mat<T>, c: &mut Mat<T>) {
    assert_eq!(a.cols, b.cols);
    assert_eq!(c.rows, a.rows);
    assert_eq!(c.cols, b.rows);
    let k = a.cols;
    for i in 0..a.rows {
        let arow = a.row(i);
        let crow = c.row_mut(i);
        for j in 0..b.rows {
            let brow = &b.data[j * k..(j + 1) * k];
            // Four accumulators so the reduction vectorizes.
            let mut s0 = T::ZERO;
            let mut s1 = T::ZERO;
            let mut s2 = T::ZERO;
            let mut s3 = T::ZERO;
            let chunks = k / 4;
            for cidx in 0..chunks {
                let base = cidx * 4;
                s0 += arow[base] * brow[base];
                s1 += arow[base + 1] * brow[base + 1];
                s2 += arow[base + 2] * brow[base + 2];
                s3 += arow[base + 3] * brow[base + 3];
            }
            for idx in chunks * 4..k {
                s0 += arow[idx] * brow[idx];
            }
            crow[j] += (s0 + s1) + (s2 + s3);
        }
    }
}

pub fn matmul_transb<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut c = Mat::zeros(a.rows, b.rows);
    matmul_transb_acc(a, b, &mut c);
    c
}

/// `c += a^T * b` where `a` is m×k and `b` is m×n; result is k×n.
pub fn matmul_transa_acc<T: Real>(a: &Mat<T>, b: &Mat<T>, c: &mut Mat<T>) {
    assert_eq!(a.rows, b.rows);
    assert_eq!(c.rows, a.cols);
    assert_eq!(c.cols, b.cols);
    let n = b.cols;
    for p in 0..a.rows {
        let arow = a.row(p);
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &ap) in arow.iter().enumerate() {
            if ap == T::ZERO {
                continue;
            }
            let crow = &mut c.data[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += ap * bv;
            }
        }
    }
}

pub fn matmul_transa<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut c = Mat::zeros(a.cols, b.cols);
    matmul_transa_acc(a, b, &mut c);
    c
}
