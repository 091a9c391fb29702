//! Dense row-major tensors and the numeric kernels shared by the tape and the
//! allocation-free inference kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epsilon used by every layer normalization in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Floating point element type. Implemented for `f32` (default precision) and
/// `f64` (used by gradient checks and oracle comparisons).
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
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Numeric precision selector used by configuration files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64_lossy()).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, k: T) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Row `i` of a tensor viewed as `[rows, last_dim]`.
    pub fn row(&self, i: usize) -> &[T] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn transpose2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape(format!("transpose2 on {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }
}

/// `out[m,n] += a[m,k] * b[k,n]` over raw row-major slices.
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`.
pub(crate) fn gemm_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`.
pub(crate) fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Normalizes one row in place into `xhat` and returns `1/std`.
pub fn normalize_row<T: Real>(x: &[T], xhat: &mut [T]) -> T {
    let n = T::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + T::lit(LAYER_NORM_EPS)).sqrt();
    for (h, &v) in xhat.iter_mut().zip(x) {
        *h = (v - mean) * inv_std;
    }
    inv_std
}

/// In-place numerically stable softmax of one row.
pub fn softmax_row<T: Real>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Layer normalization over the last axis with affine gain and shift.
pub fn layer_norm<T: Real>(f: &Tensor<T>, gain: &[T], shift: &[T]) -> Result<Tensor<T>> {
    let c = f.last_dim();
    if c == 0 || f.is_empty() {
        return Err(Error::Empty("layer_norm row"));
    }
    if gain.len() != c || shift.len() != c {
        return Err(Error::shape(format!(
            "layer_norm affine of length {}/{} for rows of {}",
            gain.len(),
            shift.len(),
            c
        )));
    }
    let mut out = Tensor::zeros(f.shape());
    for (x, y) in f.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        normalize_row(x, y);
        for ((v, &g), &b) in y.iter_mut().zip(gain).zip(shift) {
            *v = *v * g + b;
        }
    }
    Ok(out)
}

pub fn softmax<T: Real>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    let mut out = vec![T::zero(); v.len()];
    softmax_row(v, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let f = Tensor::new(vec![1, 3], vec![1.0f64, 1.0, 1.0]).unwrap();
        let y = layer_norm(&f, &[1.0; 3], &[0.0; 3]).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn layer_norm_two_values() {
        let f = Tensor::new(vec![1, 2], vec![0.0f64, 2.0]).unwrap();
        let y = layer_norm(&f, &[1.0; 2], &[0.0; 2]).unwrap();
        // std is sqrt(1 + eps)
        let k = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + k).abs() < 1e-12);
        assert!((y.data()[1] - k).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_affine_dominates() {
        let f = Tensor::new(vec![1, 2], vec![3.0f64, -7.0]).unwrap();
        let y = layer_norm(&f, &[0.0; 2], &[5.0; 2]).unwrap();
        assert_eq!(y.data(), &[5.0, 5.0]);
    }

    #[test]
    fn layer_norm_rejects_empty_rows() {
        let f = Tensor::<f64>::zeros(&[2, 0]);
        assert!(matches!(layer_norm(&f, &[], &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0f64, 0.0]).unwrap(), vec![0.5, 0.5]);
        let s = softmax(&[2.5f64, 2.5, 2.5]).unwrap();
        assert!(s.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let s = softmax(&[1.0f64.ln(), 3.0f64.ln()]).unwrap();
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
        assert!(softmax::<f64>(&[]).is_err());
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0f32; 3]).is_err());
    }
}
