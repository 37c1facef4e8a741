//! Dense row-major tensors with `N, C, H, W` layout for rank-4 values.
//!
//! Values are held as `f64` regardless of dtype. An `F32` tensor stores only
//! values that are exactly representable in single precision: every
//! constructor and operation rounds its output through `f32` when the result
//! dtype is `F32`. Accumulation therefore always happens in double precision.

mod dten;

pub use dten::{read_dten, write_dten, DTEN_MAGIC, DTEN_VERSION};

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Max,
}

impl BinaryOp {
    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Max => a.max(b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::shape(format!(
            "rank must be in 1..={MAX_RANK}, got dims {dims:?}"
        )));
    }
    if let Some(axis) = dims.iter().position(|&d| d == 0) {
        return Err(Error::shape(format!(
            "extent of axis {axis} is zero in dims {dims:?}"
        )));
    }
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::shape(format!("element count overflows for dims {dims:?}")))
    })
}

impl Tensor {
    /// A tensor filled with `fill`, in double precision.
    pub fn new(dims: &[usize], fill: f64) -> Result<Self> {
        Self::new_typed(dims, fill, DType::F64)
    }

    pub fn new_typed(dims: &[usize], fill: f64, dtype: DType) -> Result<Self> {
        let len = check_dims(dims)?;
        Ok(Tensor {
            dims: dims.to_vec(),
            dtype,
            data: vec![dtype.round(fill); len],
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::new(dims, 0.0)
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::from_vec_typed(dims, data, DType::F64)
    }

    pub fn from_vec_typed(dims: &[usize], mut data: Vec<f64>, dtype: DType) -> Result<Self> {
        let len = check_dims(dims)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {len} values, got {}",
                data.len()
            )));
        }
        if dtype == DType::F32 {
            data.iter_mut().for_each(|v| *v = dtype.round(*v));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            dtype,
            data,
        })
    }

    /// Internal constructor for kernels that already produced a correctly
    /// sized buffer.
    pub(crate) fn from_raw(dims: Vec<usize>, data: Vec<f64>, dtype: DType) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        let mut t = Tensor { dims, dtype, data };
        if dtype == DType::F32 {
            t.data.iter_mut().for_each(|v| *v = dtype.round(*v));
        }
        t
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            dims: self.dims.clone(),
            dtype: self.dtype,
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            dims: vec![1],
            dtype: DType::F64,
            data: vec![v],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Interprets a rank-4 tensor as `(N, C, H, W)`.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.dims.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!(
                "expected a rank-4 NCHW tensor, got dims {:?}",
                self.dims
            ))),
        }
    }

    pub fn to_dtype(&self, dtype: DType) -> Self {
        Tensor::from_raw(self.dims.clone(), self.data.clone(), dtype)
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let len = check_dims(dims)?;
        if len != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            dtype: self.dtype,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor::from_raw(
            self.dims.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
            self.dtype,
        )
    }

    /// Returns a copy with a single element replaced. Used by probes such as
    /// finite differencing.
    pub fn with_value(&self, index: usize, v: f64) -> Self {
        let mut t = self.clone();
        t.data[index] = t.dtype.round(v);
        t
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of all elements in storage order.
    pub fn sum_all(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &v| acc + v)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "dot of {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (a, b)| acc + a * b))
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v * v)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "cannot compare {:?} with {:?}",
                self.dims, other.dims
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Element of a rank-4 tensor.
    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let (_, cc, hh, ww) = (self.dims[0], self.dims[1], self.dims[2], self.dims[3]);
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Elementwise `op(a, b)`. `b` must either share `a`'s dims or be a
/// per-channel tensor `[1, C, 1, 1]` against a rank-4 `a = [N, C, H, W]`.
pub fn ewise(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dtype = a.dtype;
    if a.dims == b.dims {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| op.apply(x, y))
            .collect();
        return Ok(Tensor::from_raw(a.dims.clone(), data, dtype));
    }
    if let ([n, c, h, w], [1, bc, 1, 1]) = (a.dims.as_slice(), b.dims.as_slice()) {
        if c == bc {
            let plane = h * w;
            let mut data = Vec::with_capacity(a.len());
            for ni in 0..*n {
                for ci in 0..*c {
                    let y = b.data[ci];
                    let base = (ni * c + ci) * plane;
                    data.extend(a.data[base..base + plane].iter().map(|&x| op.apply(x, y)));
                }
            }
            return Ok(Tensor::from_raw(a.dims.clone(), data, dtype));
        }
    }
    Err(Error::shape(format!(
        "cannot combine {:?} with {:?}",
        a.dims, b.dims
    )))
}

/// Reduces `x` over `axes`; reduced axes keep extent 1. Each output bucket
/// accumulates its inputs in row-major order.
pub fn reduce(op: ReduceOp, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut reduced = [false; MAX_RANK];
    for &axis in axes {
        if axis >= rank {
            return Err(Error::shape(format!(
                "axis {axis} out of range for rank {rank}"
            )));
        }
        reduced[axis] = true;
    }
    let out_dims: Vec<usize> = x
        .dims
        .iter()
        .enumerate()
        .map(|(i, &d)| if reduced[i] { 1 } else { d })
        .collect();
    let out_len: usize = out_dims.iter().product();
    let mut acc = vec![0.0f64; out_len];

    // strides of the output, zeroed along reduced axes
    let mut out_strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..rank).rev() {
        out_strides[i] = if reduced[i] { 0 } else { s };
        s *= out_dims[i];
    }
    let mut idx = vec![0usize; rank];
    for &v in &x.data {
        let o: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        acc[o] += v;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < x.dims[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    if op == ReduceOp::Mean {
        let count = (x.len() / out_len) as f64;
        acc.iter_mut().for_each(|v| *v /= count);
    }
    Ok(Tensor::from_raw(out_dims, acc, x.dtype))
}

/// I.i.d. normal samples in double precision.
pub fn rand_normal(rng: &mut Rng, dims: &[usize], mean: f64, std: f64) -> Result<Tensor> {
    let len = check_dims(dims)?;
    if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
        return Err(Error::validation(format!(
            "normal distribution needs finite mean and std >= 0, got mean={mean} std={std}"
        )));
    }
    let dist = Normal::new(mean, std).map_err(|e| Error::validation(e.to_string()))?;
    let data = (0..len).map(|_| dist.sample(rng.inner())).collect();
    Ok(Tensor::from_raw(dims.to_vec(), data, DType::F64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_fills_and_rejects_zero_extent() {
        let t = Tensor::new(&[2, 3], 0.0).unwrap();
        assert_eq!(t.data(), &[0.0; 6]);
        let t = Tensor::new(&[1, 1, 2, 2], 1.5).unwrap();
        assert_eq!(t.data(), &[1.5; 4]);
        assert!(matches!(Tensor::new(&[2, 0], 0.0), Err(Error::Shape(_))));
        assert!(matches!(Tensor::new(&[], 0.0), Err(Error::Shape(_))));
        assert!(matches!(Tensor::new(&[1, 1, 1, 1, 1], 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn ewise_examples() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(ewise(BinaryOp::Add, &a, &b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(ewise(BinaryOp::Sub, &a, &b).unwrap().data(), &[-2.0, -2.0]);
        assert_eq!(ewise(BinaryOp::Max, &a, &b).unwrap().data(), &[3.0, 4.0]);

        let x = Tensor::from_vec(&[2, 2], vec![0.5, -1.0, 2.0, 7.0]).unwrap();
        let ones = Tensor::new(&[2, 2], 1.0).unwrap();
        assert_eq!(ewise(BinaryOp::Mul, &x, &ones).unwrap(), x);

        let x = Tensor::from_vec(&[1, 2, 1, 1], vec![2.0, 4.0]).unwrap();
        let s = Tensor::from_vec(&[1, 2, 1, 1], vec![0.5, 0.25]).unwrap();
        assert_eq!(ewise(BinaryOp::Mul, &x, &s).unwrap().data(), &[1.0, 1.0]);

        let x = Tensor::from_vec(&[2, 2, 1, 2], (0..8).map(f64::from).collect()).unwrap();
        let s = Tensor::from_vec(&[1, 2, 1, 1], vec![10.0, 100.0]).unwrap();
        assert_eq!(
            ewise(BinaryOp::Add, &x, &s).unwrap().data(),
            &[10.0, 11.0, 102.0, 103.0, 14.0, 15.0, 106.0, 107.0]
        );
    }

    #[test]
    fn ewise_rejects_incompatible() {
        let a = Tensor::new(&[2, 3], 1.0).unwrap();
        let b = Tensor::new(&[3, 2], 1.0).unwrap();
        assert!(matches!(ewise(BinaryOp::Add, &a, &b), Err(Error::Shape(_))));
        let a = Tensor::new(&[1, 3, 2, 2], 1.0).unwrap();
        let b = Tensor::new(&[1, 2, 1, 1], 1.0).unwrap();
        assert!(matches!(ewise(BinaryOp::Mul, &a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn reduce_examples() {
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let m = reduce(ReduceOp::Mean, &x, &[0]).unwrap();
        assert_eq!(m.dims(), &[1]);
        assert_eq!(m.data(), &[2.0]);

        let z = Tensor::zeros(&[4, 4]).unwrap();
        assert_eq!(reduce(ReduceOp::Sum, &z, &[0, 1]).unwrap().data(), &[0.0]);

        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gap = reduce(ReduceOp::Mean, &x, &[2, 3]).unwrap();
        assert_eq!(gap.dims(), &[1, 1, 1, 1]);
        assert_eq!(gap.data(), &[2.5]);

        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(reduce(ReduceOp::Sum, &x, &[0]).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(reduce(ReduceOp::Sum, &x, &[1]).unwrap().data(), &[6.0, 15.0]);
        assert!(matches!(reduce(ReduceOp::Sum, &x, &[2]), Err(Error::Shape(_))));
    }

    #[test]
    fn f32_tensors_hold_rounded_values() {
        let t = Tensor::from_vec_typed(&[2], vec![0.1, 1.0 / 3.0], DType::F32).unwrap();
        assert_eq!(t.data()[0], 0.1f32 as f64);
        let sum = ewise(BinaryOp::Add, &t, &t).unwrap();
        assert_eq!(sum.dtype(), DType::F32);
        assert_eq!(sum.data()[1], ((1.0f32 / 3.0) as f64 * 2.0) as f32 as f64);
    }

    #[test]
    fn rand_normal_degenerate_and_deterministic() {
        let mut rng = Rng::new(3);
        let t = rand_normal(&mut rng, &[5, 5], 1.25, 0.0).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.25));

        let a = rand_normal(&mut Rng::new(11), &[64], 0.0, 1.0).unwrap();
        let b = rand_normal(&mut Rng::new(11), &[64], 0.0, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(rand_normal(&mut rng, &[2], 0.0, -1.0).is_err());
    }

    #[test]
    fn rand_normal_moments() {
        let t = rand_normal(&mut Rng::new(2024), &[100_000], 0.0, 1.0).unwrap();
        let n = t.len() as f64;
        let mean = t.sum_all() / n;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() <= 0.02, "mean {mean}");
        assert!((0.97..=1.03).contains(&var), "variance {var}");
    }
}
