//! Dense row-major tensors and the numeric primitives the attention and
//! channel-mixer layers are composed from.

pub mod counter;
mod ops;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;

use crate::error::{shape_err, Result};

pub use ops::{
    adaptive_avg_pool, conv2d, depthwise_conv3x3, gelu, gelu_scalar, layernorm, linear, matmul,
    softmax, LayerNormParams, LinearParams, LAYERNORM_EPS,
};
pub(crate) use ops::{gemm, pool_bucket, softmax_row, transpose2d};

/// Element type tag, also the on-disk dtype code of the weight archive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
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

/// Floating-point element. `f32` is the runtime dtype, `f64` the
/// verification dtype.
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + MulAssign + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Stand-in for −∞ on masked logits: the most negative finite value.
    fn sentinel() -> Self {
        Self::min_value()
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}

/// Dense rank-N array stored row-major. Extents are fixed at construction
/// and every operation returns a fresh tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Clone> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(shape_err!("zero extent in {dims:?}"));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(shape_err!(
                "extents {dims:?} hold {expected} elements but buffer has {}",
                data.len()
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), vec![value; n])
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n: usize = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Same buffer viewed under new extents with the same element count.
    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        Tensor::new(dims.to_vec(), self.data.clone())
    }

    fn offset(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.dims.len() {
            return None;
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.dims) {
            if i >= d {
                return None;
            }
            off = off * d + i;
        }
        Some(off)
    }

    pub fn get(&self, index: &[usize]) -> Option<&T> {
        self.offset(index).map(|o| &self.data[o])
    }

    /// Copy with one element replaced.
    pub fn with_value(&self, index: &[usize], value: T) -> Result<Self> {
        let o = self
            .offset(index)
            .ok_or_else(|| shape_err!("index {index:?} out of range for {:?}", self.dims))?;
        let mut data = self.data.clone();
        data[o] = value;
        Ok(Tensor { dims: self.dims.clone(), data })
    }

    pub fn map<U: Clone>(&self, f: impl FnMut(&T) -> U) -> Tensor<U> {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(f).collect() }
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.dims.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("invalid permutation {perm:?} for rank {rank}"));
        }
        let out_dims: Vec<usize> = perm.iter().map(|&p| self.dims[p]).collect();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * self.dims[i + 1];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; rank];
        for _ in 0..self.data.len() {
            let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            data.push(self.data[off].clone());
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_dims[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Tensor::new(out_dims, data)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Tensor::full(dims, T::zero())
    }

    pub fn from_f64_slice(dims: &[usize], values: &[f64]) -> Result<Self> {
        Tensor::new(dims.to_vec(), values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        self.map(|&v| U::from_f64(v.as_f64()))
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return Err(shape_err!("extent mismatch {:?} vs {:?}", self.dims, other.dims));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor::new(self.dims.clone(), data)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|&v| v * s)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        if self.dims != other.dims {
            return Err(shape_err!("extent mismatch {:?} vs {:?}", self.dims, other.dims));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `[C, H, W]` channel-major map to `[H·W, C]` token rows.
    pub fn chw_to_tokens(&self) -> Result<Self> {
        let (c, h, w) = self.chw()?;
        Ok(transpose2d(&self.data, c, h * w).into_tensor(&[h * w, c]))
    }

    pub(crate) fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(shape_err!("expected [C, H, W], got {:?}", self.dims)),
        }
    }
}

/// `[H·W, C]` token rows back to a `[C, H, W]` map.
pub fn tokens_to_chw<T: Scalar>(tokens: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    match tokens.dims[..] {
        [n, c] if n == h * w => Ok(transpose2d(&tokens.data, n, c).into_tensor(&[c, h, w])),
        _ => Err(shape_err!("tokens {:?} do not match a {h}x{w} map", tokens.dims)),
    }
}

pub(crate) trait IntoTensor<T> {
    fn into_tensor(self, dims: &[usize]) -> Tensor<T>;
}

impl<T> IntoTensor<T> for Vec<T> {
    /// Unchecked: only for buffers whose length was computed from `dims`.
    fn into_tensor(self, dims: &[usize]) -> Tensor<T> {
        debug_assert_eq!(dims.iter().product::<usize>(), self.len());
        Tensor { dims: dims.to_vec(), data: self }
    }
}
