//! Dense row-major tensors, a reverse-mode tape, and the optimizer.
//!
//! [`Tensor`] is a plain value. Gradient participation lives on the
//! [`Tape`]: a tensor registered with [`Tape::param`] is tracked, and
//! [`Tape::backward`] returns the gradient buffers for every tracked node.

mod gradcheck;
pub mod kernels;
mod optim;
mod tape;

use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use gradcheck::finite_diff_check;
pub use optim::{clip_grad_norm, AdamState};
pub use tape::{concat_cols, Gradients, Tape, Var};
pub(crate) use tape::{sq_dist_values, standardize_values};

/// Magic bytes of the tensor binary format.
pub const TENSOR_MAGIC: &[u8; 4] = b"OGDT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Dense n-dimensional array in row-major order.
///
/// A zero-dimensional shape (`[]`) is a scalar holding one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::Param(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Param(format!(
                "expected a 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Encodes into the binary tensor format: magic, dtype code, ndim,
    /// little-endian `u32` extents, little-endian values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.shape.len() + self.data.len() * T::DTYPE.size());
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(T::DTYPE as u8);
        out.push(self.shape.len() as u8);
        for &e in &self.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    /// Decodes one tensor from the front of `bytes`, returning it and the
    /// number of bytes consumed. A stored dtype different from `T` is
    /// converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let short = || Error::Format("truncated tensor".into());
        if bytes.len() < 6 {
            return Err(short());
        }
        if &bytes[..4] != TENSOR_MAGIC {
            return Err(Error::Format("bad tensor magic".into()));
        }
        let dtype = DType::from_code(bytes[4])?;
        let ndim = bytes[5] as usize;
        let mut pos = 6;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let b = bytes.get(pos..pos + 4).ok_or_else(short)?;
            shape.push(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize);
            pos += 4;
        }
        let n: usize = shape.iter().product();
        let width = dtype.size();
        let raw = bytes.get(pos..pos + n * width).ok_or_else(short)?;
        let data = raw
            .chunks_exact(width)
            .map(|c| match dtype {
                DType::F32 => T::from_f64_lossy(f32::read_le(c) as f64),
                DType::F64 => T::from_f64_lossy(f64::read_le(c)),
            })
            .collect();
        pos += n * width;
        Ok((Tensor::new(shape, data)?, pos))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 6];
        r.read_exact(&mut head)
            .map_err(|e| Error::Format(format!("tensor header: {e}")))?;
        let ndim = head[5] as usize;
        let mut ext = vec![0u8; 4 * ndim];
        r.read_exact(&mut ext)
            .map_err(|e| Error::Format(format!("tensor extents: {e}")))?;
        let n: usize = ext
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .product();
        let width = DType::from_code(head[4])?.size();
        let mut body = vec![0u8; n * width];
        r.read_exact(&mut body)
            .map_err(|e| Error::Format(format!("tensor body: {e}")))?;
        let mut all = head.to_vec();
        all.extend(ext);
        all.extend(body);
        Ok(Self::from_bytes(&all)?.0)
    }
}
