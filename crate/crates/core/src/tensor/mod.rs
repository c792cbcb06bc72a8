//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! The engine is generic over [`Scalar`], which is implemented for `f32`
//! (training), `f64` (oracle and audit tests), [`DoubleDouble`] (extended
//! precision for finite-difference oracles) and [`Dual`] (forward-mode
//! tangents, used by the exact hypergradient audit as forward-over-reverse).
//! There is no higher-order reverse mode: a tape never records its own
//! backward pass.

mod ddouble;
mod dual;
pub mod gradcheck;
mod params;
mod tape;

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ddouble::DoubleDouble;
pub use dual::Dual;
pub use params::{Gradients, ParamSet, ParamVars, Partition};
pub use tape::{reset_tape_stats, tape_stats, Tape, TapeStats, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Float64,
    /// `f64` value with one `f64` tangent. Audit only.
    Dual64,
    /// Pair of `f64`s, about 32 significant digits. Oracle only.
    DoubleDouble,
}

/// Element type of a [`Tensor`].
pub trait Scalar:
    Copy
    + Debug
    + Default
    + PartialEq
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
{
    const DTYPE: DType;
    /// True when the scalar carries a forward-mode tangent.
    const HAS_TANGENT: bool = false;

    fn from_f64(v: f64) -> Self;
    /// The primal value; the tangent of a [`Dual`] is dropped.
    fn primal(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;

    /// Same value with zero derivative information (identity for plain floats).
    fn detach(self) -> Self {
        self
    }

    fn tangent(self) -> f64 {
        0.0
    }

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn is_finite(self) -> bool {
        self.primal().is_finite() && self.tangent().is_finite()
    }

    fn max_primal(self, other: Self) -> Self {
        if other.primal() > self.primal() {
            other
        } else {
            self
        }
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::Float32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn primal(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::Float64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn primal(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// Dense row-major n-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} needs {n} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
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

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::contract(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::contract(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Converts element type through `f64` primal values.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.primal())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.primal()).collect()
    }

    /// Tangent components (all zero unless `T` is [`Dual`]).
    pub fn tangents(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.tangent()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn norm_l2(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let p = v.primal();
                p * p
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let rows = *self
            .shape
            .first()
            .ok_or_else(|| Error::contract("slice_rows on a rank-0 tensor"))?;
        if start > end || end > rows {
            return Err(Error::contract(format!(
                "row range {start}..{end} out of bounds for {rows} rows"
            )));
        }
        let stride = self.data.len() / rows.max(1);
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data[start * stride..end * stride].to_vec(),
        })
    }

    /// Gathers rows along the leading axis.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let n = *self
            .shape
            .first()
            .ok_or_else(|| Error::contract("select_rows on a rank-0 tensor"))?;
        let stride = self.data.len().checked_div(n).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= n {
                return Err(Error::contract(format!("row {r} out of bounds for {n}")));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor { shape, data })
    }

    /// Concatenates tensors along the leading axis.
    pub fn stack_rows(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("stack_rows of an empty list"))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::contract(format!(
                    "stack_rows: {:?} vs {:?}",
                    p.shape, first.shape
                )));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Tensor { shape, data })
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn add_scaled(&mut self, other: &Tensor<T>, alpha: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::contract(format!(
                "add_scaled shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let a = T::from_f64(alpha);
        for (x, &g) in self.data.iter_mut().zip(&other.data) {
            *x += a * g;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_buffer_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn row_helpers() {
        let t = Tensor::<f64>::from_f64([3, 2], &[1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(t.slice_rows(1, 3).unwrap().data(), &[3., 4., 5., 6.]);
        assert_eq!(t.select_rows(&[2, 0]).unwrap().data(), &[5., 6., 1., 2.]);
        let s = Tensor::stack_rows(&[t.slice_rows(0, 1).unwrap(), t.slice_rows(2, 3).unwrap()]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert!(t.slice_rows(2, 4).is_err());
    }

    #[test]
    fn cast_round_trips_small_integers() {
        let t = Tensor::<f64>::from_f64([2], &[1.0, -3.0]).unwrap();
        let u: Tensor<f32> = t.cast();
        assert_eq!(u.dtype(), DType::Float32);
        assert_eq!(u.cast::<f64>(), t);
    }
}
