//! Dense tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is an immutable value type: flat row-major storage plus a shape.
//! All differentiable computation goes through a [`Tape`], which records
//! primitive operations eagerly and replays them backward to produce gradients
//! for tracked leaves. [`check::finite_difference_check`] is the independent
//! oracle used to verify every gradient rule.
//!
//! Precision is a type parameter: `f64` for verification runs (finite
//! differences are unreliable in 32-bit), `f32` for training speed.

mod check;
mod tape;

pub use check::{finite_difference_check, rel_error, FdReport};
pub use tape::{Gradients, NodeId, Tape};

use std::fmt;
use std::str::FromStr;

use num_traits::Float;

use crate::error::{Error, Result};

/// Run-mode precision switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::F32 => write!(f, "32"),
            Precision::F64 => write!(f, "64"),
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "32" | "f32" => Ok(Precision::F32),
            "64" | "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "precision must be 32 or 64, got {other:?}"
            ))),
        }
    }
}

impl serde::Serialize for Precision {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> serde::Deserialize<'de> for Precision {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Element type for tensors: `f32` or `f64`.
///
/// Conversion methods are named `into_*` to stay clear of the
/// `ToPrimitive`/`FromPrimitive` methods every `Float` already carries.
pub trait Scalar: Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static {
    const PRECISION: Precision;

    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn into_f32(self) -> f32;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(x: f32) -> Self {
        x
    }
    fn into_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn into_f64(self) -> f64 {
        self
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn into_f32(self) -> f32 {
        self as f32
    }
}

/// Dense n-dimensional array with flat row-major storage.
///
/// Tensors are immutable values: every tape operation produces a fresh output,
/// so they are safe to share or send between threads.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    /// Build a tensor, validating that `product(shape) == data.len()` and all
    /// extents are positive. A rank-0 shape holds exactly one element.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} elements but data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert!(
            shape.iter().all(|&e| e > 0),
            "zero extent in shape {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(F::one());
        t
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    /// 1-D tensor from a vector.
    pub fn from_vec(data: Vec<F>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("rows of unequal length".into()));
        }
        let data: Vec<F> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![n, d], data)
    }

    pub fn from_f64s(shape: &[usize], values: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), values.iter().map(|&v| F::from_f64(v)).collect())
    }

    pub fn from_f32_slice(shape: &[usize], values: &[f32]) -> Result<Self> {
        Tensor::new(shape.to_vec(), values.iter().map(|&v| F::from_f32(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a scalar (or one-element) tensor.
    pub fn scalar_value(&self) -> F {
        assert_eq!(self.data.len(), 1, "scalar_value on shape {:?}", self.shape);
        self.data[0]
    }

    /// Element of a 2-D tensor at `(row, col)`.
    pub fn get2(&self, row: usize, col: usize) -> F {
        assert_eq!(self.rank(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert element precision through `f64`.
    pub fn to_precision<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::from_f64(v.into_f64())).collect(),
        }
    }
}

/// Decompose `shape` around `axis` into `(outer, len, inner)` so that the
/// element at `(o, j, i)` lives at flat index `(o * len + j) * inner + i`.
pub(crate) fn axis_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}
