//! Minimal differentiable-computation substrate.
//!
//! A small tape-based reverse-mode autodiff over dense 2-D tensors, plus
//! layers, Adam, seeded Gumbel noise, and finite-difference gradient
//! verification. Single or double precision is selected by the scalar
//! type parameter; the same code path runs in both.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod layers;

use crate::error::{Error, Result};
use crate::rng::stream;
use rand::Rng;

/// Floating-point scalar used by the substrate (f32 or f64).
pub trait Scalar:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    fn fl(x: f64) -> Self;
    fn to64(self) -> f64;
    fn write_le_bytes(data: &[Self], out: &mut Vec<u8>);
    fn read_le_bytes(bytes: &[u8]) -> Result<Vec<Self>>;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    fn fl(x: f64) -> Self {
        x as f32
    }
    fn to64(self) -> f64 {
        self as f64
    }
    fn write_le_bytes(data: &[Self], out: &mut Vec<u8>) {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn read_le_bytes(bytes: &[u8]) -> Result<Vec<Self>> {
        if bytes.len() % 4 != 0 {
            return Err(Error::Checkpoint("payload not a multiple of 4 bytes".into()));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    fn fl(x: f64) -> Self {
        x
    }
    fn to64(self) -> f64 {
        self
    }
    fn write_le_bytes(data: &[Self], out: &mut Vec<u8>) {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn read_le_bytes(bytes: &[u8]) -> Result<Vec<Self>> {
        if bytes.len() % 8 != 0 {
            return Err(Error::Checkpoint("payload not a multiple of 8 bytes".into()));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect())
    }
}

/// Dense row-major 2-D tensor. Scalars are `[1, 1]`, row vectors `[1, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub shape: [usize; 2],
    pub data: Vec<S>,
    /// Gradient of the last backward pass, populated for parameters.
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { shape: [rows, cols], data: vec![S::zero(); rows * cols], grad: None }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Tensor { shape: [rows, cols], data, grad: None })
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::from_vec(rows, cols, data.iter().map(|&x| S::fl(x)).collect())
    }

    pub fn scalar(x: S) -> Self {
        Tensor { shape: [1, 1], data: vec![x], grad: None }
    }

    pub fn row(data: Vec<S>) -> Self {
        Tensor { shape: [1, data.len()], data, grad: None }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.shape[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[S] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn scalar_value(&self) -> S {
        debug_assert_eq!(self.shape, [1, 1]);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to64()).collect()
    }

    /// Gaussian init with the given std.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| S::fl(std * rng.sample::<f64, _>(rand_distr::StandardNormal)))
            .collect();
        Tensor { shape: [rows, cols], data, grad: None }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Standard Gumbel(0, 1) noise: `-ln(-ln U)` with U clamped away from the
/// boundary. Deterministic per (seed, index).
pub fn gumbel_sample<S: Scalar>(rows: usize, cols: usize, seed: u64, index: u64) -> Tensor<S> {
    let mut rng = stream(seed, "gumbel", index);
    let data = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
            S::fl(-(-u.ln()).ln())
        })
        .collect();
    Tensor { shape: [rows, cols], data, grad: None }
}
