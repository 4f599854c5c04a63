//! Dense row-major tensors.
//!
//! Values are held as `f64` regardless of the declared dtype. The dtype only
//! decides how a tensor is encoded on disk and the precision its values are
//! stored at: `F64` tensors keep full `f64` values, every other dtype keeps
//! values rounded to `f32` (half types are widened on read and narrowed again
//! on write).

use std::fmt;

use half::{bf16, f16};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DType {
    F16,
    BF16,
    F32,
    F64,
}

impl DType {
    pub const ALL: [DType; 4] = [DType::F16, DType::BF16, DType::F32, DType::F64];

    /// Bytes per element in the on-disk encoding.
    pub fn byte_width(self) -> usize {
        match self {
            DType::F16 | DType::BF16 => 2,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F16 => "F16",
            DType::BF16 => "BF16",
            DType::F32 => "F32",
            DType::F64 => "F64",
        }
    }

    pub fn parse(s: &str) -> Option<DType> {
        match s {
            "F16" => Some(DType::F16),
            "BF16" => Some(DType::BF16),
            "F32" => Some(DType::F32),
            "F64" => Some(DType::F64),
            _ => None,
        }
    }

    /// Precision values of this dtype are held at in memory.
    fn storage(self) -> DType {
        match self {
            DType::F64 => DType::F64,
            _ => DType::F32,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rounding `data` to the storage precision of `dtype`.
    pub fn new(shape: Vec<usize>, dtype: DType, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {numel} elements, got {}",
                data.len()
            )));
        }
        let data = round_all(data, dtype.storage(), "tensor construction")?;
        Ok(Tensor { shape, dtype, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, DType::F64, data)
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            dtype,
            data: vec![0.0; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Re-declares the dtype, rounding values to its storage precision.
    ///
    /// Unlike [`Tensor::cast`], half targets are only rounded to `f32` here;
    /// the final narrowing happens when the tensor is encoded.
    pub fn with_dtype(self, dtype: DType) -> Result<Self> {
        let data = round_all(self.data, dtype.storage(), "dtype change")?;
        Ok(Tensor {
            shape: self.shape,
            dtype,
            data,
        })
    }

    /// Converts to `target` with round-to-nearest-even. Finite values that
    /// fall outside the target's finite range are an error, never clamped.
    pub fn cast(&self, target: DType) -> Result<Tensor> {
        let data = round_all(self.data.clone(), target, "cast")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            dtype: target,
            data,
        })
    }

    /// Frobenius norm of this tensor.
    pub fn frobenius_norm(&self) -> Result<f64> {
        frobenius_norm([self])
    }
}

/// Square root of the sum of squared elements over every tensor in `group`,
/// accumulated in tensor order and then element order. An empty group, or a
/// group of empty tensors, has norm 0.
pub fn frobenius_norm<'a, I>(group: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a Tensor>,
{
    let mut sum = 0.0f64;
    for tensor in group {
        for &v in &tensor.data {
            if !v.is_finite() {
                return Err(Error::NonFiniteInput("Frobenius norm input".into()));
            }
            sum += v * v;
        }
    }
    Ok(sum.sqrt())
}

/// Weighted sum `Σ_i weights[i] · tensors[i]`, elementwise.
///
/// Accumulation is anchored on the first tensor,
/// `(Σ w) · t₀ + Σ_{i≥1} w_i · (t_i − t₀)`, summed in ascending index order.
/// With weights whose sum is exactly 1, identical inputs come back bitwise.
/// The result is `F64` when every input is `F64`, `F32` otherwise.
pub fn elementwise_combine(tensors: &[&Tensor], weights: &[f64]) -> Result<Tensor> {
    let first = *tensors
        .first()
        .ok_or_else(|| Error::EmptyInput("no tensors to combine".into()))?;
    if weights.len() != tensors.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} tensors but {} weights",
            tensors.len(),
            weights.len()
        )));
    }
    for (i, t) in tensors.iter().enumerate() {
        if t.shape != first.shape {
            return Err(Error::ShapeMismatch(format!(
                "tensor {i} has shape {:?}, tensor 0 has {:?}",
                t.shape, first.shape
            )));
        }
        if !t.is_finite() {
            return Err(Error::NonFiniteInput(format!("tensor {i}")));
        }
    }
    if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFiniteInput(format!("weight {i}")));
    }

    let total: f64 = weights.iter().sum();
    let mut out: Vec<f64> = first.data.iter().map(|&v| total * v).collect();
    for (t, &w) in tensors.iter().zip(weights).skip(1) {
        for ((acc, &v), &v0) in out.iter_mut().zip(&t.data).zip(&first.data) {
            // Skipping zero terms keeps a `-0.0` anchor intact.
            let term = w * (v - v0);
            if term != 0.0 {
                *acc += term;
            }
        }
    }

    let dtype = if tensors.iter().all(|t| t.dtype == DType::F64) {
        DType::F64
    } else {
        DType::F32
    };
    Tensor::new(first.shape.clone(), dtype, out)
}

fn round_all(mut data: Vec<f64>, target: DType, context: &str) -> Result<Vec<f64>> {
    if target == DType::F64 {
        return Ok(data);
    }
    for v in &mut data {
        *v = round_to(*v, target).ok_or_else(|| Error::OverflowOnCast {
            value: *v,
            target: target.as_str(),
            context: context.to_string(),
        })?;
    }
    Ok(data)
}

/// Rounds `v` to the nearest value of `target` (ties to even), returned as
/// `f64`. `None` when a finite `v` overflows the target.
pub(crate) fn round_to(v: f64, target: DType) -> Option<f64> {
    let rounded = match target {
        DType::F64 => v,
        DType::F32 => (v as f32) as f64,
        DType::F16 => f16::from_f32(to_f32_round_odd(v)).to_f64(),
        DType::BF16 => bf16::from_f32(to_f32_round_odd(v)).to_f64(),
    };
    if v.is_finite() && rounded.is_infinite() {
        None
    } else {
        Some(rounded)
    }
}

/// Narrows to `f32` using round-to-odd. With 24 bits against the 11 of f16
/// and 8 of bf16, a second nearest-even rounding from this intermediate
/// equals a single direct rounding from `f64`.
pub(crate) fn to_f32_round_odd(v: f64) -> f32 {
    let y = v as f32;
    if !y.is_finite() || y as f64 == v {
        return y;
    }
    let bits = y.to_bits();
    if bits & 1 == 1 {
        return y;
    }
    // Step one ulp towards v; sign-magnitude encoding means "away from zero"
    // is +1 for either sign.
    let towards_zero = (y as f64).abs() > v.abs();
    if towards_zero {
        f32::from_bits(bits - 1)
    } else {
        f32::from_bits(bits + 1)
    }
}
