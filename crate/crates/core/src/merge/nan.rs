//! Inverse-norm merge coefficients.
//!
//! Under isotropic inputs the least-squares optimal merge weights each model
//! by its sample count, and the spread of a model's weights shrinks as that
//! count grows. The Frobenius norm of the weights (or of the task vector)
//! stands in for that spread, giving
//!
//! ```text
//! α_i = (1 / ‖W_i‖_F) / Σ_j (1 / ‖W_j‖_F)
//! ```
//!
//! With many models every `α_i` is small, so strategies that add scaled
//! deltas to a base may multiply them by the global factor `m / 2`.

use serde::Serialize;

use super::checkpoint::{Checkpoint, ExcludeSet};
use super::task_vector::TaskVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NanCoefficients {
    pub norms: Vec<f64>,
    pub alphas: Vec<f64>,
    pub scale: f64,
}

impl NanCoefficients {
    pub fn from_norms(norms: Vec<f64>, apply_global_scale: bool) -> Result<Self> {
        if norms.is_empty() {
            return Err(Error::EmptyInput("no models to weight".into()));
        }
        for (index, &n) in norms.iter().enumerate() {
            if !n.is_finite() {
                return Err(Error::NonFiniteInput(format!("norm of model {index}")));
            }
            if n <= 0.0 {
                return Err(Error::ZeroNormModel { index });
            }
        }
        let inverse: Vec<f64> = norms.iter().map(|n| 1.0 / n).collect();
        let total: f64 = inverse.iter().sum();
        let alphas = inverse.iter().map(|v| v / total).collect();
        let scale = if apply_global_scale {
            norms.len() as f64 / 2.0
        } else {
            1.0
        };
        Ok(NanCoefficients {
            norms,
            alphas,
            scale,
        })
    }

    /// `scale · α_i` for every model.
    pub fn effective(&self) -> Vec<f64> {
        self.alphas.iter().map(|a| self.scale * a).collect()
    }
}

/// Anything whose merge-relevant tensors have a single Frobenius norm.
pub trait WeightGroup {
    fn group_norm(&self) -> Result<f64>;
}

impl WeightGroup for TaskVector {
    fn group_norm(&self) -> Result<f64> {
        self.norm()
    }
}

/// All float tensors; opaque tensors never count.
impl WeightGroup for Checkpoint {
    fn group_norm(&self) -> Result<f64> {
        self.mergeable_norm(&ExcludeSet::empty())
    }
}

impl<T: WeightGroup + ?Sized> WeightGroup for &T {
    fn group_norm(&self) -> Result<f64> {
        (**self).group_norm()
    }
}

pub fn nan_coefficients<G: WeightGroup>(
    models: &[G],
    apply_global_scale: bool,
) -> Result<NanCoefficients> {
    let norms = models
        .iter()
        .map(WeightGroup::group_norm)
        .collect::<Result<Vec<_>>>()?;
    NanCoefficients::from_norms(norms, apply_global_scale)
}
