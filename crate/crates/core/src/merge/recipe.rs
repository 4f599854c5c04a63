use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, ExcludeSet};
use super::nan::NanCoefficients;
use super::strategies::{matrix_coefficient_merge, task_arithmetic, ties_merge, weight_average};
use super::task_vector::{extract_task_vector, TaskVector};
use crate::error::{Error, Result};
use crate::lsq::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Average,
    TaskArithmetic,
    Ties,
    MatrixCoefficient,
}

impl Strategy {
    pub fn needs_base(self) -> bool {
        matches!(self, Strategy::TaskArithmetic | Strategy::Ties)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Average => "average",
            Strategy::TaskArithmetic => "task_arithmetic",
            Strategy::Ties => "ties",
            Strategy::MatrixCoefficient => "matrix_coefficient",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NanMode {
    #[default]
    Off,
    /// Inverse-norm coefficients take the place of the strategy's own.
    ReplaceCoefficients,
    /// Inverse-norm coefficients reweight the `λ`-scaled task vectors.
    PostReweight,
}

impl NanMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NanMode::Off => "off",
            NanMode::ReplaceCoefficients => "replace_coefficients",
            NanMode::PostReweight => "post_reweight",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormSource {
    TaskVectors,
    FullWeights,
}

impl NormSource {
    /// Task vectors when a base is available, full weights otherwise.
    pub fn default_for(has_base: bool) -> Self {
        if has_base {
            NormSource::TaskVectors
        } else {
            NormSource::FullWeights
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NormSource::TaskVectors => "task_vectors",
            NormSource::FullWeights => "full_weights",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecipe {
    pub strategy: Strategy,
    pub lambda: f64,
    pub trim_fraction: f64,
    pub nan_mode: NanMode,
    pub norm_source: NormSource,
    pub apply_global_scale: bool,
    pub exclude_patterns: Vec<String>,
    /// Diagonal regularizer for matrix-coefficient merging.
    pub ridge: f64,
}

impl MergeRecipe {
    pub fn new(strategy: Strategy, has_base: bool) -> Self {
        MergeRecipe {
            strategy,
            lambda: 1.0,
            trim_fraction: 0.2,
            nan_mode: NanMode::Off,
            norm_source: NormSource::default_for(has_base),
            apply_global_scale: true,
            exclude_patterns: Vec::new(),
            ridge: 0.0,
        }
    }

    /// Field checks that do not depend on the inputs.
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() {
            return Err(Error::RecipeInvalid(format!("lambda must be finite, got {}", self.lambda)));
        }
        if !(self.trim_fraction > 0.0 && self.trim_fraction <= 1.0) {
            return Err(Error::RecipeInvalid(format!(
                "trim_fraction must be in (0, 1], got {}",
                self.trim_fraction
            )));
        }
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return Err(Error::RecipeInvalid(format!(
                "ridge must be finite and non-negative, got {}",
                self.ridge
            )));
        }
        ExcludeSet::new(&self.exclude_patterns)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelReport {
    pub model_id: String,
    pub norm: f64,
    /// Present only when inverse-norm coefficients were used.
    pub alpha: Option<f64>,
    pub effective_coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedTensor {
    pub name: String,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeReport {
    pub strategy: Strategy,
    pub lambda: f64,
    pub trim_fraction: f64,
    pub nan_mode: NanMode,
    pub norm_source: NormSource,
    pub apply_global_scale: bool,
    /// Global factor actually applied to the alphas.
    pub scale: f64,
    pub models: Vec<ModelReport>,
    pub excluded_keys: Vec<String>,
    pub skipped_dtypes: Vec<SkippedTensor>,
}

impl MergeReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Renames the models, in order, e.g. to their file paths.
    pub fn label_models<S: Into<String>>(&mut self, ids: impl IntoIterator<Item = S>) {
        for (m, id) in self.models.iter_mut().zip(ids) {
            m.model_id = id.into();
        }
    }
}

impl fmt::Display for MergeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "strategy={} lambda={} trim_fraction={} nan_mode={} norm_source={} scale={}",
            self.strategy.as_str(),
            self.lambda,
            self.trim_fraction,
            self.nan_mode.as_str(),
            self.norm_source.as_str(),
            self.scale
        )?;
        let width = self.models.iter().map(|m| m.model_id.len()).max().unwrap_or(0).max(5);
        writeln!(f, "{:<width$}  {:>22}  {:>22}  {:>22}", "model", "norm", "alpha", "coefficient")?;
        for m in &self.models {
            let alpha = m.alpha.map_or_else(|| "-".to_string(), |a| format!("{a:.16e}"));
            writeln!(
                f,
                "{:<width$}  {:>22.16e}  {:>22}  {:>22.16e}",
                m.model_id, m.norm, alpha, m.effective_coefficient
            )?;
        }
        if !self.excluded_keys.is_empty() {
            writeln!(f, "excluded: {}", self.excluded_keys.join(", "))?;
        }
        for s in &self.skipped_dtypes {
            writeln!(f, "skipped: {} ({})", s.name, s.dtype)?;
        }
        Ok(())
    }
}

/// Runs a recipe end to end. `grams` is only read by the matrix-coefficient
/// strategy.
pub fn run_recipe(
    recipe: &MergeRecipe,
    base: Option<&Checkpoint>,
    models: &[Checkpoint],
    grams: &BTreeMap<String, Vec<Matrix>>,
) -> Result<(Checkpoint, MergeReport)> {
    recipe.validate()?;
    if models.is_empty() {
        return Err(Error::EmptyInput("no models to merge".into()));
    }
    if recipe.strategy.needs_base() && base.is_none() {
        return Err(Error::RecipeInvalid(format!(
            "strategy {} needs a base checkpoint",
            recipe.strategy.as_str()
        )));
    }
    if recipe.norm_source == NormSource::TaskVectors && base.is_none() {
        return Err(Error::RecipeInvalid(
            "norm_source task_vectors needs a base checkpoint".into(),
        ));
    }
    let exclude = ExcludeSet::new(&recipe.exclude_patterns)?;
    let m = models.len();

    let taus: Option<Vec<TaskVector>> = match base {
        Some(b) if recipe.strategy.needs_base() || recipe.norm_source == NormSource::TaskVectors => {
            Some(
                models
                    .iter()
                    .map(|ft| extract_task_vector(b, ft, &exclude))
                    .collect::<Result<_>>()?,
            )
        }
        _ => None,
    };

    let norms: Vec<f64> = match (recipe.norm_source, &taus) {
        (NormSource::TaskVectors, Some(taus)) => taus.iter().map(TaskVector::norm).collect(),
        _ => models.iter().map(|c| c.mergeable_norm(&exclude)).collect::<Result<_>>(),
    }?;

    let delta_space = recipe.strategy.needs_base();
    let nan = match recipe.nan_mode {
        NanMode::Off => None,
        _ => Some(NanCoefficients::from_norms(
            norms.clone(),
            recipe.apply_global_scale && delta_space,
        )?),
    };
    let scale = nan.as_ref().map_or(1.0, |n| n.scale);
    let lambda = recipe.lambda;

    let (merged, effective) = match recipe.strategy {
        Strategy::Average | Strategy::MatrixCoefficient => {
            let weights = nan.as_ref().map(|n| n.alphas.clone());
            let merged = if recipe.strategy == Strategy::Average {
                weight_average(models, weights.as_deref(), &exclude)?
            } else {
                matrix_coefficient_merge(models, grams, recipe.ridge, weights.as_deref(), &exclude)?
            };
            (merged, weights.unwrap_or_else(|| vec![1.0 / m as f64; m]))
        }
        Strategy::TaskArithmetic | Strategy::Ties => {
            let base = base.expect("checked above");
            let taus = taus.expect("built for delta strategies");
            // Off: λ per model. Replace: scale·α instead of λ. Post: scale·α
            // applied to the already λ-scaled task vectors.
            let (taus, coefficients, effective) = match (&nan, recipe.strategy) {
                (None, Strategy::TaskArithmetic) => (taus, vec![lambda; m], vec![lambda; m]),
                // Uniform weights cancel in the TIES mean, so λ goes on the
                // task vectors instead.
                (None, _) => (scale_all(&taus, lambda)?, vec![1.0; m], vec![lambda; m]),
                (Some(n), _) if recipe.nan_mode == NanMode::ReplaceCoefficients => {
                    (taus, n.effective(), n.effective())
                }
                (Some(n), _) => {
                    let effective = n.effective().iter().map(|c| lambda * c).collect();
                    (scale_all(&taus, lambda)?, n.effective(), effective)
                }
            };
            let merged = if recipe.strategy == Strategy::Ties {
                ties_merge(base, &taus, recipe.trim_fraction, &coefficients)?
            } else {
                task_arithmetic(base, &taus, &coefficients)?
            };
            (merged, effective)
        }
    };

    let mut merged = merged;
    merged
        .metadata_mut()
        .insert("merge.nan_mode".into(), recipe.nan_mode.as_str().into());

    let mut excluded = BTreeSet::new();
    let mut skipped = BTreeMap::new();
    for c in base.into_iter().chain(models) {
        excluded.extend(c.tensors().keys().filter(|n| exclude.matches(n)).cloned());
        for (name, o) in c.opaque() {
            skipped.entry(name.clone()).or_insert_with(|| o.dtype.clone());
        }
    }

    let report = MergeReport {
        strategy: recipe.strategy,
        lambda,
        trim_fraction: recipe.trim_fraction,
        nan_mode: recipe.nan_mode,
        norm_source: recipe.norm_source,
        apply_global_scale: recipe.apply_global_scale,
        scale,
        models: norms
            .iter()
            .zip(&effective)
            .enumerate()
            .map(|(i, (&norm, &effective_coefficient))| ModelReport {
                model_id: format!("model_{i}"),
                norm,
                alpha: nan.as_ref().map(|n| n.alphas[i]),
                effective_coefficient,
            })
            .collect(),
        excluded_keys: excluded.into_iter().collect(),
        skipped_dtypes: skipped
            .into_iter()
            .map(|(name, dtype)| SkippedTensor { name, dtype })
            .collect(),
    };
    Ok((merged, report))
}

fn scale_all(taus: &[TaskVector], factor: f64) -> Result<Vec<TaskVector>> {
    taus.iter().map(|t| t.scaled(factor)).collect()
}
