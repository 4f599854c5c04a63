//! TOML recipe files.
//!
//! ```toml
//! strategy = "task_arithmetic"      # average | task_arithmetic | ties | matrix_coefficient
//! base_path = "base.safetensors"    # required for task_arithmetic and ties
//! model_paths = ["a.safetensors", "b.safetensors"]
//! output_path = "merged.safetensors"
//! lambda = 1.0
//! trim_fraction = 0.2
//! nan_mode = "off"                  # off | replace_coefficients | post_reweight
//! norm_source = "task_vectors"      # task_vectors | full_weights
//! apply_global_scale = true
//! exclude_patterns = ["classifier.*"]
//! gram_paths = []                   # one Gram file per model (matrix_coefficient)
//! ridge = 0.0
//! dtype_policy = "preserve"         # preserve | force_f32
//! ```
//!
//! Unknown keys are errors. Relative paths resolve against the directory
//! holding the recipe.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::safetensors::DtypePolicy;
use crate::error::{Error, Result};
use crate::merge::{MergeRecipe, NanMode, NormSource, Strategy};

#[derive(Debug, Clone, PartialEq)]
pub struct RecipeDocument {
    pub recipe: MergeRecipe,
    pub base_path: Option<PathBuf>,
    pub model_paths: Vec<PathBuf>,
    pub output_path: PathBuf,
    /// One Gram-matrix checkpoint per model: each holds a `d × d` tensor
    /// under the name of every 2-D tensor it covers.
    pub gram_paths: Vec<PathBuf>,
    pub dtype_policy: DtypePolicy,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecipe {
    strategy: Strategy,
    #[serde(skip_serializing_if = "Option::is_none")]
    base_path: Option<PathBuf>,
    model_paths: Vec<PathBuf>,
    output_path: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trim_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nan_mode: Option<NanMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    norm_source: Option<NormSource>,
    #[serde(skip_serializing_if = "Option::is_none")]
    apply_global_scale: Option<bool>,
    #[serde(default)]
    exclude_patterns: Vec<String>,
    #[serde(default)]
    gram_paths: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ridge: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dtype_policy: Option<DtypePolicy>,
}

/// Parses one `key=value` override. The value is read as a TOML value when
/// it parses as one, otherwise as a bare string.
fn parse_override(text: &str) -> Result<(String, toml::Value)> {
    let (key, value) = text
        .split_once('=')
        .ok_or_else(|| Error::RecipeParse(format!("override {text:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::RecipeParse(format!("override {text:?} has an empty key")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key.to_string(), parsed))
}

/// Parses recipe text. `dir` anchors relative paths; `overrides` are
/// `key=value` strings applied on top of the file.
pub fn parse_recipe_str(text: &str, dir: &Path, overrides: &[String]) -> Result<RecipeDocument> {
    let mut raw: RawRecipe =
        toml::from_str(text).map_err(|e| Error::RecipeParse(e.to_string().trim_end().to_string()))?;
    if !overrides.is_empty() {
        let mut table = toml::Table::try_from(&raw)
            .map_err(|e| Error::RecipeParse(format!("re-encoding recipe: {e}")))?;
        for text in overrides {
            let (key, value) = parse_override(text)?;
            table.insert(key, value);
        }
        raw = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::RecipeParse(format!("in overrides: {}", e.message())))?;
    }
    build(raw, dir)
}

fn build(raw: RawRecipe, dir: &Path) -> Result<RecipeDocument> {
    let has_base = raw.base_path.is_some();
    let defaults = MergeRecipe::new(raw.strategy, has_base);
    let recipe = MergeRecipe {
        strategy: raw.strategy,
        lambda: raw.lambda.unwrap_or(defaults.lambda),
        trim_fraction: raw.trim_fraction.unwrap_or(defaults.trim_fraction),
        nan_mode: raw.nan_mode.unwrap_or(defaults.nan_mode),
        norm_source: raw.norm_source.unwrap_or(defaults.norm_source),
        apply_global_scale: raw.apply_global_scale.unwrap_or(defaults.apply_global_scale),
        exclude_patterns: raw.exclude_patterns,
        ridge: raw.ridge.unwrap_or(defaults.ridge),
    };
    recipe.validate()?;

    if raw.model_paths.is_empty() {
        return Err(Error::RecipeInvalid("model_paths is empty".into()));
    }
    if recipe.strategy.needs_base() && !has_base {
        return Err(Error::RecipeInvalid(format!(
            "strategy {} requires base_path",
            recipe.strategy.as_str()
        )));
    }
    if recipe.norm_source == NormSource::TaskVectors && !has_base {
        return Err(Error::RecipeInvalid("norm_source task_vectors requires base_path".into()));
    }
    if !raw.gram_paths.is_empty() {
        if recipe.strategy != Strategy::MatrixCoefficient {
            return Err(Error::RecipeInvalid(
                "gram_paths is only used by strategy matrix_coefficient".into(),
            ));
        }
        if raw.gram_paths.len() != raw.model_paths.len() {
            return Err(Error::RecipeInvalid(format!(
                "{} gram_paths for {} model_paths",
                raw.gram_paths.len(),
                raw.model_paths.len()
            )));
        }
    }

    let resolve = |p: PathBuf| if p.is_absolute() { p } else { dir.join(p) };
    Ok(RecipeDocument {
        recipe,
        base_path: raw.base_path.map(resolve),
        model_paths: raw.model_paths.into_iter().map(resolve).collect(),
        output_path: resolve(raw.output_path),
        gram_paths: raw.gram_paths.into_iter().map(resolve).collect(),
        dtype_policy: raw.dtype_policy.unwrap_or_default(),
    })
}

pub fn parse_recipe(path: impl AsRef<Path>, overrides: &[String]) -> Result<RecipeDocument> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or_else(|| Path::new(""));
    parse_recipe_str(&text, dir, overrides).map_err(|e| match e {
        Error::RecipeParse(msg) => Error::RecipeParse(format!("{}: {msg}", path.display())),
        other => other,
    })
}
