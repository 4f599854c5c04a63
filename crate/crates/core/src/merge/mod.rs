//! Checkpoint-level merging strategies and inverse-norm coefficients.

mod checkpoint;
mod nan;
mod recipe;
mod strategies;
mod task_vector;

pub use checkpoint::{Checkpoint, ExcludeSet, OpaqueTensor};
pub use nan::{nan_coefficients, NanCoefficients, WeightGroup};
pub use recipe::{
    run_recipe, MergeRecipe, MergeReport, ModelReport, NanMode, NormSource, SkippedTensor, Strategy,
};
pub use strategies::{
    keep_count, matrix_coefficient_merge, task_arithmetic, ties_merge, weight_average,
    WEIGHT_SUM_TOLERANCE,
};
pub use task_vector::{extract_task_vector, TaskVector};
