//! Reading and writing checkpoints, recipe files, and alignment checks.

mod alignment;
mod recipe_file;
mod safetensors;

pub use alignment::{validate_alignment, AlignmentReport, Disagreement, ModelDifferences};
pub use recipe_file::{parse_recipe, parse_recipe_str, RecipeDocument};
pub use safetensors::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, DtypePolicy,
};
