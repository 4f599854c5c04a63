use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use crate::merge::{Checkpoint, ExcludeSet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelDifferences {
    pub model: usize,
    /// Names the first checkpoint has and this one lacks.
    pub missing: Vec<String>,
    /// Names this checkpoint has and the first one lacks.
    pub extra: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Disagreement<T> {
    pub name: String,
    /// One entry per checkpoint; `None` where the name is absent.
    pub values: Vec<Option<T>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AlignmentReport {
    /// Union of all checked names, sorted.
    pub names: Vec<String>,
    /// `presence[i][j]`: whether checkpoint `j` holds `names[i]`.
    pub presence: Vec<Vec<bool>>,
    /// Key differences against the first checkpoint, one per later model
    /// that differs.
    pub differences: Vec<ModelDifferences>,
    pub shape_mismatches: Vec<Disagreement<Vec<usize>>>,
    pub dtype_mismatches: Vec<Disagreement<String>>,
    pub ok: bool,
}

fn describe(c: &Checkpoint, name: &str) -> Option<(Vec<usize>, String)> {
    if let Some(t) = c.tensor(name) {
        Some((t.shape().to_vec(), t.dtype().as_str().to_string()))
    } else {
        c.opaque().get(name).map(|o| (o.shape.clone(), o.dtype.clone()))
    }
}

fn all_equal<T: PartialEq>(values: &[Option<T>]) -> bool {
    let mut present = values.iter().flatten();
    match present.next() {
        Some(first) => present.all(|v| v == first),
        None => true,
    }
}

/// Compares every checkpoint with the first. Names matched by `exclude`
/// are ignored. `ok` holds when every name is present everywhere with one
/// shape and one dtype.
pub fn validate_alignment(ckpts: &[Checkpoint], exclude: &ExcludeSet) -> AlignmentReport {
    let names: Vec<String> = ckpts
        .iter()
        .flat_map(|c| c.names())
        .filter(|n| !exclude.matches(n))
        .map(str::to_string)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut presence: Vec<Vec<bool>> = Vec::with_capacity(names.len());
    let mut shape_mismatches = Vec::new();
    let mut dtype_mismatches = Vec::new();
    for name in &names {
        let described: Vec<_> = ckpts.iter().map(|c| describe(c, name)).collect();
        presence.push(described.iter().map(Option::is_some).collect());
        let shapes: Vec<_> = described.iter().map(|d| d.as_ref().map(|d| d.0.clone())).collect();
        let dtypes: Vec<_> = described.iter().map(|d| d.as_ref().map(|d| d.1.clone())).collect();
        if !all_equal(&shapes) {
            shape_mismatches.push(Disagreement { name: name.clone(), values: shapes });
        }
        if !all_equal(&dtypes) {
            dtype_mismatches.push(Disagreement { name: name.clone(), values: dtypes });
        }
    }

    let mut differences = Vec::new();
    for (j, _) in ckpts.iter().enumerate().skip(1) {
        let mut missing = Vec::new();
        let mut extra = Vec::new();
        for (name, row) in names.iter().zip(&presence) {
            match (row[0], row[j]) {
                (true, false) => missing.push(name.clone()),
                (false, true) => extra.push(name.clone()),
                _ => {}
            }
        }
        if !missing.is_empty() || !extra.is_empty() {
            differences.push(ModelDifferences { model: j, missing, extra });
        }
    }

    let ok = presence.iter().all(|row| row.iter().all(|&p| p))
        && shape_mismatches.is_empty()
        && dtype_mismatches.is_empty();
    AlignmentReport {
        names,
        presence,
        differences,
        shape_mismatches,
        dtype_mismatches,
        ok,
    }
}

fn show<T: fmt::Debug>(values: &[Option<T>]) -> String {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| match v {
            Some(v) => format!("model {i}: {v:?}"),
            None => format!("model {i}: absent"),
        })
        .collect::<Vec<_>>()
        .join(", ")
}

impl fmt::Display for AlignmentReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "aligned: {}", self.ok)?;
        for d in &self.differences {
            if !d.missing.is_empty() {
                writeln!(f, "model {} missing: {}", d.model, d.missing.join(", "))?;
            }
            if !d.extra.is_empty() {
                writeln!(f, "model {} extra: {}", d.model, d.extra.join(", "))?;
            }
        }
        for m in &self.shape_mismatches {
            writeln!(f, "shape mismatch {}: {}", m.name, show(&m.values))?;
        }
        for m in &self.dtype_mismatches {
            writeln!(f, "dtype mismatch {}: {}", m.name, show(&m.values))?;
        }
        Ok(())
    }
}
