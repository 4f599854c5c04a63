use std::collections::{BTreeMap, BTreeSet};

use super::checkpoint::{Checkpoint, ExcludeSet};
use crate::error::{Error, Result};
use crate::tensor::{frobenius_norm, Tensor};

/// Per-tensor difference `finetuned − base`, held in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    base_fingerprint: u64,
    entries: BTreeMap<String, Tensor>,
    excluded: Vec<String>,
}

impl TaskVector {
    /// Fingerprint of the checkpoint the deltas were taken against.
    pub fn base_fingerprint(&self) -> u64 {
        self.base_fingerprint
    }

    pub fn entries(&self) -> &BTreeMap<String, Tensor> {
        &self.entries
    }

    /// Names matched by the exclude patterns, left out of the deltas.
    pub fn excluded(&self) -> &[String] {
        &self.excluded
    }

    pub fn norm(&self) -> Result<f64> {
        frobenius_norm(self.entries.values())
    }

    /// Every delta multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<TaskVector> {
        let entries = self
            .entries
            .iter()
            .map(|(name, t)| {
                let data = t.data().iter().map(|v| v * factor).collect();
                Ok((name.clone(), Tensor::from_f64(t.shape().to_vec(), data)?))
            })
            .collect::<Result<_>>()?;
        Ok(TaskVector {
            base_fingerprint: self.base_fingerprint,
            entries,
            excluded: self.excluded.clone(),
        })
    }
}

/// Key-set comparison shared by the strategies: names in `expected` but not
/// `found` are missing, the reverse are extra.
pub(crate) fn compare_keys<'a>(
    expected: impl IntoIterator<Item = &'a String>,
    found: impl IntoIterator<Item = &'a String>,
) -> Result<()> {
    let expected: BTreeSet<&String> = expected.into_iter().collect();
    let found: BTreeSet<&String> = found.into_iter().collect();
    if expected == found {
        return Ok(());
    }
    Err(Error::KeyMismatch {
        missing: expected.difference(&found).map(|s| s.to_string()).collect(),
        extra: found.difference(&expected).map(|s| s.to_string()).collect(),
    })
}

pub fn extract_task_vector(
    base: &Checkpoint,
    finetuned: &Checkpoint,
    exclude: &ExcludeSet,
) -> Result<TaskVector> {
    compare_keys(
        base.mergeable(exclude).map(|(n, _)| n),
        finetuned.mergeable(exclude).map(|(n, _)| n),
    )?;

    let mut entries = BTreeMap::new();
    for (name, b) in base.mergeable(exclude) {
        let f = &finetuned.tensors()[name];
        if f.shape() != b.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{name}: base {:?}, finetuned {:?}",
                b.shape(),
                f.shape()
            )));
        }
        let delta = f.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        entries.insert(name.clone(), Tensor::from_f64(b.shape().to_vec(), delta)?);
    }

    let excluded: BTreeSet<String> = base
        .tensors()
        .keys()
        .chain(finetuned.tensors().keys())
        .filter(|n| exclude.matches(n))
        .cloned()
        .collect();

    Ok(TaskVector {
        base_fingerprint: base.fingerprint(),
        entries,
        excluded: excluded.into_iter().collect(),
    })
}
