use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use super::checkpoint::{Checkpoint, ExcludeSet};
use super::task_vector::{compare_keys, TaskVector};
use crate::error::{Error, Result};
use crate::lsq::{matrix_coefficients_from_grams, merge_solutions, LsqSolution, Matrix};
use crate::tensor::{elementwise_combine, Tensor};

/// Allowed deviation of user-supplied averaging weights from a unit sum.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Checks that every model has the same mergeable names and shapes as the
/// first one.
pub(crate) fn check_aligned(models: &[Checkpoint], exclude: &ExcludeSet) -> Result<()> {
    let first = models
        .first()
        .ok_or_else(|| Error::EmptyInput("no models to merge".into()))?;
    for (i, model) in models.iter().enumerate().skip(1) {
        compare_keys(
            first.mergeable(exclude).map(|(n, _)| n),
            model.mergeable(exclude).map(|(n, _)| n),
        )?;
        for (name, t) in first.mergeable(exclude) {
            let other = &model.tensors()[name];
            if other.shape() != t.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: model 0 has {:?}, model {i} has {:?}",
                    t.shape(),
                    other.shape()
                )));
            }
        }
    }
    Ok(())
}

/// Copies the tensors that are never merged (excluded float tensors and
/// every opaque tensor) from `source`.
fn copy_passthrough(source: &Checkpoint, keep: impl Fn(&str) -> bool, out: &mut Checkpoint) -> Result<()> {
    for (name, t) in source.tensors() {
        if keep(name) {
            out.insert(name.clone(), t.clone())?;
        }
    }
    for (name, o) in source.opaque() {
        out.insert_opaque(name.clone(), o.clone())?;
    }
    Ok(())
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFiniteInput(format!("{what} {i}"))),
        None => Ok(()),
    }
}

fn format_list(values: &[f64]) -> String {
    serde_json::to_string(values).unwrap_or_default()
}

/// Elementwise weighted average. `None` means uniform `1/m`.
pub fn weight_average(
    models: &[Checkpoint],
    weights: Option<&[f64]>,
    exclude: &ExcludeSet,
) -> Result<Checkpoint> {
    check_aligned(models, exclude)?;
    let m = models.len();
    let weights = match weights {
        Some(w) => {
            if w.len() != m {
                return Err(Error::BadWeights(format!("{} weights for {m} models", w.len())));
            }
            check_finite(w, "weight")?;
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                return Err(Error::BadWeights(format!("weights sum to {sum}, not 1")));
            }
            w.to_vec()
        }
        None => vec![1.0 / m as f64; m],
    };

    let first = &models[0];
    let mut out = Checkpoint::new();
    for (name, t) in first.mergeable(exclude) {
        let inputs: Vec<&Tensor> = models.iter().map(|c| &c.tensors()[name]).collect();
        let merged = elementwise_combine(&inputs, &weights)?.with_dtype(t.dtype())?;
        out.insert(name.clone(), merged)?;
    }
    copy_passthrough(first, |n| exclude.matches(n), &mut out)?;
    out.metadata_mut().insert("merge.strategy".into(), "average".into());
    out.metadata_mut().insert("merge.weights".into(), format_list(&weights));
    Ok(out)
}

/// Validates task vectors against `base` and returns the merged names.
fn check_taus(base: &Checkpoint, taus: &[TaskVector], coefficients: &[f64]) -> Result<Vec<String>> {
    if taus.len() != coefficients.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} task vectors but {} coefficients",
            taus.len(),
            coefficients.len()
        )));
    }
    check_finite(coefficients, "coefficient")?;
    let expected = base.fingerprint();
    let Some(first) = taus.first() else {
        return Err(Error::EmptyInput("no task vectors".into()));
    };
    for tau in taus {
        if tau.base_fingerprint() != expected {
            return Err(Error::BaseMismatch {
                expected,
                found: tau.base_fingerprint(),
            });
        }
        compare_keys(first.entries().keys(), tau.entries().keys())?;
    }
    Ok(first.entries().keys().cloned().collect())
}

/// Builds the output from per-name deltas: `base + delta`, with the base
/// value kept as is wherever the delta is exactly zero.
fn apply_deltas(
    base: &Checkpoint,
    deltas: BTreeMap<String, Vec<f64>>,
    strategy: &str,
    coefficients: &[f64],
) -> Result<Checkpoint> {
    let mut out = Checkpoint::new();
    for (name, delta) in &deltas {
        let b = base
            .tensor(name)
            .ok_or_else(|| Error::KeyMismatch { missing: vec![], extra: vec![name.clone()] })?;
        let data = b
            .data()
            .iter()
            .zip(delta)
            .map(|(&v, &d)| if d == 0.0 { v } else { v + d })
            .collect();
        out.insert(name.clone(), Tensor::new(b.shape().to_vec(), b.dtype(), data)?)?;
    }
    copy_passthrough(base, |n| !deltas.contains_key(n), &mut out)?;
    out.metadata_mut().insert("merge.strategy".into(), strategy.into());
    out.metadata_mut().insert("merge.coefficients".into(), format_list(coefficients));
    Ok(out)
}

/// `base + Σ_i coefficients[i] · taus[i]`.
pub fn task_arithmetic(
    base: &Checkpoint,
    taus: &[TaskVector],
    coefficients: &[f64],
) -> Result<Checkpoint> {
    let names = check_taus(base, taus, coefficients)?;
    let mut deltas = BTreeMap::new();
    for name in names {
        let mut delta = vec![0.0; taus[0].entries()[&name].numel()];
        for (tau, &c) in taus.iter().zip(coefficients) {
            for (acc, &v) in delta.iter_mut().zip(tau.entries()[&name].data()) {
                *acc += c * v;
            }
        }
        deltas.insert(name, delta);
    }
    apply_deltas(base, deltas, "task_arithmetic", coefficients)
}

/// Number of entries kept when keeping `fraction` of `count`. A product
/// that lands within rounding noise of an integer is not pushed up to the
/// next one.
pub fn keep_count(fraction: f64, count: usize) -> usize {
    let raw = fraction * count as f64;
    let nearest = raw.round();
    let k = if (raw - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        raw.ceil()
    };
    (k as usize).min(count)
}

/// Zeroes all but the `keep` largest-magnitude entries. Equal magnitudes
/// are ranked by position, earlier first.
fn trim_flat(values: &mut [f64], keep: usize) {
    if keep >= values.len() {
        return;
    }
    let rank = |a: &usize, b: &usize| -> Ordering {
        values[*b]
            .abs()
            .total_cmp(&values[*a].abs())
            .then(a.cmp(b))
    };
    let mut order: Vec<usize> = (0..values.len()).collect();
    let mut kept = vec![false; values.len()];
    if keep > 0 {
        order.select_nth_unstable_by(keep - 1, rank);
        for &i in &order[..keep] {
            kept[i] = true;
        }
    }
    for (v, k) in values.iter_mut().zip(kept) {
        if !k {
            *v = 0.0;
        }
    }
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// TIES merging: per-model magnitude trimming over all merged tensors,
/// coefficient-weighted sign election, and a coefficient-weighted mean over
/// the entries that agree with the elected sign.
pub fn ties_merge(
    base: &Checkpoint,
    taus: &[TaskVector],
    trim_fraction: f64,
    coefficients: &[f64],
) -> Result<Checkpoint> {
    if !(trim_fraction > 0.0 && trim_fraction <= 1.0) {
        return Err(Error::BadTrim(trim_fraction));
    }
    let names = check_taus(base, taus, coefficients)?;

    // Each task vector flattened in name order, then trimmed as one block.
    let trimmed: Vec<Vec<f64>> = taus
        .iter()
        .map(|tau| {
            let mut flat: Vec<f64> = names
                .iter()
                .flat_map(|n| tau.entries()[n].data().iter().copied())
                .collect();
            let keep = keep_count(trim_fraction, flat.len());
            trim_flat(&mut flat, keep);
            flat
        })
        .collect();

    let mut deltas = BTreeMap::new();
    let mut offset = 0;
    for name in names {
        let len = taus[0].entries()[&name].numel();
        let mut delta = vec![0.0; len];
        for (j, out) in delta.iter_mut().enumerate() {
            let p = offset + j;
            let elected = sign(
                trimmed
                    .iter()
                    .zip(coefficients)
                    .map(|(t, &c)| c * t[p])
                    .sum::<f64>(),
            );
            if elected == 0 {
                continue;
            }
            let (mut num, mut den) = (0.0, 0.0);
            for (t, &c) in trimmed.iter().zip(coefficients) {
                let contribution = c * t[p];
                if sign(contribution) == elected {
                    num += contribution;
                    den += c;
                }
            }
            if den != 0.0 {
                *out = num / den;
            }
        }
        offset += len;
        deltas.insert(name, delta);
    }
    let mut out = apply_deltas(base, deltas, "ties", coefficients)?;
    out.metadata_mut()
        .insert("merge.trim_fraction".into(), format_list(&[trim_fraction]));
    Ok(out)
}

/// Merges covered 2-D tensors `[d, k]` with the matrix coefficients built
/// from one `d × d` Gram matrix per model, `W = Σ Ω_i W_i`. Tensors without
/// Gram matrices are averaged with `fallback_weights` (uniform if `None`).
pub fn matrix_coefficient_merge(
    models: &[Checkpoint],
    grams: &BTreeMap<String, Vec<Matrix>>,
    ridge: f64,
    fallback_weights: Option<&[f64]>,
    exclude: &ExcludeSet,
) -> Result<Checkpoint> {
    check_aligned(models, exclude)?;
    let first = &models[0];
    let mergeable: BTreeSet<&String> = first.mergeable(exclude).map(|(n, _)| n).collect();
    if let Some((name, o)) = grams.keys().find_map(|n| first.opaque().get_key_value(n)) {
        return Err(Error::UnsupportedDType {
            name: name.clone(),
            dtype: o.dtype.clone(),
        });
    }
    let unknown: Vec<String> = grams
        .keys()
        .filter(|n| !mergeable.contains(n))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(Error::KeyMismatch { missing: vec![], extra: unknown });
    }

    let mut out = weight_average(models, fallback_weights, exclude)?;
    for (name, list) in grams {
        let t = &first.tensors()[name];
        let &[d, k] = t.shape() else {
            return Err(Error::GramShapeMismatch(format!(
                "{name} has shape {:?}; Gram merging needs a 2-D tensor",
                t.shape()
            )));
        };
        if list.len() != models.len() {
            return Err(Error::GramShapeMismatch(format!(
                "{name}: {} Gram matrices for {} models",
                list.len(),
                models.len()
            )));
        }
        if let Some((i, g)) = list.iter().enumerate().find(|(_, g)| g.shape() != (d, d)) {
            return Err(Error::GramShapeMismatch(format!(
                "{name}: Gram {i} is {}x{}, expected {d}x{d}",
                g.rows(),
                g.cols()
            )));
        }
        let refs: Vec<&Matrix> = list.iter().collect();
        let coeffs = matrix_coefficients_from_grams(&refs, ridge)?;
        let solutions = models
            .iter()
            .map(|c| {
                Ok(LsqSolution {
                    w: Matrix::new(d, k, c.tensors()[name].data().to_vec())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let merged = merge_solutions(&solutions, &coeffs)?;
        let tensor = Tensor::new(vec![d, k], t.dtype(), merged.w.into_vec())?;
        out.replace(name, tensor)?;
    }
    out.metadata_mut()
        .insert("merge.strategy".into(), "matrix_coefficient".into());
    out.metadata_mut().insert(
        "merge.gram_tensors".into(),
        serde_json::to_string(&grams.keys().collect::<Vec<_>>()).unwrap_or_default(),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::task_vector::extract_task_vector;
    use crate::tensor::DType;

    fn ckpt(entries: &[(&str, Vec<f64>)]) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (name, data) in entries {
            c.insert(*name, Tensor::from_f64(vec![data.len()], data.clone()).unwrap())
                .unwrap();
        }
        c
    }

    fn none() -> ExcludeSet {
        ExcludeSet::empty()
    }

    #[test]
    fn average_examples() {
        let a = ckpt(&[("w", vec![2.0, -1.0])]);
        let b = ckpt(&[("w", vec![6.0, 3.0])]);
        let avg = weight_average(&[a.clone(), b.clone()], None, &none()).unwrap();
        assert_eq!(avg.tensor("w").unwrap().data(), &[4.0, 1.0]);
        let sel = weight_average(&[a.clone(), b], Some(&[1.0, 0.0]), &none()).unwrap();
        assert_eq!(sel.tensor("w").unwrap().data(), a.tensor("w").unwrap().data());
        let same = weight_average(&[a.clone(), a.clone()], None, &none()).unwrap();
        assert!(same.tensor("w").unwrap() == a.tensor("w").unwrap());
        assert_eq!(same.metadata()["merge.strategy"], "average");
    }

    #[test]
    fn average_rejects_bad_weights() {
        let a = ckpt(&[("w", vec![1.0])]);
        let r = weight_average(&[a.clone(), a.clone()], Some(&[0.5, 0.6]), &none());
        assert!(matches!(r, Err(Error::BadWeights(_))));
        let r = weight_average(&[a.clone(), a], Some(&[1.0]), &none());
        assert!(matches!(r, Err(Error::BadWeights(_))));
    }

    #[test]
    fn average_keeps_first_dtype_and_copies_excluded() {
        let mut a = Checkpoint::new();
        a.insert("w", Tensor::new(vec![1], DType::F16, vec![1.0]).unwrap()).unwrap();
        a.insert("head", Tensor::from_f64(vec![1], vec![7.0]).unwrap()).unwrap();
        let mut b = Checkpoint::new();
        b.insert("w", Tensor::from_f64(vec![1], vec![3.0]).unwrap()).unwrap();
        b.insert("head", Tensor::from_f64(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
        let ex = ExcludeSet::new(&["head"]).unwrap();
        let out = weight_average(&[a, b], None, &ex).unwrap();
        assert_eq!(out.tensor("w").unwrap().dtype(), DType::F16);
        assert_eq!(out.tensor("w").unwrap().data(), &[2.0]);
        assert_eq!(out.tensor("head").unwrap().data(), &[7.0]);
    }

    #[test]
    fn task_arithmetic_examples() {
        let base = ckpt(&[("k", vec![0.0])]);
        let t1 = extract_task_vector(&base, &ckpt(&[("k", vec![1.0])]), &none()).unwrap();
        let t2 = extract_task_vector(&base, &ckpt(&[("k", vec![3.0])]), &none()).unwrap();
        let out = task_arithmetic(&base, &[t1.clone(), t2.clone()], &[0.5, 0.5]).unwrap();
        assert_eq!(out.tensor("k").unwrap().data(), &[2.0]);
        let zero = task_arithmetic(&base, &[t1, t2], &[0.0, 0.0]).unwrap();
        assert!(zero.tensor("k").unwrap() == base.tensor("k").unwrap());
    }

    #[test]
    fn zero_coefficients_keep_negative_zero() {
        let base = ckpt(&[("k", vec![-0.0, 1.0])]);
        let ft = ckpt(&[("k", vec![5.0, 2.0])]);
        let tau = extract_task_vector(&base, &ft, &none()).unwrap();
        let out = task_arithmetic(&base, &[tau], &[0.0]).unwrap();
        let mut expected = base.clone();
        expected.metadata_mut().extend(out.metadata().clone());
        assert!(out.bitwise_eq(&expected));
    }

    #[test]
    fn task_arithmetic_checks_base() {
        let base = ckpt(&[("k", vec![0.0])]);
        let other = ckpt(&[("k", vec![1.0])]);
        let tau = extract_task_vector(&other, &base, &none()).unwrap();
        assert!(matches!(
            task_arithmetic(&base, std::slice::from_ref(&tau), &[1.0]),
            Err(Error::BaseMismatch { .. })
        ));
        assert!(matches!(
            task_arithmetic(&other, &[tau], &[1.0, 1.0]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn keep_counts() {
        assert_eq!(keep_count(0.2, 10), 2);
        assert_eq!(keep_count(0.2, 11), 3);
        assert_eq!(keep_count(1.0, 7), 7);
        assert_eq!(keep_count(0.1, 30), 3);
        assert_eq!(keep_count(1e-9, 5), 1);
        assert_eq!(keep_count(0.5, 0), 0);
    }

    #[test]
    fn trimming_ties_prefer_earlier_positions() {
        let mut v = vec![1.0, -3.0, 2.0, -2.0, 0.5];
        trim_flat(&mut v, 2);
        assert_eq!(v, vec![0.0, -3.0, 2.0, 0.0, 0.0]);
        let mut v = vec![1.0; 4];
        trim_flat(&mut v, 1);
        assert_eq!(v, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn ties_examples() {
        let base = ckpt(&[("k", vec![0.0, 0.0])]);
        let t1 = extract_task_vector(&base, &ckpt(&[("k", vec![2.0, 1.0])]), &none()).unwrap();
        let t2 = extract_task_vector(&base, &ckpt(&[("k", vec![4.0, -1.0])]), &none()).unwrap();
        let out = ties_merge(&base, &[t1, t2], 1.0, &[1.0, 1.0]).unwrap();
        assert_eq!(out.tensor("k").unwrap().data(), &[3.0, 0.0]);
    }

    #[test]
    fn ties_single_model_reconstructs() {
        let base = ckpt(&[("a", vec![1.0, 2.0]), ("b", vec![-1.0])]);
        let ft = ckpt(&[("a", vec![1.5, -2.0]), ("b", vec![0.25])]);
        let tau = extract_task_vector(&base, &ft, &none()).unwrap();
        let out = ties_merge(&base, &[tau], 1.0, &[1.0]).unwrap();
        for (name, t) in ft.tensors() {
            assert_eq!(out.tensor(name).unwrap().data(), t.data());
        }
    }

    #[test]
    fn ties_trims_per_model_across_tensors() {
        let base = ckpt(&[("a", vec![0.0, 0.0]), ("b", vec![0.0, 0.0])]);
        let ft = ckpt(&[("a", vec![0.1, 5.0]), ("b", vec![-4.0, 0.2])]);
        let tau = extract_task_vector(&base, &ft, &none()).unwrap();
        let out = ties_merge(&base, &[tau], 0.5, &[1.0]).unwrap();
        assert_eq!(out.tensor("a").unwrap().data(), &[0.0, 5.0]);
        assert_eq!(out.tensor("b").unwrap().data(), &[-4.0, 0.0]);
        let base2 = base.clone();
        let tau = extract_task_vector(&base2, &ft, &none()).unwrap();
        assert!(matches!(ties_merge(&base2, std::slice::from_ref(&tau), 0.0, &[1.0]), Err(Error::BadTrim(_))));
        assert!(matches!(ties_merge(&base2, &[tau], 1.5, &[1.0]), Err(Error::BadTrim(_))));
    }

    #[test]
    fn gram_merge_examples() {
        let a = Checkpoint::new()
            .with("w", Tensor::from_f64(vec![2, 1], vec![3.0, 6.0]).unwrap())
            .unwrap()
            .with("bias", Tensor::from_f64(vec![1], vec![1.0]).unwrap())
            .unwrap();
        let b = Checkpoint::new()
            .with("w", Tensor::from_f64(vec![2, 1], vec![0.0, -3.0]).unwrap())
            .unwrap()
            .with("bias", Tensor::from_f64(vec![1], vec![3.0]).unwrap())
            .unwrap();
        let models = [a, b];
        let mut grams = BTreeMap::new();
        grams.insert(
            "w".to_string(),
            vec![Matrix::scaled_identity(2, 2.0), Matrix::identity(2)],
        );
        let out = matrix_coefficient_merge(&models, &grams, 0.0, None, &none()).unwrap();
        let w = out.tensor("w").unwrap().data();
        assert!((w[0] - 2.0).abs() < 1e-12 && (w[1] - 3.0).abs() < 1e-12);
        assert_eq!(out.tensor("bias").unwrap().data(), &[2.0]);

        let plain = matrix_coefficient_merge(&models, &BTreeMap::new(), 0.0, None, &none()).unwrap();
        let avg = weight_average(&models, None, &none()).unwrap();
        assert_eq!(plain.tensors(), avg.tensors());

        let mut bad = BTreeMap::new();
        bad.insert("bias".to_string(), vec![Matrix::identity(1), Matrix::identity(1)]);
        assert!(matches!(
            matrix_coefficient_merge(&models, &bad, 0.0, None, &none()),
            Err(Error::GramShapeMismatch(_))
        ));
        let mut unknown = BTreeMap::new();
        unknown.insert("nope".to_string(), vec![]);
        assert!(matches!(
            matrix_coefficient_merge(&models, &unknown, 0.0, None, &none()),
            Err(Error::KeyMismatch { .. })
        ));
    }
}
