#![allow(dead_code)]

use normmerge::merge::Checkpoint;
use normmerge::{DType, Tensor};
use proptest::prelude::*;

/// Gauss-Jordan inverse with partial pivoting, row-major `n × n`.
pub fn explicit_inverse(a: &[f64], n: usize) -> Vec<f64> {
    let w = 2 * n;
    let mut aug = vec![0.0; n * w];
    for r in 0..n {
        aug[r * w..r * w + n].copy_from_slice(&a[r * n..(r + 1) * n]);
        aug[r * w + n + r] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| aug[i * w + col].abs().total_cmp(&aug[j * w + col].abs()))
            .unwrap();
        for k in 0..w {
            aug.swap(col * w + k, pivot * w + k);
        }
        let p = aug[col * w + col];
        for k in 0..w {
            aug[col * w + k] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = aug[r * w + col];
                for k in 0..w {
                    aug[r * w + k] -= f * aug[col * w + k];
                }
            }
        }
    }
    let mut inv = vec![0.0; n * n];
    for r in 0..n {
        inv[r * n..(r + 1) * n].copy_from_slice(&aug[r * w + n..(r + 1) * w]);
    }
    inv
}

pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|t| a[i * k + t] * b[t * m + j]).sum();
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn dtype() -> impl Strategy<Value = DType> {
    prop::sample::select(DType::ALL.to_vec())
}

fn shape() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..4, 0..4)
}

/// A tensor whose values are exactly representable in its dtype.
pub fn tensor_of(dtype: DType, shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let numel: usize = shape.iter().product();
    prop::collection::vec(-1e3f64..1e3, numel).prop_map(move |values| {
        Tensor::from_f64(shape.clone(), values)
            .unwrap()
            .cast(dtype)
            .unwrap()
    })
}

pub fn tensor() -> impl Strategy<Value = Tensor> {
    (dtype(), shape()).prop_flat_map(|(d, s)| tensor_of(d, s))
}

pub fn checkpoint() -> impl Strategy<Value = Checkpoint> {
    (
        prop::collection::btree_map("[a-z][a-z0-9_.]{0,12}", tensor(), 0..6),
        prop::collection::btree_map("[a-z_]{1,8}", "[ -~]{0,16}", 0..3),
    )
        .prop_map(|(tensors, metadata)| {
            let mut c = Checkpoint::new();
            for (name, t) in tensors {
                c.insert(name, t).unwrap();
            }
            *c.metadata_mut() = metadata;
            c
        })
}

/// `count` checkpoints sharing names and shapes, all `F64`, with values in
/// `[-range, range]`.
pub fn aligned_family(count: usize, range: f64) -> impl Strategy<Value = Vec<Checkpoint>> {
    prop::collection::btree_map("[a-z]{1,6}", prop::collection::vec(1usize..4, 1..3), 1..4).prop_flat_map(
        move |layout| {
            let layout: Vec<(String, Vec<usize>)> = layout.into_iter().collect();
            let total: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
            prop::collection::vec(prop::collection::vec(-range..range, total), count).prop_map(move |models| {
                models
                    .into_iter()
                    .map(|flat| {
                        let mut c = Checkpoint::new();
                        let mut offset = 0;
                        for (name, shape) in &layout {
                            let n: usize = shape.iter().product();
                            let t = Tensor::from_f64(shape.clone(), flat[offset..offset + n].to_vec()).unwrap();
                            c.insert(name.clone(), t).unwrap();
                            offset += n;
                        }
                        c
                    })
                    .collect()
            })
        },
    )
}
