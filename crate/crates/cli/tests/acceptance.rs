//! One PASS/FAIL line per acceptance criterion. Exits nonzero if any fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use normmerge::io::{read_checkpoint, write_checkpoint, DtypePolicy};
use normmerge::lsq::verify::relative_error;
use normmerge::lsq::{
    generate_instance, matrix_coefficients, matrix_coefficients_from_grams, merge_solutions,
    solve_individual, solve_joint, LsqSolution, Matrix,
};
use normmerge::merge::{
    extract_task_vector, nan_coefficients, task_arithmetic, ties_merge, Checkpoint, ExcludeSet,
    NanCoefficients, TaskVector,
};
use normmerge::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_normmerge"))
}

/// Gauss-Jordan with partial pivoting on a row-major `n × n` matrix.
fn explicit_inverse(a: &[f64], n: usize) -> Vec<f64> {
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
        for r in (0..n).filter(|&r| r != col) {
            let f = aug[r * w + col];
            for k in 0..w {
                aug[r * w + k] -= f * aug[col * w + k];
            }
        }
    }
    (0..n).flat_map(|r| aug[r * w + n..(r + 1) * w].to_vec()).collect()
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|t| a[i * n + t] * b[t * n + j]).sum();
        }
    }
    out
}

fn random_values(rng: &mut ChaCha8Rng, len: usize, range: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-range..range)).collect()
}

fn random_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.random_range(0..=3);
    (0..rank).map(|_| rng.random_range(1..=5)).collect()
}

fn random_f64_checkpoint(rng: &mut ChaCha8Rng, tensors: usize) -> Checkpoint {
    let mut c = Checkpoint::new();
    for i in 0..tensors {
        let shape = random_shape(rng);
        let numel = shape.iter().product();
        c.insert(format!("layer{i}.weight"), Tensor::from_f64(shape, random_values(rng, numel, 10.0)).unwrap())
            .unwrap();
    }
    c
}

/// Same names and shapes as `like`, fresh values.
fn perturbed(rng: &mut ChaCha8Rng, like: &Checkpoint) -> Checkpoint {
    let mut c = Checkpoint::new();
    for (name, t) in like.tensors() {
        let data = t.data().iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
        c.insert(name.clone(), Tensor::from_f64(t.shape().to_vec(), data).unwrap()).unwrap();
    }
    c
}

fn max_element_error(a: &Checkpoint, b: &Checkpoint) -> f64 {
    if a.names() != b.names() {
        return f64::INFINITY;
    }
    a.tensors()
        .iter()
        .flat_map(|(name, t)| {
            t.data()
                .iter()
                .zip(b.tensor(name).unwrap().data())
                .map(|(x, y)| (x - y).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

fn grid() -> Vec<(usize, usize, usize, u64)> {
    let mut out = Vec::new();
    for d in [1, 4, 16] {
        for tasks in [2, 3, 5] {
            for m in [1, 3] {
                for seed in 0..20 {
                    out.push((d, tasks, m, seed));
                }
            }
        }
    }
    out
}

fn exact_identity() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut count = 0;
    for (d, tasks, m, seed) in grid() {
        let instance = generate_instance(seed, d, m, tasks).unwrap();
        let solutions: Vec<LsqSolution> = instance.iter().map(|t| solve_individual(t, 0.0).unwrap()).collect();
        let merged = merge_solutions(&solutions, &matrix_coefficients(&instance, 0.0).unwrap()).unwrap();
        let joint = solve_joint(&instance, 0.0).unwrap();
        worst = worst.max(relative_error(&merged.w, &joint.w));
        count += 1;
    }
    let elapsed = start.elapsed().as_secs_f64();
    outcome(
        count >= 360 && worst <= 1e-8 && elapsed < 10.0,
        format!("{count} instances, worst relative error {worst:.3e} (tol 1e-8), {elapsed:.2}s (limit 10s)"),
    )
}

fn partition_of_identity() -> Outcome {
    let mut worst = 0.0f64;
    let mut count = 0;
    for (d, tasks, m, seed) in grid() {
        let instance = generate_instance(seed, d, m, tasks).unwrap();
        for ridge in [0.0, 1e-3] {
            worst = worst.max(matrix_coefficients(&instance, ridge).unwrap().partition_error());
            count += 1;
        }
    }
    outcome(worst <= 1e-8, format!("{count} cases, worst entry deviation {worst:.3e} (tol 1e-8)"))
}

fn two_task_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for pair in 0..50 {
        let d = 1 + pair % 8;
        let spd = |rng: &mut ChaCha8Rng| {
            let n = d + 3;
            Matrix::new(n, d, random_values(rng, n * d, 1.0)).unwrap().gram()
        };
        let a1 = spd(&mut rng);
        let a2 = spd(&mut rng);
        let omega = matrix_coefficients_from_grams(&[&a1, &a2], 0.0).unwrap().omegas.remove(0);
        let sum: Vec<f64> = a1.as_slice().iter().zip(a2.as_slice()).map(|(x, y)| x + y).collect();
        let oracle = matmul(&explicit_inverse(&sum, d), a1.as_slice(), d);
        let diff = omega.as_slice().iter().zip(&oracle).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst = worst.max(diff);
    }
    outcome(worst <= 1e-8, format!("50 SPD pairs, worst |Ω₁ − oracle| {worst:.3e} (tol 1e-8)"))
}

fn sample_weighted_convergence(dir: &Path) -> Outcome {
    let csv_path = dir.join("isotropy.csv");
    let status = cli()
        .args(["verify", "--seed", "42", "--isotropy-d", "8", "--n-schedule", "256,1024,4096", "--instances", "1"])
        .arg("--csv-out")
        .arg(&csv_path)
        .output()
        .unwrap();
    if status.status.code() != Some(0) {
        return outcome(false, format!("verify exited {:?}", status.status.code()));
    }
    let Ok(text) = fs::read_to_string(&csv_path) else {
        return outcome(false, "CSV was not written");
    };
    let mut lines = text.lines();
    if lines.next() != Some("n,coeff_error") {
        return outcome(false, "unexpected CSV header");
    }
    let rows: Vec<(usize, f64)> = lines
        .map(|l| {
            let (n, e) = l.split_once(',').unwrap();
            (n.parse().unwrap(), e.parse().unwrap())
        })
        .collect();
    let ns: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let error_at = |n: usize| rows.iter().find(|r| r.0 == n).map(|r| r.1);
    match (error_at(256), error_at(4096)) {
        (Some(small), Some(large)) => outcome(
            ns == [256, 1024, 4096] && large < small,
            format!("coeff_error n=256 {small:.3e}, n=4096 {large:.3e}"),
        ),
        _ => outcome(false, format!("CSV rows for n = {ns:?}")),
    }
}

fn nan_unit_checks() -> Outcome {
    let mut failures = Vec::new();

    let c = NanCoefficients::from_norms(vec![2.0, 4.0], false).unwrap();
    if (c.alphas[0] - 2.0 / 3.0).abs() > 1e-12 || (c.alphas[1] - 1.0 / 3.0).abs() > 1e-12 {
        failures.push(format!("[2,4] gave {:?}", c.alphas));
    }

    for count in 1..=6 {
        let c = NanCoefficients::from_norms(vec![3.5; count], true).unwrap();
        if c.alphas.iter().any(|a| (a - 1.0 / count as f64).abs() > 1e-12) {
            failures.push(format!("equal norms x{count} gave {:?}", c.alphas));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let base = random_f64_checkpoint(&mut rng, 4);
    let models: Vec<Checkpoint> = (0..3).map(|_| perturbed(&mut rng, &base)).collect();
    let reference = nan_coefficients(&models, true).unwrap();
    for scale in [1e-3, 1.0, 1e3] {
        let scaled: Vec<Checkpoint> = models
            .iter()
            .map(|m| {
                let mut out = Checkpoint::new();
                for (name, t) in m.tensors() {
                    let data = t.data().iter().map(|v| v * scale).collect();
                    out.insert(name.clone(), Tensor::from_f64(t.shape().to_vec(), data).unwrap()).unwrap();
                }
                out
            })
            .collect();
        let got = nan_coefficients(&scaled, true).unwrap();
        if got.alphas.iter().zip(&reference.alphas).any(|(a, b)| (a - b).abs() > 1e-12) {
            failures.push(format!("scale {scale} changed alphas"));
        }
    }

    for trial in 0..100 {
        let len = rng.random_range(1..=20);
        let norms: Vec<f64> = (0..len).map(|_| 10f64.powf(rng.random_range(-6.0..6.0))).collect();
        let c = NanCoefficients::from_norms(norms.clone(), true).unwrap();
        let argmax = (0..len).max_by(|&i, &j| c.alphas[i].total_cmp(&c.alphas[j])).unwrap();
        let argmin = (0..len).min_by(|&i, &j| norms[i].total_cmp(&norms[j])).unwrap();
        if norms[argmax] != norms[argmin] {
            failures.push(format!("argmax/argmin disagree on vector {trial}"));
        }
    }

    let passed = failures.is_empty();
    outcome(passed, if passed { "all unit checks hold (tol 1e-12)".into() } else { failures.join("; ") })
}

fn round_trip_reconstruction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let tensors = rng.random_range(1..=6);
        let base = random_f64_checkpoint(&mut rng, tensors);
        let ft = perturbed(&mut rng, &base);
        let tau = extract_task_vector(&base, &ft, &ExcludeSet::empty()).unwrap();
        let out = task_arithmetic(&base, &[tau], &[1.0]).unwrap();
        worst = worst.max(max_element_error(&out, &ft));
    }
    outcome(worst <= 1e-10, format!("10 pairs, worst element error {worst:.3e} (tol 1e-10)"))
}

fn file_round_trip(dir: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = Vec::new();
    for i in 0..20 {
        let mut c = Checkpoint::new();
        for (k, dtype) in DType::ALL.iter().enumerate() {
            let shape = random_shape(&mut rng);
            let numel = shape.iter().product();
            let t = Tensor::from_f64(shape, random_values(&mut rng, numel, 100.0)).unwrap().cast(*dtype).unwrap();
            c.insert(format!("t{k}.{}", dtype.as_str()), t).unwrap();
        }
        let empty_dtype = DType::ALL[i % DType::ALL.len()];
        c.insert("empty", Tensor::zeros(vec![i % 3, 0], empty_dtype)).unwrap();
        c.metadata_mut().insert("index".into(), i.to_string());

        let first = dir.join(format!("rt{i}a.safetensors"));
        let second = dir.join(format!("rt{i}b.safetensors"));
        write_checkpoint(&c, &first, DtypePolicy::Preserve).unwrap();
        write_checkpoint(&c, &second, DtypePolicy::Preserve).unwrap();
        if !read_checkpoint(&first).unwrap().bitwise_eq(&c) {
            failures.push(format!("checkpoint {i} not bitwise equal"));
        }
        if fs::read(&first).unwrap() != fs::read(&second).unwrap() {
            failures.push(format!("checkpoint {i} writes differ"));
        }
    }
    let passed = failures.is_empty();
    outcome(
        passed,
        if passed { "20 checkpoints, bitwise reads, byte-identical writes".into() } else { failures.join("; ") },
    )
}

fn ties_degenerate() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base = random_f64_checkpoint(&mut rng, 3);
    let ft = perturbed(&mut rng, &base);
    let tau = extract_task_vector(&base, &ft, &ExcludeSet::empty()).unwrap();
    let single = max_element_error(&ties_merge(&base, &[tau], 1.0, &[1.0]).unwrap(), &ft);

    // Every model moves each entry in the same direction.
    let signs: Vec<Vec<f64>> = base
        .tensors()
        .values()
        .map(|t| t.data().iter().map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect())
        .collect();
    let agreeing: Vec<TaskVector> = (0..3)
        .map(|_| {
            let mut m = Checkpoint::new();
            for ((name, t), s) in base.tensors().iter().zip(&signs) {
                let data = t.data().iter().zip(s).map(|(v, s)| v + s * rng.random_range(0.01..2.0)).collect();
                m.insert(name.clone(), Tensor::from_f64(t.shape().to_vec(), data).unwrap()).unwrap();
            }
            extract_task_vector(&base, &m, &ExcludeSet::empty()).unwrap()
        })
        .collect();
    let coeffs = [0.5, 1.0, 1.5];
    let total: f64 = coeffs.iter().sum();
    let normalized: Vec<f64> = coeffs.iter().map(|c| c / total).collect();
    let ties = ties_merge(&base, &agreeing, 1.0, &coeffs).unwrap();
    let ta = task_arithmetic(&base, &agreeing, &normalized).unwrap();
    let agreement = max_element_error(&ties, &ta);

    let one = |v: f64| Checkpoint::new().with("p", Tensor::from_f64(vec![1], vec![v]).unwrap()).unwrap();
    let b = one(5.0);
    let tie: Vec<TaskVector> = [one(6.0), one(4.0)]
        .iter()
        .map(|m| extract_task_vector(&b, m, &ExcludeSet::empty()).unwrap())
        .collect();
    let tied = ties_merge(&b, &tie, 1.0, &[1.0, 1.0]).unwrap().tensor("p").unwrap().data()[0] - 5.0;

    outcome(
        single <= 1e-10 && agreement <= 1e-10 && tied == 0.0,
        format!("single-model error {single:.3e}, sign-agreement error {agreement:.3e} (tol 1e-10), tie delta {tied}"),
    )
}

fn end_to_end(dir: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let base = random_f64_checkpoint(&mut rng, 5);
    let models = [perturbed(&mut rng, &base), perturbed(&mut rng, &base)];
    write_checkpoint(&base, dir.join("e2e_base.safetensors"), DtypePolicy::Preserve).unwrap();
    for (i, m) in models.iter().enumerate() {
        write_checkpoint(m, dir.join(format!("e2e_{i}.safetensors")), DtypePolicy::Preserve).unwrap();
    }
    let recipe = dir.join("e2e.toml");
    fs::write(
        &recipe,
        "strategy = \"task_arithmetic\"\n\
         nan_mode = \"replace_coefficients\"\n\
         base_path = \"e2e_base.safetensors\"\n\
         model_paths = [\"e2e_0.safetensors\", \"e2e_1.safetensors\"]\n\
         output_path = \"e2e_out.safetensors\"\n",
    )
    .unwrap();
    let merge = cli().arg("merge").arg(&recipe).output().unwrap();
    if merge.status.code() != Some(0) {
        return outcome(false, format!("merge exited {:?}: {}", merge.status.code(), String::from_utf8_lossy(&merge.stderr)));
    }
    let merged = read_checkpoint(dir.join("e2e_out.safetensors")).unwrap();

    // Direct computation from the raw tensors.
    let deltas: Vec<Vec<(String, Vec<f64>)>> = models
        .iter()
        .map(|m| {
            base.tensors()
                .iter()
                .map(|(name, b)| {
                    let ft = m.tensor(name).unwrap().data();
                    (name.clone(), ft.iter().zip(b.data()).map(|(f, b)| f - b).collect())
                })
                .collect()
        })
        .collect();
    let norms: Vec<f64> = deltas
        .iter()
        .map(|d| d.iter().flat_map(|(_, v)| v.iter().map(|x| x * x)).sum::<f64>().sqrt())
        .collect();
    let inv_total: f64 = norms.iter().map(|n| 1.0 / n).sum();
    let scale = models.len() as f64 / 2.0;
    let coefficients: Vec<f64> = norms.iter().map(|n| scale * (1.0 / n) / inv_total).collect();
    let mut oracle = Checkpoint::new();
    for (k, (name, b)) in base.tensors().iter().enumerate() {
        let data = (0..b.data().len())
            .map(|j| b.data()[j] + (0..models.len()).map(|i| coefficients[i] * deltas[i][k].1[j]).sum::<f64>())
            .collect();
        oracle.insert(name.clone(), Tensor::from_f64(b.shape().to_vec(), data).unwrap()).unwrap();
    }
    let error = max_element_error(&merged, &oracle);

    let verify = cli().arg("verify").output().unwrap();
    outcome(
        error <= 1e-10 && verify.status.code() == Some(0),
        format!("merge vs oracle max error {error:.3e} (tol 1e-10), verify exit {:?}", verify.status.code()),
    )
}

fn main() -> ExitCode {
    let dir = TempDir::new().unwrap();
    let criteria: Vec<Criterion> = vec![
        ("exact merging identity", Box::new(exact_identity)),
        ("partition of identity", Box::new(partition_of_identity)),
        ("two-task coefficient oracle", Box::new(two_task_oracle)),
        ("sample-weighted convergence", Box::new(|| sample_weighted_convergence(dir.path()))),
        ("NAN coefficient unit checks", Box::new(nan_unit_checks)),
        ("task vector round trip", Box::new(round_trip_reconstruction)),
        ("file format round trip", Box::new(|| file_round_trip(dir.path()))),
        ("TIES degenerate equivalences", Box::new(ties_degenerate)),
        ("end-to-end CLI", Box::new(|| end_to_end(dir.path()))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let o = check();
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.passed);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
