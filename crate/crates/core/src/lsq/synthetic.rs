//! Seeded synthetic least-squares problems.
//!
//! All randomness comes from `ChaCha8Rng` (rand_chacha) seeded with
//! `seed_from_u64`, and Gaussian draws use `rand_distr::StandardNormal`.
//! Both are pinned in `Cargo.lock`, and the same seed reproduces the same
//! problem bit for bit.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{condition_number, make_task, matrix_coefficients, LsqTask, Matrix};
use crate::error::{Error, Result};

/// Instances whose Gram matrices are worse conditioned than this are redrawn.
pub const MAX_CONDITION: f64 = 1e10;

/// Noise standard deviation relative to the RMS of the clean targets.
pub const NOISE_SCALE: f64 = 0.01;

const MAX_REDRAWS: u64 = 64;

/// Mixes extra words into a seed (splitmix64 finalizer per word).
pub fn derive_seed(seed: u64, words: &[u64]) -> u64 {
    let mut state = seed;
    for &w in words {
        state = splitmix64(state ^ splitmix64(w.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    state
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::new(rows, cols, data).expect("sized by construction")
}

/// Draws `X` with i.i.d. standard Gaussian rows (optionally rescaled to unit
/// length), a Gaussian `W_true`, and `Y = X·W_true + noise` where the noise
/// has standard deviation `0.01·‖X·W_true‖_F / sqrt(n·m)`.
pub fn generate_isotropic_task(
    seed: u64,
    n: usize,
    d: usize,
    m: usize,
    normalize_rows: bool,
) -> Result<LsqTask> {
    if n == 0 || d == 0 || m == 0 {
        return Err(Error::InvalidArgument(format!(
            "n, d and m must be positive (got n={n}, d={d}, m={m})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = gaussian_matrix(&mut rng, n, d);
    if normalize_rows {
        for r in 0..n {
            let mut norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            while norm == 0.0 {
                for v in x.row_mut(r) {
                    *v = rng.sample(StandardNormal);
                }
                norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            for v in x.row_mut(r) {
                *v /= norm;
            }
        }
    }
    let w_true = gaussian_matrix(&mut rng, d, m);
    let clean = x.matmul(&w_true)?;
    let sigma = NOISE_SCALE * clean.frobenius_norm() / ((n * m) as f64).sqrt();
    let noise = gaussian_matrix(&mut rng, n, m).scale(sigma);
    let y = clean.add(&noise)?;
    make_task(x, y)
}

/// A well-conditioned multi-task problem: `task_count` Gaussian tasks sharing
/// `d` and `m`, each with between `d + 2` and `3d + 8` samples. Draws whose
/// summed Gram matrix, or any single Gram matrix, has condition number above
/// [`MAX_CONDITION`] are discarded and redrawn from a derived seed.
pub fn generate_instance(seed: u64, d: usize, m: usize, task_count: usize) -> Result<Vec<LsqTask>> {
    if task_count == 0 {
        return Err(Error::InvalidArgument("task_count must be positive".into()));
    }
    for attempt in 0..MAX_REDRAWS {
        let attempt_seed = derive_seed(seed, &[attempt]);
        let mut rng = ChaCha8Rng::seed_from_u64(attempt_seed);
        let mut tasks = Vec::with_capacity(task_count);
        for i in 0..task_count {
            let n = rng.random_range(d + 2..=3 * d + 8);
            tasks.push(generate_isotropic_task(
                derive_seed(attempt_seed, &[i as u64 + 1]),
                n,
                d,
                m,
                false,
            )?);
        }
        let mut total = Matrix::zeros(d, d);
        for t in &tasks {
            total.add_assign(t.gram())?;
        }
        let conditioned = condition_number(&total) <= MAX_CONDITION
            && tasks.iter().all(|t| condition_number(t.gram()) <= MAX_CONDITION);
        if conditioned {
            return Ok(tasks);
        }
        log::debug!("instance seed {seed} attempt {attempt} ill-conditioned, redrawing");
    }
    Err(Error::SingularGram(format!(
        "no well-conditioned instance after {MAX_REDRAWS} draws (seed {seed})"
    )))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsotropyPoint {
    pub n: usize,
    pub coeff_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsotropyReport {
    pub seed: u64,
    pub d: usize,
    pub m: usize,
    pub points: Vec<IsotropyPoint>,
}

impl IsotropyReport {
    /// `n,coeff_error` rows, floats with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,coeff_error\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{:.16e}", p.n, p.coeff_error);
        }
        out
    }

    pub fn first(&self) -> Option<&IsotropyPoint> {
        self.points.first()
    }

    pub fn last(&self) -> Option<&IsotropyPoint> {
        self.points.last()
    }
}

/// For each `n`, two row-normalized tasks of sizes `n` and `2n`; reports
/// `max |Ω₁ − I/3|`, which goes to zero as the Gram matrices approach
/// multiples of the identity.
pub fn isotropy_experiment(
    seed: u64,
    d: usize,
    m: usize,
    n_schedule: &[usize],
) -> Result<IsotropyReport> {
    if n_schedule.is_empty() {
        return Err(Error::InvalidArgument("empty n schedule".into()));
    }
    if n_schedule.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "n schedule must be strictly increasing: {n_schedule:?}"
        )));
    }
    let mut points = Vec::with_capacity(n_schedule.len());
    for &n in n_schedule {
        let small = generate_isotropic_task(derive_seed(seed, &[n as u64, 0]), n, d, m, true)?;
        let large = generate_isotropic_task(derive_seed(seed, &[n as u64, 1]), 2 * n, d, m, true)?;
        let coeffs = matrix_coefficients(&[small, large], 0.0)?;
        let target = Matrix::scaled_identity(d, n as f64 / (3 * n) as f64);
        let coeff_error = coeffs.omegas[0].sub(&target)?.max_abs();
        points.push(IsotropyPoint { n, coeff_error });
    }
    Ok(IsotropyReport { seed, d, m, points })
}
