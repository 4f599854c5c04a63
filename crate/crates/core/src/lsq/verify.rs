//! Randomized checks of the closed-form merging identities.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::synthetic::derive_seed;
use super::{
    generate_instance, isotropy_experiment, matrix_coefficients, merge_solutions, solve_individual,
    solve_joint, IsotropyReport, LsqSolution, Matrix,
};
use crate::error::Result;

/// Bound on the relative Frobenius error of `Σ Ω_i W_i` against `W*`.
pub const IDENTITY_TOLERANCE: f64 = 1e-8;
/// Bound on `max |Σ Ω_i − I|`.
pub const PARTITION_TOLERANCE: f64 = 1e-8;
/// Step used when perturbing the joint optimum.
pub const PERTURBATION_STEP: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub seed: u64,
    pub dims: Vec<usize>,
    pub task_counts: Vec<usize>,
    pub output_dims: Vec<usize>,
    pub instances: usize,
    pub ridges: Vec<f64>,
    pub perturbations: usize,
    pub isotropy_d: usize,
    pub n_schedule: Vec<usize>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 42,
            dims: vec![1, 4, 16],
            task_counts: vec![2, 3, 5],
            output_dims: vec![1, 3],
            instances: 20,
            ridges: vec![0.0, 1e-3],
            perturbations: 10,
            isotropy_d: 8,
            n_schedule: vec![256, 1024, 4096],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub tolerance: f64,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<26} cases={:<5} worst={:.3e} tol={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
    pub isotropy: IsotropyReport,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Relative Frobenius error `‖a − b‖ / max(‖b‖, tiny)`.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    match a.sub(b) {
        Ok(diff) => diff.frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE),
        Err(_) => f64::INFINITY,
    }
}

/// Runs every check over the configured grid. Errors from the numerical
/// routines (for example a singular instance) are returned as-is.
pub fn run_verify(config: &VerifyConfig) -> Result<VerifyReport> {
    let mut identity_worst = 0.0f64;
    let mut partition_worst = 0.0f64;
    let mut optimality_worst = 0.0f64;
    let mut instances = 0usize;
    let mut partition_cases = 0usize;
    let mut perturbation_cases = 0usize;

    for &d in &config.dims {
        for &task_count in &config.task_counts {
            for &m in &config.output_dims {
                for k in 0..config.instances {
                    let seed =
                        derive_seed(config.seed, &[d as u64, task_count as u64, m as u64, k as u64]);
                    let tasks = generate_instance(seed, d, m, task_count)?;
                    instances += 1;

                    let solutions = tasks
                        .iter()
                        .map(|t| solve_individual(t, 0.0))
                        .collect::<Result<Vec<LsqSolution>>>()?;
                    let joint = solve_joint(&tasks, 0.0)?;
                    let coeffs = matrix_coefficients(&tasks, 0.0)?;
                    let merged = merge_solutions(&solutions, &coeffs)?;
                    identity_worst = identity_worst.max(relative_error(&merged.w, &joint.w));

                    for &ridge in &config.ridges {
                        let c = matrix_coefficients(&tasks, ridge)?;
                        partition_worst = partition_worst.max(c.partition_error());
                        partition_cases += 1;
                    }

                    // f(W* + εG) − f(W*) = ε² Σ‖X_i G‖² ≥ 0; report the worst
                    // relative decrease (0 when none).
                    let base: f64 = tasks
                        .iter()
                        .map(|t| t.objective(&joint.w))
                        .sum::<Result<f64>>()?;
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::MAX]));
                    for _ in 0..config.perturbations {
                        let g: Vec<f64> = (0..d * m).map(|_| StandardNormal.sample(&mut rng)).collect();
                        let g = Matrix::new(d, m, g)?.scale(PERTURBATION_STEP);
                        let w = joint.w.add(&g)?;
                        let value: f64 =
                            tasks.iter().map(|t| t.objective(&w)).sum::<Result<f64>>()?;
                        let decrease = (base - value) / base.max(f64::MIN_POSITIVE);
                        optimality_worst = optimality_worst.max(decrease);
                        perturbation_cases += 1;
                    }
                }
            }
        }
    }

    let isotropy = isotropy_experiment(config.seed, config.isotropy_d, 1, &config.n_schedule)?;
    let (first, last) = (
        isotropy.first().map_or(f64::NAN, |p| p.coeff_error),
        isotropy.last().map_or(f64::NAN, |p| p.coeff_error),
    );

    let checks = vec![
        CheckOutcome {
            name: "exact_merging_identity",
            passed: identity_worst <= IDENTITY_TOLERANCE,
            cases: instances,
            worst: identity_worst,
            tolerance: IDENTITY_TOLERANCE,
        },
        CheckOutcome {
            name: "partition_of_identity",
            passed: partition_worst <= PARTITION_TOLERANCE,
            cases: partition_cases,
            worst: partition_worst,
            tolerance: PARTITION_TOLERANCE,
        },
        CheckOutcome {
            name: "joint_optimality",
            passed: optimality_worst <= 0.0,
            cases: perturbation_cases,
            worst: optimality_worst,
            tolerance: 0.0,
        },
        CheckOutcome {
            name: "sample_weighted_convergence",
            // Ratio of last to first error; must drop below 1.
            passed: last < first,
            cases: isotropy.points.len(),
            worst: last / first,
            tolerance: 1.0,
        },
    ];
    Ok(VerifyReport { checks, isotropy })
}
