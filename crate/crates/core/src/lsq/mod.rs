//! Closed-form multi-task least squares.
//!
//! Each task `i` contributes inputs `X_i` (`n_i × d`) and targets `Y_i`
//! (`n_i × m`). With `A_i = X_iᵀX_i` and `b_i = X_iᵀY_i`:
//!
//! * the per-task solution is `W_i = A_i⁻¹ b_i`,
//! * the joint solution is `W* = (Σ A_j)⁻¹ Σ b_j`,
//! * and `W* = Σ Ω_i W_i` exactly, with matrix coefficients
//!   `Ω_i = (Σ A_j)⁻¹ A_i` that partition the identity.
//!
//! Every solve takes a non-negative ridge. Inside [`matrix_coefficients`] the
//! ridge is split evenly over the tasks so `Σ Ω_i = I` still holds.

mod matrix;
pub mod synthetic;
pub mod verify;

pub use matrix::{
    condition_number, spd_solve, Cholesky, Matrix, JITTER_SCHEDULE, PIVOT_FLOOR,
};
pub use synthetic::{
    generate_instance, generate_isotropic_task, isotropy_experiment, IsotropyPoint,
    IsotropyReport,
};

use crate::error::{Error, Result};

/// Relative residual bound accepted from a solve.
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;

/// One task's data with its cached Gram matrix and moment.
#[derive(Debug, Clone)]
pub struct LsqTask {
    x: Matrix,
    y: Matrix,
    gram: Matrix,
    moment: Matrix,
}

impl LsqTask {
    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &Matrix {
        &self.y
    }

    /// `A = XᵀX`.
    pub fn gram(&self) -> &Matrix {
        &self.gram
    }

    /// `b = XᵀY`.
    pub fn moment(&self) -> &Matrix {
        &self.moment
    }

    /// Sample count `n`.
    pub fn samples(&self) -> usize {
        self.x.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.y.cols()
    }

    /// `‖X·W − Y‖_F²`.
    pub fn objective(&self, w: &Matrix) -> Result<f64> {
        let r = self.x.matmul(w)?.sub(&self.y)?;
        Ok(r.as_slice().iter().map(|v| v * v).sum())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsqSolution {
    pub w: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixCoefficients {
    pub omegas: Vec<Matrix>,
}

impl MatrixCoefficients {
    /// Largest entrywise deviation of `Σ Ω_i` from the identity.
    pub fn partition_error(&self) -> f64 {
        let Some(first) = self.omegas.first() else {
            return 0.0;
        };
        let d = first.rows();
        let mut sum = Matrix::zeros(d, d);
        for omega in &self.omegas {
            // Shapes were fixed when the coefficients were built.
            let _ = sum.add_assign(omega);
        }
        sum.sub(&Matrix::identity(d)).map_or(f64::INFINITY, |m| m.max_abs())
    }
}

pub fn make_task(x: Matrix, y: Matrix) -> Result<LsqTask> {
    if x.rows() != y.rows() {
        return Err(Error::DimensionMismatch(format!(
            "X has {} rows, Y has {}",
            x.rows(),
            y.rows()
        )));
    }
    if x.rows() == 0 {
        return Err(Error::EmptyInput("task has no samples".into()));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::NonFiniteInput("task data".into()));
    }
    let gram = x.gram();
    let moment = x.t_matmul(&y)?;
    Ok(LsqTask { x, y, gram, moment })
}

fn check_ridge(ridge: f64) -> Result<()> {
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    Ok(())
}

fn solve_checked(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let w = spd_solve(a, b)?;
    let residual = a.matmul(&w)?.sub(b)?.frobenius_norm();
    let bound = RESIDUAL_TOLERANCE * (1.0 + b.frobenius_norm());
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(residual <= bound) {
        return Err(Error::SingularGram(format!(
            "residual {residual:e} exceeds {bound:e}"
        )));
    }
    Ok(w)
}

/// `W = (A + ridge·I)⁻¹ b`.
pub fn solve_individual(task: &LsqTask, ridge: f64) -> Result<LsqSolution> {
    check_ridge(ridge)?;
    let a = task.gram.add_diagonal(ridge);
    Ok(LsqSolution {
        w: solve_checked(&a, &task.moment)?,
    })
}

fn check_compatible(tasks: &[LsqTask]) -> Result<(usize, usize)> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::EmptyInput("no tasks".into()))?;
    let (d, m) = (first.input_dim(), first.output_dim());
    for (i, t) in tasks.iter().enumerate() {
        if t.input_dim() != d || t.output_dim() != m {
            return Err(Error::ShapeMismatch(format!(
                "task {i} has d={}, m={}; task 0 has d={d}, m={m}",
                t.input_dim(),
                t.output_dim()
            )));
        }
    }
    Ok((d, m))
}

/// `W* = (Σ A_i + ridge·I)⁻¹ Σ b_i`.
pub fn solve_joint(tasks: &[LsqTask], ridge: f64) -> Result<LsqSolution> {
    check_ridge(ridge)?;
    let (d, m) = check_compatible(tasks)?;
    let mut a = Matrix::zeros(d, d);
    let mut b = Matrix::zeros(d, m);
    for t in tasks {
        a.add_assign(&t.gram)?;
        b.add_assign(&t.moment)?;
    }
    let a = a.add_diagonal(ridge);
    Ok(LsqSolution {
        w: solve_checked(&a, &b)?,
    })
}

/// `Ω_i = (Σ_j A_j + ridge·I)⁻¹ (A_i + ridge/T · I)` for `T` tasks.
pub fn matrix_coefficients(tasks: &[LsqTask], ridge: f64) -> Result<MatrixCoefficients> {
    check_compatible(tasks)?;
    let grams: Vec<&Matrix> = tasks.iter().map(|t| &t.gram).collect();
    matrix_coefficients_from_grams(&grams, ridge)
}

/// Same as [`matrix_coefficients`], from Gram matrices alone.
pub fn matrix_coefficients_from_grams(
    grams: &[&Matrix],
    ridge: f64,
) -> Result<MatrixCoefficients> {
    check_ridge(ridge)?;
    let first = grams
        .first()
        .ok_or_else(|| Error::EmptyInput("no Gram matrices".into()))?;
    let d = first.rows();
    let mut total = Matrix::zeros(d, d);
    for (i, g) in grams.iter().enumerate() {
        if g.shape() != (d, d) {
            return Err(Error::GramShapeMismatch(format!(
                "Gram {i} is {}x{}, expected {d}x{d}",
                g.rows(),
                g.cols()
            )));
        }
        total.add_assign(g)?;
    }
    let factor = Cholesky::factor_with_jitter(&total.add_diagonal(ridge))?;
    let share = ridge / grams.len() as f64;
    let omegas = grams
        .iter()
        .map(|g| factor.solve(&g.add_diagonal(share)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MatrixCoefficients { omegas })
}

/// `W = Σ_i Ω_i · W_i`, summed in ascending index order.
pub fn merge_solutions(
    solutions: &[LsqSolution],
    coeffs: &MatrixCoefficients,
) -> Result<LsqSolution> {
    if solutions.len() != coeffs.omegas.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} solutions but {} coefficient matrices",
            solutions.len(),
            coeffs.omegas.len()
        )));
    }
    let first = solutions
        .first()
        .ok_or_else(|| Error::EmptyInput("no solutions".into()))?;
    let mut w = Matrix::zeros(first.w.rows(), first.w.cols());
    for (i, (s, omega)) in solutions.iter().zip(&coeffs.omegas).enumerate() {
        if s.w.shape() != first.w.shape() || omega.cols() != s.w.rows() || omega.rows() != s.w.rows()
        {
            return Err(Error::ShapeMismatch(format!(
                "solution {i} is {}x{} with a {}x{} coefficient; expected {}x{}",
                s.w.rows(),
                s.w.cols(),
                omega.rows(),
                omega.cols(),
                first.w.rows(),
                first.w.cols()
            )));
        }
        w.add_assign(&omega.matmul(&s.w)?)?;
    }
    Ok(LsqSolution { w })
}

/// `W = Σ_i (n_i / Σ_j n_j) · W_i`: the merged solution when every Gram
/// matrix is a multiple of the identity proportional to its sample count.
pub fn sample_weighted_merge(solutions: &[LsqSolution], ns: &[u64]) -> Result<LsqSolution> {
    if solutions.is_empty() {
        return Err(Error::EmptyInput("no solutions".into()));
    }
    if solutions.len() != ns.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} solutions but {} sample counts",
            solutions.len(),
            ns.len()
        )));
    }
    if ns.contains(&0) {
        return Err(Error::InvalidArgument("sample counts must be positive".into()));
    }
    let total: f64 = ns.iter().map(|&n| n as f64).sum();
    let shape = solutions[0].w.shape();
    let mut w = Matrix::zeros(shape.0, shape.1);
    for (i, (s, &n)) in solutions.iter().zip(ns).enumerate() {
        if s.w.shape() != shape {
            return Err(Error::ShapeMismatch(format!("solution {i} has a different shape")));
        }
        w.add_assign(&s.w.scale(n as f64 / total))?;
    }
    Ok(LsqSolution { w })
}
