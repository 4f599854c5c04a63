//! Small dense row-major matrices and a jittered Cholesky solver.

use std::fmt;

use log::debug;

use crate::error::{Error, Result};

/// A factorization is rejected when any pivot `L_kk²` is at or below this
/// fraction of the largest diagonal entry. The bound sits a decade above the
/// largest jitter, so jitter alone can never carry an exactly singular
/// matrix over it.
pub const PIVOT_FLOOR: f64 = 1e-9;

/// Diagonal jitter tried after the plain factorization fails, as multiples
/// of `trace / n`.
pub const JITTER_SCHEDULE: [f64; 3] = [1e-12, 1e-11, 1e-10];

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, value: f64) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = value;
        }
        m
    }

    /// Panics if the rows are ragged.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.get(r, c);
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot form transpose product of {}x{} and {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for r in 0..self.rows {
            let lhs_row = self.row(r);
            let rhs_row = rhs.row(r);
            for (i, &a) in lhs_row.iter().enumerate() {
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `XᵀX`, symmetric by construction.
    pub fn gram(&self) -> Matrix {
        let d = self.cols;
        let mut out = Matrix::zeros(d, d);
        for r in 0..self.rows {
            let x = self.row(r);
            for i in 0..d {
                let xi = x[i];
                for (j, xj) in x[..=i].iter().enumerate() {
                    out.data[i * d + j] += xi * xj;
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                out.data[j * d + i] = out.data[i * d + j];
            }
        }
        out
    }

    fn check_same_shape(&self, rhs: &Matrix, op: &str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::DimensionMismatch(format!(
                "cannot {op} {}x{} and {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_same_shape(rhs, "add")?;
        let mut out = self.clone();
        out.add_assign(rhs)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, rhs: &Matrix) -> Result<()> {
        self.check_same_shape(rhs, "add")?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_same_shape(rhs, "subtract")?;
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Adds `value` to every diagonal entry.
    pub fn add_diagonal(&self, value: f64) -> Matrix {
        let mut out = self.clone();
        for i in 0..self.rows.min(self.cols) {
            out.data[i * self.cols + i] += value;
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute entry (0 for an empty matrix).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Maximum absolute column sum.
    pub fn norm_1(&self) -> f64 {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|r| self.get(r, c).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    fn max_diagonal(&self) -> f64 {
        (0..self.rows.min(self.cols))
            .map(|i| self.get(i, i))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Lower-triangular Cholesky factor `A = L·Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
    jitter: f64,
}

impl Cholesky {
    /// Factors a symmetric matrix, reading only its lower triangle. No jitter.
    pub fn factor(a: &Matrix) -> Result<Self> {
        check_square(a)?;
        let floor = PIVOT_FLOOR * a.max_diagonal().max(0.0);
        factor_lower(a, 0.0, floor)
    }

    /// Factors `a`, retrying with escalating diagonal jitter
    /// ([`JITTER_SCHEDULE`]). The pivot floor is
    /// fixed from the unjittered matrix so jitter cannot rescue a matrix that
    /// is singular to working precision.
    pub fn factor_with_jitter(a: &Matrix) -> Result<Self> {
        check_square(a)?;
        if !a.is_finite() {
            return Err(Error::NonFiniteInput("matrix to factor".into()));
        }
        let n = a.rows();
        let floor = PIVOT_FLOOR * a.max_diagonal().max(0.0);
        let mut last = match factor_lower(a, 0.0, floor) {
            Ok(f) => return Ok(f),
            Err(e) => e,
        };
        let base = if n == 0 { 0.0 } else { a.trace().max(0.0) / n as f64 };
        for (attempt, scale) in JITTER_SCHEDULE.iter().enumerate() {
            let jitter = scale * base;
            if jitter <= 0.0 {
                break;
            }
            debug!("Cholesky retry {} with jitter {jitter:e}", attempt + 1);
            match factor_lower(a, jitter, floor) {
                Ok(f) => return Ok(f),
                Err(e) => last = e,
            }
        }
        Err(last)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Diagonal jitter that was added to obtain this factorization.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Smallest pivot `L_kk²`.
    pub fn min_pivot(&self) -> f64 {
        (0..self.n)
            .map(|k| self.l[k * self.n + k].powi(2))
            .fold(f64::INFINITY, f64::min)
    }

    /// Solves `A·X = B` for every column of `B`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        if b.rows() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "factor is {0}x{0}, right-hand side has {1} rows",
                self.n,
                b.rows()
            )));
        }
        let n = self.n;
        let mut x = b.clone();
        let cols = b.cols();
        // Forward: L·Z = B.
        for i in 0..n {
            for k in 0..i {
                let lik = self.l[i * n + k];
                if lik == 0.0 {
                    continue;
                }
                for c in 0..cols {
                    let v = x.get(k, c);
                    x.data[i * cols + c] -= lik * v;
                }
            }
            let lii = self.l[i * n + i];
            for v in x.row_mut(i) {
                *v /= lii;
            }
        }
        // Backward: Lᵀ·X = Z.
        for i in (0..n).rev() {
            for k in i + 1..n {
                let lki = self.l[k * n + i];
                if lki == 0.0 {
                    continue;
                }
                for c in 0..cols {
                    let v = x.get(k, c);
                    x.data[i * cols + c] -= lki * v;
                }
            }
            let lii = self.l[i * n + i];
            for v in x.row_mut(i) {
                *v /= lii;
            }
        }
        Ok(x)
    }

    pub fn inverse(&self) -> Result<Matrix> {
        self.solve(&Matrix::identity(self.n))
    }
}

fn check_square(a: &Matrix) -> Result<()> {
    if a.rows() != a.cols() {
        return Err(Error::DimensionMismatch(format!(
            "expected a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    Ok(())
}

fn factor_lower(a: &Matrix, jitter: f64, floor: f64) -> Result<Cholesky> {
    let n = a.rows();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut pivot = a.get(j, j) + jitter;
        for k in 0..j {
            pivot -= l[j * n + k] * l[j * n + k];
        }
        // Negated so NaN pivots fail too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(pivot > floor) {
            return Err(Error::SingularGram(format!(
                "pivot {j} is {pivot:e} (floor {floor:e}, jitter {jitter:e})"
            )));
        }
        let ljj = pivot.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Ok(Cholesky { n, l, jitter })
}

/// Solves `A·X = B` for symmetric positive-definite `A`, with jitter
/// escalation.
pub fn spd_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    Cholesky::factor_with_jitter(a)?.solve(b)
}

/// 1-norm condition number `‖A‖₁·‖A⁻¹‖₁` of a symmetric matrix; infinite
/// when the matrix does not factor.
pub fn condition_number(a: &Matrix) -> f64 {
    match Cholesky::factor(a).and_then(|f| f.inverse()) {
        Ok(inv) => a.norm_1() * inv.norm_1(),
        Err(_) => f64::INFINITY,
    }
}
