//! Dense row-major matrices and the scalar kernels shared by every module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Dense row-major `f64` matrix. Every element is finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows.saturating_mul(cols),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite element {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from data already known to be finite and correctly sized.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::from_parts(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::Dimension(format!(
                "row {r} has {} columns, expected {cols}",
                rows[r].len()
            )));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn column(v: &[f64]) -> Result<Self> {
        Matrix::new(v.len(), 1, v.to_vec())
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Mutable access to raw storage. Callers must keep every element finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_parts(idx.len(), self.cols, data)
    }

    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "vstack of {} and {} columns",
                self.cols, other.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix::from_parts(self.rows + other.rows, self.cols, data))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Standard matrix product. Each output element accumulates over the inner
/// dimension in ascending order, so results are bit-reproducible.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Dimension(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    par::for_each_chunk_mut(&mut out, m.max(1), |r, orow| {
        if m == 0 {
            return;
        }
        let arow = &a.data[r * k..(r + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (t, &av) in arow.iter().enumerate() {
                acc += av * b.data[t * m + j];
            }
            *o = acc;
        }
    });
    Ok(Matrix::from_parts(n, m, out))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `log Σ exp(v_i)` with a max shift.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    let max = max_finite(v, "logsumexp")?;
    let s: f64 = v.iter().map(|x| (x - max).exp()).sum();
    Ok(max + s.ln())
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    let max = max_finite(v, "softmax")?;
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn max_finite(v: &[f64], what: &str) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Domain(format!("{what} of an empty sequence")));
    }
    let mut max = f64::NEG_INFINITY;
    for &x in v {
        if !x.is_finite() {
            return Err(Error::Domain(format!("{what} input contains {x}")));
        }
        max = max.max(x);
    }
    Ok(max)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Nearest-rank percentile: the element at 1-based rank `ceil(p/100 * n)`,
/// clamped to `[1, n]`, of the ascending sort.
pub fn percentile(v: &[f64], p: f64) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Domain("percentile of an empty sequence".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Domain(format!("percentile {p} outside [0, 100]")));
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = (p * n as f64 / 100.0).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = A`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    dim: usize,
    lower: Matrix,
}

impl CholeskyFactor {
    pub fn factor(a: &Matrix) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::Dimension(format!(
                "cholesky of non-square {}x{}",
                a.rows, a.cols
            )));
        }
        let n = a.rows;
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l.get(j, k) * l.get(j, k);
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j });
            }
            let ljj = d.sqrt();
            l.set(j, j, ljj);
            for i in j + 1..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, s / ljj);
            }
        }
        Ok(CholeskyFactor { dim: n, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    /// Solves `(L·Lᵀ)·x = b` for every column of `b`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        if b.rows != self.dim {
            return Err(Error::Dimension(format!(
                "solve with {}-dim factor and {} rows",
                self.dim, b.rows
            )));
        }
        let mut out = Matrix::zeros(b.rows, b.cols);
        let mut col = vec![0.0; self.dim];
        for c in 0..b.cols {
            for (r, v) in col.iter_mut().enumerate() {
                *v = b.get(r, c);
            }
            self.solve_in_place(&mut col);
            for (r, v) in col.iter().enumerate() {
                out.set(r, c, *v);
            }
        }
        Ok(out)
    }

    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.dim {
            return Err(Error::Dimension(format!(
                "solve with {}-dim factor and length {}",
                self.dim,
                b.len()
            )));
        }
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        Ok(x)
    }

    /// `bᵀ A⁻¹ b` via one forward substitution: `‖L⁻¹ b‖²`.
    pub fn quadratic_form_inverse(&self, b: &[f64]) -> f64 {
        let y = self.forward_substitute(b);
        dot(&y, &y)
    }

    fn forward_substitute(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.lower.get(i, k) * y[k];
            }
            y[i] = s / self.lower.get(i, i);
        }
        y
    }

    fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.dim;
        let y = self.forward_substitute(x);
        x.copy_from_slice(&y);
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= self.lower.get(k, i) * x[k];
            }
            x[i] = s / self.lower.get(i, i);
        }
    }
}

pub fn cholesky_solve(f: &CholeskyFactor, b: &Matrix) -> Result<Matrix> {
    f.solve(b)
}
