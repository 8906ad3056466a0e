//! Dense row-major `f64` matrices with the few decompositions the detector needs:
//! a one-sided Jacobi SVD, a cyclic Jacobi symmetric eigensolver, and seeded
//! orthonormal initialization.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, RoddError};

/// Off-diagonal mass (relative) at which the Jacobi sweeps stop.
const JACOBI_TOL: f64 = 1e-12;

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
    /// Builds a matrix from row-major data, rejecting wrong lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(RoddError::contract(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(RoddError::contract(format!(
                "non-finite matrix entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(RoddError::contract("ragged rows"));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[f64]) {
        for (r, &v) in values.iter().enumerate() {
            self[(r, c)] = v;
        }
    }

    /// Rows `indices` gathered into a new matrix, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_vec_unchecked(indices.len(), self.cols, data)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    /// `self · other`. Panics on mismatched inner dimensions.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} times {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul: row counts differ");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t: column counts differ");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a_row, other.row(j));
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_vec_unchecked(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "elementwise op on mismatched shapes"
        );
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Matrix::from_vec_unchecked(self.rows, self.cols, data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest `|a_ij − a_ji|`, or infinity for non-square matrices.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// `‖selfᵀ·self − I‖_∞` (max-entry norm): how far the columns are from orthonormal.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.t_matmul(self);
        gram.sub(&Matrix::identity(self.cols)).max_abs()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Thin singular value decomposition `M = U·diag(sigma)·Vᵀ`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, s) in self.sigma.iter().enumerate() {
                us[(r, c)] *= s;
            }
        }
        us.matmul_t(&self.v)
    }
}

/// Thin SVD by one-sided (Hestenes) Jacobi rotations.
///
/// Singular values are returned nonincreasing. Each right singular vector is
/// sign-fixed so that its largest-magnitude entry is nonnegative, and the
/// matching left vector is flipped with it.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(RoddError::contract("svd of an empty matrix"));
    }
    if !m.is_finite() {
        return Err(RoddError::contract("svd of a non-finite matrix"));
    }
    if m.rows() < m.cols() {
        let t = svd(&m.transpose())?;
        let mut out = SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        };
        fix_signs(&mut out.v, Some(&mut out.u));
        return Ok(out);
    }

    let (rows, n) = (m.rows(), m.cols());
    // Work on columns so rotations touch contiguous memory.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| m.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();

    let max_sweeps = 100 * n;
    let mut converged = false;
    let mut worst = 0.0;
    for _ in 0..max_sweeps {
        worst = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                worst = worst.max(off);
                if off <= f64::EPSILON {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if worst <= JACOBI_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(RoddError::NumericFailure {
            what: "jacobi svd".into(),
            residual: worst,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let sigma_max = norms[order[0]];
    let cutoff = sigma_max * 1e-13 * (rows.max(n) as f64);
    let mut u = Matrix::zeros(rows, n);
    let mut vm = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        vm.set_column(k, &v[j]);
        if s > cutoff && s > 0.0 {
            let col: Vec<f64> = cols[j].iter().map(|x| x / s).collect();
            u.set_column(k, &col);
            sigma.push(s);
        } else {
            pending.push(k);
            sigma.push(if s > 0.0 { s } else { 0.0 });
        }
    }
    complete_columns(&mut u, &pending);

    let mut out = SvdResult { u, sigma, v: vm };
    fix_signs(&mut out.v, Some(&mut out.u));
    Ok(out)
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (a, b) = (&mut lo[p], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills columns `pending` of `u` with unit vectors orthogonal to every other column.
fn complete_columns(u: &mut Matrix, pending: &[usize]) {
    let rows = u.rows();
    let mut filled: Vec<usize> = (0..u.cols()).filter(|c| !pending.contains(c)).collect();
    let mut candidate = 0;
    for &k in pending {
        loop {
            assert!(candidate < rows, "cannot complete orthonormal basis");
            let mut e = vec![0.0; rows];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &f in &filled {
                    let col = u.column(f);
                    let proj = dot(&e, &col);
                    for (x, c) in e.iter_mut().zip(&col) {
                        *x -= proj * c;
                    }
                }
            }
            let n = norm(&e);
            if n > 1e-6 {
                let e: Vec<f64> = e.iter().map(|x| x / n).collect();
                u.set_column(k, &e);
                filled.push(k);
                break;
            }
        }
    }
}

/// Makes the largest-magnitude entry (first on ties) of each column nonnegative,
/// flipping the paired column of `partner` along with it.
fn fix_signs(m: &mut Matrix, mut partner: Option<&mut Matrix>) {
    for c in 0..m.cols() {
        let mut best = 0;
        let mut best_abs = -1.0;
        for r in 0..m.rows() {
            let a = m[(r, c)].abs();
            if a > best_abs {
                best_abs = a;
                best = r;
            }
        }
        if m[(best, c)] < 0.0 {
            for r in 0..m.rows() {
                m[(r, c)] = -m[(r, c)];
            }
            if let Some(p) = partner.as_deref_mut() {
                for r in 0..p.rows() {
                    p[(r, c)] = -p[(r, c)];
                }
            }
        }
    }
}

/// Symmetric eigendecomposition `S = Q·diag(λ)·Qᵀ` by cyclic Jacobi rotations.
/// Eigenvalues come back nonincreasing.
pub fn sym_eig(s: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if !s.is_square() || s.rows() == 0 {
        return Err(RoddError::contract(format!(
            "sym_eig needs a nonempty square matrix, got {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    if !s.is_finite() {
        return Err(RoddError::contract("sym_eig of a non-finite matrix"));
    }
    let asym = s.asymmetry();
    if asym > 1e-10 * s.max_abs().max(1.0) {
        return Err(RoddError::contract(format!(
            "sym_eig input is not symmetric (max asymmetry {asym:e})"
        )));
    }

    let n = s.rows();
    let mut a = s.clone();
    // Symmetrize exactly so rounding noise in the input cannot accumulate.
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
    let scale = a.frobenius_norm();
    let mut q = Matrix::identity(n);
    let off_norm = |a: &Matrix| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += a[(i, j)] * a[(i, j)];
                }
            }
        }
        acc.sqrt()
    };

    let max_sweeps = 100 * n;
    let mut off = off_norm(&a);
    let mut sweeps = 0;
    while off > JACOBI_TOL * scale * 1e-3 && off > f64::MIN_POSITIVE {
        if sweeps == max_sweeps {
            return Err(RoddError::NumericFailure {
                what: "jacobi eigensolver".into(),
                residual: off,
            });
        }
        sweeps += 1;
        for p in 0..n {
            for r in p + 1..n {
                let apq = a[(p, r)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(r, r)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta.is_finite() {
                    let sgn = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sgn / (theta.abs() + (theta * theta + 1.0).sqrt())
                } else {
                    0.0
                };
                if t == 0.0 {
                    a[(p, r)] = 0.0;
                    a[(r, p)] = 0.0;
                    continue;
                }
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, r)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, r)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(r, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(r, k)] = sn * apk + c * aqk;
                }
                a[(p, r)] = 0.0;
                a[(r, p)] = 0.0;
                for k in 0..n {
                    let qkp = q[(k, p)];
                    let qkq = q[(k, r)];
                    q[(k, p)] = c * qkp - sn * qkq;
                    q[(k, r)] = sn * qkp + c * qkq;
                }
            }
        }
        off = off_norm(&a);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[(y, y)].total_cmp(&a[(x, x)]).then(x.cmp(&y)));
    let values: Vec<f64> = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &q.column(i));
    }
    fix_signs(&mut vectors, None);
    Ok((values, vectors))
}

/// A `d×l` matrix with orthonormal columns: seeded standard-normal draws
/// orthonormalized by modified Gram–Schmidt.
pub fn orthonormal_init(d: usize, l: usize, seed: u64) -> Result<Matrix> {
    if l > d {
        return Err(RoddError::contract(format!(
            "cannot place {l} orthonormal columns in dimension {d}"
        )));
    }
    if l == 0 {
        return Err(RoddError::contract(
            "orthonormal_init needs at least one column",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(l);
    while cols.len() < l {
        let mut c: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        for prev in &cols {
            let proj = dot(&c, prev);
            for (x, p) in c.iter_mut().zip(prev) {
                *x -= proj * p;
            }
        }
        let n = norm(&c);
        if n < 1e-8 {
            continue;
        }
        c.iter_mut().for_each(|x| *x /= n);
        // Second pass keeps orthogonality at rounding level.
        for prev in &cols {
            let proj = dot(&c, prev);
            for (x, p) in c.iter_mut().zip(prev) {
                *x -= proj * p;
            }
        }
        let n = norm(&c);
        c.iter_mut().for_each(|x| *x /= n);
        cols.push(c);
    }
    let mut w = Matrix::zeros(d, l);
    for (j, c) in cols.iter().enumerate() {
        w.set_column(j, c);
    }
    Ok(w)
}
