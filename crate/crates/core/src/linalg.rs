//! Dense row-major matrices and the handful of factorizations the method
//! needs: thin Householder QR, singular values by one-sided Jacobi, and a
//! pivoted LU solve for the small-dimension Cayley reference path.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{ForaError, Result};
use crate::rng::RngStream;

/// Thread-local instrumentation of multiply-add counts and the largest
/// matrix allocated. Used by tests to assert that factored code paths never
/// build a `d x d` matrix and stay within their flop budget.
pub mod probe {
    use std::cell::Cell;

    thread_local! {
        static MADDS: Cell<u64> = const { Cell::new(0) };
        static LARGEST: Cell<usize> = const { Cell::new(0) };
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub struct Reading {
        /// Scalar multiply-adds performed by the matmul family.
        pub madds: u64,
        /// Element count of the largest matrix constructed.
        pub largest_alloc: usize,
    }

    pub fn reset() {
        MADDS.with(|c| c.set(0));
        LARGEST.with(|c| c.set(0));
    }

    pub fn read() -> Reading {
        Reading {
            madds: MADDS.with(|c| c.get()),
            largest_alloc: LARGEST.with(|c| c.get()),
        }
    }

    pub(crate) fn count_madds(n: u64) {
        MADDS.with(|c| c.set(c.get().wrapping_add(n)));
    }

    pub(crate) fn note_alloc(elems: usize) {
        LARGEST.with(|c| {
            if elems > c.get() {
                c.set(elems)
            }
        });
    }
}

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            let row = self.row(i);
            let shown: Vec<String> = row.iter().take(8).map(|v| format!("{v:.6}")).collect();
            let more = if self.cols > 8 { ", ..." } else { "" };
            writeln!(f, "  [{}{}]", shown.join(", "), more)?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(ForaError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        probe::note_alloc(data.len());
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        probe::note_alloc(rows * cols);
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Build from nested row slices. Panics on ragged input; intended for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), n_cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        probe::note_alloc(data.len());
        Self {
            rows: n_rows,
            cols: n_cols,
            data,
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(ForaError::ShapeMismatch {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        let mut out = self.clone();
        out.add_assign(other, 1.0)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let mut out = self.clone();
        out.add_assign(other, -1.0)?;
        Ok(out)
    }

    /// `self += s * other`.
    pub fn add_assign(&mut self, other: &Matrix, s: f64) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        let mut out = self.clone();
        out.scale_in_place(s);
        out
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = f(*v));
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Columns `[start, end)` as a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols);
        let w = end - start;
        let mut out = Matrix::zeros(self.rows, w);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..end]);
        }
        out
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(ForaError::ShapeMismatch {
                op: "hcat",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, self.cols + other.cols);
        for i in 0..self.rows {
            let row = out.row_mut(i);
            row[..self.cols].copy_from_slice(self.row(i));
            row[self.cols..].copy_from_slice(other.row(i));
        }
        Ok(out)
    }

    /// `‖selfᵀ self − I‖_F`, the orthonormality defect of the columns.
    pub fn orthonormality_defect(&self) -> f64 {
        let gram = matmul_tn(self, self).expect("gram of self");
        let mut acc = 0.0;
        for i in 0..self.cols {
            for j in 0..self.cols {
                let target = if i == j { 1.0 } else { 0.0 };
                let d = gram[(i, j)] - target;
                acc += d * d;
            }
        }
        acc.sqrt()
    }

    /// Row-major little-endian bytes of the data block.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

// Strided dgemm wrapper: C (m x n) = op(A) (m x k) * op(B) (k x n).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
) -> Matrix {
    let mut c = Matrix::zeros(m, n);
    probe::count_madds((m * k * n) as u64);
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: strides describe in-bounds views of `a` (m x k), `b` (k x n)
    // and the freshly allocated row-major `c` (m x n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(ForaError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(gemm(
        a.rows,
        a.cols,
        b.cols,
        &a.data,
        a.cols as isize,
        1,
        &b.data,
        b.cols as isize,
        1,
    ))
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(ForaError::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(gemm(
        a.rows,
        a.cols,
        b.rows,
        &a.data,
        a.cols as isize,
        1,
        &b.data,
        1,
        b.cols as isize,
    ))
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(ForaError::ShapeMismatch {
            op: "matmul_tn",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(gemm(
        a.cols,
        a.rows,
        b.cols,
        &a.data,
        1,
        a.cols as isize,
        &b.data,
        b.cols as isize,
        1,
    ))
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.sum_squares().sqrt()
}

/// Matrix with i.i.d. `N(0, stddev²)` entries, filled row-major.
pub fn random_gaussian(rows: usize, cols: usize, stddev: f64, stream: &mut RngStream) -> Matrix {
    debug_assert!(stddev > 0.0);
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data.iter_mut() {
        *v = stddev * stream.gaussian();
    }
    m
}

/// Thin QR factors: `q` has orthonormal columns and `r_factor` is upper
/// triangular with a non-negative diagonal, which makes the pair unique.
#[derive(Debug, Clone)]
pub struct QrThin {
    pub q: Matrix,
    pub r_factor: Matrix,
}

/// Householder thin QR of a tall matrix.
///
/// Fails with [`ForaError::RankDeficient`] when a diagonal entry of R falls
/// below `1e-12 · ‖m‖_F`.
pub fn qr_thin(m: &Matrix) -> Result<QrThin> {
    let (d, r) = m.shape();
    if d < r {
        return Err(ForaError::ShapeMismatch {
            op: "qr_thin (needs rows >= cols)",
            lhs: m.shape(),
            rhs: (r, r),
        });
    }
    let tol = 1e-12 * m.frobenius_norm();
    // Work column-major: each column contiguous.
    let mut cols: Vec<Vec<f64>> = (0..r).map(|j| m.column(j)).collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(r);

    for j in 0..r {
        let x = &cols[j][j..];
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= tol {
            return Err(ForaError::RankDeficient { column: j });
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = x.to_vec();
        v[0] -= alpha;
        let vnorm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if vnorm > 0.0 {
            v.iter_mut().for_each(|t| *t /= vnorm);
        }
        // H = I - 2 v vᵀ applied to the trailing columns.
        for col in cols.iter_mut().skip(j) {
            let tail = &mut col[j..];
            let dot: f64 = tail.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (t, vi) in tail.iter_mut().zip(&v) {
                *t -= 2.0 * dot * vi;
            }
        }
        reflectors.push(v);
    }

    let mut r_factor = Matrix::zeros(r, r);
    for (j, col) in cols.iter().enumerate() {
        for i in 0..=j {
            r_factor[(i, j)] = col[i];
        }
    }

    // Q = H_0 H_1 ... H_{r-1} applied to the first r columns of I.
    let mut q_cols: Vec<Vec<f64>> = (0..r)
        .map(|j| {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            e
        })
        .collect();
    for (j, v) in reflectors.iter().enumerate().rev() {
        for qc in q_cols.iter_mut() {
            let tail = &mut qc[j..];
            let dot: f64 = tail.iter().zip(v).map(|(a, b)| a * b).sum();
            if dot != 0.0 {
                for (t, vi) in tail.iter_mut().zip(v) {
                    *t -= 2.0 * dot * vi;
                }
            }
        }
    }

    // Sign convention: non-negative diagonal of R.
    for i in 0..r {
        if r_factor[(i, i)] < 0.0 {
            for j in 0..r {
                r_factor[(i, j)] = -r_factor[(i, j)];
            }
            q_cols[i].iter_mut().for_each(|t| *t = -*t);
        }
    }

    let q = Matrix::from_fn(d, r, |i, j| q_cols[j][i]);
    Ok(QrThin { q, r_factor })
}

/// Singular values, sorted descending, length `min(rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    values: Vec<f64>,
}

impl Spectrum {
    /// Wrap raw values; they are sorted descending and clamped at zero.
    pub fn from_values(mut values: Vec<f64>) -> Self {
        values.iter_mut().for_each(|v| *v = v.max(0.0));
        values.sort_by(|a, b| b.total_cmp(a));
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn largest(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }
}

/// Singular values by one-sided (Hestenes) Jacobi on the shorter side.
///
/// Relative accuracy is high for every value, including the ~0 tail of a
/// rank-deficient product, which matters for entropy-based rank measures.
pub fn singular_values(m: &Matrix) -> Spectrum {
    // Columns of the working set are the rows of `m` when it is wide.
    let mut cols: Vec<Vec<f64>> = if m.cols <= m.rows {
        (0..m.cols).map(|j| m.column(j)).collect()
    } else {
        (0..m.rows).map(|i| m.row(i).to_vec()).collect()
    };
    let p = cols.len();
    let tol = 1e-15;
    for _sweep in 0..80 {
        let mut rotated = false;
        for i in 0..p {
            for j in (i + 1)..p {
                let (left, right) = cols.split_at_mut(j);
                let ci = &mut left[i];
                let cj = &mut right[0];
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for (a, b) in ci.iter().zip(cj.iter()) {
                    alpha += a * a;
                    beta += b * b;
                    gamma += a * b;
                }
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (a, b) in ci.iter_mut().zip(cj.iter_mut()) {
                    let x = *a;
                    let y = *b;
                    *a = c * x - s * y;
                    *b = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    Spectrum::from_values(
        cols.iter()
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect(),
    )
}

/// Solve `a · x = b` by LU with partial pivoting. `a` must be square.
pub fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows;
    if a.cols != n || b.rows != n {
        return Err(ForaError::ShapeMismatch {
            op: "solve",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut lu = a.clone();
    let mut x = b.clone();
    let k_cols = b.cols;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| lu[(i, col)].abs().total_cmp(&lu[(j, col)].abs()))
            .unwrap_or(col);
        if lu[(pivot, col)] == 0.0 {
            return Err(ForaError::RankDeficient { column: col });
        }
        if pivot != col {
            for j in 0..n {
                lu.data.swap(col * n + j, pivot * n + j);
            }
            for j in 0..k_cols {
                x.data.swap(col * k_cols + j, pivot * k_cols + j);
            }
        }
        let p = lu[(col, col)];
        for i in (col + 1)..n {
            let f = lu[(i, col)] / p;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                lu[(i, j)] -= f * lu[(col, j)];
            }
            for j in 0..k_cols {
                x[(i, j)] -= f * x[(col, j)];
            }
        }
    }
    for col in (0..n).rev() {
        let p = lu[(col, col)];
        for j in 0..k_cols {
            let mut acc = x[(col, j)];
            for k in (col + 1)..n {
                acc -= lu[(col, k)] * x[(k, j)];
            }
            x[(col, j)] = acc / p;
        }
    }
    if !x.is_finite() {
        return Err(ForaError::NonFinite("solve"));
    }
    Ok(x)
}
