//! Small dense linear-algebra helpers on top of `nalgebra`.
//!
//! Vectors are stored as single-column [`Mat`] values so that every
//! coefficient of a problem shares one representation.

use nalgebra::DMatrix;

/// Dense real matrix; vectors are `k x 1` matrices.
pub type Mat = DMatrix<f64>;

/// Zero matrix of the given shape.
pub fn zeros(rows: usize, cols: usize) -> Mat {
    Mat::zeros(rows, cols)
}

/// Identity matrix of size `n`.
pub fn eye(n: usize) -> Mat {
    Mat::identity(n, n)
}

/// Column vector from a slice.
pub fn col(values: &[f64]) -> Mat {
    Mat::from_column_slice(values.len(), 1, values)
}

/// Matrix from row-major data.
pub fn from_rows(rows: usize, cols: usize, data: &[f64]) -> Mat {
    Mat::from_row_slice(rows, cols, data)
}

/// Scalar wrapped as a `1 x 1` matrix.
pub fn scalar(value: f64) -> Mat {
    Mat::from_element(1, 1, value)
}

/// Row-major copy of the entries.
pub fn row_major(m: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Symmetric part `(M + M^T) / 2`.
pub fn sym(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of a square matrix.
pub fn min_eig_sym(m: &Mat) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    sym(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Largest absolute entry.
pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Largest absolute entry of `a - b`.
pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0, |acc, (x, y)| acc.max((x - y).abs()))
}

/// True when `|M - M^T|` is entrywise within `tol`.
pub fn is_symmetric(m: &Mat, tol: f64) -> bool {
    m.is_square() && max_abs_diff(m, &m.transpose()) <= tol
}

/// True when every entry is finite.
pub fn is_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Inverse of a square matrix, or `None` when it is numerically singular.
pub fn inverse(m: &Mat) -> Option<Mat> {
    if m.nrows() == 1 {
        let v = m[(0, 0)];
        return if v != 0.0 && v.is_finite() {
            Some(scalar(1.0 / v))
        } else {
            None
        };
    }
    m.clone().try_inverse()
}

/// Projection onto the positive semidefinite cone, applied only when the
/// smallest eigenvalue falls below `threshold`.
pub fn psd_project(m: &Mat, threshold: f64) -> Mat {
    let s = sym(m);
    if min_eig_sym(&s) >= threshold {
        return s;
    }
    let eig = s.symmetric_eigen();
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    &eig.eigenvectors * Mat::from_diagonal(&clipped) * eig.eigenvectors.transpose()
}

/// Euclidean inner product of two column vectors.
pub fn dot(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Symmetric square root of a positive semidefinite matrix; negative
/// eigenvalues are clipped to zero.
pub fn sqrt_psd(m: &Mat) -> Mat {
    if m.nrows() == 1 {
        return scalar(m[(0, 0)].max(0.0).sqrt());
    }
    let eig = sym(m).symmetric_eigen();
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * Mat::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Row-major copy of a matrix for tight loops over flat state buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    zero: bool,
}

impl Dense {
    pub fn new(m: &Mat) -> Self {
        let data = row_major(m);
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            zero: data.iter().all(|v| *v == 0.0),
            data,
        }
    }

    /// True when every entry is zero.
    pub fn is_zero(&self) -> bool {
        self.zero
    }

    /// Row-major block matrix `[[M₀₀, M₀₁, …], [M₁₀, …], …]`; a `None` entry
    /// is a zero block whose shape follows its row and column neighbours.
    pub fn blocks(rows: &[usize], cols: &[usize], parts: &[&[Option<&Mat>]]) -> Self {
        let (nr, nc) = (rows.iter().sum::<usize>(), cols.iter().sum::<usize>());
        let mut m = zeros(nr, nc);
        let mut r0 = 0;
        for (bi, &r) in rows.iter().enumerate() {
            let mut c0 = 0;
            for (bj, &c) in cols.iter().enumerate() {
                if let Some(b) = parts[bi][bj] {
                    m.view_mut((r0, c0), (r, c)).copy_from(b);
                }
                c0 += c;
            }
            r0 += r;
        }
        Self::new(&m)
    }

    /// `out = M x`.
    #[inline]
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let c = self.cols;
        for i in 0..self.rows {
            let mut s = 0.0;
            for j in 0..c {
                s += self.data[i * c + j] * x[j];
            }
            out[i] = s;
        }
    }

    /// `out += scale * M x`.
    #[inline]
    pub fn apply_add(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        if self.zero {
            return;
        }
        for (i, o) in out.iter_mut().enumerate().take(self.rows) {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut s = 0.0;
            for (a, b) in row.iter().zip(x) {
                s += a * b;
            }
            *o += scale * s;
        }
    }
}

/// Cubic Hermite interpolation on `[t0, t1]` returning value and derivative.
pub fn hermite(s: f64, t0: f64, t1: f64, y0: &Mat, y1: &Mat, d0: &Mat, d1: &Mat) -> (Mat, Mat) {
    let h = t1 - t0;
    let x = (s - t0) / h;
    let x2 = x * x;
    let x3 = x2 * x;
    let h00 = 2.0 * x3 - 3.0 * x2 + 1.0;
    let h10 = x3 - 2.0 * x2 + x;
    let h01 = -2.0 * x3 + 3.0 * x2;
    let h11 = x3 - x2;
    let value = y0 * h00 + d0 * (h10 * h) + y1 * h01 + d1 * (h11 * h);
    let g00 = (6.0 * x2 - 6.0 * x) / h;
    let g10 = 3.0 * x2 - 4.0 * x + 1.0;
    let g01 = (-6.0 * x2 + 6.0 * x) / h;
    let g11 = 3.0 * x2 - 2.0 * x;
    let deriv = y0 * g00 + d0 * g10 + y1 * g01 + d1 * g11;
    (value, deriv)
}
