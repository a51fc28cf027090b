//! Dense helpers for `DIM`-dimensional vectors and matrices.
//!
//! Everything here is written with index loops over `DIM` rather than
//! unrolled planar formulas, so the bracket/transport algebra reads the same
//! as it would in any dimension.

use crate::{Vector, DIM};

pub fn dot(a: &Vector, b: &Vector) -> f64 {
    let mut s = 0.0;
    for i in 0..DIM {
        s += a[i] * b[i];
    }
    s
}

pub fn norm(a: &Vector) -> f64 {
    dot(a, a).sqrt()
}

pub fn add(a: &Vector, b: &Vector) -> Vector {
    let mut r = [0.0; DIM];
    for i in 0..DIM {
        r[i] = a[i] + b[i];
    }
    r
}

pub fn sub(a: &Vector, b: &Vector) -> Vector {
    let mut r = [0.0; DIM];
    for i in 0..DIM {
        r[i] = a[i] - b[i];
    }
    r
}

pub fn scale(a: &Vector, c: f64) -> Vector {
    let mut r = [0.0; DIM];
    for i in 0..DIM {
        r[i] = c * a[i];
    }
    r
}

/// A dense `DIM x DIM` matrix in row-major order.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Matrix(pub [[f64; DIM]; DIM]);

impl Matrix {
    pub fn zero() -> Self {
        Matrix([[0.0; DIM]; DIM])
    }

    pub fn identity() -> Self {
        let mut m = Self::zero();
        for i in 0..DIM {
            m.0[i][i] = 1.0;
        }
        m
    }

    pub fn diag(d: &Vector) -> Self {
        let mut m = Self::zero();
        for i in 0..DIM {
            m.0[i][i] = d[i];
        }
        m
    }

    pub fn outer(a: &Vector, b: &Vector) -> Self {
        let mut m = Self::zero();
        for i in 0..DIM {
            for j in 0..DIM {
                m.0[i][j] = a[i] * b[j];
            }
        }
        m
    }

    pub fn transpose(&self) -> Self {
        let mut m = Self::zero();
        for i in 0..DIM {
            for j in 0..DIM {
                m.0[i][j] = self.0[j][i];
            }
        }
        m
    }

    pub fn apply(&self, v: &Vector) -> Vector {
        let mut r = [0.0; DIM];
        for i in 0..DIM {
            for j in 0..DIM {
                r[i] += self.0[i][j] * v[j];
            }
        }
        r
    }

    pub fn mul(&self, other: &Matrix) -> Matrix {
        let mut m = Matrix::zero();
        for i in 0..DIM {
            for j in 0..DIM {
                let mut s = 0.0;
                for k in 0..DIM {
                    s += self.0[i][k] * other.0[k][j];
                }
                m.0[i][j] = s;
            }
        }
        m
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        let mut m = *self;
        for i in 0..DIM {
            for j in 0..DIM {
                m.0[i][j] += other.0[i][j];
            }
        }
        m
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        let mut m = *self;
        for i in 0..DIM {
            for j in 0..DIM {
                m.0[i][j] -= other.0[i][j];
            }
        }
        m
    }

    pub fn scale(&self, c: f64) -> Matrix {
        let mut m = *self;
        for i in 0..DIM {
            for j in 0..DIM {
                m.0[i][j] *= c;
            }
        }
        m
    }

    pub fn sym_part(&self) -> Matrix {
        self.add(&self.transpose()).scale(0.5)
    }

    /// Frobenius inner product `A : B`.
    pub fn frob_dot(&self, other: &Matrix) -> f64 {
        let mut s = 0.0;
        for i in 0..DIM {
            for j in 0..DIM {
                s += self.0[i][j] * other.0[i][j];
            }
        }
        s
    }

    pub fn frob_norm(&self) -> f64 {
        self.frob_dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for i in 0..DIM {
            for j in 0..DIM {
                m = m.max(self.0[i][j].abs());
            }
        }
        m
    }

    pub fn trace(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..DIM {
            s += self.0[i][i];
        }
        s
    }

    /// Quadratic form `u · A v`.
    pub fn quad(&self, u: &Vector, v: &Vector) -> f64 {
        dot(u, &self.apply(v))
    }

    /// Determinant by LU elimination with partial pivoting.
    pub fn det(&self) -> f64 {
        let mut a = self.0;
        let mut d = 1.0;
        for col in 0..DIM {
            let mut pivot = col;
            for row in col + 1..DIM {
                if a[row][col].abs() > a[pivot][col].abs() {
                    pivot = row;
                }
            }
            if a[pivot][col] == 0.0 {
                return 0.0;
            }
            if pivot != col {
                a.swap(pivot, col);
                d = -d;
            }
            d *= a[col][col];
            for row in col + 1..DIM {
                let f = a[row][col] / a[col][col];
                for k in col..DIM {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
        d
    }

    /// Inverse by Gauss-Jordan elimination with partial pivoting.
    /// Returns `None` for a numerically singular matrix.
    pub fn inverse(&self) -> Option<Matrix> {
        let mut a = self.0;
        let mut inv = Matrix::identity().0;
        for col in 0..DIM {
            let mut pivot = col;
            for row in col + 1..DIM {
                if a[row][col].abs() > a[pivot][col].abs() {
                    pivot = row;
                }
            }
            if a[pivot][col].abs() < f64::MIN_POSITIVE.sqrt() {
                return None;
            }
            a.swap(pivot, col);
            inv.swap(pivot, col);
            let p = a[col][col];
            for k in 0..DIM {
                a[col][k] /= p;
                inv[col][k] /= p;
            }
            for row in 0..DIM {
                if row != col {
                    let f = a[row][col];
                    for k in 0..DIM {
                        a[row][k] -= f * a[col][k];
                        inv[row][k] -= f * inv[col][k];
                    }
                }
            }
        }
        Some(Matrix(inv))
    }

    /// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
    /// Returns eigenvalues and the orthogonal matrix whose columns are the
    /// corresponding eigenvectors.
    pub fn sym_eigen(&self) -> (Vector, Matrix) {
        debug_assert!(
            self.sub(&self.transpose()).max_abs() <= 1e-10 * (1.0 + self.max_abs()),
            "sym_eigen requires a symmetric matrix"
        );
        let mut a = self.sym_part().0;
        let mut v = Matrix::identity().0;
        for _sweep in 0..32 {
            let mut off = 0.0f64;
            for p in 0..DIM {
                for q in p + 1..DIM {
                    off = off.max(a[p][q].abs());
                }
            }
            if off <= 1e-15 * (1.0 + self.max_abs()) {
                break;
            }
            for p in 0..DIM {
                for q in p + 1..DIM {
                    if a[p][q].abs() <= f64::MIN_POSITIVE {
                        continue;
                    }
                    let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..DIM {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..DIM {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                    for k in 0..DIM {
                        let vkp = v[k][p];
                        let vkq = v[k][q];
                        v[k][p] = c * vkp - s * vkq;
                        v[k][q] = s * vkp + c * vkq;
                    }
                }
            }
        }
        let mut vals = [0.0; DIM];
        for i in 0..DIM {
            vals[i] = a[i][i];
        }
        (vals, Matrix(v))
    }

    /// Smallest eigenvalue of a symmetric matrix.
    pub fn min_eig(&self) -> f64 {
        let (vals, _) = self.sym_eigen();
        vals.iter().fold(f64::INFINITY, |m, &x| m.min(x))
    }

    /// Largest eigenvalue of a symmetric matrix.
    pub fn max_eig(&self) -> f64 {
        let (vals, _) = self.sym_eigen();
        vals.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x))
    }

    /// Applies `f` to the eigenvalues of a symmetric matrix.
    pub fn sym_map_eig(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let (vals, vecs) = self.sym_eigen();
        let mut mapped = [0.0; DIM];
        for i in 0..DIM {
            mapped[i] = f(vals[i]);
        }
        vecs.mul(&Matrix::diag(&mapped)).mul(&vecs.transpose())
    }

    /// Positive part of a symmetric matrix: eigenvalues clipped at zero.
    pub fn positive_part(&self) -> Matrix {
        self.sym_map_eig(|x| x.max(0.0))
    }

    /// Square root of a symmetric positive semidefinite matrix, with
    /// eigenvalues floored at `floor` before the root.
    pub fn sqrt_spd(&self, floor: f64) -> Matrix {
        self.sym_map_eig(|x| x.max(floor).sqrt())
    }

    /// Inverse square root with the same eigenvalue floor.
    pub fn inv_sqrt_spd(&self, floor: f64) -> Matrix {
        self.sym_map_eig(|x| 1.0 / x.max(floor).sqrt())
    }
}

/// Solves the dense system `a x = b` in place by Gaussian elimination with
/// partial pivoting. Returns the solution and an infinity-norm condition
/// estimate of the (row-equilibrated) matrix, or `None` if singular.
pub fn solve_dense(a: &[Vec<f64>], b: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = a.len();
    debug_assert!(a.iter().all(|row| row.len() == n) && b.len() == n);
    // Row equilibration keeps the condition estimate meaningful when rows
    // carry wildly different scales (frame entries near the origin).
    let mut m = vec![vec![0.0; n + 1]; n];
    let mut eq = vec![vec![0.0; n]; n];
    for i in 0..n {
        let s = a[i].iter().fold(0.0f64, |acc, &x| acc.max(x.abs()));
        if s == 0.0 {
            return None;
        }
        for j in 0..n {
            m[i][j] = a[i][j] / s;
            eq[i][j] = a[i][j] / s;
        }
        m[i][n] = b[i] / s;
    }
    let norm_a = (0..n)
        .map(|i| eq[i].iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if m[row][col].abs() > m[pivot][col].abs() {
                pivot = row;
            }
        }
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(pivot, col);
        for row in 0..n {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..=n {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    let x: Vec<f64> = (0..n).map(|i| m[i][n] / m[i][i]).collect();
    // Condition estimate via the explicit inverse of the equilibrated matrix;
    // the systems here are tiny so this is affordable.
    let mut inv = vec![vec![0.0; n]; n];
    for rhs in 0..n {
        let e: Vec<f64> = (0..n).map(|i| if i == rhs { 1.0 } else { 0.0 }).collect();
        let mut mm = vec![vec![0.0; n + 1]; n];
        for i in 0..n {
            for j in 0..n {
                mm[i][j] = eq[i][j];
            }
            mm[i][n] = e[i];
        }
        for col in 0..n {
            let mut pivot = col;
            for row in col + 1..n {
                if mm[row][col].abs() > mm[pivot][col].abs() {
                    pivot = row;
                }
            }
            if mm[pivot][col].abs() < 1e-300 {
                return None;
            }
            mm.swap(pivot, col);
            for row in 0..n {
                if row != col {
                    let f = mm[row][col] / mm[col][col];
                    for k in col..=n {
                        mm[row][k] -= f * mm[col][k];
                    }
                }
            }
        }
        for i in 0..n {
            inv[i][rhs] = mm[i][n] / mm[i][i];
        }
    }
    let norm_inv = (0..n)
        .map(|i| inv[i].iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    Some((x, norm_a * norm_inv))
}
