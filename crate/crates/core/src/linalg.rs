//! Minimal dense linear algebra over any [`Scalar`].
//!
//! The saddle-point solves, TLM assemblies and the ROW stage systems all have
//! to run with dual and complex scalars, so the matrix type and the LU
//! factorization are generic. Pivot selection uses the leading value part,
//! which keeps the elimination order of a seeded evaluation identical to the
//! real one (required for complex-step and dual correctness).

use crate::diff::Scalar;
use crate::error::MbsError;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<S> {
    pub rows: usize,
    pub cols: usize,
    pub(crate) data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = S::one();
        }
        m
    }

    pub fn from_rows(rows: &[&[S]]) -> Self {
        let r = rows.len();
        let c = if r > 0 { rows[0].len() } else { 0 };
        let mut m = Mat::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            m.row_mut(i).copy_from_slice(row);
        }
        m
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[S], out: &mut [S]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = S::zero();
            for (a, b) in row.iter().zip(x.iter()) {
                acc += *a * *b;
            }
            out[i] = acc;
        }
    }

    /// `out += alpha * A * x`
    pub fn matvec_acc(&self, alpha: S, x: &[S], out: &mut [S]) {
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = S::zero();
            for (a, b) in row.iter().zip(x.iter()) {
                acc += *a * *b;
            }
            out[i] += alpha * acc;
        }
    }

    /// `out = Aᵀ x`
    pub fn matvec_t(&self, x: &[S], out: &mut [S]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for o in out.iter_mut() {
            *o = S::zero();
        }
        for i in 0..self.rows {
            let row = self.row(i);
            let xi = x[i];
            for (j, a) in row.iter().enumerate() {
                out[j] += *a * xi;
            }
        }
    }

    pub fn matmul(&self, other: &Mat<S>) -> Mat<S> {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self[(i, k)];
                let orow = other.row(k);
                let dst = out.row_mut(i);
                for (d, o) in dst.iter_mut().zip(orow.iter()) {
                    *d += aik * *o;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat<S> {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// Copy `block` into `self` with top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Mat<S>) {
        for i in 0..block.rows {
            let src = block.row(i);
            let dst = &mut self.row_mut(r0 + i)[c0..c0 + block.cols];
            dst.copy_from_slice(src);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|x| x.re().abs())
            .fold(0.0, f64::max)
    }

    /// Infinity norm of `self - other`.
    pub fn max_abs_diff(&self, other: &Mat<S>) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (*a - *b).re().abs())
            .fold(0.0, f64::max)
    }

    pub fn scale(&mut self, alpha: S) {
        for x in self.data.iter_mut() {
            *x *= alpha;
        }
    }
}

impl<S: Scalar> std::ops::Index<(usize, usize)> for Mat<S> {
    type Output = S;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &S {
        &self.data[i * self.cols + j]
    }
}

impl<S: Scalar> std::ops::IndexMut<(usize, usize)> for Mat<S> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        &mut self.data[i * self.cols + j]
    }
}

// ============================================================================
// LU with partial pivoting
// ============================================================================

/// LU factorization with row pivoting, reusable for many right-hand sides.
#[derive(Clone, Debug)]
pub struct Lu<S> {
    lu: Mat<S>,
    piv: Vec<usize>,
}

impl<S: Scalar> Lu<S> {
    /// Factor a square matrix. Fails when a pivot column is numerically zero.
    pub fn factor(a: &Mat<S>) -> Result<Lu<S>, MbsError> {
        assert_eq!(a.rows, a.cols, "LU requires a square matrix");
        let n = a.rows;
        let mut lu = a.clone();
        let mut piv = Vec::with_capacity(n);
        let scale: Vec<f64> = (0..n)
            .map(|i| lu.row(i).iter().map(|x| x.re().abs()).fold(0.0, f64::max))
            .collect();
        for k in 0..n {
            // Partial pivoting on |value part|, row-equilibrated.
            let mut p = k;
            let mut best = -1.0;
            for i in k..n {
                let s = if scale[i] > 0.0 { scale[i] } else { 1.0 };
                let mag = lu[(i, k)].re().abs() / s;
                if mag > best {
                    best = mag;
                    p = i;
                }
            }
            if lu[(p, k)].re().abs() == 0.0 {
                return Err(MbsError::SingularMatrix {
                    context: format!("LU pivot {} of {}", k, n),
                });
            }
            if p != k {
                for j in 0..n {
                    let tmp = lu[(k, j)];
                    lu[(k, j)] = lu[(p, j)];
                    lu[(p, j)] = tmp;
                }
            }
            piv.push(p);
            let pivot = lu[(k, k)];
            // slice-based elimination keeps the inner loop free of
            // recomputed index arithmetic
            let (top, rest) = lu.data.split_at_mut((k + 1) * lu.cols);
            let pivot_row = &top[k * lu.cols + k + 1..k * lu.cols + n];
            for i in 0..(n - k - 1) {
                let row = &mut rest[i * lu.cols + k..i * lu.cols + n];
                let m = row[0] / pivot;
                row[0] = m;
                for (r, u) in row[1..].iter_mut().zip(pivot_row.iter()) {
                    *r -= m * *u;
                }
            }
        }
        Ok(Lu { lu, piv })
    }

    pub fn n(&self) -> usize {
        self.lu.rows
    }

    /// Solve in place.
    pub fn solve_in_place(&self, b: &mut [S]) {
        let n = self.n();
        debug_assert_eq!(b.len(), n);
        for k in 0..n {
            b.swap(k, self.piv[k]);
        }
        for k in 0..n {
            let bk = b[k];
            let col = &self.lu.data[..];
            for i in (k + 1)..n {
                b[i] -= col[i * n + k] * bk;
            }
        }
        for k in (0..n).rev() {
            let mut acc = b[k];
            let row = &self.lu.data[k * n..(k + 1) * n];
            for j in (k + 1)..n {
                acc -= row[j] * b[j];
            }
            b[k] = acc / row[k];
        }
    }

    pub fn solve(&self, b: &[S]) -> Vec<S> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// Solve for every column of `b` (in place).
    pub fn solve_mat(&self, b: &mut Mat<S>) {
        let n = self.n();
        let mut col = vec![S::zero(); n];
        for j in 0..b.cols {
            for i in 0..n {
                col[i] = b[(i, j)];
            }
            self.solve_in_place(&mut col);
            for i in 0..n {
                b[(i, j)] = col[i];
            }
        }
    }
}

/// Numerical rank via column-pivoted elimination on a copy (f64 only);
/// used for DOF verification diagnostics.
pub fn numerical_rank(a: &Mat<f64>, tol: f64) -> usize {
    let mut m = a.clone();
    let rows = m.rows;
    let cols = m.cols;
    let norm = m.max_abs();
    if norm == 0.0 {
        return 0;
    }
    let mut rank = 0;
    let mut row = 0;
    for _ in 0..cols.min(rows) {
        // find largest remaining pivot across all columns
        let mut best = 0.0;
        let mut pr = row;
        let mut pc = 0;
        for i in row..rows {
            for j in 0..cols {
                if m[(i, j)].abs() > best {
                    best = m[(i, j)].abs();
                    pr = i;
                    pc = j;
                }
            }
        }
        if best <= tol * norm {
            break;
        }
        for j in 0..cols {
            let tmp = m[(row, j)];
            m[(row, j)] = m[(pr, j)];
            m[(pr, j)] = tmp;
        }
        let pivot = m[(row, pc)];
        for i in (row + 1)..rows {
            let f = m[(i, pc)] / pivot;
            for j in 0..cols {
                let v = m[(row, j)];
                m[(i, j)] -= f * v;
            }
        }
        rank += 1;
        row += 1;
        if row == rows {
            break;
        }
    }
    rank
}

// Small fixed-size helpers used across the kinematics and force assembly.

#[inline]
pub fn dot3<S: Scalar>(a: &[S; 3], b: &[S; 3]) -> S {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross3<S: Scalar>(a: &[S; 3], b: &[S; 3]) -> [S; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm3<S: Scalar>(a: &[S; 3]) -> S {
    dot3(a, a).sqrt()
}

#[inline]
pub fn sub3<S: Scalar>(a: &[S; 3], b: &[S; 3]) -> [S; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add3<S: Scalar>(a: &[S; 3], b: &[S; 3]) -> [S; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale3<S: Scalar>(a: &[S; 3], s: S) -> [S; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Multiply a 3x3 (array-of-rows) by a 3-vector.
#[inline]
pub fn mat3_vec<S: Scalar>(m: &[[S; 3]; 3], v: &[S; 3]) -> [S; 3] {
    [dot3(&m[0], v), dot3(&m[1], v), dot3(&m[2], v)]
}

/// Multiply the transpose of a 3x3 by a 3-vector.
#[inline]
pub fn mat3_t_vec<S: Scalar>(m: &[[S; 3]; 3], v: &[S; 3]) -> [S; 3] {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

#[inline]
pub fn mat3_mul<S: Scalar>(a: &[[S; 3]; 3], b: &[[S; 3]; 3]) -> [[S; 3]; 3] {
    let mut out = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

/// Infinity norm of the value parts.
pub fn inf_norm<S: Scalar>(v: &[S]) -> f64 {
    v.iter().map(|x| x.re().abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{CStep, Dual};

    #[test]
    fn lu_solves_small_system() {
        let a = Mat::from_rows(&[
            &[2.0, 1.0, -1.0][..],
            &[-3.0, -1.0, 2.0][..],
            &[-2.0, 1.0, 2.0][..],
        ]);
        let lu = Lu::factor(&a).unwrap();
        let x = lu.solve(&[8.0, -11.0, -3.0]);
        assert!((x[0] - 2.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
        assert!((x[2] - -1.0).abs() < 1e-12);
    }

    #[test]
    fn lu_reports_singularity() {
        let a = Mat::from_rows(&[&[1.0, 2.0][..], &[2.0, 4.0][..]]);
        assert!(Lu::factor(&a).is_err());
    }

    #[test]
    fn lu_residual_is_tiny_on_random_matrix() {
        // deterministic congruential fill
        let n = 24;
        let mut state = 1u64;
        let mut rnd = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let mut a = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = rnd();
            }
            a[(i, i)] += 3.0;
        }
        let b: Vec<f64> = (0..n).map(|_| rnd()).collect();
        let lu = Lu::factor(&a).unwrap();
        let x = lu.solve(&b);
        let mut r = vec![0.0; n];
        a.matvec(&x, &mut r);
        for i in 0..n {
            assert!((r[i] - b[i]).abs() < 1e-12, "residual too large");
        }
    }

    #[test]
    fn lu_works_with_dual_scalars() {
        // d/dt solve([2+t, 1; 1, 3] x = [1, 0]) at t=0 against finite differences
        let solve_for = |t: f64| {
            let a = Mat::from_rows(&[&[2.0 + t, 1.0][..], &[1.0, 3.0][..]]);
            Lu::factor(&a).unwrap().solve(&[1.0, 0.0])
        };
        let mut a = Mat::<Dual<f64>>::zeros(2, 2);
        a[(0, 0)] = Dual::seeded(2.0, 1.0);
        a[(0, 1)] = Dual::constant(1.0);
        a[(1, 0)] = Dual::constant(1.0);
        a[(1, 1)] = Dual::constant(3.0);
        let x = Lu::factor(&a)
            .unwrap()
            .solve(&[Dual::constant(1.0), Dual::constant(0.0)]);
        let h = 1e-7;
        let xp = solve_for(h);
        let xm = solve_for(-h);
        for i in 0..2 {
            let fd = (xp[i] - xm[i]) / (2.0 * h);
            assert!((x[i].d - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn lu_works_with_complex_step() {
        let a0 = 2.0;
        let h = 1e-30;
        let mut a = Mat::<CStep>::zeros(2, 2);
        a[(0, 0)] = CStep::new(a0, h);
        a[(0, 1)] = CStep::from_f64(1.0);
        a[(1, 0)] = CStep::from_f64(1.0);
        a[(1, 1)] = CStep::from_f64(3.0);
        let x = Lu::factor(&a)
            .unwrap()
            .solve(&[CStep::from_f64(1.0), CStep::from_f64(0.0)]);
        // analytic: x0 = 3/(3a-1), dx0/da = -9/(3a-1)^2
        let den = 3.0 * a0 - 1.0;
        assert!((x[0].re - 3.0 / den).abs() < 1e-14);
        assert!((x[0].im / h - (-9.0 / (den * den))).abs() < 1e-12);
    }

    #[test]
    fn rank_of_rank_deficient_matrix() {
        let a = Mat::from_rows(&[
            &[1.0, 2.0, 3.0][..],
            &[2.0, 4.0, 6.0][..],
            &[0.0, 1.0, 1.0][..],
        ]);
        assert_eq!(numerical_rank(&a, 1e-12), 2);
    }

    #[test]
    fn cross_product_antisymmetry() {
        let a = [1.0, 2.0, 3.0];
        let b = [-0.5, 0.25, 4.0];
        let ab = cross3(&a, &b);
        let ba = cross3(&b, &a);
        for i in 0..3 {
            assert_eq!(ab[i], -ba[i]);
        }
    }
}
