//! Euler-parameter rotation algebra and reference-point kinematic matrices.
//!
//! Orientation is parameterized by the unit 4-vector `p = [e0, e]` with
//! `e0 = cos(χ/2)` and `e = u sin(χ/2)` for an axis-angle rotation `(u, χ)`.
//! The matrices provided here appear throughout constraint assembly, force
//! mapping and friction:
//!
//! - `A(p) = (e0² − eᵀe)I + 2eeᵀ + 2e0 ẽ`  body → global rotation,
//! - `B(p, s′) = ∂(A s′)/∂p`               point-velocity map (3×4),
//! - `E(p) = [−e | ẽ + e0 I]`,  `G(p) = [−e | −ẽ + e0 I]`  (3×4),
//!
//! with `ω = 2 E ṗ` (global frame) and `ω′ = 2 G ṗ` (body frame).

use crate::diff::Scalar;
use crate::error::{MbsError, Result};
use crate::linalg::{cross3, dot3};

/// Euler parameters `[e0, e1, e2, e3]`, unit norm.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct EulerParameters<S>(pub [S; 4]);

impl<S: Scalar> EulerParameters<S> {
    pub fn identity() -> Self {
        EulerParameters([S::one(), S::zero(), S::zero(), S::zero()])
    }

    /// Axis-angle constructor; `axis` need not be normalized.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> EulerParameters<f64> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let h = angle * 0.5;
        let s = h.sin() / n;
        EulerParameters([h.cos(), axis[0] * s, axis[1] * s, axis[2] * s])
    }

    #[inline]
    pub fn e0(&self) -> S {
        self.0[0]
    }

    #[inline]
    pub fn e(&self) -> [S; 3] {
        [self.0[1], self.0[2], self.0[3]]
    }

    pub fn norm(&self) -> S {
        let p = &self.0;
        (p[0] * p[0] + p[1] * p[1] + p[2] * p[2] + p[3] * p[3]).sqrt()
    }

    /// Scale to unit norm (holomorphic; safe under dual/complex evaluation).
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        let p = &self.0;
        EulerParameters([p[0] / n, p[1] / n, p[2] / n, p[3] / n])
    }

    fn check_unit(&self) -> Result<()> {
        let dev = (self.norm().re() - 1.0).abs();
        if dev > 1e-6 {
            return Err(MbsError::NonUnitEulerParameters {
                norm: self.norm().re(),
            });
        }
        Ok(())
    }
}

/// Per-body kinematic state: reference point position/velocity plus
/// orientation and its rate. Consistent velocities satisfy `pᵀṗ ≈ 0`.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct BodyState {
    pub r: [f64; 3],
    pub p: [f64; 4],
    pub rdot: [f64; 3],
    pub pdot: [f64; 4],
}

impl BodyState {
    pub fn at_rest(r: [f64; 3], p: [f64; 4]) -> Self {
        BodyState {
            r,
            p,
            rdot: [0.0; 3],
            pdot: [0.0; 4],
        }
    }
}

/// Skew matrix: `tilde(x) · y = x × y`.
pub fn tilde<S: Scalar>(x: &[S; 3]) -> [[S; 3]; 3] {
    let z = S::zero();
    [
        [z, -x[2], x[1]],
        [x[2], z, -x[0]],
        [-x[1], x[0], z],
    ]
}

/// Rotation matrix `A(p)`; rejects non-unit parameters (beyond 1e-6).
pub fn rotation_matrix<S: Scalar>(p: &EulerParameters<S>) -> Result<[[S; 3]; 3]> {
    p.check_unit()?;
    Ok(rotation_matrix_unchecked(p))
}

/// `A(p) = (e0² − eᵀe)I + 2eeᵀ + 2e0 ẽ` without the unit-norm check; used in
/// hot paths where the caller maintains the invariant.
pub fn rotation_matrix_unchecked<S: Scalar>(p: &EulerParameters<S>) -> [[S; 3]; 3] {
    let e0 = p.e0();
    let e = p.e();
    let two = S::from_f64(2.0);
    let c = e0 * e0 - dot3(&e, &e);
    let et = tilde(&e);
    let mut a = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut v = two * e[i] * e[j] + two * e0 * et[i][j];
            if i == j {
                v += c;
            }
            a[i][j] = v;
        }
    }
    a
}

/// `E(p) = [−e | ẽ + e0 I]` as a 3×4 array of rows.
pub fn e_matrix<S: Scalar>(p: &EulerParameters<S>) -> [[S; 4]; 3] {
    let e0 = p.e0();
    let e = p.e();
    let et = tilde(&e);
    let mut m = [[S::zero(); 4]; 3];
    for i in 0..3 {
        m[i][0] = -e[i];
        for j in 0..3 {
            m[i][j + 1] = et[i][j];
        }
        m[i][i + 1] += e0;
    }
    m
}

/// `G(p) = [−e | −ẽ + e0 I]` as a 3×4 array of rows.
pub fn g_matrix<S: Scalar>(p: &EulerParameters<S>) -> [[S; 4]; 3] {
    let e0 = p.e0();
    let e = p.e();
    let et = tilde(&e);
    let mut m = [[S::zero(); 4]; 3];
    for i in 0..3 {
        m[i][0] = -e[i];
        for j in 0..3 {
            m[i][j + 1] = -et[i][j];
        }
        m[i][i + 1] += e0;
    }
    m
}

/// `B(p, s′) = ∂(A(p) s′)/∂p = 2[(e0 I + ẽ)s′ | e s′ᵀ − (e0 I + ẽ) s̃′]`.
pub fn b_matrix<S: Scalar>(p: &EulerParameters<S>, s_local: &[S; 3]) -> [[S; 4]; 3] {
    let e0 = p.e0();
    let e = p.e();
    let two = S::from_f64(2.0);
    // first column: (e0 I + ẽ) s′ = e0 s′ + e × s′
    let exs = cross3(&e, s_local);
    let col0 = [
        e0 * s_local[0] + exs[0],
        e0 * s_local[1] + exs[1],
        e0 * s_local[2] + exs[2],
    ];
    // 3x3 block: e s′ᵀ − (e0 I + ẽ) s̃′
    let st = tilde(s_local);
    let et = tilde(&e);
    let mut m = [[S::zero(); 4]; 3];
    for i in 0..3 {
        m[i][0] = two * col0[i];
        for j in 0..3 {
            // (ẽ s̃′)_{ij}
            let mut ets = S::zero();
            for k in 0..3 {
                ets += et[i][k] * st[k][j];
            }
            m[i][j + 1] = two * (e[i] * s_local[j] - e0 * st[i][j] - ets);
        }
    }
    m
}

/// All three kinematic matrices at once.
pub fn kinematic_matrices<S: Scalar>(
    p: &EulerParameters<S>,
    s_local: &[S; 3],
) -> Result<([[S; 4]; 3], [[S; 4]; 3], [[S; 4]; 3])> {
    p.check_unit()?;
    Ok((b_matrix(p, s_local), e_matrix(p), g_matrix(p)))
}

/// Global angular velocity `ω = 2 E(p) ṗ`.
pub fn angular_velocity<S: Scalar>(p: &EulerParameters<S>, pdot: &[S; 4]) -> [S; 3] {
    let e = e_matrix(p);
    let two = S::from_f64(2.0);
    let mut w = [S::zero(); 3];
    for i in 0..3 {
        let mut acc = S::zero();
        for j in 0..4 {
            acc += e[i][j] * pdot[j];
        }
        w[i] = two * acc;
    }
    w
}

/// Body-frame angular velocity `ω′ = 2 G(p) ṗ`.
pub fn angular_velocity_body<S: Scalar>(p: &EulerParameters<S>, pdot: &[S; 4]) -> [S; 3] {
    let g = g_matrix(p);
    let two = S::from_f64(2.0);
    let mut w = [S::zero(); 3];
    for i in 0..3 {
        let mut acc = S::zero();
        for j in 0..4 {
            acc += g[i][j] * pdot[j];
        }
        w[i] = two * acc;
    }
    w
}

/// Apply a 3×4 kinematic matrix to a 4-vector.
#[inline]
pub fn mat34_vec<S: Scalar>(m: &[[S; 4]; 3], v: &[S; 4]) -> [S; 3] {
    let mut out = [S::zero(); 3];
    for i in 0..3 {
        out[i] = m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2] + m[i][3] * v[3];
    }
    out
}

/// Apply the transpose of a 3×4 kinematic matrix to a 3-vector.
#[inline]
pub fn mat34_t_vec<S: Scalar>(m: &[[S; 4]; 3], v: &[S; 3]) -> [S; 4] {
    let mut out = [S::zero(); 4];
    for j in 0..4 {
        out[j] = m[0][j] * v[0] + m[1][j] * v[1] + m[2][j] * v[2];
    }
    out
}

/// Global position of a body-fixed point: `r + A(p) s′`.
pub fn point_global<S: Scalar>(r: &[S; 3], p: &EulerParameters<S>, s_local: &[S; 3]) -> [S; 3] {
    let a = rotation_matrix_unchecked(p);
    let rot = crate::linalg::mat3_vec(&a, s_local);
    crate::linalg::add3(r, &rot)
}

/// Global velocity of a body-fixed point: `ṙ + B(p, s′) ṗ`.
pub fn point_velocity<S: Scalar>(
    rdot: &[S; 3],
    p: &EulerParameters<S>,
    pdot: &[S; 4],
    s_local: &[S; 3],
) -> [S; 3] {
    let b = b_matrix(p, s_local);
    let bp = mat34_vec(&b, pdot);
    crate::linalg::add3(rdot, &bp)
}

/// `ṗ` for a prescribed global angular velocity: `ṗ = ½ Eᵀ ω`.
pub fn pdot_from_omega<S: Scalar>(p: &EulerParameters<S>, omega: &[S; 3]) -> [S; 4] {
    let e = e_matrix(p);
    let half = S::from_f64(0.5);
    let mut out = mat34_t_vec(&e, omega);
    for o in out.iter_mut() {
        *o = *o * half;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{dual_directional, Dual};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_unit_p(rng: &mut StdRng) -> EulerParameters<f64> {
        let p = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        EulerParameters(p).normalized()
    }

    #[test]
    fn tilde_zero_is_zero_matrix() {
        let m = tilde(&[0.0, 0.0, 0.0]);
        for row in &m {
            for &v in row {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn tilde_matches_cross_product() {
        // hand cross product: [1,2,3] x [4,5,6] = [-3, 6, -3]
        let x = [1.0, 2.0, 3.0];
        let y = [4.0, 5.0, 6.0];
        let m = tilde(&x);
        let my = crate::linalg::mat3_vec(&m, &y);
        assert_eq!(my, [-3.0, 6.0, -3.0]);
    }

    #[test]
    fn tilde_is_antisymmetric() {
        let x = [0.3, -1.2, 2.2];
        let m = tilde(&x);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m[i][j], -m[j][i]);
            }
        }
    }

    #[test]
    fn identity_rotation() {
        let a = rotation_matrix(&EulerParameters::<f64>::identity()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(a[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn half_turn_about_x() {
        // p = [0,1,0,0]: evaluating A(p) by hand gives diag(1,-1,-1)
        let a = rotation_matrix(&EulerParameters([0.0, 1.0, 0.0, 0.0])).unwrap();
        let expect = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((a[i][j] - expect[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rotation_rejects_non_unit() {
        let p = EulerParameters([1.0, 0.1, 0.0, 0.0]);
        assert!(rotation_matrix(&p).is_err());
    }

    #[test]
    fn rotation_is_proper_orthonormal() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let p = random_unit_p(&mut rng);
            let a = rotation_matrix(&p).unwrap();
            // AᵀA = I
            for i in 0..3 {
                for j in 0..3 {
                    let mut acc = 0.0;
                    for k in 0..3 {
                        acc += a[k][i] * a[k][j];
                    }
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((acc - expect).abs() < 1e-12);
                }
            }
            // det A = 1
            let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
                - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
            assert!((det - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn double_cover() {
        let mut rng = StdRng::seed_from_u64(8);
        let p = random_unit_p(&mut rng);
        let pm = EulerParameters([-p.0[0], -p.0[1], -p.0[2], -p.0[3]]);
        let a = rotation_matrix(&p).unwrap();
        let am = rotation_matrix(&pm).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((a[i][j] - am[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identity_e_and_g() {
        let p = EulerParameters::<f64>::identity();
        let e = e_matrix(&p);
        let g = g_matrix(&p);
        for i in 0..3 {
            assert_eq!(e[i][0], 0.0);
            assert_eq!(g[i][0], 0.0);
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_eq!(e[i][j + 1], expect);
                assert_eq!(g[i][j + 1], expect);
            }
        }
    }

    #[test]
    fn e_et_and_g_gt_are_identity() {
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..100 {
            let p = random_unit_p(&mut rng);
            let e = e_matrix(&p);
            let g = g_matrix(&p);
            for m in [&e, &g] {
                for i in 0..3 {
                    for j in 0..3 {
                        let mut acc = 0.0;
                        for k in 0..4 {
                            acc += m[i][k] * m[j][k];
                        }
                        let expect = if i == j { 1.0 } else { 0.0 };
                        assert!((acc - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn b_matrix_is_derivative_of_rotated_point() {
        let mut rng = StdRng::seed_from_u64(10);
        for _ in 0..50 {
            let p = random_unit_p(&mut rng);
            let s = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let b = b_matrix(&p, &s);
            // directional dual derivative of A(p)·s′ along each e_j
            for j in 0..4 {
                let mut dir = [0.0; 4];
                dir[j] = 1.0;
                let (_, der) = dual_directional(
                    |pd: &[Dual<f64>], out: &mut Vec<Dual<f64>>| {
                        let pe = EulerParameters([pd[0], pd[1], pd[2], pd[3]]);
                        let sd = [
                            Dual::constant(s[0]),
                            Dual::constant(s[1]),
                            Dual::constant(s[2]),
                        ];
                        let a = rotation_matrix_unchecked(&pe);
                        let v = crate::linalg::mat3_vec(&a, &sd);
                        out.extend_from_slice(&v);
                    },
                    &p.0,
                    &dir,
                    3,
                );
                for i in 0..3 {
                    assert!(
                        (b[i][j] - der[i]).abs() < 1e-12,
                        "B[{},{}] = {} vs dual {}",
                        i,
                        j,
                        b[i][j],
                        der[i]
                    );
                }
            }
        }
    }

    #[test]
    fn angular_velocity_zero_at_rest() {
        let p = EulerParameters::<f64>::identity();
        let w = angular_velocity(&p, &[0.0; 4]);
        assert_eq!(w, [0.0; 3]);
    }

    #[test]
    fn angular_velocity_pure_spin() {
        // p(t) = [cos(Ωt/2), 0, 0, sin(Ωt/2)]  =>  ω = [0, 0, Ω]
        let omega = 3.7;
        let t = 0.21;
        let h = omega * t * 0.5;
        let p = EulerParameters([h.cos(), 0.0, 0.0, h.sin()]);
        let pdot = [
            -0.5 * omega * h.sin(),
            0.0,
            0.0,
            0.5 * omega * h.cos(),
        ];
        let w = angular_velocity(&p, &pdot);
        assert!((w[0]).abs() < 1e-14);
        assert!((w[1]).abs() < 1e-14);
        assert!((w[2] - omega).abs() < 1e-13);
    }

    #[test]
    fn angular_velocity_matches_finite_difference_of_axes() {
        // rotate about a fixed axis; ω from 2Eṗ matches (A(t+h) - A(t-h))/2h · Aᵀ
        let axis = [0.36, -0.48, 0.8];
        let rate = 1.3;
        let p_of_t = |t: f64| EulerParameters::<f64>::from_axis_angle(axis, rate * t);
        let t0 = 0.4;
        let h = 1e-5;
        let p = p_of_t(t0);
        let pp = p_of_t(t0 + h);
        let pm = p_of_t(t0 - h);
        let pdot = [
            (pp.0[0] - pm.0[0]) / (2.0 * h),
            (pp.0[1] - pm.0[1]) / (2.0 * h),
            (pp.0[2] - pm.0[2]) / (2.0 * h),
            (pp.0[3] - pm.0[3]) / (2.0 * h),
        ];
        let w = angular_velocity(&p, &pdot);
        for i in 0..3 {
            assert!((w[i] - rate * axis[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn pdot_from_omega_round_trip() {
        let mut rng = StdRng::seed_from_u64(11);
        let p = random_unit_p(&mut rng);
        let w = [0.3, -1.1, 0.7];
        let pdot = pdot_from_omega(&p, &w);
        // pᵀṗ = 0
        let dot: f64 = (0..4).map(|i| p.0[i] * pdot[i]).sum();
        assert!(dot.abs() < 1e-14);
        let w2 = angular_velocity(&p, &pdot);
        for i in 0..3 {
            assert!((w[i] - w2[i]).abs() < 1e-13);
        }
    }
}
