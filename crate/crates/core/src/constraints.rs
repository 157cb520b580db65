//! Holonomic constraint assembly: Φ, its Jacobian, the acceleration
//! right-hand side `c = −(Φ_q q̇)_q q̇`, and the second-order directional
//! products consumed by the tangent linear model.
//!
//! Row layout: joints in declaration order, then one Euler-norm row
//! (`pᵀp − 1`) per body. All curvature products are Jacobian-vector products
//! formed by nested dual seeds; no derivative tensor is ever materialized.
//! The key identity used throughout: for `φ(ε) = Φ(q + εw)`,
//! `φ''(0) = (Φ_q w)_q w`, so one `Dual<Dual<S>>` pass with both seeds `w`
//! yields the full second directional derivative.

use crate::diff::{Dual, Scalar};
use crate::error::{MbsError, Result};
use crate::linalg::{dot3, mat3_vec, numerical_rank, sub3, Mat};
use crate::model::{BodyRef, EvalModel, JointKind, MbModel, Pin};
use crate::spatial::{b_matrix, point_global, rotation_matrix_unchecked, EulerParameters};

/// Body coordinates `(r, p)` out of the stacked vector.
#[inline]
pub fn body_rp<S: Scalar>(q: &[S], b: usize) -> ([S; 3], EulerParameters<S>) {
    let o = 7 * b;
    (
        [q[o], q[o + 1], q[o + 2]],
        EulerParameters([q[o + 3], q[o + 4], q[o + 5], q[o + 6]]),
    )
}

/// Joint frame axis `col` of body `side` in global coordinates: `A C e_col`.
fn joint_axis<S: Scalar>(q: &[S], body: usize, c: &[[f64; 3]; 3], col: usize) -> [S; 3] {
    let (_, p) = body_rp(q, body);
    let a = rotation_matrix_unchecked(&p);
    let axis_body = [
        S::from_f64(c[0][col]),
        S::from_f64(c[1][col]),
        S::from_f64(c[2][col]),
    ];
    mat3_vec(&a, &axis_body)
}

fn ground_axis<S: Scalar>(c: &[[f64; 3]; 3], col: usize) -> [S; 3] {
    [
        S::from_f64(c[0][col]),
        S::from_f64(c[1][col]),
        S::from_f64(c[2][col]),
    ]
}

/// Global joint point on body `side` (ground: `s_j` is already global).
fn joint_point<S: Scalar>(q: &[S], body: BodyRef, s: &[S; 3]) -> [S; 3] {
    match body {
        BodyRef::Body(b) => {
            let (r, p) = body_rp(q, b);
            point_global(&r, &p, s)
        }
        BodyRef::Ground => *s,
    }
}

fn axis_of<S: Scalar>(q: &[S], body: BodyRef, c: &[[f64; 3]; 3], col: usize) -> [S; 3] {
    match body {
        BodyRef::Body(b) => joint_axis(q, b, c, col),
        BodyRef::Ground => ground_axis(c, col),
    }
}

/// Evaluate the rows of one joint into `out`.
pub fn joint_rows_into<S: Scalar>(em: &EvalModel<'_, S>, k: usize, q: &[S], out: &mut Vec<S>) {
    let spec = &em.model.joints[k];
    let ev = &em.joints[k];
    let bi = BodyRef::Body(spec.body_i);
    match spec.kind {
        JointKind::Spherical => {
            let pi = joint_point(q, bi, &ev.s_i);
            let pj = joint_point(q, spec.body_j, &ev.s_j);
            out.extend_from_slice(&sub3(&pi, &pj));
        }
        JointKind::Revolute => {
            let pi = joint_point(q, bi, &ev.s_i);
            let pj = joint_point(q, spec.body_j, &ev.s_j);
            out.extend_from_slice(&sub3(&pi, &pj));
            let xi = joint_axis(q, spec.body_i, &spec.c_i, 0);
            let yi = joint_axis(q, spec.body_i, &spec.c_i, 1);
            let zj = axis_of(q, spec.body_j, &spec.c_j, 2);
            out.push(dot3(&xi, &zj));
            out.push(dot3(&yi, &zj));
        }
        JointKind::Universal => {
            let pi = joint_point(q, bi, &ev.s_i);
            let pj = joint_point(q, spec.body_j, &ev.s_j);
            out.extend_from_slice(&sub3(&pi, &pj));
            let zi = joint_axis(q, spec.body_i, &spec.c_i, 2);
            let zj = axis_of(q, spec.body_j, &spec.c_j, 2);
            out.push(dot3(&zi, &zj));
        }
        JointKind::Cylindrical | JointKind::Translational => {
            let pi = joint_point(q, bi, &ev.s_i);
            let pj = joint_point(q, spec.body_j, &ev.s_j);
            let d = sub3(&pj, &pi);
            let xi = joint_axis(q, spec.body_i, &spec.c_i, 0);
            let yi = joint_axis(q, spec.body_i, &spec.c_i, 1);
            let zj = axis_of(q, spec.body_j, &spec.c_j, 2);
            // point on line
            out.push(dot3(&xi, &d));
            out.push(dot3(&yi, &d));
            // axis parallel
            out.push(dot3(&xi, &zj));
            out.push(dot3(&yi, &zj));
            if spec.kind == JointKind::Translational {
                // no relative rotation about the axis
                let yj = axis_of(q, spec.body_j, &spec.c_j, 1);
                out.push(dot3(&xi, &yj));
            }
        }
        JointKind::GroundLock => {
            let (r, p) = body_rp(q, spec.body_i);
            let target = ev
                .lock_r
                .clone()
                .unwrap_or_else(|| {
                    let g = em.model.bodies[spec.body_i].initial_guess.r;
                    [S::from_f64(g[0]), S::from_f64(g[1]), S::from_f64(g[2])]
                });
            for i in 0..3 {
                out.push(r[i] - target[i]);
            }
            let pg = em.model.bodies[spec.body_i].initial_guess.p;
            for i in 1..4 {
                out.push(p.0[i] - S::from_f64(pg[i]));
            }
        }
        JointKind::PlanarContact => {
            let (r, p) = body_rp(q, spec.body_i);
            let z0 = ev.lock_z.unwrap_or_else(S::zero);
            out.push(r[2] - z0);
            out.push(p.0[1]);
            out.push(p.0[2]);
            out.push(p.0[3]);
        }
    }
}

/// Full constraint vector Φ(q, ρ), including Euler-norm rows.
pub fn eval_constraints_into<S: Scalar>(em: &EvalModel<'_, S>, q: &[S], out: &mut Vec<S>) {
    out.clear();
    for k in 0..em.model.joints.len() {
        joint_rows_into(em, k, q, out);
    }
    for b in 0..em.model.nb() {
        let (_, p) = body_rp(q, b);
        let pp = p.0;
        out.push(pp[0] * pp[0] + pp[1] * pp[1] + pp[2] * pp[2] + pp[3] * pp[3] - S::one());
    }
}

pub fn eval_constraints<S: Scalar>(em: &EvalModel<'_, S>, q: &[S]) -> Vec<S> {
    let mut out = Vec::with_capacity(em.model.m());
    eval_constraints_into(em, q, &mut out);
    out
}

/// Lift a model instantiation one dual level for nested evaluation.
pub fn lift_model<'m, S: Scalar>(em: &EvalModel<'m, S>) -> EvalModel<'m, Dual<S>> {
    let rho: Vec<Dual<S>> = em.rho.iter().map(|&r| Dual::constant(r)).collect();
    em.model
        .instantiate(&rho)
        .expect("lifted instantiation cannot fail after base instantiation")
}

/// Constraint Jacobian Φ_q (m×n), assembled by forward seeding; equals
/// `jacobian_forward` of [`eval_constraints`] by construction.
pub fn constraint_jacobian<S: Scalar>(em: &EvalModel<'_, S>, q: &[S]) -> Mat<S> {
    let n = em.model.n();
    let m = em.model.m();
    let emd = lift_model(em);
    let mut jac = Mat::zeros(m, n);
    let mut qd: Vec<Dual<S>> = q.iter().map(|&x| Dual::constant(x)).collect();
    let mut out: Vec<Dual<S>> = Vec::with_capacity(m);
    for j in 0..n {
        qd[j].d = S::one();
        eval_constraints_into(&emd, &qd, &mut out);
        for i in 0..m {
            jac[(i, j)] = out[i].d;
        }
        qd[j].d = S::zero();
    }
    jac
}

/// Per-joint Jacobian blocks w.r.t. body i's coordinates:
/// `(Φ^k_{r_i}, Φ^k_{p_i})` of shapes `mk×3` and `mk×4`.
pub fn joint_jacobian_body_i<S: Scalar>(
    em: &EvalModel<'_, S>,
    k: usize,
    q: &[S],
) -> (Mat<S>, Mat<S>) {
    let emd = lift_model(em);
    joint_jacobian_body_i_with(em, &emd, k, q)
}

/// Variant of [`joint_jacobian_body_i`] reusing a pre-lifted model (hot
/// paths call this once per joint with one shared lift).
pub fn joint_jacobian_body_i_with<'m, S: Scalar>(
    em: &EvalModel<'m, S>,
    emd: &EvalModel<'m, Dual<S>>,
    k: usize,
    q: &[S],
) -> (Mat<S>, Mat<S>) {
    let spec = &em.model.joints[k];
    let mk = spec.kind.rows();
    let mut qd: Vec<Dual<S>> = q.iter().map(|&x| Dual::constant(x)).collect();
    let mut phi_r = Mat::zeros(mk, 3);
    let mut phi_p = Mat::zeros(mk, 4);
    let base = 7 * spec.body_i;
    let mut out: Vec<Dual<S>> = Vec::with_capacity(mk);
    for j in 0..7 {
        qd[base + j].d = S::one();
        out.clear();
        joint_rows_into(&emd, k, &qd, &mut out);
        for i in 0..mk {
            if j < 3 {
                phi_r[(i, j)] = out[i].d;
            } else {
                phi_p[(i, j - 3)] = out[i].d;
            }
        }
        qd[base + j].d = S::zero();
    }
    (phi_r, phi_p)
}

/// Constraint velocity `Φ̇ = Φ_q q̇` by one directional pass.
pub fn phi_dot<S: Scalar>(em: &EvalModel<'_, S>, q: &[S], qdot: &[S]) -> Vec<S> {
    let emd = lift_model(em);
    phi_dot_with(&emd, q, qdot)
}

/// [`phi_dot`] with the lift hoisted out.
pub fn phi_dot_with<'m, S: Scalar>(
    emd: &EvalModel<'m, Dual<S>>,
    q: &[S],
    qdot: &[S],
) -> Vec<S> {
    let qd: Vec<Dual<S>> = q
        .iter()
        .zip(qdot.iter())
        .map(|(&x, &v)| Dual::seeded(x, v))
        .collect();
    let mut out = Vec::with_capacity(emd.model.m());
    eval_constraints_into(emd, &qd, &mut out);
    out.iter().map(|o| o.d).collect()
}

/// `Φ_qᵀ λ` as an n-vector, assembled joint-block by joint-block plus the
/// analytic Euler-row gradients `2 λ_b p_b`.
pub fn phi_qt_lambda<S: Scalar>(em: &EvalModel<'_, S>, q: &[S], lam: &[S]) -> Vec<S> {
    let emd = lift_model(em);
    phi_qt_lambda_with(&emd, q, lam)
}

/// [`phi_qt_lambda`] with the lift hoisted out.
pub fn phi_qt_lambda_with<'m, S: Scalar>(
    emd: &EvalModel<'m, Dual<S>>,
    q: &[S],
    lam: &[S],
) -> Vec<S> {
    let model = emd.model;
    let n = model.n();
    let mut out = vec![S::zero(); n];
    let mut qd: Vec<Dual<S>> = q.iter().map(|&x| Dual::constant(x)).collect();
    let mut rows: Vec<Dual<S>> = Vec::new();
    for k in 0..model.joints.len() {
        let range = model.joint_rows(k);
        let spec = &model.joints[k];
        let mut bodies = vec![spec.body_i];
        if let BodyRef::Body(bj) = spec.body_j {
            bodies.push(bj);
        }
        for b in bodies {
            let base = 7 * b;
            for j in 0..7 {
                qd[base + j].d = S::one();
                rows.clear();
                joint_rows_into(&emd, k, &qd, &mut rows);
                let mut acc = S::zero();
                for (i, r) in rows.iter().enumerate() {
                    acc += lam[range.start + i] * r.d;
                }
                out[base + j] += acc;
                qd[base + j].d = S::zero();
            }
        }
    }
    let two = S::from_f64(2.0);
    for b in 0..model.nb() {
        let le = lam[model.euler_row(b)];
        let o = 7 * b + 3;
        for j in 0..4 {
            out[o + j] += two * le * q[o + j];
        }
    }
    out
}

/// Acceleration right-hand side `c = −(Φ_q q̇)_q q̇`, evaluated as the second
/// directional derivative of Φ along q̇ (no tensor assembly).
pub fn c_term<S: Scalar>(em: &EvalModel<'_, S>, q: &[S], qdot: &[S]) -> Vec<S> {
    let em2 = lift_model(&lift_model(em));
    c_term_with(&em2, q, qdot)
}

/// [`c_term`] with the double lift hoisted out.
pub fn c_term_with<'m, S: Scalar>(
    em2: &EvalModel<'m, Dual<Dual<S>>>,
    q: &[S],
    qdot: &[S],
) -> Vec<S> {
    let q2: Vec<Dual<Dual<S>>> = q
        .iter()
        .zip(qdot.iter())
        .map(|(&x, &v)| Dual::new(Dual::seeded(x, v), Dual::constant(v)))
        .collect();
    let mut out = Vec::with_capacity(em2.model.m());
    eval_constraints_into(em2, &q2, &mut out);
    out.iter().map(|o| -o.d.d).collect()
}

/// Second-order constraint products for the TLM, per request.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TlmRequest {
    /// `(Φ_qᵀ λ)_q`, n×n.
    PhiQtLambdaQ,
    /// `c_q = −(HessΦ[q̇, q̇])_q`, m×n.
    CQ,
    /// `c_q̇ = −2 HessΦ[q̇, ·]`, m×n.
    CQdot,
    /// `c_ρ`, m×p.
    CRho,
    /// `(Φ_q q̈)_q`, m×n.
    PhiQQddotQ,
    /// `Φ_qρ q̈` columns, m×p.
    PhiQRhoQddot,
    /// `Φ_ρ`, m×p.
    PhiRho,
}

/// Evaluate one TLM constraint product. Each column is one nested dual pass;
/// directions are q̇, q̈, λ, or parameter unit seeds as appropriate.
pub fn tlm_constraint_products<S: Scalar>(
    em: &EvalModel<'_, S>,
    q: &[S],
    qdot: &[S],
    qddot: &[S],
    lam: &[S],
    request: TlmRequest,
) -> Mat<S> {
    let model = em.model;
    let n = model.n();
    let m = model.m();
    let p = model.n_param;
    match request {
        TlmRequest::PhiQtLambdaQ => {
            // column k = ∂(Φ_qᵀλ)/∂q_k via an outer dual seed
            let emd = lift_model(em);
            let lam_d: Vec<Dual<S>> = lam.iter().map(|&l| Dual::constant(l)).collect();
            let mut out = Mat::zeros(n, n);
            let mut qd: Vec<Dual<S>> = q.iter().map(|&x| Dual::constant(x)).collect();
            for k in 0..n {
                qd[k].d = S::one();
                let col = phi_qt_lambda(&emd, &qd, &lam_d);
                for i in 0..n {
                    out[(i, k)] = col[i].d;
                }
                qd[k].d = S::zero();
            }
            out
        }
        TlmRequest::CQ => {
            // column k = −∂/∂q_k HessΦ[q̇, q̇]: triple nesting, outer seed e_k
            let em3 = lift_model(&lift_model(&lift_model(em)));
            let mut out = Mat::zeros(m, n);
            let mut rows = Vec::with_capacity(m);
            for k in 0..n {
                let q3: Vec<Dual<Dual<Dual<S>>>> = (0..n)
                    .map(|i| {
                        let inner = Dual::new(Dual::seeded(q[i], qdot[i]), Dual::constant(qdot[i]));
                        let outer_seed = if i == k {
                            Dual::constant(Dual::constant(S::one()))
                        } else {
                            Dual::constant(Dual::constant(S::zero()))
                        };
                        Dual::new(inner, outer_seed)
                    })
                    .collect();
                rows.clear();
                eval_constraints_into(&em3, &q3, &mut rows);
                for i in 0..m {
                    out[(i, k)] = -rows[i].d.d.d;
                }
            }
            out
        }
        TlmRequest::CQdot => {
            // column k = −2 HessΦ[q̇, e_k]
            let em2 = lift_model(&lift_model(em));
            let two = S::from_f64(2.0);
            let mut out = Mat::zeros(m, n);
            let mut rows = Vec::with_capacity(m);
            for k in 0..n {
                let q2: Vec<Dual<Dual<S>>> = (0..n)
                    .map(|i| {
                        let ek = if i == k { S::one() } else { S::zero() };
                        Dual::new(Dual::seeded(q[i], qdot[i]), Dual::constant(ek))
                    })
                    .collect();
                rows.clear();
                eval_constraints_into(&em2, &q2, &mut rows);
                for i in 0..m {
                    out[(i, k)] = -two * rows[i].d.d;
                }
            }
            out
        }
        TlmRequest::CRho => {
            // column k = −∂/∂ρ_k HessΦ[q̇, q̇]
            let mut out = Mat::zeros(m, p);
            let mut rows = Vec::with_capacity(m);
            for k in 0..p {
                let rho3: Vec<Dual<Dual<Dual<S>>>> = em
                    .rho
                    .iter()
                    .enumerate()
                    .map(|(i, &r)| {
                        let seed = if i == k { S::one() } else { S::zero() };
                        Dual::new(
                            Dual::constant(Dual::constant(r)),
                            Dual::constant(Dual::constant(seed)),
                        )
                    })
                    .collect();
                let em3 = em.model.instantiate(&rho3).expect("lifted rho");
                let q3: Vec<Dual<Dual<Dual<S>>>> = (0..n)
                    .map(|i| {
                        Dual::constant(Dual::new(
                            Dual::seeded(q[i], qdot[i]),
                            Dual::constant(qdot[i]),
                        ))
                    })
                    .collect();
                rows.clear();
                eval_constraints_into(&em3, &q3, &mut rows);
                for i in 0..m {
                    out[(i, k)] = -rows[i].d.d.d;
                }
            }
            out
        }
        TlmRequest::PhiQQddotQ => {
            // column k = HessΦ[q̈, e_k]
            let em2 = lift_model(&lift_model(em));
            let mut out = Mat::zeros(m, n);
            let mut rows = Vec::with_capacity(m);
            for k in 0..n {
                let q2: Vec<Dual<Dual<S>>> = (0..n)
                    .map(|i| {
                        let ek = if i == k { S::one() } else { S::zero() };
                        Dual::new(Dual::seeded(q[i], qddot[i]), Dual::constant(ek))
                    })
                    .collect();
                rows.clear();
                eval_constraints_into(&em2, &q2, &mut rows);
                for i in 0..m {
                    out[(i, k)] = rows[i].d.d;
                }
            }
            out
        }
        TlmRequest::PhiQRhoQddot => {
            // column k = ∂/∂ρ_k (Φ_q q̈)
            let mut out = Mat::zeros(m, p);
            let mut rows = Vec::with_capacity(m);
            for k in 0..p {
                let rho2: Vec<Dual<Dual<S>>> = em
                    .rho
                    .iter()
                    .enumerate()
                    .map(|(i, &r)| {
                        let seed = if i == k { S::one() } else { S::zero() };
                        Dual::new(Dual::constant(r), Dual::constant(seed))
                    })
                    .collect();
                let em2 = em.model.instantiate(&rho2).expect("lifted rho");
                let q2: Vec<Dual<Dual<S>>> = (0..n)
                    .map(|i| Dual::constant(Dual::seeded(q[i], qddot[i])))
                    .collect();
                rows.clear();
                eval_constraints_into(&em2, &q2, &mut rows);
                for i in 0..m {
                    out[(i, k)] = rows[i].d.d;
                }
            }
            out
        }
        TlmRequest::PhiRho => {
            let mut out = Mat::zeros(m, p);
            let mut rows = Vec::with_capacity(m);
            for k in 0..p {
                let rho1: Vec<Dual<S>> = em
                    .rho
                    .iter()
                    .enumerate()
                    .map(|(i, &r)| Dual::seeded(r, if i == k { S::one() } else { S::zero() }))
                    .collect();
                let emd = em.model.instantiate(&rho1).expect("lifted rho");
                let q1: Vec<Dual<S>> = q.iter().map(|&x| Dual::constant(x)).collect();
                rows.clear();
                eval_constraints_into(&emd, &q1, &mut rows);
                for i in 0..m {
                    out[(i, k)] = rows[i].d;
                }
            }
            out
        }
    }
}

// ============================================================================
// Temporary (pinning) constraints and stacked system
// ============================================================================

/// Stacked residual `[Φ; Ψ]` where Ψ pins the declared independent
/// coordinates to fixed values.
pub fn eval_stacked<S: Scalar>(em: &EvalModel<'_, S>, q: &[S], pins: &[Pin]) -> Vec<S> {
    let mut out = eval_constraints(em, q);
    for pin in pins {
        out.push(q[pin.coord] - S::from_f64(pin.value));
    }
    out
}

/// Jacobian of the stacked system `[Φ_q; Ψ_q]` (n×n when pins complete Φ).
pub fn stacked_jacobian<S: Scalar>(em: &EvalModel<'_, S>, q: &[S], pins: &[Pin]) -> Mat<S> {
    let n = em.model.n();
    let m = em.model.m();
    let phi_q = constraint_jacobian(em, q);
    let mut out = Mat::zeros(m + pins.len(), n);
    out.set_block(0, 0, &phi_q);
    for (i, pin) in pins.iter().enumerate() {
        out[(m + i, pin.coord)] = S::one();
    }
    out
}

/// Check that Φ_q has full row rank at a consistent configuration; reports
/// the effective DOF `n − rank`.
pub fn verify_dof(model: &MbModel, rho: &[f64], q: &[f64]) -> Result<usize> {
    let em = model.instantiate(rho)?;
    let jac = constraint_jacobian(&em, q);
    let rank = numerical_rank(&jac, 1e-8);
    if rank < model.m() {
        return Err(MbsError::RankDeficient {
            rank,
            expected: model.m(),
        });
    }
    Ok(model.n() - rank)
}

/// Kinematically useful by-product: relative velocity of the two joint
/// points, `Ṗ_j − Ṗ_i` (ground contributes zero).
pub fn joint_relative_velocity<S: Scalar>(
    em: &EvalModel<'_, S>,
    k: usize,
    q: &[S],
    qdot: &[S],
) -> [S; 3] {
    let spec = &em.model.joints[k];
    let ev = &em.joints[k];
    let vi = point_velocity_of(q, qdot, BodyRef::Body(spec.body_i), &ev.s_i);
    let vj = point_velocity_of(q, qdot, spec.body_j, &ev.s_j);
    sub3(&vj, &vi)
}

fn point_velocity_of<S: Scalar>(q: &[S], qdot: &[S], body: BodyRef, s: &[S; 3]) -> [S; 3] {
    match body {
        BodyRef::Ground => [S::zero(); 3],
        BodyRef::Body(b) => {
            let o = 7 * b;
            let (_, p) = body_rp(q, b);
            let rdot = [qdot[o], qdot[o + 1], qdot[o + 2]];
            let pdot = [qdot[o + 3], qdot[o + 4], qdot[o + 5], qdot[o + 6]];
            let bm = b_matrix(&p, s);
            let bp = crate::spatial::mat34_vec(&bm, &pdot);
            crate::linalg::add3(&rdot, &bp)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binding::Binding;
    use crate::diff::jacobian_forward;
    use crate::linalg::inf_norm;
    use crate::model::{Body, Controller, ForceElement, JointSpec, MbModel};

    /// Single body on a spherical joint to ground at the origin.
    fn pendulum_model() -> MbModel {
        let mut body = Body::new(
            "bob",
            1.0,
            [0.1, 0.1, 0.02],
            [0.0, 0.0, -0.5],
            [1.0, 0.0, 0.0, 0.0],
        );
        body.initial_guess.r = [0.0, 0.0, -0.5];
        let sph = JointSpec::new("pivot", JointKind::Spherical, 0, BodyRef::Ground).with_points(
            [
                Binding::constant(0.0),
                Binding::constant(0.0),
                Binding::constant(0.5),
            ],
            [
                Binding::constant(0.0),
                Binding::constant(0.0),
                Binding::constant(0.0),
            ],
        );
        MbModel {
            name: "pendulum".into(),
            bodies: vec![body],
            joints: vec![sph],
            forces: vec![ForceElement::Gravity { g: 9.81 }],
            frictions: vec![],
            controller: Controller::None,
            n_param: 1,
            lower: vec![-10.0],
            upper: vec![10.0],
            rho0: vec![0.0],
            pins: vec![
                Pin { coord: 4, value: 0.0, rate: 0.0 },
                Pin { coord: 5, value: 0.0, rate: 0.0 },
                Pin { coord: 6, value: 0.0, rate: 0.0 },
            ],
            declared_dof: 3,
        }
    }

    #[test]
    fn assembled_configuration_has_zero_residual() {
        let model = pendulum_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (q, _) = model.initial_guess_q();
        let phi = eval_constraints(&em, &q);
        assert!(inf_norm(&phi) < 1e-14);
    }

    #[test]
    fn perturbed_position_shifts_spherical_rows() {
        let model = pendulum_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (mut q, _) = model.initial_guess_q();
        let delta = 1e-3;
        q[0] += delta;
        let phi = eval_constraints(&em, &q);
        assert!((phi[0] - delta).abs() < 1e-15);
        assert!(phi[1].abs() < 1e-15);
        assert!(phi[2].abs() < 1e-15);
    }

    #[test]
    fn euler_norm_row_zero_for_unit_p() {
        let model = pendulum_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (q, _) = model.initial_guess_q();
        let phi = eval_constraints(&em, &q);
        assert_eq!(phi.len(), 4);
        assert!(phi[3].abs() < 1e-15);
    }

    #[test]
    fn jacobian_matches_generic_forward_seeding() {
        let model = pendulum_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (mut q, _) = model.initial_guess_q();
        // tilt a little so the configuration is generic
        q[3] = 0.99875;
        q[4] = 0.05;
        let jac = constraint_jacobian(&em, &q);
        let jac2 = jacobian_forward(
            |qd, out| {
                let emd = lift_model(&em);
                eval_constraints_into(&emd, qd, out);
            },
            &q,
            model.m(),
        );
        assert!(jac.max_abs_diff(&jac2) < 1e-12);
    }

    #[test]
    fn euler_row_gradient_is_2p() {
        let model = pendulum_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (mut q, _) = model.initial_guess_q();
        q[3] = 0.8;
        q[4] = 0.6;
        let jac = constraint_jacobian(&em, &q);
        let er = model.euler_row(0);
        for j in 0..3 {
            assert_eq!(jac[(er, j)], 0.0);
        }
        for j in 0..4 {
            assert!((jac[(er, 3 + j)] - 2.0 * q[3 + j]).abs() < 1e-15);
        }
    }

    #[test]
    fn spherical_translation_block_is_identity() {
        let model = pendulum_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (q, _) = model.initial_guess_q();
        let jac = constraint_jacobian(&em, &q);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((jac[(i, j)] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let model = pendulum_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (mut q, _) = model.initial_guess_q();
        q[3] = 0.9887710779360422;
        q[4] = 0.0998334166468282;
        q[0] = 0.03;
        let jac = constraint_jacobian(&em, &q);
        let h = 1e-6;
        for j in 0..model.n() {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[j] += h;
            qm[j] -= h;
            let fp = eval_constraints(&em, &qp);
            let fm = eval_constraints(&em, &qm);
            for i in 0..model.m() {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!(
                    (jac[(i, j)] - fd).abs() < 1e-8,
                    "row {} col {}: {} vs {}",
                    i,
                    j,
                    jac[(i, j)],
                    fd
                );
            }
        }
    }

    #[test]
    fn c_term_zero_for_zero_velocity() {
        let model = pendulum_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (q, _) = model.initial_guess_q();
        let c = c_term(&em, &q, &vec![0.0; model.n()]);
        assert!(inf_norm(&c) < 1e-15);
    }

    #[test]
    fn c_term_quadratic_homogeneity() {
        let model = pendulum_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (q, _) = model.initial_guess_q();
        let qd: Vec<f64> = (0..model.n()).map(|i| 0.1 * (i as f64 + 1.0)).collect();
        let c1 = c_term(&em, &q, &qd);
        let qd2: Vec<f64> = qd.iter().map(|v| 3.0 * v).collect();
        let c2 = c_term(&em, &q, &qd2);
        for i in 0..model.m() {
            assert!((c2[i] - 9.0 * c1[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn c_term_matches_finite_difference_of_phidot() {
        // c = −(d/dt)(Φ_q)·q̇ along q(t) = q + t·q̇ with q̇ frozen
        let model = pendulum_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (mut q, _) = model.initial_guess_q();
        q[3] = 0.9887710779360422;
        q[4] = 0.0998334166468282;
        let qd: Vec<f64> = (0..model.n()).map(|i| 0.05 * ((i % 3) as f64 - 1.0)).collect();
        let c = c_term(&em, &q, &qd);
        let h = 1e-6;
        let qp: Vec<f64> = q.iter().zip(&qd).map(|(x, v)| x + h * v).collect();
        let qm: Vec<f64> = q.iter().zip(&qd).map(|(x, v)| x - h * v).collect();
        let pd_p = phi_dot(&em, &qp, &qd);
        let pd_m = phi_dot(&em, &qm, &qd);
        for i in 0..model.m() {
            let fd = (pd_p[i] - pd_m[i]) / (2.0 * h);
            assert!((c[i] + fd).abs() < 1e-7, "row {}: {} vs {}", i, c[i], -fd);
        }
    }

    #[test]
    fn phi_qt_lambda_matches_dense_product() {
        let model = pendulum_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (mut q, _) = model.initial_guess_q();
        q[3] = 0.9887710779360422;
        q[4] = 0.0998334166468282;
        let lam: Vec<f64> = (0..model.m()).map(|i| 0.3 * (i as f64) - 0.7).collect();
        let fast = phi_qt_lambda(&em, &q, &lam);
        let jac = constraint_jacobian(&em, &q);
        let mut dense = vec![0.0; model.n()];
        jac.matvec_t(&lam, &mut dense);
        for i in 0..model.n() {
            assert!((fast[i] - dense[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn tlm_phi_qt_lambda_q_zero_for_zero_lambda() {
        let model = pendulum_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (q, _) = model.initial_guess_q();
        let zeros_n = vec![0.0; model.n()];
        let lam = vec![0.0; model.m()];
        let prod =
            tlm_constraint_products(&em, &q, &zeros_n, &zeros_n, &lam, TlmRequest::PhiQtLambdaQ);
        assert_eq!(prod.max_abs(), 0.0);
    }

    #[test]
    fn tlm_products_match_finite_differences() {
        let model = pendulum_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (mut q, _) = model.initial_guess_q();
        q[3] = 0.9887710779360422;
        q[4] = 0.0998334166468282;
        let n = model.n();
        let m = model.m();
        let qd: Vec<f64> = (0..n).map(|i| 0.1 * ((i % 5) as f64 - 2.0)).collect();
        let qdd: Vec<f64> = (0..n).map(|i| 0.2 * ((i % 4) as f64 - 1.5)).collect();
        let lam: Vec<f64> = (0..m).map(|i| 0.5 * (i as f64) - 1.0).collect();
        let h = 1e-6;

        // (Φ_qᵀ λ)_q vs forward differences of Φ_qᵀλ
        let hq = tlm_constraint_products(&em, &q, &qd, &qdd, &lam, TlmRequest::PhiQtLambdaQ);
        for k in 0..n {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[k] += h;
            qm[k] -= h;
            let gp = phi_qt_lambda(&em, &qp, &lam);
            let gm = phi_qt_lambda(&em, &qm, &lam);
            for i in 0..n {
                let fd = (gp[i] - gm[i]) / (2.0 * h);
                let scale = fd.abs().max(1.0);
                assert!(
                    (hq[(i, k)] - fd).abs() / scale < 1e-6,
                    "PhiQtLambdaQ ({},{})",
                    i,
                    k
                );
            }
        }

        // c_q vs finite differences of c
        let cq = tlm_constraint_products(&em, &q, &qd, &qdd, &lam, TlmRequest::CQ);
        for k in 0..n {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[k] += h;
            qm[k] -= h;
            let cp = c_term(&em, &qp, &qd);
            let cm = c_term(&em, &qm, &qd);
            for i in 0..m {
                let fd = (cp[i] - cm[i]) / (2.0 * h);
                assert!((cq[(i, k)] - fd).abs() < 1e-6, "CQ ({},{})", i, k);
            }
        }

        // c_q̇ vs finite differences of c in q̇
        let cqd = tlm_constraint_products(&em, &q, &qd, &qdd, &lam, TlmRequest::CQdot);
        for k in 0..n {
            let mut qdp = qd.clone();
            let mut qdm = qd.clone();
            qdp[k] += h;
            qdm[k] -= h;
            let cp = c_term(&em, &q, &qdp);
            let cm = c_term(&em, &q, &qdm);
            for i in 0..m {
                let fd = (cp[i] - cm[i]) / (2.0 * h);
                assert!((cqd[(i, k)] - fd).abs() < 1e-6, "CQdot ({},{})", i, k);
            }
        }

        // (Φ_q q̈)_q vs finite differences of Φ_q q̈
        let pq = tlm_constraint_products(&em, &q, &qd, &qdd, &lam, TlmRequest::PhiQQddotQ);
        for k in 0..n {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[k] += h;
            qm[k] -= h;
            let fp = phi_dot(&em, &qp, &qdd);
            let fm = phi_dot(&em, &qm, &qdd);
            for i in 0..m {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!((pq[(i, k)] - fd).abs() < 1e-6, "PhiQQddotQ ({},{})", i, k);
            }
        }
    }

    #[test]
    fn rho_products_vanish_for_rho_independent_geometry() {
        let model = pendulum_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (q, _) = model.initial_guess_q();
        let n = model.n();
        let qd = vec![0.1; n];
        let qdd = vec![0.2; n];
        let lam = vec![1.0; model.m()];
        for req in [TlmRequest::CRho, TlmRequest::PhiQRhoQddot, TlmRequest::PhiRho] {
            let prod = tlm_constraint_products(&em, &q, &qd, &qdd, &lam, req);
            assert_eq!(prod.max_abs(), 0.0, "{:?}", req);
        }
    }

    #[test]
    fn rho_dependent_joint_point_shows_in_phi_rho() {
        let mut model = pendulum_model();
        model.joints[0].s_i[2] = Binding::rho(0);
        let em = model.instantiate(&[0.5]).unwrap();
        let (q, _) = model.initial_guess_q();
        let n = model.n();
        let phi_rho =
            tlm_constraint_products(&em, &q, &vec![0.0; n], &vec![0.0; n], &vec![0.0; 4], TlmRequest::PhiRho);
        // z-row of the spherical joint depends on rho0 with slope d(A s)/ds·ds/drho = 1
        assert!((phi_rho[(2, 0)] - 1.0).abs() < 1e-12);
        // finite-difference cross-check on all rows
        let h = 1e-6;
        let emp = model.instantiate(&[0.5 + h]).unwrap();
        let emm = model.instantiate(&[0.5 - h]).unwrap();
        let fp = eval_constraints(&emp, &q);
        let fm = eval_constraints(&emm, &q);
        for i in 0..model.m() {
            let fd = (fp[i] - fm[i]) / (2.0 * h);
            assert!((phi_rho[(i, 0)] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn stacked_system_square_and_nonsingular() {
        let model = pendulum_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (q, _) = model.initial_guess_q();
        let jac = stacked_jacobian(&em, &q, &model.pins);
        assert_eq!(jac.rows, model.n());
        assert_eq!(jac.cols, model.n());
        assert!(crate::linalg::Lu::factor(&jac).is_ok());
    }

    #[test]
    fn dof_verification() {
        let model = pendulum_model();
        let (q, _) = model.initial_guess_q();
        let dof = verify_dof(&model, &[0.0], &q).unwrap();
        assert_eq!(dof, 3);
        assert_eq!(dof, model.declared_dof);
    }
}

/// `(Φ_qᵀ λ)_q` assembled joint by joint from local Hessians of the scalar
/// `λᵀΦ_joint` (each entry one nested dual pass over the joint's own
/// coordinates) plus the analytic Euler-row blocks `2 λ_e I₄`. Exploits the
/// two-body sparsity of every joint; equals the dense TLM product.
pub fn phi_qt_lambda_q_sparse<S: Scalar>(em: &EvalModel<'_, S>, q: &[S], lam: &[S]) -> Mat<S> {
    let model = em.model;
    let n = model.n();
    let mut out = Mat::zeros(n, n);
    let em2 = lift_model(&lift_model(em));
    let q2_base: Vec<Dual<Dual<S>>> = q
        .iter()
        .map(|&x| Dual::constant(Dual::constant(x)))
        .collect();
    let mut rows: Vec<Dual<Dual<S>>> = Vec::new();
    for k in 0..model.joints.len() {
        let spec = &model.joints[k];
        let range = model.joint_rows(k);
        let mut coords: Vec<usize> = (7 * spec.body_i..7 * spec.body_i + 7).collect();
        if let crate::model::BodyRef::Body(bj) = spec.body_j {
            coords.extend(7 * bj..7 * bj + 7);
        }
        let lam_k = &lam[range];
        let mut q2 = q2_base.clone();
        for ai in 0..coords.len() {
            let a = coords[ai];
            for bi in ai..coords.len() {
                let b = coords[bi];
                // seeds: inner e_a, outer e_b -> H[a][b]
                q2[a].v.d = S::one();
                q2[b].d.v = S::one();
                rows.clear();
                joint_rows_into(&em2, k, &q2, &mut rows);
                let mut h = S::zero();
                for (i, r) in rows.iter().enumerate() {
                    h += lam_k[i] * r.d.d;
                }
                q2[a].v.d = S::zero();
                q2[b].d.v = S::zero();
                out[(a, b)] += h;
                if a != b {
                    out[(b, a)] += h;
                }
            }
        }
    }
    let two = S::from_f64(2.0);
    for b in 0..model.nb() {
        let le = lam[model.euler_row(b)];
        let o = 7 * b + 3;
        for i in 0..4 {
            out[(o + i, o + i)] += two * le;
        }
    }
    out
}
