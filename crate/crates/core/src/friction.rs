//! Smooth joint-friction pipeline.
//!
//! Per friction joint: recover the reaction force/torque in the joint frame
//! from the Lagrange multipliers, decompose them into bearing-point
//! components, form the effective normal force for the joint geometry, apply
//! the Brown–McPhee law, and assemble the generalized friction force vector.
//!
//! The Brown–McPhee law (quasi-static, viscous term excluded):
//!
//! ```text
//! F_f(v) = F_n [ μ_d tanh(4 v / v_t)
//!              + (μ_s − μ_d) (v / v_t) / ((v / (2 v_t))² + 3/4)² ]
//! ```
//!
//! is C¹, odd in `v`, and allows micro-sliding below the transition
//! velocity `v_t`, which is what makes the whole stack differentiable.

use crate::constraints::{body_rp, joint_jacobian_body_i, joint_relative_velocity, lift_model};
use crate::diff::{Dual, Scalar};
use crate::error::{MbsError, Result};
use crate::linalg::{dot3, mat3_t_vec, mat3_vec, Mat};
use crate::model::{BodyRef, EvalModel, JointKind};
use crate::spatial::{
    angular_velocity, b_matrix, e_matrix, g_matrix, mat34_t_vec, mat34_vec, rotation_matrix_unchecked,
    tilde,
};

/// Reaction force and torque expressed in the joint reference frame.
#[derive(Copy, Clone, Debug)]
pub struct JointReactions<S> {
    pub force: [S; 3],
    pub torque: [S; 3],
}

/// Bearing-point force components (superscripts 1/2: the two end points of
/// the joint axis; 3: the transverse-width points of a translational joint).
#[derive(Copy, Clone, Debug)]
pub struct ForceComponents<S> {
    pub fx1: S,
    pub fy1: S,
    pub fx2: S,
    pub fy2: S,
    /// Axial thrust; present for revolute joints only.
    pub fz1: S,
    /// Transverse component; present for translational joints only.
    pub fx3: S,
}

/// Scalar friction force along and torque about the joint z-axis.
#[derive(Copy, Clone, Debug)]
pub struct FrictionWrench<S> {
    pub f: S,
    pub tau: S,
}

/// Brown–McPhee friction force. Odd in `v`; `F_n ≥ 0` expected.
pub fn brown_mcphee<S: Scalar>(v: S, f_n: S, mu_s: S, mu_d: S, v_t: S) -> S {
    let four = S::from_f64(4.0);
    let half = S::from_f64(0.5);
    let three_quarter = S::from_f64(0.75);
    let dynamic = mu_d * (four * v / v_t).tanh();
    let r = v / v_t;
    let b = half * r;
    let den = b * b + three_quarter;
    let stiction = (mu_s - mu_d) * r / (den * den);
    f_n * (dynamic + stiction)
}

/// Continuous absolute value `√(x² + ε²)`; smooth, ≥ |x|, exact at ε = 0.
pub fn cabs<S: Scalar>(x: S, eps: S) -> S {
    (x * x + eps * eps).sqrt()
}

/// Joint reactions from the Lagrange multipliers of the joint's rows:
///
/// ```text
/// F″ = C_iᵀ A_iᵀ Φ_{r_i}ᵀ λ
/// T″ = C_iᵀ (½ G(p_i) Φ_{p_i}ᵀ − s̃′_i A_iᵀ Φ_{r_i}ᵀ) λ
/// ```
///
/// Only joints carrying a friction spec may be queried.
pub fn joint_reactions<S: Scalar>(
    em: &EvalModel<'_, S>,
    q: &[S],
    joint: usize,
    lam: &[S],
) -> Result<JointReactions<S>> {
    if !em.model.frictions.iter().any(|f| f.joint == joint) {
        return Err(MbsError::InvalidModel(format!(
            "joint {} has no friction spec",
            joint
        )));
    }
    Ok(joint_reactions_unchecked(em, q, joint, lam))
}

fn joint_reactions_unchecked<S: Scalar>(
    em: &EvalModel<'_, S>,
    q: &[S],
    joint: usize,
    lam: &[S],
) -> JointReactions<S> {
    let spec = &em.model.joints[joint];
    let rows = em.model.joint_rows(joint);
    let lam_k = &lam[rows];
    let (phi_r, phi_p) = joint_jacobian_body_i(em, joint, q);
    // Φ_rᵀ λ and Φ_pᵀ λ
    let mut fr = [S::zero(); 3];
    for i in 0..phi_r.rows {
        for j in 0..3 {
            fr[j] += phi_r[(i, j)] * lam_k[i];
        }
    }
    let mut fp = [S::zero(); 4];
    for i in 0..phi_p.rows {
        for j in 0..4 {
            fp[j] += phi_p[(i, j)] * lam_k[i];
        }
    }
    let (_, p) = body_rp(q, spec.body_i);
    let a = rotation_matrix_unchecked(&p);
    let g = g_matrix(&p);
    let c_i = lift_c(&spec.c_i);
    let s_i = em.joints[joint].s_i;

    // F″ = C_iᵀ Aᵀ (Φ_rᵀ λ)
    let f_body = mat3_t_vec(&a, &fr);
    let force = mat3_t_vec(&c_i, &f_body);

    // T″ = C_iᵀ (½ G Φ_pᵀ λ − s̃ Aᵀ Φ_rᵀ λ)
    let half = S::from_f64(0.5);
    let g_fp = mat34_vec(&g, &fp);
    let st = tilde(&s_i);
    let s_f = mat3_vec(&st, &f_body);
    let t_body = [
        half * g_fp[0] - s_f[0],
        half * g_fp[1] - s_f[1],
        half * g_fp[2] - s_f[2],
    ];
    let torque = mat3_t_vec(&c_i, &t_body);
    JointReactions { force, torque }
}

fn lift_c<S: Scalar>(c: &[[f64; 3]; 3]) -> [[S; 3]; 3] {
    let mut out = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = S::from_f64(c[i][j]);
        }
    }
    out
}

/// Bearing-point decomposition of the joint reactions. Since `F″`, `T″` are
/// already expressed in the joint frame, the unit axes reduce to basis
/// vectors:
///
/// ```text
/// f″x1 = −F″x + T″y/a      f″x2 = −T″y/a
/// f″y1 = −F″y − T″x/a      f″y2 =  T″x/a
/// f″z1 =  F″z (revolute)   f″x3 =  T″z/(2b) (translational)
/// ```
pub fn force_components<S: Scalar>(
    kind: JointKind,
    reactions: &JointReactions<S>,
    a: S,
    b: S,
) -> ForceComponents<S> {
    let f = &reactions.force;
    let t = &reactions.torque;
    let fx1 = -f[0] + t[1] / a;
    let fy1 = -f[1] - t[0] / a;
    let fx2 = -t[1] / a;
    let fy2 = t[0] / a;
    let fz1 = if kind == JointKind::Revolute {
        f[2]
    } else {
        S::zero()
    };
    let fx3 = if kind == JointKind::Translational {
        t[2] / (S::from_f64(2.0) * b)
    } else {
        S::zero()
    };
    ForceComponents {
        fx1,
        fy1,
        fx2,
        fy2,
        fz1,
        fx3,
    }
}

/// Effective normal force for the joint geometry.
///
/// Cylindrical and revolute joints assume a parabolic pressure distribution
/// over each bearing end, giving the `π³/24` resultant factor; translational
/// joints take the absolute sum of all face components. The revolute thrust
/// load `|f″z1|` is reported separately (it rides on the torque radius).
pub fn effective_normal_force<S: Scalar>(
    kind: JointKind,
    comps: &ForceComponents<S>,
    eps: S,
) -> Result<(S, S)> {
    match kind {
        JointKind::Cylindrical | JointKind::Revolute => {
            let factor = S::from_f64(std::f64::consts::PI.powi(3) / 24.0);
            let e1 = (comps.fx1 * comps.fx1 + comps.fy1 * comps.fy1 + eps * eps).sqrt();
            let e2 = (comps.fx2 * comps.fx2 + comps.fy2 * comps.fy2 + eps * eps).sqrt();
            let lateral = factor * (e1 + e2);
            let thrust = if kind == JointKind::Revolute {
                cabs(comps.fz1, eps)
            } else {
                S::zero()
            };
            Ok((lateral, thrust))
        }
        JointKind::Translational => {
            let f_n = cabs(comps.fx1, eps)
                + cabs(comps.fy1, eps)
                + cabs(comps.fx2, eps)
                + cabs(comps.fy2, eps)
                + S::from_f64(2.0) * cabs(comps.fx3, eps);
            Ok((f_n, S::zero()))
        }
        other => Err(MbsError::InvalidModel(format!(
            "friction not supported for {:?} joints",
            other
        ))),
    }
}

/// Signed sliding velocities at a joint: relative axial speed of body j
/// w.r.t. body i along the joint z-axis, and the relative angular rate about
/// that axis.
fn sliding_velocities<S: Scalar>(
    em: &EvalModel<'_, S>,
    joint: usize,
    q: &[S],
    qdot: &[S],
) -> (S, S) {
    let spec = &em.model.joints[joint];
    let (_, p_i) = body_rp(q, spec.body_i);
    let a_i = rotation_matrix_unchecked(&p_i);
    let c_i = lift_c(&spec.c_i);
    let uz_body = mat3_vec(&c_i, &[S::zero(), S::zero(), S::one()]);
    let uz = mat3_vec(&a_i, &uz_body);

    let v_rel = joint_relative_velocity(em, joint, q, qdot);
    let v_axial = dot3(&uz, &v_rel);

    let o_i = 7 * spec.body_i;
    let pdot_i = [qdot[o_i + 3], qdot[o_i + 4], qdot[o_i + 5], qdot[o_i + 6]];
    let w_i = angular_velocity(&p_i, &pdot_i);
    let w_j = match spec.body_j {
        BodyRef::Ground => [S::zero(); 3],
        BodyRef::Body(bj) => {
            let o_j = 7 * bj;
            let (_, p_j) = body_rp(q, bj);
            let pdot_j = [qdot[o_j + 3], qdot[o_j + 4], qdot[o_j + 5], qdot[o_j + 6]];
            angular_velocity(&p_j, &pdot_j)
        }
    };
    let w_rel = [w_j[0] - w_i[0], w_j[1] - w_i[1], w_j[2] - w_i[2]];
    let omega_rel = dot3(&uz, &w_rel);
    (v_axial, omega_rel)
}

/// Friction force/torque scalars for one friction joint.
pub fn friction_wrench<S: Scalar>(
    em: &EvalModel<'_, S>,
    fidx: usize,
    q: &[S],
    qdot: &[S],
    lam: &[S],
) -> Result<FrictionWrench<S>> {
    let fr = &em.frictions[fidx];
    let spec_idx = em.model.frictions[fidx].joint;
    let kind = em.model.joints[spec_idx].kind;
    let eps = S::from_f64(fr.eps);
    let v_t = S::from_f64(fr.v_t);

    let reactions = joint_reactions_unchecked(em, q, spec_idx, lam);
    let comps = force_components(kind, &reactions, fr.a, fr.b);
    let (f_n_lateral, f_n_thrust) = effective_normal_force(kind, &comps, eps)?;
    let (v_axial, omega_rel) = sliding_velocities(em, spec_idx, q, qdot);

    let mut f = S::zero();
    let mut tau = S::zero();
    match kind {
        JointKind::Translational => {
            f = brown_mcphee(v_axial, f_n_lateral, fr.mu_s, fr.mu_d, v_t);
        }
        JointKind::Revolute => {
            let v_rot = omega_rel * fr.r_e;
            tau = fr.r_e * brown_mcphee(v_rot, f_n_lateral + f_n_thrust, fr.mu_s, fr.mu_d, v_t);
        }
        JointKind::Cylindrical => {
            f = brown_mcphee(v_axial, f_n_lateral, fr.mu_s, fr.mu_d, v_t);
            let v_rot = omega_rel * fr.r_e;
            tau = fr.r_e * brown_mcphee(v_rot, f_n_lateral, fr.mu_s, fr.mu_d, v_t);
        }
        other => {
            return Err(MbsError::InvalidModel(format!(
                "friction wrench undefined for {:?}",
                other
            )))
        }
    }
    Ok(FrictionWrench { f, tau })
}

/// Generalized friction force vector `Q^Af(q, q̇, λ, ρ)`.
///
/// For axis-type joints the wrench maps through the joint axis:
///
/// ```text
/// Q_i = [  A_i C_i u″z f ;  B_iᵀ A_i C_i u″z f + 2 E_iᵀ A_i C_i u″z τ ]
/// Q_j = −[ same with B_j, E_j ]
/// ```
///
/// Planar-contact joints get the in-plane opposing force
/// `−v̂_xy · F_f(‖v_xy‖_smooth, |λ_z|)` applied at the body reference point.
pub fn generalized_friction<S: Scalar>(
    em: &EvalModel<'_, S>,
    q: &[S],
    qdot: &[S],
    lam: &[S],
) -> Result<Vec<S>> {
    let model = em.model;
    let n = model.n();
    let mut qaf = vec![S::zero(); n];
    for fidx in 0..model.frictions.len() {
        let joint = model.frictions[fidx].joint;
        let spec = &model.joints[joint];
        match spec.kind {
            JointKind::PlanarContact => {
                planar_friction(em, fidx, q, qdot, lam, &mut qaf);
            }
            _ => {
                let wrench = friction_wrench(em, fidx, q, qdot, lam)?;
                let (_, p_i) = body_rp(q, spec.body_i);
                let a_i = rotation_matrix_unchecked(&p_i);
                let c_i = lift_c(&spec.c_i);
                let uz_body = mat3_vec(&c_i, &[S::zero(), S::zero(), S::one()]);
                let uz = mat3_vec(&a_i, &uz_body);

                add_wrench(em, q, spec.body_i, &em.joints[joint].s_i, &uz, wrench.f, wrench.tau, S::one(), &mut qaf);
                if let BodyRef::Body(bj) = spec.body_j {
                    let s_j = em.joints[joint].s_j;
                    add_wrench(em, q, bj, &s_j, &uz, wrench.f, wrench.tau, -S::one(), &mut qaf);
                }
            }
        }
    }
    Ok(qaf)
}

#[allow(clippy::too_many_arguments)]
fn add_wrench<S: Scalar>(
    _em: &EvalModel<'_, S>,
    q: &[S],
    body: usize,
    s_local: &[S; 3],
    uz: &[S; 3],
    f: S,
    tau: S,
    sign: S,
    qaf: &mut [S],
) {
    let (_, p) = body_rp(q, body);
    let b = b_matrix(&p, s_local);
    let e = e_matrix(&p);
    let o = 7 * body;
    for i in 0..3 {
        qaf[o + i] += sign * uz[i] * f;
    }
    let bt = mat34_t_vec(&b, uz);
    let et = mat34_t_vec(&e, uz);
    let two = S::from_f64(2.0);
    for i in 0..4 {
        qaf[o + 3 + i] += sign * (bt[i] * f + two * et[i] * tau);
    }
}

fn planar_friction<S: Scalar>(
    em: &EvalModel<'_, S>,
    fidx: usize,
    _q: &[S],
    qdot: &[S],
    lam: &[S],
    qaf: &mut [S],
) {
    let fr = &em.frictions[fidx];
    let joint = em.model.frictions[fidx].joint;
    let spec = &em.model.joints[joint];
    let rows = em.model.joint_rows(joint);
    let eps = S::from_f64(fr.eps);
    let v_t = S::from_f64(fr.v_t);
    // normal load carried by the out-of-plane position row (first row)
    let f_n = cabs(lam[rows.start], eps);
    let o = 7 * spec.body_i;
    let vx = qdot[o];
    let vy = qdot[o + 1];
    let speed = (vx * vx + vy * vy + eps * eps).sqrt();
    let ff = brown_mcphee(speed, f_n, fr.mu_s, fr.mu_d, v_t);
    // direction −v̂; smooth because F_f(speed)/speed stays bounded as v → 0
    let scale = ff / speed;
    qaf[o] -= scale * vx;
    qaf[o + 1] -= scale * vy;
}

/// Jacobians of `Q^Af` w.r.t. q, q̇, λ and ρ by forward seeding.
pub fn friction_jacobians<S: Scalar>(
    em: &EvalModel<'_, S>,
    q: &[S],
    qdot: &[S],
    lam: &[S],
) -> Result<(Mat<S>, Mat<S>, Mat<S>, Mat<S>)> {
    let model = em.model;
    let n = model.n();
    let m = model.m();
    let p = model.n_param;
    let emd = lift_model(em);
    let lift = |v: &[S]| -> Vec<Dual<S>> { v.iter().map(|&x| Dual::constant(x)).collect() };
    let mut qd = lift(q);
    let mut qdd = lift(qdot);
    let mut lamd = lift(lam);

    let mut jq = Mat::zeros(n, n);
    for k in 0..n {
        qd[k].d = S::one();
        let col = generalized_friction(&emd, &qd, &qdd, &lamd)?;
        for i in 0..n {
            jq[(i, k)] = col[i].d;
        }
        qd[k].d = S::zero();
    }
    let mut jqd = Mat::zeros(n, n);
    for k in 0..n {
        qdd[k].d = S::one();
        let col = generalized_friction(&emd, &qd, &qdd, &lamd)?;
        for i in 0..n {
            jqd[(i, k)] = col[i].d;
        }
        qdd[k].d = S::zero();
    }
    let mut jlam = Mat::zeros(n, m);
    for k in 0..m {
        lamd[k].d = S::one();
        let col = generalized_friction(&emd, &qd, &qdd, &lamd)?;
        for i in 0..n {
            jlam[(i, k)] = col[i].d;
        }
        lamd[k].d = S::zero();
    }
    let mut jrho = Mat::zeros(n, p);
    for k in 0..p {
        let rho_seeded: Vec<Dual<S>> = em
            .rho
            .iter()
            .enumerate()
            .map(|(i, &r)| Dual::seeded(r, if i == k { S::one() } else { S::zero() }))
            .collect();
        let em_k = model.instantiate(&rho_seeded)?;
        let col = generalized_friction(&em_k, &qd, &qdd, &lamd)?;
        for i in 0..n {
            jrho[(i, k)] = col[i].d;
        }
    }
    Ok((jq, jqd, jlam, jrho))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binding::Binding;
    use crate::linalg::inf_norm;
    use crate::model::{
        Body, Controller, ForceElement, FrictionSpec, JointSpec, MbModel, Pin,
    };

    #[test]
    fn brown_mcphee_zero_at_rest() {
        assert_eq!(brown_mcphee(0.0, 5.0, 0.4, 0.3, 0.01), 0.0);
    }

    #[test]
    fn brown_mcphee_at_transition_velocity() {
        // direct evaluation at v = v_t: stiction denominator (1/4 + 3/4)² = 1
        let got = brown_mcphee(0.01, 1.0, 0.4, 0.3, 0.01);
        let expect = 0.3 * 4.0f64.tanh() + 0.1;
        assert!((got - expect).abs() < 1e-15);
        assert!((expect - 0.399_798_789_921_720_2).abs() < 1e-12);
    }

    #[test]
    fn brown_mcphee_decays_to_dynamic_friction() {
        let v_t = 0.01;
        let got = brown_mcphee(100.0 * v_t, 1.0, 0.4, 0.3, v_t);
        assert!((got - 0.3).abs() < 1e-3);
    }

    #[test]
    fn brown_mcphee_is_odd() {
        for k in 1..=100 {
            let v = -0.05 + 0.1 * (k as f64) / 100.0;
            let fp = brown_mcphee(v, 2.0, 0.4, 0.3, 0.01);
            let fm = brown_mcphee(-v, 2.0, 0.4, 0.3, 0.01);
            assert!((fp + fm).abs() < 1e-15);
        }
    }

    #[test]
    fn brown_mcphee_peak_bound() {
        // max |F_f| ≤ 1.10 μ_s F_n on a velocity grid
        let (mu_s, mu_d, v_t, f_n) = (0.4, 0.3, 0.01, 3.0);
        let mut peak: f64 = 0.0;
        for k in 0..20_000 {
            let v = (k as f64 - 10_000.0) * 1e-5;
            peak = peak.max(brown_mcphee(v, f_n, mu_s, mu_d, v_t).abs());
        }
        assert!(peak <= 1.10 * mu_s * f_n, "peak {} too high", peak);
    }

    #[test]
    fn brown_mcphee_slope_at_zero() {
        // frozen F_n: dF_f/dv(0) = F_n (4 μ_d / v_t + (μ_s − μ_d) 16 / (9 v_t))
        let (mu_s, mu_d, v_t, f_n) = (0.4f64, 0.3, 0.01, 2.5);
        let (_, der) = crate::diff::dual_directional(
            |v: &[Dual<f64>], out: &mut Vec<Dual<f64>>| {
                out.push(brown_mcphee(
                    v[0],
                    Dual::constant(f_n),
                    Dual::constant(mu_s),
                    Dual::constant(mu_d),
                    Dual::constant(v_t),
                ))
            },
            &[0.0],
            &[1.0],
            1,
        );
        let expect = f_n * (4.0 * mu_d / v_t + (mu_s - mu_d) * 16.0 / (9.0 * v_t));
        assert!((der[0] - expect).abs() / expect < 1e-14);
    }

    #[test]
    fn cabs_values() {
        assert_eq!(cabs(0.0, 2.0), 2.0);
        assert_eq!(cabs(3.0, 4.0), 5.0);
        assert_eq!(cabs(-2.0, 0.0), 2.0);
        assert!(cabs(0.7, 1e-6) >= 0.7);
    }

    #[test]
    fn normal_force_cylindrical_endpoint() {
        // endpoint 1 carries (3,4), endpoint 2 empty, eps = 0:
        // F_n = (π³/24)·5
        let comps = ForceComponents {
            fx1: 3.0,
            fy1: 4.0,
            fx2: 0.0,
            fy2: 0.0,
            fz1: 0.0,
            fx3: 0.0,
        };
        let (f_n, thrust) = effective_normal_force(JointKind::Cylindrical, &comps, 0.0).unwrap();
        let expect = std::f64::consts::PI.powi(3) / 24.0 * 5.0;
        assert!((f_n - expect).abs() < 1e-12);
        assert!((expect - 6.459_640_975_062_462).abs() < 1e-12);
        assert_eq!(thrust, 0.0);
    }

    #[test]
    fn normal_force_translational_sum() {
        let comps = ForceComponents {
            fx1: 1.0,
            fy1: 1.0,
            fx2: 1.0,
            fy2: 1.0,
            fz1: 0.0,
            fx3: 1.0,
        };
        let (f_n, _) = effective_normal_force(JointKind::Translational, &comps, 0.0).unwrap();
        assert!((f_n - 6.0).abs() < 1e-15);
    }

    #[test]
    fn normal_force_zero_components() {
        let comps = ForceComponents {
            fx1: 0.0,
            fy1: 0.0,
            fx2: 0.0,
            fy2: 0.0,
            fz1: 0.0,
            fx3: 0.0,
        };
        let (f_n, _) = effective_normal_force(JointKind::Cylindrical, &comps, 0.0).unwrap();
        assert_eq!(f_n, 0.0);
    }

    #[test]
    fn force_components_torque_free() {
        let r = JointReactions {
            force: [1.0, 2.0, 3.0],
            torque: [0.0, 0.0, 0.0],
        };
        let c = force_components(JointKind::Translational, &r, 0.05, 0.025);
        assert_eq!(c.fx2, 0.0);
        assert_eq!(c.fy2, 0.0);
        assert_eq!(c.fx3, 0.0);
        assert_eq!(c.fx1, -1.0); // −u″xᵀF″
        assert_eq!(c.fy1, -2.0);
    }

    #[test]
    fn force_components_transverse_torque() {
        // F″ = 0, T″ = (0,0,t), b = 0.5: f″x3 = t/(2·0.5) = t
        let t = 1.7;
        let r = JointReactions {
            force: [0.0, 0.0, 0.0],
            torque: [0.0, 0.0, t],
        };
        let c = force_components(JointKind::Translational, &r, 0.05, 0.5);
        assert!((c.fx3 - t).abs() < 1e-15);
    }

    #[test]
    fn force_components_lever_scaling() {
        // doubling a halves f″x2, f″y2
        let r = JointReactions {
            force: [0.0, 0.0, 0.0],
            torque: [0.3, -0.4, 0.0],
        };
        let c1 = force_components(JointKind::Cylindrical, &r, 0.05, 0.025);
        let c2 = force_components(JointKind::Cylindrical, &r, 0.10, 0.025);
        assert!((c2.fx2 - 0.5 * c1.fx2).abs() < 1e-15);
        assert!((c2.fy2 - 0.5 * c1.fy2).abs() < 1e-15);
    }

    /// Slider on a translational joint to ground plus a second block joined
    /// by a revolute, with friction on both joints.
    pub(super) fn slider_model() -> MbModel {
        let slider = Body::new(
            "slider",
            2.0,
            [0.01, 0.01, 0.01],
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
        );
        let wheel = Body::new(
            "wheel",
            1.0,
            [0.005, 0.005, 0.008],
            [0.0, 0.0, 0.2],
            [1.0, 0.0, 0.0, 0.0],
        );
        // translational joint: axis = global x  (joint frame z along x)
        let axis_x = [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]];
        let tr = JointSpec::new("slide", JointKind::Translational, 0, BodyRef::Ground)
            .with_frames(axis_x, axis_x);
        let rev = JointSpec::new("pin", JointKind::Revolute, 1, BodyRef::Body(0)).with_points(
            [
                Binding::constant(0.0),
                Binding::constant(0.0),
                Binding::constant(-0.2),
            ],
            [
                Binding::constant(0.0),
                Binding::constant(0.0),
                Binding::constant(0.0),
            ],
        );
        MbModel {
            name: "slider".into(),
            bodies: vec![slider, wheel],
            joints: vec![tr, rev],
            forces: vec![ForceElement::Gravity { g: 9.81 }],
            frictions: vec![
                FrictionSpec {
                    joint: 0,
                    mu_s: Binding::constant(0.4),
                    mu_d: Binding::constant(0.3),
                    v_t: 0.01,
                    a: Binding::constant(0.05),
                    b: Binding::constant(0.025),
                    r_e: Binding::constant(0.01),
                    eps: 1e-6,
                },
                FrictionSpec {
                    joint: 1,
                    mu_s: Binding::constant(0.4),
                    mu_d: Binding::constant(0.3),
                    v_t: 0.01,
                    a: Binding::constant(0.03),
                    b: Binding::constant(0.02),
                    r_e: Binding::constant(0.01),
                    eps: 1e-6,
                },
            ],
            controller: Controller::None,
            n_param: 1,
            lower: vec![-1.0],
            upper: vec![1.0],
            rho0: vec![0.0],
            pins: vec![
                Pin { coord: 0, value: 0.0, rate: 0.0 },
                Pin { coord: 11, value: 0.0, rate: 0.0 },
            ],
            declared_dof: 2,
        }
    }

    #[test]
    fn zero_lambda_gives_zero_friction() {
        // with λ = 0 the only residual load is the O(eps) smoothing floor
        let model = slider_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (q, _) = model.initial_guess_q();
        let qd = vec![0.3; model.n()];
        let qaf = generalized_friction(&em, &q, &qd, &vec![0.0; model.m()]).unwrap();
        let eps_floor = 10.0 * 1e-6;
        assert!(inf_norm(&qaf) < eps_floor);
        // and exactly zero in the eps → 0 limit
        let mut m0 = model.clone();
        for f in &mut m0.frictions {
            f.eps = 1e-300;
        }
        let em0 = m0.instantiate(&[0.0]).unwrap();
        let qaf0 = generalized_friction(&em0, &q, &qd, &vec![0.0; model.m()]).unwrap();
        assert!(inf_norm(&qaf0) < 1e-250);
    }

    #[test]
    fn zero_velocity_gives_zero_friction() {
        let model = slider_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (q, _) = model.initial_guess_q();
        let lam: Vec<f64> = (0..model.m()).map(|i| 1.0 + i as f64).collect();
        let qaf = generalized_friction(&em, &q, &vec![0.0; model.n()], &lam).unwrap();
        assert!(inf_norm(&qaf) < 1e-15);
    }

    #[test]
    fn reactions_linear_in_lambda() {
        let model = slider_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (q, _) = model.initial_guess_q();
        let lam: Vec<f64> = (0..model.m()).map(|i| (i as f64) - 2.0).collect();
        let r1 = joint_reactions(&em, &q, 0, &lam).unwrap();
        let lam3: Vec<f64> = lam.iter().map(|l| 3.0 * l).collect();
        let r3 = joint_reactions(&em, &q, 0, &lam3).unwrap();
        for i in 0..3 {
            assert!((r3.force[i] - 3.0 * r1.force[i]).abs() < 1e-12);
            assert!((r3.torque[i] - 3.0 * r1.torque[i]).abs() < 1e-12);
        }
        let rz = joint_reactions(&em, &q, 0, &vec![0.0; model.m()]).unwrap();
        assert_eq!(inf_norm(&rz.force), 0.0);
        assert_eq!(inf_norm(&rz.torque), 0.0);
    }

    #[test]
    fn reactions_require_friction_spec() {
        let mut model = slider_model();
        model.frictions.truncate(1); // joint 1 loses its spec
        let em = model.instantiate(&[0.0]).unwrap();
        let (q, _) = model.initial_guess_q();
        assert!(joint_reactions(&em, &q, 1, &vec![0.0; model.m()]).is_err());
    }

    #[test]
    fn newtons_third_law_on_translational_rows() {
        // revolute joint between slider and wheel: global force rows cancel
        let model = slider_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (q, mut qd) = model.initial_guess_q();
        // make the wheel spin and the slider slide
        qd[0] = 0.2;
        let o = 7 + 3;
        qd[o + 3] = 0.5; // ṗ about z for the wheel
        let lam: Vec<f64> = (0..model.m()).map(|i| 2.0 + (i as f64) * 0.3).collect();
        let qaf = generalized_friction(&em, &q, &qd, &lam).unwrap();
        // rows of body 0 from joint 1 plus rows of body 1 must cancel in
        // translation; isolate joint 1 by removing joint-0 friction
        let mut m1 = model.clone();
        m1.frictions.remove(0);
        let em1 = m1.instantiate(&[0.0]).unwrap();
        let qaf1 = generalized_friction(&em1, &q, &qd, &lam).unwrap();
        for i in 0..3 {
            assert!(
                (qaf1[i] + qaf1[7 + i]).abs() < 1e-12,
                "third law violated in row {}",
                i
            );
        }
        // and the two-joint assembly is the sum of the parts
        let mut m0 = model.clone();
        m0.frictions.remove(1);
        let em0 = m0.instantiate(&[0.0]).unwrap();
        let qaf0 = generalized_friction(&em0, &q, &qd, &lam).unwrap();
        for i in 0..model.n() {
            assert!((qaf[i] - qaf0[i] - qaf1[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn friction_odd_under_velocity_reversal() {
        let model = slider_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (q, _) = model.initial_guess_q();
        let qd: Vec<f64> = (0..model.n()).map(|i| 0.07 * ((i % 5) as f64 - 2.0)).collect();
        let lam: Vec<f64> = (0..model.m()).map(|i| 1.0 + 0.1 * i as f64).collect();
        let qp = generalized_friction(&em, &q, &qd, &lam).unwrap();
        let qdm: Vec<f64> = qd.iter().map(|v| -v).collect();
        let qm = generalized_friction(&em, &q, &qdm, &lam).unwrap();
        for i in 0..model.n() {
            assert!((qp[i] + qm[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn friction_jacobians_match_central_differences() {
        let model = slider_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (mut q, _) = model.initial_guess_q();
        q[10] = 0.0998334166468282; // tilt the wheel a bit (p = [cos, sin] about x)
        q[9] = 0.9950041652780258;
        // renormalize wheel p
        let nrm = (q[9] * q[9] + q[10] * q[10]).sqrt();
        q[9] /= nrm;
        q[10] /= nrm;
        let qd: Vec<f64> = (0..model.n()).map(|i| 0.05 * ((i % 4) as f64 - 1.5)).collect();
        let lam: Vec<f64> = (0..model.m()).map(|i| 1.5 - 0.2 * i as f64).collect();
        let (jq, jqd, jlam, _) = friction_jacobians(&em, &q, &qd, &lam).unwrap();
        let h = 1e-6;
        let check = |jac: &Mat<f64>, idx: usize, kind: u8| {
            for kk in 0..jac.cols {
                let (mut ap, mut am) = (q.clone(), q.clone());
                let (mut vp, mut vm) = (qd.clone(), qd.clone());
                let (mut lp, mut lm) = (lam.clone(), lam.clone());
                match kind {
                    0 => {
                        ap[kk] += h;
                        am[kk] -= h;
                    }
                    1 => {
                        vp[kk] += h;
                        vm[kk] -= h;
                    }
                    _ => {
                        lp[kk] += h;
                        lm[kk] -= h;
                    }
                }
                let fp = generalized_friction(&em, &ap, &vp, &lp).unwrap();
                let fm = generalized_friction(&em, &am, &vm, &lm).unwrap();
                for i in 0..model.n() {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    let scale = fd.abs().max(1.0);
                    assert!(
                        (jac[(i, kk)] - fd).abs() / scale < 1e-6,
                        "jac{} ({},{}): {} vs {}",
                        idx,
                        i,
                        kk,
                        jac[(i, kk)],
                        fd
                    );
                }
            }
        };
        check(&jq, 0, 0);
        check(&jqd, 1, 1);
        check(&jlam, 2, 2);
    }

    #[test]
    fn smoothness_of_normal_force_in_lambda() {
        // complex-step scan: F_n stays smooth across a sign change of λ
        use crate::diff::CStep;
        let model = slider_model();
        let em_c = model.instantiate(&[CStep::from_f64(0.0)]).unwrap();
        let (q, _) = model.initial_guess_q();
        let qc: Vec<CStep> = q.iter().map(|&x| CStep::from_f64(x)).collect();
        let qdc: Vec<CStep> = (0..model.n())
            .map(|i| CStep::from_f64(if i == 0 { 0.1 } else { 0.0 }))
            .collect();
        for s in -10..=10 {
            let lam_val = s as f64 * 0.2;
            let mut lam: Vec<CStep> = vec![CStep::from_f64(0.0); model.m()];
            lam[2] = CStep::new(lam_val, 1e-30);
            let qaf = generalized_friction(&em_c, &qc, &qdc, &lam).unwrap();
            for v in &qaf {
                assert!(v.re.is_finite());
                assert!((v.im / 1e-30).is_finite());
            }
        }
    }
}

// ============================================================================
// Prepared evaluation (configuration-dependent pieces cached)
// ============================================================================

/// Per-friction-joint kinematic data at a fixed configuration q. Reaction
/// recovery is linear in λ and the sliding velocities are linear in q̇ once
/// these blocks are known, so seeded λ- and q̇-sweeps (L̄, C̄ assembly, the
/// λ fixed point) reuse one preparation instead of re-deriving joint
/// Jacobians per evaluation.
pub struct FrictionPrep<S> {
    joints: Vec<JointPrep<S>>,
}

struct JointPrep<S> {
    kind: JointKind,
    row_start: usize,
    rows: usize,
    /// Joint axis in global coordinates, `A_i C_i u″z`.
    uz: [S; 3],
    /// `C_iᵀ A_iᵀ Φ_{r_i}ᵀ` (3×mk) and the torque map (3×mk) of Eq-style
    /// reaction recovery, so `F″ = fr_map λ`, `T″ = tq_map λ`.
    fr_map: Mat<S>,
    tq_map: Mat<S>,
    /// Velocity maps: relative joint-point velocity = `vel_map · q̇`
    /// (3×n, sparse over two bodies) projected on `uz`; relative angular
    /// rate about `uz` = `omega_map · q̇`.
    v_axial_row: Vec<S>,
    omega_row: Vec<S>,
    /// Generalized force maps for the wrench: `Q += gen_f · f + gen_tau · τ`.
    gen_f: Vec<S>,
    gen_tau: Vec<S>,
    /// Planar contact: body translational row offset.
    planar_body: usize,
}

/// Build the prepared friction data at configuration `q`.
pub fn prepare_friction<S: Scalar>(em: &EvalModel<'_, S>, q: &[S]) -> Result<FrictionPrep<S>> {
    let model = em.model;
    let n = model.n();
    let emd = crate::constraints::lift_model(em);
    let mut joints = Vec::with_capacity(model.frictions.len());
    for fidx in 0..model.frictions.len() {
        let jidx = model.frictions[fidx].joint;
        let spec = &model.joints[jidx];
        let range = model.joint_rows(jidx);
        if spec.kind == JointKind::PlanarContact {
            joints.push(JointPrep {
                kind: spec.kind,
                row_start: range.start,
                rows: range.len(),
                uz: [S::zero(); 3],
                fr_map: Mat::zeros(3, range.len()),
                tq_map: Mat::zeros(3, range.len()),
                v_axial_row: vec![S::zero(); n],
                omega_row: vec![S::zero(); n],
                gen_f: vec![S::zero(); n],
                gen_tau: vec![S::zero(); n],
                planar_body: spec.body_i,
            });
            continue;
        }
        let mk = range.len();
        let (phi_r, phi_p) = crate::constraints::joint_jacobian_body_i_with(em, &emd, jidx, q);
        let (_, p_i) = body_rp(q, spec.body_i);
        let a_i = rotation_matrix_unchecked(&p_i);
        let c_i = lift_c(&spec.c_i);
        let g_i = g_matrix(&p_i);
        let s_i = em.joints[jidx].s_i;
        let st = tilde(&s_i);
        let half = S::from_f64(0.5);

        // F″ = C_iᵀ Aᵀ Φ_rᵀ λ  and  T″ = C_iᵀ(½ G Φ_pᵀ − s̃ Aᵀ Φ_rᵀ) λ
        let mut fr_map = Mat::zeros(3, mk);
        let mut tq_map = Mat::zeros(3, mk);
        for col in 0..mk {
            let fr_col = [phi_r[(col, 0)], phi_r[(col, 1)], phi_r[(col, 2)]];
            let fp_col = [
                phi_p[(col, 0)],
                phi_p[(col, 1)],
                phi_p[(col, 2)],
                phi_p[(col, 3)],
            ];
            let f_body = mat3_t_vec(&a_i, &fr_col);
            let f_joint = mat3_t_vec(&c_i, &f_body);
            let g_fp = mat34_vec(&g_i, &fp_col);
            let s_f = mat3_vec(&st, &f_body);
            let t_body = [
                half * g_fp[0] - s_f[0],
                half * g_fp[1] - s_f[1],
                half * g_fp[2] - s_f[2],
            ];
            let t_joint = mat3_t_vec(&c_i, &t_body);
            for r in 0..3 {
                fr_map[(r, col)] = f_joint[r];
                tq_map[(r, col)] = t_joint[r];
            }
        }

        let uz_body = mat3_vec(&c_i, &[S::zero(), S::zero(), S::one()]);
        let uz = mat3_vec(&a_i, &uz_body);

        // velocity rows: v_axial = uzᵀ(Ṗ_j − Ṗ_i), ω_rel = uzᵀ(ω_j − ω_i)
        let mut v_axial_row = vec![S::zero(); n];
        let mut omega_row = vec![S::zero(); n];
        {
            let o = 7 * spec.body_i;
            let b_i = b_matrix(&p_i, &em.joints[jidx].s_i);
            for r in 0..3 {
                v_axial_row[o + r] -= uz[r];
            }
            let ub = mat34_t_vec(&b_i, &uz);
            for cidx in 0..4 {
                v_axial_row[o + 3 + cidx] -= ub[cidx];
            }
            let e_i = e_matrix(&p_i);
            let ue = mat34_t_vec(&e_i, &uz);
            let two = S::from_f64(2.0);
            for cidx in 0..4 {
                omega_row[o + 3 + cidx] -= two * ue[cidx];
            }
        }
        if let BodyRef::Body(bj) = spec.body_j {
            let o = 7 * bj;
            let (_, p_j) = body_rp(q, bj);
            let b_j = b_matrix(&p_j, &em.joints[jidx].s_j);
            for r in 0..3 {
                v_axial_row[o + r] += uz[r];
            }
            let ub = mat34_t_vec(&b_j, &uz);
            for cidx in 0..4 {
                v_axial_row[o + 3 + cidx] += ub[cidx];
            }
            let e_j = e_matrix(&p_j);
            let ue = mat34_t_vec(&e_j, &uz);
            let two = S::from_f64(2.0);
            for cidx in 0..4 {
                omega_row[o + 3 + cidx] += two * ue[cidx];
            }
        }

        // generalized wrench maps (Eq-style block assembly on both bodies)
        let mut gen_f = vec![S::zero(); n];
        let mut gen_tau = vec![S::zero(); n];
        {
            let o = 7 * spec.body_i;
            let b_i = b_matrix(&p_i, &em.joints[jidx].s_i);
            let e_i = e_matrix(&p_i);
            for r in 0..3 {
                gen_f[o + r] += uz[r];
            }
            let bt = mat34_t_vec(&b_i, &uz);
            let et = mat34_t_vec(&e_i, &uz);
            let two = S::from_f64(2.0);
            for cidx in 0..4 {
                gen_f[o + 3 + cidx] += bt[cidx];
                gen_tau[o + 3 + cidx] += two * et[cidx];
            }
        }
        if let BodyRef::Body(bj) = spec.body_j {
            let o = 7 * bj;
            let (_, p_j) = body_rp(q, bj);
            let b_j = b_matrix(&p_j, &em.joints[jidx].s_j);
            let e_j = e_matrix(&p_j);
            for r in 0..3 {
                gen_f[o + r] -= uz[r];
            }
            let bt = mat34_t_vec(&b_j, &uz);
            let et = mat34_t_vec(&e_j, &uz);
            let two = S::from_f64(2.0);
            for cidx in 0..4 {
                gen_f[o + 3 + cidx] -= bt[cidx];
                gen_tau[o + 3 + cidx] -= two * et[cidx];
            }
        }

        joints.push(JointPrep {
            kind: spec.kind,
            row_start: range.start,
            rows: mk,
            uz,
            fr_map,
            tq_map,
            v_axial_row,
            omega_row,
            gen_f,
            gen_tau,
            planar_body: spec.body_i,
        });
    }
    Ok(FrictionPrep { joints })
}

impl<S: Scalar> FrictionPrep<S> {
    /// Lift the cached blocks one dual level (constants in the new level).
    pub fn lift(&self) -> FrictionPrep<Dual<S>> {
        let lift_vec = |v: &Vec<S>| -> Vec<Dual<S>> {
            v.iter().map(|&x| Dual::constant(x)).collect()
        };
        let lift_mat = |m: &Mat<S>| -> Mat<Dual<S>> {
            let mut out = Mat::zeros(m.rows, m.cols);
            for i in 0..m.rows {
                for j in 0..m.cols {
                    out[(i, j)] = Dual::constant(m[(i, j)]);
                }
            }
            out
        };
        FrictionPrep {
            joints: self
                .joints
                .iter()
                .map(|j| JointPrep {
                    kind: j.kind,
                    row_start: j.row_start,
                    rows: j.rows,
                    uz: [
                        Dual::constant(j.uz[0]),
                        Dual::constant(j.uz[1]),
                        Dual::constant(j.uz[2]),
                    ],
                    fr_map: lift_mat(&j.fr_map),
                    tq_map: lift_mat(&j.tq_map),
                    v_axial_row: lift_vec(&j.v_axial_row),
                    omega_row: lift_vec(&j.omega_row),
                    gen_f: lift_vec(&j.gen_f),
                    gen_tau: lift_vec(&j.gen_tau),
                    planar_body: j.planar_body,
                })
                .collect(),
        }
    }
}

/// `Q^Af` from a prepared configuration; exact match of
/// [`generalized_friction`] at the preparation point (tested), but the
/// (q̇, λ) dependence is explicit so seeded sweeps cost one wrench each.
pub fn generalized_friction_prepared<S: Scalar>(
    em: &EvalModel<'_, S>,
    prep: &FrictionPrep<S>,
    qdot: &[S],
    lam: &[S],
) -> Vec<S> {
    let n = em.model.n();
    let mut qaf = vec![S::zero(); n];
    for (fidx, jp) in prep.joints.iter().enumerate() {
        let fr = &em.frictions[fidx];
        let eps = S::from_f64(fr.eps);
        let v_t = S::from_f64(fr.v_t);
        if jp.kind == JointKind::PlanarContact {
            let f_n = cabs(lam[jp.row_start], eps);
            let o = 7 * jp.planar_body;
            let vx = qdot[o];
            let vy = qdot[o + 1];
            let speed = (vx * vx + vy * vy + eps * eps).sqrt();
            let ff = brown_mcphee(speed, f_n, fr.mu_s, fr.mu_d, v_t);
            let scale = ff / speed;
            qaf[o] -= scale * vx;
            qaf[o + 1] -= scale * vy;
            continue;
        }
        let lam_k = &lam[jp.row_start..jp.row_start + jp.rows];
        let mut force = [S::zero(); 3];
        let mut torque = [S::zero(); 3];
        for r in 0..3 {
            for c in 0..jp.rows {
                force[r] += jp.fr_map[(r, c)] * lam_k[c];
                torque[r] += jp.tq_map[(r, c)] * lam_k[c];
            }
        }
        let reactions = JointReactions { force, torque };
        let comps = force_components(jp.kind, &reactions, fr.a, fr.b);
        let (f_n_lateral, f_n_thrust) =
            effective_normal_force(jp.kind, &comps, eps).expect("friction joint kind");
        let mut v_axial = S::zero();
        let mut omega_rel = S::zero();
        for i in 0..qdot.len() {
            v_axial += jp.v_axial_row[i] * qdot[i];
            omega_rel += jp.omega_row[i] * qdot[i];
        }
        let mut f = S::zero();
        let mut tau = S::zero();
        match jp.kind {
            JointKind::Translational => {
                f = brown_mcphee(v_axial, f_n_lateral, fr.mu_s, fr.mu_d, v_t);
            }
            JointKind::Revolute => {
                let v_rot = omega_rel * fr.r_e;
                tau =
                    fr.r_e * brown_mcphee(v_rot, f_n_lateral + f_n_thrust, fr.mu_s, fr.mu_d, v_t);
            }
            JointKind::Cylindrical => {
                f = brown_mcphee(v_axial, f_n_lateral, fr.mu_s, fr.mu_d, v_t);
                let v_rot = omega_rel * fr.r_e;
                tau = fr.r_e * brown_mcphee(v_rot, f_n_lateral, fr.mu_s, fr.mu_d, v_t);
            }
            _ => unreachable!(),
        }
        for i in 0..n {
            qaf[i] += jp.gen_f[i] * f + jp.gen_tau[i] * tau;
        }
    }
    qaf
}

/// `Q^Af_λ` (n×m) from one preparation: one seeded wrench per column.
pub fn friction_lambda_jacobian_prepared<S: Scalar>(
    em: &EvalModel<'_, S>,
    prep: &FrictionPrep<S>,
    qdot: &[S],
    lam: &[S],
) -> Mat<S> {
    let n = em.model.n();
    let m = em.model.m();
    let emd = crate::constraints::lift_model(em);
    let prep_d = prep.lift();
    let qd_d: Vec<Dual<S>> = qdot.iter().map(|&x| Dual::constant(x)).collect();
    let mut lam_d: Vec<Dual<S>> = lam.iter().map(|&x| Dual::constant(x)).collect();
    let mut out = Mat::zeros(n, m);
    // only the friction joints' λ rows can contribute
    let mut active_cols: Vec<usize> = Vec::new();
    for jp in &prep.joints {
        active_cols.extend(jp.row_start..jp.row_start + jp.rows);
    }
    active_cols.sort_unstable();
    active_cols.dedup();
    for &c in &active_cols {
        lam_d[c].d = S::one();
        let col = generalized_friction_prepared(&emd, &prep_d, &qd_d, &lam_d);
        for i in 0..n {
            out[(i, c)] = col[i].d;
        }
        lam_d[c].d = S::zero();
    }
    out
}

#[cfg(test)]
mod prep_tests {
    use super::*;
    use crate::linalg::inf_norm;

    #[test]
    fn prepared_friction_matches_reference() {
        let model = super::tests::slider_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (mut q, _) = model.initial_guess_q();
        // generic tilted configuration
        q[9] = 0.9950041652780258;
        q[10] = 0.0998334166468282;
        let nrm = (q[9] * q[9] + q[10] * q[10]).sqrt();
        q[9] /= nrm;
        q[10] /= nrm;
        let qd: Vec<f64> = (0..model.n()).map(|i| 0.08 * ((i % 5) as f64 - 2.0)).collect();
        let lam: Vec<f64> = (0..model.m()).map(|i| 1.4 - 0.3 * i as f64).collect();
        let reference = generalized_friction(&em, &q, &qd, &lam).unwrap();
        let prep = prepare_friction(&em, &q).unwrap();
        let fast = generalized_friction_prepared(&em, &prep, &qd, &lam);
        for i in 0..model.n() {
            assert!(
                (reference[i] - fast[i]).abs() < 1e-12,
                "row {}: {} vs {}",
                i,
                reference[i],
                fast[i]
            );
        }
        // λ-Jacobian against the seeded reference
        let (_, _, jlam_ref, _) = friction_jacobians(&em, &q, &qd, &lam).unwrap();
        let jlam = friction_lambda_jacobian_prepared(&em, &prep, &qd, &lam);
        assert!(jlam.max_abs_diff(&jlam_ref) < 1e-12);
        let zero = generalized_friction_prepared(&em, &prep, &vec![0.0; model.n()], &lam);
        assert!(inf_norm(&zero) < 1e-15);
    }
}
