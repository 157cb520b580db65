//! Tangent linear model and the combined dynamics+sensitivity integration.
//!
//! Differentiating the index-1 equations of motion w.r.t. ρ gives, per
//! parameter column,
//!
//! ```text
//! [ M    L̄ ] [ q̈′ ]   [ Q̄ − C̄ q̇′ − K̄ q′ + Q_aux aux′ ]
//! [ Φ_q  0 ] [ λ′ ] = [ c_ρ − Φ_qρ q̈ + c_q̇ q̇′ − ((Φ_q q̈)_q − c_q) q′ ]
//! ```
//!
//! with `C̄ = −Q_q̇ − Q^Af_q̇`, `K̄ = (M q̈ + Φ_qᵀλ − Q − Q^Af)_q`,
//! `L̄ = Φ_qᵀ − Q^Af_λ`, `Q̄ = −(M q̈ + Φ_qᵀλ − Q − Q^Af)_ρ`. λ′ is purely
//! algebraic and recovered at every right-hand-side evaluation. Every block
//! is a dual-seeded Jacobian-vector product — products with the current
//! sensitivity columns are formed directly in the hot path, the full
//! matrices only once per step for the stage Jacobian.
//!
//! The same matrices, pushed through the saddle factorization, give the
//! exact dynamics Jacobian `f_y` used by the ROW stepper (implicit-function
//! differentiation of the saddle solve; equal to forward seeding of the
//! right-hand side, which the tests verify).

use crate::constraints::{
    constraint_jacobian, eval_constraints_into, lift_model, phi_dot,
    stacked_jacobian, tlm_constraint_products, TlmRequest,
};
use crate::diff::{CStep, Dual, Scalar, COMPLEX_STEP_H};
use crate::dynamics::{
    controller_aux_rates, generalized_forces, index1_solve_with, mass_matrix, mass_times,
    saddle_factor, solve_initial_lambda, solve_initial_positions,
    solve_initial_velocities, SaddleFactor,
};
use crate::error::{MbsError, Result};
use crate::friction::{friction_lambda_jacobian_prepared, generalized_friction, generalized_friction_prepared, prepare_friction};
use crate::linalg::{Lu, Mat};
use crate::model::{EvalModel, MbModel};
use crate::objective::ObjectiveSpec;
use crate::row::{
    integrate_dae, row3w, DaeSystem, IntegrationResult, IntegratorOpts, JacobianRep, RowTableau,
};

// ============================================================================
// State layout
// ============================================================================

/// Layout of the integrated state vector:
///
/// ```text
/// [ q | q̇ | λ | aux | gψ? | (q′_k, q̇′_k, aux′_k) for k = 0..p | ∇gψ? ]
/// ```
#[derive(Copy, Clone, Debug)]
pub struct SysLayout {
    pub n: usize,
    pub m: usize,
    pub nc: usize,
    /// Objective quadrature state present.
    pub quad: bool,
    /// Number of parameter sensitivity columns carried (0 = dynamics only).
    pub p_sens: usize,
}

impl SysLayout {
    pub fn dynamics(model: &MbModel, quad: bool) -> Self {
        SysLayout {
            n: model.n(),
            m: model.m(),
            nc: model.n_aux(),
            quad,
            p_sens: 0,
        }
    }

    pub fn with_sensitivities(model: &MbModel, quad: bool) -> Self {
        SysLayout {
            p_sens: model.n_param,
            ..Self::dynamics(model, quad)
        }
    }

    pub fn dyn_dim(&self) -> usize {
        2 * self.n + self.m + self.nc + usize::from(self.quad)
    }

    pub fn sens_dim(&self) -> usize {
        2 * self.n + self.nc
    }

    pub fn tail(&self) -> usize {
        if self.quad {
            self.p_sens
        } else {
            0
        }
    }

    pub fn dim(&self) -> usize {
        self.dyn_dim() + self.p_sens * self.sens_dim() + self.tail()
    }

    pub fn q(&self) -> std::ops::Range<usize> {
        0..self.n
    }
    pub fn qd(&self) -> std::ops::Range<usize> {
        self.n..2 * self.n
    }
    pub fn lam(&self) -> std::ops::Range<usize> {
        2 * self.n..2 * self.n + self.m
    }
    pub fn aux(&self) -> std::ops::Range<usize> {
        2 * self.n + self.m..2 * self.n + self.m + self.nc
    }
    pub fn quad_idx(&self) -> Option<usize> {
        self.quad.then_some(2 * self.n + self.m + self.nc)
    }
    /// Offset of sensitivity column k.
    pub fn sens_col(&self, k: usize) -> usize {
        self.dyn_dim() + k * self.sens_dim()
    }
    pub fn grad_quad(&self, k: usize) -> usize {
        self.dyn_dim() + self.p_sens * self.sens_dim() + k
    }

    pub fn mass_diag(&self) -> Vec<f64> {
        let mut d = vec![1.0; self.dim()];
        for i in self.lam() {
            d[i] = 0.0;
        }
        d
    }
}

// ============================================================================
// TLM coefficient matrices
// ============================================================================

/// Full TLM matrices at one state (built once per step for the Jacobian).
pub struct TlmTerms<S: Scalar> {
    pub c_bar: Mat<S>,
    pub k_bar: Mat<S>,
    pub l_bar: Mat<S>,
    pub q_bar: Mat<S>,
    pub q_aux: Mat<S>,
    pub c_q: Mat<S>,
    pub c_qd: Mat<S>,
    pub c_rho: Mat<S>,
    pub phiq_qdd_q: Mat<S>,
    pub phi_qrho_qdd: Mat<S>,
    pub phi_q: Mat<S>,
}

/// The force-side residual at fixed accelerations and multipliers:
/// `r = M q̈ + Φ_qᵀ λ − Q − Q^Af`. Its partials are exactly K̄ (q), C̄ (q̇),
/// −Q̄ (ρ) and −Q_aux (aux).
fn force_residual<S: Scalar>(
    em: &EvalModel<'_, S>,
    q: &[S],
    qd: &[S],
    aux: &[S],
    t: S,
    qdd: &[S],
    lam: &[S],
) -> Result<Vec<S>> {
    let emd = lift_model(em);
    force_residual_with(em, &emd, q, qd, aux, t, qdd, lam)
}

#[allow(clippy::too_many_arguments)]
fn force_residual_with<'m, S: Scalar>(
    em: &EvalModel<'m, S>,
    em_lift: &EvalModel<'m, Dual<S>>,
    q: &[S],
    qd: &[S],
    aux: &[S],
    t: S,
    qdd: &[S],
    lam: &[S],
) -> Result<Vec<S>> {
    let mv = mass_times(em, q, qdd);
    let pl = crate::constraints::phi_qt_lambda_with(em_lift, q, lam);
    let forces = generalized_forces(em, q, qd, aux, t);
    let qaf = generalized_friction(em, q, qd, lam)?;
    Ok(mv
        .iter()
        .zip(pl.iter())
        .zip(forces.iter().zip(qaf.iter()))
        .map(|((&a, &b), (&c, &d))| a + b - c - d)
        .collect())
}

/// Directional derivative of the force residual with seeds
/// `(dq, dqd, daux, ρ-direction e_k)`; any seed slice may be empty (zero).
#[allow(clippy::too_many_arguments)]
fn force_residual_directional<S: Scalar>(
    em: &EvalModel<'_, S>,
    q: &[S],
    qd: &[S],
    aux: &[S],
    t: S,
    qdd: &[S],
    lam: &[S],
    dq: Option<&[S]>,
    dqd: Option<&[S]>,
    daux: Option<&[S]>,
    rho_dir: Option<usize>,
) -> Result<Vec<S>> {
    let seeded = |v: &[S], d: Option<&[S]>| -> Vec<Dual<S>> {
        match d {
            Some(dir) => v
                .iter()
                .zip(dir.iter())
                .map(|(&x, &dx)| Dual::seeded(x, dx))
                .collect(),
            None => v.iter().map(|&x| Dual::constant(x)).collect(),
        }
    };
    let qs = seeded(q, dq);
    let qds = seeded(qd, dqd);
    let auxs = seeded(aux, daux);
    let qdds: Vec<Dual<S>> = qdd.iter().map(|&x| Dual::constant(x)).collect();
    let lams: Vec<Dual<S>> = lam.iter().map(|&x| Dual::constant(x)).collect();
    let rhos: Vec<Dual<S>> = em
        .rho
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            Dual::seeded(
                r,
                if rho_dir == Some(i) {
                    S::one()
                } else {
                    S::zero()
                },
            )
        })
        .collect();
    let emd = em.model.instantiate(&rhos)?;
    let res = force_residual(&emd, &qs, &qds, &auxs, Dual::constant(t), &qdds, &lams)?;
    Ok(res.iter().map(|r| r.d).collect())
}

/// Directional derivative of the controller aux rates.
fn aux_rates_directional<S: Scalar>(
    em: &EvalModel<'_, S>,
    q: &[S],
    qd: &[S],
    dq: Option<&[S]>,
    dqd: Option<&[S]>,
    rho_dir: Option<usize>,
) -> Result<Vec<S>> {
    let seeded = |v: &[S], d: Option<&[S]>| -> Vec<Dual<S>> {
        match d {
            Some(dir) => v
                .iter()
                .zip(dir.iter())
                .map(|(&x, &dx)| Dual::seeded(x, dx))
                .collect(),
            None => v.iter().map(|&x| Dual::constant(x)).collect(),
        }
    };
    let qs = seeded(q, dq);
    let qds = seeded(qd, dqd);
    let rhos: Vec<Dual<S>> = em
        .rho
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            Dual::seeded(
                r,
                if rho_dir == Some(i) {
                    S::one()
                } else {
                    S::zero()
                },
            )
        })
        .collect();
    let emd = em.model.instantiate(&rhos)?;
    let rates = controller_aux_rates(&emd, &qs, &qds);
    Ok(rates.iter().map(|r| r.d).collect())
}

/// Assemble every TLM coefficient matrix at the current state.
#[allow(clippy::too_many_arguments)]
pub fn tlm_terms<S: Scalar>(
    em: &EvalModel<'_, S>,
    q: &[S],
    qd: &[S],
    aux: &[S],
    t: S,
    qdd: &[S],
    lam: &[S],
) -> Result<TlmTerms<S>> {
    let model = em.model;
    let n = model.n();
    let m = model.m();
    let p = model.n_param;
    let nc = model.n_aux();

    let phi_q = constraint_jacobian(em, q);

    let prep = prepare_friction(em, q)?;
    let emd = lift_model(em);
    let prep_d = prep.lift();
    let qs: Vec<Dual<S>> = q.iter().map(|&x| Dual::constant(x)).collect();
    let mut qds: Vec<Dual<S>> = qd.iter().map(|&x| Dual::constant(x)).collect();
    let auxs: Vec<Dual<S>> = aux.iter().map(|&x| Dual::constant(x)).collect();
    let lams: Vec<Dual<S>> = lam.iter().map(|&x| Dual::constant(x)).collect();
    let td: Dual<S> = Dual::constant(t);

    // coordinates that can influence the friction force through q or q̇
    let mut fric_cols: Vec<usize> = Vec::new();
    for f in &model.frictions {
        let spec = &model.joints[f.joint];
        fric_cols.extend(7 * spec.body_i..7 * spec.body_i + 7);
        if let crate::model::BodyRef::Body(bj) = spec.body_j {
            fric_cols.extend(7 * bj..7 * bj + 7);
        }
    }
    fric_cols.sort_unstable();
    fric_cols.dedup();

    // K̄ = (Φ_qᵀλ)_q + (M q̈)_q − Q_q − Q^Af_q, piece by piece
    let mut k_bar = crate::constraints::phi_qt_lambda_q_sparse(em, q, lam);
    let mq = crate::dynamics::mass_qdd_q(em, q, qdd);
    for i in 0..n {
        for j in 0..n {
            k_bar[(i, j)] += mq[(i, j)];
        }
    }
    {
        let mut qseed = qs.clone();
        for j in 0..n {
            qseed[j].d = S::one();
            let f = generalized_forces(&emd, &qseed, &qds, &auxs, td);
            for i in 0..n {
                k_bar[(i, j)] -= f[i].d;
            }
            qseed[j].d = S::zero();
        }
        // friction q-columns: re-prepare at the seeded configuration
        for &j in &fric_cols {
            qseed[j].d = S::one();
            let prep_j = prepare_friction(&emd, &qseed)?;
            let qaf = generalized_friction_prepared(&emd, &prep_j, &qds, &lams);
            for i in 0..n {
                k_bar[(i, j)] -= qaf[i].d;
            }
            qseed[j].d = S::zero();
        }
    }

    // C̄ = −Q_q̇ − Q^Af_q̇ (friction velocity dependence is confined to the
    // friction bodies' coordinates)
    let mut c_bar = Mat::zeros(n, n);
    for j in 0..n {
        qds[j].d = S::one();
        let f = generalized_forces(&emd, &qs, &qds, &auxs, td);
        for i in 0..n {
            c_bar[(i, j)] = -f[i].d;
        }
        qds[j].d = S::zero();
    }
    for &j in &fric_cols {
        qds[j].d = S::one();
        let qaf = generalized_friction_prepared(&emd, &prep_d, &qds, &lams);
        for i in 0..n {
            c_bar[(i, j)] -= qaf[i].d;
        }
        qds[j].d = S::zero();
    }

    let mut q_bar = Mat::zeros(n, p);
    for k in 0..p {
        let col =
            force_residual_directional(em, q, qd, aux, t, qdd, lam, None, None, None, Some(k))?;
        for i in 0..n {
            q_bar[(i, k)] = -col[i];
        }
    }
    let mut q_aux = Mat::zeros(n, nc);
    if nc > 0 {
        let mut ua: Vec<Dual<S>> = auxs.clone();
        for k in 0..nc {
            ua[k].d = S::one();
            let f = generalized_forces(&emd, &qs, &qds, &ua, td);
            for i in 0..n {
                q_aux[(i, k)] = f[i].d;
            }
            ua[k].d = S::zero();
        }
    }

    // L̄ = Φ_qᵀ − Q^Af_λ
    let qaf_lam = friction_lambda_jacobian_prepared(em, &prep, qd, lam);
    let mut l_bar = phi_q.transpose();
    for i in 0..n {
        for k in 0..m {
            l_bar[(i, k)] -= qaf_lam[(i, k)];
        }
    }

    let zero_n = vec![S::zero(); n];
    let c_q = tlm_constraint_products(em, q, qd, &zero_n, lam, TlmRequest::CQ);
    let c_qd = tlm_constraint_products(em, q, qd, &zero_n, lam, TlmRequest::CQdot);
    let c_rho = tlm_constraint_products(em, q, qd, &zero_n, lam, TlmRequest::CRho);
    let phiq_qdd_q = tlm_constraint_products(em, q, &zero_n, qdd, lam, TlmRequest::PhiQQddotQ);
    let phi_qrho_qdd = tlm_constraint_products(em, q, &zero_n, qdd, lam, TlmRequest::PhiQRhoQddot);

    Ok(TlmTerms {
        c_bar,
        k_bar,
        l_bar,
        q_bar,
        q_aux,
        c_q,
        c_qd,
        c_rho,
        phiq_qdd_q,
        phi_qrho_qdd,
        phi_q,
    })
}

// ============================================================================
// Initial sensitivities (Eq. 17 analogue on the stacked system)
// ============================================================================

/// Solve the differentiated position and velocity constraints of the stacked
/// system `Φ̄ = [Φ; Ψ]` for the initial sensitivity columns:
///
/// ```text
/// Φ̄_q q′₀ = −Φ̄_ρ,     Φ̄_q q̇′₀ = −(Φ̄_qq q′₀ + Φ̄_qρ) q̇₀  (per column).
/// ```
pub fn initial_sensitivities<S: Scalar>(
    em: &EvalModel<'_, S>,
    q0: &[S],
    qdot0: &[S],
    pins: &[crate::model::Pin],
) -> Result<(Mat<S>, Mat<S>)> {
    let model = em.model;
    let n = model.n();
    let m = model.m();
    let p = model.n_param;
    let jac = stacked_jacobian(em, q0, pins);
    let lu = Lu::factor(&jac)?;

    // Φ̄_ρ: pin rows do not depend on ρ
    let mut q0p = Mat::zeros(n, p);
    for k in 0..p {
        let rhos: Vec<Dual<S>> = em
            .rho
            .iter()
            .enumerate()
            .map(|(i, &r)| Dual::seeded(r, if i == k { S::one() } else { S::zero() }))
            .collect();
        let emk = model.instantiate(&rhos)?;
        let qs: Vec<Dual<S>> = q0.iter().map(|&x| Dual::constant(x)).collect();
        let mut phi = Vec::with_capacity(m);
        eval_constraints_into(&emk, &qs, &mut phi);
        let mut rhs = vec![S::zero(); n];
        for i in 0..m {
            rhs[i] = -phi[i].d;
        }
        lu.solve_in_place(&mut rhs);
        for i in 0..n {
            q0p[(i, k)] = rhs[i];
        }
    }

    // velocity level: seed (q′₀ column, e_k) and differentiate Φ̄_q q̇₀
    let mut qd0p = Mat::zeros(n, p);
    for k in 0..p {
        let rhos: Vec<Dual<S>> = em
            .rho
            .iter()
            .enumerate()
            .map(|(i, &r)| Dual::seeded(r, if i == k { S::one() } else { S::zero() }))
            .collect();
        let emk = model.instantiate(&rhos)?;
        let qs: Vec<Dual<S>> = (0..n)
            .map(|i| Dual::seeded(q0[i], q0p[(i, k)]))
            .collect();
        let qd_const: Vec<Dual<S>> = qdot0.iter().map(|&x| Dual::constant(x)).collect();
        let pd = phi_dot(&emk, &qs, &qd_const);
        let mut rhs = vec![S::zero(); n];
        for i in 0..m {
            rhs[i] = -pd[i].d;
        }
        // pin rows: prescribed rates are ρ-independent, rhs stays zero
        lu.solve_in_place(&mut rhs);
        for i in 0..n {
            qd0p[(i, k)] = rhs[i];
        }
    }
    Ok((q0p, qd0p))
}

// ============================================================================
// The combined DAE system
// ============================================================================

/// Dynamics (+ optional sensitivities and objective quadratures) as one DAE
/// in singular mass-matrix form, generic over the scalar type so the same
/// system drives plain, dual-seeded, and complex-step runs.
pub struct MbsSystem<'m, S: Scalar> {
    pub em: EvalModel<'m, S>,
    pub layout: SysLayout,
    pub objective: Option<ObjectiveSpec>,
    mass: Vec<f64>,
    /// Test hook: scales K̄ in the sensitivity right-hand side to let the
    /// gradcheck negative control demonstrate that a corrupted TLM fails.
    pub corrupt_kbar: f64,
    /// ρ-seeded model instantiations, one per parameter (ρ is constant for
    /// the whole run, so these are built once). The second/third levels are
    /// lifts used by the nested constraint products in the hot path.
    seeded_d1: Vec<EvalModel<'m, Dual<S>>>,
    seeded_d2: Vec<EvalModel<'m, Dual<Dual<S>>>>,
    seeded_d3: Vec<EvalModel<'m, Dual<Dual<Dual<S>>>>>,
}

impl<'m, S: Scalar> MbsSystem<'m, S> {
    pub fn new(
        model: &'m MbModel,
        rho: &[S],
        layout: SysLayout,
        objective: Option<ObjectiveSpec>,
    ) -> Result<Self> {
        let em = model.instantiate(rho)?;
        let mass = layout.mass_diag();
        let mut seeded_d1 = Vec::new();
        let mut seeded_d2 = Vec::new();
        let mut seeded_d3 = Vec::new();
        for k in 0..layout.p_sens {
            let rhos: Vec<Dual<S>> = rho
                .iter()
                .enumerate()
                .map(|(i, &r)| Dual::seeded(r, if i == k { S::one() } else { S::zero() }))
                .collect();
            let d1 = model.instantiate(&rhos)?;
            let d2 = lift_model(&d1);
            let d3 = lift_model(&d2);
            seeded_d1.push(d1);
            seeded_d2.push(d2);
            seeded_d3.push(d3);
        }
        Ok(MbsSystem {
            em,
            layout,
            objective,
            mass,
            corrupt_kbar: 1.0,
            seeded_d1,
            seeded_d2,
            seeded_d3,
        })
    }

    fn split<'a>(&self, y: &'a [S]) -> (&'a [S], &'a [S], &'a [S], &'a [S]) {
        let l = &self.layout;
        (
            &y[l.q()],
            &y[l.qd()],
            &y[l.lam()],
            &y[l.aux()],
        )
    }

    /// Solve the per-parameter sensitivity saddle; returns (q̈′, λ′) columns.
    #[allow(clippy::too_many_arguments)]
    fn sensitivity_columns(
        &self,
        fac_sens: &Lu<S>,
        q: &[S],
        qd: &[S],
        aux: &[S],
        t: S,
        qdd: &[S],
        lam: &[S],
        y: &[S],
    ) -> Result<(Mat<S>, Mat<S>)> {
        let l = &self.layout;
        let (n, m, nc, p) = (l.n, l.m, l.nc, l.p_sens);
        let mut qddp = Mat::zeros(n, p);
        let mut lamp = Mat::zeros(m, p);
        let corrupt = S::from_f64(self.corrupt_kbar);
        for k in 0..p {
            let o = l.sens_col(k);
            let qp = &y[o..o + n];
            let qdp = &y[o + n..o + 2 * n];
            let auxp = &y[o + 2 * n..o + 2 * n + nc];
            let seed = |v: &[S], d: &[S]| -> Vec<Dual<S>> {
                v.iter()
                    .zip(d.iter())
                    .map(|(&x, &dx)| Dual::seeded(x, dx))
                    .collect()
            };
            let lift = |v: &[S]| -> Vec<Dual<S>> {
                v.iter().map(|&x| Dual::constant(x)).collect()
            };
            let qs = seed(q, qp);
            let qds = seed(qd, qdp);
            let auxs = seed(aux, auxp);
            let qdds = lift(qdd);
            let lams = lift(lam);
            // A_k = −(K̄ q′ + C̄ q̇′ − Q_aux aux′ − Q̄ e_k): one directional
            // pass of the force residual at the cached ρ-seeded model
            let r = force_residual_with(
                &self.seeded_d1[k],
                &self.seeded_d2[k],
                &qs,
                &qds,
                &auxs,
                Dual::constant(t),
                &qdds,
                &lams,
            )?;
            let da: Vec<S> = r.iter().map(|x| x.d).collect();
            // B_k = (c − Φ_q q̈) directional with the same seeds
            let c_dir = crate::constraints::c_term_with(&self.seeded_d3[k], &qs, &qds);
            let pq_dir = crate::constraints::phi_dot_with(&self.seeded_d2[k], &qs, &qdds);
            let db: Vec<S> = c_dir
                .iter()
                .zip(pq_dir.iter())
                .map(|(a, b)| (*a - *b).d)
                .collect();
            let mut rhs = vec![S::zero(); n + m];
            for i in 0..n {
                rhs[i] = -corrupt * da[i];
            }
            for i in 0..m {
                rhs[n + i] = db[i];
            }
            fac_sens.solve_in_place(&mut rhs);
            for i in 0..n {
                qddp[(i, k)] = rhs[i];
            }
            for i in 0..m {
                lamp[(i, k)] = rhs[n + i];
            }
        }
        Ok((qddp, lamp))
    }

    /// Sensitivity saddle from an already-assembled `L̄`.
    fn sens_saddle_from_lbar(&self, q: &[S], l_bar: &Mat<S>, phi_q: &Mat<S>) -> Result<Lu<S>> {
        let l = &self.layout;
        let (n, m) = (l.n, l.m);
        let mass = mass_matrix(&self.em, q);
        let mut k = Mat::zeros(n + m, n + m);
        k.set_block(0, 0, &mass);
        for i in 0..m {
            for j in 0..n {
                k[(n + i, j)] = phi_q[(i, j)];
                k[(j, n + i)] = l_bar[(j, i)];
            }
        }
        Lu::factor(&k).map_err(|_| MbsError::SingularMatrix {
            context: "sensitivity saddle matrix".into(),
        })
    }

    /// Factor the sensitivity saddle `[[M, L̄],[Φ_q, 0]]`; `L̄` needs only
    /// the friction λ-Jacobian, assembled by seeding.
    fn sens_saddle(&self, q: &[S], qd: &[S], lam: &[S], phi_q: &Mat<S>) -> Result<Lu<S>> {
        let l = &self.layout;
        let (n, m) = (l.n, l.m);
        let mass = mass_matrix(&self.em, q);
        let mut k = Mat::zeros(n + m, n + m);
        k.set_block(0, 0, &mass);
        for i in 0..m {
            for j in 0..n {
                k[(n + i, j)] = phi_q[(i, j)];
                k[(j, n + i)] = phi_q[(i, j)];
            }
        }
        // subtract Q^Af_λ from the upper-right block
        let prep = prepare_friction(&self.em, q)?;
        let qaf_lam = friction_lambda_jacobian_prepared(&self.em, &prep, qd, lam);
        for c in 0..m {
            for i in 0..n {
                k[(i, n + c)] -= qaf_lam[(i, c)];
            }
        }
        Lu::factor(&k).map_err(|_| MbsError::SingularMatrix {
            context: "sensitivity saddle matrix".into(),
        })
    }

    fn objective_integrand(&self, q: &[S], qd: &[S], lam: &[S], aux: &[S], t: S) -> S {
        match &self.objective {
            Some(spec) => spec.integrand(&self.em, q, qd, lam, aux, t),
            None => S::zero(),
        }
    }

    /// Gradient-quadrature rates `g_q q′ + g_q̇ q̇′ + g_λ λ′ + g_aux aux′ + g_ρ`.
    #[allow(clippy::too_many_arguments)]
    fn grad_quad_rates(
        &self,
        q: &[S],
        qd: &[S],
        lam: &[S],
        aux: &[S],
        t: S,
        y: &[S],
        lamp: &Mat<S>,
    ) -> Result<Vec<S>> {
        let l = &self.layout;
        let (n, m, nc, p) = (l.n, l.m, l.nc, l.p_sens);
        let spec = self.objective.as_ref().expect("objective");
        let mut out = vec![S::zero(); p];
        for k in 0..p {
            let o = l.sens_col(k);
            let qp = &y[o..o + n];
            let qdp = &y[o + n..o + 2 * n];
            let auxp = &y[o + 2 * n..o + 2 * n + nc];
            let emk = &self.seeded_d1[k];
            let qs: Vec<Dual<S>> = (0..n).map(|i| Dual::seeded(q[i], qp[i])).collect();
            let qds: Vec<Dual<S>> = (0..n).map(|i| Dual::seeded(qd[i], qdp[i])).collect();
            let lams: Vec<Dual<S>> = (0..m).map(|i| Dual::seeded(lam[i], lamp[(i, k)])).collect();
            let auxs: Vec<Dual<S>> = (0..nc).map(|i| Dual::seeded(aux[i], auxp[i])).collect();
            let g = spec.integrand(emk, &qs, &qds, &lams, &auxs, Dual::constant(t));
            out[k] = g.d;
        }
        Ok(out)
    }
}

impl<'m, S: Scalar> DaeSystem<S> for MbsSystem<'m, S> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn mass_diag(&self) -> &[f64] {
        &self.mass
    }

    fn rhs(&mut self, t: f64, y: &[S], f: &mut Vec<S>) -> Result<()> {
        let l = self.layout;
        let (q, qd, lam, aux) = self.split(y);
        let ts = S::from_f64(t);
        let fac = saddle_factor(&self.em, q)?;
        let (qdd, lam_star) = index1_solve_with(&self.em, &fac, q, qd, lam, aux, ts)?;

        f.clear();
        f.reserve(l.dim());
        f.extend_from_slice(qd);
        f.extend_from_slice(&qdd);
        for i in 0..l.m {
            f.push(lam_star[i] - lam[i]);
        }
        let rates = controller_aux_rates(&self.em, q, qd);
        f.extend_from_slice(&rates);
        if l.quad {
            f.push(self.objective_integrand(q, qd, lam, aux, ts));
        }

        if l.p_sens > 0 {
            let phi_q = constraint_jacobian(&self.em, q);
            let fac_sens = self.sens_saddle(q, qd, lam, &phi_q)?;
            let (qddp, lamp) =
                self.sensitivity_columns(&fac_sens, q, qd, aux, ts, &qdd, lam, y)?;
            for k in 0..l.p_sens {
                let o = l.sens_col(k);
                // q̇′ rows
                f.extend_from_slice(&y[o + l.n..o + 2 * l.n]);
                // q̈′ rows
                for i in 0..l.n {
                    f.push(qddp[(i, k)]);
                }
                // aux′ rates
                if l.nc > 0 {
                    let qp = &y[o..o + l.n];
                    let qdp = &y[o + l.n..o + 2 * l.n];
                    let da = aux_rates_directional(&self.em, q, qd, Some(qp), Some(qdp), Some(k))?;
                    f.extend_from_slice(&da);
                }
            }
            if l.quad {
                let gq = self.grad_quad_rates(q, qd, lam, aux, ts, y, &lamp)?;
                f.extend_from_slice(&gq);
            }
        }
        debug_assert_eq!(f.len(), l.dim());
        Ok(())
    }

    fn jacobian(&mut self, t: f64, y: &[S]) -> Result<JacobianRep<S>> {
        let l = self.layout;
        let (q, qd, lam, aux) = self.split(y);
        let ts = S::from_f64(t);
        let fac = saddle_factor(&self.em, q)?;
        let (qdd, _) = index1_solve_with(&self.em, &fac, q, qd, lam, aux, ts)?;
        let terms = tlm_terms(&self.em, q, qd, aux, ts, &qdd, lam)?;
        let dyn_block = assemble_dyn_jacobian(self, &fac, &terms, q, qd, lam, aux, ts, &qdd)?;

        if l.p_sens == 0 {
            return Ok(JacobianRep::Dense(dyn_block));
        }
        let fac_sens = self.sens_saddle_from_lbar(q, &terms.l_bar, &terms.phi_q)?;
        let sens_block = assemble_sens_block(self, &fac_sens, &terms, q, qd)?;
        Ok(JacobianRep::BlockDiag {
            dyn_block,
            sens_block,
            n_sens: l.p_sens,
            tail: l.tail(),
        })
    }

    fn post_accept(&mut self, t: f64, y: &mut [S]) {
        let l = self.layout;
        // project (q, q̇) back onto the constraint manifold (this includes
        // the Euler-norm rows, i.e. renormalization, and the joint rows);
        // each sensitivity column is pushed through the projection's exact
        // derivative by re-running it dual-seeded on the cached ρ-seeded
        // models.
        {
            let (qm, rest) = y.split_at_mut(l.n);
            let qdm = &mut rest[..l.n];
            if let Ok(basis) = crate::dynamics::project_to_manifold(&self.em, qm, qdm) {
                // push each sensitivity column through the projection's
                // derivative: the dropped curvature terms multiply the
                // post-projection residuals, which are at machine zero
                let q0: Vec<S> = y[l.q()].to_vec();
                let qd0: Vec<S> = y[l.qd()].to_vec();
                for k in 0..l.p_sens {
                    let so = l.sens_col(k);
                    // r = Φ_q q′ + Φ_ρ e_k via one seeded pass
                    let qs: Vec<Dual<S>> = (0..l.n)
                        .map(|i| Dual::seeded(q0[i], y[so + i]))
                        .collect();
                    let mut phi_d = Vec::with_capacity(l.m);
                    eval_constraints_into(&self.seeded_d1[k], &qs, &mut phi_d);
                    let r_pos: Vec<S> = phi_d.iter().map(|x| x.d).collect();
                    let mut col: Vec<S> = y[so..so + l.n].to_vec();
                    // the position projection solves against Φ_q at the
                    // projected state, so subtract the tangent residual
                    let mut extra = vec![S::zero(); l.m];
                    let mut jq = vec![S::zero(); l.m];
                    basis.jac.matvec(&col, &mut jq);
                    for i in 0..l.m {
                        extra[i] = r_pos[i] - jq[i];
                    }
                    basis.project_direction(&mut col, &extra);
                    y[so..so + l.n].copy_from_slice(&col);
                    // velocity level: d(Φ_q q̇) along (q′, e_k) plus Φ_q q̇′
                    let qds_val: Vec<Dual<S>> =
                        qd0.iter().map(|&x| Dual::constant(x)).collect();
                    let pd = crate::constraints::phi_dot_with(&self.seeded_d2[k], &qs, &qds_val);
                    // the velocity residual directional (Φ_qq q′ + Φ_qρ) q̇
                    // has no Φ_q q̇′ part (q̇ held constant in the pass), so
                    // project_direction adds it
                    let r_vel: Vec<S> = pd.iter().map(|x| x.d).collect();
                    let mut vcol: Vec<S> = y[so + l.n..so + 2 * l.n].to_vec();
                    basis.project_direction(&mut vcol, &r_vel);
                    y[so + l.n..so + 2 * l.n].copy_from_slice(&vcol);
                }
            }
        }
        // restore algebraic consistency: fixed-point sweeps on λ = λ*(y)
        // (the stiffly accurate step lands close; one or two sweeps suffice)
        {
            let ts = S::from_f64(t);
            let (q, qd, lam, aux) = self.split(y);
            let (q, qd, aux) = (q.to_vec(), qd.to_vec(), aux.to_vec());
            let mut lam_cur = lam.to_vec();
            if let Ok(fac) = saddle_factor(&self.em, &q) {
                for _ in 0..2 {
                    match index1_solve_with(&self.em, &fac, &q, &qd, &lam_cur, &aux, ts) {
                        Ok((_, lam_star)) => lam_cur = lam_star,
                        Err(_) => break,
                    }
                }
                for (dst, v) in y[l.lam()].iter_mut().zip(lam_cur.iter()) {
                    *dst = *v;
                }
            }
        }
    }
}

/// Dynamics Jacobian by implicit-function differentiation of the saddle
/// solve: `d(q̈, λ*)/d(state) = −K⁻¹ [∂r̃/∂state]` with the TLM blocks as the
/// residual partials.
#[allow(clippy::too_many_arguments)]
fn assemble_dyn_jacobian<S: Scalar>(
    sys: &MbsSystem<'_, S>,
    fac: &SaddleFactor<S>,
    terms: &TlmTerms<S>,
    q: &[S],
    qd: &[S],
    lam: &[S],
    aux: &[S],
    t: S,
    qdd: &[S],
) -> Result<Mat<S>> {
    let l = sys.layout;
    let (n, m, nc) = (l.n, l.m, l.nc);
    let d = l.dyn_dim();
    let mut jac = Mat::zeros(d, d);
    // q̇ rows
    for i in 0..n {
        jac[(i, n + i)] = S::one();
    }
    let mut col = vec![S::zero(); n + m];
    let scatter = |jac: &mut Mat<S>, col: &[S], col_idx: usize| {
        for i in 0..n {
            jac[(n + i, col_idx)] = col[i];
        }
        for i in 0..m {
            jac[(2 * n + i, col_idx)] = col[n + i];
        }
    };
    // q columns: −K⁻¹ [K̄ e_j; ((Φ_q q̈)_q − c_q) e_j]
    for j in 0..n {
        for i in 0..n {
            col[i] = -terms.k_bar[(i, j)];
        }
        for i in 0..m {
            col[n + i] = -(terms.phiq_qdd_q[(i, j)] - terms.c_q[(i, j)]);
        }
        fac.lu.solve_in_place(&mut col);
        scatter(&mut jac, &col, j);
    }
    // q̇ columns: −K⁻¹ [C̄ e_j; −c_q̇ e_j]
    for j in 0..n {
        for i in 0..n {
            col[i] = -terms.c_bar[(i, j)];
        }
        for i in 0..m {
            col[n + i] = terms.c_qd[(i, j)];
        }
        fac.lu.solve_in_place(&mut col);
        scatter(&mut jac, &col, n + j);
    }
    // λ columns: K⁻¹ [Q^Af_λ e_j; 0]; Q^Af_λ = Φ_qᵀ − L̄
    for j in 0..m {
        for i in 0..n {
            col[i] = terms.phi_q[(j, i)] - terms.l_bar[(i, j)];
        }
        for i in 0..m {
            col[n + i] = S::zero();
        }
        fac.lu.solve_in_place(&mut col);
        scatter(&mut jac, &col, 2 * n + j);
        // algebraic residual λ* − λ
        jac[(2 * n + j, 2 * n + j)] -= S::one();
    }
    // aux columns: K⁻¹ [Q_aux e_j; 0]
    for j in 0..nc {
        for i in 0..n {
            col[i] = terms.q_aux[(i, j)];
        }
        for i in 0..m {
            col[n + i] = S::zero();
        }
        fac.lu.solve_in_place(&mut col);
        scatter(&mut jac, &col, 2 * n + m + j);
    }
    // aux rate rows (d(auẋ)/d(q, q̇, ρ are not states here))
    if nc > 0 {
        let mut unit = vec![S::zero(); n];
        for j in 0..n {
            unit[j] = S::one();
            let dq = aux_rates_directional(&sys.em, q, qd, Some(&unit), None, None)?;
            let dqd = aux_rates_directional(&sys.em, q, qd, None, Some(&unit), None)?;
            for i in 0..nc {
                jac[(2 * n + m + i, j)] = dq[i];
                jac[(2 * n + m + i, n + j)] = dqd[i];
            }
            unit[j] = S::zero();
        }
    }
    // objective quadrature row: partials of g
    if let Some(iq) = l.quad_idx() {
        let spec = sys.objective.as_ref().expect("objective");
        let emd = lift_model(&sys.em);
        let mut qs: Vec<Dual<S>> = q.iter().map(|&x| Dual::constant(x)).collect();
        let mut qds: Vec<Dual<S>> = qd.iter().map(|&x| Dual::constant(x)).collect();
        let mut lams: Vec<Dual<S>> = lam.iter().map(|&x| Dual::constant(x)).collect();
        let mut auxs: Vec<Dual<S>> = aux.iter().map(|&x| Dual::constant(x)).collect();
        let td = Dual::constant(t);
        for j in 0..n {
            qs[j].d = S::one();
            jac[(iq, j)] = spec.integrand(&emd, &qs, &qds, &lams, &auxs, td).d;
            qs[j].d = S::zero();
            qds[j].d = S::one();
            jac[(iq, n + j)] = spec.integrand(&emd, &qs, &qds, &lams, &auxs, td).d;
            qds[j].d = S::zero();
        }
        for j in 0..m {
            lams[j].d = S::one();
            jac[(iq, 2 * n + j)] = spec.integrand(&emd, &qs, &qds, &lams, &auxs, td).d;
            lams[j].d = S::zero();
        }
        for j in 0..nc {
            auxs[j].d = S::one();
            jac[(iq, 2 * n + m + j)] = spec.integrand(&emd, &qs, &qds, &lams, &auxs, td).d;
            auxs[j].d = S::zero();
        }
    }
    let _ = qdd;
    Ok(jac)
}

/// Per-parameter sensitivity diagonal block: the linearization of one
/// sensitivity column's own dynamics (shared by all columns).
fn assemble_sens_block<S: Scalar>(
    sys: &MbsSystem<'_, S>,
    fac_sens: &Lu<S>,
    terms: &TlmTerms<S>,
    q: &[S],
    qd: &[S],
) -> Result<Mat<S>> {
    let l = sys.layout;
    let (n, m, nc) = (l.n, l.m, l.nc);
    let s = l.sens_dim();
    let mut blk = Mat::zeros(s, s);
    for i in 0..n {
        blk[(i, n + i)] = S::one();
    }
    let mut col = vec![S::zero(); n + m];
    // q′ columns: [I 0] SS⁻¹ [−K̄ e_j; −((Φ_q q̈)_q − c_q) e_j]
    for j in 0..n {
        for i in 0..n {
            col[i] = -terms.k_bar[(i, j)];
        }
        for i in 0..m {
            col[n + i] = -(terms.phiq_qdd_q[(i, j)] - terms.c_q[(i, j)]);
        }
        fac_sens.solve_in_place(&mut col);
        for i in 0..n {
            blk[(n + i, j)] = col[i];
        }
    }
    // q̇′ columns: [I 0] SS⁻¹ [−C̄ e_j; c_q̇ e_j]
    for j in 0..n {
        for i in 0..n {
            col[i] = -terms.c_bar[(i, j)];
        }
        for i in 0..m {
            col[n + i] = terms.c_qd[(i, j)];
        }
        fac_sens.solve_in_place(&mut col);
        for i in 0..n {
            blk[(n + i, n + j)] = col[i];
        }
    }
    // aux′ columns: [I 0] SS⁻¹ [Q_aux e_j; 0]
    for j in 0..nc {
        for i in 0..n {
            col[i] = terms.q_aux[(i, j)];
        }
        for i in 0..m {
            col[n + i] = S::zero();
        }
        fac_sens.solve_in_place(&mut col);
        for i in 0..n {
            blk[(n + i, 2 * n + j)] = col[i];
        }
    }
    // aux′ rate rows: d(auẋ′_k)/d(q′_k, q̇′_k) are the aux-rate partials at
    // the current state, identical across parameter columns.
    if nc > 0 {
        let mut unit = vec![S::zero(); n];
        for j in 0..n {
            unit[j] = S::one();
            let dq = aux_rates_directional(&sys.em, q, qd, Some(&unit), None, None)?;
            let dqd = aux_rates_directional(&sys.em, q, qd, None, Some(&unit), None)?;
            for i in 0..nc {
                blk[(2 * n + i, j)] = dq[i];
                blk[(2 * n + i, n + j)] = dqd[i];
            }
            unit[j] = S::zero();
        }
    }
    Ok(blk)
}

// ============================================================================
// High-level simulation entry points
// ============================================================================

/// Options shared by all simulation entry points.
#[derive(Clone, Debug)]
pub struct SimOptions {
    pub t0: f64,
    pub tf: f64,
    pub rtol: f64,
    pub atol: f64,
    pub h0: Option<f64>,
    pub sample_times: Option<Vec<f64>>,
    pub store_steps: bool,
    pub max_steps: usize,
    /// Replay a prescribed step grid (oracle comparisons on shared grids).
    pub forced_steps: Option<Vec<f64>>,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            t0: 0.0,
            tf: 1.0,
            rtol: 1e-6,
            atol: 1e-8,
            h0: None,
            sample_times: None,
            store_steps: true,
            max_steps: 2_000_000,
            forced_steps: None,
        }
    }
}

impl SimOptions {
    fn integrator_opts(&self) -> IntegratorOpts {
        IntegratorOpts {
            rtol: self.rtol,
            atol: self.atol,
            h0: self.h0,
            sample_times: self.sample_times.clone(),
            store_steps: self.store_steps,
            max_steps: self.max_steps,
            forced_steps: self.forced_steps.clone(),
            ..Default::default()
        }
    }
}

/// Result of a dynamics (or combined) run.
pub struct SimRun<S: Scalar> {
    pub layout: SysLayout,
    pub result: IntegrationResult<S>,
    /// ψ = w(tf) + ∫g dt when an objective was attached.
    pub psi: Option<S>,
    /// ∇ψ when sensitivities were carried.
    pub gradient: Option<Vec<S>>,
}

pub fn default_tableau() -> RowTableau {
    row3w()
}

/// Forward dynamics simulation (optionally accumulating the objective).
pub fn simulate(
    model: &MbModel,
    rho: &[f64],
    objective: Option<&ObjectiveSpec>,
    opts: &SimOptions,
) -> Result<SimRun<f64>> {
    simulate_generic::<f64>(model, rho, objective, opts)
}

/// Scalar-generic simulation used by the complex-step oracle.
pub fn simulate_generic<S: Scalar>(
    model: &MbModel,
    rho: &[S],
    objective: Option<&ObjectiveSpec>,
    opts: &SimOptions,
) -> Result<SimRun<S>> {
    let layout = SysLayout::dynamics(model, objective.is_some());
    let em = model.instantiate(rho)?;
    let (q_guess, _) = model.initial_guess_q();
    let qg: Vec<S> = q_guess.iter().map(|&x| S::from_f64(x)).collect();
    let q0 = solve_initial_positions(&em, &qg, &model.pins)?;
    let qd0 = solve_initial_velocities(&em, &q0, &model.pins)?;
    let aux0 = vec![S::zero(); model.n_aux()];
    let (lam0, _) = solve_initial_lambda(&em, &q0, &qd0, &aux0, S::from_f64(opts.t0))?;

    let mut y0 = Vec::with_capacity(layout.dim());
    y0.extend_from_slice(&q0);
    y0.extend_from_slice(&qd0);
    y0.extend_from_slice(&lam0);
    y0.extend_from_slice(&aux0);
    if layout.quad {
        y0.push(S::zero());
    }

    let mut sys = MbsSystem::new(model, rho, layout, objective.cloned())?;
    let tableau = row3w();
    let result = integrate_dae(
        &mut sys,
        &tableau,
        opts.t0,
        opts.tf,
        &y0,
        &opts.integrator_opts(),
    )?;
    let psi = objective.map(|spec| {
        let y = &result.y_final;
        let (q, qd, lam, aux) = sys.split(y);
        let w = spec.terminal(&sys.em, q, qd, lam, aux);
        w + y[layout.quad_idx().unwrap()]
    });
    Ok(SimRun {
        layout,
        result,
        psi,
        gradient: None,
    })
}

/// Combined dynamics+sensitivity integration (one stepper, one error
/// control); returns the objective and its gradient when a spec is given.
pub fn simulate_with_sensitivities(
    model: &MbModel,
    rho: &[f64],
    objective: Option<&ObjectiveSpec>,
    opts: &SimOptions,
) -> Result<SimRun<f64>> {
    simulate_with_sensitivities_hooked(model, rho, objective, opts, 1.0)
}

/// Variant with the TLM-corruption test hook exposed.
pub fn simulate_with_sensitivities_hooked(
    model: &MbModel,
    rho: &[f64],
    objective: Option<&ObjectiveSpec>,
    opts: &SimOptions,
    corrupt_kbar: f64,
) -> Result<SimRun<f64>> {
    let layout = SysLayout::with_sensitivities(model, objective.is_some());
    let em = model.instantiate(rho)?;
    let (q_guess, _) = model.initial_guess_q();
    let q0 = solve_initial_positions(&em, &q_guess, &model.pins)?;
    let qd0 = solve_initial_velocities(&em, &q0, &model.pins)?;
    let aux0 = vec![0.0; model.n_aux()];
    let (lam0, _) = solve_initial_lambda(&em, &q0, &qd0, &aux0, opts.t0)?;
    let (q0p, qd0p) = initial_sensitivities(&em, &q0, &qd0, &model.pins)?;

    let mut y0 = Vec::with_capacity(layout.dim());
    y0.extend_from_slice(&q0);
    y0.extend_from_slice(&qd0);
    y0.extend_from_slice(&lam0);
    y0.extend_from_slice(&aux0);
    if layout.quad {
        y0.push(0.0);
    }
    for k in 0..layout.p_sens {
        for i in 0..layout.n {
            y0.push(q0p[(i, k)]);
        }
        for i in 0..layout.n {
            y0.push(qd0p[(i, k)]);
        }
        for _ in 0..layout.nc {
            y0.push(0.0);
        }
    }
    for _ in 0..layout.tail() {
        y0.push(0.0);
    }

    let mut sys = MbsSystem::new(model, rho, layout, objective.cloned())?;
    sys.corrupt_kbar = corrupt_kbar;
    let tableau = row3w();
    let result = integrate_dae(
        &mut sys,
        &tableau,
        opts.t0,
        opts.tf,
        &y0,
        &opts.integrator_opts(),
    )?;

    let (psi, gradient) = match objective {
        None => (None, None),
        Some(spec) => {
            let y = &result.y_final;
            let (q, qd, lam, aux) = sys.split(y);
            let w = spec.terminal(&sys.em, q, qd, lam, aux);
            let psi = w + y[layout.quad_idx().unwrap()];
            // terminal-term gradient contribution: seed each parameter column
            let ts = opts.tf;
            let fac = saddle_factor(&sys.em, q)?;
            let (qdd, _) = index1_solve_with(&sys.em, &fac, q, qd, lam, aux, ts)?;
            let phi_q = constraint_jacobian(&sys.em, q);
            let fac_sens = sys.sens_saddle(q, qd, lam, &phi_q)?;
            let (_, lamp) = sys.sensitivity_columns(&fac_sens, q, qd, aux, ts, &qdd, lam, y)?;
            let mut grad = Vec::with_capacity(layout.p_sens);
            for k in 0..layout.p_sens {
                let o = layout.sens_col(k);
                let qp = &y[o..o + layout.n];
                let qdp = &y[o + layout.n..o + 2 * layout.n];
                let auxp = &y[o + 2 * layout.n..o + 2 * layout.n + layout.nc];
                let rhos: Vec<Dual<f64>> = rho
                    .iter()
                    .enumerate()
                    .map(|(i, &r)| Dual::seeded(r, if i == k { 1.0 } else { 0.0 }))
                    .collect();
                let emk = model.instantiate(&rhos)?;
                let qs: Vec<Dual<f64>> =
                    (0..layout.n).map(|i| Dual::seeded(q[i], qp[i])).collect();
                let qds: Vec<Dual<f64>> =
                    (0..layout.n).map(|i| Dual::seeded(qd[i], qdp[i])).collect();
                let lams: Vec<Dual<f64>> = (0..layout.m)
                    .map(|i| Dual::seeded(lam[i], lamp[(i, k)]))
                    .collect();
                let auxs: Vec<Dual<f64>> = (0..layout.nc)
                    .map(|i| Dual::seeded(aux[i], auxp[i]))
                    .collect();
                let wk = spec.terminal(&emk, &qs, &qds, &lams, &auxs);
                grad.push(wk.d + y[layout.grad_quad(k)]);
            }
            (Some(psi), Some(grad))
        }
    };
    Ok(SimRun {
        layout,
        result,
        psi,
        gradient,
    })
}

/// Validation gradients through the entire simulate+objective pipeline.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum OracleMethod {
    ComplexStep,
    CentralDifference,
}

pub fn gradient_oracle(
    model: &MbModel,
    rho: &[f64],
    objective: &ObjectiveSpec,
    opts: &SimOptions,
    method: OracleMethod,
) -> Result<Vec<f64>> {
    let p = model.n_param;
    let mut grad = vec![0.0; p];
    match method {
        OracleMethod::ComplexStep => {
            let h = COMPLEX_STEP_H;
            for k in 0..p {
                let rho_c: Vec<CStep> = rho
                    .iter()
                    .enumerate()
                    .map(|(i, &r)| CStep::new(r, if i == k { h } else { 0.0 }))
                    .collect();
                let run = simulate_generic::<CStep>(model, &rho_c, Some(objective), opts)?;
                grad[k] = run.psi.expect("objective").im / h;
            }
        }
        OracleMethod::CentralDifference => {
            for k in 0..p {
                let h = 1e-6 * rho[k].abs().max(1.0);
                let mut rp = rho.to_vec();
                let mut rm = rho.to_vec();
                rp[k] = (rp[k] + h).min(model.upper[k]);
                rm[k] = (rm[k] - h).max(model.lower[k]);
                let span = rp[k] - rm[k];
                let fp = simulate(model, &rp, Some(objective), opts)?
                    .psi
                    .expect("objective");
                let fm = simulate(model, &rm, Some(objective), opts)?
                    .psi
                    .expect("objective");
                grad[k] = (fp - fm) / span;
            }
        }
    }
    Ok(grad)
}
