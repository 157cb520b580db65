//! Equations of motion: generalized mass matrix, applied forces, controller
//! outputs, the index-1 saddle solve, and consistent initial conditions.
//!
//! The index-1 augmented form solved at every right-hand-side evaluation:
//!
//! ```text
//! [ M    Φ_qᵀ ] [ q̈ ]   [ Q + Q^Af ]
//! [ Φ_q   0   ] [ λ* ] = [    c     ]
//! ```
//!
//! with `Q^Af` evaluated at the λ carried as an algebraic state, so the
//! first-order singular-mass form can enforce `λ = λ*(y)` through its
//! algebraic residual block.

use crate::constraints::{
    body_rp, c_term, constraint_jacobian, eval_constraints, eval_stacked, phi_dot,
    stacked_jacobian,
};
use crate::diff::Scalar;
use crate::error::{MbsError, Result};
use crate::friction::{friction_jacobians, generalized_friction};
use crate::linalg::{add3, dot3, inf_norm, norm3, scale3, sub3, Lu, Mat};
use crate::model::{BodyRef, Controller, EvalForce, EvalModel, MbModel};
use crate::spatial::{
    angular_velocity, b_matrix, e_matrix, g_matrix, mat34_t_vec, mat34_vec, point_global,
    EulerParameters,
};

/// Generalized mass matrix: per body `m·I₃` and `4 Gᵀ J′ G`.
pub fn mass_matrix<S: Scalar>(em: &EvalModel<'_, S>, q: &[S]) -> Mat<S> {
    let n = em.model.n();
    let mut m = Mat::zeros(n, n);
    let four = S::from_f64(4.0);
    for b in 0..em.model.nb() {
        let o = 7 * b;
        let mass = em.mass[b];
        for i in 0..3 {
            m[(o + i, o + i)] = mass;
        }
        let (_, p) = body_rp(q, b);
        let g = g_matrix(&p);
        let jp = &em.inertia[b];
        // 4 Gᵀ J′ G
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = S::zero();
                for a in 0..3 {
                    for c in 0..3 {
                        acc += g[a][i] * jp[a][c] * g[c][j];
                    }
                }
                m[(o + 3 + i, o + 3 + j)] = four * acc;
            }
        }
    }
    m
}

/// `M(q) v` using the block structure directly.
pub fn mass_times<S: Scalar>(em: &EvalModel<'_, S>, q: &[S], v: &[S]) -> Vec<S> {
    let n = em.model.n();
    let mut out = vec![S::zero(); n];
    let four = S::from_f64(4.0);
    for b in 0..em.model.nb() {
        let o = 7 * b;
        let mass = em.mass[b];
        for i in 0..3 {
            out[o + i] = mass * v[o + i];
        }
        let (_, p) = body_rp(q, b);
        let g = g_matrix(&p);
        let jp = &em.inertia[b];
        let vp = [v[o + 3], v[o + 4], v[o + 5], v[o + 6]];
        let gv = mat34_vec(&g, &vp);
        let jgv = crate::linalg::mat3_vec(jp, &gv);
        let gt = mat34_t_vec(&g, &jgv);
        for i in 0..4 {
            out[o + 3 + i] = four * gt[i];
        }
    }
    out
}

/// Kinetic energy `½ q̇ᵀ M q̇`.
pub fn kinetic_energy<S: Scalar>(em: &EvalModel<'_, S>, q: &[S], qdot: &[S]) -> S {
    let mv = mass_times(em, q, qdot);
    let mut acc = S::zero();
    for (a, b) in qdot.iter().zip(mv.iter()) {
        acc += *a * *b;
    }
    acc * S::from_f64(0.5)
}

/// Gravitational plus spring potential energy (conservation diagnostics).
pub fn potential_energy<S: Scalar>(em: &EvalModel<'_, S>, q: &[S]) -> S {
    let mut e = S::zero();
    for fe in &em.forces {
        match fe {
            EvalForce::Gravity { g } => {
                for b in 0..em.model.nb() {
                    e += em.mass[b] * S::from_f64(*g) * q[7 * b + 2];
                }
            }
            EvalForce::Tsd {
                body_i,
                body_j,
                s_i,
                s_j,
                k_s,
                free_length,
                ..
            } => {
                let pi = endpoint(q, *body_i, s_i);
                let pj = endpoint(q, *body_j, s_j);
                let d = sub3(&pj, &pi);
                let l = norm3(&d);
                let stretch = l - *free_length;
                e += S::from_f64(0.5) * *k_s * stretch * stretch;
            }
            EvalForce::PointForce { .. } => {}
        }
    }
    e
}

fn endpoint<S: Scalar>(q: &[S], body: BodyRef, s: &[S; 3]) -> [S; 3] {
    match body {
        BodyRef::Ground => *s,
        BodyRef::Body(b) => {
            let (r, p) = body_rp(q, b);
            point_global(&r, &p, s)
        }
    }
}

fn endpoint_velocity<S: Scalar>(q: &[S], qdot: &[S], body: BodyRef, s: &[S; 3]) -> [S; 3] {
    match body {
        BodyRef::Ground => [S::zero(); 3],
        BodyRef::Body(b) => {
            let o = 7 * b;
            let (_, p) = body_rp(q, b);
            let rdot = [qdot[o], qdot[o + 1], qdot[o + 2]];
            let pdot = [qdot[o + 3], qdot[o + 4], qdot[o + 5], qdot[o + 6]];
            let bm = b_matrix(&p, s);
            add3(&rdot, &mat34_vec(&bm, &pdot))
        }
    }
}

/// Apply a global point force at a body-fixed point: rows `[F; B(p,s)ᵀ F]`.
fn add_point_force<S: Scalar>(q: &[S], body: usize, s: &[S; 3], f: &[S; 3], out: &mut [S]) {
    let o = 7 * body;
    let (_, p) = body_rp(q, body);
    for i in 0..3 {
        out[o + i] += f[i];
    }
    let b = b_matrix(&p, s);
    let bt = mat34_t_vec(&b, f);
    for i in 0..4 {
        out[o + 3 + i] += bt[i];
    }
}

/// Apply a pure global torque: rows `2 E(p)ᵀ n`.
fn add_torque<S: Scalar>(q: &[S], body: usize, n_global: &[S; 3], out: &mut [S]) {
    let o = 7 * body;
    let (_, p) = body_rp(q, body);
    let e = e_matrix(&p);
    let et = mat34_t_vec(&e, n_global);
    let two = S::from_f64(2.0);
    for i in 0..4 {
        out[o + 3 + i] += two * et[i];
    }
}

/// Controller output values: `[u_x, u_y]` for the PID, `[τ]` for the torque
/// controllers, empty otherwise.
pub fn control_outputs<S: Scalar>(
    em: &EvalModel<'_, S>,
    q: &[S],
    qdot: &[S],
    aux: &[S],
) -> Vec<S> {
    match &em.model.controller {
        Controller::None => vec![],
        Controller::PendulumPid { plate, rod, .. } => {
            let (kp, ki, kd) = (em.ctrl_gains[0], em.ctrl_gains[1], em.ctrl_gains[2]);
            let (ex, ey, exd, eyd) = pendulum_errors(q, qdot, *plate, *rod);
            vec![
                kp * ex + ki * aux[0] + kd * exd,
                kp * ey + ki * aux[1] + kd * eyd,
            ]
        }
        Controller::CollarHeightTorque { collar, .. } => {
            let (kp, h0) = (em.ctrl_gains[0], em.ctrl_gains[1]);
            let z2 = q[7 * collar + 2];
            vec![kp * (h0 - z2)]
        }
        Controller::CrankSpeedTorque {
            crank,
            axis,
            omega0,
            ..
        } => {
            let kp = em.ctrl_gains[0];
            let w = crank_rate(q, qdot, *crank, axis);
            vec![kp * (S::from_f64(*omega0) - w)]
        }
    }
}

fn pendulum_errors<S: Scalar>(q: &[S], qdot: &[S], plate: usize, rod: usize) -> (S, S, S, S) {
    let op = 7 * plate;
    let or = 7 * rod;
    (
        q[or] - q[op],
        q[or + 1] - q[op + 1],
        qdot[or] - qdot[op],
        qdot[or + 1] - qdot[op + 1],
    )
}

/// Crank angular rate about a fixed global axis: `axisᵀ (2 E(p) ṗ)`.
pub fn crank_rate<S: Scalar>(q: &[S], qdot: &[S], crank: usize, axis: &[f64; 3]) -> S {
    let o = 7 * crank;
    let (_, p) = body_rp(q, crank);
    let pdot = [qdot[o + 3], qdot[o + 4], qdot[o + 5], qdot[o + 6]];
    let w = angular_velocity(&p, &pdot);
    let a = [
        S::from_f64(axis[0]),
        S::from_f64(axis[1]),
        S::from_f64(axis[2]),
    ];
    dot3(&a, &w)
}

/// Rates of the controller's auxiliary states (PID error integrals).
pub fn controller_aux_rates<S: Scalar>(em: &EvalModel<'_, S>, q: &[S], qdot: &[S]) -> Vec<S> {
    match &em.model.controller {
        Controller::PendulumPid { plate, rod, .. } => {
            let (ex, ey, _, _) = pendulum_errors(q, qdot, *plate, *rod);
            vec![ex, ey]
        }
        _ => vec![],
    }
}

/// External generalized forces `Q(q, q̇, aux, t)`: gravity, springs, point
/// forces and controller actuation. Friction is assembled separately.
pub fn generalized_forces<S: Scalar>(
    em: &EvalModel<'_, S>,
    q: &[S],
    qdot: &[S],
    aux: &[S],
    _t: S,
) -> Vec<S> {
    let model = em.model;
    let n = model.n();
    let mut out = vec![S::zero(); n];
    for fe in &em.forces {
        match fe {
            EvalForce::Gravity { g } => {
                let gs = S::from_f64(*g);
                for b in 0..model.nb() {
                    out[7 * b + 2] -= em.mass[b] * gs;
                }
            }
            EvalForce::Tsd {
                body_i,
                body_j,
                s_i,
                s_j,
                k_s,
                c_s,
                free_length,
            } => {
                let pi = endpoint(q, *body_i, s_i);
                let pj = endpoint(q, *body_j, s_j);
                let d = sub3(&pj, &pi);
                let l = norm3(&d);
                let unit = scale3(&d, S::one() / l);
                let vi = endpoint_velocity(q, qdot, *body_i, s_i);
                let vj = endpoint_velocity(q, qdot, *body_j, s_j);
                let ldot = dot3(&unit, &sub3(&vj, &vi));
                let mag = *k_s * (l - *free_length) + *c_s * ldot;
                let f_on_i = scale3(&unit, mag);
                if let BodyRef::Body(b) = body_i {
                    add_point_force(q, *b, s_i, &f_on_i, &mut out);
                }
                if let BodyRef::Body(b) = body_j {
                    let f_on_j = scale3(&f_on_i, -S::one());
                    add_point_force(q, *b, s_j, &f_on_j, &mut out);
                }
            }
            EvalForce::PointForce {
                body,
                s,
                direction,
                magnitude,
            } => {
                let f = [
                    S::from_f64(direction[0]) * *magnitude,
                    S::from_f64(direction[1]) * *magnitude,
                    S::from_f64(direction[2]) * *magnitude,
                ];
                add_point_force(q, *body, s, &f, &mut out);
            }
        }
    }
    match &em.model.controller {
        Controller::None => {}
        Controller::PendulumPid { plate, .. } => {
            let u = control_outputs(em, q, qdot, aux);
            let f = [u[0], u[1], S::zero()];
            let sv = [S::zero(); 3];
            add_point_force(q, *plate, &sv, &f, &mut out);
        }
        Controller::CollarHeightTorque { pillar, .. } => {
            let u = control_outputs(em, q, qdot, aux);
            let nvec = [S::zero(), S::zero(), u[0]];
            add_torque(q, *pillar, &nvec, &mut out);
        }
        Controller::CrankSpeedTorque { crank, axis, .. } => {
            let u = control_outputs(em, q, qdot, aux);
            let nvec = [
                S::from_f64(axis[0]) * u[0],
                S::from_f64(axis[1]) * u[0],
                S::from_f64(axis[2]) * u[0],
            ];
            add_torque(q, *crank, &nvec, &mut out);
        }
    }
    out
}

// ============================================================================
// Index-1 saddle solve
// ============================================================================

/// Factorization of the saddle matrix `[[M, Φ_qᵀ], [Φ_q, 0]]` at one state.
pub struct SaddleFactor<S: Scalar> {
    pub lu: Lu<S>,
    pub phi_q: Mat<S>,
    pub n: usize,
    pub m: usize,
}

/// Assemble and factor the saddle matrix.
pub fn saddle_factor<S: Scalar>(em: &EvalModel<'_, S>, q: &[S]) -> Result<SaddleFactor<S>> {
    let n = em.model.n();
    let m = em.model.m();
    let phi_q = constraint_jacobian(em, q);
    let mass = mass_matrix(em, q);
    let mut k = Mat::zeros(n + m, n + m);
    k.set_block(0, 0, &mass);
    for i in 0..m {
        for j in 0..n {
            k[(j, n + i)] = phi_q[(i, j)];
            k[(n + i, j)] = phi_q[(i, j)];
        }
    }
    let lu = Lu::factor(&k).map_err(|_| MbsError::SingularMatrix {
        context: "index-1 saddle matrix (rank-deficient constraints?)".into(),
    })?;
    Ok(SaddleFactor { lu, phi_q, n, m })
}

impl<S: Scalar> SaddleFactor<S> {
    /// Solve `[[M, Φ_qᵀ],[Φ_q, 0]] [a; λ] = [top; bottom]`.
    pub fn solve(&self, top: &[S], bottom: &[S]) -> (Vec<S>, Vec<S>) {
        let mut rhs = Vec::with_capacity(self.n + self.m);
        rhs.extend_from_slice(top);
        rhs.extend_from_slice(bottom);
        self.lu.solve_in_place(&mut rhs);
        let lam = rhs.split_off(self.n);
        (rhs, lam)
    }
}

/// Solve the index-1 system for accelerations and multipliers; `lam_in` is
/// the λ state at which the friction force is evaluated.
pub fn index1_solve<S: Scalar>(
    em: &EvalModel<'_, S>,
    q: &[S],
    qdot: &[S],
    lam_in: &[S],
    aux: &[S],
    t: S,
) -> Result<(Vec<S>, Vec<S>)> {
    let fac = saddle_factor(em, q)?;
    index1_solve_with(em, &fac, q, qdot, lam_in, aux, t)
}

/// Same as [`index1_solve`] but reusing an existing factorization.
pub fn index1_solve_with<S: Scalar>(
    em: &EvalModel<'_, S>,
    fac: &SaddleFactor<S>,
    q: &[S],
    qdot: &[S],
    lam_in: &[S],
    aux: &[S],
    t: S,
) -> Result<(Vec<S>, Vec<S>)> {
    let mut top = generalized_forces(em, q, qdot, aux, t);
    let qaf = generalized_friction(em, q, qdot, lam_in)?;
    for (o, f) in top.iter_mut().zip(qaf.iter()) {
        *o += *f;
    }
    let bottom = c_term(em, q, qdot);
    let (qdd, lam) = fac.solve(&top, &bottom);
    Ok((qdd, lam))
}

// ============================================================================
// Consistent initial conditions
// ============================================================================

/// Newton iteration for consistent initial positions on the stacked system
/// `[Φ; Ψ] = 0`, with a Levenberg-style damped fallback when the full step
/// does not reduce the residual.
pub fn solve_initial_positions<S: Scalar>(
    em: &EvalModel<'_, S>,
    q_guess: &[S],
    pins: &[crate::model::Pin],
) -> Result<Vec<S>> {
    let n = em.model.n();
    let mut q = q_guess.to_vec();
    let tol = 1e-12;
    let max_iter = 60;
    let mut res = eval_stacked(em, &q, pins);
    let mut rnorm = inf_norm(&res);
    for _ in 0..max_iter {
        if rnorm < tol {
            // polish: the convergence test sees only the leading value
            // part, so seeded runs (dual / complex-step) need a couple of
            // extra exact-Newton corrections to converge the derivative
            // channel as well (it satisfies a linear system at the root).
            for _ in 0..2 {
                let jac = stacked_jacobian(em, &q, pins);
                if let Ok(lu) = Lu::factor(&jac) {
                    let mut d = eval_stacked(em, &q, pins);
                    lu.solve_in_place(&mut d);
                    for (x, dx) in q.iter_mut().zip(d.iter()) {
                        *x -= *dx;
                    }
                }
            }
            return Ok(q);
        }
        let jac = stacked_jacobian(em, &q, pins);
        let step = match Lu::factor(&jac) {
            Ok(lu) => {
                let mut d = res.clone();
                lu.solve_in_place(&mut d);
                d
            }
            Err(_) => damped_step(&jac, &res, 1e-8)?,
        };
        // backtracking on the residual norm
        let mut alpha = 1.0f64;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<S> = q
                .iter()
                .zip(step.iter())
                .map(|(&x, &d)| x - d * S::from_f64(alpha))
                .collect();
            let rt = eval_stacked(em, &trial, pins);
            let tnorm = inf_norm(&rt);
            if tnorm < rnorm || tnorm < tol {
                q = trial;
                res = rt;
                rnorm = tnorm;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // trust-region style fallback: damped normal equations
            let jac = stacked_jacobian(em, &q, pins);
            debug_assert_eq!(jac.cols, n);
            let mut mu = 1e-6;
            let mut improved = false;
            for _ in 0..12 {
                let step = damped_step(&jac, &res, mu)?;
                let trial: Vec<S> = q
                    .iter()
                    .zip(step.iter())
                    .map(|(&x, &d)| x - d)
                    .collect();
                let rt = eval_stacked(em, &trial, pins);
                if inf_norm(&rt) < rnorm {
                    q = trial;
                    res = rt;
                    rnorm = inf_norm(&res);
                    improved = true;
                    break;
                }
                mu *= 10.0;
            }
            if !improved {
                return Err(MbsError::NewtonDiverged {
                    iters: max_iter,
                    residual: rnorm,
                });
            }
        }
    }
    if rnorm < tol {
        Ok(q)
    } else {
        Err(MbsError::NewtonDiverged {
            iters: max_iter,
            residual: rnorm,
        })
    }
}

/// `(JᵀJ + μI) d = Jᵀ r`
fn damped_step<S: Scalar>(jac: &Mat<S>, res: &[S], mu: f64) -> Result<Vec<S>> {
    let n = jac.cols;
    let jt = jac.transpose();
    let mut a = jt.matmul(jac);
    for i in 0..n {
        a[(i, i)] += S::from_f64(mu);
    }
    let mut rhs = vec![S::zero(); n];
    jac.matvec_t(res, &mut rhs);
    let lu = Lu::factor(&a)?;
    Ok(lu.solve(&rhs))
}

/// Initial velocities from prescribed independent rates:
/// `[Φ_q; Ψ_q] q̇ = [0; ν]` (exact linear solve).
pub fn solve_initial_velocities<S: Scalar>(
    em: &EvalModel<'_, S>,
    q0: &[S],
    pins: &[crate::model::Pin],
) -> Result<Vec<S>> {
    let m = em.model.m();
    let jac = stacked_jacobian(em, q0, pins);
    let lu = Lu::factor(&jac)?;
    let mut rhs = vec![S::zero(); em.model.n()];
    for (i, pin) in pins.iter().enumerate() {
        rhs[m + i] = S::from_f64(pin.rate);
    }
    lu.solve_in_place(&mut rhs);
    Ok(rhs)
}

/// Initial Lagrange multipliers and accelerations.
///
/// Stage 1 ignores the friction force, making the system explicit; stage 2
/// runs Newton on `R(λ) = λ − λ_saddle(Q + Q^Af(λ))` to tolerance 1e-10.
pub fn solve_initial_lambda<S: Scalar>(
    em: &EvalModel<'_, S>,
    q0: &[S],
    qdot0: &[S],
    aux0: &[S],
    t0: S,
) -> Result<(Vec<S>, Vec<S>)> {
    let model = em.model;
    let n = model.n();
    let m = model.m();
    let fac = saddle_factor(em, q0)?;
    let forces = generalized_forces(em, q0, qdot0, aux0, t0);
    let bottom = c_term(em, q0, qdot0);

    // stage 1: frictionless estimate
    let (_, mut lam) = fac.solve(&forces, &bottom);

    // stage 2: Newton on the λ residual
    let tol = 1e-10;
    for _ in 0..50 {
        let qaf = generalized_friction(em, q0, qdot0, &lam)?;
        let top: Vec<S> = forces.iter().zip(qaf.iter()).map(|(&a, &b)| a + b).collect();
        let (_, lam_star) = fac.solve(&top, &bottom);
        let res: Vec<S> = lam
            .iter()
            .zip(lam_star.iter())
            .map(|(&l, &ls)| l - ls)
            .collect();
        if inf_norm(&res) < tol {
            // polish the derivative channel of seeded runs: one extra
            // fixed-point sweep transports the exact (linear) λ-derivative
            let qaf = generalized_friction(em, q0, qdot0, &lam_star)?;
            let top: Vec<S> = forces.iter().zip(qaf.iter()).map(|(&a, &b)| a + b).collect();
            let (qdd, lam_final) = fac.solve(&top, &bottom);
            return Ok((lam_final, qdd));
        }
        // Jacobian of R: I − [0 I] K⁻¹ [Q^Af_λ; 0]
        let (_, _, qaf_lam, _) = friction_jacobians(em, q0, qdot0, &lam)?;
        let mut jr = Mat::identity(m);
        let mut col = vec![S::zero(); n + m];
        for k in 0..m {
            for i in 0..n {
                col[i] = qaf_lam[(i, k)];
            }
            for c in col.iter_mut().skip(n) {
                *c = S::zero();
            }
            fac.lu.solve_in_place(&mut col);
            for i in 0..m {
                jr[(i, k)] -= col[n + i];
            }
        }
        let lu = Lu::factor(&jr)?;
        let delta = lu.solve(&res);
        for (l, d) in lam.iter_mut().zip(delta.iter()) {
            *l -= *d;
        }
    }
    let qaf = generalized_friction(em, q0, qdot0, &lam)?;
    let top: Vec<S> = forces.iter().zip(qaf.iter()).map(|(&a, &b)| a + b).collect();
    let (_, lam_star) = fac.solve(&top, &bottom);
    let res: Vec<S> = lam
        .iter()
        .zip(lam_star.iter())
        .map(|(&l, &ls)| l - ls)
        .collect();
    Err(MbsError::NewtonDiverged {
        iters: 50,
        residual: inf_norm(&res),
    })
}

/// Fully consistent initial state: positions, velocities, multipliers and
/// accelerations from the model's guesses and pins.
pub struct InitialState {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub lam: Vec<f64>,
    pub qddot: Vec<f64>,
    pub aux: Vec<f64>,
}

pub fn consistent_initial_state(model: &MbModel, rho: &[f64]) -> Result<InitialState> {
    let em = model.instantiate(rho)?;
    let (q_guess, _) = model.initial_guess_q();
    let q = solve_initial_positions(&em, &q_guess, &model.pins)?;
    let qdot = solve_initial_velocities(&em, &q, &model.pins)?;
    let aux = vec![0.0; model.n_aux()];
    let (lam, qddot) = solve_initial_lambda(&em, &q, &qdot, &aux, 0.0)?;
    Ok(InitialState {
        q,
        qdot,
        lam,
        qddot,
        aux,
    })
}

/// Drift diagnostics along a trajectory point.
pub fn constraint_residuals(model: &MbModel, rho: &[f64], q: &[f64], qdot: &[f64]) -> (f64, f64) {
    let em = model.instantiate(rho).expect("instantiate");
    let phi = eval_constraints(&em, q);
    let pd = phi_dot(&em, q, qdot);
    (inf_norm(&phi), inf_norm(&pd))
}

/// Euler-parameter renormalization applied to a full coordinate vector.
pub fn renormalize_euler<S: Scalar>(model: &MbModel, q: &mut [S]) {
    for b in 0..model.nb() {
        let o = 7 * b + 3;
        let p = EulerParameters([q[o], q[o + 1], q[o + 2], q[o + 3]]);
        let pn = p.normalized();
        for i in 0..4 {
            q[o + i] = pn.0[i];
        }
    }
}

#[allow(dead_code)]
fn angular_rate_debug<S: Scalar>(q: &[S], qdot: &[S], body: usize) -> [S; 3] {
    let o = 7 * body;
    let (_, p) = body_rp(q, body);
    angular_velocity(&p, &[qdot[o + 3], qdot[o + 4], qdot[o + 5], qdot[o + 6]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binding::Binding;
    use crate::diff::{jacobian_forward, Dual};
    use crate::model::{Body, Controller, JointKind, JointSpec, MbModel, Pin};
    use crate::spatial::{angular_velocity_body, pdot_from_omega};

    fn free_body_model() -> MbModel {
        // single unconstrained body (only the Euler-norm row), 6 dof
        let body = Body::new("blob", 2.0, [0.3, 0.4, 0.5], [0.0; 3], [1.0, 0.0, 0.0, 0.0]);
        MbModel {
            name: "free".into(),
            bodies: vec![body],
            joints: vec![],
            forces: vec![],
            frictions: vec![],
            controller: Controller::None,
            n_param: 1,
            lower: vec![-1.0],
            upper: vec![1.0],
            rho0: vec![0.0],
            pins: [0, 1, 2, 4, 5, 6]
                .iter()
                .map(|&i| Pin {
                    coord: i,
                    value: 0.0,
                    rate: 0.0,
                })
                .collect(),
            declared_dof: 6,
        }
    }

    fn hanging_pendulum() -> MbModel {
        // rod hanging from a ground spherical joint at the origin,
        // equilibrium: r = (0, 0, −0.5)
        let body = Body::new(
            "rod",
            1.0,
            [0.084, 0.084, 0.001],
            [0.0, 0.0, -0.5],
            [1.0, 0.0, 0.0, 0.0],
        );
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
            name: "hang".into(),
            bodies: vec![body],
            joints: vec![sph],
            forces: vec![crate::model::ForceElement::Gravity { g: 9.81 }],
            frictions: vec![],
            controller: Controller::None,
            n_param: 1,
            lower: vec![-1.0],
            upper: vec![1.0],
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
    fn mass_matrix_block_structure() {
        let model = free_body_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (q, _) = model.initial_guess_q();
        let m = mass_matrix(&em, &q);
        // translational block
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 2.0 } else { 0.0 };
                assert_eq!(m[(i, j)], expect);
            }
        }
        // symmetry
        let mt = m.transpose();
        assert_eq!(m.max_abs_diff(&mt), 0.0);
        // rotational block at identity p: 4 Gᵀ J G with G = [0 | I]
        for i in 0..3 {
            assert!((m[(4 + i, 4 + i)] - 4.0 * [0.3, 0.4, 0.5][i]).abs() < 1e-15);
        }
        assert_eq!(m[(3, 3)], 0.0); // e0 direction is in the null space at identity
    }

    #[test]
    fn mass_times_matches_matrix() {
        let model = free_body_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (mut q, _) = model.initial_guess_q();
        q[3] = 0.92;
        q[4] = 0.2;
        q[5] = -0.3;
        q[6] = 0.1;
        crate::dynamics::renormalize_euler(&model, &mut q);
        let v: Vec<f64> = (0..model.n()).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let m = mass_matrix(&em, &q);
        let mut dense = vec![0.0; model.n()];
        m.matvec(&v, &mut dense);
        let fast = mass_times(&em, &q, &v);
        for i in 0..model.n() {
            assert!((dense[i] - fast[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn kinetic_energy_matches_rigid_body_formula() {
        // ½ m ‖ṙ‖² + ½ ω′ᵀ J′ ω′ with ω′ = 2 G ṗ
        let model = free_body_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (mut q, _) = model.initial_guess_q();
        q[3] = 0.8;
        q[4] = 0.4;
        q[5] = 0.2;
        q[6] = 0.4;
        renormalize_euler(&model, &mut q);
        let p = EulerParameters([q[3], q[4], q[5], q[6]]);
        let omega_body = [0.7, -0.2, 1.1];
        let pdot = pdot_from_omega(&p, &crate::linalg::mat3_vec(&crate::spatial::rotation_matrix_unchecked(&p), &omega_body));
        let mut qd = vec![0.0; model.n()];
        qd[0] = 0.3;
        qd[1] = -0.1;
        qd[2] = 0.25;
        for i in 0..4 {
            qd[3 + i] = pdot[i];
        }
        let t = kinetic_energy(&em, &q, &qd);
        let wb = angular_velocity_body(&p, &pdot);
        let j = [0.3, 0.4, 0.5];
        let expect = 0.5 * 2.0 * (0.3f64 * 0.3 + 0.1 * 0.1 + 0.25 * 0.25)
            + 0.5 * (j[0] * wb[0] * wb[0] + j[1] * wb[1] * wb[1] + j[2] * wb[2] * wb[2]);
        assert!((t - expect).abs() < 1e-12, "{} vs {}", t, expect);
    }

    #[test]
    fn free_body_no_forces_zero_acceleration() {
        let model = free_body_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (q, _) = model.initial_guess_q();
        let (qdd, _) = index1_solve(&em, &q, &vec![0.0; 7], &vec![0.0; 1], &[], 0.0).unwrap();
        assert!(inf_norm(&qdd) < 1e-12);
    }

    #[test]
    fn static_pendulum_reproduces_weight() {
        let model = hanging_pendulum();
        let em = model.instantiate(&[0.0]).unwrap();
        let (q, _) = model.initial_guess_q();
        let (qdd, lam) = index1_solve(&em, &q, &vec![0.0; 7], &vec![0.0; 4], &[], 0.0).unwrap();
        assert!(inf_norm(&qdd) < 1e-10, "acc {:?}", qdd);
        // the z-row multiplier carries the weight m g = 9.81
        assert!(
            (lam[2].abs() - 9.81).abs() < 1e-9,
            "λ_z = {} (expected ±9.81)",
            lam[2]
        );
    }

    #[test]
    fn saddle_solve_residual_small() {
        let model = hanging_pendulum();
        let em = model.instantiate(&[0.0]).unwrap();
        let (mut q, _) = model.initial_guess_q();
        q[4] = 0.1;
        renormalize_euler(&model, &mut q);
        let qd: Vec<f64> = (0..7).map(|i| 0.1 * i as f64).collect();
        let fac = saddle_factor(&em, &q).unwrap();
        let (qdd, lam) = index1_solve_with(&em, &fac, &q, &qd, &vec![0.5; 4], &[], 0.0).unwrap();
        // residual of the saddle system
        let forces = generalized_forces(&em, &q, &qd, &[], 0.0);
        let qaf = generalized_friction(&em, &q, &qd, &vec![0.5; 4]).unwrap();
        let c = c_term(&em, &q, &qd);
        let mv = mass_times(&em, &q, &qdd);
        let phl = crate::constraints::phi_qt_lambda(&em, &q, &lam);
        let mut worst = 0.0f64;
        for i in 0..7 {
            worst = worst.max((mv[i] + phl[i] - forces[i] - qaf[i]).abs());
        }
        let mut pq = vec![0.0; 4];
        fac.phi_q.matvec(&qdd, &mut pq);
        for i in 0..4 {
            worst = worst.max((pq[i] - c[i]).abs());
        }
        assert!(worst < 1e-10, "residual {}", worst);
    }

    #[test]
    fn newton_converges_from_perturbed_guess() {
        let model = hanging_pendulum();
        let em = model.instantiate(&[0.0]).unwrap();
        let (q_exact, _) = model.initial_guess_q();
        let mut guess = q_exact.clone();
        guess[0] += 1e-2;
        guess[2] += 1e-2;
        guess[4] += 1e-2;
        let q = solve_initial_positions(&em, &guess, &model.pins).unwrap();
        let res = eval_stacked(&em, &q, &model.pins);
        assert!(inf_norm(&res) < 1e-12);
        // pinned coordinates respected
        assert!((q[4]).abs() < 1e-12);
    }

    #[test]
    fn newton_converges_instantly_on_exact_guess() {
        let model = hanging_pendulum();
        let em = model.instantiate(&[0.0]).unwrap();
        let (q_exact, _) = model.initial_guess_q();
        let q = solve_initial_positions(&em, &q_exact, &model.pins).unwrap();
        for i in 0..q.len() {
            assert!((q[i] - q_exact[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn infeasible_pin_reports_divergence() {
        let mut model = hanging_pendulum();
        // pin the rod center 2 m away from the pivot: unreachable for a 0.5 m arm
        model.pins = vec![
            Pin { coord: 0, value: 2.0, rate: 0.0 },
            Pin { coord: 5, value: 0.0, rate: 0.0 },
            Pin { coord: 6, value: 0.0, rate: 0.0 },
        ];
        let em = model.instantiate(&[0.0]).unwrap();
        let (guess, _) = model.initial_guess_q();
        assert!(solve_initial_positions(&em, &guess, &model.pins).is_err());
    }

    #[test]
    fn velocity_solve_satisfies_constraints_and_scales() {
        let mut model = hanging_pendulum();
        model.pins[0].rate = 2.0; // spin about x through e1-rate
        let em = model.instantiate(&[0.0]).unwrap();
        let (q, _) = model.initial_guess_q();
        let qd = solve_initial_velocities(&em, &q, &model.pins).unwrap();
        let pd = phi_dot(&em, &q, &qd);
        assert!(inf_norm(&pd) < 1e-12);
        assert!((qd[4] - 2.0).abs() < 1e-12);
        // linearity in ν
        let mut m2 = model.clone();
        m2.pins[0].rate = 4.0;
        let qd2 = solve_initial_velocities(&em, &q, &m2.pins).unwrap();
        for i in 0..qd.len() {
            assert!((qd2[i] - 2.0 * qd[i]).abs() < 1e-12);
        }
        // ν = 0 → q̇ = 0
        let mut m0 = model.clone();
        m0.pins[0].rate = 0.0;
        let qd0 = solve_initial_velocities(&em, &q, &m0.pins).unwrap();
        assert!(inf_norm(&qd0) < 1e-15);
    }

    #[test]
    fn initial_lambda_frictionless_is_single_pass() {
        let model = hanging_pendulum();
        let em = model.instantiate(&[0.0]).unwrap();
        let (q, _) = model.initial_guess_q();
        let (lam, qdd) = solve_initial_lambda(&em, &q, &vec![0.0; 7], &[], 0.0).unwrap();
        assert!(inf_norm(&qdd) < 1e-10);
        assert!((lam[2].abs() - 9.81).abs() < 1e-9);
    }

    #[test]
    fn generalized_forces_gravity_rows() {
        let model = hanging_pendulum();
        let em = model.instantiate(&[0.0]).unwrap();
        let (q, _) = model.initial_guess_q();
        let f = generalized_forces(&em, &q, &vec![0.0; 7], &[], 0.0);
        assert_eq!(f[2], -9.81);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 0.0);
    }

    #[test]
    fn tsd_force_hookes_law() {
        // spring from ground to a body 1.01 m away with k = 1000, l0 = 1:
        // axial force 10 N pulling the body back
        let mut model = free_body_model();
        model.forces.push(crate::model::ForceElement::Tsd {
            body_i: BodyRef::Ground,
            body_j: BodyRef::Body(0),
            s_i: [
                Binding::constant(0.0),
                Binding::constant(0.0),
                Binding::constant(0.0),
            ],
            s_j: [
                Binding::constant(0.0),
                Binding::constant(0.0),
                Binding::constant(0.0),
            ],
            k_s: Binding::constant(1000.0),
            c_s: Binding::constant(0.0),
            free_length: Binding::constant(1.0),
        });
        let em = model.instantiate(&[0.0]).unwrap();
        let (mut q, _) = model.initial_guess_q();
        q[0] = 1.01;
        let f = generalized_forces(&em, &q, &vec![0.0; 7], &[], 0.0);
        assert!((f[0] - -10.0).abs() < 1e-9, "axial force {}", f[0]);
        assert!(f[1].abs() < 1e-12);
        // at natural length with zero rate: zero force
        q[0] = 1.0;
        let f0 = generalized_forces(&em, &q, &vec![0.0; 7], &[], 0.0);
        assert!(f0[0].abs() < 1e-12);
        assert!(f0[1].abs() < 1e-12);
    }

    #[test]
    fn jacobian_forward_of_forces_consistent() {
        // spot check: Q_q̇ of the TSD damper equals finite differences
        let mut model = free_body_model();
        model.forces.push(crate::model::ForceElement::Tsd {
            body_i: BodyRef::Ground,
            body_j: BodyRef::Body(0),
            s_i: [
                Binding::constant(0.0),
                Binding::constant(0.0),
                Binding::constant(0.0),
            ],
            s_j: [
                Binding::constant(0.1),
                Binding::constant(0.0),
                Binding::constant(0.0),
            ],
            k_s: Binding::constant(1000.0),
            c_s: Binding::constant(50.0),
            free_length: Binding::constant(1.0),
        });
        let em = model.instantiate(&[0.0]).unwrap();
        let (mut q, _) = model.initial_guess_q();
        q[0] = 1.3;
        q[1] = 0.2;
        let qd: Vec<f64> = (0..7).map(|i| 0.1 * (i as f64) - 0.2).collect();
        let emd = crate::constraints::lift_model(&em);
        let qlift: Vec<Dual<f64>> = q.iter().map(|&x| Dual::constant(x)).collect();
        let jac = jacobian_forward(
            |qdd, out| {
                let f = generalized_forces(&emd, &qlift, qdd, &[], Dual::constant(0.0));
                out.extend_from_slice(&f);
            },
            &qd,
            model.n(),
        );
        let h = 1e-6;
        for k in 0..model.n() {
            let mut vp = qd.clone();
            let mut vm = qd.clone();
            vp[k] += h;
            vm[k] -= h;
            let fp = generalized_forces(&em, &q, &vp, &[], 0.0);
            let fm = generalized_forces(&em, &q, &vm, &[], 0.0);
            for i in 0..model.n() {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!((jac[(i, k)] - fd).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn consistent_state_pipeline() {
        let model = hanging_pendulum();
        let st = consistent_initial_state(&model, &[0.0]).unwrap();
        let (phi, phid) = constraint_residuals(&model, &[0.0], &st.q, &st.qdot);
        assert!(phi < 1e-12);
        assert!(phid < 1e-12);
        assert!(inf_norm(&st.qddot) < 1e-9);
    }
}

/// `(M(q) q̈)_q` assembled per body: only each body's own 4 orientation
/// coordinates enter its rotational mass block.
pub fn mass_qdd_q<S: Scalar>(em: &EvalModel<'_, S>, q: &[S], qdd: &[S]) -> crate::linalg::Mat<S> {
    let n = em.model.n();
    let mut out = crate::linalg::Mat::zeros(n, n);
    let four = S::from_f64(4.0);
    for b in 0..em.model.nb() {
        let o = 7 * b;
        let jp = &em.inertia[b];
        let vp = [qdd[o + 3], qdd[o + 4], qdd[o + 5], qdd[o + 6]];
        // block(p) = 4 G(p)ᵀ J′ G(p) p̈: seed each of the 4 p-coordinates
        for col in 0..4 {
            let mut pd: [crate::diff::Dual<S>; 4] = [
                crate::diff::Dual::constant(q[o + 3]),
                crate::diff::Dual::constant(q[o + 4]),
                crate::diff::Dual::constant(q[o + 5]),
                crate::diff::Dual::constant(q[o + 6]),
            ];
            pd[col].d = S::one();
            let p = crate::spatial::EulerParameters(pd);
            let g = crate::spatial::g_matrix(&p);
            let vpd = [
                crate::diff::Dual::constant(vp[0]),
                crate::diff::Dual::constant(vp[1]),
                crate::diff::Dual::constant(vp[2]),
                crate::diff::Dual::constant(vp[3]),
            ];
            let gv = crate::spatial::mat34_vec(&g, &vpd);
            let jl = [
                [
                    crate::diff::Dual::constant(jp[0][0]),
                    crate::diff::Dual::constant(jp[0][1]),
                    crate::diff::Dual::constant(jp[0][2]),
                ],
                [
                    crate::diff::Dual::constant(jp[1][0]),
                    crate::diff::Dual::constant(jp[1][1]),
                    crate::diff::Dual::constant(jp[1][2]),
                ],
                [
                    crate::diff::Dual::constant(jp[2][0]),
                    crate::diff::Dual::constant(jp[2][1]),
                    crate::diff::Dual::constant(jp[2][2]),
                ],
            ];
            let jgv = crate::linalg::mat3_vec(&jl, &gv);
            let gt = crate::spatial::mat34_t_vec(&g, &jgv);
            for row in 0..4 {
                out[(o + 3 + row, o + 3 + col)] = four * gt[row].d;
            }
        }
    }
    out
}

/// Project a state onto the constraint manifold: two minimal-norm Newton
/// corrections at position level (`Δq = Φ_qᵀ (Φ_q Φ_qᵀ)⁻¹ Φ`), then one
/// velocity-level solve removing `Φ_q q̇`. Fixed iteration counts keep the
/// control flow identical across plain / dual / complex-step evaluations.
pub fn project_to_manifold<S: Scalar>(
    em: &EvalModel<'_, S>,
    q: &mut [S],
    qdot: &mut [S],
) -> Result<ProjectionBasis<S>> {
    let n = em.model.n();
    let m = em.model.m();
    for _ in 0..2 {
        let phi = eval_constraints(em, q);
        let jac = constraint_jacobian(em, q);
        let jjt = jac.matmul(&jac.transpose());
        let lu = Lu::factor(&jjt)?;
        let w = lu.solve(&phi);
        let mut corr = vec![S::zero(); n];
        jac.matvec_t(&w, &mut corr);
        for (x, c) in q.iter_mut().zip(corr.iter()) {
            *x -= *c;
        }
    }
    let jac = constraint_jacobian(em, q);
    let jjt = jac.matmul(&jac.transpose());
    let lu = Lu::factor(&jjt)?;
    let mut jv = vec![S::zero(); m];
    jac.matvec(qdot, &mut jv);
    lu.solve_in_place(&mut jv);
    let mut corr = vec![S::zero(); n];
    jac.matvec_t(&jv, &mut corr);
    for (x, c) in qdot.iter_mut().zip(corr.iter()) {
        *x -= *c;
    }
    Ok(ProjectionBasis { jac, lu })
}

/// Constraint Jacobian and `(Φ_q Φ_qᵀ)` factorization at the projected
/// state; lets callers push tangent directions through the projection.
pub struct ProjectionBasis<S: Scalar> {
    pub jac: Mat<S>,
    pub lu: Lu<S>,
}

impl<S: Scalar> ProjectionBasis<S> {
    /// Remove the constraint-normal component of a direction: for residual
    /// directional `r`, applies `v ← v − Φ_qᵀ (Φ_q Φ_qᵀ)⁻¹ (Φ_q v + r)`.
    pub fn project_direction(&self, v: &mut [S], extra: &[S]) {
        let m = self.jac.rows;
        let mut rhs = vec![S::zero(); m];
        self.jac.matvec(v, &mut rhs);
        for (a, b) in rhs.iter_mut().zip(extra.iter()) {
            *a += *b;
        }
        self.lu.solve_in_place(&mut rhs);
        let mut corr = vec![S::zero(); v.len()];
        self.jac.matvec_t(&rhs, &mut corr);
        for (x, c) in v.iter_mut().zip(corr.iter()) {
            *x -= *c;
        }
    }
}
