//! Declarative multibody system description.
//!
//! An [`MbModel`] holds bodies, joints, force elements, friction specs and a
//! controller, with every physical scalar expressed as a [`Binding`] over the
//! design/control parameter vector ρ. Generalized coordinates are
//! reference-point coordinates: each body contributes `[r (3), p (4)]`, so
//! `n = 7·nb`. Constraint rows are laid out joint by joint in declaration
//! order, followed by one Euler-norm row per body.

use crate::binding::Binding;
use crate::diff::Scalar;
use crate::error::{MbsError, Result};
use crate::spatial::BodyState;
use serde::{Deserialize, Serialize};

/// Either a model body (by index) or the fixed ground.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BodyRef {
    Body(usize),
    Ground,
}

/// Rigid body: mass/inertia bindings plus the initial configuration guess.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Body {
    pub name: String,
    pub mass: Binding,
    /// Body-frame inertia about the reference point (= centroid).
    pub inertia: [[Binding; 3]; 3],
    pub initial_guess: BodyStateDesc,
}

/// Serializable form of [`BodyState`].
#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct BodyStateDesc {
    pub r: [f64; 3],
    pub p: [f64; 4],
    #[serde(default)]
    pub rdot: [f64; 3],
    #[serde(default = "zero4")]
    pub pdot: [f64; 4],
}

fn zero4() -> [f64; 4] {
    [0.0; 4]
}

impl From<BodyStateDesc> for BodyState {
    fn from(d: BodyStateDesc) -> Self {
        BodyState {
            r: d.r,
            p: d.p,
            rdot: d.rdot,
            pdot: d.pdot,
        }
    }
}

impl Body {
    /// Spherical-ish body with diagonal inertia, at rest.
    pub fn new(name: &str, mass: f64, inertia_diag: [f64; 3], r: [f64; 3], p: [f64; 4]) -> Self {
        Body {
            name: name.to_string(),
            mass: Binding::constant(mass),
            inertia: diag_inertia([
                Binding::constant(inertia_diag[0]),
                Binding::constant(inertia_diag[1]),
                Binding::constant(inertia_diag[2]),
            ]),
            initial_guess: BodyStateDesc {
                r,
                p,
                rdot: [0.0; 3],
                pdot: [0.0; 4],
            },
        }
    }
}

/// Diagonal inertia helper.
pub fn diag_inertia(d: [Binding; 3]) -> [[Binding; 3]; 3] {
    let z = || Binding::constant(0.0);
    [
        [d[0].clone(), z(), z()],
        [z(), d[1].clone(), z()],
        [z(), z(), d[2].clone()],
    ]
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Spherical,
    Revolute,
    Cylindrical,
    Translational,
    Universal,
    GroundLock,
    /// Body held on the ground plane: z position plus all three orientation
    /// parameters locked. Supports in-plane sliding friction.
    PlanarContact,
}

impl JointKind {
    /// Constraint rows contributed by the joint (Euler-norm rows counted
    /// separately, one per body).
    pub fn rows(&self) -> usize {
        match self {
            JointKind::Spherical => 3,
            JointKind::Revolute => 5,
            JointKind::Cylindrical => 4,
            JointKind::Translational => 5,
            JointKind::Universal => 4,
            JointKind::GroundLock => 6,
            JointKind::PlanarContact => 4,
        }
    }
}

/// Holonomic joint between body `i` and body `j` (or ground).
///
/// `c_i`/`c_j` rotate the joint definition frame into the respective body
/// frame; the joint axis is the frame's z column. `s_i`/`s_j` locate the
/// joint point in body coordinates (for ground joints, `s_j` is global).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    pub kind: JointKind,
    pub body_i: usize,
    pub body_j: BodyRef,
    pub s_i: [Binding; 3],
    pub s_j: [Binding; 3],
    pub c_i: [[f64; 3]; 3],
    pub c_j: [[f64; 3]; 3],
    /// Ground-lock target position (defaults to the body's initial guess).
    #[serde(default)]
    pub lock_r: Option<[Binding; 3]>,
    /// Planar-contact plane height of the body reference point.
    #[serde(default)]
    pub lock_z: Option<Binding>,
}

pub const IDENTITY3: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl JointSpec {
    pub fn new(name: &str, kind: JointKind, body_i: usize, body_j: BodyRef) -> Self {
        JointSpec {
            name: name.to_string(),
            kind,
            body_i,
            body_j,
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
            c_i: IDENTITY3,
            c_j: IDENTITY3,
            lock_r: None,
            lock_z: None,
        }
    }

    pub fn with_points(mut self, s_i: [Binding; 3], s_j: [Binding; 3]) -> Self {
        self.s_i = s_i;
        self.s_j = s_j;
        self
    }

    pub fn with_frames(mut self, c_i: [[f64; 3]; 3], c_j: [[f64; 3]; 3]) -> Self {
        self.c_i = c_i;
        self.c_j = c_j;
        self
    }
}

/// Smooth Brown–McPhee friction attached to one joint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrictionSpec {
    pub joint: usize,
    pub mu_s: Binding,
    pub mu_d: Binding,
    /// Stiction transition velocity (m/s).
    pub v_t: f64,
    /// Joint axial length (used for the torque lever arms of Eq-style
    /// force-component decomposition).
    pub a: Binding,
    /// Transverse width (translational joints).
    pub b: Binding,
    /// Effective friction radius (rotational friction torque).
    pub r_e: Binding,
    /// Smoothing scalar for the continuous absolute value.
    pub eps: f64,
}

/// External force elements. Actuation is modeled by [`Controller`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForceElement {
    /// Uniform gravity along −z applied to every body.
    Gravity { g: f64 },
    /// Translational spring-damper between two body-fixed points.
    Tsd {
        body_i: BodyRef,
        body_j: BodyRef,
        s_i: [Binding; 3],
        s_j: [Binding; 3],
        k_s: Binding,
        c_s: Binding,
        free_length: Binding,
    },
    /// Constant-direction point force with bound magnitude (test models).
    PointForce {
        body: usize,
        s: [Binding; 3],
        direction: [f64; 3],
        magnitude: Binding,
    },
}

/// State/output feedback controllers used by the case studies.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Controller {
    None,
    /// Two-axis PID driving the plate toward the rod center; adds the two
    /// integral states `∫e_x`, `∫e_y` to the system.
    PendulumPid {
        plate: usize,
        rod: usize,
        kp: Binding,
        ki: Binding,
        kd: Binding,
    },
    /// Torque about global z on the pillar, proportional to collar height
    /// error: `τ = K_p (h0 − z_collar)`.
    CollarHeightTorque {
        pillar: usize,
        collar: usize,
        kp: Binding,
        h0: Binding,
    },
    /// Speed regulator torque about a fixed global axis on the crank:
    /// `τ = K_p (ω0 − ω)`.
    CrankSpeedTorque {
        crank: usize,
        axis: [f64; 3],
        kp: Binding,
        omega0: f64,
    },
}

impl Controller {
    /// Number of extra differential states the controller adds.
    pub fn n_aux(&self) -> usize {
        match self {
            Controller::PendulumPid { .. } => 2,
            _ => 0,
        }
    }
}

/// Temporary constraint pinning one generalized coordinate for
/// initialization: `q[coord] − value = 0`, with `rate` prescribing the
/// corresponding velocity-level right-hand side.
#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct Pin {
    pub coord: usize,
    pub value: f64,
    #[serde(default)]
    pub rate: f64,
}

/// Complete multibody model plus parameter space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MbModel {
    pub name: String,
    pub bodies: Vec<Body>,
    pub joints: Vec<JointSpec>,
    pub forces: Vec<ForceElement>,
    pub frictions: Vec<FrictionSpec>,
    pub controller: Controller,
    /// Parameter dimension p.
    pub n_param: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rho0: Vec<f64>,
    /// Temporary constraints completing the position problem (n − m of them).
    pub pins: Vec<Pin>,
    pub declared_dof: usize,
}

/// Structural dimension counts of a model.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionReport {
    pub nb: usize,
    pub n: usize,
    pub m: usize,
    pub dof: usize,
    pub p: usize,
    /// First-order dynamic equations: 2n + m.
    pub dynamic_eqs: usize,
    /// Sensitivity equations: p·(2n + m).
    pub sensitivity_eqs: usize,
    /// Combined total: (p + 1)(2n + m).
    pub total_eqs: usize,
}

impl MbModel {
    pub fn nb(&self) -> usize {
        self.bodies.len()
    }

    /// Generalized coordinates: 7 per body.
    pub fn n(&self) -> usize {
        7 * self.bodies.len()
    }

    /// Constraint rows: joint rows plus one Euler-norm row per body.
    pub fn m(&self) -> usize {
        self.joints.iter().map(|j| j.kind.rows()).sum::<usize>() + self.bodies.len()
    }

    pub fn n_aux(&self) -> usize {
        self.controller.n_aux()
    }

    /// Row range of a joint's constraints within Φ.
    pub fn joint_rows(&self, joint: usize) -> std::ops::Range<usize> {
        let start: usize = self.joints[..joint].iter().map(|j| j.kind.rows()).sum();
        start..start + self.joints[joint].kind.rows()
    }

    /// Row index of a body's Euler-norm constraint.
    pub fn euler_row(&self, body: usize) -> usize {
        let joint_rows: usize = self.joints.iter().map(|j| j.kind.rows()).sum();
        joint_rows + body
    }

    pub fn q_index_r(&self, body: usize) -> usize {
        7 * body
    }

    pub fn q_index_p(&self, body: usize) -> usize {
        7 * body + 3
    }

    /// Initial guesses stacked into (q, q̇).
    pub fn initial_guess_q(&self) -> (Vec<f64>, Vec<f64>) {
        let mut q = Vec::with_capacity(self.n());
        let mut qd = Vec::with_capacity(self.n());
        for b in &self.bodies {
            q.extend_from_slice(&b.initial_guess.r);
            q.extend_from_slice(&b.initial_guess.p);
            qd.extend_from_slice(&b.initial_guess.rdot);
            qd.extend_from_slice(&b.initial_guess.pdot);
        }
        (q, qd)
    }

    /// Structural validation plus the dimension report.
    pub fn validate(&self) -> Result<DimensionReport> {
        let nb = self.nb();
        for (k, j) in self.joints.iter().enumerate() {
            if j.body_i >= nb {
                return Err(MbsError::InvalidModel(format!(
                    "joint {} references missing body {}",
                    k, j.body_i
                )));
            }
            if let BodyRef::Body(bj) = j.body_j {
                if bj >= nb {
                    return Err(MbsError::InvalidModel(format!(
                        "joint {} references missing body {}",
                        k, bj
                    )));
                }
                if bj == j.body_i {
                    return Err(MbsError::InvalidModel(format!(
                        "joint {} connects body {} to itself",
                        k, j.body_i
                    )));
                }
            }
            for c in [&j.c_i, &j.c_j] {
                if !is_orthonormal(c) {
                    return Err(MbsError::InvalidModel(format!(
                        "joint {} frame not orthonormal",
                        k
                    )));
                }
            }
        }
        for f in &self.frictions {
            if f.joint >= self.joints.len() {
                return Err(MbsError::InvalidModel(format!(
                    "friction references missing joint {}",
                    f.joint
                )));
            }
            if f.v_t <= 0.0 || f.eps <= 0.0 {
                return Err(MbsError::InvalidModel(
                    "friction requires v_t > 0 and eps > 0".into(),
                ));
            }
        }
        if self.lower.len() != self.n_param
            || self.upper.len() != self.n_param
            || self.rho0.len() != self.n_param
        {
            return Err(MbsError::InvalidModel(
                "parameter bounds/initial length mismatch".into(),
            ));
        }
        for k in 0..self.n_param {
            if self.lower[k] > self.upper[k] {
                return Err(MbsError::InvalidModel(format!(
                    "lower bound exceeds upper bound for rho[{}]",
                    k
                )));
            }
            if self.rho0[k] < self.lower[k] || self.rho0[k] > self.upper[k] {
                return Err(MbsError::InvalidModel(format!(
                    "rho0[{}] outside bounds",
                    k
                )));
            }
        }
        let max_rho = self.max_rho_reference();
        if let Some(mr) = max_rho {
            if mr >= self.n_param {
                return Err(MbsError::InvalidModel(format!(
                    "binding references rho[{}] but p = {}",
                    mr, self.n_param
                )));
            }
        }
        let n = self.n();
        let m = self.m();
        if self.pins.len() + m != n {
            return Err(MbsError::InvalidModel(format!(
                "need n − m = {} pins, found {}",
                n - m,
                self.pins.len()
            )));
        }
        if n - m != self.declared_dof {
            return Err(MbsError::InvalidModel(format!(
                "declared dof {} but n − m = {}",
                self.declared_dof,
                n - m
            )));
        }
        // Mass/inertia sanity at the initial parameters.
        let rho0 = self.rho0.clone();
        for (i, b) in self.bodies.iter().enumerate() {
            let mass = b.mass.eval(&rho0);
            if mass <= 0.0 {
                return Err(MbsError::InvalidModel(format!(
                    "body {} mass {} not positive at rho0",
                    i, mass
                )));
            }
            let j = eval_inertia(&b.inertia, &rho0);
            if !inertia_spd(&j) {
                return Err(MbsError::InvalidModel(format!(
                    "body {} inertia not symmetric positive definite at rho0",
                    i
                )));
            }
        }
        let p = self.n_param;
        let dynamic_eqs = 2 * n + m;
        Ok(DimensionReport {
            nb,
            n,
            m,
            dof: n - m,
            p,
            dynamic_eqs,
            sensitivity_eqs: p * dynamic_eqs,
            total_eqs: (p + 1) * dynamic_eqs,
        })
    }

    fn max_rho_reference(&self) -> Option<usize> {
        let mut max: Option<usize> = None;
        let mut upd = |b: &Binding| {
            if let Some(k) = b.max_rho() {
                max = Some(max.map_or(k, |m| m.max(k)));
            }
        };
        for b in &self.bodies {
            upd(&b.mass);
            for row in &b.inertia {
                for e in row {
                    upd(e);
                }
            }
        }
        for j in &self.joints {
            for e in j.s_i.iter().chain(j.s_j.iter()) {
                upd(e);
            }
            if let Some(lr) = &j.lock_r {
                for e in lr {
                    upd(e);
                }
            }
            if let Some(lz) = &j.lock_z {
                upd(lz);
            }
        }
        for f in &self.frictions {
            upd(&f.mu_s);
            upd(&f.mu_d);
            upd(&f.a);
            upd(&f.b);
            upd(&f.r_e);
        }
        for fe in &self.forces {
            match fe {
                ForceElement::Gravity { .. } => {}
                ForceElement::Tsd {
                    s_i,
                    s_j,
                    k_s,
                    c_s,
                    free_length,
                    ..
                } => {
                    for e in s_i.iter().chain(s_j.iter()) {
                        upd(e);
                    }
                    upd(k_s);
                    upd(c_s);
                    upd(free_length);
                }
                ForceElement::PointForce { s, magnitude, .. } => {
                    for e in s {
                        upd(e);
                    }
                    upd(magnitude);
                }
            }
        }
        match &self.controller {
            Controller::None => {}
            Controller::PendulumPid { kp, ki, kd, .. } => {
                upd(kp);
                upd(ki);
                upd(kd);
            }
            Controller::CollarHeightTorque { kp, h0, .. } => {
                upd(kp);
                upd(h0);
            }
            Controller::CrankSpeedTorque { kp, .. } => upd(kp),
        }
        max
    }

    /// Evaluate all bindings at ρ, rejecting out-of-bounds parameters.
    pub fn instantiate<S: Scalar>(&self, rho: &[S]) -> Result<EvalModel<'_, S>> {
        if rho.len() != self.n_param {
            return Err(MbsError::InvalidModel(format!(
                "expected {} parameters, got {}",
                self.n_param,
                rho.len()
            )));
        }
        const SLACK: f64 = 1e-9;
        for (k, r) in rho.iter().enumerate() {
            let v = r.re();
            if v < self.lower[k] - SLACK || v > self.upper[k] + SLACK {
                return Err(MbsError::OutOfBounds {
                    index: k,
                    value: v,
                    lower: self.lower[k],
                    upper: self.upper[k],
                });
            }
        }
        let mass = self.bodies.iter().map(|b| b.mass.eval(rho)).collect();
        let inertia = self
            .bodies
            .iter()
            .map(|b| eval_inertia(&b.inertia, rho))
            .collect();
        let joints = self
            .joints
            .iter()
            .map(|j| EvalJoint {
                s_i: eval_vec3(&j.s_i, rho),
                s_j: eval_vec3(&j.s_j, rho),
                lock_r: j.lock_r.as_ref().map(|lr| eval_vec3(lr, rho)),
                lock_z: j.lock_z.as_ref().map(|lz| lz.eval(rho)),
            })
            .collect();
        let frictions = self
            .frictions
            .iter()
            .map(|f| EvalFriction {
                mu_s: f.mu_s.eval(rho),
                mu_d: f.mu_d.eval(rho),
                v_t: f.v_t,
                a: f.a.eval(rho),
                b: f.b.eval(rho),
                r_e: f.r_e.eval(rho),
                eps: f.eps,
            })
            .collect();
        let forces = self
            .forces
            .iter()
            .map(|fe| match fe {
                ForceElement::Gravity { g } => EvalForce::Gravity { g: *g },
                ForceElement::Tsd {
                    body_i,
                    body_j,
                    s_i,
                    s_j,
                    k_s,
                    c_s,
                    free_length,
                } => EvalForce::Tsd {
                    body_i: *body_i,
                    body_j: *body_j,
                    s_i: eval_vec3(s_i, rho),
                    s_j: eval_vec3(s_j, rho),
                    k_s: k_s.eval(rho),
                    c_s: c_s.eval(rho),
                    free_length: free_length.eval(rho),
                },
                ForceElement::PointForce {
                    body,
                    s,
                    direction,
                    magnitude,
                } => EvalForce::PointForce {
                    body: *body,
                    s: eval_vec3(s, rho),
                    direction: *direction,
                    magnitude: magnitude.eval(rho),
                },
            })
            .collect();
        let ctrl_gains = match &self.controller {
            Controller::None => vec![],
            Controller::PendulumPid { kp, ki, kd, .. } => {
                vec![kp.eval(rho), ki.eval(rho), kd.eval(rho)]
            }
            Controller::CollarHeightTorque { kp, h0, .. } => vec![kp.eval(rho), h0.eval(rho)],
            Controller::CrankSpeedTorque { kp, .. } => vec![kp.eval(rho)],
        };
        Ok(EvalModel {
            model: self,
            rho: rho.to_vec(),
            mass,
            inertia,
            joints,
            frictions,
            forces,
            ctrl_gains,
        })
    }
}

fn eval_vec3<S: Scalar>(b: &[Binding; 3], rho: &[S]) -> [S; 3] {
    [b[0].eval(rho), b[1].eval(rho), b[2].eval(rho)]
}

fn eval_inertia<S: Scalar>(b: &[[Binding; 3]; 3], rho: &[S]) -> [[S; 3]; 3] {
    let mut out = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = b[i][j].eval(rho);
        }
    }
    out
}

fn is_orthonormal(c: &[[f64; 3]; 3]) -> bool {
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += c[k][i] * c[k][j];
            }
            let expect = if i == j { 1.0 } else { 0.0 };
            if (acc - expect).abs() > 1e-9 {
                return false;
            }
        }
    }
    true
}

fn inertia_spd(j: &[[f64; 3]; 3]) -> bool {
    for a in 0..3 {
        for b in 0..3 {
            if (j[a][b] - j[b][a]).abs() > 1e-12 {
                return false;
            }
        }
    }
    // leading principal minors
    let d1 = j[0][0];
    let d2 = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    let d3 = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
        - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
    d1 > 0.0 && d2 > 0.0 && d3 > 0.0
}

/// Model with all bindings evaluated at a specific ρ (scalar-generic).
///
/// Instantiation is pure: identical `(model, ρ)` inputs give identical
/// outputs. Evaluating with dual-seeded ρ yields `∂(scalar)/∂ρ_k`.
#[derive(Clone, Debug)]
pub struct EvalModel<'m, S: Scalar> {
    pub model: &'m MbModel,
    pub rho: Vec<S>,
    pub mass: Vec<S>,
    pub inertia: Vec<[[S; 3]; 3]>,
    pub joints: Vec<EvalJoint<S>>,
    pub frictions: Vec<EvalFriction<S>>,
    pub forces: Vec<EvalForce<S>>,
    pub ctrl_gains: Vec<S>,
}

/// Force element with all bindings evaluated.
#[derive(Clone, Debug)]
pub enum EvalForce<S> {
    Gravity { g: f64 },
    Tsd {
        body_i: BodyRef,
        body_j: BodyRef,
        s_i: [S; 3],
        s_j: [S; 3],
        k_s: S,
        c_s: S,
        free_length: S,
    },
    PointForce {
        body: usize,
        s: [S; 3],
        direction: [f64; 3],
        magnitude: S,
    },
}

#[derive(Clone, Debug)]
pub struct EvalJoint<S> {
    pub s_i: [S; 3],
    pub s_j: [S; 3],
    pub lock_r: Option<[S; 3]>,
    pub lock_z: Option<S>,
}

#[derive(Clone, Debug)]
pub struct EvalFriction<S> {
    pub mu_s: S,
    pub mu_d: S,
    pub v_t: f64,
    pub a: S,
    pub b: S,
    pub r_e: S,
    pub eps: f64,
}
