//! Objective functionals `ψ = w|_{tf} + ∫ g dt` and their gradients.
//!
//! The integral term rides along as an extra quadrature state integrated by
//! the main stepper; the gradient integrand (one quadrature state per
//! parameter) is fed by the state sensitivities:
//!
//! ```text
//! ∇ψᵀ = (w_q q′ + w_q̇ q̇′ + w_λ λ′ + w_aux aux′ + w_ρ)|_{tf}
//!     + ∫ (g_q q′ + g_q̇ q̇′ + g_λ λ′ + g_aux aux′ + g_ρ) dt
//! ```
//!
//! All partials come from dual seeding of the same scalar-generic integrand,
//! so an objective definition is a single function per case.

use crate::diff::Scalar;
use crate::dynamics::{control_outputs, crank_rate};
use crate::model::EvalModel;
use serde::{Deserialize, Serialize};

/// Objective choices: the three case studies plus small test functionals.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveSpec {
    /// `ψ = w_e (e_x² + e_y²)|_{tf} + ∫ w_e (e_x² + e_y²) + u_x² + u_y² dt`
    /// for the PID-stabilized pendulum (state weight `w_e`, unit control
    /// weight).
    PendulumTracking { plate: usize, rod: usize, w_err: f64 },
    /// `ψ = ∫ (ω_z − target)² dt` on one body's global-z angular velocity.
    BodySpinTarget { body: usize, target: f64 },
    /// `ψ = ∫ (ω − ω0)² + c_u u² dt` where `u` is the crank torque
    /// controller output; with `u = K_p(ω0 − ω)` this equals
    /// `∫ (ω − ω0)² (1 + c_u K_p²) dt`.
    CrankSpeedRegulation {
        crank: usize,
        axis: [f64; 3],
        omega0: f64,
        control_weight: f64,
    },
    /// `ψ = ∫ q[coord]² dt` (toy objective for gradient tests).
    CoordinateSquareIntegral { coord: usize },
    /// `ψ = ∫ 1 dt` (+ optional terminal constant).
    UnitIntegral { terminal: f64 },
}

impl ObjectiveSpec {
    /// Integrand `g(y, ρ, t)`.
    pub fn integrand<S: Scalar>(
        &self,
        em: &EvalModel<'_, S>,
        q: &[S],
        qdot: &[S],
        _lam: &[S],
        aux: &[S],
        _t: S,
    ) -> S {
        match self {
            ObjectiveSpec::PendulumTracking { plate, rod, w_err } => {
                let ex = q[7 * rod] - q[7 * plate];
                let ey = q[7 * rod + 1] - q[7 * plate + 1];
                let u = control_outputs(em, q, qdot, aux);
                S::from_f64(*w_err) * (ex * ex + ey * ey) + u[0] * u[0] + u[1] * u[1]
            }
            ObjectiveSpec::BodySpinTarget { body, target } => {
                let w = body_spin_z(q, qdot, *body);
                let d = w - S::from_f64(*target);
                d * d
            }
            ObjectiveSpec::CrankSpeedRegulation {
                crank,
                axis,
                omega0,
                control_weight,
            } => {
                let w = crank_rate(q, qdot, *crank, axis);
                let d = w - S::from_f64(*omega0);
                let u = control_outputs(em, q, qdot, aux);
                d * d + S::from_f64(*control_weight) * u[0] * u[0]
            }
            ObjectiveSpec::CoordinateSquareIntegral { coord } => q[*coord] * q[*coord],
            ObjectiveSpec::UnitIntegral { .. } => S::one(),
        }
    }

    /// Terminal term `w(y, ρ)` at `t_f`.
    pub fn terminal<S: Scalar>(
        &self,
        _em: &EvalModel<'_, S>,
        q: &[S],
        _qdot: &[S],
        _lam: &[S],
        _aux: &[S],
    ) -> S {
        match self {
            ObjectiveSpec::PendulumTracking { plate, rod, w_err } => {
                let ex = q[7 * rod] - q[7 * plate];
                let ey = q[7 * rod + 1] - q[7 * plate + 1];
                S::from_f64(*w_err) * (ex * ex + ey * ey)
            }
            ObjectiveSpec::UnitIntegral { terminal } => S::from_f64(*terminal),
            _ => S::zero(),
        }
    }
}

/// Global-z angular velocity of a body: `(2 E(p) ṗ)_z`.
pub fn body_spin_z<S: Scalar>(q: &[S], qdot: &[S], body: usize) -> S {
    let o = 7 * body;
    let p = crate::spatial::EulerParameters([q[o + 3], q[o + 4], q[o + 5], q[o + 6]]);
    let pdot = [qdot[o + 3], qdot[o + 4], qdot[o + 5], qdot[o + 6]];
    crate::spatial::angular_velocity(&p, &pdot)[2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Body, Controller, MbModel};

    fn bare_model() -> MbModel {
        let body = Body::new("b", 1.0, [0.1, 0.1, 0.1], [0.0; 3], [1.0, 0.0, 0.0, 0.0]);
        MbModel {
            name: "bare".into(),
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
                .map(|&i| crate::model::Pin {
                    coord: i,
                    value: 0.0,
                    rate: 0.0,
                })
                .collect(),
            declared_dof: 6,
        }
    }

    #[test]
    fn unit_integrand_is_one() {
        let model = bare_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (q, qd) = model.initial_guess_q();
        let spec = ObjectiveSpec::UnitIntegral { terminal: 3.0 };
        let g = spec.integrand(&em, &q, &qd, &[], &[], 0.0);
        assert_eq!(g, 1.0);
        assert_eq!(spec.terminal(&em, &q, &qd, &[], &[]), 3.0);
    }

    #[test]
    fn spin_target_measures_z_rate() {
        let model = bare_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (q, mut qd) = model.initial_guess_q();
        // spin about z at Ω: p = identity, ṗ = [0,0,0,Ω/2]
        let omega = 4.0;
        qd[6] = omega / 2.0;
        let spec = ObjectiveSpec::BodySpinTarget {
            body: 0,
            target: 15.0,
        };
        let g = spec.integrand(&em, &q, &qd, &[], &[], 0.0);
        assert!((g - (omega - 15.0) * (omega - 15.0)).abs() < 1e-12);
    }

    #[test]
    fn coordinate_square() {
        let model = bare_model();
        let em = model.instantiate(&[0.0]).unwrap();
        let (mut q, qd) = model.initial_guess_q();
        q[2] = -0.3;
        let spec = ObjectiveSpec::CoordinateSquareIntegral { coord: 2 };
        assert!((spec.integrand(&em, &q, &qd, &[], &[], 0.0) - 0.09).abs() < 1e-15);
    }
}
