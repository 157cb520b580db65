//! Built-in case studies: inverted spatial pendulum (pure control), flyball
//! governor (pure design), and spatial slider-crank (co-design).
//!
//! The published studies specify the parameter tables, friction model,
//! controller structure and objectives, but not every mass, inertia, or
//! dimension. Missing physical constants are fixed, documented defaults in
//! the builders below, so the optimization endpoints are qualitative rather
//! than bit-reproducible targets.

use crate::binding::Binding;
use crate::error::Result;
use crate::model::{
    diag_inertia, Body, BodyRef, BodyStateDesc, Controller, ForceElement, FrictionSpec, JointKind,
    JointSpec, MbModel, Pin,
};
use crate::objective::ObjectiveSpec;
use crate::spatial::EulerParameters;

/// A complete case study: model, objective, and default horizon.
pub struct CaseStudy {
    pub model: MbModel,
    pub objective: ObjectiveSpec,
    pub horizon: f64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum CaseId {
    Pendulum,
    Governor,
    SliderCrank,
}

impl std::str::FromStr for CaseId {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pendulum" => Ok(CaseId::Pendulum),
            "governor" => Ok(CaseId::Governor),
            "slidercrank" => Ok(CaseId::SliderCrank),
            other => Err(format!(
                "unknown case `{}` (expected pendulum|governor|slidercrank)",
                other
            )),
        }
    }
}

pub fn build_case(id: CaseId) -> Result<CaseStudy> {
    match id {
        CaseId::Pendulum => build_pendulum(),
        CaseId::Governor => build_governor(),
        CaseId::SliderCrank => build_slider_crank(),
    }
}

/// Replace the friction coefficients throughout a model (used by the
/// model-mismatch study: design with one μ pair, evaluate with another).
pub fn override_friction_mu(model: &mut MbModel, mu_s: f64, mu_d: f64) {
    for f in &mut model.frictions {
        f.mu_s = Binding::constant(mu_s);
        f.mu_d = Binding::constant(mu_d);
    }
}

fn c(v: f64) -> Binding {
    Binding::constant(v)
}

fn cv(v: [f64; 3]) -> [Binding; 3] {
    [c(v[0]), c(v[1]), c(v[2])]
}

fn ev(e: [&str; 3]) -> Result<[Binding; 3]> {
    Ok([Binding::expr(e[0])?, Binding::expr(e[1])?, Binding::expr(e[2])?])
}

/// Joint frame whose z-column is the global x axis.
const FRAME_Z_TO_X: [[f64; 3]; 3] = [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
/// Joint frame whose z-column is the global y axis.
const FRAME_Z_TO_Y: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]];

// ============================================================================
// Inverted spatial pendulum
// ============================================================================

/// PID-stabilized inverted pendulum on a sliding plate.
///
/// Defaults where the study is silent: plate 2 kg, 0.3×0.3×0.05 m box; rod
/// 1 kg, 1 m slender rod attached to the plate top by a spherical joint;
/// initial tilt 0.15 rad about the diagonal (1, −1, 0); plate–ground
/// friction μ = [0.4, 0.3]; horizon 2 s. Parameters ρ = [K_p, K_i, K_d]
/// with initial estimate [750, 200, 10].
pub fn build_pendulum() -> Result<CaseStudy> {
    let plate_half = 0.025;
    let plate_mass = 2.0;
    let plate_ixx = plate_mass * (0.3f64.powi(2) + 0.05f64.powi(2)) / 12.0;
    let plate_izz = plate_mass * (2.0 * 0.3f64.powi(2)) / 12.0;
    let rod_mass = 1.0;
    let rod_len = 1.0;
    let rod_it = rod_mass * rod_len * rod_len / 12.0;

    let plate = Body::new(
        "plate",
        plate_mass,
        [plate_ixx, plate_ixx, plate_izz],
        [0.0, 0.0, plate_half],
        [1.0, 0.0, 0.0, 0.0],
    );

    // rod tilted about the diagonal axis; bottom end on the plate top
    let tilt = 0.25;
    let p_rod = EulerParameters::<f64>::from_axis_angle([1.0, -1.0, 0.0], tilt);
    let a_rod = crate::spatial::rotation_matrix(&p_rod)?;
    let plate_top = [0.0, 0.0, 2.0 * plate_half];
    let half_up = crate::linalg::mat3_vec(&a_rod, &[0.0, 0.0, rod_len / 2.0]);
    let rod_center = crate::linalg::add3(&plate_top, &half_up);
    let rod = Body {
        name: "rod".into(),
        mass: c(rod_mass),
        inertia: diag_inertia([c(rod_it), c(rod_it), c(1e-3)]),
        initial_guess: BodyStateDesc {
            r: rod_center,
            p: p_rod.0,
            rdot: [0.0; 3],
            pdot: [0.0; 4],
        },
    };

    let mut contact = JointSpec::new("plate_ground", JointKind::PlanarContact, 0, BodyRef::Ground);
    contact.lock_z = Some(c(plate_half));
    let hinge = JointSpec::new("rod_plate", JointKind::Spherical, 1, BodyRef::Body(0))
        .with_points(cv([0.0, 0.0, -rod_len / 2.0]), cv([0.0, 0.0, plate_half]));

    let model = MbModel {
        name: "pendulum".into(),
        bodies: vec![plate, rod],
        joints: vec![contact, hinge],
        forces: vec![ForceElement::Gravity { g: 9.81 }],
        frictions: vec![FrictionSpec {
            joint: 0,
            mu_s: c(0.4),
            mu_d: c(0.3),
            v_t: 0.01,
            a: c(0.05),
            b: c(0.3),
            r_e: c(0.1),
            eps: 1e-6,
        }],
        controller: Controller::PendulumPid {
            plate: 0,
            rod: 1,
            kp: Binding::rho(0),
            ki: Binding::rho(1),
            kd: Binding::rho(2),
        },
        n_param: 3,
        lower: vec![0.0, 0.0, 0.0],
        upper: vec![1e4, 1e4, 1e4],
        rho0: vec![750.0, 200.0, 10.0],
        pins: vec![
            Pin { coord: 0, value: 0.0, rate: 0.0 },
            Pin { coord: 1, value: 0.0, rate: 0.0 },
            Pin { coord: 11, value: p_rod.0[1], rate: 0.0 },
            Pin { coord: 12, value: p_rod.0[2], rate: 0.0 },
            Pin { coord: 13, value: p_rod.0[3], rate: 0.0 },
        ],
        declared_dof: 5,
    };
    Ok(CaseStudy {
        model,
        objective: ObjectiveSpec::PendulumTracking {
            plate: 0,
            rod: 1,
            w_err: 1e5,
        },
        horizon: 2.0,
    })
}

// ============================================================================
// Flyball governor
// ============================================================================

/// Flyball governor: pillar spinning about z, two flyweight arms on
/// revolute pivots, two lower links tying the arms to a sliding collar, a
/// TSD restraining the collar, and a proportional pillar torque
/// `τ = K_p (h0 − z_collar)` with `K_p = 200`, `h0 = 0.1 m`.
///
/// ρ = [top arm length, bottom link length, overhang ratio, pivot offset,
/// collar radius, pillar height, flyweight mass], Table-4 initial values
/// and bounds. Defaults where unspecified: arm rod 0.01 kg, link rod
/// 0.005 kg, pillar 0.3 kg, collar 0.1 kg, spring free length 0.1 m,
/// friction μ = [0.4, 0.3] at the arm pivots, initial spin 15 rad/s, arm
/// angle 0.7 rad from vertical, horizon 3 s.
pub fn build_governor() -> Result<CaseStudy> {
    let rho0: Vec<f64> = vec![0.135, 0.08, 0.3, 0.025, 0.025, 0.225, 0.03];
    let (arm_len, link_len, overhang, offset, collar_r, pillar_h, _fly_m) = (
        rho0[0], rho0[1], rho0[2], rho0[3], rho0[4], rho0[5], rho0[6],
    );
    let theta0: f64 = 0.7;
    let omega0 = 15.0;

    // arm COM offset from the pivot along the arm: rod 0.01 kg + flyweight
    let xi_expr = "rho[0]*(0.005 + rho[6])/(0.01 + rho[6])";
    let xi = |r: &[f64]| r[0] * (0.005 + r[6]) / (0.01 + r[6]);
    let xi0 = xi(&rho0);

    // assembly in the x–z plane (left arm +x, right arm −x)
    let attach_dist = (1.0 - overhang) * arm_len;
    let dx = offset + attach_dist * theta0.sin() - collar_r;
    let dz = (link_len * link_len - dx * dx).sqrt();
    let attach_z = pillar_h - attach_dist * theta0.cos();
    let z2 = attach_z - dz;
    let phi_link = (dx / link_len).asin();

    let pillar = Body {
        name: "pillar".into(),
        mass: c(0.3),
        inertia: diag_inertia([
            Binding::expr("0.3*rho[5]^2/12")?,
            Binding::expr("0.3*rho[5]^2/12")?,
            c(1e-5),
        ]),
        initial_guess: BodyStateDesc {
            r: [0.0, 0.0, pillar_h / 2.0],
            p: [1.0, 0.0, 0.0, 0.0],
            rdot: [0.0; 3],
            pdot: [0.0; 4],
        },
    };

    // transverse arm inertia about its COM (rod + tip flyweight)
    let arm_it = format!(
        "0.01*(rho[0]^2/12 + (rho[0]/2 - {xi})^2) + rho[6]*(rho[0] - {xi})^2 + 1e-7",
        xi = xi_expr
    );
    let arm_mass = Binding::expr("0.01 + rho[6]")?;

    let mut bodies = vec![pillar];
    let mut joints = vec![JointSpec::new(
        "pillar_ground",
        JointKind::Revolute,
        0,
        BodyRef::Ground,
    )
    .with_points(ev(["0", "0", "-rho[5]/2"])?, cv([0.0, 0.0, 0.0]))];

    for (side, sign) in [("left", 1.0f64), ("right", -1.0f64)] {
        // arm: z-axis from pivot to tip; orientation about y by ±(π − θ0)
        let angle = if sign > 0.0 {
            std::f64::consts::PI - theta0
        } else {
            std::f64::consts::PI + theta0
        };
        let p_arm = EulerParameters::<f64>::from_axis_angle([0.0, 1.0, 0.0], angle);
        let dir = [sign * theta0.sin(), 0.0, -theta0.cos()];
        let pivot = [sign * offset, 0.0, pillar_h];
        let com = [
            pivot[0] + xi0 * dir[0],
            pivot[1],
            pivot[2] + xi0 * dir[2],
        ];
        let arm = Body {
            name: format!("arm_{}", side),
            mass: arm_mass.clone(),
            inertia: diag_inertia([
                Binding::expr(&arm_it)?,
                Binding::expr(&arm_it)?,
                c(1e-6),
            ]),
            initial_guess: BodyStateDesc {
                r: com,
                p: p_arm.0,
                rdot: [0.0; 3],
                pdot: [0.0; 4],
            },
        };
        let arm_idx = bodies.len();
        bodies.push(arm);
        // pivot: revolute about the global y axis (invariant under the swing)
        let s_pivot_arm = ev(["0", "0", &format!("-({})", xi_expr)])?;
        let s_pivot_pillar = ev([
            &format!("{}*rho[3]", sign),
            "0",
            "rho[5]/2",
        ])?;
        joints.push(
            JointSpec::new(
                &format!("pivot_{}", side),
                JointKind::Revolute,
                arm_idx,
                BodyRef::Body(0),
            )
            .with_points(s_pivot_arm, s_pivot_pillar)
            .with_frames(FRAME_Z_TO_Y, FRAME_Z_TO_Y),
        );

        // lower link: z-axis from the collar end up to the arm attachment
        let p_link = EulerParameters::<f64>::from_axis_angle([0.0, 1.0, 0.0], sign * phi_link);
        let attach = [
            pivot[0] + attach_dist * dir[0],
            0.0,
            pivot[2] + attach_dist * dir[2],
        ];
        let collar_pt = [sign * collar_r, 0.0, z2];
        let link_com = [
            0.5 * (attach[0] + collar_pt[0]),
            0.0,
            0.5 * (attach[2] + collar_pt[2]),
        ];
        let link = Body {
            name: format!("link_{}", side),
            mass: c(0.005),
            inertia: diag_inertia([
                Binding::expr("0.005*rho[1]^2/12 + 1e-8")?,
                Binding::expr("0.005*rho[1]^2/12 + 1e-8")?,
                c(1e-8),
            ]),
            initial_guess: BodyStateDesc {
                r: link_com,
                p: p_link.0,
                rdot: [0.0; 3],
                pdot: [0.0; 4],
            },
        };
        let link_idx = bodies.len();
        bodies.push(link);
        // spherical at the arm attachment point
        joints.push(
            JointSpec::new(
                &format!("link_arm_{}", side),
                JointKind::Spherical,
                link_idx,
                BodyRef::Body(arm_idx),
            )
            .with_points(
                ev(["0", "0", "rho[1]/2"])?,
                ev(["0", "0", &format!("(1-rho[2])*rho[0] - ({})", xi_expr)])?,
            ),
        );
        // universal at the collar edge: link-x pin against collar-y pin
        let link_frame = [[0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
        joints.push(
            JointSpec::new(
                &format!("link_collar_{}", side),
                JointKind::Universal,
                link_idx,
                BodyRef::Body(5),
            )
            .with_points(
                ev(["0", "0", "-rho[1]/2"])?,
                ev([&format!("{}*rho[4]", sign), "0", "0"])?,
            )
            .with_frames(link_frame, FRAME_Z_TO_Y),
        );
    }

    let collar = Body {
        name: "collar".into(),
        mass: c(0.1),
        inertia: diag_inertia([
            Binding::expr("0.05*rho[4]^2 + 1e-7")?,
            Binding::expr("0.05*rho[4]^2 + 1e-7")?,
            Binding::expr("0.1*rho[4]^2 + 1e-7")?,
        ]),
        initial_guess: BodyStateDesc {
            r: [0.0, 0.0, z2],
            p: [1.0, 0.0, 0.0, 0.0],
            rdot: [0.0; 3],
            pdot: [0.0; 4],
        },
    };
    assert_eq!(bodies.len(), 5);
    bodies.push(collar);
    joints.push(
        JointSpec::new("collar_pillar", JointKind::Translational, 5, BodyRef::Body(0))
            .with_points(cv([0.0, 0.0, 0.0]), ev(["0", "0", "-rho[5]/2"])?),
    );

    let frictions = vec![1usize, 4]
        .into_iter()
        .map(|j| FrictionSpec {
            joint: j,
            mu_s: c(0.4),
            mu_d: c(0.3),
            v_t: 0.01,
            a: c(0.02),
            b: c(0.01),
            r_e: c(0.005),
            eps: 1e-6,
        })
        .collect();

    let model = MbModel {
        name: "governor".into(),
        bodies,
        joints,
        forces: vec![
            ForceElement::Gravity { g: 9.81 },
            ForceElement::Tsd {
                body_i: BodyRef::Ground,
                body_j: BodyRef::Body(5),
                s_i: cv([0.0, 0.0, 0.0]),
                s_j: cv([0.0, 0.0, 0.0]),
                k_s: c(1000.0),
                c_s: c(50.0),
                free_length: c(0.1),
            },
        ],
        frictions,
        controller: Controller::CollarHeightTorque {
            pillar: 0,
            collar: 5,
            kp: c(200.0),
            h0: c(0.1),
        },
        n_param: 7,
        lower: vec![0.1, 0.06, 0.2, 0.02, 0.02, 0.2, 0.02],
        upper: vec![0.15, 0.1, 0.4, 0.03, 0.03, 0.25, 0.04],
        rho0,
        pins: vec![
            Pin {
                coord: 6, // pillar e3: spin angle
                value: 0.0,
                rate: omega0 / 2.0,
            },
            Pin {
                coord: 7 * 5 + 2, // collar height
                value: z2,
                rate: 0.0,
            },
        ],
        declared_dof: 2,
    };
    Ok(CaseStudy {
        model,
        objective: ObjectiveSpec::BodySpinTarget {
            body: 0,
            target: 15.0,
        },
        horizon: 2.5,
    })
}

// ============================================================================
// Spatial slider-crank
// ============================================================================

/// Spatial slider-crank: crank on a ground revolute about the global x axis
/// at (0, 0.1, 0.12), connecting rod to the slider via spherical +
/// universal joints, slider on a ground translational joint along x with
/// friction, crank torque `τ = K_p (ω0 − ω)`, `ω0 = −10 rad/s`.
///
/// ρ = [crank length, rod length, slider length, slider width, K_p] with
/// Table-6 initial values and bounds; the slider length/width double as the
/// friction-joint geometry. Defaults where unspecified: crank 0.12 kg, rod
/// 0.5 kg, slider 2 kg, μ = [0.4, 0.3], horizon 2 s.
pub fn build_slider_crank() -> Result<CaseStudy> {
    let rho0: Vec<f64> = vec![0.08, 0.3, 0.05, 0.025, 1.0];
    let (crank_len, rod_len) = (rho0[0], rho0[1]);
    let base = [0.0, 0.1, 0.12];
    let omega0 = -10.0;

    // crank up: tip at (0, 0.1, 0.12 + L1); slider on the x axis
    let tip = [base[0], base[1], base[2] + crank_len];
    let xs = (rod_len * rod_len - tip[1] * tip[1] - tip[2] * tip[2]).sqrt();
    let slider_pos = [xs, 0.0, 0.0];

    let crank = Body {
        name: "crank".into(),
        mass: c(0.12),
        inertia: diag_inertia([
            Binding::expr("0.12*rho[0]^2/12 + 1e-7")?,
            Binding::expr("0.12*rho[0]^2/12 + 1e-7")?,
            c(1e-6),
        ]),
        initial_guess: BodyStateDesc {
            r: [base[0], base[1], base[2] + crank_len / 2.0],
            p: [1.0, 0.0, 0.0, 0.0],
            rdot: [0.0; 3],
            pdot: [0.0; 4],
        },
    };

    // rod frame: z along the rod (tip -> slider)
    let d = [
        (slider_pos[0] - tip[0]) / rod_len,
        (slider_pos[1] - tip[1]) / rod_len,
        (slider_pos[2] - tip[2]) / rod_len,
    ];
    let zhat = [0.0, 0.0, 1.0];
    let axis = crate::linalg::cross3(&zhat, &d);
    let angle = crate::linalg::dot3(&zhat, &d).acos();
    let p_rod = EulerParameters::<f64>::from_axis_angle(axis, angle);
    let a_rod = crate::spatial::rotation_matrix(&p_rod)?;
    let rod_com = [
        0.5 * (tip[0] + slider_pos[0]),
        0.5 * (tip[1] + slider_pos[1]),
        0.5 * (tip[2] + slider_pos[2]),
    ];
    let rod = Body {
        name: "rod".into(),
        mass: c(0.5),
        inertia: diag_inertia([
            Binding::expr("0.5*rho[1]^2/12 + 1e-7")?,
            Binding::expr("0.5*rho[1]^2/12 + 1e-7")?,
            c(1e-6),
        ]),
        initial_guess: BodyStateDesc {
            r: rod_com,
            p: p_rod.0,
            rdot: [0.0; 3],
            pdot: [0.0; 4],
        },
    };

    let slider = Body {
        name: "slider".into(),
        mass: c(2.0),
        inertia: diag_inertia([
            Binding::expr("2.0*(rho[3]^2 + rho[3]^2)/12 + 1e-7")?,
            Binding::expr("2.0*(rho[2]^2 + rho[3]^2)/12 + 1e-7")?,
            Binding::expr("2.0*(rho[2]^2 + rho[3]^2)/12 + 1e-7")?,
        ]),
        initial_guess: BodyStateDesc {
            r: slider_pos,
            p: [1.0, 0.0, 0.0, 0.0],
            rdot: [0.0; 3],
            pdot: [0.0; 4],
        },
    };

    // universal pin in the rod: material direction orthogonal to the rod
    // axis that is horizontal at assembly (so the cross-pin row starts at 0)
    let u_global = {
        let yhat = [0.0, 1.0, 0.0];
        let u = crate::linalg::cross3(&d, &yhat);
        let n = crate::linalg::norm3(&u);
        [u[0] / n, u[1] / n, u[2] / n]
    };
    let u_rod = crate::linalg::mat3_t_vec(&a_rod, &u_global);
    // complete an orthonormal joint frame with z″ = u_rod
    let rod_pin_frame = frame_with_z(u_rod);

    let joints = vec![
        JointSpec::new("crank_ground", JointKind::Revolute, 0, BodyRef::Ground)
            .with_points(ev(["0", "0", "-rho[0]/2"])?, cv(base))
            .with_frames(FRAME_Z_TO_X, FRAME_Z_TO_X),
        JointSpec::new("crank_rod", JointKind::Spherical, 1, BodyRef::Body(0))
            .with_points(ev(["0", "0", "-rho[1]/2"])?, ev(["0", "0", "rho[0]/2"])?),
        JointSpec::new("rod_slider", JointKind::Universal, 1, BodyRef::Body(2))
            .with_points(ev(["0", "0", "rho[1]/2"])?, cv([0.0, 0.0, 0.0]))
            .with_frames(rod_pin_frame, FRAME_Z_TO_Y),
        JointSpec::new("slider_ground", JointKind::Translational, 2, BodyRef::Ground)
            .with_points(cv([0.0, 0.0, 0.0]), cv([0.0, 0.0, 0.0]))
            .with_frames(FRAME_Z_TO_X, FRAME_Z_TO_X),
    ];

    let model = MbModel {
        name: "slidercrank".into(),
        bodies: vec![crank, rod, slider],
        joints,
        forces: vec![ForceElement::Gravity { g: 9.81 }],
        frictions: vec![FrictionSpec {
            joint: 3,
            mu_s: c(0.4),
            mu_d: c(0.3),
            v_t: 0.01,
            a: Binding::rho(2),
            b: Binding::rho(3),
            r_e: c(0.01),
            eps: 1e-6,
        }],
        controller: Controller::CrankSpeedTorque {
            crank: 0,
            axis: [1.0, 0.0, 0.0],
            kp: Binding::rho(4),
            omega0,
        },
        n_param: 5,
        lower: vec![0.06, 0.2, 0.04, 0.020, -5.0],
        upper: vec![0.10, 0.4, 0.06, 0.030, 5.0],
        rho0,
        pins: vec![Pin {
            coord: 4, // crank e1: rotation angle about x
            value: 0.0,
            rate: omega0 / 2.0,
        }],
        declared_dof: 1,
    };
    Ok(CaseStudy {
        model,
        objective: ObjectiveSpec::CrankSpeedRegulation {
            crank: 0,
            axis: [1.0, 0.0, 0.0],
            omega0,
            control_weight: 0.01,
        },
        horizon: 2.0,
    })
}

/// Orthonormal right-handed frame (as columns) with the given z-column.
fn frame_with_z(z: [f64; 3]) -> [[f64; 3]; 3] {
    let pick = if z[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let x = {
        let u = crate::linalg::cross3(&pick, &z);
        let n = crate::linalg::norm3(&u);
        [u[0] / n, u[1] / n, u[2] / n]
    };
    let y = crate::linalg::cross3(&z, &x);
    [
        [x[0], y[0], z[0]],
        [x[1], y[1], z[1]],
        [x[2], y[2], z[2]],
    ]
}


// ============================================================================
// Optimization driver plumbing
// ============================================================================

use crate::optimizer::{optimize, Bounds, ObjectiveOracle, OptTrace, OptimizeConfig};
use crate::sensitivity::{simulate, simulate_with_sensitivities, SimOptions};

/// Objective oracle backed by full simulations: values come from plain
/// dynamics runs, gradients from the combined dynamics+sensitivity run.
pub struct SimulationOracle<'m> {
    pub model: &'m MbModel,
    pub objective: &'m ObjectiveSpec,
    pub opts: SimOptions,
}

impl<'m> ObjectiveOracle for SimulationOracle<'m> {
    fn value(&mut self, rho: &[f64]) -> Result<f64> {
        let run = simulate(self.model, rho, Some(self.objective), &self.opts)?;
        Ok(run.psi.expect("objective attached"))
    }

    fn value_grad(&mut self, rho: &[f64]) -> Result<(f64, Vec<f64>)> {
        let run = simulate_with_sensitivities(self.model, rho, Some(self.objective), &self.opts)?;
        Ok((
            run.psi.expect("objective attached"),
            run.gradient.expect("sensitivities attached"),
        ))
    }
}

/// Run the bound-constrained co-design optimization of a case study.
pub fn optimize_case(
    model: &MbModel,
    objective: &ObjectiveSpec,
    sim_opts: &SimOptions,
    cfg: &OptimizeConfig,
) -> Result<(Vec<f64>, OptTrace)> {
    let mut oracle = SimulationOracle {
        model,
        objective,
        opts: SimOptions {
            store_steps: false,
            sample_times: None,
            ..sim_opts.clone()
        },
    };
    let bounds = Bounds::new(model.lower.clone(), model.upper.clone());
    optimize(&mut oracle, &model.rho0, &bounds, cfg)
}
