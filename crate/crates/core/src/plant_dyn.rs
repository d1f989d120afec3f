//! Moving-vine dynamics: a prismatic-revolute-revolute virtual joint chain
//! (y translation, y rotation, z rotation) with first-order force dynamics
//! `F = m v' + b v` per joint, scripted sinusoidal motion modes and a
//! penalty contact model between the tool and the vine skeleton.
//!
//! Forces are applied per virtual joint as generalized forces; a Cartesian
//! contact force reaches the joints through the transpose of the chain
//! Jacobian at the contact point.

use std::f64::consts::TAU;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{closest_points_segments, rot_y, rot_z, Mat3, Vec3};
use crate::vine_gen::{SegmentId, VineSkeleton};

#[derive(Debug, Error, PartialEq)]
pub enum PlantError {
    #[error("invalid plant parameters: {0}")]
    InvalidParams(String),
    #[error("time step must be in (0, 0.01] s, got {0}")]
    InvalidStep(f64),
    #[error("applied force is not finite")]
    NonFiniteForce,
    #[error("invalid motion mode: {0}")]
    InvalidMode(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantParams {
    /// Effective mass, applied to every virtual joint.
    pub mass: f64,
    /// Viscous friction per joint, in joint units.
    pub damping: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self { mass: 0.8, damping: 0.5 }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<(), PlantError> {
        if !(self.mass.is_finite() && self.mass > 0.0) {
            return Err(PlantError::InvalidParams(format!("mass must be positive, got {}", self.mass)));
        }
        if !(self.damping.is_finite() && self.damping >= 0.0) {
            return Err(PlantError::InvalidParams(format!("damping must be non-negative, got {}", self.damping)));
        }
        Ok(())
    }
}

/// Virtual joint positions `(y, theta_y, theta_z)` and their rates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub q: Vec3,
    pub v: Vec3,
    pub t: f64,
}

impl PlantState {
    pub fn kinetic_energy(&self, params: &PlantParams) -> f64 {
        0.5 * params.mass * self.v.norm_squared()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Integrator {
    /// `v' = v + dt (F - b v) / m`, then `q' = q + dt v'`.
    SemiImplicitEuler,
    /// Exact velocity update for force held constant over the step, then
    /// `q' = q + dt v'`. Matches the continuous first-order response to
    /// round-off, which the explicit velocity update does not at dt = 0.01 s.
    #[default]
    ExponentialEuler,
}

/// Advances the plant by one step under a per-joint generalized force.
pub fn step_dynamics(
    state: &PlantState,
    params: &PlantParams,
    applied_force: &Vec3,
    dt: f64,
) -> Result<PlantState, PlantError> {
    step_dynamics_with(state, params, applied_force, dt, Integrator::default())
}

pub fn step_dynamics_with(
    state: &PlantState,
    params: &PlantParams,
    applied_force: &Vec3,
    dt: f64,
    integrator: Integrator,
) -> Result<PlantState, PlantError> {
    if !(dt > 0.0 && dt <= 0.01 + 1e-12) {
        return Err(PlantError::InvalidStep(dt));
    }
    if !applied_force.iter().all(|f| f.is_finite()) {
        return Err(PlantError::NonFiniteForce);
    }
    params.validate()?;
    let (m, b) = (params.mass, params.damping);
    let v = match integrator {
        Integrator::SemiImplicitEuler => state.v + (applied_force - state.v * b) * (dt / m),
        Integrator::ExponentialEuler => {
            let rate = b / m;
            if rate * dt < 1e-12 {
                state.v + applied_force * (dt / m)
            } else {
                let decay = (-rate * dt).exp();
                state.v * decay + applied_force / b * (1.0 - decay)
            }
        }
    };
    Ok(PlantState { q: state.q + v * dt, v, t: state.t + dt })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MotionKind {
    Stationary,
    YTrans,
    YRot,
    ZRot,
    Mixed,
}

impl MotionKind {
    pub const ALL: [MotionKind; 5] =
        [MotionKind::Stationary, MotionKind::YTrans, MotionKind::YRot, MotionKind::ZRot, MotionKind::Mixed];

    pub fn active_joints(self) -> [bool; 3] {
        match self {
            MotionKind::Stationary => [false, false, false],
            MotionKind::YTrans => [true, false, false],
            MotionKind::YRot => [false, true, false],
            MotionKind::ZRot => [false, false, true],
            MotionKind::Mixed => [true, true, true],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MotionKind::Stationary => "Stationary",
            MotionKind::YTrans => "Y-trans",
            MotionKind::YRot => "Y-rot",
            MotionKind::ZRot => "Z-rot",
            MotionKind::Mixed => "Mixed",
        }
    }
}

impl fmt::Display for MotionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for MotionKind {
    type Err = PlantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase();
        match key.as_str() {
            "stationary" => Ok(MotionKind::Stationary),
            "ytrans" => Ok(MotionKind::YTrans),
            "yrot" => Ok(MotionKind::YRot),
            "zrot" => Ok(MotionKind::ZRot),
            "mixed" => Ok(MotionKind::Mixed),
            _ => Err(PlantError::InvalidMode(format!("unknown motion mode '{s}'"))),
        }
    }
}

/// Sinusoidal motion `q_i(t) = A_i sin(2 pi f_i t)` on the active joints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionMode {
    pub kind: MotionKind,
    /// Amplitudes (m, rad, rad).
    pub amplitude: Vec3,
    /// Frequencies (Hz).
    pub frequency: Vec3,
}

pub const DEFAULT_TRANSLATION_AMPLITUDE: f64 = 0.05;
pub const DEFAULT_ROTATION_AMPLITUDE: f64 = 0.15;
pub const DEFAULT_FREQUENCY: f64 = 0.5;

impl Default for MotionMode {
    fn default() -> Self {
        Self::new(MotionKind::Stationary)
    }
}

impl MotionMode {
    /// Default amplitudes on the joints the kind activates, zero elsewhere.
    pub fn new(kind: MotionKind) -> Self {
        let full = Vec3::new(DEFAULT_TRANSLATION_AMPLITUDE, DEFAULT_ROTATION_AMPLITUDE, DEFAULT_ROTATION_AMPLITUDE);
        let active = kind.active_joints();
        let amplitude = Vec3::from_fn(|i, _| if active[i] { full[i] } else { 0.0 });
        Self { kind, amplitude, frequency: Vec3::repeat(DEFAULT_FREQUENCY) }
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        let active = self.kind.active_joints();
        for i in 0..3 {
            let (a, f) = (self.amplitude[i], self.frequency[i]);
            if !a.is_finite() || !f.is_finite() || a < 0.0 || f < 0.0 {
                return Err(PlantError::InvalidMode(format!("joint {i}: amplitude and frequency must be finite and non-negative")));
            }
            if !active[i] && a != 0.0 {
                return Err(PlantError::InvalidMode(format!("{} mode must not move joint {i}", self.kind)));
            }
            if active[i] && self.kind == MotionKind::Mixed && (a == 0.0 || f == 0.0) {
                return Err(PlantError::InvalidMode("mixed mode needs all three joints active".into()));
            }
        }
        Ok(())
    }

    pub fn max_excursion(&self) -> Vec3 {
        self.amplitude
    }
}

/// Joint positions and analytic rates of a scripted motion at time `t`.
pub fn scripted_motion(mode: &MotionMode, t: f64) -> (Vec3, Vec3) {
    let active = mode.kind.active_joints();
    let mut q = Vec3::zeros();
    let mut v = Vec3::zeros();
    for i in 0..3 {
        if active[i] {
            let w = TAU * mode.frequency[i];
            q[i] = mode.amplitude[i] * (w * t).sin();
            v[i] = mode.amplitude[i] * w * (w * t).cos();
        }
    }
    (q, v)
}

/// Rigid placement of the moving vine parts by the PRR chain anchored at `pivot`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrrChain {
    pub pivot: Vec3,
}

impl PrrChain {
    pub fn rotation(&self, q: &Vec3) -> Mat3 {
        rot_y(q[1]) * rot_z(q[2])
    }

    /// World position of a rest-frame point.
    pub fn transform(&self, q: &Vec3, rest: &Vec3) -> Vec3 {
        self.pivot + Vec3::y() * q[0] + self.rotation(q) * (rest - self.pivot)
    }

    /// 3x3 Jacobian of the world position of a rest-frame point wrt the joints.
    pub fn point_jacobian(&self, q: &Vec3, rest: &Vec3) -> Mat3 {
        let arm = self.rotation(q) * (rest - self.pivot);
        let z_axis = rot_y(q[1]) * Vec3::z();
        let c1 = Vec3::y();
        let c2 = Vec3::y().cross(&arm);
        let c3 = z_axis.cross(&arm);
        Mat3::from_columns(&[c1, c2, c3])
    }

    pub fn point_velocity(&self, q: &Vec3, v: &Vec3, rest: &Vec3) -> Vec3 {
        self.point_jacobian(q, rest) * v
    }

    /// Rest-frame point of a world point (inverse of [`transform`](Self::transform)).
    pub fn inverse_transform(&self, q: &Vec3, world: &Vec3) -> Vec3 {
        self.pivot + self.rotation(q).transpose() * (world - self.pivot - Vec3::y() * q[0])
    }
}

/// A capsule (segment with radius) belonging to the tool.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToolCapsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
}

/// Result of a contact query.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContactResult {
    /// Total force the vine exerts on the tool (N).
    pub force_on_tool: Vec3,
    /// Generalized force the tool exerts on the virtual joints.
    pub joint_force: Vec3,
    /// Deepest penetration (m), 0 without contact.
    pub max_penetration: f64,
    pub in_contact: bool,
}

/// Penalty contact between tool capsules and the nearest vine segment.
///
/// The normal force is `k * depth + c * approach_speed` while penetrating,
/// never pulling. The damping part produces the impact spike at contact onset
/// and soaks up the rebound. Sliding adds Coulomb friction, smoothed below
/// `FRICTION_SMOOTHING` m/s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContactModel {
    pub stiffness: f64,
    pub impact_damping: f64,
    pub friction: f64,
}

pub const FRICTION_SMOOTHING: f64 = 0.05;

impl Default for ContactModel {
    fn default() -> Self {
        Self { stiffness: 1500.0, impact_damping: 15.0, friction: 0.5 }
    }
}

/// Vine geometry handed to the contact model.
#[derive(Clone, Debug)]
pub struct VineBody<'a> {
    pub skeleton: &'a VineSkeleton,
    pub chain: PrrChain,
}

impl VineBody<'_> {
    /// World endpoints of a segment at joint configuration `q`.
    pub fn segment_world(&self, id: SegmentId, q: &Vec3) -> Option<(Vec3, Vec3)> {
        let seg = self.skeleton.segment(id)?;
        Some(self.place(id, &seg.start, &seg.end, q))
    }

    fn place(&self, id: SegmentId, a: &Vec3, b: &Vec3, q: &Vec3) -> (Vec3, Vec3) {
        if self.skeleton.jiggle.contains(&id) {
            (self.chain.transform(q, a), self.chain.transform(q, b))
        } else {
            (*a, *b)
        }
    }

    fn moves(&self, id: SegmentId) -> bool {
        self.skeleton.jiggle.contains(&id)
    }
}

impl ContactModel {
    /// Point-tool contact: force on a tool point at `tool_position` from the
    /// nearest vine segment, given the contact radius added to the segment radius.
    pub fn contact_force(
        &self,
        body: &VineBody<'_>,
        plant: &PlantState,
        tool_position: &Vec3,
        tool_velocity: &Vec3,
        tool_radius: f64,
    ) -> ContactResult {
        let capsule = ToolCapsule { a: *tool_position, b: *tool_position, radius: tool_radius };
        self.tool_contact(body, plant, &[capsule], tool_velocity)
    }

    pub fn tool_contact(
        &self,
        body: &VineBody<'_>,
        plant: &PlantState,
        tool: &[ToolCapsule],
        tool_velocity: &Vec3,
    ) -> ContactResult {
        let mut out = ContactResult::default();
        for cap in tool {
            // nearest segment to this capsule
            let mut best: Option<(f64, SegmentId, f64, Vec3, Vec3, f64)> = None;
            for seg in &body.skeleton.segments {
                let (a, b) = body.place(seg.id, &seg.start, &seg.end, &plant.q);
                let (_, t, c_tool, c_vine) = closest_points_segments(&cap.a, &cap.b, &a, &b);
                let d = (c_tool - c_vine).norm();
                if best.as_ref().is_none_or(|bst| d - seg.radius < bst.0 - bst.5) {
                    best = Some((d, seg.id, t, c_tool, c_vine, seg.radius));
                }
            }
            let Some((d, id, t, c_tool, c_vine, seg_radius)) = best else { continue };
            let reach = cap.radius + seg_radius;
            if d >= reach {
                continue;
            }
            let normal = if d > 1e-12 {
                (c_tool - c_vine) / d
            } else {
                // coincident axes: push along the tool's approach (capsule) direction
                let axis = cap.b - cap.a;
                if axis.norm() > 1e-12 { -axis.normalize() } else { Vec3::x() }
            };
            let depth = reach - d;
            let seg = body.skeleton.segment(id).expect("segment id comes from the skeleton");
            let rest_point = seg.start + (seg.end - seg.start) * t;
            let vine_velocity = if body.moves(id) {
                body.chain.point_velocity(&plant.q, &plant.v, &rest_point)
            } else {
                Vec3::zeros()
            };
            let relative = vine_velocity - tool_velocity;
            let approach_speed = relative.dot(&normal);
            let magnitude = (self.stiffness * depth + self.impact_damping * approach_speed).max(0.0);
            let sliding = relative - normal * approach_speed;
            let drag = sliding * (self.friction * magnitude / sliding.norm().max(FRICTION_SMOOTHING));
            let force = normal * magnitude + drag;
            out.force_on_tool += force;
            if body.moves(id) {
                out.joint_force -= body.chain.point_jacobian(&plant.q, &rest_point).transpose() * force;
            }
            out.max_penetration = out.max_penetration.max(depth);
            out.in_contact = true;
        }
        out
    }
}

/// Spring-free penalty force from a known penetration, along `normal`.
pub fn penalty_force(penetration: f64, stiffness: f64, normal: &Vec3) -> Vec3 {
    if penetration <= 0.0 {
        Vec3::zeros()
    } else {
        normal.normalize() * stiffness * penetration
    }
}

/// One row of the plant time-series log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantLogRow {
    pub t: f64,
    pub q: Vec3,
    pub v: Vec3,
    pub force: Vec3,
}

pub const PLANT_LOG_HEADER: &str = "t,q_y,q_roty,q_rotz,v_y,v_roty,v_rotz,f_x,f_y,f_z";

pub fn write_plant_log<W: Write>(rows: &[PlantLogRow], mut out: W) -> io::Result<()> {
    writeln!(out, "{PLANT_LOG_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{:.4},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            r.t, r.q[0], r.q[1], r.q[2], r.v[0], r.v[1], r.v[2], r.force[0], r.force[1], r.force[2]
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vine_gen::{Segment, SegmentKind};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const DT: f64 = 0.01;

    #[test]
    fn equilibrium_only_advances_time() {
        let s = PlantState { q: Vec3::new(0.1, 0.2, 0.3), ..Default::default() };
        let next = step_dynamics(&s, &PlantParams::default(), &Vec3::zeros(), DT).unwrap();
        assert_eq!(next.q, s.q);
        assert_eq!(next.v, s.v);
        assert_relative_eq!(next.t, DT);
    }

    #[test]
    fn frictionless_newton_step() {
        let params = PlantParams { mass: 1.0, damping: 0.0 };
        for integrator in [Integrator::SemiImplicitEuler, Integrator::ExponentialEuler] {
            let next = step_dynamics_with(&PlantState::default(), &params, &Vec3::new(1.0, 0.0, 0.0), DT, integrator)
                .unwrap();
            assert_relative_eq!(next.v[0], 0.01, epsilon = 1e-15);
        }
    }

    #[test]
    fn semi_implicit_step_matches_formula() {
        let params = PlantParams { mass: 0.8, damping: 0.5 };
        let s = PlantState { q: Vec3::new(0.0, 0.1, 0.0), v: Vec3::new(0.3, -0.2, 0.1), t: 0.0 };
        let f = Vec3::new(1.0, 2.0, -3.0);
        let next = step_dynamics_with(&s, &params, &f, DT, Integrator::SemiImplicitEuler).unwrap();
        let v = s.v + (f - s.v * 0.5) * (DT / 0.8);
        assert_relative_eq!(next.v, v, epsilon = 1e-15);
        assert_relative_eq!(next.q, s.q + v * DT, epsilon = 1e-15);
    }

    #[test]
    fn constant_force_reaches_analytic_steady_state() {
        let params = PlantParams { mass: 1.0, damping: 2.0 };
        let f = Vec3::new(4.0, 4.0, 4.0);
        let mut s = PlantState::default();
        for _ in 0..500 {
            s = step_dynamics(&s, &params, &f, DT).unwrap();
        }
        assert!((s.v[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = PlantParams::default();
        let s = PlantState::default();
        assert_eq!(step_dynamics(&s, &p, &Vec3::new(f64::NAN, 0.0, 0.0), DT), Err(PlantError::NonFiniteForce));
        assert!(matches!(step_dynamics(&s, &p, &Vec3::zeros(), 0.0), Err(PlantError::InvalidStep(_))));
        assert!(matches!(step_dynamics(&s, &p, &Vec3::zeros(), 0.02), Err(PlantError::InvalidStep(_))));
        let bad = PlantParams { mass: 0.0, damping: 0.5 };
        assert!(matches!(step_dynamics(&s, &bad, &Vec3::zeros(), DT), Err(PlantError::InvalidParams(_))));
    }

    #[test]
    fn halving_dt_halves_the_error() {
        let params = PlantParams::default();
        let f = Vec3::new(1.0, -0.5, 0.25);
        let run = |dt: f64| {
            let mut s = PlantState::default();
            let n = (1.0 / dt).round() as usize;
            for _ in 0..n {
                s = step_dynamics(&s, &params, &f, dt).unwrap();
            }
            s.q
        };
        let (a, b, c) = (run(0.01), run(0.005), run(0.0025));
        let ratio = (a - b).norm() / (b - c).norm();
        assert!((1.5..=2.5).contains(&ratio), "ratio {ratio}");
    }

    proptest! {
        #[test]
        fn unforced_energy_never_increases(
            v in prop::array::uniform3(-5.0f64..5.0),
            damping in 0.0f64..20.0,
            mass in 0.1f64..5.0,
            semi in any::<bool>(),
        ) {
            let params = PlantParams { mass, damping };
            let integrator = if semi { Integrator::SemiImplicitEuler } else { Integrator::ExponentialEuler };
            // the explicit velocity update is only dissipative for b dt / m <= 2
            prop_assume!(!semi || damping * DT / mass <= 2.0);
            let mut s = PlantState { v: Vec3::from(v), ..Default::default() };
            let mut energy = s.kinetic_energy(&params);
            for _ in 0..200 {
                s = step_dynamics_with(&s, &params, &Vec3::zeros(), DT, integrator).unwrap();
                let e = s.kinetic_energy(&params);
                prop_assert!(e <= energy + 1e-15);
                energy = e;
            }
        }

        #[test]
        fn scripted_motion_is_time_deterministic(t in 0.0f64..100.0, k in 0usize..5) {
            let mode = MotionMode::new(MotionKind::ALL[k]);
            prop_assert_eq!(scripted_motion(&mode, t), scripted_motion(&mode, t));
            let (q, _) = scripted_motion(&mode, t);
            for i in 0..3 {
                prop_assert!(q[i].abs() <= mode.amplitude[i] + 1e-15);
            }
        }
    }

    #[test]
    fn stationary_motion_is_zero() {
        let mode = MotionMode::new(MotionKind::Stationary);
        for t in [0.0, 0.37, 12.5] {
            assert_eq!(scripted_motion(&mode, t), (Vec3::zeros(), Vec3::zeros()));
        }
    }

    #[test]
    fn y_translation_at_half_period() {
        let mode = MotionMode::new(MotionKind::YTrans);
        // phase 2 pi f t = pi
        let (q, v) = scripted_motion(&mode, 1.0);
        assert!(q[0].abs() < 1e-15);
        assert_relative_eq!(v[0], -0.05 * TAU * 0.5, epsilon = 1e-12);
        assert_relative_eq!(v[0], -0.15708, epsilon = 1e-5);
        assert_eq!((q[1], q[2], v[1], v[2]), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn mixed_moves_every_joint() {
        let mode = MotionMode::new(MotionKind::Mixed);
        mode.validate().unwrap();
        let (q, _) = scripted_motion(&mode, 0.3);
        assert!(q.iter().all(|x| x.abs() > 1e-6));
    }

    #[test]
    fn mode_validation() {
        let mut m = MotionMode::new(MotionKind::Stationary);
        m.amplitude[0] = 0.1;
        assert!(m.validate().is_err());
        let mut m = MotionMode::new(MotionKind::Mixed);
        m.amplitude[2] = 0.0;
        assert!(m.validate().is_err());
        assert_eq!("y-trans".parse::<MotionKind>().unwrap(), MotionKind::YTrans);
        assert_eq!("Z_rot".parse::<MotionKind>().unwrap(), MotionKind::ZRot);
    }

    #[test]
    fn chain_jacobian_matches_finite_differences() {
        let chain = PrrChain { pivot: Vec3::new(0.0, 0.0, 0.4) };
        let q = Vec3::new(0.02, 0.1, -0.2);
        let p = Vec3::new(0.05, 0.1, 0.6);
        let j = chain.point_jacobian(&q, &p);
        let eps = 1e-7;
        for i in 0..3 {
            let mut dq = q;
            dq[i] += eps;
            let fd = (chain.transform(&dq, &p) - chain.transform(&q, &p)) / eps;
            assert_relative_eq!(fd, j.column(i).into_owned(), epsilon = 1e-6);
        }
        let back = chain.inverse_transform(&q, &chain.transform(&q, &p));
        assert_relative_eq!(back, p, epsilon = 1e-12);
    }

    fn single_cane() -> VineSkeleton {
        VineSkeleton {
            segments: vec![Segment {
                id: 1,
                parent: None,
                start: Vec3::new(0.0, 0.0, 0.0),
                end: Vec3::new(0.0, 0.0, 1.0),
                radius: 0.01,
                kind: SegmentKind::Cane,
            }],
            jiggle: [1].into_iter().collect(),
            ..VineSkeleton::default()
        }
    }

    #[test]
    fn far_tool_feels_nothing() {
        let vine = single_cane();
        let body = VineBody { skeleton: &vine, chain: PrrChain { pivot: Vec3::zeros() } };
        let r = ContactModel::default().contact_force(
            &body,
            &PlantState::default(),
            &Vec3::new(-0.5, 0.0, 0.5),
            &Vec3::zeros(),
            0.005,
        );
        assert_eq!(r.force_on_tool, Vec3::zeros());
        assert!(!r.in_contact);
    }

    #[test]
    fn one_millimetre_penetration_gives_one_newton() {
        let vine = single_cane();
        let body = VineBody { skeleton: &vine, chain: PrrChain { pivot: Vec3::zeros() } };
        let model = ContactModel { stiffness: 1000.0, impact_damping: 0.0, friction: 0.5 };
        // contact radius 0.01 + 0.005, tool axis distance 0.014 -> 1 mm deep
        let r = model.contact_force(&body, &PlantState::default(), &Vec3::new(-0.014, 0.0, 0.5), &Vec3::zeros(), 0.005);
        assert_relative_eq!(r.force_on_tool, Vec3::new(-1.0, 0.0, 0.0), epsilon = 1e-9);
        assert_relative_eq!(penalty_force(0.001, 1000.0, &Vec3::new(-2.0, 0.0, 0.0)), Vec3::new(-1.0, 0.0, 0.0));
        // reaction pushes the vine along +x at height 0.5: 0.5 N m about y
        assert_relative_eq!(r.joint_force[1], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn sliding_tool_feels_friction() {
        let vine = single_cane();
        let body = VineBody { skeleton: &vine, chain: PrrChain { pivot: Vec3::zeros() } };
        let model = ContactModel { stiffness: 1000.0, impact_damping: 0.0, friction: 0.5 };
        let at = Vec3::new(-0.014, 0.0, 0.5);
        // fast slide along y: full Coulomb drag opposing the tool motion
        let r = model.contact_force(&body, &PlantState::default(), &at, &Vec3::new(0.0, 0.1, 0.0), 0.005);
        assert_relative_eq!(r.force_on_tool, Vec3::new(-1.0, -0.5, 0.0), epsilon = 1e-9);
        // below the smoothing speed the drag scales with speed
        let slow = FRICTION_SMOOTHING / 2.0;
        let r = model.contact_force(&body, &PlantState::default(), &at, &Vec3::new(0.0, slow, 0.0), 0.005);
        assert_relative_eq!(r.force_on_tool.y, -0.25, epsilon = 1e-9);
    }

    #[test]
    fn log_has_header_and_rows() {
        let rows = vec![PlantLogRow { t: 0.01, q: Vec3::zeros(), v: Vec3::zeros(), force: Vec3::x() }; 3];
        let mut buf = Vec::new();
        write_plant_log(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], PLANT_LOG_HEADER);
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1].split(',').count(), 10);
    }
}
