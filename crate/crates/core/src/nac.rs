//! Natural admittance control.
//!
//! The end-effector spring-damper force `F_e = K (P_g - P) - B X'` is added to
//! the filtered force sensed at the tool, mapped to joint torques through the
//! Jacobian transpose and turned into joint accelerations
//! `q'' = H^-1 tau - B_H q'`. Euler integration of the accelerations gives the
//! joint velocity command; the integrator freezes on torque saturation.
//!
//! Sign convention: `F_sensor` is the force the vine exerts on the tool.
//!
//! The frequency-domain helpers evaluate the desired admittance
//! `C(s) = 1 / (m s + B + K / s)`, the friction feedback gain
//! `g_f(s) = ((b - g_v - B) s - K) / (m s^2 + B s + K)` and the closed-loop
//! driving-point admittance used for the passivity test. All scalar laws act
//! independently on each Cartesian channel.

use std::io::{self, Write};

use nalgebra::{Cholesky, SMatrix, SVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::plant_dyn::PlantParams;

pub type Vector7 = SVector<f64, 7>;
pub type Matrix7 = SMatrix<f64, 7, 7>;
pub type Matrix6x7 = SMatrix<f64, 6, 7>;

/// Control loop period (s), 100 Hz.
pub const CONTROL_PERIOD: f64 = 0.01;

/// Real-part floor for the passivity verdict.
pub const PASSIVITY_TOLERANCE: f64 = -1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum NacError {
    #[error("inertia matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("invalid admittance parameters: {0}")]
    InvalidParams(String),
    #[error("frequency must be positive, got {0}")]
    ZeroFrequency(f64),
    #[error("transfer function denominator vanishes at s = {0}")]
    SingularDenominator(Complex64),
    #[error("frequency grid must be nonempty")]
    EmptyGrid,
    #[error("malformed gain file: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdmittanceParams {
    /// Diagonal of K (N/m), tool frame.
    pub stiffness: Vec3,
    /// Diagonal of B (N s/m).
    pub damping: Vec3,
    /// Joint-space inertia H (kg m^2).
    pub inertia: Matrix7,
    /// Desired joint damping B_H.
    pub joint_damping: Matrix7,
    /// Velocity loop gain g_v.
    pub velocity_gain: f64,
    /// Force filter cutoff (Hz).
    pub filter_cutoff_hz: f64,
    /// Per-joint torque saturation (N m).
    pub torque_limit: Vector7,
    /// Anti-windup bound on the integrated joint velocity (rad/s).
    pub integrator_bound: Vector7,
    /// Orientation hold stiffness (N m / rad) and damping (N m s / rad).
    pub rot_stiffness: f64,
    pub rot_damping: f64,
}

impl Default for AdmittanceParams {
    fn default() -> Self {
        Self {
            stiffness: Vec3::repeat(1000.0),
            damping: Vec3::repeat(50.0),
            inertia: Matrix7::identity(),
            joint_damping: Matrix7::identity() * 2.0,
            velocity_gain: 10.0,
            filter_cutoff_hz: 5.0,
            torque_limit: Vector7::repeat(20.0),
            integrator_bound: Vector7::repeat(1.0),
            rot_stiffness: 20.0,
            rot_damping: 2.0,
        }
    }
}

impl AdmittanceParams {
    pub fn validate(&self) -> Result<(), NacError> {
        let bad = |msg: &str| Err(NacError::InvalidParams(msg.to_string()));
        if self.stiffness.iter().chain(self.damping.iter()).any(|v| !v.is_finite() || *v < 0.0) {
            return bad("K and B diagonals must be finite and non-negative");
        }
        check_spd(&self.inertia)?;
        if !(self.velocity_gain.is_finite() && self.velocity_gain >= 0.0) {
            return bad("velocity gain must be non-negative");
        }
        if !(self.filter_cutoff_hz > 0.0 && self.filter_cutoff_hz <= 50.0) {
            return bad("filter cutoff must lie in (0, 50] Hz");
        }
        if self.torque_limit.iter().any(|v| !(*v > 0.0)) || self.integrator_bound.iter().any(|v| !(*v > 0.0)) {
            return bad("torque limits and integrator bounds must be positive");
        }
        if self.rot_stiffness < 0.0 || self.rot_damping < 0.0 {
            return bad("orientation gains must be non-negative");
        }
        Ok(())
    }

    /// Smoothing factor of the discrete first-order force filter.
    pub fn filter_alpha(&self) -> f64 {
        1.0 - (-std::f64::consts::TAU * self.filter_cutoff_hz * CONTROL_PERIOD).exp()
    }
}

fn check_spd(h: &Matrix7) -> Result<Cholesky<f64, nalgebra::Const<7>>, NacError> {
    let asym = (h - h.transpose()).abs().max();
    if !asym.is_finite() || asym > 1e-9 * h.abs().max().max(1.0) {
        return Err(NacError::NotPositiveDefinite);
    }
    Cholesky::new(*h).ok_or(NacError::NotPositiveDefinite)
}

/// `K (P_g - P_base) - B X'` with diagonal K and B.
pub fn end_effector_force(stiffness: &Vec3, damping: &Vec3, goal: &Vec3, base: &Vec3, velocity: &Vec3) -> Vec3 {
    stiffness.component_mul(&(goal - base)) - damping.component_mul(velocity)
}

/// `H^-1 tau - B_H q'`.
pub fn desired_joint_accel(
    inertia: &Matrix7,
    tau: &Vector7,
    joint_damping: &Matrix7,
    q_dot: &Vector7,
) -> Result<Vector7, NacError> {
    let chol = check_spd(inertia)?;
    Ok(chol.solve(tau) - joint_damping * q_dot)
}

/// Desired admittance `1 / (m j w + B + K / (j w))`.
pub fn admittance_response(mass: f64, damping: f64, stiffness: f64, omega: f64) -> Result<Complex64, NacError> {
    if !(omega > 0.0) {
        return Err(NacError::ZeroFrequency(omega));
    }
    let s = Complex64::new(0.0, omega);
    Ok((s * mass + damping + stiffness / s).inv())
}

/// Friction feedback gain `((b - g_v - B) s - K) / (m s^2 + B s + K)`.
pub fn friction_feedback_gain(
    mass: f64,
    friction: f64,
    velocity_gain: f64,
    damping: f64,
    stiffness: f64,
    s: Complex64,
) -> Result<Complex64, NacError> {
    let denom = s * s * mass + s * damping + stiffness;
    let scale = (s * s * mass).norm() + (s * damping).norm() + stiffness.abs();
    if denom.norm() <= 1e-12 * scale || denom.norm() == 0.0 {
        return Err(NacError::SingularDenominator(s));
    }
    Ok((s * (friction - velocity_gain - damping) - stiffness) / denom)
}

/// Velocity-per-force response of the plant under natural admittance control.
///
/// The reference velocity is `C(s) F`; the controller renders the desired
/// impedance on the measured velocity and closes a velocity loop of gain
/// `g_v` on the reference, against a plant of natural mass `m` and friction
/// `b`. Solving `m s v = F - b v - (B + K/s) v + g_v (C F - v)` gives
/// `Y = C (1 + g_v C) / (1 + (b + g_v) C)`, which equals `C` when `b = 0`
/// and tends to `C` as `g_v` grows.
pub fn closed_loop_admittance(
    plant: &PlantParams,
    velocity_gain: f64,
    damping: f64,
    stiffness: f64,
    omega: f64,
) -> Result<Complex64, NacError> {
    let c = admittance_response(plant.mass, damping, stiffness, omega)?;
    let denom = c * (plant.damping + velocity_gain) + 1.0;
    if denom.norm() <= 1e-300 {
        return Err(NacError::SingularDenominator(Complex64::new(0.0, omega)));
    }
    Ok(c * (c * velocity_gain + 1.0) / denom)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassivityReport {
    pub min_real_part: f64,
    /// Frequency (rad/s) and channel of the minimum.
    pub worst_omega: f64,
    pub worst_channel: usize,
    pub passing: bool,
}

/// Log-spaced frequency grid of `n` points spanning `[lo, hi]` rad/s.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n).map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)).collect()
}

/// The standard passivity grid: 200 log-spaced points in [1e-2, 1e3] rad/s.
pub fn default_passivity_grid() -> Vec<f64> {
    log_grid(1e-2, 1e3, 200)
}

/// Positive-realness test of the closed-loop admittance on every Cartesian
/// channel over `omega_grid`.
pub fn passivity_check(
    params: &AdmittanceParams,
    plant: &PlantParams,
    omega_grid: &[f64],
) -> Result<PassivityReport, NacError> {
    if omega_grid.is_empty() {
        return Err(NacError::EmptyGrid);
    }
    let mut report = PassivityReport {
        min_real_part: f64::INFINITY,
        worst_omega: omega_grid[0],
        worst_channel: 0,
        passing: true,
    };
    for &omega in omega_grid {
        if !(omega > 0.0) {
            return Err(NacError::ZeroFrequency(omega));
        }
        for ch in 0..3 {
            let y = closed_loop_admittance(plant, params.velocity_gain, params.damping[ch], params.stiffness[ch], omega)?;
            if y.re < report.min_real_part {
                report.min_real_part = y.re;
                report.worst_omega = omega;
                report.worst_channel = ch;
            }
        }
    }
    report.passing = report.min_real_part >= PASSIVITY_TOLERANCE;
    Ok(report)
}

/// Writes `omega,re,im` rows of the closed-loop admittance of one channel.
pub fn write_frequency_response<W: Write>(
    params: &AdmittanceParams,
    plant: &PlantParams,
    channel: usize,
    omega_grid: &[f64],
    mut out: W,
) -> io::Result<()> {
    writeln!(out, "omega,re,im")?;
    for &omega in omega_grid {
        let y = closed_loop_admittance(plant, params.velocity_gain, params.damping[channel], params.stiffness[channel], omega)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
        writeln!(out, "{omega:.9e},{:.9e},{:.9e}", y.re, y.im)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForceSample {
    pub force: Vec3,
    pub t: f64,
}

/// Internal state of the control loop.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ControlState {
    pub filtered_force: Vec3,
    /// Integrated joint velocity command.
    pub integrator: Vector7,
    pub last_command: Vector7,
}

/// Robot quantities the controller reads every cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct KinematicFeedback {
    /// Geometric Jacobian of the tool point (linear rows first).
    pub jacobian: Matrix6x7,
    pub tool_position: Vec3,
    pub tool_velocity: Vec3,
    pub angular_velocity: Vec3,
    /// Rotation vector taking the current tool orientation to the desired one.
    pub orientation_error: Vec3,
    pub q_dot: Vector7,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlOutput {
    pub command: Vector7,
    /// Net Cartesian force fed to the joint mapping.
    pub net_force: Vec3,
    pub saturated: [bool; 7],
    /// Set when the sensor sample was unusable; the command is then zero.
    pub fault: bool,
}

/// One 100 Hz controller cycle.
pub fn control_step(
    state: &ControlState,
    params: &AdmittanceParams,
    sample: &ForceSample,
    goal: &Vec3,
    feedback: &KinematicFeedback,
) -> Result<(ControlOutput, ControlState), NacError> {
    if !sample.force.iter().all(|f| f.is_finite()) {
        let next = ControlState { integrator: Vector7::zeros(), last_command: Vector7::zeros(), ..state.clone() };
        let out = ControlOutput { command: Vector7::zeros(), net_force: Vec3::zeros(), saturated: [false; 7], fault: true };
        return Ok((out, next));
    }
    let chol = check_spd(&params.inertia)?;

    let alpha = params.filter_alpha();
    let filtered = state.filtered_force + (sample.force - state.filtered_force) * alpha;

    let f_e = end_effector_force(&params.stiffness, &params.damping, goal, &feedback.tool_position, &feedback.tool_velocity);
    let f_net = f_e + filtered;
    let moment = feedback.orientation_error * params.rot_stiffness - feedback.angular_velocity * params.rot_damping;
    let mut wrench = SVector::<f64, 6>::zeros();
    wrench.fixed_rows_mut::<3>(0).copy_from(&f_net);
    wrench.fixed_rows_mut::<3>(3).copy_from(&moment);

    let tau_raw = feedback.jacobian.transpose() * wrench
        + (state.integrator - feedback.q_dot) * params.velocity_gain;
    let mut saturated = [false; 7];
    let tau = Vector7::from_fn(|i, _| {
        let lim = params.torque_limit[i];
        if tau_raw[i].abs() > lim {
            saturated[i] = true;
        }
        tau_raw[i].clamp(-lim, lim)
    });
    let accel = chol.solve(&tau) - params.joint_damping * feedback.q_dot;

    let mut integrator = state.integrator;
    for i in 0..7 {
        let candidate = integrator[i] + accel[i] * CONTROL_PERIOD;
        let bound = params.integrator_bound[i];
        let growing = candidate.abs() > integrator[i].abs();
        if saturated[i] && growing {
            continue;
        }
        integrator[i] = candidate.clamp(-bound, bound);
    }

    let out = ControlOutput { command: integrator, net_force: f_net, saturated, fault: false };
    let next = ControlState { filtered_force: filtered, integrator, last_command: integrator };
    Ok((out, next))
}

/// Key-value gain document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GainFile {
    stiffness: [f64; 3],
    damping: [f64; 3],
    /// Rows of H.
    inertia: Vec<[f64; 7]>,
    /// Rows of B_H.
    joint_damping: Vec<[f64; 7]>,
    velocity_gain: f64,
    filter_cutoff_hz: f64,
    torque_limit: [f64; 7],
    integrator_bound: [f64; 7],
    rot_stiffness: f64,
    rot_damping: f64,
}

fn rows(m: &Matrix7) -> Vec<[f64; 7]> {
    (0..7).map(|r| std::array::from_fn(|c| m[(r, c)])).collect()
}

fn from_rows(rows: &[[f64; 7]]) -> Result<Matrix7, NacError> {
    if rows.len() != 7 {
        return Err(NacError::Malformed(format!("expected 7 matrix rows, got {}", rows.len())));
    }
    Ok(Matrix7::from_fn(|r, c| rows[r][c]))
}

impl AdmittanceParams {
    pub fn to_toml(&self) -> String {
        let doc = GainFile {
            stiffness: self.stiffness.into(),
            damping: self.damping.into(),
            inertia: rows(&self.inertia),
            joint_damping: rows(&self.joint_damping),
            velocity_gain: self.velocity_gain,
            filter_cutoff_hz: self.filter_cutoff_hz,
            torque_limit: self.torque_limit.into(),
            integrator_bound: self.integrator_bound.into(),
            rot_stiffness: self.rot_stiffness,
            rot_damping: self.rot_damping,
        };
        toml::to_string(&doc).expect("gain file serialization cannot fail")
    }

    pub fn from_toml(text: &str) -> Result<Self, NacError> {
        let doc: GainFile = toml::from_str(text).map_err(|e| NacError::Malformed(e.to_string()))?;
        let params = Self {
            stiffness: doc.stiffness.into(),
            damping: doc.damping.into(),
            inertia: from_rows(&doc.inertia)?,
            joint_damping: from_rows(&doc.joint_damping)?,
            velocity_gain: doc.velocity_gain,
            filter_cutoff_hz: doc.filter_cutoff_hz,
            torque_limit: doc.torque_limit.into(),
            integrator_bound: doc.integrator_bound.into(),
            rot_stiffness: doc.rot_stiffness,
            rot_damping: doc.rot_damping,
        };
        params.validate()?;
        Ok(params)
    }
}

impl Serialize for AdmittanceParams {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let doc: GainFile = toml::from_str(&self.to_toml()).map_err(serde::ser::Error::custom)?;
        doc.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for AdmittanceParams {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let doc = GainFile::deserialize(deserializer)?;
        let text = toml::to_string(&doc).map_err(serde::de::Error::custom)?;
        Self::from_toml(&text).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn force_law_examples() {
        let k = Vec3::repeat(10.0);
        let zero = Vec3::zeros();
        let goal = Vec3::new(0.3, -0.2, 1.0);
        assert_eq!(end_effector_force(&k, &Vec3::repeat(2.0), &goal, &goal, &zero), zero);
        let offset = Vec3::new(0.1, 0.0, 0.0);
        assert_relative_eq!(end_effector_force(&k, &zero, &offset, &zero, &zero), Vec3::new(1.0, 0.0, 0.0));
        let f = end_effector_force(&k, &Vec3::repeat(2.0), &offset, &zero, &Vec3::new(0.2, 0.0, 0.0));
        assert_relative_eq!(f, Vec3::new(0.6, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn joint_accel_examples() {
        let zero = Vector7::zeros();
        let a = desired_joint_accel(&Matrix7::identity(), &zero, &Matrix7::identity(), &zero).unwrap();
        assert_eq!(a, zero);
        let e1 = Vector7::from_fn(|i, _| if i == 0 { 1.0 } else { 0.0 });
        let a = desired_joint_accel(&Matrix7::identity(), &e1, &Matrix7::zeros(), &zero).unwrap();
        assert_relative_eq!(a, e1);
        let a = desired_joint_accel(&(Matrix7::identity() * 2.0), &(e1 * 4.0), &Matrix7::identity(), &e1).unwrap();
        assert_relative_eq!(a, e1, epsilon = 1e-15);
    }

    #[test]
    fn joint_accel_rejects_indefinite_inertia() {
        let mut h = Matrix7::identity();
        h[(3, 3)] = -1.0;
        let zero = Vector7::zeros();
        assert_eq!(desired_joint_accel(&h, &zero, &h, &zero), Err(NacError::NotPositiveDefinite));
        let mut asym = Matrix7::identity();
        asym[(0, 1)] = 0.5;
        assert_eq!(desired_joint_accel(&asym, &zero, &asym, &zero), Err(NacError::NotPositiveDefinite));
    }

    #[test]
    fn admittance_examples() {
        let hi = admittance_response(1.0, 2.0, 4.0, 1e6).unwrap();
        assert_relative_eq!(hi.norm(), 1e-6, max_relative = 1e-6);
        let res = admittance_response(1.0, 2.0, 4.0, 2.0).unwrap();
        assert_relative_eq!(res.re, 0.5, epsilon = 1e-15);
        assert!(res.im.abs() < 1e-15);
        let one = admittance_response(1.0, 2.0, 4.0, 1.0).unwrap();
        let expected = c(2.0, -3.0).inv();
        assert_relative_eq!(one.re, expected.re, epsilon = 1e-15);
        assert_relative_eq!(one.im, expected.im, epsilon = 1e-15);
        assert_eq!(admittance_response(1.0, 2.0, 4.0, 0.0), Err(NacError::ZeroFrequency(0.0)));
    }

    #[test]
    fn friction_gain_examples() {
        let g0 = friction_feedback_gain(1.3, 0.7, 5.0, 2.0, 4.0, c(0.0, 0.0)).unwrap();
        assert_relative_eq!(g0.re, -1.0, epsilon = 1e-15);
        assert_eq!(g0.im, 0.0);

        // b = g_v + B removes the s term of the numerator
        let s = c(0.3, 1.7);
        let (m, gv, bb, k) = (1.2, 3.0, 2.0, 4.0);
        let g = friction_feedback_gain(m, gv + bb, gv, bb, k, s).unwrap();
        let expected = -k / (s * s * m + s * bb + k);
        assert_relative_eq!((g - expected).norm(), 0.0, epsilon = 1e-14);

        let g = friction_feedback_gain(1.0, 1.0, 0.0, 2.0, 4.0, c(0.0, 1.0)).unwrap();
        let expected = c(-4.0, -1.0) / c(3.0, 2.0);
        assert_relative_eq!((g - expected).norm(), 0.0, epsilon = 1e-15);

        // s = -1 +- j sqrt(3) are the roots of s^2 + 2 s + 4
        let root = c(-1.0, 3f64.sqrt());
        assert!(matches!(friction_feedback_gain(1.0, 1.0, 0.0, 2.0, 4.0, root), Err(NacError::SingularDenominator(_))));
    }

    #[test]
    fn denominator_is_s_over_admittance() {
        let (m, b, k) = (0.8, 3.0, 40.0);
        for omega in log_grid(0.05, 500.0, 60) {
            let s = c(0.0, omega);
            let denom = s * s * m + s * b + k;
            let via_c = s / admittance_response(m, b, k, omega).unwrap();
            assert!((denom - via_c).norm() <= 1e-12 * denom.norm().max(1.0));
        }
    }

    #[test]
    fn closed_loop_reduces_to_desired_without_friction() {
        let plant = PlantParams { mass: 0.8, damping: 0.0 };
        for gv in [0.0, 1.0, 100.0] {
            let y = closed_loop_admittance(&plant, gv, 2.0, 5.0, 3.0).unwrap();
            let c0 = admittance_response(0.8, 2.0, 5.0, 3.0).unwrap();
            assert!((y - c0).norm() < 1e-14);
        }
    }

    #[test]
    fn friction_error_shrinks_with_velocity_gain() {
        let plant = PlantParams { mass: 0.8, damping: 2.0 };
        let c0 = admittance_response(0.8, 1.0, 5.0, 1.5).unwrap();
        let errs: Vec<f64> = [1.0, 10.0, 100.0, 1000.0]
            .iter()
            .map(|&gv| (closed_loop_admittance(&plant, gv, 1.0, 5.0, 1.5).unwrap() - c0).norm())
            .collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    }

    #[test]
    fn passive_network_passes() {
        let params = AdmittanceParams { velocity_gain: 0.0, ..Default::default() };
        let report = passivity_check(&params, &PlantParams::default(), &default_passivity_grid()).unwrap();
        assert!(report.passing);
        for gv in [1.0, 10.0, 100.0, 1000.0] {
            let params = AdmittanceParams { velocity_gain: gv, ..Default::default() };
            assert!(passivity_check(&params, &PlantParams::default(), &default_passivity_grid()).unwrap().passing);
        }
    }

    #[test]
    fn negative_damping_fails() {
        let params = AdmittanceParams { damping: Vec3::repeat(-1.0), velocity_gain: 10.0, ..Default::default() };
        let report = passivity_check(&params, &PlantParams::default(), &default_passivity_grid()).unwrap();
        assert!(!report.passing);
        assert!(report.min_real_part < 0.0);
    }

    #[test]
    fn passivity_grid_errors() {
        let p = AdmittanceParams::default();
        let plant = PlantParams::default();
        assert_eq!(passivity_check(&p, &plant, &[]), Err(NacError::EmptyGrid));
        assert_eq!(passivity_check(&p, &plant, &[1.0, 0.0]), Err(NacError::ZeroFrequency(0.0)));
    }

    #[test]
    fn default_grid_shape() {
        let g = default_passivity_grid();
        assert_eq!(g.len(), 200);
        assert_relative_eq!(g[0], 1e-2, max_relative = 1e-12);
        assert_relative_eq!(g[199], 1e3, max_relative = 1e-12);
    }

    fn feedback_at(p: Vec3) -> KinematicFeedback {
        let mut jacobian = Matrix6x7::zeros();
        for i in 0..6 {
            jacobian[(i, i)] = 1.0;
        }
        KinematicFeedback {
            jacobian,
            tool_position: p,
            tool_velocity: Vec3::zeros(),
            angular_velocity: Vec3::zeros(),
            orientation_error: Vec3::zeros(),
            q_dot: Vector7::zeros(),
        }
    }

    #[test]
    fn rest_at_goal_commands_nothing() {
        let goal = Vec3::new(0.5, 0.0, 0.4);
        let sample = ForceSample { force: Vec3::zeros(), t: 0.0 };
        let (out, _) = control_step(&ControlState::default(), &AdmittanceParams::default(), &sample, &goal, &feedback_at(goal)).unwrap();
        assert_eq!(out.command, Vector7::zeros());
        assert!(!out.fault);
    }

    #[test]
    fn filter_reaches_95_percent_in_three_time_constants() {
        let params = AdmittanceParams::default();
        let tau = 1.0 / (std::f64::consts::TAU * params.filter_cutoff_hz);
        let steps = (3.0 * tau / CONTROL_PERIOD).ceil() as usize;
        assert_eq!(steps, 10);
        let mut state = ControlState::default();
        let input = Vec3::new(2.0, 0.0, 0.0);
        let goal = Vec3::zeros();
        for k in 0..steps {
            let sample = ForceSample { force: input, t: k as f64 * CONTROL_PERIOD };
            state = control_step(&state, &params, &sample, &goal, &feedback_at(goal)).unwrap().1;
        }
        assert!(state.filtered_force.x >= 0.95 * input.x, "{}", state.filtered_force.x);
        assert!(state.filtered_force.x < input.x);
    }

    #[test]
    fn oversized_offset_saturates_and_freezes_integrator() {
        let params = AdmittanceParams { torque_limit: Vector7::repeat(1.0), ..Default::default() };
        let goal = Vec3::new(10.0, 0.0, 0.0);
        let mut state = ControlState::default();
        let sample = ForceSample { force: Vec3::zeros(), t: 0.0 };
        let (first, s1) = control_step(&state, &params, &sample, &goal, &feedback_at(Vec3::zeros())).unwrap();
        assert!(first.saturated[0]);
        assert_eq!(first.command[0], 0.0);
        state = s1;
        for _ in 0..50 {
            let (out, next) = control_step(&state, &params, &sample, &goal, &feedback_at(Vec3::zeros())).unwrap();
            assert!(out.saturated[0]);
            assert!(next.integrator[0].abs() <= state.integrator[0].abs());
            state = next;
        }
    }

    #[test]
    fn bad_sensor_data_faults_to_zero() {
        let sample = ForceSample { force: Vec3::new(f64::NAN, 0.0, 0.0), t: 0.0 };
        let state = ControlState { integrator: Vector7::repeat(0.3), ..Default::default() };
        let (out, next) = control_step(&state, &AdmittanceParams::default(), &sample, &Vec3::x(), &feedback_at(Vec3::zeros())).unwrap();
        assert!(out.fault);
        assert_eq!(out.command, Vector7::zeros());
        assert_eq!(next.integrator, Vector7::zeros());
    }

    #[test]
    fn gain_file_round_trip() {
        let p = AdmittanceParams { velocity_gain: 42.0, ..Default::default() };
        let text = p.to_toml();
        assert!(text.contains("velocity_gain = 42.0"));
        assert_eq!(AdmittanceParams::from_toml(&text).unwrap(), p);
        let broken = text.replace("filter_cutoff_hz = 5.0", "filter_cutoff_hz = 80.0");
        assert!(AdmittanceParams::from_toml(&broken).is_err());
    }

    #[test]
    fn frequency_response_rows() {
        let mut buf = Vec::new();
        write_frequency_response(&AdmittanceParams::default(), &PlantParams::default(), 0, &log_grid(0.1, 10.0, 5), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert_eq!(text.lines().next(), Some("omega,re,im"));
    }

    proptest! {
        #[test]
        fn force_law_is_linear(
            k in prop::array::uniform3(0.0f64..500.0),
            b in prop::array::uniform3(0.0f64..50.0),
            d1 in prop::array::uniform3(-1.0f64..1.0),
            d2 in prop::array::uniform3(-1.0f64..1.0),
            v1 in prop::array::uniform3(-1.0f64..1.0),
            v2 in prop::array::uniform3(-1.0f64..1.0),
            a in -3.0f64..3.0,
        ) {
            let (k, b) = (Vec3::from(k), Vec3::from(b));
            let (d1, d2, v1, v2) = (Vec3::from(d1), Vec3::from(d2), Vec3::from(v1), Vec3::from(v2));
            let z = Vec3::zeros();
            let f = |d: Vec3, v: Vec3| end_effector_force(&k, &b, &d, &z, &v);
            let lhs = f(d1 * a + d2, z);
            let rhs = f(d1, z) * a + f(d2, z);
            prop_assert!((lhs - rhs).norm() < 1e-9);
            let lhs = f(z, v1 * a + v2);
            let rhs = f(z, v1) * a + f(z, v2);
            prop_assert!((lhs - rhs).norm() < 1e-9);
        }

        #[test]
        fn zero_gains_command_zero_forever(
            q_dot in prop::array::uniform7(-1.0f64..1.0),
            goal in prop::array::uniform3(-1.0f64..1.0),
            pos in prop::array::uniform3(-1.0f64..1.0),
            vel in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let params = AdmittanceParams {
                stiffness: Vec3::zeros(),
                damping: Vec3::zeros(),
                joint_damping: Matrix7::zeros(),
                velocity_gain: 0.0,
                rot_stiffness: 0.0,
                rot_damping: 0.0,
                ..Default::default()
            };
            let mut fb = feedback_at(Vec3::from(pos));
            fb.tool_velocity = Vec3::from(vel);
            fb.q_dot = Vector7::from(q_dot);
            let mut state = ControlState::default();
            for k in 0..100 {
                let sample = ForceSample { force: Vec3::zeros(), t: k as f64 * CONTROL_PERIOD };
                let (out, next) = control_step(&state, &params, &sample, &Vec3::from(goal), &fb).unwrap();
                prop_assert_eq!(out.command, Vector7::zeros());
                state = next;
            }
        }

        #[test]
        fn integrator_never_exceeds_bound(
            forces in prop::collection::vec(prop::array::uniform3(-200.0f64..200.0), 1..120),
            bound in 0.05f64..2.0,
        ) {
            let params = AdmittanceParams { integrator_bound: Vector7::repeat(bound), ..Default::default() };
            let mut state = ControlState::default();
            let mut fb = feedback_at(Vec3::zeros());
            for (k, f) in forces.iter().enumerate() {
                let sample = ForceSample { force: Vec3::from(*f), t: k as f64 * CONTROL_PERIOD };
                let (out, next) = control_step(&state, &params, &sample, &Vec3::zeros(), &fb).unwrap();
                prop_assert!(next.integrator.iter().all(|v| v.abs() <= bound + 1e-15));
                fb.q_dot = out.command;
                state = next;
            }
        }

        #[test]
        fn random_passive_parameters_pass(
            m in 0.01f64..10.0,
            b_plant in 0.0f64..10.0,
            bb in 0.01f64..100.0,
            k in 0.01f64..1000.0,
            gv in 0.0f64..1e4,
        ) {
            let params = AdmittanceParams {
                stiffness: Vec3::repeat(k),
                damping: Vec3::repeat(bb),
                velocity_gain: gv,
                ..Default::default()
            };
            let plant = PlantParams { mass: m, damping: b_plant };
            let report = passivity_check(&params, &plant, &default_passivity_grid()).unwrap();
            prop_assert!(report.passing, "{:?}", report);
        }
    }
}
