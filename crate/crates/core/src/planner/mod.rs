//! Whole-body motion planning for the mobile manipulator.
//!
//! Tasks are grouped into priority levels. Each level is a least-squares QP
//! over the generalized velocity `[v, omega, q_arm_dot]`, restricted to the
//! nullspace of every higher level and subject to the joint position and
//! velocity limits. Tasks sharing a level are blended by weight.

pub mod cutter;
pub mod kinematics;
pub mod qp;

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector, Isometry3, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cutter::{execute_cut, CaneSample, CutAttempt, CutEvent, CutStatus, CutterConfig, MissReason};
pub use kinematics::{arm_jacobian, Matrix6x9, RobotModel, RobotState, Vector9};
pub use qp::{solve_qp, QpProblem, QpSolution};

use crate::geometry::{rotation_log, Mat3, Vec3};
use crate::nac::Vector7;

/// Tool-to-vine distance at the end of the approach (m).
pub const DEFAULT_STANDOFF: f64 = 0.0835;

/// Arm posture with the tool level and pointing along the platform heading,
/// branch axis vertical.
pub const HOME_POSTURE: [f64; 7] = [
    0.0,
    -std::f64::consts::FRAC_PI_4,
    0.0,
    -3.0 * std::f64::consts::FRAC_PI_4,
    0.0,
    std::f64::consts::FRAC_PI_2,
    0.0,
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("invalid robot description: {0}")]
    Config(String),
    #[error("invalid QP: {0}")]
    InvalidProblem(String),
    #[error("constraints infeasible: row {row} cannot be satisfied together with rows {active:?}")]
    Infeasible { row: usize, active: Vec<usize> },
    #[error("QP did not converge within {0} iterations")]
    QpIterationLimit(usize),
    #[error("invalid task stack: {0}")]
    InvalidStack(String),
    #[error("robot state violates joint limits")]
    StateOutOfLimits,
    #[error("target unreachable, closest approach {closest_distance:.4} m from the goal")]
    Unreachable { closest_distance: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    /// Rows x 9.
    pub jacobian: DMatrix<f64>,
    pub e_dot: DVector<f64>,
    pub weight: f64,
    pub label: String,
}

impl Task {
    pub fn new(label: &str, jacobian: DMatrix<f64>, e_dot: DVector<f64>, weight: f64) -> Self {
        Self { jacobian, e_dot, weight, label: label.to_string() }
    }

    /// Platform velocity task on `(v, omega)`.
    pub fn base(v: f64, omega: f64) -> Self {
        let mut j = DMatrix::zeros(2, 9);
        j[(0, 0)] = 1.0;
        j[(1, 1)] = 1.0;
        Self::new("base", j, DVector::from_row_slice(&[v, omega]), 1.0)
    }

    /// Arm joint velocity task.
    pub fn posture(rates: &Vector7, weight: f64) -> Self {
        let mut j = DMatrix::zeros(7, 9);
        for i in 0..7 {
            j[(i, i + 2)] = 1.0;
        }
        Self::new("posture", j, DVector::from_iterator(7, rates.iter().copied()), weight)
    }

    /// Tool twist task `[linear; angular]` in the world frame.
    pub fn tool_twist(model: &RobotModel, state: &RobotState, twist: &[f64; 6], weight: f64) -> Self {
        let j = model.whole_body_jacobian(state);
        Self::new("tool", DMatrix::from_fn(6, 9, |r, c| j[(r, c)]), DVector::from_row_slice(twist), weight)
    }

    /// Tool point velocity task.
    pub fn tool_point(model: &RobotModel, state: &RobotState, velocity: &Vec3, weight: f64) -> Self {
        let j = model.whole_body_jacobian(state);
        Self::new("tool point", DMatrix::from_fn(3, 9, |r, c| j[(r, c)]), DVector::from_column_slice(velocity.as_slice()), weight)
    }

    fn validate(&self) -> Result<(), PlannerError> {
        if self.jacobian.ncols() != 9 || self.jacobian.nrows() != self.e_dot.len() {
            return Err(PlannerError::InvalidStack(format!("task '{}' has mismatched dimensions", self.label)));
        }
        if !(self.weight > 0.0 && self.weight.is_finite()) {
            return Err(PlannerError::InvalidStack(format!("task '{}' needs a positive weight", self.label)));
        }
        if !self.jacobian.iter().chain(self.e_dot.iter()).all(|v| v.is_finite()) {
            return Err(PlannerError::InvalidStack(format!("task '{}' has non-finite entries", self.label)));
        }
        Ok(())
    }
}

/// Linear inequalities `R_c q_dot <= C_b` on the generalized velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct Constraints {
    pub r_c: DMatrix<f64>,
    pub c_b: DVector<f64>,
}

impl Constraints {
    pub fn none() -> Self {
        Self { r_c: DMatrix::zeros(0, 9), c_b: DVector::zeros(0) }
    }

    /// Velocity limits, plus arm position limits expressed as the velocity
    /// that would reach them within `dt`.
    pub fn limits(model: &RobotModel, state: &RobotState, dt: f64) -> Result<Self, PlannerError> {
        if !model.within_limits(&state.q_arm) {
            return Err(PlannerError::StateOutOfLimits);
        }
        let vmax = model.velocity_limits();
        let mut r_c = DMatrix::zeros(18, 9);
        let mut c_b = DVector::zeros(18);
        for i in 0..9 {
            let (mut lo, mut hi) = (-vmax[i], vmax[i]);
            if i >= 2 {
                let q = state.q_arm[i - 2];
                lo = lo.max((model.arm.q_min[i - 2] - q) / dt);
                hi = hi.min((model.arm.q_max[i - 2] - q) / dt);
            }
            r_c[(2 * i, i)] = 1.0;
            c_b[2 * i] = hi;
            r_c[(2 * i + 1, i)] = -1.0;
            c_b[2 * i + 1] = -lo;
        }
        Ok(Self { r_c, c_b })
    }

    pub fn satisfied(&self, q_dot: &Vector9, tol: f64) -> bool {
        let x = DVector::from_column_slice(q_dot.as_slice());
        (&self.r_c * x - &self.c_b).iter().all(|&v| v <= tol)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStack {
    /// Level 0 has the highest priority.
    pub levels: Vec<Vec<Task>>,
    pub constraints: Constraints,
}

impl TaskStack {
    pub fn new(levels: Vec<Vec<Task>>, constraints: Constraints) -> Self {
        Self { levels, constraints }
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        if self.levels.is_empty() || self.levels.iter().any(|l| l.is_empty()) {
            return Err(PlannerError::InvalidStack("levels must be nonempty".into()));
        }
        if self.constraints.r_c.ncols() != 9 || self.constraints.r_c.nrows() != self.constraints.c_b.len() {
            return Err(PlannerError::InvalidStack("constraint dimensions".into()));
        }
        self.levels.iter().flatten().try_for_each(Task::validate)
    }
}

/// Orthonormal basis (columns) of the right nullspace of `a`.
fn nullspace(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    // pad to square so the SVD returns a full right basis
    let rows = a.nrows().max(n);
    let mut padded = DMatrix::zeros(rows, n);
    padded.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
    let svd = SVD::new(padded, false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let smax = svd.singular_values.max();
    let tol = 1e-9 * smax.max(1.0);
    let cols: Vec<DVector<f64>> = (0..n)
        .filter(|&i| svd.singular_values[i] <= tol)
        .map(|i| v_t.row(i).transpose())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Solves the stack level by level. Level `k` only moves within the nullspace
/// of levels `0..k`, so lower levels cannot disturb higher ones.
pub fn solve_stack(stack: &TaskStack) -> Result<Vector9, PlannerError> {
    stack.validate()?;
    let mut x = DVector::zeros(9);
    let mut basis = DMatrix::identity(9, 9);
    for level in &stack.levels {
        if basis.ncols() == 0 {
            break;
        }
        let rows: usize = level.iter().map(|t| t.e_dot.len()).sum();
        let mut j = DMatrix::zeros(rows, 9);
        let mut e = DVector::zeros(rows);
        let mut r0 = 0;
        for task in level {
            let w = task.weight.sqrt();
            let k = task.e_dot.len();
            j.view_mut((r0, 0), (k, 9)).copy_from(&(&task.jacobian * w));
            e.rows_mut(r0, k).copy_from(&(&task.e_dot * w));
            r0 += k;
        }
        let jz = &j * &basis;
        let residual = &e - &j * &x;
        // rows the remaining freedom cannot touch are dropped; x already
        // satisfies every row, so negative slack here is round-off
        let r_full = &stack.constraints.r_c * &basis;
        let c_full = &stack.constraints.c_b - &stack.constraints.r_c * &x;
        let keep: Vec<usize> = (0..r_full.nrows()).filter(|&i| r_full.row(i).amax() > 1e-12).collect();
        let r_z = r_full.select_rows(&keep);
        let c_z = DVector::from_iterator(keep.len(), keep.iter().map(|&i| c_full[i].max(0.0)));
        let sol = solve_qp(&QpProblem::least_squares(&jz, &residual, r_z, c_z))?;
        x += &basis * &sol.x;
        basis = &basis * nullspace(&jz);
    }
    Ok(Vector9::from_column_slice(x.as_slice()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApproachConfig {
    pub dt: f64,
    /// Proportional gain on pose errors (1/s).
    pub gain: f64,
    pub max_tool_speed: f64,
    pub position_tolerance: f64,
    pub angle_tolerance: f64,
    pub max_duration: f64,
    /// Horizontal distance from the arm base to the goal the platform drives to.
    pub preferred_reach: f64,
    /// Goals farther than this from the arm base make the platform move first.
    pub max_reach: f64,
    pub home_posture: [f64; 7],
}

impl Default for ApproachConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            gain: 3.0,
            max_tool_speed: 0.3,
            position_tolerance: 5e-4,
            angle_tolerance: 5e-3,
            max_duration: 30.0,
            preferred_reach: 0.55,
            max_reach: 0.7,
            home_posture: HOME_POSTURE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub q_dot: Vector9,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub samples: Vec<TrajectorySample>,
    /// State after each sample.
    pub states: Vec<RobotState>,
}

impl Trajectory {
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 * self.dt
    }

    pub fn final_state(&self) -> Option<&RobotState> {
        self.states.last()
    }

    /// Replays the velocity commands from `start`.
    pub fn integrate(&self, start: &RobotState) -> RobotState {
        self.samples.iter().fold(start.clone(), |s, smp| s.integrate(&smp.q_dot, self.dt))
    }

    pub fn log_rows(&self, start_time: f64, blade_gap: f64) -> Vec<TrajectoryRow> {
        self.samples
            .iter()
            .zip(&self.states)
            .map(|(s, st)| TrajectoryRow { t: start_time + s.t + self.dt, state: st.clone(), blade_gap })
            .collect()
    }
}

fn saturate(v: Vec3, limit: f64) -> Vec3 {
    let n = v.norm();
    if n > limit { v * (limit / n) } else { v }
}

fn pose_error(model: &RobotModel, state: &RobotState, goal: &Isometry3<f64>) -> (Vec3, Vec3) {
    let pose = model.tool_pose(state);
    let dp = goal.translation.vector - pose.translation.vector;
    let rg: Mat3 = goal.rotation.to_rotation_matrix().into_inner();
    let rc: Mat3 = pose.rotation.to_rotation_matrix().into_inner();
    (dp, rotation_log(&(rg * rc.transpose())))
}

struct Recorder<'a> {
    cfg: &'a ApproachConfig,
    traj: Trajectory,
    state: RobotState,
    best: f64,
}

impl Recorder<'_> {
    fn push(&mut self, q_dot: Vector9) {
        let t = self.traj.samples.len() as f64 * self.cfg.dt;
        self.state = self.state.integrate(&q_dot, self.cfg.dt);
        self.traj.samples.push(TrajectorySample { t, q_dot });
        self.traj.states.push(self.state.clone());
    }

    fn out_of_time(&self) -> bool {
        self.traj.duration() >= self.cfg.max_duration
    }
}

/// Drives the tool to `goal` (position and orientation). The platform first
/// brings the goal within arm reach, then holds still while the arm converges.
pub fn plan_to_pose(
    model: &RobotModel,
    start: &RobotState,
    goal: &Isometry3<f64>,
    cfg: &ApproachConfig,
) -> Result<Trajectory, PlannerError> {
    let mut rec = Recorder {
        cfg,
        traj: Trajectory { dt: cfg.dt, samples: Vec::new(), states: Vec::new() },
        state: RobotState { q_dot: Vector9::zeros(), ..start.clone() },
        best: f64::INFINITY,
    };
    let goal_p = goal.translation.vector;
    let home = Vector7::from(cfg.home_posture);

    // platform phase
    let reach_error = |s: &RobotState| {
        let arm_base = model.arm_base_pose(&s.base_pose).translation.vector;
        let d = goal_p - arm_base;
        let th = s.base_pose.z;
        let fwd = d.x * th.cos() + d.y * th.sin();
        let lat = -d.x * th.sin() + d.y * th.cos();
        (fwd, lat)
    };
    let (fwd, lat) = reach_error(&rec.state);
    if fwd.hypot(lat) > cfg.max_reach || fwd < 0.0 {
        loop {
            let (fwd, lat) = reach_error(&rec.state);
            let heading = lat.atan2(fwd.max(1e-6));
            let along = fwd - cfg.preferred_reach;
            if along.abs() < 1e-3 && heading.abs() < 1e-3 {
                break;
            }
            if rec.out_of_time() {
                return Err(PlannerError::Unreachable { closest_distance: (fwd - cfg.preferred_reach).abs() });
            }
            let hold = Task::posture(&Vector7::zeros(), 1.0);
            let base = Task::base(cfg.gain * along, cfg.gain * heading);
            let stack = TaskStack::new(vec![vec![base, hold]], Constraints::limits(model, &rec.state, cfg.dt)?);
            rec.push(solve_stack(&stack)?);
        }
    }

    // arm phase
    let mut stall = 0usize;
    loop {
        let (dp, dr) = pose_error(model, &rec.state, goal);
        let err = dp.norm();
        if err < cfg.position_tolerance && dr.norm() < cfg.angle_tolerance {
            break;
        }
        if err < rec.best - 1e-6 {
            rec.best = err;
            stall = 0;
        } else {
            stall += 1;
        }
        if rec.out_of_time() || stall as f64 * cfg.dt > 2.0 {
            return Err(PlannerError::Unreachable { closest_distance: rec.best.min(err) });
        }
        let v = saturate(dp * cfg.gain, cfg.max_tool_speed);
        let w = saturate(dr * cfg.gain, 1.0);
        let twist = [v.x, v.y, v.z, w.x, w.y, w.z];
        let levels = vec![
            vec![Task::base(0.0, 0.0)],
            vec![Task::tool_twist(model, &rec.state, &twist, 1.0)],
            vec![Task::posture(&((home - rec.state.q_arm) * 0.5), 1.0)],
        ];
        let stack = TaskStack::new(levels, Constraints::limits(model, &rec.state, cfg.dt)?);
        rec.push(solve_stack(&stack)?);
    }
    Ok(rec.traj)
}

/// Moves the tool along its current approach axis until it sits `standoff`
/// short of `vine_position`, keeping its orientation.
pub fn plan_approach(
    model: &RobotModel,
    state: &RobotState,
    vine_position: &Vec3,
    standoff: f64,
    cfg: &ApproachConfig,
) -> Result<Trajectory, PlannerError> {
    let pose = model.tool_pose(state);
    let approach = pose.rotation * Vec3::z();
    let goal = Isometry3::from_parts((vine_position - approach * standoff).into(), pose.rotation);
    plan_to_pose(model, state, &goal, cfg)
}

/// Platform-only approach with the arm locked: the tool point is steered
/// toward the standoff point by driving and turning.
pub fn plan_approach_base_only(
    model: &RobotModel,
    state: &RobotState,
    vine_position: &Vec3,
    standoff: f64,
    cfg: &ApproachConfig,
) -> Result<Trajectory, PlannerError> {
    let pose = model.tool_pose(state);
    let approach = pose.rotation * Vec3::z();
    let goal = vine_position - approach * standoff;
    let mut rec = Recorder {
        cfg,
        traj: Trajectory { dt: cfg.dt, samples: Vec::new(), states: Vec::new() },
        state: RobotState { q_dot: Vector9::zeros(), ..state.clone() },
        best: f64::INFINITY,
    };
    let mut stall = 0usize;
    loop {
        let dp = goal - model.tool_position(&rec.state);
        let err = dp.norm();
        if err < cfg.position_tolerance {
            break;
        }
        if err < rec.best - 1e-6 {
            rec.best = err;
            stall = 0;
        } else {
            stall += 1;
        }
        if rec.out_of_time() || stall as f64 * cfg.dt > 2.0 {
            return Err(PlannerError::Unreachable { closest_distance: rec.best.min(err) });
        }
        let levels = vec![
            vec![Task::posture(&Vector7::zeros(), 1.0)],
            vec![Task::tool_point(model, &rec.state, &saturate(dp * cfg.gain, cfg.max_tool_speed), 1.0)],
        ];
        let stack = TaskStack::new(levels, Constraints::limits(model, &rec.state, cfg.dt)?);
        rec.push(solve_stack(&stack)?);
    }
    Ok(rec.traj)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub state: RobotState,
    pub blade_gap: f64,
}

pub const TRAJECTORY_LOG_HEADER: &str = "t,base_x,base_y,base_theta,q1,q2,q3,q4,q5,q6,q7,blade_gap";

pub fn write_trajectory_log<W: Write>(rows: &[TrajectoryRow], mut out: W) -> io::Result<()> {
    writeln!(out, "{TRAJECTORY_LOG_HEADER}")?;
    for r in rows {
        let b = r.state.base_pose;
        write!(out, "{:.4},{:.6},{:.6},{:.6}", r.t, b.x, b.y, b.z)?;
        for q in r.state.q_arm.iter() {
            write!(out, ",{q:.6}")?;
        }
        writeln!(out, ",{:.6}", r.blade_gap)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn home_state() -> RobotState {
        RobotState::new(Vec3::new(-1.2, 0.0, 0.0), Vector7::from(HOME_POSTURE))
    }

    #[test]
    fn home_posture_points_tool_forward() {
        let model = RobotModel::default();
        let s = home_state();
        assert!(model.within_limits(&s.q_arm));
        let r = model.tool_rotation(&s);
        assert!((r * Vec3::z() - Vec3::x()).norm() < 0.05, "{}", r * Vec3::z());
        assert!((r * Vec3::x() - Vec3::z()).norm() < 0.05, "{}", r * Vec3::x());
    }

    #[test]
    fn posture_hold_gives_zero() {
        let model = RobotModel::default();
        let s = home_state();
        let stack = TaskStack::new(
            vec![vec![Task::posture(&Vector7::zeros(), 1.0)]],
            Constraints::limits(&model, &s, 0.01).unwrap(),
        );
        assert!(solve_stack(&stack).unwrap().norm() < 1e-12);
    }

    #[test]
    fn base_hold_keeps_platform_still_under_arm_task() {
        let model = RobotModel::default();
        let s = home_state();
        let twist = [0.1, -0.05, 0.02, 0.0, 0.1, 0.0];
        let stack = TaskStack::new(
            vec![vec![Task::base(0.0, 0.0)], vec![Task::tool_twist(&model, &s, &twist, 1.0)]],
            Constraints::limits(&model, &s, 0.01).unwrap(),
        );
        let qd = solve_stack(&stack).unwrap();
        assert!(qd[0].abs() < 1e-12 && qd[1].abs() < 1e-12);
        assert!(qd.rows(2, 7).norm() > 1e-3);
    }

    #[test]
    fn level_zero_unchanged_by_lower_levels() {
        let model = RobotModel::default();
        let s = home_state();
        let c = Constraints::limits(&model, &s, 0.01).unwrap();
        let alone = solve_stack(&TaskStack::new(vec![vec![Task::base(0.3, 0.1)]], c.clone())).unwrap();
        let twist = [0.2, 0.1, -0.1, 0.3, 0.0, 0.2];
        let both = solve_stack(&TaskStack::new(
            vec![vec![Task::base(0.3, 0.1)], vec![Task::tool_twist(&model, &s, &twist, 2.0)]],
            c,
        ))
        .unwrap();
        assert!((alone[0] - both[0]).abs() < 1e-9 && (alone[1] - both[1]).abs() < 1e-9);
    }

    #[test]
    fn velocity_limits_bind() {
        let model = RobotModel::default();
        let s = home_state();
        let c = Constraints::limits(&model, &s, 0.01).unwrap();
        let qd = solve_stack(&TaskStack::new(vec![vec![Task::base(5.0, 0.0)]], c.clone())).unwrap();
        assert!((qd[0] - model.base.v_max).abs() < 1e-9);
        assert!(c.satisfied(&qd, 1e-9));
    }

    #[test]
    fn stack_validation() {
        let c = Constraints::none();
        assert!(solve_stack(&TaskStack::new(vec![], c.clone())).is_err());
        let mut t = Task::base(0.0, 0.0);
        t.weight = 0.0;
        assert!(solve_stack(&TaskStack::new(vec![vec![t]], c)).is_err());
    }

    #[test]
    fn out_of_limits_state_rejected() {
        let model = RobotModel::default();
        let s = RobotState::new(Vec3::zeros(), Vector7::zeros());
        assert_eq!(Constraints::limits(&model, &s, 0.01), Err(PlannerError::StateOutOfLimits));
    }

    #[test]
    fn default_standoff() {
        assert_eq!(DEFAULT_STANDOFF, 0.0835);
    }

    #[test]
    fn approach_already_at_standoff_is_empty() {
        let model = RobotModel::default();
        let s = home_state();
        let pose = model.tool_pose(&s);
        let vine = pose.translation.vector + pose.rotation * Vec3::z() * DEFAULT_STANDOFF;
        let traj = plan_approach(&model, &s, &vine, DEFAULT_STANDOFF, &ApproachConfig::default()).unwrap();
        assert!(traj.is_empty());
    }

    #[test]
    fn base_only_approach_one_metre() {
        let model = RobotModel::default();
        let s = home_state();
        let tool = model.tool_position(&s);
        let approach = model.tool_rotation(&s) * Vec3::z();
        let vine = tool + approach * 1.0;
        let traj = plan_approach_base_only(&model, &s, &vine, DEFAULT_STANDOFF, &ApproachConfig::default()).unwrap();
        let end = traj.integrate(&s);
        let moved = (end.base_pose.xy() - s.base_pose.xy()).norm();
        assert!((moved - (1.0 - DEFAULT_STANDOFF)).abs() < 1e-3, "{moved}");
        assert!((end.q_arm - s.q_arm).norm() < 1e-9);
        let limits = model.velocity_limits();
        for smp in &traj.samples {
            assert!((0..9).all(|i| smp.q_dot[i].abs() <= limits[i] + 1e-9));
        }
    }

    #[test]
    fn whole_body_approach_reaches_standoff() {
        let model = RobotModel::default();
        let s = home_state();
        let vine = Vec3::new(0.0, 0.05, 0.55);
        let cfg = ApproachConfig::default();
        let traj = plan_approach(&model, &s, &vine, DEFAULT_STANDOFF, &cfg).unwrap();
        let end = traj.final_state().unwrap();
        let d = (model.tool_position(end) - vine).norm();
        assert!((d - DEFAULT_STANDOFF).abs() < 1e-3, "{d}");
        let replay = traj.integrate(&s);
        assert!((replay.q_arm - end.q_arm).norm() < 1e-12);
        for st in &traj.states {
            assert!(model.within_limits(&st.q_arm));
        }
    }

    #[test]
    fn unreachable_target_reports_distance() {
        let model = RobotModel::default();
        let s = home_state();
        let vine = Vec3::new(0.0, 0.0, 3.0);
        let mut cfg = ApproachConfig::default();
        cfg.max_duration = 8.0;
        match plan_approach(&model, &s, &vine, DEFAULT_STANDOFF, &cfg) {
            Err(PlannerError::Unreachable { closest_distance }) => assert!(closest_distance > 0.5),
            other => panic!("expected unreachable, got {other:?}"),
        }
    }

    #[test]
    fn trajectory_log_layout() {
        let row = TrajectoryRow { t: 0.01, state: home_state(), blade_gap: 0.075 };
        let mut buf = Vec::new();
        write_trajectory_log(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], TRAJECTORY_LOG_HEADER);
        assert_eq!(lines[1].split(',').count(), 12);
    }

    proptest! {
        #[test]
        fn emitted_velocities_respect_constraints(
            q in prop::array::uniform7(-1.0f64..1.0),
            twist in prop::array::uniform6(-2.0f64..2.0),
            v in -3.0f64..3.0,
            w in -3.0f64..3.0,
        ) {
            let model = RobotModel::default();
            let mut q_arm = Vector7::from(HOME_POSTURE) + Vector7::from(q) * 0.5;
            for i in 0..7 {
                q_arm[i] = q_arm[i].clamp(model.arm.q_min[i], model.arm.q_max[i]);
            }
            let s = RobotState::new(Vec3::zeros(), q_arm);
            let c = Constraints::limits(&model, &s, 0.01).unwrap();
            let stack = TaskStack::new(
                vec![vec![Task::base(v, w)], vec![Task::tool_twist(&model, &s, &twist, 1.0)], vec![Task::posture(&Vector7::zeros(), 0.1)]],
                c.clone(),
            );
            let qd = solve_stack(&stack).unwrap();
            let viol = (&c.r_c * DVector::from_column_slice(qd.as_slice()) - &c.c_b).max();
            prop_assert!(c.satisfied(&qd, 1e-9), "violation {viol} qd {qd}");
            let next = s.integrate(&qd, 0.01);
            for i in 0..7 {
                prop_assert!(next.q_arm[i] >= model.arm.q_min[i] - 1e-9 && next.q_arm[i] <= model.arm.q_max[i] + 1e-9);
            }
        }
    }
}
