use nalgebra::{Isometry3, SMatrix, SVector, Translation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use super::PlannerError;
use crate::geometry::{rot_z, Mat3, Vec3};
use crate::nac::{Matrix6x7, Vector7};

pub type Vector9 = SVector<f64, 9>;
pub type Matrix6x9 = SMatrix<f64, 6, 9>;

const DEFAULT_ROBOT: &str = include_str!("../../config/panda.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmParams {
    pub a: [f64; 7],
    pub d: [f64; 7],
    pub alpha: [f64; 7],
    pub flange: f64,
    pub q_min: [f64; 7],
    pub q_max: [f64; 7],
    pub qd_max: [f64; 7],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolParams {
    pub offset: [f64; 3],
}

/// Tool axes in the flange frame: columns are tool x, y, z.
fn tool_mount_rotation() -> UnitQuaternion<f64> {
    let m = Mat3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0);
    UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseParams {
    pub mount: [f64; 3],
    pub v_max: f64,
    pub omega_max: f64,
}

/// Mobile manipulator: differential-drive platform carrying a 7-joint arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotModel {
    pub arm: ArmParams,
    pub tool: ToolParams,
    pub base: BaseParams,
}

impl Default for RobotModel {
    fn default() -> Self {
        Self::from_toml(DEFAULT_ROBOT).expect("bundled robot description is valid")
    }
}

/// Platform pose `(x, y, heading)` and arm joint angles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub base_pose: Vec3,
    pub q_arm: Vector7,
    /// Generalized velocity `[v, omega, q_arm_dot]`.
    pub q_dot: Vector9,
}

impl RobotState {
    pub fn new(base_pose: Vec3, q_arm: Vector7) -> Self {
        Self { base_pose, q_arm, q_dot: Vector9::zeros() }
    }

    /// Applies `q_dot` for `dt` seconds. The platform moves along its heading
    /// only, so lateral slip is impossible by construction.
    pub fn integrate(&self, q_dot: &Vector9, dt: f64) -> Self {
        let (v, w) = (q_dot[0], q_dot[1]);
        let th = self.base_pose.z;
        let base_pose = if w.abs() < 1e-12 {
            Vec3::new(self.base_pose.x + v * th.cos() * dt, self.base_pose.y + v * th.sin() * dt, th)
        } else {
            // exact arc
            let th1 = th + w * dt;
            Vec3::new(
                self.base_pose.x + v / w * (th1.sin() - th.sin()),
                self.base_pose.y - v / w * (th1.cos() - th.cos()),
                th1,
            )
        };
        let q_arm = self.q_arm + q_dot.fixed_rows::<7>(2) * dt;
        Self { base_pose, q_arm, q_dot: *q_dot }
    }
}

impl RobotModel {
    pub fn from_toml(text: &str) -> Result<Self, PlannerError> {
        let model: Self = toml::from_str(text).map_err(|e| PlannerError::Config(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        let arm = &self.arm;
        let all = arm.a.iter().chain(&arm.d).chain(&arm.alpha).chain(&arm.q_min).chain(&arm.q_max).chain(&arm.qd_max);
        if !all.clone().all(|v| v.is_finite()) || !arm.flange.is_finite() || !self.tool.offset.iter().all(|v| v.is_finite()) {
            return Err(PlannerError::Config("non-finite robot parameter".into()));
        }
        if (0..7).any(|i| arm.q_min[i] >= arm.q_max[i] || arm.qd_max[i] <= 0.0) {
            return Err(PlannerError::Config("joint limits must satisfy q_min < q_max and qd_max > 0".into()));
        }
        if !(self.base.v_max > 0.0 && self.base.omega_max > 0.0) {
            return Err(PlannerError::Config("base velocity limits must be positive".into()));
        }
        Ok(())
    }

    pub fn q_min(&self) -> Vector7 {
        Vector7::from(self.arm.q_min)
    }

    pub fn q_max(&self) -> Vector7 {
        Vector7::from(self.arm.q_max)
    }

    /// Generalized velocity limits `[v_max, omega_max, qd_max...]`.
    pub fn velocity_limits(&self) -> Vector9 {
        let mut out = Vector9::zeros();
        out[0] = self.base.v_max;
        out[1] = self.base.omega_max;
        for i in 0..7 {
            out[i + 2] = self.arm.qd_max[i];
        }
        out
    }

    /// Joint limit check with a 1e-9 rad allowance for integration round-off.
    pub fn within_limits(&self, q: &Vector7) -> bool {
        (0..7).all(|i| q[i] >= self.arm.q_min[i] - 1e-9 && q[i] <= self.arm.q_max[i] + 1e-9)
    }

    /// Joint frames 1..=7 in the arm base frame, then the tool frame.
    pub fn arm_frames(&self, q: &Vector7) -> ([Isometry3<f64>; 7], Isometry3<f64>) {
        let mut t = Isometry3::identity();
        let mut frames = [Isometry3::identity(); 7];
        for (i, frame) in frames.iter_mut().enumerate() {
            t *= link(self.arm.alpha[i], self.arm.a[i], q[i], self.arm.d[i]);
            *frame = t;
        }
        let o = self.tool.offset;
        let tool = t
            * Translation3::new(0.0, 0.0, self.arm.flange)
            * Isometry3::from_parts(Translation3::new(o[0], o[1], o[2]), tool_mount_rotation());
        (frames, tool)
    }

    /// Tool pose in the arm base frame.
    pub fn arm_fk(&self, q: &Vector7) -> Isometry3<f64> {
        self.arm_frames(q).1
    }

    /// Geometric Jacobian of the tool point in the arm base frame,
    /// linear rows first.
    pub fn arm_jacobian(&self, q: &Vector7) -> Matrix6x7 {
        let (frames, tool) = self.arm_frames(q);
        let p = tool.translation.vector;
        let mut j = Matrix6x7::zeros();
        for (i, f) in frames.iter().enumerate() {
            let z: Vec3 = f.rotation * Vec3::z();
            let o = f.translation.vector;
            j.fixed_view_mut::<3, 1>(0, i).copy_from(&z.cross(&(p - o)));
            j.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
        }
        j
    }

    fn base_isometry(&self, base_pose: &Vec3) -> Isometry3<f64> {
        let rot = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), base_pose.z);
        let mount = Vec3::from(self.base.mount);
        Isometry3::from_parts(Translation3::new(base_pose.x, base_pose.y, 0.0), rot)
            * Translation3::from(mount)
    }

    /// World pose of the arm base.
    pub fn arm_base_pose(&self, base_pose: &Vec3) -> Isometry3<f64> {
        self.base_isometry(base_pose)
    }

    /// World tool pose.
    pub fn tool_pose(&self, state: &RobotState) -> Isometry3<f64> {
        self.base_isometry(&state.base_pose) * self.arm_fk(&state.q_arm)
    }

    pub fn tool_position(&self, state: &RobotState) -> Vec3 {
        self.tool_pose(state).translation.vector
    }

    pub fn tool_rotation(&self, state: &RobotState) -> Mat3 {
        *self.tool_pose(state).rotation.to_rotation_matrix().matrix()
    }

    /// World-frame Jacobian of the tool with respect to `[v, omega, q_arm_dot]`.
    pub fn whole_body_jacobian(&self, state: &RobotState) -> Matrix6x9 {
        let th = state.base_pose.z;
        let r = rot_z(th);
        let p = self.tool_position(state);
        let base_origin = Vec3::new(state.base_pose.x, state.base_pose.y, 0.0);
        let mut j = Matrix6x9::zeros();
        j.fixed_view_mut::<3, 1>(0, 0).copy_from(&Vec3::new(th.cos(), th.sin(), 0.0));
        j.fixed_view_mut::<3, 1>(0, 1).copy_from(&Vec3::z().cross(&(p - base_origin)));
        j[(5, 1)] = 1.0;
        let ja = self.arm_jacobian(&state.q_arm);
        let lin = r * ja.fixed_rows::<3>(0);
        let ang = r * ja.fixed_rows::<3>(3);
        j.fixed_view_mut::<3, 7>(0, 2).copy_from(&lin);
        j.fixed_view_mut::<3, 7>(3, 2).copy_from(&ang);
        j
    }
}

fn link(alpha: f64, a: f64, theta: f64, d: f64) -> Isometry3<f64> {
    let rx = UnitQuaternion::from_axis_angle(&Vec3::x_axis(), alpha);
    let rz = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), theta);
    Isometry3::from_parts(Translation3::identity(), rx)
        * Translation3::new(a, 0.0, 0.0)
        * Isometry3::from_parts(Translation3::identity(), rz)
        * Translation3::new(0.0, 0.0, d)
}

/// Jacobian of the bundled arm model.
pub fn arm_jacobian(q: &Vector7) -> Matrix6x7 {
    RobotModel::default().arm_jacobian(q)
}
