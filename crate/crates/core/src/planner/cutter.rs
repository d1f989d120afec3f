//! Two-blade pruning tool.
//!
//! Tool frame at the TCP: x along the branch to be cut, y the closing
//! direction of the blades, z the approach direction. The blades are bars
//! parallel to z at `y = +-gap/2`, running from the throat behind the TCP to
//! the blade tip ahead of it. Once the blades meet the cane they hold it for
//! `shear_time` while they bite through.

use nalgebra::Isometry3;
use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;
use crate::plant_dyn::ToolCapsule;
use crate::vine_gen::SegmentId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CutterConfig {
    /// Opening between the blades (m).
    pub initial_gap: f64,
    pub closure_time: f64,
    /// Time the blades grip the cane while shearing it (s).
    pub shear_time: f64,
    /// Blade tip ahead of the TCP (m).
    pub tip_offset: f64,
    /// Throat behind the TCP (m).
    pub throat_depth: f64,
    pub blade_radius: f64,
    /// Largest speed of the cane relative to the blades, across the jaw or
    /// along its own axis, during the grip that still gives a clean cut (m/s).
    pub slip_speed: f64,
    /// Largest angle between the cane and the tool x axis (rad).
    pub max_crossing_angle: f64,
}

impl Default for CutterConfig {
    fn default() -> Self {
        Self {
            initial_gap: 0.075,
            closure_time: 0.3,
            shear_time: 0.2,
            tip_offset: 0.005,
            throat_depth: 0.015,
            blade_radius: 0.003,
            slip_speed: 0.12,
            max_crossing_angle: 60f64.to_radians(),
        }
    }
}

impl CutterConfig {
    pub fn gap_at(&self, elapsed: f64) -> f64 {
        (self.initial_gap * (1.0 - elapsed / self.closure_time)).clamp(0.0, self.initial_gap)
    }

    /// Blade and throat capsules in the world frame.
    pub fn capsules(&self, pose: &Isometry3<f64>, gap: f64) -> [ToolCapsule; 3] {
        let h = gap / 2.0;
        let (zb, zt) = (-self.throat_depth, self.tip_offset);
        let w = |x: f64, y: f64, z: f64| pose * nalgebra::Point3::new(x, y, z);
        let cap = |a: nalgebra::Point3<f64>, b: nalgebra::Point3<f64>| ToolCapsule { a: a.coords, b: b.coords, radius: self.blade_radius };
        [
            cap(w(0.0, h, zb), w(0.0, h, zt)),
            cap(w(0.0, -h, zb), w(0.0, -h, zt)),
            cap(w(0.0, -h, zb), w(0.0, h, zb)),
        ]
    }
}

/// A cane segment in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaneSample {
    pub id: SegmentId,
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MissReason {
    /// No cane crossed the jaw when closure started.
    NotInJaw,
    /// The cane left the jaw while the blades were closing.
    LeftJaw,
    /// The cane was moving too fast relative to the blades when they met it.
    Slipped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CutStatus {
    Closing,
    Cut { segment: SegmentId },
    Missed(MissReason),
}

/// Crossing of a cane with the blade plane, in tool coordinates, and the
/// fraction along the cane where it happens.
fn crossing(pose: &Isometry3<f64>, cane: &CaneSample, cos_max: f64) -> Option<(Vec3, f64)> {
    let inv = pose.inverse();
    let a = inv * nalgebra::Point3::from(cane.a);
    let b = inv * nalgebra::Point3::from(cane.b);
    let d = b - a;
    if d.norm() < 1e-12 || d.x.abs() < cos_max * d.norm() {
        return None;
    }
    let s = -a.x / d.x;
    if !(0.0..=1.0).contains(&s) {
        return None;
    }
    Some(((a + d * s).coords, s))
}

/// Blade closure stepped alongside the simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct CutAttempt {
    pub config: CutterConfig,
    pub elapsed: f64,
    target: Option<SegmentId>,
    last: Option<(Vec3, f64)>,
    /// `(elapsed, gap)` when the blades met the cane.
    bite: Option<(f64, f64)>,
    /// Time spent gripping, during which the blades do not advance.
    held: f64,
    /// Fastest the cane moved against the blades while gripped.
    peak_speed: f64,
    /// `(elapsed, gap)` samples, starting with the open gap.
    pub gap_trace: Vec<(f64, f64)>,
    pub status: CutStatus,
}

impl CutAttempt {
    pub fn new(config: CutterConfig) -> Self {
        let g = config.initial_gap;
        Self { config, elapsed: 0.0, target: None, last: None, bite: None, held: 0.0, peak_speed: 0.0, gap_trace: vec![(0.0, g)], status: CutStatus::Closing }
    }

    pub fn gap(&self) -> f64 {
        match self.bite {
            Some((_, g)) => g,
            None => self.config.gap_at(self.elapsed - self.held),
        }
    }

    /// Where the target cane last crossed the blade plane, in tool coordinates.
    pub fn crossing_point(&self) -> Option<Vec3> {
        self.last.map(|(p, _)| p)
    }

    fn in_jaw(&self, c: &Vec3, gap: f64, radius: f64) -> bool {
        c.z >= -self.config.throat_depth && c.z <= self.config.tip_offset && c.y.abs() + radius <= gap / 2.0 + 1e-12
    }

    /// Advances the blades by `dt` with the tool at `pose` and the canes
    /// where they are now.
    pub fn step(&mut self, dt: f64, pose: &Isometry3<f64>, canes: &[CaneSample]) -> CutStatus {
        if self.status != CutStatus::Closing {
            return self.status;
        }
        let cos_max = self.config.max_crossing_angle.cos();
        if self.target.is_none() {
            let open = self.gap();
            let pick = canes
                .iter()
                .filter_map(|c| crossing(pose, c, cos_max).map(|p| (c, p)))
                .filter(|(c, p)| self.in_jaw(&p.0, open, c.radius))
                .min_by(|x, y| x.1 .0.y.abs().total_cmp(&y.1 .0.y.abs()));
            match pick {
                Some((c, p)) => {
                    self.target = Some(c.id);
                    self.last = Some(p);
                }
                None => {
                    self.status = CutStatus::Missed(MissReason::NotInJaw);
                    return self.status;
                }
            }
        }
        let id = self.target.expect("target chosen above");
        self.elapsed += dt;
        if self.bite.is_some() {
            self.held += dt;
        }
        let gap = self.gap();
        self.gap_trace.push((self.elapsed, gap));

        let Some(cane) = canes.iter().find(|c| c.id == id) else {
            self.status = CutStatus::Missed(MissReason::LeftJaw);
            return self.status;
        };
        let Some((p, s)) = crossing(pose, cane, cos_max) else {
            self.status = CutStatus::Missed(MissReason::LeftJaw);
            return self.status;
        };
        if p.z < -self.config.throat_depth || p.z > self.config.tip_offset {
            self.status = CutStatus::Missed(MissReason::LeftJaw);
            return self.status;
        }
        let (prev, prev_s) = self.last.unwrap_or((p, s));
        let along = (s - prev_s) * (cane.b - cane.a).norm();
        let speed = Vec3::new(along, p.y - prev.y, p.z - prev.z).norm() / dt;
        self.last = Some((p, s));
        if self.bite.is_none() && p.y.abs() + cane.radius >= gap / 2.0 {
            self.bite = Some((self.elapsed, gap));
        }
        if let Some((start, _)) = self.bite {
            self.peak_speed = self.peak_speed.max(speed);
            if self.elapsed - start >= self.config.shear_time - 1e-9 {
                self.status = if self.peak_speed > self.config.slip_speed {
                    CutStatus::Missed(MissReason::Slipped)
                } else {
                    CutStatus::Cut { segment: id }
                };
                self.bite = None;
            }
        }
        self.status
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutEvent {
    pub success: bool,
    pub segment: Option<SegmentId>,
    pub miss: Option<MissReason>,
    pub gap_trace: Vec<(f64, f64)>,
    pub duration: f64,
}

/// Closes the blades fully on static canes.
pub fn execute_cut(config: &CutterConfig, pose: &Isometry3<f64>, canes: &[CaneSample], dt: f64) -> CutEvent {
    let mut attempt = CutAttempt::new(config.clone());
    let mut status = CutStatus::Closing;
    while attempt.elapsed - attempt.held < config.closure_time - 1e-12 {
        status = attempt.step(dt, pose, canes);
        if let CutStatus::Missed(_) = status {
            break;
        }
        if let CutStatus::Cut { .. } = status {
            // blades keep closing through the severed cane
            attempt.status = CutStatus::Closing;
            attempt.target = None;
            while attempt.elapsed - attempt.held < config.closure_time - 1e-12 {
                attempt.elapsed = (attempt.elapsed + dt).min(config.closure_time + attempt.held);
                attempt.gap_trace.push((attempt.elapsed, attempt.gap()));
            }
            break;
        }
    }
    let (success, segment, miss) = match status {
        CutStatus::Cut { segment } => (true, Some(segment), None),
        CutStatus::Missed(r) => (false, None, Some(r)),
        CutStatus::Closing => (false, None, Some(MissReason::LeftJaw)),
    };
    CutEvent { success, segment, miss, duration: attempt.elapsed, gap_trace: attempt.gap_trace }
}
