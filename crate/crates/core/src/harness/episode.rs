use std::collections::VecDeque;
use std::io::{self, Write};

use log::{debug, info};
use nalgebra::{Isometry3, Rotation3, Translation3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cut_score, CutLog, HarnessError, MetricsRecord, ScenarioConfig};
use crate::geometry::{closest_param_on_segment, rotation_log, Mat3, Vec3};
use crate::nac::{control_step, ControlState, ForceSample, KinematicFeedback, Matrix6x7, Vector7, CONTROL_PERIOD};
use crate::perception::{cutting_pose, perceive, CutPose, PruningPoint};
use crate::planner::cutter::{CaneSample, CutAttempt, CutStatus, MissReason};
use crate::planner::kinematics::{RobotModel, RobotState, Vector9};
use crate::planner::{plan_to_pose, TrajectoryRow};
use crate::plant_dyn::{scripted_motion, step_dynamics, ContactResult, PlantLogRow, PlantState, PrrChain, VineBody};
use crate::vine_gen::{generate_vine, project_to_raster, CameraModel, SegmentKind, VineSkeleton};

const DT: f64 = CONTROL_PERIOD;
const IMAGE_SIZE: (usize, usize) = (640, 480);

pub const FORCE_LOG_HEADER: &str = "t,f_x,f_y,f_z,f_norm";

/// Contact force on the tool at one control tick.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForceLogRow {
    pub t: f64,
    pub force: Vec3,
}

pub fn write_force_log<W: Write>(rows: &[ForceLogRow], mut out: W) -> io::Result<()> {
    writeln!(out, "{FORCE_LOG_HEADER}")?;
    for r in rows {
        let f = r.force;
        writeln!(out, "{:.2},{:.6},{:.6},{:.6},{:.6}", r.t, f.x, f.y, f.z, f.norm())?;
    }
    out.flush()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeLogs {
    pub trajectory: Vec<TrajectoryRow>,
    pub plant: Vec<PlantLogRow>,
    pub force: Vec<ForceLogRow>,
}

struct Target {
    p1: PruningPoint,
    p2: PruningPoint,
    commanded: CutPose,
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    model: RobotModel,
    robot: RobotState,
    live: VineSkeleton,
    chain: PrrChain,
    camera: CameraModel,
    deviation: PlantState,
    t: f64,
    phase: f64,
    nac: ControlState,
    sensed: Vec3,
    gap: f64,
    q_history: VecDeque<Vec3>,
    window_impulse: f64,
    window_time: f64,
    in_window: bool,
    timed_out: bool,
    logs: EpisodeLogs,
}

fn isometry(r: &Mat3, p: &Vec3) -> Isometry3<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    Isometry3::from_parts(Translation3::from(*p), q)
}

impl Sim<'_> {
    fn plant_now(&self) -> (Vec3, Vec3) {
        let (q, v) = scripted_motion(&self.cfg.motion, self.t + self.phase);
        (q + self.deviation.q, v + self.deviation.v)
    }

    fn body(&self) -> VineBody<'_> {
        VineBody { skeleton: &self.live, chain: self.chain }
    }

    fn to_world(&self, seg: u32, rest: &Vec3, q: &Vec3) -> Vec3 {
        if self.live.jiggle.contains(&seg) { self.chain.transform(q, rest) } else { *rest }
    }

    /// Vine configuration as seen by the tracker, `tracking_latency` behind.
    fn perceived_q(&self) -> Vec3 {
        let lag = (self.cfg.episode.tracking_latency / DT).round() as usize;
        let n = self.q_history.len();
        if n == 0 {
            return self.plant_now().0;
        }
        self.q_history[n - 1 - lag.min(n - 1)]
    }

    fn perceived_pose(&self, target: &Target) -> Result<CutPose, HarnessError> {
        let q = self.perceived_q();
        let moved = |p: &PruningPoint| PruningPoint { position: self.to_world(p.segment_id, &p.position, &q), ..p.clone() };
        Ok(cutting_pose(&moved(&target.p1), &moved(&target.p2), &self.camera)?)
    }

    fn arm_jacobian_world(&self) -> Matrix6x7 {
        self.model.whole_body_jacobian(&self.robot).fixed_columns::<7>(2).into_owned()
    }

    /// Advances robot and vine by one tick with the robot following `q_dot`.
    fn tick(&mut self, q_dot: Vector9) -> Result<ContactResult, HarnessError> {
        let mut next = self.robot.integrate(&q_dot, DT);
        let (lo, hi) = (self.model.q_min(), self.model.q_max());
        for i in 0..7 {
            if next.q_arm[i] < lo[i] || next.q_arm[i] > hi[i] {
                next.q_arm[i] = next.q_arm[i].clamp(lo[i], hi[i]);
                next.q_dot[i + 2] = 0.0;
            }
        }
        self.robot = next;
        let pose = self.model.tool_pose(&self.robot);
        let tool_velocity = (self.model.whole_body_jacobian(&self.robot) * self.robot.q_dot).fixed_rows::<3>(0).into_owned();
        let capsules = self.cfg.cutter.capsules(&pose, self.gap);
        let (q, v) = self.plant_now();
        let plant = PlantState { q, v, t: self.t };
        let contact = self.cfg.contact.tool_contact(&self.body(), &plant, &capsules, &tool_velocity);

        let tr = &self.cfg.trellis;
        let applied = contact.joint_force
            - tr.stiffness.component_mul(&self.deviation.q)
            - tr.damping.component_mul(&self.deviation.v);
        self.deviation = step_dynamics(&self.deviation, &self.cfg.plant, &applied, DT)?;

        let f = contact.force_on_tool;
        if self.in_window {
            self.window_impulse += f.norm() * DT;
            self.window_time += DT;
        }
        self.t += DT;
        self.logs.trajectory.push(TrajectoryRow { t: self.t, state: self.robot.clone(), blade_gap: self.gap });
        self.logs.plant.push(PlantLogRow { t: self.t, q, v, force: f });
        self.logs.force.push(ForceLogRow { t: self.t, force: f });
        self.q_history.push_back(q);
        if self.q_history.len() > 1000 {
            self.q_history.pop_front();
        }
        self.sensed = f;
        if self.t >= self.cfg.episode.timeout {
            self.timed_out = true;
        }
        Ok(contact)
    }

    /// One admittance-controlled tick toward `goal`.
    fn nac_tick(&mut self, goal: &Vec3, goal_rotation: &Mat3) -> Result<(), HarnessError> {
        let jacobian = self.arm_jacobian_world();
        let q_dot: Vector7 = self.robot.q_dot.fixed_rows::<7>(2).into_owned();
        let twist = jacobian * q_dot;
        let r_tool = self.model.tool_rotation(&self.robot);
        let feedback = KinematicFeedback {
            jacobian,
            tool_position: self.model.tool_position(&self.robot),
            tool_velocity: twist.fixed_rows::<3>(0).into_owned(),
            angular_velocity: twist.fixed_rows::<3>(3).into_owned(),
            orientation_error: rotation_log(&(goal_rotation * r_tool.transpose())),
            q_dot,
        };
        let sample = ForceSample { force: self.sensed, t: self.t };
        let (out, state) = control_step(&self.nac, &self.cfg.admittance, &sample, goal, &feedback)?;
        self.nac = state;
        let limits = self.model.velocity_limits();
        let mut cmd = Vector9::zeros();
        for i in 0..7 {
            cmd[i + 2] = out.command[i].clamp(-limits[i + 2], limits[i + 2]);
        }
        self.tick(cmd)?;
        Ok(())
    }

    fn reset_controller(&mut self) {
        self.nac = ControlState {
            filtered_force: self.sensed,
            integrator: self.robot.q_dot.fixed_rows::<7>(2).into_owned(),
            last_command: self.robot.q_dot.fixed_rows::<7>(2).into_owned(),
        };
    }

    /// Tracks the cut pose with the tool `offset` short of it along the approach.
    fn hold(&mut self, target: &Target, duration: f64, offset: impl Fn(f64) -> f64) -> Result<(), HarnessError> {
        let steps = (duration / DT).round() as usize;
        for k in 0..steps {
            if self.timed_out {
                break;
            }
            let pose = self.perceived_pose(target)?;
            let approach = pose.tool_rotation * Vec3::z();
            let goal = pose.translation - approach * offset((k + 1) as f64 * DT);
            self.nac_tick(&goal, &pose.tool_rotation)?;
        }
        Ok(())
    }

    /// Keeps tracking until the tool sits on the tracked cut pose.
    fn await_trigger(&mut self, target: &Target) -> Result<(), HarnessError> {
        let e = &self.cfg.episode;
        let (tol, ang, steps) = (e.trigger_tolerance, e.trigger_angle, (e.max_wait / DT).round() as usize);
        for _ in 0..steps {
            if self.timed_out {
                break;
            }
            let pose = self.perceived_pose(target)?;
            let tool = self.model.tool_pose(&self.robot);
            let r_tool: Mat3 = tool.rotation.to_rotation_matrix().into_inner();
            let dp = (pose.translation - tool.translation.vector).norm();
            let dr = rotation_log(&(pose.tool_rotation * r_tool.transpose())).norm();
            if dp <= tol && dr <= ang {
                break;
            }
            self.nac_tick(&pose.translation, &pose.tool_rotation)?;
        }
        Ok(())
    }

    fn canes_now(&self) -> Vec<CaneSample> {
        let (q, _) = self.plant_now();
        let body = self.body();
        self.live
            .canes()
            .filter_map(|s| body.segment_world(s.id, &q).map(|(a, b)| CaneSample { id: s.id, a, b, radius: s.radius }))
            .collect()
    }

    fn sever(&mut self, id: u32, rest_point: &Vec3) {
        if let Some(seg) = self.live.segments.iter_mut().find(|s| s.id == id) {
            let u = closest_param_on_segment(rest_point, &seg.start, &seg.end);
            seg.end = seg.start + (seg.end - seg.start) * u;
        }
    }

    fn rest_of(&self, seg: u32, world: &Vec3) -> Vec3 {
        if self.live.jiggle.contains(&seg) {
            self.chain.inverse_transform(&self.plant_now().0, world)
        } else {
            *world
        }
    }

    /// Closes the blades once while tracking the cut pose.
    fn close(&mut self, target: &Target) -> Result<(CutStatus, Option<(f64, f64)>), HarnessError> {
        let mut attempt = CutAttempt::new(self.cfg.cutter.clone());
        let mut status = CutStatus::Closing;
        while status == CutStatus::Closing && !self.timed_out {
            let pose = self.perceived_pose(target)?;
            self.nac_tick(&pose.translation, &pose.tool_rotation)?;
            let tool = self.model.tool_pose(&self.robot);
            status = attempt.step(DT, &tool, &self.canes_now());
            self.gap = attempt.gap();
        }
        let CutStatus::Cut { segment } = status else {
            return Ok((status, None));
        };
        let tool = self.model.tool_pose(&self.robot);
        let local = attempt.crossing_point().unwrap_or_else(Vec3::zeros);
        let rest = self.rest_of(segment, &(tool * nalgebra::Point3::from(local)).coords);
        self.sever(segment, &rest);
        let errors = (segment == target.p1.segment_id).then(|| {
            let q = self.plant_now().0;
            let commanded = if self.live.jiggle.contains(&segment) {
                self.chain.rotation(&q) * target.commanded.tool_rotation
            } else {
                target.commanded.tool_rotation
            };
            let r_tool = self.model.tool_rotation(&self.robot);
            let angle = rotation_log(&(r_tool * commanded.transpose())).norm();
            ((rest - target.commanded.translation).norm(), angle)
        });
        Ok((status, errors))
    }

    fn run_target(&mut self, target: &Target) -> Result<CutLog, HarnessError> {
        let e = self.cfg.episode.clone();
        let segment = target.p1.segment_id;
        let mut log = CutLog {
            segment,
            attempts: 0,
            success: false,
            misses: Vec::new(),
            position_error: f64::NAN,
            orientation_error: f64::NAN,
            score: 0.0,
            t_start: self.t,
            t_end: self.t,
        };
        self.in_window = true;
        let pose = self.perceived_pose(target)?;
        let approach = pose.tool_rotation * Vec3::z();
        let goal = isometry(&pose.tool_rotation, &(pose.translation - approach * e.standoff));
        match plan_to_pose(&self.model, &self.robot, &goal, &self.cfg.approach) {
            Ok(traj) => {
                for s in &traj.samples {
                    if self.timed_out {
                        break;
                    }
                    self.tick(s.q_dot)?;
                }
            }
            Err(err) => {
                info!("segment {segment}: approach failed: {err}");
                self.in_window = false;
                log.t_end = self.t;
                return Ok(log);
            }
        }
        self.reset_controller();
        let (ins, standoff) = (e.insertion_time, e.standoff);
        let insert = move |t: f64| {
            let s = (t / ins).min(1.0);
            standoff * (1.0 - s * s * (3.0 - 2.0 * s))
        };
        while !self.timed_out {
            self.hold(target, e.insertion_time + e.settle_time, insert)?;
            if self.timed_out {
                break;
            }
            self.await_trigger(target)?;
            if self.timed_out {
                break;
            }
            log.attempts += 1;
            let (status, errors) = self.close(target)?;
            self.gap = self.cfg.cutter.initial_gap;
            match (status, errors) {
                (CutStatus::Cut { .. }, Some((pos, ang))) => {
                    log.success = true;
                    log.position_error = pos;
                    log.orientation_error = ang;
                    log.score = cut_score(pos, ang);
                    debug!("segment {segment}: cut after {} attempt(s), {:.1} mm", log.attempts, pos * 1e3);
                    break;
                }
                (CutStatus::Cut { segment: other }, None) => {
                    debug!("segment {segment}: blades took segment {other} instead");
                    log.misses.push(MissReason::NotInJaw);
                }
                (CutStatus::Missed(reason), _) => log.misses.push(reason),
                (CutStatus::Closing, _) => break,
            }
            self.hold(target, e.retract_time, |_| standoff)?;
        }
        self.in_window = false;
        log.t_end = self.t;
        if log.success {
            self.hold(target, e.retract_time, |_| standoff)?;
        }
        Ok(log)
    }
}

/// Runs one episode and returns its metrics with the full time series.
pub fn run_scenario_with_logs(config: &ScenarioConfig) -> Result<(MetricsRecord, EpisodeLogs), HarnessError> {
    let cfg = config.seeded();
    cfg.validate()?;
    let vine = generate_vine(&cfg.vine)?;
    let camera = CameraModel::default();
    let image = project_to_raster(&vine, &camera, IMAGE_SIZE.0, IMAGE_SIZE.1)?;
    let seen = perceive(&image, &vine, &camera, &cfg.detector, &cfg.perception)?;
    let targets: Vec<Target> = seen
        .poses
        .iter()
        .map(|p| Target { p1: p.p1.clone(), p2: p.p2.clone(), commanded: p.clone() })
        .collect();

    let pivot = vine.segments.iter().find(|s| s.kind == SegmentKind::Trunk).map_or(Vec3::zeros(), |s| s.end);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let phase = if cfg.episode.phase_span > 0.0 { rng.random_range(0.0..cfg.episode.phase_span) } else { 0.0 };
    let [bx, by, bth] = cfg.episode.start_base_pose;
    let model = RobotModel::default();
    let robot = RobotState::new(Vec3::new(bx, by, bth), Vector7::from(cfg.approach.home_posture));
    let mut sim = Sim {
        cfg: &cfg,
        model,
        robot,
        live: vine.clone(),
        chain: PrrChain { pivot },
        camera,
        deviation: PlantState::default(),
        t: 0.0,
        phase,
        nac: ControlState::default(),
        sensed: Vec3::zeros(),
        gap: cfg.cutter.initial_gap,
        q_history: VecDeque::new(),
        window_impulse: 0.0,
        window_time: 0.0,
        in_window: false,
        timed_out: false,
        logs: EpisodeLogs::default(),
    };

    let mut cuts = Vec::with_capacity(targets.len());
    for target in &targets {
        if sim.timed_out {
            break;
        }
        cuts.push(sim.run_target(target)?);
    }
    let cuts_planned = targets.len();
    let cuts_made = cuts.iter().filter(|c| c.success).count();
    let zero_cut = cuts_planned == 0;
    let accuracy = if zero_cut { 100.0 } else { 100.0 * cuts.iter().map(|c| c.score).sum::<f64>() / cuts_planned as f64 };
    let record = MetricsRecord {
        mode: cfg.motion.kind,
        seed: cfg.rng_seed,
        vine_force_avg: if sim.window_time > 0.0 { sim.window_impulse / sim.window_time } else { 0.0 },
        pruning_time: cuts.last().map_or(0.0, |c| c.t_end),
        pruning_accuracy: accuracy,
        pruning_actions: cuts.iter().map(|c| c.attempts).sum(),
        cuts_planned,
        cuts_made,
        timed_out: sim.timed_out && cuts_made < cuts_planned,
        zero_cut,
        cuts,
    };
    info!(
        "{} seed {}: {} of {} cuts, {} actions, {:.2} s",
        record.mode, record.seed, record.cuts_made, record.cuts_planned, record.pruning_actions, record.pruning_time
    );
    Ok((record, sim.logs))
}
