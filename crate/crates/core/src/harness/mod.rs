//! Closed-loop pruning episodes and scenario suites.
//!
//! An episode generates a vine, perceives its pruning points, and for every
//! cut pose plans an approach, inserts the open cutter under admittance
//! control while the vine moves, and closes the blades, retrying until the
//! cane is severed or the episode times out. Absolute force and time values
//! depend on the simulated hardware; the mode ordering is what carries over.

mod episode;

pub use episode::{run_scenario_with_logs, EpisodeLogs, ForceLogRow, FORCE_LOG_HEADER};

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::nac::{AdmittanceParams, NacError};
use crate::perception::{DetectorNoise, PerceptionConfig, PerceptionError};
use crate::planner::cutter::{CutterConfig, MissReason};
use crate::planner::{write_trajectory_log, ApproachConfig, PlannerError};
use crate::plant_dyn::{write_plant_log, ContactModel, MotionKind, MotionMode, PlantError, PlantParams};
use crate::vine_gen::{SegmentId, VineError, VineSpec};

pub const METRICS_HEADER: &str = "mode,vine_force_N,pruning_time_s,accuracy_pct,actions";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Vine(#[from] VineError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Nac(#[from] NacError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("no scenarios to run")]
    EmptySuite,
    #[error("cannot parse metrics: {0}")]
    Parse(String),
}

/// Spring and damper holding the moving vine parts to their scripted path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrellisParams {
    pub stiffness: Vec3,
    pub damping: Vec3,
}

impl Default for TrellisParams {
    fn default() -> Self {
        Self { stiffness: Vec3::new(300.0, 30.0, 30.0), damping: Vec3::new(12.0, 1.2, 1.2) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub timeout: f64,
    /// Delay of the tracked cut pose behind the true vine state (s).
    pub tracking_latency: f64,
    /// Time to move from the standoff point onto the cane (s).
    pub insertion_time: f64,
    /// Wait on the cane before the blades close (s).
    pub settle_time: f64,
    pub retract_time: f64,
    /// The blades close once the tracked cut pose is this close to the tool (m).
    pub trigger_tolerance: f64,
    pub trigger_angle: f64,
    /// Longest wait for the trigger before closing anyway (s).
    pub max_wait: f64,
    /// Distance short of the cane where approaches end (m).
    pub standoff: f64,
    /// Starting platform pose `(x, y, heading)`.
    pub start_base_pose: [f64; 3],
    /// Span of the random start phase of the vine motion (s).
    pub phase_span: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            timeout: 120.0,
            tracking_latency: 0.1,
            insertion_time: 1.0,
            settle_time: 0.5,
            retract_time: 0.6,
            trigger_tolerance: 0.003,
            trigger_angle: 3f64.to_radians(),
            max_wait: 2.0,
            standoff: crate::planner::DEFAULT_STANDOFF,
            start_base_pose: [-1.25, 0.0, 0.0],
            phase_span: 2.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Seeds the vine, the detector, the clustering and the motion phase.
    pub rng_seed: u64,
    pub vine: VineSpec,
    pub motion: MotionMode,
    pub plant: PlantParams,
    pub trellis: TrellisParams,
    pub contact: ContactModel,
    pub admittance: AdmittanceParams,
    pub approach: ApproachConfig,
    pub cutter: CutterConfig,
    pub perception: PerceptionConfig,
    pub detector: DetectorNoise,
    pub episode: EpisodeConfig,
}

impl ScenarioConfig {
    pub fn for_mode(kind: MotionKind) -> Self {
        Self { motion: MotionMode::new(kind), ..Self::default() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let e = &self.episode;
        if !(e.timeout > 0.0 && e.timeout.is_finite()) {
            return Err(HarnessError::Config(format!("timeout must be positive, got {}", e.timeout)));
        }
        let times = [
            e.tracking_latency,
            e.insertion_time,
            e.settle_time,
            e.retract_time,
            e.trigger_tolerance,
            e.trigger_angle,
            e.max_wait,
            e.standoff,
            e.phase_span,
        ];
        if times.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(HarnessError::Config("episode timings and standoff must be finite and non-negative".into()));
        }
        if !(e.insertion_time > 0.0) {
            return Err(HarnessError::Config("insertion time must be positive".into()));
        }
        let t = &self.trellis;
        if t.stiffness.iter().chain(t.damping.iter()).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(HarnessError::Config("trellis gains must be finite and non-negative".into()));
        }
        if !(self.contact.stiffness > 0.0 && self.contact.impact_damping >= 0.0 && self.contact.friction >= 0.0) {
            return Err(HarnessError::Config("contact stiffness must be positive".into()));
        }
        let c = &self.cutter;
        if !(c.initial_gap > 0.0 && c.closure_time > 0.0 && c.shear_time >= 0.0 && c.throat_depth >= 0.0 && c.slip_speed >= 0.0) {
            return Err(HarnessError::Config("cutter dimensions must be positive".into()));
        }
        if !(self.approach.dt > 0.0 && (self.approach.dt - crate::nac::CONTROL_PERIOD).abs() < 1e-12) {
            return Err(HarnessError::Config("planner step must equal the 10 ms control period".into()));
        }
        self.vine.validate()?;
        self.motion.validate()?;
        self.plant.validate()?;
        self.admittance.validate()?;
        self.perception.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    /// Copy with every nested seed derived from `rng_seed`.
    pub fn seeded(&self) -> Self {
        let mut out = self.clone();
        out.vine.rng_seed = self.rng_seed;
        out.detector.seed = self.rng_seed;
        out.perception.seed = self.rng_seed;
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutLog {
    pub segment: SegmentId,
    pub attempts: usize,
    pub success: bool,
    pub misses: Vec<MissReason>,
    /// Distance of the cut from the commanded cut point along the vine (m).
    pub position_error: f64,
    /// Angle between the achieved and commanded cutter orientation (rad).
    pub orientation_error: f64,
    /// Conformity in [0, 1].
    pub score: f64,
    pub t_start: f64,
    pub t_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub mode: MotionKind,
    pub seed: u64,
    /// Mean contact force magnitude over the approach-to-cut windows (N).
    pub vine_force_avg: f64,
    pub pruning_time: f64,
    pub pruning_accuracy: f64,
    pub pruning_actions: usize,
    pub cuts_planned: usize,
    pub cuts_made: usize,
    pub timed_out: bool,
    /// No cut pose was found; accuracy is reported as 100.
    pub zero_cut: bool,
    pub cuts: Vec<CutLog>,
}

impl MetricsRecord {
    pub fn actions_per_cut(&self) -> f64 {
        if self.cuts_planned == 0 { 0.0 } else { self.pruning_actions as f64 / self.cuts_planned as f64 }
    }

    pub fn metrics_row(&self) -> MetricsRow {
        MetricsRow {
            mode: self.mode,
            vine_force: self.vine_force_avg,
            pruning_time: self.pruning_time,
            accuracy: self.pruning_accuracy,
            actions: self.pruning_actions as f64,
        }
    }
}

/// Conformity of a cut: 1 within 5 mm and 10 degrees, falling linearly to 0
/// at 20 mm or 45 degrees.
pub fn cut_score(position_error: f64, orientation_error: f64) -> f64 {
    let ramp = |e: f64, full: f64, zero: f64| ((zero - e) / (zero - full)).clamp(0.0, 1.0);
    ramp(position_error, 0.005, 0.020).min(ramp(orientation_error, 10f64.to_radians(), 45f64.to_radians()))
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<MetricsRecord, HarnessError> {
    run_scenario_with_logs(config).map(|(r, _)| r)
}

/// Runs every scenario in parallel; results keep the input order.
pub fn run_suite(configs: &[ScenarioConfig]) -> Result<Vec<Result<MetricsRecord, HarnessError>>, HarnessError> {
    if configs.is_empty() {
        return Err(HarnessError::EmptySuite);
    }
    Ok(configs.par_iter().map(run_scenario).collect())
}

/// The five motion modes over `seeds` consecutive seeds from `first_seed`.
pub fn canonical_suite(base: &ScenarioConfig, first_seed: u64, seeds: usize) -> Vec<ScenarioConfig> {
    MotionKind::ALL
        .iter()
        .flat_map(|&kind| {
            (0..seeds as u64).map(move |s| ScenarioConfig {
                motion: MotionMode::new(kind),
                rng_seed: first_seed + s,
                ..base.clone()
            })
        })
        .collect()
}

/// One line of the metrics table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub mode: MotionKind,
    pub vine_force: f64,
    pub pruning_time: f64,
    pub accuracy: f64,
    pub actions: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.5},{:.2},{:.2},{:.2}",
            self.mode.label(),
            self.vine_force,
            self.pruning_time,
            self.accuracy,
            self.actions
        )
    }

    pub fn parse(line: &str) -> Result<Self, HarnessError> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 5 {
            return Err(HarnessError::Parse(format!("expected 5 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| HarnessError::Parse(format!("'{s}': {e}")));
        Ok(Self {
            mode: f[0].parse().map_err(|e: PlantError| HarnessError::Parse(e.to_string()))?,
            vine_force: num(f[1])?,
            pruning_time: num(f[2])?,
            accuracy: num(f[3])?,
            actions: num(f[4])?,
        })
    }
}

/// Per-mode means of successful records, in motion-mode order.
pub fn summarize(records: &[MetricsRecord]) -> Vec<MetricsRow> {
    MotionKind::ALL
        .iter()
        .filter_map(|&kind| {
            let rs: Vec<&MetricsRecord> = records.iter().filter(|r| r.mode == kind).collect();
            if rs.is_empty() {
                return None;
            }
            let n = rs.len() as f64;
            let mean = |f: &dyn Fn(&MetricsRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            Some(MetricsRow {
                mode: kind,
                vine_force: mean(&|r| r.vine_force_avg),
                pruning_time: mean(&|r| r.pruning_time),
                accuracy: mean(&|r| r.pruning_accuracy),
                actions: mean(&|r| r.pruning_actions as f64),
            })
        })
        .collect()
}

pub fn metrics_table(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn parse_metrics_table(text: &str) -> Result<Vec<MetricsRow>, HarnessError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        other => return Err(HarnessError::Parse(format!("bad header {other:?}"))),
    }
    lines.map(MetricsRow::parse).collect()
}

/// Table laid out for reading.
pub fn summary_text(rows: &[MetricsRow], seeds: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Pruning scenarios ({seeds} seed(s) per mode)");
    let _ = writeln!(out, "{:<12}{:>14}{:>18}{:>16}{:>12}", "Mode", "Vine force (N)", "Pruning time (s)", "Accuracy (%)", "Actions");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<12}{:>14.5}{:>18.2}{:>16.2}{:>12.2}",
            r.mode.label(),
            r.vine_force,
            r.pruning_time,
            r.accuracy,
            r.actions
        );
    }
    out
}

/// Files written by [`export_logs`].
#[derive(Clone, Debug, PartialEq)]
pub struct LogPaths {
    pub trajectory: PathBuf,
    pub plant: PathBuf,
    pub force: PathBuf,
    pub metrics: PathBuf,
    pub cuts: PathBuf,
}

impl LogPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            trajectory: dir.join("trajectory.csv"),
            plant: dir.join("plant.csv"),
            force: dir.join("force.csv"),
            metrics: dir.join("metrics.csv"),
            cuts: dir.join("cuts.json"),
        }
    }
}

pub fn export_logs(record: &MetricsRecord, logs: &EpisodeLogs, paths: &LogPaths) -> Result<(), HarnessError> {
    for p in [&paths.trajectory, &paths.plant, &paths.force, &paths.metrics, &paths.cuts] {
        if let Some(dir) = p.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
    }
    write_trajectory_log(&logs.trajectory, io::BufWriter::new(fs::File::create(&paths.trajectory)?))?;
    write_plant_log(&logs.plant, io::BufWriter::new(fs::File::create(&paths.plant)?))?;
    episode::write_force_log(&logs.force, io::BufWriter::new(fs::File::create(&paths.force)?))?;
    fs::write(&paths.metrics, metrics_table(&[record.metrics_row()]))?;
    fs::write(&paths.cuts, serde_json::to_string_pretty(&record.cuts).expect("cut logs serialize"))?;
    Ok(())
}
