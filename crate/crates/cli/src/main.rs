use std::fs;
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{error, info, warn};
use nalgebra::{Isometry3, Rotation3, Translation3, UnitQuaternion};

use vineprune::harness::{
    canonical_suite, export_logs, metrics_table, run_scenario_with_logs, run_suite, summarize, summary_text, LogPaths,
    ScenarioConfig,
};
use vineprune::nac::{default_passivity_grid, passivity_check, write_frequency_response, AdmittanceParams};
use vineprune::perception::perceive;
use vineprune::planner::kinematics::{RobotModel, RobotState};
use vineprune::planner::{plan_to_pose, write_trajectory_log};
use vineprune::plant_dyn::{MotionKind, MotionMode};
use vineprune::vine_gen::{generate_vine, project_to_raster, CameraModel, RasterImage, VineSkeleton};

const IMAGE_SIZE: (usize, usize) = (640, 480);

#[derive(Parser, Debug)]
#[command(name = "vineprune", version, about = "Simulated robotic pruning of moving vines")]
struct Cli {
    /// Scenario file (TOML); defaults are used for anything it leaves out.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(short, long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(short, long, global = true, default_value = "out")]
    out: PathBuf,
    /// More output; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a vine skeleton and its raster view.
    Generate,
    /// Detect spurs and estimate pruning points and cut poses.
    Perceive,
    /// Plan approaches to every cut pose on a still vine.
    Plan,
    /// Run one pruning episode and export its logs.
    Run {
        /// Motion mode, e.g. stationary, y-trans, y-rot, z-rot, mixed.
        #[arg(short, long)]
        mode: Option<String>,
    },
    /// Run every motion mode over consecutive seeds.
    Suite {
        #[arg(short = 'n', long, default_value_t = 20)]
        seeds: usize,
        /// Restrict to these modes (comma separated).
        #[arg(short, long, value_delimiter = ',')]
        modes: Vec<String>,
    },
    /// Check positive-realness of the closed-loop admittance.
    Passivity {
        /// Velocity loop gains to test; defaults to the configured one.
        #[arg(short, long, value_delimiter = ',')]
        gains: Vec<f64>,
    },
}

fn load_config(cli: &Cli) -> Result<ScenarioConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ScenarioConfig::from_toml(&text)?
        }
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.rng_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg.seeded())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn scene(cfg: &ScenarioConfig) -> Result<(VineSkeleton, CameraModel, RasterImage)> {
    let vine = generate_vine(&cfg.vine)?;
    let camera = CameraModel::default();
    let image = project_to_raster(&vine, &camera, IMAGE_SIZE.0, IMAGE_SIZE.1)?;
    Ok((vine, camera, image))
}

fn generate(cfg: &ScenarioConfig, out: &Path) -> Result<()> {
    let (vine, _, image) = scene(cfg)?;
    fs::write(out.join("vine.json"), vine.to_json())?;
    image.write_pgm(create(&out.join("vine.pgm"))?)?;
    println!("{} segments, {} spurs, {} canes, {} buds", vine.segments.len(), vine.spurs().count(), vine.canes().count(), vine.buds.len());
    Ok(())
}

fn run_perception(cfg: &ScenarioConfig, out: &Path) -> Result<()> {
    let (vine, camera, image) = scene(cfg)?;
    let seen = perceive(&image, &vine, &camera, &cfg.detector, &cfg.perception)?;
    fs::write(out.join("perception.json"), seen.to_json())?;
    println!("{} detections, {} pruning points, {} cut poses", seen.detections.len(), seen.points.len(), seen.poses.len());
    Ok(())
}

fn plan(cfg: &ScenarioConfig, out: &Path) -> Result<()> {
    let (vine, camera, image) = scene(cfg)?;
    let seen = perceive(&image, &vine, &camera, &cfg.detector, &cfg.perception)?;
    let model = RobotModel::default();
    let [bx, by, bth] = cfg.episode.start_base_pose;
    let mut state = RobotState::new(nalgebra::Vector3::new(bx, by, bth), cfg.approach.home_posture.into());
    let mut rows = Vec::new();
    let mut t = 0.0;
    for (i, pose) in seen.poses.iter().enumerate() {
        let approach = pose.tool_rotation * nalgebra::Vector3::z();
        let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(pose.tool_rotation));
        let goal = Isometry3::from_parts(Translation3::from(pose.translation - approach * cfg.episode.standoff), rotation);
        let traj = plan_to_pose(&model, &state, &goal, &cfg.approach).with_context(|| format!("cut pose {i}"))?;
        println!("cut pose {i}: {} steps, {:.2} s", traj.samples.len(), traj.duration());
        rows.extend(traj.log_rows(t, cfg.cutter.initial_gap));
        t += traj.duration();
        if let Some(end) = traj.final_state() {
            state = end.clone();
        }
    }
    write_trajectory_log(&rows, create(&out.join("trajectory.csv"))?)?;
    Ok(())
}

fn run(cfg: &ScenarioConfig, mode: Option<&str>, out: &Path) -> Result<bool> {
    let mut cfg = cfg.clone();
    if let Some(m) = mode {
        cfg.motion = MotionMode::new(m.parse()?);
    }
    let (record, logs) = run_scenario_with_logs(&cfg)?;
    export_logs(&record, &logs, &LogPaths::in_dir(out))?;
    print!("{}", summary_text(&[record.metrics_row()], 1));
    println!("{} of {} cuts in {} action(s)", record.cuts_made, record.cuts_planned, record.pruning_actions);
    if record.timed_out {
        warn!("episode timed out");
    }
    Ok(!record.timed_out)
}

fn suite(cfg: &ScenarioConfig, seeds: usize, modes: &[String], out: &Path) -> Result<bool> {
    let kinds: Vec<MotionKind> = modes.iter().map(|m| m.parse()).collect::<Result<_, _>>()?;
    let configs: Vec<ScenarioConfig> = canonical_suite(cfg, cfg.rng_seed, seeds)
        .into_iter()
        .filter(|c| kinds.is_empty() || kinds.contains(&c.motion.kind))
        .collect();
    let results = run_suite(&configs)?;
    let mut records = Vec::with_capacity(results.len());
    let mut clean = true;
    for (c, r) in configs.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                error!("{} seed {}: {e}", c.motion.kind, c.rng_seed);
                clean = false;
            }
        }
    }
    let rows = summarize(&records);
    fs::write(out.join("metrics.csv"), metrics_table(&rows))?;
    fs::write(out.join("records.json"), serde_json::to_string_pretty(&records)?)?;
    print!("{}", summary_text(&rows, seeds));
    Ok(clean)
}

fn passivity(cfg: &ScenarioConfig, gains: &[f64], out: &Path) -> Result<bool> {
    let gains = if gains.is_empty() { vec![cfg.admittance.velocity_gain] } else { gains.to_vec() };
    let grid = default_passivity_grid();
    let mut all = true;
    for &g in &gains {
        let params = AdmittanceParams { velocity_gain: g, ..cfg.admittance.clone() };
        let report = passivity_check(&params, &cfg.plant, &grid)?;
        println!(
            "g_v {g}: min Re {:.3e} at {:.3} rad/s, channel {}: {}",
            report.min_real_part,
            report.worst_omega,
            report.worst_channel,
            if report.passing { "passive" } else { "NOT passive" }
        );
        write_frequency_response(&params, &cfg.plant, report.worst_channel, &grid, create(&out.join(format!("admittance_gv{g}.csv")))?)?;
        all &= report.passing;
    }
    Ok(all)
}

fn execute(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    info!("writing to {}", cli.out.display());
    match &cli.command {
        Command::Generate => generate(&cfg, &cli.out).map(|_| true),
        Command::Perceive => run_perception(&cfg, &cli.out).map(|_| true),
        Command::Plan => plan(&cfg, &cli.out).map(|_| true),
        Command::Run { mode } => run(&cfg, mode.as_deref(), &cli.out),
        Command::Suite { seeds, modes } => {
            if *seeds == 0 {
                bail!("need at least one seed");
            }
            suite(&cfg, *seeds, modes, &cli.out)
        }
        Command::Passivity { gains } => passivity(&cfg, gains, &cli.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        (false, 2) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().target(env_logger::Target::Stderr).init();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            error!("{e:#}");
            if e.downcast_ref::<io::Error>().is_some() {
                return ExitCode::from(3);
            }
            ExitCode::FAILURE
        }
    }
}
