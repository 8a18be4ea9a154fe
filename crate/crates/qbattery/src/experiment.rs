//! Single runs, parameter sweeps, training campaigns and policy evaluation,
//! each writing its artifacts under the configured output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use qbattery_core::approx::Mlp;
use qbattery_core::dynamics::{evolve_trajectory, ChargingSystem, CouplingSchedule};
use qbattery_core::metrics::{find_power_peak, steady_window_stats, PowerPeak, Trajectory, WindowStats};
use qbattery_core::rl::{evaluate_with, AgentState, ChargingEnv, Evaluation, TrainEvent, Trainer};
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Mode};
use crate::error::{Result, RunError};
use crate::output::{self, fmt_num, Manifest, TrainingLog};

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Charge => "charge",
        Mode::Sweep => "sweep",
        Mode::Train => "train",
        Mode::Evaluate => "evaluate",
    }
}

/// The output directory is left out of the recorded config: the manifest lives
/// in it, and runs that differ only in location should match byte for byte.
fn write_manifest(cfg: &ExperimentConfig, outputs: &[&str]) -> Result<()> {
    let mut config = serde_json::to_value(cfg).map_err(|e| RunError::Config(e.to_string()))?;
    if let Some(map) = config.as_object_mut() {
        map.remove("output_dir");
    }
    let m = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        mode: mode_name(cfg.mode),
        seed: cfg.seed,
        config: &config,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    output::write_json(&cfg.output_dir.join("manifest.json"), &m)
}

/// Integrate one charging protocol.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Trajectory> {
    let system = ChargingSystem::new(&cfg.model)?;
    let schedule = cfg.schedule.build(cfg.horizon)?;
    let spec = cfg.evolution();
    let times = spec.sample_times(cfg.horizon);
    Ok(evolve_trajectory(&system, &schedule, &cfg.dissipator, &spec, &times)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChargeSummary {
    pub max_energy: f64,
    pub final_energy: f64,
    pub power_peak: Option<PowerPeak>,
    pub steady_window: (f64, f64),
    pub steady: WindowStats,
}

pub fn summarize(traj: &Trajectory, steady_fraction: f64) -> Result<ChargeSummary> {
    let (first, last) = match (traj.times.first(), traj.times.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(RunError::Config("empty trajectory".into())),
    };
    let window = (last - steady_fraction * (last - first), last);
    Ok(ChargeSummary {
        max_energy: traj.energy.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        final_energy: *traj.energy.last().expect("nonempty trajectory"),
        power_peak: find_power_peak(traj).ok(),
        steady_window: window,
        steady: steady_window_stats(traj, window)?,
    })
}

pub struct ChargeOutput {
    pub trajectory: Trajectory,
    pub summary: ChargeSummary,
}

/// `charge`: trajectory CSV, summary and manifest.
pub fn run_charging(cfg: &ExperimentConfig) -> Result<ChargeOutput> {
    let start = Instant::now();
    let dir = &cfg.output_dir;
    output::ensure_dir(dir)?;
    let trajectory = simulate(cfg)?;
    let summary = summarize(&trajectory, cfg.sweep.steady_fraction)?;
    output::write_trajectory(&dir.join("trajectory.csv"), &trajectory)?;
    output::write_json(&dir.join("summary.json"), &summary)?;
    write_manifest(cfg, &["trajectory.csv", "summary.json"])?;
    output::write_timing(dir, start.elapsed().as_secs_f64())?;
    Ok(ChargeOutput { trajectory, summary })
}

/// Per-cell results of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub coords: Vec<f64>,
    pub e_peak: f64,
    pub p_max: f64,
    pub logneg_peak: f64,
    pub t_peak: f64,
    pub e_steady: f64,
    pub e_steady_std: f64,
    pub logneg_steady: f64,
}

const CELL_QUANTITIES: [&str; 7] = ["E_peak", "P_max", "logneg_peak", "t_peak", "E_steady", "E_steady_std", "logneg_steady"];

impl CellResult {
    fn values(&self) -> [f64; 7] {
        [self.e_peak, self.p_max, self.logneg_peak, self.t_peak, self.e_steady, self.e_steady_std, self.logneg_steady]
    }
}

fn run_cell(cell: &ExperimentConfig, coords: Vec<f64>, steady_fraction: f64) -> Result<CellResult> {
    let traj = simulate(cell)?;
    let s = summarize(&traj, steady_fraction)?;
    let peak = s.power_peak.unwrap_or(PowerPeak { t_peak: f64::NAN, p_max: f64::NAN, e_at_peak: f64::NAN, logneg_at_peak: f64::NAN });
    Ok(CellResult {
        coords,
        e_peak: peak.e_at_peak,
        p_max: peak.p_max,
        logneg_peak: peak.logneg_at_peak,
        t_peak: peak.t_peak,
        e_steady: s.steady.mean_energy,
        e_steady_std: s.steady.std_energy,
        logneg_steady: s.steady.mean_logneg,
    })
}

/// `sweep`: every cell is an independent charging run. Results do not
/// depend on the thread count or completion order.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<CellResult>> {
    let start = Instant::now();
    let dir = &cfg.output_dir;
    output::ensure_dir(dir)?;
    let axes = &cfg.sweep.axes;
    let grids: Vec<Vec<f64>> = axes.iter().map(|a| a.values.values()).collect();
    let cells = cfg.sweep_cells()?;
    let coords: Vec<Vec<f64>> = match grids.len() {
        1 => grids[0].iter().map(|&x| vec![x]).collect(),
        _ => grids[0].iter().flat_map(|&x| grids[1].iter().map(move |&y| vec![x, y])).collect(),
    };
    let fraction = cfg.sweep.steady_fraction;
    let work = || -> Result<Vec<CellResult>> {
        cells.par_iter().zip(coords.par_iter()).map(|(c, xy)| run_cell(c, xy.clone(), fraction)).collect()
    };
    let results = if cfg.sweep.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.sweep.threads)
            .build()
            .map_err(|e| RunError::Config(e.to_string()))?
            .install(work)?
    } else {
        work()?
    };

    let mut outputs = vec!["cells.csv".to_string()];
    let mut header: Vec<&str> = axes.iter().map(|a| a.param.name()).collect();
    header.extend(CELL_QUANTITIES);
    let rows: Vec<Vec<f64>> = results.iter().map(|r| r.coords.iter().copied().chain(r.values()).collect()).collect();
    output::write_table(&dir.join("cells.csv"), &header, &rows)?;
    for (q, name) in CELL_QUANTITIES.iter().enumerate() {
        let file = format!("{name}.csv");
        let values: Vec<f64> = results.iter().map(|r| r.values()[q]).collect();
        if grids.len() == 2 {
            let corner = format!("{}\\{}", axes[0].param.name(), axes[1].param.name());
            output::write_grid(&dir.join(&file), &corner, &grids[0], &grids[1], &values)?;
        } else {
            let rows: Vec<Vec<f64>> = grids[0].iter().zip(&values).map(|(&x, &v)| vec![x, v]).collect();
            output::write_table(&dir.join(&file), &[axes[0].param.name(), name], &rows)?;
        }
        outputs.push(file);
    }
    let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    write_manifest(cfg, &refs)?;
    output::write_timing(dir, start.elapsed().as_secs_f64())?;
    Ok(results)
}

/// Dynamics-module trajectory of a per-interval schedule on the episode grid.
fn rollout_trajectory(cfg: &ExperimentConfig, system: &ChargingSystem, ev: &Evaluation) -> Result<Trajectory> {
    let episode = &cfg.rl.episode;
    let knots: Vec<(f64, f64)> = ev.times.iter().zip(&ev.couplings).map(|(&t, &g)| (t, g)).collect();
    let schedule = CouplingSchedule::new(knots, episode.horizon)?;
    Ok(evolve_trajectory(system, &schedule, &episode.mode.dissipator(), &episode.evolution(), &ev.times)?)
}

/// Greedy rollout with a fixed policy network.
fn greedy_with(env: &mut ChargingEnv, policy: &Mlp) -> Result<Evaluation> {
    Ok(evaluate_with(env, |obs| {
        let out = policy.predict(obs, 1)?;
        Ok(out[0].tanh())
    })?)
}

/// Constant `g = 1` on the episode grid.
pub fn baseline_rollout(env: &mut ChargingEnv) -> Result<Evaluation> {
    Ok(evaluate_with(env, |_| Ok(1.0))?)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub episodes: u64,
    pub best_episode: Option<u64>,
    pub best_final_energy: Option<f64>,
    pub greedy_final_energy: f64,
    pub baseline_final_energy: f64,
    pub baseline_steady_mean: f64,
    pub baseline_max_energy: f64,
}

pub struct TrainOutput {
    pub summary: TrainSummary,
    pub best: Option<Evaluation>,
}

fn checkpoint_path(dir: &Path, episodes: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("episode_{episodes:07}.json"))
}

fn capture(cfg: &ExperimentConfig, t: &Trainer) -> Checkpoint {
    let best = t.best_evaluation().map(|(e, _)| *e).zip(t.best_policy());
    Checkpoint::capture(&t.agent, cfg.seed, &cfg.model, &cfg.rl.episode, &cfg.rl.sac, t.episodes(), best)
}

fn check_compatible(cfg: &ExperimentConfig, ck: &Checkpoint, path: &Path) -> Result<()> {
    if ck.model != cfg.model {
        return Err(RunError::checkpoint(path, "model parameters differ from the configuration"));
    }
    if ck.episode.observation_mode != cfg.rl.episode.observation_mode {
        return Err(RunError::checkpoint(path, "observation mode differs from the configuration"));
    }
    if ck.sac.hidden != cfg.rl.sac.hidden {
        return Err(RunError::checkpoint(path, "network widths differ from the configuration"));
    }
    Ok(())
}

/// `train`: training log, evaluations, periodic checkpoints, the learned
/// schedule and an optimized-vs-baseline comparison.
pub fn run_training(cfg: &ExperimentConfig) -> Result<TrainOutput> {
    let start = Instant::now();
    let dir = cfg.output_dir.clone();
    output::ensure_dir(&dir)?;
    let system = ChargingSystem::new(&cfg.model)?;
    let spec = &cfg.rl.episode;
    let hp = &cfg.rl.sac;

    let (mut trainer, resumed) = match &cfg.rl.resume_from {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            check_compatible(cfg, &ck, path)?;
            let obs_dim = spec.observation_dim(system.total_dim());
            let agent = ck.restore_agent(hp, obs_dim, path)?;
            let mut t = Trainer::resume(system.clone(), spec, hp, agent)?;
            t.set_episodes(ck.episodes);
            if let Some((ep, policy)) = ck.best_policy(path)? {
                t.restore_best(ep, policy)?;
            }
            (t, true)
        }
        None => (Trainer::new(&cfg.model, spec, hp, cfg.seed)?, false),
    };

    let mut log = TrainingLog::open(&dir.join("training_log.csv"), resumed)?;
    let mut evals: Vec<Vec<f64>> = Vec::new();
    let every = cfg.rl.checkpoint_every_episodes;
    let mut io_error: Option<RunError> = None;
    while trainer.agent.step < hp.total_steps {
        let before = trainer.episodes();
        let res = trainer.step(&mut |e: TrainEvent<'_>| {
            let r = match e {
                TrainEvent::Episode(l) => log.push(l),
                TrainEvent::Evaluation { episode, step, evaluation, best } => {
                    evals.push(vec![
                        episode as f64,
                        step as f64,
                        evaluation.final_energy,
                        evaluation.final_power,
                        if best { 1.0 } else { 0.0 },
                    ]);
                    Ok(())
                }
            };
            if let Err(err) = r {
                io_error = Some(err);
            }
            Ok(())
        });
        if let Some(err) = io_error.take() {
            return Err(err);
        }
        if let Err(err) = res {
            log.flush()?;
            capture(cfg, &trainer).save(&dir.join("checkpoints").join("abort.json"))?;
            return Err(err.into());
        }
        let now = trainer.episodes();
        if every > 0 && now != before && now % every == 0 {
            log.flush()?;
            capture(cfg, &trainer).save(&checkpoint_path(&dir, now))?;
        }
    }
    log.flush()?;
    capture(cfg, &trainer).save(&dir.join("checkpoints").join("final.json"))?;
    output::write_table(&dir.join("evaluations.csv"), &["episode", "step", "final_E", "final_P", "best"], &evals)?;

    // Learned schedule: best snapshot when there is one, else the current policy.
    let mut env = ChargingEnv::with_system(system.clone(), spec)?;
    let policy = trainer.best_policy().cloned().unwrap_or_else(|| trainer.agent.policy.clone());
    let greedy = greedy_with(&mut env, &policy)?;
    let baseline = baseline_rollout(&mut env)?;
    let ev_times = &greedy.times[..greedy.couplings.len()];
    output::write_schedule(&dir.join("schedule.csv"), ev_times, &greedy.couplings)?;
    output::write_comparison(&dir.join("comparison.csv"), &greedy, &baseline)?;
    output::write_trajectory(&dir.join("trajectory_optimized.csv"), &rollout_trajectory(cfg, &system, &greedy)?)?;

    let base_traj = {
        let sched = CouplingSchedule::constant(1.0, spec.horizon)?;
        let evo = spec.evolution();
        evolve_trajectory(&system, &sched, &spec.mode.dissipator(), &evo, &evo.sample_times(spec.horizon))?
    };
    output::write_trajectory(&dir.join("trajectory_baseline.csv"), &base_traj)?;
    let base_summary = summarize(&base_traj, cfg.sweep.steady_fraction)?;
    let summary = TrainSummary {
        steps: trainer.agent.step,
        episodes: trainer.episodes(),
        best_episode: trainer.best_evaluation().map(|b| b.0),
        best_final_energy: trainer.best_evaluation().map(|b| b.1.final_energy),
        greedy_final_energy: greedy.final_energy,
        baseline_final_energy: baseline.final_energy,
        baseline_steady_mean: base_summary.steady.mean_energy,
        baseline_max_energy: base_summary.max_energy,
    };
    output::write_json(&dir.join("summary.json"), &summary)?;
    write_manifest(
        cfg,
        &[
            "training_log.csv",
            "evaluations.csv",
            "checkpoints/",
            "schedule.csv",
            "comparison.csv",
            "trajectory_optimized.csv",
            "trajectory_baseline.csv",
            "summary.json",
        ],
    )?;
    output::write_timing(&dir, start.elapsed().as_secs_f64())?;
    Ok(TrainOutput { summary, best: trainer.best_evaluation().map(|b| b.1.clone()) })
}

/// Restore an agent from the configured checkpoint.
pub fn load_agent(cfg: &ExperimentConfig) -> Result<(Checkpoint, AgentState)> {
    let path = cfg.rl.checkpoint.as_ref().ok_or_else(|| RunError::Config("rl.checkpoint is not set".into()))?;
    let ck = Checkpoint::load(path)?;
    check_compatible(cfg, &ck, path)?;
    let system_dim = qbattery_core::hilbert::ModelConfig::basis(&cfg.model).total_dim();
    let agent = ck.restore_agent(&cfg.rl.sac, cfg.rl.episode.observation_dim(system_dim), path)?;
    Ok((ck, agent))
}

/// `evaluate`: deterministic rollout with `tanh(mean)` actions of the best
/// stored policy (the current one if the checkpoint holds no best).
pub fn evaluate_policy(cfg: &ExperimentConfig) -> Result<Evaluation> {
    let start = Instant::now();
    let dir = &cfg.output_dir;
    output::ensure_dir(dir)?;
    let (ck, agent) = load_agent(cfg)?;
    let path = cfg.rl.checkpoint.as_ref().expect("checked by load_agent");
    let policy = ck.best_policy(path)?.map(|(_, m)| m).unwrap_or(agent.policy);
    let system = ChargingSystem::new(&cfg.model)?;
    let mut env = ChargingEnv::with_system(system.clone(), &cfg.rl.episode)?;
    let ev = greedy_with(&mut env, &policy)?;
    output::write_schedule(&dir.join("schedule.csv"), &ev.times[..ev.couplings.len()], &ev.couplings)?;
    output::write_trajectory(&dir.join("trajectory.csv"), &rollout_trajectory(cfg, &system, &ev)?)?;
    output::write_json(
        &dir.join("summary.json"),
        &serde_json::json!({
            "final_energy": fmt_num(ev.final_energy),
            "final_power": fmt_num(ev.final_power),
        }),
    )?;
    write_manifest(cfg, &["schedule.csv", "trajectory.csv", "summary.json"])?;
    output::write_timing(dir, start.elapsed().as_secs_f64())?;
    Ok(ev)
}

/// Dispatch on `cfg.mode`.
pub fn run(cfg: &ExperimentConfig) -> Result<()> {
    match cfg.mode {
        Mode::Charge => run_charging(cfg).map(|_| ()),
        Mode::Sweep => run_sweep(cfg).map(|_| ()),
        Mode::Train => run_training(cfg).map(|_| ()),
        Mode::Evaluate => evaluate_policy(cfg).map(|_| ()),
    }
}
