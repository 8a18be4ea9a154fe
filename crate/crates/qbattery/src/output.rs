//! CSV and JSON artifacts. Numbers are written with 12 significant digits
//! so repeated runs produce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use qbattery_core::metrics::Trajectory;
use qbattery_core::rl::{EpisodeLog, Evaluation};
use serde::Serialize;

use crate::error::{Result, RunError};

pub fn fmt_num(x: f64) -> String {
    format!("{x:.11e}")
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let file = fs::File::create(path).map_err(|e| RunError::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(file))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| RunError::io(path, e))
}

/// `t,E,P,logneg,trace_err,top_fock_pop,n_photon[,pop_0,…]`.
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = writer(path)?;
    let mut header: Vec<String> =
        ["t", "E", "P", "logneg", "trace_err", "top_fock_pop", "n_photon"].iter().map(|s| s.to_string()).collect();
    let n_pop = traj.populations.as_ref().and_then(|p| p.first()).map_or(0, |p| p.len());
    header.extend((0..n_pop).map(|k| format!("pop_{k}")));
    w.write_record(&header)?;
    for k in 0..traj.len() {
        let mut row = vec![
            fmt_num(traj.times[k]),
            fmt_num(traj.energy[k]),
            fmt_num(traj.power[k]),
            fmt_num(traj.logneg[k]),
            fmt_num(traj.trace_error[k]),
            fmt_num(traj.top_fock_pop[k]),
            fmt_num(traj.photons[k]),
        ];
        if let Some(pops) = &traj.populations {
            row.extend(pops[k].iter().map(|&p| fmt_num(p)));
        }
        w.write_record(&row)?;
    }
    finish(w, path)
}

/// Piecewise-constant schedule as `t,g` rows, one per interval start.
pub fn write_schedule(path: &Path, times: &[f64], couplings: &[f64]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["t", "g"])?;
    for (t, g) in times.iter().zip(couplings) {
        w.write_record([fmt_num(*t), fmt_num(*g)])?;
    }
    finish(w, path)
}

/// Greedy rollout next to the constant-coupling baseline on the same grid.
pub fn write_comparison(path: &Path, optimized: &Evaluation, baseline: &Evaluation) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["t", "E_optimized", "P_optimized", "E_baseline", "P_baseline"])?;
    for k in 0..optimized.times.len().min(baseline.times.len()) {
        w.write_record([
            fmt_num(optimized.times[k]),
            fmt_num(optimized.energy[k]),
            fmt_num(optimized.power[k]),
            fmt_num(baseline.energy[k]),
            fmt_num(baseline.power[k]),
        ])?;
    }
    finish(w, path)
}

/// Rows of `label,value` cells: first column the row-axis value, remaining
/// columns one per column-axis value.
pub fn write_grid(path: &Path, corner: &str, rows: &[f64], cols: &[f64], values: &[f64]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec![corner.to_string()];
    header.extend(cols.iter().map(|&c| fmt_num(c)));
    w.write_record(&header)?;
    for (r, chunk) in rows.iter().zip(values.chunks(cols.len().max(1))) {
        let mut row = vec![fmt_num(*r)];
        row.extend(chunk.iter().map(|&v| fmt_num(v)));
        w.write_record(&row)?;
    }
    finish(w, path)
}

/// Long-form table with a header.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|&v| fmt_num(v)))?;
    }
    finish(w, path)
}

/// Append-only training log.
pub struct TrainingLog {
    path: PathBuf,
    w: csv::Writer<fs::File>,
}

impl TrainingLog {
    pub const HEADER: [&'static str; 10] =
        ["step", "episode", "return", "final_E", "final_P", "alpha", "critic_loss", "actor_loss", "w_E", "entropy_target"];

    /// Create, or append to an existing log when resuming.
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        if let Some(parent) = path.parent() {
            ensure_dir(parent)?;
        }
        let existed = path.exists();
        let file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| RunError::io(path, e))?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if !(append && existed) {
            w.write_record(Self::HEADER)?;
        }
        Ok(TrainingLog { path: path.to_path_buf(), w })
    }

    pub fn push(&mut self, l: &EpisodeLog) -> Result<()> {
        self.w.write_record([
            l.step.to_string(),
            l.episode.to_string(),
            fmt_num(l.episode_return),
            fmt_num(l.final_energy),
            fmt_num(l.final_power),
            fmt_num(l.alpha),
            fmt_num(l.critic_loss),
            fmt_num(l.actor_loss),
            fmt_num(l.w_energy),
            fmt_num(l.entropy_target),
        ])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.w.flush().map_err(|e| RunError::io(&self.path, e))
    }
}

/// Everything needed to re-run an experiment without its command line.
#[derive(Serialize)]
pub struct Manifest<'a, C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub mode: &'static str,
    pub seed: u64,
    pub config: &'a C,
    pub outputs: Vec<String>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| RunError::Config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| RunError::io(path, e))
}

/// Wall-clock time goes to its own file so every other artifact stays
/// byte-identical across repeated runs.
pub fn write_timing(dir: &Path, seconds: f64) -> Result<()> {
    write_json(&dir.join("timing.json"), &serde_json::json!({ "wall_time_s": seconds }))
}
