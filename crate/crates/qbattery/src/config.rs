//! Experiment configuration: one JSON document per run.

use std::path::{Path, PathBuf};

use qbattery_core::dynamics::{CouplingSchedule, DissipatorSpec, EvolutionSpec};
use qbattery_core::hilbert::{ModelConfig, Spin};
use qbattery_core::rl::{EpisodeSpec, SacHyperparams};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, RunError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Charge,
    Sweep,
    Train,
    Evaluate,
}

/// Coupling protocol of a charging run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    Constant(f64),
    /// `(t_start, g)` knots; the first starts at 0.
    Piecewise(Vec<(f64, f64)>),
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig::Constant(1.0)
    }
}

impl ScheduleConfig {
    pub fn build(&self, horizon: f64) -> Result<CouplingSchedule> {
        let s = match self {
            ScheduleConfig::Constant(g) => CouplingSchedule::constant(*g, horizon),
            ScheduleConfig::Piecewise(knots) => CouplingSchedule::new(knots.clone(), horizon),
        };
        s.map_err(|e| RunError::Config(e.to_string()))
    }

    fn with_constant(&self, g: f64) -> ScheduleConfig {
        match self {
            ScheduleConfig::Constant(_) => ScheduleConfig::Constant(g),
            // A swept g scales a piecewise protocol.
            ScheduleConfig::Piecewise(k) => ScheduleConfig::Piecewise(k.iter().map(|&(t, v)| (t, v * g)).collect()),
        }
    }
}

/// Parameters a sweep axis may vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "g")]
    G,
    #[serde(rename = "J")]
    J,
    #[serde(rename = "kappa")]
    Kappa,
    #[serde(rename = "n_th")]
    NTh,
    #[serde(rename = "spin_j")]
    SpinJ,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::G => "g",
            SweepParam::J => "J",
            SweepParam::Kappa => "kappa",
            SweepParam::NTh => "n_th",
            SweepParam::SpinJ => "spin_j",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValues {
    List(Vec<f64>),
    /// `points` evenly spaced values from `start` to `stop` inclusive.
    Range { start: f64, stop: f64, points: usize },
}

impl AxisValues {
    pub fn values(&self) -> Vec<f64> {
        match self {
            AxisValues::List(v) => v.clone(),
            AxisValues::Range { start, stop, points } => match *points {
                0 => Vec::new(),
                1 => vec![*start],
                n => (0..n).map(|k| start + (stop - start) * k as f64 / (n - 1) as f64).collect(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub param: SweepParam,
    pub values: AxisValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub axes: Vec<SweepAxis>,
    /// Trailing fraction of the run used for steady-state statistics.
    pub steady_fraction: f64,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { axes: Vec::new(), steady_fraction: 0.2, threads: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub episode: EpisodeSpec,
    pub sac: SacHyperparams,
    /// Write a checkpoint every this many episodes; 0 disables them.
    pub checkpoint_every_episodes: u64,
    /// Continue from this checkpoint instead of starting fresh.
    pub resume_from: Option<PathBuf>,
    /// Checkpoint evaluated in `evaluate` mode.
    pub checkpoint: Option<PathBuf>,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            episode: EpisodeSpec::closed(),
            sac: SacHyperparams::default(),
            checkpoint_every_episodes: 100,
            resume_from: None,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    /// Charging window `[0, horizon]` in units of `1/ω_a`.
    pub horizon: f64,
    pub schedule: ScheduleConfig,
    pub dissipator: DissipatorSpec,
    /// Integrator settings; the dissipator's default when absent.
    pub evolution: Option<EvolutionSpec>,
    pub sweep: SweepConfig,
    pub rl: RlConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Charge,
            seed: 0,
            output_dir: PathBuf::from("out"),
            model: ModelConfig::default(),
            horizon: 20.0,
            schedule: ScheduleConfig::default(),
            dissipator: DissipatorSpec::closed(),
            evolution: None,
            sweep: SweepConfig::default(),
            rl: RlConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse JSON text, apply `key=value` overrides, and validate.
    pub fn from_json_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| RunError::Config(format!("invalid JSON: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        fill_evolution_defaults(&mut doc);
        let cfg: ExperimentConfig = serde_json::from_value(doc).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        ExperimentConfig::from_json_with_overrides(&text, overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn evolution(&self) -> EvolutionSpec {
        self.evolution.unwrap_or_else(|| EvolutionSpec::default_for(&self.dissipator))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: qbattery_core::Error| RunError::Config(e.to_string());
        self.model.validate().map_err(cfg_err)?;
        self.dissipator.validate().map_err(cfg_err)?;
        self.evolution().validate().map_err(cfg_err)?;
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(RunError::Config("horizon must be positive".into()));
        }
        match self.mode {
            Mode::Charge => {
                self.schedule.build(self.horizon)?;
            }
            Mode::Sweep => {
                let axes = &self.sweep.axes;
                if axes.is_empty() || axes.len() > 2 {
                    return Err(RunError::Config("a sweep needs one or two axes".into()));
                }
                if axes.len() == 2 && axes[0].param == axes[1].param {
                    return Err(RunError::Config("sweep axes must differ".into()));
                }
                for axis in axes {
                    let v = axis.values.values();
                    if v.is_empty() {
                        return Err(RunError::Config(format!("sweep axis {} is empty", axis.param.name())));
                    }
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(RunError::Config(format!("sweep axis {} has non-finite values", axis.param.name())));
                    }
                }
                if !(self.sweep.steady_fraction > 0.0 && self.sweep.steady_fraction <= 1.0) {
                    return Err(RunError::Config("steady_fraction must lie in (0, 1]".into()));
                }
                for cell in self.sweep_cells()? {
                    cell.validate()?;
                }
            }
            Mode::Train => {
                self.rl.episode.validate().map_err(cfg_err)?;
                self.rl.sac.validate().map_err(cfg_err)?;
            }
            Mode::Evaluate => {
                self.rl.episode.validate().map_err(cfg_err)?;
                if self.rl.checkpoint.is_none() {
                    return Err(RunError::Config("evaluate mode needs rl.checkpoint".into()));
                }
            }
        }
        Ok(())
    }

    /// The config with one swept parameter set to `v`.
    pub fn with_param(&self, p: SweepParam, v: f64) -> Result<ExperimentConfig> {
        let mut c = self.clone();
        match p {
            SweepParam::G => c.schedule = self.schedule.with_constant(v),
            SweepParam::J => c.model.coupling_j = v,
            SweepParam::Kappa => c.dissipator.kappa = v,
            SweepParam::NTh => c.dissipator.n_th = v,
            SweepParam::SpinJ => c.model.spin_j = Spin::new(v).map_err(|e| RunError::Config(e.to_string()))?,
        }
        Ok(c)
    }

    /// Row-major grid of single-run configs; the last axis varies fastest.
    pub fn sweep_cells(&self) -> Result<Vec<ExperimentConfig>> {
        let axes = &self.sweep.axes;
        let first = axes.first().map(|a| a.values.values()).unwrap_or_default();
        let second = axes.get(1).map(|a| a.values.values());
        let mut out = Vec::new();
        for &x in &first {
            let base = self.with_param(axes[0].param, x)?;
            match &second {
                None => out.push(base),
                Some(ys) => {
                    for &y in ys {
                        out.push(base.with_param(axes[1].param, y)?);
                    }
                }
            }
        }
        for c in &mut out {
            c.mode = Mode::Charge;
            c.sweep = SweepConfig::default();
        }
        Ok(out)
    }
}

/// A partial `evolution` object is completed from the default for the
/// configured dissipator rather than from the closed-system default.
fn fill_evolution_defaults(doc: &mut Value) {
    let dis = doc
        .get("dissipator")
        .map_or(Ok(DissipatorSpec::closed()), |d| serde_json::from_value::<DissipatorSpec>(d.clone()));
    let (Ok(dis), Some(Value::Object(evo))) = (dis, doc.get_mut("evolution")) else {
        return;
    };
    if let Ok(Value::Object(base)) = serde_json::to_value(EvolutionSpec::default_for(&dis)) {
        for (k, v) in base {
            evo.entry(k).or_insert(v);
        }
    }
}

/// Set `a.b.c=value` inside a JSON document. The value is parsed as JSON
/// when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| RunError::Config(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(RunError::Config(format!("bad override path `{path}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    for key in &keys[..keys.len() - 1] {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| RunError::Config(format!("override `{path}`: `{key}` is not inside an object")))?;
        node = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    if node.is_null() {
        *node = Value::Object(Default::default());
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| RunError::Config(format!("override `{path}` does not address an object field")))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
