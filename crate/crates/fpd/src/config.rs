//! Run configuration: a TOML file restricted to flat dotted keys.
//!
//! ```toml
//! horizon = 20
//! seed = 7
//! state_grid.lower = 0.0
//! state_grid.upper = 600.0
//! state_grid.points = 200
//! control_grid.lower = -2.0
//! control_grid.upper = 26.0
//! control_grid.points = 200
//! estimation.method = "gaussian_maxent"
//! reference.score_channel = "jerk"
//! reference.n_keep = 20
//! constraint.all.variance_scale = 2.0
//! ```
//!
//! Constraint keys take a step index or `all`:
//! `constraint.<k>.feature` / `constraint.<k>.target` (a string and a number,
//! or two arrays of equal length), or `constraint.<k>.variance_scale` with an
//! optional `constraint.<k>.variance_form` to request a multiple of the
//! reference control variance.

use std::collections::BTreeMap;
use std::path::Path;

use fpd_core::constraints::{FeatureFunction, TimeIndex, VarianceForm};
use fpd_core::datakit::{Alignment, EstimationMethod, DEFAULT_MIN_BIN_COUNT, DEFAULT_SMOOTHING};
use fpd_core::density::Grid;
use fpd_core::multipliers::SolverSettings;
use fpd_core::synthesis::GammaMode;

use crate::error::{CliError, CliResult};

/// Which estimate plays the reference (`g`) side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceSide {
    /// Filtered trips estimate `g`, all trips estimate `f`.
    Filtered,
    /// All trips estimate `g`, filtered trips estimate `f`.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationSection {
    pub method: EstimationMethod,
    pub smoothing: f64,
    pub alignment: Alignment,
    pub min_bin_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSection {
    pub score_channel: String,
    pub n_keep: usize,
    pub side: ReferenceSide,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSpec {
    Moments {
        features: Vec<FeatureFunction>,
        targets: Vec<f64>,
    },
    /// `scale` times the reference control variance of each step.
    VarianceScale { scale: f64, form: VarianceForm },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintEntry {
    pub index: TimeIndex,
    pub spec: ConstraintSpec,
}

/// Synthetic merge-trip generator. Each trip starts near `x0_mean` and
/// accelerates toward `target_speed`; acceleration follows a damped random
/// walk whose jerk noise level is drawn per trip.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub trip_count: usize,
    pub samples: usize,
    pub dt: f64,
    pub x0_mean: f64,
    pub x0_sd: f64,
    pub v0_mean: f64,
    pub v0_sd: f64,
    pub target_speed: f64,
    pub speed_gain: f64,
    pub accel_decay: f64,
    pub jerk_sd_min: f64,
    pub jerk_sd_max: f64,
    pub position_noise: f64,
    pub speed_noise: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            trip_count: 100,
            samples: 21,
            dt: 0.25,
            x0_mean: 18.0,
            x0_sd: 1.5,
            v0_mean: 4.0,
            v0_sd: 1.0,
            target_speed: 14.0,
            speed_gain: 0.15,
            accel_decay: 0.7,
            jerk_sd_min: 0.1,
            jerk_sd_max: 1.2,
            position_noise: 0.5,
            speed_noise: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub horizon: usize,
    pub seed: u64,
    pub gamma_mode: GammaMode,
    pub state_grid: Grid,
    pub control_grid: Grid,
    pub estimation: EstimationSection,
    pub reference: ReferenceSection,
    pub constraints: Vec<ConstraintEntry>,
    pub solver: SolverSettings,
    pub generator: GeneratorConfig,
    pub rollouts: usize,
    pub plot_step: usize,
    pub plot_state: Option<f64>,
}

type Flat = BTreeMap<String, toml::Value>;

fn flatten(prefix: &str, table: &toml::Table, out: &mut Flat) -> CliResult<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out)?,
            other => {
                out.insert(key, other.clone());
            }
        }
    }
    Ok(())
}

struct Keys {
    flat: Flat,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl Keys {
    fn take(&mut self, key: &str) -> Option<toml::Value> {
        self.flat.remove(key)
    }

    fn float(&mut self, key: &str) -> CliResult<Option<f64>> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::Float(f)) => Ok(Some(f)),
            Some(toml::Value::Integer(i)) => Ok(Some(i as f64)),
            Some(other) => Err(config_err(format!("`{key}` must be a number, got {other}"))),
        }
    }

    fn uint(&mut self, key: &str) -> CliResult<Option<u64>> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::Integer(i)) if i >= 0 => Ok(Some(i as u64)),
            Some(other) => Err(config_err(format!("`{key}` must be a non-negative integer, got {other}"))),
        }
    }

    fn string(&mut self, key: &str) -> CliResult<Option<String>> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s)),
            Some(other) => Err(config_err(format!("`{key}` must be a string, got {other}"))),
        }
    }

    fn float_or(&mut self, key: &str, default: f64) -> CliResult<f64> {
        Ok(self.float(key)?.unwrap_or(default))
    }

    fn required_uint(&mut self, key: &str) -> CliResult<u64> {
        self.uint(key)?.ok_or_else(|| config_err(format!("missing `{key}`")))
    }

    fn grid(&mut self, name: &str) -> CliResult<Grid> {
        let lower = self.float(&format!("{name}.lower"))?;
        let upper = self.float(&format!("{name}.upper"))?;
        let points = self.uint(&format!("{name}.points"))?;
        match (lower, upper, points) {
            (Some(lo), Some(hi), Some(n)) => Grid::new(lo, hi, n as usize).map_err(|e| config_err(format!("{name}: {e}"))),
            _ => Err(config_err(format!("`{name}` needs lower, upper and points"))),
        }
    }
}

fn parse_enum<T: std::str::FromStr>(key: &str, value: Option<String>, default: T) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    match value {
        None => Ok(default),
        Some(s) => s.parse().map_err(|e| config_err(format!("`{key}`: {e}"))),
    }
}

fn parse_constraints(keys: &mut Keys, horizon: usize) -> CliResult<Vec<ConstraintEntry>> {
    let mut indices: Vec<String> = keys
        .flat
        .keys()
        .filter_map(|k| k.strip_prefix("constraint."))
        .filter_map(|rest| rest.split_once('.').map(|(idx, _)| idx.to_string()))
        .collect();
    indices.dedup();
    let mut entries = Vec::new();
    for idx in indices {
        let index = if idx == "all" {
            TimeIndex::All
        } else {
            match idx.parse::<usize>() {
                Ok(k) if (1..=horizon).contains(&k) => TimeIndex::Step(k),
                _ => return Err(config_err(format!("constraint index `{idx}` must be `all` or in 1..={horizon}"))),
            }
        };
        let base = format!("constraint.{idx}");
        let feature = keys.take(&format!("{base}.feature"));
        let target = keys.take(&format!("{base}.target"));
        let scale = keys.float(&format!("{base}.variance_scale"))?;
        let form = keys.string(&format!("{base}.variance_form"))?;
        let spec = match (feature, target, scale) {
            (Some(f), Some(t), None) => {
                if form.is_some() {
                    return Err(config_err(format!("`{base}.variance_form` needs `{base}.variance_scale`")));
                }
                moment_spec(&base, f, t)?
            }
            (None, None, Some(scale)) => ConstraintSpec::VarianceScale {
                scale,
                form: parse_enum(&format!("{base}.variance_form"), form, VarianceForm::Pair)?,
            },
            _ => {
                return Err(config_err(format!(
                    "`{base}` needs either feature and target, or variance_scale"
                )))
            }
        };
        entries.push(ConstraintEntry { index, spec });
    }
    Ok(entries)
}

fn moment_spec(base: &str, feature: toml::Value, target: toml::Value) -> CliResult<ConstraintSpec> {
    let as_number = |v: &toml::Value| match v {
        toml::Value::Float(f) => Some(*f),
        toml::Value::Integer(i) => Some(*i as f64),
        _ => None,
    };
    let bad = || config_err(format!("`{base}`: feature and target must be a string and a number, or arrays of equal length"));
    let (features, targets): (Vec<String>, Vec<f64>) = match (&feature, &target) {
        (toml::Value::String(f), t) => (vec![f.clone()], vec![as_number(t).ok_or_else(bad)?]),
        (toml::Value::Array(fs), toml::Value::Array(ts)) if fs.len() == ts.len() => (
            fs.iter().map(|f| f.as_str().map(str::to_string).ok_or_else(bad)).collect::<CliResult<_>>()?,
            ts.iter().map(|t| as_number(t).ok_or_else(bad)).collect::<CliResult<_>>()?,
        ),
        _ => return Err(bad()),
    };
    let features = features
        .iter()
        .map(|f| f.parse::<FeatureFunction>().map_err(|e| config_err(format!("`{base}.feature`: {e}"))))
        .collect::<CliResult<Vec<_>>>()?;
    Ok(ConstraintSpec::Moments { features, targets })
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<RunConfig> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        let mut flat = Flat::new();
        flatten("", &table, &mut flat)?;
        let mut keys = Keys { flat };

        let horizon = keys.required_uint("horizon")? as usize;
        if horizon == 0 {
            return Err(config_err("`horizon` must be positive"));
        }
        let seed = keys.uint("seed")?.unwrap_or(0);
        let gamma_mode = parse_enum("gamma_mode", keys.string("gamma_mode")?, GammaMode::Theorem)?;
        let state_grid = keys.grid("state_grid")?;
        let control_grid = keys.grid("control_grid")?;

        let estimation = EstimationSection {
            method: parse_enum("estimation.method", keys.string("estimation.method")?, EstimationMethod::GaussianMaxent)?,
            smoothing: keys.float_or("estimation.smoothing", DEFAULT_SMOOTHING)?,
            alignment: parse_enum("estimation.alignment", keys.string("estimation.alignment")?, Alignment::ByIndex)?,
            min_bin_count: keys.uint("estimation.min_bin_count")?.map_or(DEFAULT_MIN_BIN_COUNT, |v| v as usize),
        };
        if !(estimation.smoothing >= 0.0) || !estimation.smoothing.is_finite() {
            return Err(config_err("`estimation.smoothing` must be a non-negative number"));
        }

        let side = match keys.string("reference.side")?.as_deref() {
            None | Some("filtered") => ReferenceSide::Filtered,
            Some("full") => ReferenceSide::Full,
            Some(other) => return Err(config_err(format!("`reference.side`: `{other}` is not `filtered` or `full`"))),
        };
        let reference = ReferenceSection {
            score_channel: keys.string("reference.score_channel")?.unwrap_or_else(|| "jerk".into()),
            n_keep: keys.uint("reference.n_keep")?.unwrap_or(20) as usize,
            side,
        };
        if reference.n_keep == 0 {
            return Err(config_err("`reference.n_keep` must be positive"));
        }

        let defaults = SolverSettings::default();
        let solver = SolverSettings {
            grad_tol: keys.float_or("solver.grad_tol", defaults.grad_tol)?,
            max_iter: keys.uint("solver.max_iter")?.map_or(defaults.max_iter, |v| v as usize),
            ..defaults
        };
        if !(solver.grad_tol > 0.0) || solver.max_iter == 0 {
            return Err(config_err("solver tolerances must be positive"));
        }

        let d = GeneratorConfig::default();
        let generator = GeneratorConfig {
            trip_count: keys.uint("generator.trip_count")?.map_or(d.trip_count, |v| v as usize),
            samples: keys.uint("generator.samples")?.map_or(d.samples, |v| v as usize),
            dt: keys.float_or("generator.dt", d.dt)?,
            x0_mean: keys.float_or("generator.x0_mean", d.x0_mean)?,
            x0_sd: keys.float_or("generator.x0_sd", d.x0_sd)?,
            v0_mean: keys.float_or("generator.v0_mean", d.v0_mean)?,
            v0_sd: keys.float_or("generator.v0_sd", d.v0_sd)?,
            target_speed: keys.float_or("generator.target_speed", d.target_speed)?,
            speed_gain: keys.float_or("generator.speed_gain", d.speed_gain)?,
            accel_decay: keys.float_or("generator.accel_decay", d.accel_decay)?,
            jerk_sd_min: keys.float_or("generator.jerk_sd_min", d.jerk_sd_min)?,
            jerk_sd_max: keys.float_or("generator.jerk_sd_max", d.jerk_sd_max)?,
            position_noise: keys.float_or("generator.position_noise", d.position_noise)?,
            speed_noise: keys.float_or("generator.speed_noise", d.speed_noise)?,
        };

        let rollouts = keys.uint("rollouts.count")?.unwrap_or(10_000) as usize;
        let plot_step = keys.uint("plots.step")?.unwrap_or(1) as usize;
        if plot_step == 0 || plot_step > horizon {
            return Err(config_err(format!("`plots.step` must be in 1..={horizon}")));
        }
        let plot_state = keys.float("plots.state")?;

        let constraints = parse_constraints(&mut keys, horizon)?;

        if !keys.flat.is_empty() {
            let unknown: Vec<&str> = keys.flat.keys().map(String::as_str).collect();
            return Err(config_err(format!("unknown keys: {}", unknown.join(", "))));
        }
        Ok(RunConfig {
            horizon,
            seed,
            gamma_mode,
            state_grid,
            control_grid,
            estimation,
            reference,
            constraints,
            solver,
            generator,
            rollouts,
            plot_step,
            plot_state,
        })
    }

    pub fn load(path: &Path) -> CliResult<(RunConfig, Vec<u8>)> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let text = std::str::from_utf8(&bytes).map_err(|_| config_err(format!("{} is not UTF-8", path.display())))?;
        Ok((RunConfig::parse(text)?, bytes))
    }

    pub fn validate_generator(&self) -> CliResult<()> {
        let g = &self.generator;
        if g.trip_count == 0 {
            return Err(config_err("`generator.trip_count` must be positive"));
        }
        if g.samples < 2 {
            return Err(config_err("`generator.samples` must be at least 2"));
        }
        let positive = [("dt", g.dt), ("jerk_sd_max", g.jerk_sd_max)];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(config_err(format!("`generator.{name}` must be positive")));
            }
        }
        let non_negative = [
            ("x0_sd", g.x0_sd),
            ("v0_sd", g.v0_sd),
            ("jerk_sd_min", g.jerk_sd_min),
            ("position_noise", g.position_noise),
            ("speed_noise", g.speed_noise),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(config_err(format!("`generator.{name}` must be non-negative")));
            }
        }
        if g.jerk_sd_min > g.jerk_sd_max {
            return Err(config_err("`generator.jerk_sd_min` exceeds `generator.jerk_sd_max`"));
        }
        Ok(())
    }

    pub fn has_constraints(&self) -> bool {
        !self.constraints.is_empty()
    }
}
