//! Glue between configuration, artifacts on disk and the core algorithms.

use std::path::Path;

use fpd_core::constraints::{ConstraintSchedule, MomentConstraintSet, TimeIndex};
use fpd_core::datakit::{check_continuity, estimate_factors, select_reference, ContinuityReport, EstimationConfig, Factors, TrajectorySet};
use fpd_core::density::{Conditioning, ConditionalKernel, Grid, GridDensity};
use fpd_core::synthesis::{reference_state_marginals, variance_constraint, SynthesisInput};

use crate::config::{ConstraintSpec, ReferenceSide, RunConfig};
use crate::error::{CliError, CliResult};
use crate::io::{read_density, read_kernel, read_kernel_matrix, read_json, sha256_hex, read_file};

pub const FACTORS_MANIFEST: &str = "manifest.json";
pub const POLICY_MANIFEST: &str = "manifest.json";

pub fn step_stem(kind: &str, k: usize) -> String {
    format!("{kind}_{k:02}")
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub f: Factors,
    pub g: Factors,
    pub continuity: ContinuityReport,
    pub reference_trips: Vec<String>,
}

pub fn fit(cfg: &RunConfig, ts: &TrajectorySet) -> CliResult<FitOutput> {
    let filtered = select_reference(ts, &cfg.reference.score_channel, cfg.reference.n_keep)?;
    let est = EstimationConfig {
        method: cfg.estimation.method,
        state_grid: cfg.state_grid,
        control_grid: cfg.control_grid,
        smoothing: cfg.estimation.smoothing,
        alignment: cfg.estimation.alignment,
        min_bin_count: cfg.estimation.min_bin_count,
    };
    let full = estimate_factors(ts, &est, cfg.horizon)?;
    let sub = estimate_factors(&filtered, &est, cfg.horizon)?;
    let (f, g) = match cfg.reference.side {
        ReferenceSide::Filtered => (full, sub),
        ReferenceSide::Full => (sub, full),
    };
    let f = f.with_reference_roles(false);
    let g = g.with_reference_roles(true);
    let continuity = check_continuity(&f, &g)?;
    Ok(FitOutput {
        f,
        g,
        continuity,
        reference_trips: filtered.trips().iter().map(|t| t.trip_id.clone()).collect(),
    })
}

/// Factors read back from a fit output directory.
#[derive(Debug, Clone)]
pub struct LoadedFactors {
    pub f: Factors,
    pub g: Factors,
    pub manifest_sha256: String,
}

fn load_side(dir: &Path, horizon: usize) -> CliResult<Factors> {
    let prior = read_density(&dir.join("prior.csv"))?;
    let mut plant = Vec::with_capacity(horizon);
    let mut policy = Vec::with_capacity(horizon);
    for k in 1..=horizon {
        plant.push(read_kernel(&dir.join(format!("{}.json", step_stem("plant", k))))?);
        policy.push(read_kernel(&dir.join(format!("{}.json", step_stem("policy", k))))?);
    }
    Ok(Factors { prior, plant, policy })
}

pub fn load_factors(dir: &Path, cfg: &RunConfig) -> CliResult<LoadedFactors> {
    let manifest_path = dir.join(FACTORS_MANIFEST);
    let manifest_sha256 = sha256_hex(&read_file(&manifest_path)?);
    let manifest: serde_json::Value = read_json(&manifest_path)?;
    let horizon = manifest["horizon"].as_u64().unwrap_or(0) as usize;
    if horizon != cfg.horizon {
        return Err(CliError::Mismatch(format!("factors have horizon {horizon}, config has {}", cfg.horizon)));
    }
    let f = load_side(&dir.join("f"), horizon)?;
    let g = load_side(&dir.join("g"), horizon)?;
    for (side, factors) in [("f", &f), ("g", &g)] {
        if factors.prior.grid() != &cfg.state_grid {
            return Err(CliError::Mismatch(format!("{side}-side state grid differs from the config")));
        }
        if factors.policy[0].outcome() != &cfg.control_grid {
            return Err(CliError::Mismatch(format!("{side}-side control grid differs from the config")));
        }
    }
    Ok(LoadedFactors { f, g, manifest_sha256 })
}

/// Synthesis input without constraints.
pub fn base_input(factors: &LoadedFactors) -> CliResult<SynthesisInput> {
    Ok(SynthesisInput::new(
        factors.f.prior.clone(),
        factors.g.prior.clone(),
        factors.f.plant.clone(),
        factors.g.plant.clone(),
        factors.g.policy.clone(),
        ConstraintSchedule::unconstrained(),
    )
    .map_err(|e| match e {
        fpd_core::Error::GridMismatch(m) => CliError::Mismatch(m),
        other => other.into(),
    })?)
}

/// Expands configured constraints into per-step sets. Variance requests are
/// resolved against the reference closed loop.
pub fn resolve_constraints(cfg: &RunConfig, input: &SynthesisInput) -> CliResult<ConstraintSchedule> {
    let mut sets: Vec<MomentConstraintSet> = Vec::new();
    let mut reference_marginals: Option<Vec<GridDensity>> = None;
    for entry in &cfg.constraints {
        match &entry.spec {
            ConstraintSpec::Moments { features, targets } => {
                sets.push(MomentConstraintSet::new(entry.index, features.clone(), targets.clone())?);
            }
            ConstraintSpec::VarianceScale { scale, form } => {
                if reference_marginals.is_none() {
                    reference_marginals = Some(reference_state_marginals(input)?);
                }
                let q = reference_marginals.as_ref().unwrap();
                let steps: Vec<usize> = match entry.index {
                    TimeIndex::Step(k) => vec![k],
                    TimeIndex::All => (1..=cfg.horizon)
                        .filter(|k| !cfg.constraints.iter().any(|e| e.index == TimeIndex::Step(*k)))
                        .collect(),
                };
                for k in steps {
                    sets.push(variance_constraint(input, q, k, *scale, *form)?);
                }
            }
        }
    }
    Ok(ConstraintSchedule::new(sets))
}

pub fn synthesis_input(cfg: &RunConfig, factors: &LoadedFactors) -> CliResult<SynthesisInput> {
    let base = base_input(factors)?;
    let schedule = resolve_constraints(cfg, &base)?;
    Ok(base.with_constraints(schedule)?)
}

#[derive(Debug, Clone)]
pub struct LoadedPolicy {
    pub kernels: Vec<ConditionalKernel>,
    pub values: Vec<f64>,
    pub manifest_sha256: String,
}

pub fn load_policy(dir: &Path, cfg: &RunConfig) -> CliResult<LoadedPolicy> {
    let manifest_path = dir.join(POLICY_MANIFEST);
    let manifest_sha256 = sha256_hex(&read_file(&manifest_path)?);
    let manifest: serde_json::Value = read_json(&manifest_path)?;
    let grid = |key: &str| -> CliResult<Grid> {
        let spec: crate::io::GridSpec = serde_json::from_value(manifest[key].clone())
            .map_err(|e| CliError::parse(&manifest_path, 1, format!("{key}: {e}")))?;
        spec.grid()
    };
    let state = grid("state_grid")?;
    let control = grid("control_grid")?;
    if state != cfg.state_grid || control != cfg.control_grid {
        return Err(CliError::Mismatch("policy grids differ from the config".into()));
    }
    let horizon = manifest["horizon"].as_u64().unwrap_or(0) as usize;
    if horizon != cfg.horizon {
        return Err(CliError::Mismatch(format!("policy has horizon {horizon}, config has {}", cfg.horizon)));
    }
    let values: Vec<f64> = serde_json::from_value(manifest["values"].clone())
        .map_err(|e| CliError::parse(&manifest_path, 1, format!("values: {e}")))?;
    let mut kernels = Vec::with_capacity(horizon);
    for k in 1..=horizon {
        let path = dir.join(format!("{}.csv", step_stem("policy", k)));
        let table = read_kernel_matrix(&path, Conditioning::State(state), control)?;
        kernels.push(ConditionalKernel::from_table(
            fpd_core::density::KernelRole::Policy,
            Conditioning::State(state),
            control,
            table,
        )?);
    }
    Ok(LoadedPolicy {
        kernels,
        values,
        manifest_sha256,
    })
}
