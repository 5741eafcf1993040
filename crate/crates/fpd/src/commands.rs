//! The `fpd` subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use fpd_core::constraints::{evaluate_features, FeatureFunction, MomentConstraintSet};
use fpd_core::datakit::ContinuityReport;
use fpd_core::density::{push_state, ConditionalKernel, FactoredJoint, GridDensity};
use fpd_core::evaluation::{closed_loop_moments, evaluate_objective, rollout_one, summarize, ValueCheck};
use fpd_core::synthesis::{describe_step, synthesize, Policy, SynthesisOptions};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::generator::generate;
use crate::io::{density_bytes, json_bytes, kernel_matrix_bytes, load_trajectories, read_file, sha256_hex, trajectories_bytes, write_file, write_kernel, ArtifactWriter, GridSpec};
use crate::pipeline::{
    base_input, fit, load_factors, load_policy, step_stem, synthesis_input, FACTORS_MANIFEST, POLICY_MANIFEST,
};

/// Residual and normalization tolerances a synthesized policy must meet.
pub const RESIDUAL_TOLERANCE: f64 = 1e-6;
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

const MAX_REPORTED_VIOLATIONS: usize = 20;

/// Configuration plus the bytes it was read from.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub config_sha256: String,
}

impl Loaded {
    pub fn read(path: &Path, seed: Option<u64>) -> CliResult<Loaded> {
        let (mut config, bytes) = RunConfig::load(path)?;
        if let Some(s) = seed {
            config.seed = s;
        }
        Ok(Loaded {
            config,
            config_sha256: sha256_hex(&bytes),
        })
    }

    fn manifest(&self, command: &str) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        m.insert("command".into(), json!(command));
        m.insert("config_sha256".into(), json!(self.config_sha256));
        m.insert("seed".into(), json!(self.config.seed));
        m.insert("horizon".into(), json!(self.config.horizon));
        m.insert("state_grid".into(), json!(GridSpec::from(&self.config.state_grid)));
        m.insert("control_grid".into(), json!(GridSpec::from(&self.config.control_grid)));
        m
    }
}

fn finish_manifest(out: &mut ArtifactWriter, mut manifest: BTreeMap<String, Value>, name: &str) -> CliResult<()> {
    manifest.insert("artifacts".into(), json!(out.hashes()));
    out.write(name, &json_bytes(&manifest))
}

pub fn cmd_generate(run: &Loaded, out_path: &Path) -> CliResult<()> {
    run.config.validate_generator()?;
    let ts = generate(&run.config.generator, run.config.seed)?;
    write_file(out_path, &trajectories_bytes(&ts))
}

fn continuity_json(r: &ContinuityReport) -> Value {
    let head = |v: &[(usize, usize)]| -> Vec<[usize; 2]> {
        v.iter().take(MAX_REPORTED_VIOLATIONS).map(|&(k, r)| [k, r]).collect()
    };
    json!({
        "prior_nodes": r.prior_nodes.iter().take(MAX_REPORTED_VIOLATIONS).collect::<Vec<_>>(),
        "plant_rows": head(&r.plant_rows),
        "plant_row_count": r.plant_rows.len(),
        "policy_rows": head(&r.policy_rows),
        "policy_row_count": r.policy_rows.len(),
    })
}

pub fn cmd_fit(run: &Loaded, data: &Path, out_dir: &Path) -> CliResult<()> {
    let cfg = &run.config;
    let data_sha256 = sha256_hex(&read_file(data)?);
    let ts = load_trajectories(data)?;
    let fitted = fit(cfg, &ts)?;
    let mut out = ArtifactWriter::new(out_dir)?;
    for (side, factors) in [("f", &fitted.f), ("g", &fitted.g)] {
        out.write(&format!("{side}/prior.csv"), &density_bytes(&factors.prior, "coordinate", "weight"))?;
        for k in 1..=cfg.horizon {
            let plant = &factors.plant[k - 1];
            let policy = &factors.policy[k - 1];
            write_kernel(&mut out, &format!("{side}/{}", step_stem("plant", k)), plant, &cfg.state_grid, &cfg.control_grid)?;
            write_kernel(&mut out, &format!("{side}/{}", step_stem("policy", k)), policy, &cfg.state_grid, &cfg.control_grid)?;
        }
    }
    let mut manifest = run.manifest("fit");
    manifest.insert("data_sha256".into(), json!(data_sha256));
    manifest.insert("trip_count".into(), json!(ts.len()));
    manifest.insert("reference_trips".into(), json!(fitted.reference_trips));
    manifest.insert("estimation_method".into(), json!(format!("{:?}", cfg.estimation.method)));
    manifest.insert("continuity_ok".into(), json!(fitted.continuity.ok()));
    manifest.insert("continuity".into(), continuity_json(&fitted.continuity));
    finish_manifest(&mut out, manifest, FACTORS_MANIFEST)?;
    if fitted.continuity.ok() {
        Ok(())
    } else {
        Err(CliError::Continuity(format!(
            "{} prior nodes, {} plant rows, {} policy rows outside the reference support (see {})",
            fitted.continuity.prior_nodes.len(),
            fitted.continuity.plant_rows.len(),
            fitted.continuity.policy_rows.len(),
            out_dir.join(FACTORS_MANIFEST).display()
        )))
    }
}

/// Largest constraint residual and normalization error over all rows of
/// each step.
pub fn audit_policy(policy: &Policy) -> CliResult<Vec<(f64, f64)>> {
    policy
        .steps
        .iter()
        .map(|s| {
            let mut residual: f64 = 0.0;
            let mut mass: f64 = 0.0;
            for ix in 0..s.policy.rows() {
                let row = s.policy.row(ix);
                mass = mass.max((row.mass() - 1.0).abs());
                if !s.constraints.is_empty() {
                    let m = evaluate_features(&s.constraints, &row)?;
                    for (v, t) in m.iter().zip(s.constraints.targets()) {
                        residual = residual.max((v - t).abs());
                    }
                }
            }
            Ok((residual, mass))
        })
        .collect()
}

/// Largest ratio of a policy row's peak density to the reference row's peak.
pub fn peak_ratio(policy: &ConditionalKernel, reference: &ConditionalKernel) -> f64 {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    let mut worst: f64 = 0.0;
    for ix in 0..policy.rows() {
        policy.row_into(ix, &mut a);
        reference.row_into(ix, &mut b);
        let pa = a.iter().copied().fold(0.0, f64::max);
        let pb = b.iter().copied().fold(0.0, f64::max);
        worst = worst.max(pa / pb);
    }
    worst
}

fn step_json(policy: &Policy, k: usize, audit: (f64, f64), ratio: f64) -> Value {
    let s = policy.step(k);
    json!({
        "k": k,
        "constraints": s.constraints.describe(),
        "lambda0": s.lambda0,
        "lambdas": s.lambdas,
        "theta0": s.theta0,
        "log_gamma_tilde0": s.log_gamma_tilde0,
        "solves": s.stats.solves,
        "total_iterations": s.stats.total_iterations,
        "max_iterations": s.stats.max_iterations,
        "max_solver_residual": s.stats.max_residual,
        "max_constraint_residual": audit.0,
        "max_normalization_error": audit.1,
        "max_peak_ratio_to_reference": ratio,
    })
}

fn summary_text(policy: &Policy, audits: &[(f64, f64)], ratios: &[f64]) -> String {
    let mut s = String::new();
    if policy.is_unconstrained() {
        writeln!(s, "unconstrained FPD").unwrap();
    } else {
        writeln!(s, "constrained FPD").unwrap();
    }
    writeln!(s, "gamma_mode: {}", policy.gamma_mode).unwrap();
    writeln!(s, "horizon: {}", policy.horizon()).unwrap();
    writeln!(s, "prior KL: {:.9e}", policy.prior_kl).unwrap();
    writeln!(s, "predicted total KL: {:.9e}", policy.predicted_total()).unwrap();
    for (i, step) in policy.steps.iter().enumerate() {
        writeln!(
            s,
            "B*_{} = {:.9e}; max constraint residual {:.3e}; max normalization error {:.3e}; max peak ratio {:.6}{}",
            step.k,
            policy.values[i],
            audits[i].0,
            audits[i].1,
            ratios[i],
            if ratios[i] < 1.0 { " (flatter rows than reference)" } else { "" }
        )
        .unwrap();
        writeln!(s, "  {}", describe_step(step)).unwrap();
    }
    s
}

pub fn cmd_synthesize(run: &Loaded, factors_dir: &Path, out_dir: &Path) -> CliResult<()> {
    let cfg = &run.config;
    let factors = load_factors(factors_dir, cfg)?;
    let input = synthesis_input(cfg, &factors)?;
    let options = SynthesisOptions {
        gamma_mode: cfg.gamma_mode,
        solver: cfg.solver,
    };
    let policy = synthesize(&input, &options)?;
    let audits = audit_policy(&policy)?;
    let ratios: Vec<f64> = policy
        .steps
        .iter()
        .map(|s| peak_ratio(&s.policy, &input.reference_policy()[s.k - 1]))
        .collect();

    let mut out = ArtifactWriter::new(out_dir)?;
    for step in &policy.steps {
        out.write(&format!("{}.csv", step_stem("policy", step.k)), &kernel_matrix_bytes(&step.policy))?;
    }
    out.write("summary.txt", summary_text(&policy, &audits, &ratios).as_bytes())?;
    let mut manifest = run.manifest("synthesize");
    manifest.insert("factors_manifest_sha256".into(), json!(factors.manifest_sha256));
    manifest.insert("gamma_mode".into(), json!(policy.gamma_mode.to_string()));
    manifest.insert("unconstrained".into(), json!(policy.is_unconstrained()));
    manifest.insert("values".into(), json!(policy.values));
    manifest.insert("prior_kl".into(), json!(policy.prior_kl));
    manifest.insert("predicted_total".into(), json!(policy.predicted_total()));
    manifest.insert(
        "steps".into(),
        Value::Array((1..=policy.horizon()).map(|k| step_json(&policy, k, audits[k - 1], ratios[k - 1])).collect()),
    );
    finish_manifest(&mut out, manifest, POLICY_MANIFEST)?;

    let worst_residual = audits.iter().map(|a| a.0).fold(0.0, f64::max);
    let worst_mass = audits.iter().map(|a| a.1).fold(0.0, f64::max);
    if worst_residual > RESIDUAL_TOLERANCE || worst_mass > NORMALIZATION_TOLERANCE {
        return Err(CliError::Audit(format!(
            "constraint residual {worst_residual:e}, normalization error {worst_mass:e}"
        )));
    }
    Ok(())
}

/// Variance target of a resolved constraint set, when it constrains the
/// control variance.
pub fn variance_target(set: &MomentConstraintSet) -> Option<f64> {
    let f = set.features();
    let t = set.targets();
    match f {
        [FeatureFunction::CenteredMonomial { power: 2, .. }] => Some(t[0]),
        [FeatureFunction::Monomial { power: 1 }, FeatureFunction::CenteredMonomial { power: 2, center }] => {
            Some(t[1] - (t[0] - center) * (t[0] - center))
        }
        _ => None,
    }
}

pub fn cmd_evaluate(run: &Loaded, factors_dir: &Path, policy_dir: &Path, out_path: &Path) -> CliResult<()> {
    let cfg = &run.config;
    let factors = load_factors(factors_dir, cfg)?;
    let input = synthesis_input(cfg, &factors)?;
    let policy = load_policy(policy_dir, cfg)?;
    let report = evaluate_objective(&input, &policy.kernels)?;
    let ledger: Vec<ValueCheck> = (1..=cfg.horizon)
        .map(|k| ValueCheck {
            k,
            predicted: policy.values[k - 1] - policy.values.get(k).copied().unwrap_or(0.0),
            evaluated: report.per_step_terms[k - 1],
        })
        .collect();

    let joint = FactoredJoint::new(input.prior().clone(), input.plant().to_vec(), policy.kernels.clone())?;
    let seed = cfg.seed;
    let rollouts: Vec<_> = (0..cfg.rollouts as u64).into_par_iter().map(|i| rollout_one(&joint, seed, i)).collect();
    let moments = closed_loop_moments(&joint)?;
    let rollout_json = if rollouts.is_empty() {
        Value::Null
    } else {
        let summary = summarize(&rollouts)?;
        let steps: Vec<Value> = (1..=cfg.horizon)
            .map(|k| {
                let target = variance_target(&input.constraints().for_step(k));
                let var = summary.controls.variance[k - 1];
                // Standard error of a sample variance under a normal model.
                let se = var * (2.0 / (summary.count as f64 - 1.0).max(1.0)).sqrt();
                json!({
                    "k": k,
                    "control_mean": summary.controls.mean[k - 1],
                    "control_mean_se": summary.controls.standard_error[k - 1],
                    "control_variance": var,
                    "control_variance_se": se,
                    "model_control_mean": moments.controls[k - 1].0,
                    "model_control_variance": moments.controls[k - 1].1,
                    "variance_target": target,
                    "state_mean": summary.states.mean[k],
                    "model_state_mean": moments.states[k].0,
                })
            })
            .collect();
        json!({ "count": summary.count, "seed": seed, "steps": steps })
    };

    let mut doc = run.manifest("evaluate");
    doc.insert("factors_manifest_sha256".into(), json!(factors.manifest_sha256));
    doc.insert("policy_manifest_sha256".into(), json!(policy.manifest_sha256));
    doc.insert("total_kl".into(), json!(report.total_kl));
    doc.insert("prior_term".into(), json!(report.prior_term));
    doc.insert("per_step_terms".into(), json!(report.per_step_terms));
    doc.insert("constraint_residuals".into(), json!(report.constraint_residuals));
    doc.insert(
        "value_ledger".into(),
        Value::Array(
            ledger
                .iter()
                .map(|c| json!({"k": c.k, "predicted": c.predicted, "evaluated": c.evaluated, "gap": c.gap()}))
                .collect(),
        ),
    );
    doc.insert("rollouts".into(), rollout_json);
    write_file(out_path, &json_bytes(&doc))
}

/// Closed-loop state density at step `k` from the state node `ix`.
fn one_step_state(plant: &ConditionalKernel, policy: &ConditionalKernel, ix: usize) -> CliResult<GridDensity> {
    let start = GridDensity::point_mass(*plant.outcome(), ix)?;
    Ok(push_state(&start, plant, policy)?)
}

pub fn cmd_export_plots(run: &Loaded, factors_dir: &Path, policy_dir: &Path, out_dir: &Path) -> CliResult<()> {
    let cfg = &run.config;
    let factors = load_factors(factors_dir, cfg)?;
    let base = base_input(&factors)?;
    let input = synthesis_input(cfg, &factors)?;
    let policy = load_policy(policy_dir, cfg)?;
    let options = SynthesisOptions {
        gamma_mode: cfg.gamma_mode,
        solver: cfg.solver,
    };
    let unconstrained = synthesize(&base, &options)?.kernels();
    let k = cfg.plot_step;
    let state = cfg.state_grid;
    let x = cfg.plot_state.unwrap_or_else(|| input.prior().mean());
    let ix = state.nearest(x);

    let series: [(&str, &[ConditionalKernel]); 3] = [
        ("reference", input.reference_policy()),
        ("unconstrained", &unconstrained),
        ("constrained", &policy.kernels),
    ];
    let mut out = ArtifactWriter::new(out_dir)?;
    for (label, kernels) in series {
        let row = kernels[k - 1].row(ix);
        out.write(&format!("control_{label}.csv"), &density_bytes(&row, "u", "density"))?;
        let plant = if label == "reference" { &input.reference_plant()[k - 1] } else { &input.plant()[k - 1] };
        let next = one_step_state(plant, &kernels[k - 1], ix)?;
        out.write(&format!("state_{label}.csv"), &density_bytes(&next, "x", "density"))?;
        let (prior, plants) = if label == "reference" {
            (input.reference_prior(), input.reference_plant())
        } else {
            (input.prior(), input.plant())
        };
        let joint = FactoredJoint::new(prior.clone(), plants.to_vec(), kernels.to_vec())?;
        let marginals = joint.state_marginals()?;
        out.write(&format!("marginal_{label}.csv"), &density_bytes(&marginals[k], "x", "density"))?;
    }
    let mut manifest = run.manifest("export-plots");
    manifest.insert("factors_manifest_sha256".into(), json!(factors.manifest_sha256));
    manifest.insert("policy_manifest_sha256".into(), json!(policy.manifest_sha256));
    manifest.insert("step".into(), json!(k));
    manifest.insert("state".into(), json!(state.coordinate(ix)));
    finish_manifest(&mut out, manifest, "manifest.json")
}
