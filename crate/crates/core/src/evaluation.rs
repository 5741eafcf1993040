//! Objective evaluation and closed-loop rollouts.
//!
//! The KL objective of a closed loop `p = f0 * prod_k plant_k * policy_k`
//! against the reference `g` splits into the prior term plus one term per
//! step, each an expectation under the forward state marginal of the closed
//! loop:
//!
//! ```text
//! D(p || g) = KL(f0 || g0)
//!           + sum_k E_{p_{k-1}} [ KL(policy_k || g_policy_k)
//!                                 + E_{policy_k} KL(plant_k || g_plant_k) ]
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::constraints::{evaluate_features, ConstraintSchedule};
use crate::density::{
    conditional_kl_with, kl_divergence, push_state, ConditionalKernel, FactoredJoint, Grid, GridDensity,
    RowScratch, Sampler, SUPPORT_EPSILON,
};
use crate::error::{Error, Result};
use crate::synthesis::{GammaMode, Policy, SynthesisInput};

#[derive(Debug, Clone, PartialEq)]
pub struct ValueCheck {
    pub k: usize,
    /// `B_k - B_{k+1}` from the synthesized values.
    pub predicted: f64,
    /// Per-step term of the evaluated objective.
    pub evaluated: f64,
}

impl ValueCheck {
    pub fn gap(&self) -> f64 {
        libm::fabs(self.predicted - self.evaluated)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub total_kl: f64,
    pub prior_term: f64,
    /// Per-step terms, `k = 1..n`.
    pub per_step_terms: Vec<f64>,
    /// Largest `|E[h_i] - H_i|` over state nodes and features, per step.
    pub constraint_residuals: Vec<f64>,
    /// Empty unless evaluated against a synthesized [`Policy`].
    pub value_ledger: Vec<ValueCheck>,
    /// State marginals `p_0, ..., p_n` of the evaluated closed loop.
    pub state_marginals: Vec<GridDensity>,
}

impl EvaluationReport {
    pub fn max_value_gap(&self) -> f64 {
        self.value_ledger.iter().map(ValueCheck::gap).fold(0.0, f64::max)
    }

    pub fn max_constraint_residual(&self) -> f64 {
        self.constraint_residuals.iter().copied().fold(0.0, f64::max)
    }
}

fn step_term(
    k: usize,
    marginal: &GridDensity,
    plant: &ConditionalKernel,
    reference_plant: &ConditionalKernel,
    policy: &ConditionalKernel,
    reference_policy: &ConditionalKernel,
) -> Result<f64> {
    let control = *policy.outcome();
    let nu = control.points();
    let mut policy_scratch = RowScratch::default();
    let mut plant_scratch = RowScratch::default();
    let mut row = Vec::with_capacity(nu);
    let mut term = 0.0;
    for (ix, m) in marginal.node_masses().into_iter().enumerate() {
        if m <= 0.0 {
            continue;
        }
        let tag = |e: Error| e.at_step(k, ix);
        let control_kl = conditional_kl_with(policy, reference_policy, ix, &mut policy_scratch).map_err(tag)?;
        row.clear();
        row.extend_from_slice(policy_scratch.plant_row());
        let threshold = SUPPORT_EPSILON * row.iter().copied().fold(0.0, f64::max);
        let mut plant_kl = 0.0;
        for (iu, &p) in row.iter().enumerate() {
            if p > threshold {
                let a = conditional_kl_with(plant, reference_plant, ix * nu + iu, &mut plant_scratch).map_err(|e| {
                    let nodes = match e {
                        Error::AbsoluteContinuity { nodes } => nodes,
                        other => return tag(other),
                    };
                    tag(Error::RowAbsoluteContinuity {
                        control_node: iu,
                        state_node: ix,
                        nodes,
                    })
                })?;
                plant_kl += control.weight(iu) * p * a;
            }
        }
        term += m * (control_kl + plant_kl);
    }
    Ok(term)
}

fn constraint_residual(constraints: &ConstraintSchedule, k: usize, policy: &ConditionalKernel) -> Result<f64> {
    let set = constraints.for_step(k);
    if set.is_empty() {
        return Ok(0.0);
    }
    let mut worst: f64 = 0.0;
    for ix in 0..policy.rows() {
        let moments = evaluate_features(&set, &policy.row(ix))?;
        for (m, t) in moments.iter().zip(set.targets()) {
            worst = worst.max(libm::fabs(m - t));
        }
    }
    Ok(worst)
}

/// Evaluates the objective of the closed loop formed by the plant and prior
/// of `input` with the given policy kernels, against the reference of `input`.
pub fn evaluate_objective(input: &SynthesisInput, policy: &[ConditionalKernel]) -> Result<EvaluationReport> {
    let n = input.horizon();
    if policy.len() != n {
        return Err(Error::InvalidInput(format!("{} policy kernels for horizon {n}", policy.len())));
    }
    let prior_term = kl_divergence(input.prior(), input.reference_prior())?;
    let mut marginals = vec![input.prior().clone()];
    let mut per_step_terms = Vec::with_capacity(n);
    let mut constraint_residuals = Vec::with_capacity(n);
    for k in 1..=n {
        let i = k - 1;
        per_step_terms.push(step_term(
            k,
            &marginals[i],
            &input.plant()[i],
            &input.reference_plant()[i],
            &policy[i],
            &input.reference_policy()[i],
        )?);
        constraint_residuals.push(constraint_residual(input.constraints(), k, &policy[i])?);
        let next = push_state(&marginals[i], &input.plant()[i], &policy[i])?;
        marginals.push(next);
    }
    Ok(EvaluationReport {
        total_kl: prior_term + per_step_terms.iter().sum::<f64>(),
        prior_term,
        per_step_terms,
        constraint_residuals,
        value_ledger: Vec::new(),
        state_marginals: marginals,
    })
}

/// [`evaluate_objective`] for a synthesized policy, with the value ledger
/// comparing each per-step term to `B_k - B_{k+1}`. The ledger balances in
/// [`GammaMode::Theorem`] only.
pub fn evaluate_policy(input: &SynthesisInput, policy: &Policy) -> Result<EvaluationReport> {
    let mut report = evaluate_objective(input, &policy.kernels())?;
    let n = policy.horizon();
    report.value_ledger = (1..=n)
        .map(|k| {
            let next = if k < n { policy.values[k] } else { 0.0 };
            ValueCheck {
                k,
                predicted: policy.values[k - 1] - next,
                evaluated: report.per_step_terms[k - 1],
            }
        })
        .collect();
    Ok(report)
}

/// Whether the value ledger is expected to balance under `mode`.
pub fn ledger_applies(mode: GammaMode) -> bool {
    mode == GammaMode::Theorem
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub seed: u64,
    pub index: u64,
    /// `x_0, ..., x_n`.
    pub states: Vec<f64>,
    /// `u_1, ..., u_n`.
    pub controls: Vec<f64>,
}

/// Generator of rollout `index` for `seed`; independent of how many other
/// rollouts are drawn or in which order.
pub fn rollout_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws one closed-loop trajectory. Values are drawn inside the cell of
/// their node; the next factor conditions on that node.
pub fn rollout_one(joint: &FactoredJoint, seed: u64, index: u64) -> Rollout {
    let mut rng = rollout_rng(seed, index);
    let state = *joint.state_grid();
    let control = *joint.control_grid();
    let nu = control.points();
    let cell_point = |grid: &Grid, i: usize, frac: f64| {
        let (lo, hi) = grid.cell(i);
        lo + frac * (hi - lo)
    };
    let (mut ix, frac) = Sampler::new(joint.prior()).sample_node(&mut rng);
    let mut states = vec![cell_point(&state, ix, frac)];
    let mut controls = Vec::with_capacity(joint.horizon());
    let mut buf = Vec::new();
    for k in 0..joint.horizon() {
        joint.policy()[k].row_into(ix, &mut buf);
        let (iu, frac) = Sampler::from_table(&control, &buf).sample_node(&mut rng);
        controls.push(cell_point(&control, iu, frac));
        joint.plant()[k].row_into(ix * nu + iu, &mut buf);
        let (next, frac) = Sampler::from_table(&state, &buf).sample_node(&mut rng);
        states.push(cell_point(&state, next, frac));
        ix = next;
    }
    Rollout {
        seed,
        index,
        states,
        controls,
    }
}

/// Rollouts `0..count` for `seed`.
pub fn rollouts(joint: &FactoredJoint, seed: u64, count: u64) -> Vec<Rollout> {
    (0..count).map(|i| rollout_one(joint, seed, i)).collect()
}

/// Per-step sample means, variances and standard errors of the means.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChannelSummary {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub standard_error: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutSummary {
    pub count: usize,
    pub states: ChannelSummary,
    pub controls: ChannelSummary,
}

fn summarize_channel(columns: usize, count: usize, value: impl Fn(usize, usize) -> f64) -> ChannelSummary {
    let mut out = ChannelSummary::default();
    let m = count as f64;
    for c in 0..columns {
        let mean = (0..count).map(|r| value(r, c)).sum::<f64>() / m;
        let var = if count > 1 {
            (0..count).map(|r| (value(r, c) - mean) * (value(r, c) - mean)).sum::<f64>() / (m - 1.0)
        } else {
            0.0
        };
        out.mean.push(mean);
        out.variance.push(var);
        out.standard_error.push(libm::sqrt(var / m));
    }
    out
}

pub fn summarize(rollouts: &[Rollout]) -> Result<RolloutSummary> {
    let first = rollouts.first().ok_or(Error::EmptyDataset)?;
    let (ns, nc) = (first.states.len(), first.controls.len());
    if rollouts.iter().any(|r| r.states.len() != ns || r.controls.len() != nc) {
        return Err(Error::InvalidInput("rollouts of different horizons".into()));
    }
    let count = rollouts.len();
    Ok(RolloutSummary {
        count,
        states: summarize_channel(ns, count, |r, c| rollouts[r].states[c]),
        controls: summarize_channel(nc, count, |r, c| rollouts[r].controls[c]),
    })
}

/// Model means and variances of the closed loop on its grids.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopMoments {
    /// `(mean, variance)` of `x_0, ..., x_n`.
    pub states: Vec<(f64, f64)>,
    /// `(mean, variance)` of `u_1, ..., u_n`.
    pub controls: Vec<(f64, f64)>,
}

pub fn closed_loop_moments(joint: &FactoredJoint) -> Result<ClosedLoopMoments> {
    let marginals = joint.state_marginals()?;
    let control = *joint.control_grid();
    let mut controls = Vec::with_capacity(joint.horizon());
    let mut buf = Vec::new();
    for k in 0..joint.horizon() {
        let mut mixed = vec![0.0; control.points()];
        for (ix, m) in marginals[k].node_masses().into_iter().enumerate() {
            if m <= 0.0 {
                continue;
            }
            joint.policy()[k].row_into(ix, &mut buf);
            mixed.iter_mut().zip(&buf).for_each(|(a, b)| *a += m * b);
        }
        let d = GridDensity::new(control, mixed)?;
        controls.push((d.mean(), d.variance()));
    }
    Ok(ClosedLoopMoments {
        states: marginals.iter().map(|d| (d.mean(), d.variance())).collect(),
        controls,
    })
}
