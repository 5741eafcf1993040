//! Backward recursion for the constrained optimal randomized policy.
//!
//! For `k = n, ..., 1` and every previous-state node `x`:
//!
//! ```text
//! omega(u, x)   = KL(f_X(. | u, x) || g_X(. | u, x)) - E_{f_X(. | u, x)}[ln gamma_{k+1}]
//! policy(u | x) = g_U(u | x) exp(-omega(u, x) - <lambda(x), h(u)>) / exp(1 + lambda0(x))
//! ln gamma_k(x) = 1 + lambda0(x) + <lambda(x), H>
//! ```
//!
//! so that `-ln gamma_k(x)` is the optimal cost-to-go from `x`, and
//! `B_k = -E_{p_{k-1}}[ln gamma_k]` is the expected value of step `k` onward
//! under the state marginal produced by the synthesized policy.

mod gaussian;

pub use gaussian::{synthesize_gaussian, GaussianModel, GaussianPolicy, GaussianPolicyStep};

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::constraints::{independence_of_columns, ConstraintSchedule, MomentConstraintSet, TimeIndex, VarianceForm};
use crate::density::{
    conditional_kl_with, integrate_table, kl_divergence, push_state, Conditioning, ConditionalKernel, Grid, GridDensity,
    KernelRole, RowScratch,
};
use crate::error::{Error, Result};
use crate::multipliers::SolverSettings;
use crate::tilting::{tilt_log_table, TiltSolution};

/// How `ln gamma` is accumulated from a row solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GammaMode {
    /// `ln gamma = ln gamma0 + theta0 + <lambda, H>`, the normalizer of the
    /// full tilt against `g_U`.
    #[default]
    Theorem,
    /// `ln gamma = theta0 + <lambda, H>`, measured against the pre-normalized
    /// tilt (drops `ln gamma0`).
    AlgorithmLiteral,
}

impl fmt::Display for GammaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GammaMode::Theorem => "theorem",
            GammaMode::AlgorithmLiteral => "algorithm_literal",
        })
    }
}

impl FromStr for GammaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "theorem" => Ok(GammaMode::Theorem),
            "algorithm_literal" => Ok(GammaMode::AlgorithmLiteral),
            other => Err(Error::InvalidInput(alloc::format!("gamma mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisInput {
    prior: GridDensity,
    reference_prior: GridDensity,
    plant: Vec<ConditionalKernel>,
    reference_plant: Vec<ConditionalKernel>,
    reference_policy: Vec<ConditionalKernel>,
    constraints: ConstraintSchedule,
}

impl SynthesisInput {
    pub fn new(
        prior: GridDensity,
        reference_prior: GridDensity,
        plant: Vec<ConditionalKernel>,
        reference_plant: Vec<ConditionalKernel>,
        reference_policy: Vec<ConditionalKernel>,
        constraints: ConstraintSchedule,
    ) -> Result<Self> {
        let n = plant.len();
        if n == 0 || reference_plant.len() != n || reference_policy.len() != n {
            return Err(Error::InvalidInput(alloc::format!(
                "horizon mismatch: {} plant, {} reference plant, {} reference policy kernels",
                n,
                reference_plant.len(),
                reference_policy.len()
            )));
        }
        let state = *prior.grid();
        if reference_prior.grid() != &state {
            return Err(Error::GridMismatch("prior and reference prior grids differ".into()));
        }
        let control = *reference_policy[0].outcome();
        let pair = Conditioning::ControlState { control, state };
        for k in 0..n {
            let tag = |what: &str| alloc::format!("{what} kernel {}", k + 1);
            plant[k].check_shape(&pair, &state, &tag("plant"))?;
            reference_plant[k].check_shape(&pair, &state, &tag("reference plant"))?;
            reference_policy[k].check_shape(&Conditioning::State(state), &control, &tag("reference policy"))?;
        }
        for set in constraints.sets() {
            if let TimeIndex::Step(k) = set.time_index {
                if k == 0 || k > n {
                    return Err(Error::InvalidInput(alloc::format!("constraint for step {k} outside 1..={n}")));
                }
            }
        }
        Ok(SynthesisInput {
            prior,
            reference_prior,
            plant,
            reference_plant,
            reference_policy,
            constraints,
        })
    }

    pub fn horizon(&self) -> usize {
        self.plant.len()
    }

    pub fn state_grid(&self) -> &Grid {
        self.prior.grid()
    }

    pub fn control_grid(&self) -> &Grid {
        self.reference_policy[0].outcome()
    }

    pub fn prior(&self) -> &GridDensity {
        &self.prior
    }

    pub fn reference_prior(&self) -> &GridDensity {
        &self.reference_prior
    }

    pub fn plant(&self) -> &[ConditionalKernel] {
        &self.plant
    }

    pub fn reference_plant(&self) -> &[ConditionalKernel] {
        &self.reference_plant
    }

    pub fn reference_policy(&self) -> &[ConditionalKernel] {
        &self.reference_policy
    }

    pub fn constraints(&self) -> &ConstraintSchedule {
        &self.constraints
    }

    pub fn with_constraints(mut self, constraints: ConstraintSchedule) -> Result<Self> {
        self.constraints = constraints;
        SynthesisInput::new(
            self.prior,
            self.reference_prior,
            self.plant,
            self.reference_plant,
            self.reference_policy,
            self.constraints,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SynthesisOptions {
    pub gamma_mode: GammaMode,
    pub solver: SolverSettings,
}

/// Multiplier-solver statistics for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolverStats {
    /// Rows that needed a multiplier solve.
    pub solves: usize,
    pub total_iterations: usize,
    pub max_iterations: usize,
    pub max_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStep {
    pub k: usize,
    /// Rows over the control grid, one per previous-state node.
    pub policy: ConditionalKernel,
    pub constraints: MomentConstraintSet,
    /// `lambda0(x)` per state node, in the convention of the gamma mode.
    pub lambda0: Vec<f64>,
    /// `lambda(x)` per state node; all empty when the step is unconstrained.
    pub lambdas: Vec<Vec<f64>>,
    /// `omega(u, x)`, state-major (`ix * n_u + iu`).
    pub omega: Vec<f64>,
    pub gamma_log: Vec<f64>,
    /// `ln gamma0(x) = ln int g_U exp(-omega) du`.
    pub log_gamma_tilde0: Vec<f64>,
    pub theta0: Vec<f64>,
    /// Per-row minimum `-(1 + lambda0 + <lambda, H>)` of the tilt problem.
    pub row_minimum: Vec<f64>,
    pub stats: SolverStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    /// Ordered by `k = 1..n`.
    pub steps: Vec<PolicyStep>,
    /// `B_k` for `k = 1..n`.
    pub values: Vec<f64>,
    pub gamma_mode: GammaMode,
    /// `KL(f_0 || g_0)`.
    pub prior_kl: f64,
    /// Closed-loop state marginals `p_0, ..., p_n`.
    pub state_marginals: Vec<GridDensity>,
}

impl Policy {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Step `k` (1-based).
    pub fn step(&self, k: usize) -> &PolicyStep {
        &self.steps[k - 1]
    }

    pub fn kernels(&self) -> Vec<ConditionalKernel> {
        self.steps.iter().map(|s| s.policy.clone()).collect()
    }

    /// Total objective implied by the value ledger,
    /// `KL(f_0 || g_0) + B_1`. Exact in theorem mode.
    pub fn predicted_total(&self) -> f64 {
        self.prior_kl + self.values[0]
    }

    pub fn is_unconstrained(&self) -> bool {
        self.steps.iter().all(|s| s.constraints.is_empty())
    }
}

fn control_points(kernel: &ConditionalKernel) -> usize {
    match kernel.conditioning() {
        Conditioning::ControlState { control, .. } => control.points(),
        Conditioning::State(_) => 1,
    }
}

fn row_error(e: Error, row: usize, nu: usize) -> Error {
    match e {
        Error::AbsoluteContinuity { nodes } => Error::RowAbsoluteContinuity {
            control_node: row % nu,
            state_node: row / nu,
            nodes,
        },
        other => other,
    }
}

fn expect_plant_pair(plant: &ConditionalKernel, reference: &ConditionalKernel) -> Result<()> {
    if !matches!(plant.conditioning(), Conditioning::ControlState { .. }) {
        return Err(Error::InvalidInput("plant kernels condition on (u, x)".into()));
    }
    reference.check_shape(plant.conditioning(), plant.outcome(), "reference plant")
}

/// `alpha(u, x) = KL(f_X(. | u, x) || g_X(. | u, x))`, state-major.
pub fn alpha_hat(plant: &ConditionalKernel, reference: &ConditionalKernel) -> Result<Vec<f64>> {
    omega_table(plant, reference, None)
}

/// `beta(u, x) = -E_{f_X(. | u, x)}[ln gamma(X)]`, state-major.
pub fn beta_hat(plant: &ConditionalKernel, gamma_log_next: &[f64]) -> Result<Vec<f64>> {
    check_gamma(plant, gamma_log_next)?;
    let mut buf = Vec::new();
    let grid = plant.outcome();
    Ok((0..plant.rows())
        .map(|r| {
            plant.row_into(r, &mut buf);
            -expectation(grid, &buf, gamma_log_next)
        })
        .collect())
}

fn check_gamma(plant: &ConditionalKernel, gamma_log: &[f64]) -> Result<()> {
    if gamma_log.len() != plant.outcome().points() {
        return Err(Error::GridMismatch(alloc::format!(
            "ln gamma has {} values for {} state nodes",
            gamma_log.len(),
            plant.outcome().points()
        )));
    }
    if let Some(i) = gamma_log.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain {
            node: i,
            value: gamma_log[i],
        });
    }
    Ok(())
}

fn expectation(grid: &Grid, row: &[f64], values: &[f64]) -> f64 {
    row.iter()
        .zip(values)
        .enumerate()
        .map(|(i, (f, v))| grid.weight(i) * f * v)
        .sum()
}

/// `alpha + beta` in one pass over the plant rows.
fn omega_table(plant: &ConditionalKernel, reference: &ConditionalKernel, gamma_next: Option<&[f64]>) -> Result<Vec<f64>> {
    expect_plant_pair(plant, reference)?;
    if let Some(g) = gamma_next {
        check_gamma(plant, g)?;
    }
    let nu = control_points(plant);
    let grid = plant.outcome();
    let mut scratch = RowScratch::default();
    let mut out = Vec::with_capacity(plant.rows());
    for r in 0..plant.rows() {
        let a = conditional_kl_with(plant, reference, r, &mut scratch).map_err(|e| row_error(e, r, nu))?;
        let b = gamma_next.map_or(0.0, |g| -expectation(grid, scratch.plant_row(), g));
        out.push(a + b);
    }
    Ok(out)
}

fn check_step_constraints(set: &MomentConstraintSet, control: &Grid) -> Result<()> {
    if set.is_empty() {
        return Ok(());
    }
    let mut columns = vec![vec![1.0; control.points()]];
    columns.extend(set.table(control).iter().fold(vec![Vec::new(); set.len()], |mut acc, row| {
        acc.iter_mut().zip(row).for_each(|(c, v)| c.push(*v));
        acc
    }));
    let (ok, min_eigenvalue) = independence_of_columns(&columns, control, None)?;
    if ok {
        Ok(())
    } else {
        Err(Error::NotIndependent { min_eigenvalue })
    }
}

fn solve_row(
    control: &Grid,
    log_base: &[f64],
    set: &MomentConstraintSet,
    warm: [Option<&[f64]>; 2],
    settings: &SolverSettings,
) -> Result<TiltSolution> {
    for init in warm.into_iter().flatten().filter(|t| !t.is_empty()) {
        if let Ok(s) = tilt_log_table(control, log_base, set, Some(init), settings) {
            return Ok(s);
        }
    }
    tilt_log_table(control, log_base, set, None, settings)
}

/// Runs the backward recursion and the forward value ledger.
pub fn synthesize(input: &SynthesisInput, options: &SynthesisOptions) -> Result<Policy> {
    let n = input.horizon();
    let state = *input.state_grid();
    let control = *input.control_grid();
    let (nx, nu) = (state.points(), control.points());

    let mut steps: Vec<PolicyStep> = Vec::with_capacity(n);
    let mut gamma_next: Option<Vec<f64>> = None;
    let mut previous_theta: Vec<Vec<f64>> = vec![Vec::new(); nx];
    let mut g_row = Vec::new();
    let mut g_log = Vec::new();
    let mut log_base = vec![0.0; nu];

    for k in (1..=n).rev() {
        let i = k - 1;
        let set = input.constraints.for_step(k);
        check_step_constraints(&set, &control)?;
        let omega = omega_table(&input.plant[i], &input.reference_plant[i], gamma_next.as_deref()).map_err(|e| {
            let node = match &e {
                Error::RowAbsoluteContinuity { state_node, .. } => *state_node,
                _ => 0,
            };
            e.at_step(k, node)
        })?;

        let mut table = Vec::with_capacity(nx * nu);
        let mut lambda0 = Vec::with_capacity(nx);
        let mut lambdas = Vec::with_capacity(nx);
        let mut gamma_log = Vec::with_capacity(nx);
        let mut log_gamma_tilde0 = Vec::with_capacity(nx);
        let mut theta0 = Vec::with_capacity(nx);
        let mut row_minimum = Vec::with_capacity(nx);
        let mut thetas: Vec<Vec<f64>> = Vec::with_capacity(nx);
        let mut stats = SolverStats::default();

        for ix in 0..nx {
            input.reference_policy[i].row_with_log_into(ix, &mut g_row, &mut g_log);
            for iu in 0..nu {
                log_base[iu] = g_log[iu] - omega[ix * nu + iu];
            }
            let warm = [thetas.last().map(Vec::as_slice), Some(previous_theta[ix].as_slice())];
            let sol = solve_row(&control, &log_base, &set, warm, &options.solver).map_err(|e| e.at_step(k, ix))?;

            if !set.is_empty() {
                stats.solves += 1;
                stats.total_iterations += sol.iterations;
                stats.max_iterations = stats.max_iterations.max(sol.iterations);
                stats.max_residual = stats.max_residual.max(sol.residual_norm);
            }
            let lh = -sol.minimum_value - (1.0 + sol.lambda0);
            match options.gamma_mode {
                GammaMode::Theorem => {
                    gamma_log.push(-sol.minimum_value);
                    lambda0.push(sol.lambda0);
                }
                GammaMode::AlgorithmLiteral => {
                    gamma_log.push(sol.theta0 + lh);
                    lambda0.push(sol.theta0 - 1.0);
                }
            }
            table.extend_from_slice(sol.density.weights());
            log_gamma_tilde0.push(sol.log_normalizer);
            theta0.push(sol.theta0);
            row_minimum.push(sol.minimum_value);
            lambdas.push(sol.lambdas);
            thetas.push(sol.dual_theta);
        }

        let policy = ConditionalKernel::from_table(KernelRole::Policy, Conditioning::State(state), control, table)?;
        gamma_next = Some(gamma_log.clone());
        previous_theta = thetas;
        steps.push(PolicyStep {
            k,
            policy,
            constraints: set,
            lambda0,
            lambdas,
            omega,
            gamma_log,
            log_gamma_tilde0,
            theta0,
            row_minimum,
            stats,
        });
    }
    steps.reverse();

    let mut marginals = vec![input.prior.clone()];
    for k in 0..n {
        let next = push_state(&marginals[k], &input.plant[k], &steps[k].policy)?;
        marginals.push(next);
    }
    let values = steps
        .iter()
        .map(|s| integrate_table(&marginals[s.k - 1], &s.gamma_log).map(|v| -v))
        .collect::<Result<Vec<f64>>>()?;
    let prior_kl = kl_divergence(&input.prior, &input.reference_prior)?;

    Ok(Policy {
        steps,
        values,
        gamma_mode: options.gamma_mode,
        prior_kl,
        state_marginals: marginals,
    })
}

/// State marginals `q_0, ..., q_n` of the reference joint.
pub fn reference_state_marginals(input: &SynthesisInput) -> Result<Vec<GridDensity>> {
    let mut out = vec![input.reference_prior.clone()];
    for k in 0..input.horizon() {
        let next = push_state(&out[k], &input.reference_plant[k], &input.reference_policy[k])?;
        out.push(next);
    }
    Ok(out)
}

/// Mean of the row means and mean of the row variances of `policy` under
/// the state marginal `state`.
pub fn control_moments(policy: &ConditionalKernel, state: &GridDensity) -> Result<(f64, f64)> {
    policy.check_shape(&Conditioning::State(*state.grid()), policy.outcome(), "policy kernel")?;
    let control = policy.outcome();
    let mut buf = Vec::new();
    let (mut mean, mut var) = (0.0, 0.0);
    for (ix, m) in state.node_masses().into_iter().enumerate() {
        if m <= 0.0 {
            continue;
        }
        policy.row_into(ix, &mut buf);
        let row = GridDensity::new(*control, core::mem::take(&mut buf))?;
        mean += m * row.mean();
        var += m * row.variance();
        buf = row.into_weights();
    }
    Ok((mean, var))
}

/// Variance requirement `scale x` the reference control variance of step
/// `k`, centered on the reference control mean.
pub fn variance_constraint(
    input: &SynthesisInput,
    reference_marginals: &[GridDensity],
    k: usize,
    scale: f64,
    form: VarianceForm,
) -> Result<MomentConstraintSet> {
    if k == 0 || k > input.horizon() || reference_marginals.len() < k {
        return Err(Error::InvalidInput(alloc::format!("variance constraint for step {k}")));
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidInput(alloc::format!("variance scale {scale}")));
    }
    let (mean, var) = control_moments(&input.reference_policy[k - 1], &reference_marginals[k - 1])?;
    MomentConstraintSet::variance(TimeIndex::Step(k), mean, scale * var, form)
}

/// Per-step summary line used by reports.
pub fn describe_step(step: &PolicyStep) -> String {
    alloc::format!(
        "k={} constraints: {}; solves={} max_iter={} max_residual={:e}",
        step.k,
        step.constraints.describe(),
        step.stats.solves,
        step.stats.max_iterations,
        step.stats.max_residual
    )
}
