//! Constrained minimization of `L(f) = KL(f || g) + E_f[alpha]` subject to
//! `E_f[h_i] = H_i`.
//!
//! The minimizer is the exponential tilt
//! `f* = g exp(-alpha - <lambda, h>) / exp(1 + lambda0)` with minimum
//! `L* = -(1 + lambda0 + <lambda, H>)`. The multipliers `lambda` come from
//! the dual solver; `lambda0` is always recomputed by normalizing the tilt.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::constraints::{independence_of_columns, MomentConstraintSet};
use crate::density::{kl_divergence, integrate_table, Grid, GridDensity};
use crate::error::{Error, Result};
use crate::multipliers::{solve_multipliers, DualProblem, SolverSettings};

/// Penalty values below zero but above this are treated as rounding noise.
pub const PENALTY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TiltProblem {
    base: GridDensity,
    penalty: Vec<f64>,
    constraints: MomentConstraintSet,
}

impl TiltProblem {
    pub fn new(base: GridDensity, penalty: Vec<f64>, constraints: MomentConstraintSet) -> Result<Self> {
        let grid = *base.grid();
        if penalty.len() != grid.points() {
            return Err(Error::GridMismatch(format!(
                "penalty has {} values for {} nodes",
                penalty.len(),
                grid.points()
            )));
        }
        for i in base.support() {
            let a = penalty[i];
            if !a.is_finite() || a < -PENALTY_SLACK {
                return Err(Error::Domain { node: i, value: a });
            }
        }
        if !constraints.is_empty() {
            let mut columns = vec![vec![1.0; grid.points()]];
            columns.extend(
                constraints
                    .features()
                    .iter()
                    .map(|h| grid.coordinates().iter().map(|&u| h.eval(u)).collect::<Vec<_>>()),
            );
            let (ok, min_eigenvalue) = independence_of_columns(&columns, &grid, None)?;
            if !ok {
                return Err(Error::NotIndependent { min_eigenvalue });
            }
        }
        Ok(TiltProblem {
            base,
            penalty,
            constraints,
        })
    }

    /// Unpenalized problem.
    pub fn constrained(base: GridDensity, constraints: MomentConstraintSet) -> Result<Self> {
        let n = base.grid().points();
        TiltProblem::new(base, vec![0.0; n], constraints)
    }

    pub fn base(&self) -> &GridDensity {
        &self.base
    }

    pub fn penalty(&self) -> &[f64] {
        &self.penalty
    }

    pub fn constraints(&self) -> &MomentConstraintSet {
        &self.constraints
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiltSolution {
    pub density: GridDensity,
    pub lambda0: f64,
    pub lambdas: Vec<f64>,
    pub minimum_value: f64,
    /// `ln int g exp(-alpha)`, the normalizer of the unconstrained tilt.
    pub log_normalizer: f64,
    /// `ln int f1 exp(-<lambda, h>)` with `f1` the normalized unconstrained
    /// tilt, so that `1 + lambda0 = log_normalizer + theta0`.
    pub theta0: f64,
    /// Full dual vector `[theta0, lambda]` as returned by the solver (empty
    /// without constraints); usable as a warm start.
    pub dual_theta: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
}

pub fn solve_tilt(p: &TiltProblem) -> Result<TiltSolution> {
    solve_tilt_with(p, None, &SolverSettings::default())
}

pub fn solve_tilt_with(p: &TiltProblem, init: Option<&[f64]>, settings: &SolverSettings) -> Result<TiltSolution> {
    let log_base: Vec<f64> = p
        .base
        .weights()
        .iter()
        .zip(&p.penalty)
        .map(|(&g, &a)| if g > 0.0 { libm::log(g) - a } else { f64::NEG_INFINITY })
        .collect();
    tilt_log_table(p.base.grid(), &log_base, &p.constraints, init, settings)
}

/// `KL(f || base) + E_f[alpha]`.
pub fn direct_objective(p: &TiltProblem, f: &GridDensity) -> Result<f64> {
    let kl = kl_divergence(f, &p.base)?;
    Ok(kl + integrate_table(f, &p.penalty)?)
}

fn log_sum_weighted(grid: &Grid, log_values: &[f64]) -> Option<f64> {
    let max = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return None;
    }
    let s: f64 = log_values
        .iter()
        .enumerate()
        .map(|(i, l)| grid.weight(i) * libm::exp(l - max))
        .sum();
    Some(max + libm::log(s))
}

/// Tilts the unnormalized table `exp(log_base)` so that its normalized
/// version meets `set`. Penalty sign is not checked here.
pub(crate) fn tilt_log_table(
    grid: &Grid,
    log_base: &[f64],
    set: &MomentConstraintSet,
    init: Option<&[f64]>,
    settings: &SolverSettings,
) -> Result<TiltSolution> {
    let log_z = log_sum_weighted(grid, log_base)
        .ok_or_else(|| Error::InvalidDensity("tilted base has no mass".into()))?;
    let log_f1: Vec<f64> = log_base.iter().map(|l| l - log_z).collect();

    if set.is_empty() {
        let density = GridDensity::new(*grid, log_f1.iter().map(|l| libm::exp(*l)).collect())?;
        return Ok(TiltSolution {
            density,
            lambda0: log_z - 1.0,
            lambdas: Vec::new(),
            minimum_value: -log_z,
            log_normalizer: log_z,
            theta0: 0.0,
            dual_theta: Vec::new(),
            iterations: 0,
            residual_norm: 0.0,
        });
    }

    let columns = set.table(grid);
    check_range(&log_f1, &columns, set)?;

    let problem = DualProblem::with_normalization_log(*grid, &log_f1, set)?;
    let init = init.filter(|t| t.len() == set.len() + 1);
    let dual = solve_multipliers(&problem, init, settings).map_err(|e| match e {
        Error::DivergingMultipliers { theta, .. } => diverged(&log_f1, &columns, set, &theta),
        other => other,
    })?;
    let lambdas = dual.theta[1..].to_vec();

    let tilted: Vec<f64> = log_base
        .iter()
        .zip(&columns)
        .map(|(l, h)| l - h.iter().zip(&lambdas).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let log_zl = log_sum_weighted(grid, &tilted)
        .ok_or_else(|| Error::InvalidDensity("constrained tilt has no mass".into()))?;
    let weights: Vec<f64> = tilted.iter().map(|l| libm::exp(l - log_zl)).collect();
    let density = GridDensity::new(*grid, weights)?;
    let lh: f64 = lambdas.iter().zip(set.targets()).map(|(l, h)| l * h).sum();
    Ok(TiltSolution {
        density,
        lambda0: log_zl - 1.0,
        lambdas,
        minimum_value: -(log_zl + lh),
        log_normalizer: log_z,
        theta0: log_zl - log_z,
        residual_norm: dual.residual_norm(),
        iterations: dual.iterations,
        dual_theta: dual.theta,
    })
}

fn feature_range(log_f1: &[f64], columns: &[Vec<f64>], i: usize) -> (f64, f64) {
    log_f1
        .iter()
        .zip(columns)
        .filter(|(l, _)| **l > f64::NEG_INFINITY)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, h)| (lo.min(h[i]), hi.max(h[i])))
}

fn check_range(log_f1: &[f64], columns: &[Vec<f64>], set: &MomentConstraintSet) -> Result<()> {
    for (i, &target) in set.targets().iter().enumerate() {
        let (lower, upper) = feature_range(log_f1, columns, i);
        let slack = 1e-12 * (upper - lower);
        if !(target > lower + slack && target < upper - slack) {
            return Err(Error::InfeasibleConstraints {
                index: i,
                target,
                lower,
                upper,
            });
        }
    }
    Ok(())
}

fn diverged(log_f1: &[f64], columns: &[Vec<f64>], set: &MomentConstraintSet, theta: &[f64]) -> Error {
    let index = theta
        .iter()
        .skip(1)
        .enumerate()
        .fold((0, 0.0), |(bi, bv), (i, t)| if libm::fabs(*t) > bv { (i, libm::fabs(*t)) } else { (bi, bv) })
        .0;
    let (lower, upper) = feature_range(log_f1, columns, index);
    Error::InfeasibleConstraints {
        index,
        target: set.targets()[index],
        lower,
        upper,
    }
}
