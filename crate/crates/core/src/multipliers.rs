//! Lagrange multipliers of a moment problem, found by minimizing the convex
//! dual
//!
//! ```text
//! J(theta) = <theta, H> + sum_k w_k b(z_k) exp(-<theta, h(z_k)>)
//! ```
//!
//! whose gradient `H - E_{f2}[h]` vanishes exactly when the tilted table
//! `f2 = b exp(-<theta, h>)` meets the targets, and whose Hessian
//! `E_{f2}[h h^T]` is positive definite for independent features. The
//! minimizer is found with damped Newton steps and Armijo backtracking.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::constraints::MomentConstraintSet;
use crate::density::Grid;
use crate::error::{Error, Result};

/// Largest exponent accepted before `exp` would overflow.
const MAX_EXPONENT: f64 = 700.0;

/// Relative size of a predicted decrease in `J` treated as rounding noise.
const ROUNDING_DECREASE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// Target `|grad|_inf`.
    pub grad_tol: f64,
    /// `|grad|_inf` accepted when the iteration stalls or hits the cap.
    pub accept_tol: f64,
    pub max_iter: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub max_halvings: usize,
    /// `|theta|_inf` beyond which the multipliers are declared divergent.
    pub divergence: f64,
    /// Normalized-Hessian eigenvalue below which a gradient step is used.
    pub singular_eigenvalue: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            grad_tol: 1e-10,
            accept_tol: 1e-8,
            max_iter: 200,
            armijo: 1e-4,
            max_halvings: 60,
            divergence: 1e6,
            singular_eigenvalue: 1e-12,
        }
    }
}

/// Dual of a moment problem over the positive nodes of `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualProblem {
    grid: Grid,
    /// Nodes where the base table is positive.
    nodes: Vec<usize>,
    /// `ln b + ln w` per retained node.
    log_mass: Vec<f64>,
    /// Row-major `nodes.len() x c` feature values.
    features: Vec<f64>,
    targets: Vec<f64>,
}

impl DualProblem {
    /// `columns[i][node]` holds feature `i` at every grid node.
    pub fn from_tables(grid: Grid, base: &[f64], columns: &[Vec<f64>], targets: Vec<f64>) -> Result<Self> {
        if let Some((i, b)) = base.iter().enumerate().find(|(_, b)| !(**b >= 0.0) || !b.is_finite()) {
            return Err(Error::InvalidDensity(format!("base value {b} at node {i}")));
        }
        let log_base: Vec<f64> = base.iter().map(|&b| libm::log(b)).collect();
        DualProblem::from_log_tables(grid, &log_base, columns, targets)
    }

    /// As [`DualProblem::from_tables`] with the base given by its logarithm;
    /// `-inf` marks nodes outside the support.
    pub fn from_log_tables(grid: Grid, log_base: &[f64], columns: &[Vec<f64>], targets: Vec<f64>) -> Result<Self> {
        let n = grid.points();
        if log_base.len() != n || columns.iter().any(|c| c.len() != n) {
            return Err(Error::GridMismatch("dual problem tables do not match the grid".into()));
        }
        if columns.len() != targets.len() {
            return Err(Error::InvalidInput(format!(
                "{} features but {} targets",
                columns.len(),
                targets.len()
            )));
        }
        if let Some((i, l)) = log_base.iter().enumerate().find(|(_, l)| l.is_nan() || **l == f64::INFINITY) {
            return Err(Error::InvalidDensity(format!("log base value {l} at node {i}")));
        }
        let nodes: Vec<usize> = (0..n).filter(|&k| log_base[k] > f64::NEG_INFINITY).collect();
        if nodes.is_empty() {
            return Err(Error::InvalidDensity("base table has no positive node".into()));
        }
        let c = columns.len();
        let mut features = Vec::with_capacity(nodes.len() * c);
        for &k in &nodes {
            for col in columns {
                let v = col[k];
                if !v.is_finite() {
                    return Err(Error::Domain { node: k, value: v });
                }
                features.push(v);
            }
        }
        let log_mass = nodes.iter().map(|&k| log_base[k] + libm::log(grid.weight(k))).collect();
        Ok(DualProblem {
            grid,
            nodes,
            log_mass,
            features,
            targets,
        })
    }

    fn normalization_columns(grid: &Grid, set: &MomentConstraintSet) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut columns = vec![vec![1.0; grid.points()]];
        let mut targets = vec![1.0];
        for (h, t) in set.features().iter().zip(set.targets()) {
            columns.push(grid.coordinates().iter().map(|&u| h.eval(u)).collect());
            targets.push(*t);
        }
        (columns, targets)
    }

    /// Moment problem for a density: the rows are `[1, h_1, ..., h_c]` with
    /// targets `[1, H_1, ..., H_c]`.
    pub fn with_normalization(grid: Grid, base: &[f64], set: &MomentConstraintSet) -> Result<Self> {
        let (columns, targets) = DualProblem::normalization_columns(&grid, set);
        DualProblem::from_tables(grid, base, &columns, targets)
    }

    pub fn with_normalization_log(grid: Grid, log_base: &[f64], set: &MomentConstraintSet) -> Result<Self> {
        let (columns, targets) = DualProblem::normalization_columns(&grid, set);
        DualProblem::from_log_tables(grid, log_base, &columns, targets)
    }

    /// Same problem with the base raised to the power `tau`.
    fn powered(&self, tau: f64) -> DualProblem {
        let log_mass = self
            .nodes
            .iter()
            .zip(&self.log_mass)
            .map(|(&k, &l)| {
                let lw = libm::log(self.grid.weight(k));
                tau * (l - lw) + lw
            })
            .collect();
        DualProblem {
            log_mass,
            ..self.clone()
        }
    }

    pub fn dim(&self) -> usize {
        self.targets.len()
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    fn feature_row(&self, j: usize) -> &[f64] {
        let c = self.dim();
        &self.features[j * c..(j + 1) * c]
    }

    /// Exponents `ln(w b) - <theta, h>` per retained node and their maximum.
    fn exponents(&self, theta: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mut max = f64::NEG_INFINITY;
        let mut arg = 0;
        let e: Vec<f64> = (0..self.nodes.len())
            .map(|j| {
                let dot: f64 = self.feature_row(j).iter().zip(theta).map(|(h, t)| h * t).sum();
                let v = self.log_mass[j] - dot;
                if v > max {
                    max = v;
                    arg = j;
                }
                v
            })
            .collect();
        if max > MAX_EXPONENT || max.is_nan() {
            return Err(Error::Overflow {
                node: self.nodes[arg],
                exponent: max,
            });
        }
        Ok((e, max))
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "theta has {} entries, expected {}",
                theta.len(),
                self.dim()
            )));
        }
        if let Some(t) = theta.iter().find(|t| !t.is_finite()) {
            return Err(Error::InvalidInput(format!("theta entry {t}")));
        }
        Ok(())
    }

    fn value_unchecked(&self, theta: &[f64]) -> Result<f64> {
        let (e, max) = self.exponents(theta)?;
        let sum: f64 = e.iter().map(|v| libm::exp(v - max)).sum();
        let lin: f64 = theta.iter().zip(&self.targets).map(|(t, h)| t * h).sum();
        Ok(lin + libm::exp(max) * sum)
    }

    /// Value, gradient and Hessian at `theta`.
    fn evaluate(&self, theta: &[f64]) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let c = self.dim();
        let (e, max) = self.exponents(theta)?;
        let scale = libm::exp(max);
        let mut mass = 0.0;
        let mut first = DVector::zeros(c);
        let mut second = DMatrix::zeros(c, c);
        for (j, ej) in e.iter().enumerate() {
            let p = libm::exp(ej - max);
            if p == 0.0 {
                continue;
            }
            mass += p;
            let h = self.feature_row(j);
            for a in 0..c {
                let pa = p * h[a];
                first[a] += pa;
                for b in a..c {
                    second[(a, b)] += pa * h[b];
                }
            }
        }
        for a in 0..c {
            for b in 0..a {
                second[(a, b)] = second[(b, a)];
            }
        }
        first *= scale;
        second *= scale;
        let lin: f64 = theta.iter().zip(&self.targets).map(|(t, h)| t * h).sum();
        let value = lin + scale * mass;
        let gradient = DVector::from_column_slice(&self.targets) - first;
        Ok((value, gradient, second))
    }

    /// Range check: each non-constant feature's target, relative to the
    /// implied total mass, must lie strictly inside the feature's range over
    /// the retained nodes.
    fn check_achievable(&self) -> Result<()> {
        let c = self.dim();
        let m = self.nodes.len();
        let ranges: Vec<(f64, f64)> = (0..c)
            .map(|i| {
                (0..m).map(|j| self.features[j * c + i]).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                })
            })
            .collect();
        let is_constant = |(lo, hi): (f64, f64)| hi - lo <= 1e-14 * hi.abs().max(lo.abs()).max(1.0);
        let mass = match (0..c).find(|&i| is_constant(ranges[i]) && ranges[i].0 != 0.0) {
            Some(i) => self.targets[i] / ranges[i].0,
            None => {
                let (e, max) = self.exponents(&vec![0.0; c])?;
                libm::exp(max) * e.iter().map(|v| libm::exp(v - max)).sum::<f64>()
            }
        };
        if !(mass > 0.0) {
            return Err(Error::DivergingMultipliers {
                theta_norm: f64::INFINITY,
                theta: vec![0.0; c],
            });
        }
        for (i, &(lo, hi)) in ranges.iter().enumerate() {
            if is_constant((lo, hi)) {
                continue;
            }
            let implied = self.targets[i] / mass;
            let slack = 1e-12 * (hi - lo);
            if !(implied > lo + slack && implied < hi - slack) {
                return Err(Error::DivergingMultipliers {
                    theta_norm: f64::INFINITY,
                    theta: vec![0.0; c],
                });
            }
        }
        Ok(())
    }
}

/// `J(theta)`.
pub fn dual_value(p: &DualProblem, theta: &[f64]) -> Result<f64> {
    p.check_theta(theta)?;
    let v = p.value_unchecked(theta)?;
    if !v.is_finite() {
        return Err(Error::Overflow {
            node: p.nodes[0],
            exponent: f64::INFINITY,
        });
    }
    Ok(v)
}

/// `grad J(theta) = H - sum_k w_k f2(z_k) h(z_k)`.
pub fn dual_gradient(p: &DualProblem, theta: &[f64]) -> Result<Vec<f64>> {
    p.check_theta(theta)?;
    let (_, g, _) = p.evaluate(theta)?;
    Ok(g.iter().copied().collect())
}

/// `Hess J(theta) = sum_k w_k f2(z_k) h(z_k) h(z_k)^T`, row-major.
pub fn dual_hessian(p: &DualProblem, theta: &[f64]) -> Result<Vec<f64>> {
    p.check_theta(theta)?;
    let (_, _, h) = p.evaluate(theta)?;
    Ok(h.transpose().iter().copied().collect())
}

/// One accepted Newton iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterateRecord {
    pub objective: f64,
    pub grad_norm: f64,
    /// Smallest eigenvalue of the (unnormalized) Hessian.
    pub min_hessian_eigenvalue: f64,
    /// Accepted step length (0 for the final iterate).
    pub step: f64,
    pub newton: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub theta: Vec<f64>,
    pub objective: f64,
    /// `H - E_{f2}[h]` at `theta`.
    pub residual: Vec<f64>,
    pub iterations: usize,
    pub trace: Vec<IterateRecord>,
}

impl DualSolution {
    pub fn residual_norm(&self) -> f64 {
        inf_norm(&self.residual)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(libm::fabs(*x)))
}

fn eigen_bounds(h: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(h.clone()).eigenvalues;
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

fn normalized_min_eigenvalue(h: &DMatrix<f64>) -> f64 {
    let c = h.nrows();
    let d: Vec<f64> = (0..c).map(|i| h[(i, i)]).collect();
    if d.iter().any(|v| !(*v > 0.0)) {
        return 0.0;
    }
    let n = DMatrix::from_fn(c, c, |i, j| h[(i, j)] / libm::sqrt(d[i] * d[j]));
    eigen_bounds(&n).0
}

/// Minimizes the dual from `init` (zeros when `None`). A start that stalls
/// is retried by continuation: the problem is solved for the base `b^tau`
/// with `tau` raised from 0 to 1, each stage warm-started from the last.
pub fn solve_multipliers(p: &DualProblem, init: Option<&[f64]>, settings: &SolverSettings) -> Result<DualSolution> {
    match newton(p, init, settings) {
        Err(e @ Error::NonConvergence { .. }) => continuation(p, settings).map_err(|_| e),
        other => other,
    }
}

const MIN_CONTINUATION_STEP: f64 = 1.0 / 4096.0;

fn continuation(p: &DualProblem, settings: &SolverSettings) -> Result<DualSolution> {
    let mut theta = newton(&p.powered(0.0), None, settings)?.theta;
    let mut tau: f64 = 0.0;
    let mut step = 0.25;
    loop {
        let next = (tau + step).min(1.0);
        match newton(&p.powered(next), Some(&theta), settings) {
            Ok(sol) if next == 1.0 => return Ok(sol),
            Ok(sol) => {
                theta = sol.theta;
                tau = next;
                step *= 2.0;
            }
            Err(e) => {
                step *= 0.5;
                if step < MIN_CONTINUATION_STEP {
                    return Err(e);
                }
            }
        }
    }
}

fn newton(p: &DualProblem, init: Option<&[f64]>, settings: &SolverSettings) -> Result<DualSolution> {
    let c = p.dim();
    let mut theta: Vec<f64> = match init {
        Some(t) => {
            p.check_theta(t)?;
            t.to_vec()
        }
        None => vec![0.0; c],
    };
    p.check_achievable()?;

    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let (value, grad, hess) = p.evaluate(&theta)?;
        let grad_norm = inf_norm(grad.as_slice());
        let (min_eig, _) = eigen_bounds(&hess);
        if grad_norm <= settings.grad_tol || iterations >= settings.max_iter {
            trace.push(IterateRecord {
                objective: value,
                grad_norm,
                min_hessian_eigenvalue: min_eig,
                step: 0.0,
                newton: false,
            });
            return finish(theta, value, grad, iterations, trace, settings);
        }
        if inf_norm(&theta) > settings.divergence {
            return Err(Error::DivergingMultipliers {
                theta_norm: inf_norm(&theta),
                theta,
            });
        }

        // grad J = H - E[h]; the Newton direction solves Hess d = -grad J.
        let newton_dir = if normalized_min_eigenvalue(&hess) >= settings.singular_eigenvalue {
            hess.clone().cholesky().map(|ch| -ch.solve(&grad))
        } else {
            None
        };
        let newton = newton_dir.is_some();
        let dir = newton_dir.unwrap_or_else(|| -grad.clone());
        let slope = grad.dot(&dir);

        // Near the minimizer the decrease in J falls below its rounding error,
        // so candidates that do not raise J are judged by the gradient norm.
        let flat = -slope <= ROUNDING_DECREASE * (libm::fabs(value) + 1.0);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=settings.max_halvings {
            let cand: Vec<f64> = theta.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
            let ok = if flat {
                matches!(p.evaluate(&cand), Ok((v, g, _)) if v <= value && inf_norm(g.as_slice()) < grad_norm)
            } else {
                matches!(p.value_unchecked(&cand), Ok(v) if v.is_finite() && v <= value + settings.armijo * t * slope)
            };
            if ok {
                accepted = Some(cand);
                break;
            }
            t *= 0.5;
        }
        trace.push(IterateRecord {
            objective: value,
            grad_norm,
            min_hessian_eigenvalue: min_eig,
            step: if accepted.is_some() { t } else { 0.0 },
            newton,
        });
        match accepted {
            Some(next) => {
                theta = next;
                iterations += 1;
            }
            None => return finish(theta, value, grad, iterations, trace, settings),
        }
    }
}

fn finish(
    theta: Vec<f64>,
    value: f64,
    grad: DVector<f64>,
    iterations: usize,
    trace: Vec<IterateRecord>,
    settings: &SolverSettings,
) -> Result<DualSolution> {
    let grad_norm = inf_norm(grad.as_slice());
    if grad_norm > settings.accept_tol {
        if inf_norm(&theta) > settings.divergence {
            return Err(Error::DivergingMultipliers {
                theta_norm: inf_norm(&theta),
                theta,
            });
        }
        return Err(Error::NonConvergence {
            iterations,
            grad_norm,
            theta,
        });
    }
    Ok(DualSolution {
        theta,
        objective: value,
        residual: grad.iter().copied().collect(),
        iterations,
        trace,
    })
}
