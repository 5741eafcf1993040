//! Trajectory demonstrations and the factor estimates built from them.
//!
//! A [`TrajectorySet`] holds trips of timed `(x, u)` samples plus named extra
//! channels. Trips are aligned to the steps `0..=n` of the horizon, after
//! which the prior `p(x_0)`, plant kernels `p(x_k | u_k, x_{k-1})` and policy
//! kernels `p(u_k | x_{k-1})` are estimated either by conditional histograms
//! or by Gaussian moment matching (the maximum-entropy density for given
//! first and second moments).

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::density::{
    conditional_kl_with, discretize, Conditioning, ConditionalKernel, GaussianDensity, Grid, GridDensity, KernelBody,
    KernelRole, LinearGaussian, RowScratch, SUPPORT_EPSILON,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x: f64,
    pub u: f64,
    /// Values of the extra channels, in [`TrajectorySet::channels`] order.
    pub extras: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trip {
    pub trip_id: String,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    channels: Vec<String>,
    trips: Vec<Trip>,
}

impl TrajectorySet {
    pub fn new(channels: Vec<String>, trips: Vec<Trip>) -> Result<Self> {
        if trips.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let fail = |trip: &Trip, reason: String| Error::TripValidation {
            trip_id: trip.trip_id.clone(),
            reason,
        };
        let mut ids: Vec<&str> = trips.iter().map(|t| t.trip_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::TripValidation {
                trip_id: w[0].to_string(),
                reason: "duplicate trip id".into(),
            });
        }
        for trip in &trips {
            if trip.samples.len() < 2 {
                return Err(fail(trip, format!("{} samples, need at least 2", trip.samples.len())));
            }
            for (i, s) in trip.samples.iter().enumerate() {
                if s.extras.len() != channels.len() {
                    return Err(fail(
                        trip,
                        format!("sample {i} has {} extra channels, expected {}", s.extras.len(), channels.len()),
                    ));
                }
                if !s.t.is_finite() || !s.x.is_finite() || !s.u.is_finite() || s.extras.iter().any(|v| !v.is_finite()) {
                    return Err(fail(trip, format!("sample {i} has a non-finite value")));
                }
            }
            if let Some(i) = trip.samples.windows(2).position(|w| !(w[1].t > w[0].t)) {
                return Err(fail(trip, format!("timestamps not strictly increasing at sample {}", i + 1)));
            }
        }
        Ok(TrajectorySet { channels, trips })
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn trips(&self) -> &[Trip] {
        &self.trips
    }

    pub fn len(&self) -> usize {
        self.trips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trips.is_empty()
    }

    pub fn sample_count(&self) -> usize {
        self.trips.iter().map(|t| t.samples.len()).sum()
    }

    fn channel_index(&self, name: &str) -> Result<usize> {
        self.channels
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::MissingChannel {
                name: name.to_string(),
                available: self.channels.clone(),
            })
    }

    /// Mean absolute value of `channel` over each trip.
    pub fn channel_scores(&self, channel: &str) -> Result<Vec<f64>> {
        let c = self.channel_index(channel)?;
        Ok(self
            .trips
            .iter()
            .map(|t| t.samples.iter().map(|s| libm::fabs(s.extras[c])).sum::<f64>() / t.samples.len() as f64)
            .collect())
    }
}

/// The `n_keep` trips with the lowest mean `|score_channel|`, ties broken
/// by trip id. Kept trips stay in dataset order.
pub fn select_reference(ts: &TrajectorySet, score_channel: &str, n_keep: usize) -> Result<TrajectorySet> {
    if n_keep == 0 || n_keep > ts.len() {
        return Err(Error::InvalidInput(format!("n_keep = {n_keep} with {} trips", ts.len())));
    }
    let scores = ts.channel_scores(score_channel)?;
    let mut order: Vec<usize> = (0..ts.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .total_cmp(&scores[b])
            .then_with(|| ts.trips[a].trip_id.cmp(&ts.trips[b].trip_id))
    });
    let mut keep: Vec<usize> = order[..n_keep].to_vec();
    keep.sort_unstable();
    let trips = keep.into_iter().map(|i| ts.trips[i].clone()).collect();
    TrajectorySet::new(ts.channels.clone(), trips)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EstimationMethod {
    Histogram,
    #[default]
    GaussianMaxent,
}

impl FromStr for EstimationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "histogram" => Ok(EstimationMethod::Histogram),
            "gaussian_maxent" => Ok(EstimationMethod::GaussianMaxent),
            other => Err(Error::InvalidInput(format!("estimation method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Alignment {
    /// Nearest-time sample at `n + 1` evenly spaced times.
    #[default]
    ByIndex,
    /// Nearest-state sample at `n + 1` evenly spaced state levels between the
    /// first and last state of the trip.
    ByStateBin,
}

impl FromStr for Alignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "by_index" => Ok(Alignment::ByIndex),
            "by_state_bin" => Ok(Alignment::ByStateBin),
            other => Err(Error::InvalidInput(format!("alignment `{other}`"))),
        }
    }
}

pub const DEFAULT_SMOOTHING: f64 = 1e-6;
pub const DEFAULT_MIN_BIN_COUNT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimationConfig {
    pub method: EstimationMethod,
    pub state_grid: Grid,
    pub control_grid: Grid,
    /// Pseudo-count per node, as a fraction of the row's sample count.
    pub smoothing: f64,
    pub alignment: Alignment,
    pub min_bin_count: usize,
}

impl EstimationConfig {
    pub fn new(method: EstimationMethod, state_grid: Grid, control_grid: Grid) -> Self {
        EstimationConfig {
            method,
            state_grid,
            control_grid,
            smoothing: DEFAULT_SMOOTHING,
            alignment: Alignment::default(),
            min_bin_count: DEFAULT_MIN_BIN_COUNT,
        }
    }
}

/// One trip resampled to the horizon: `x[0..=n]`, `u[0..n]` (`u[k-1]` is `u_k`).
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedTrip {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

fn nearest_by<F: Fn(&Sample) -> f64>(samples: &[Sample], target: f64, key: F) -> usize {
    let mut best = 0;
    let mut dist = f64::INFINITY;
    for (i, s) in samples.iter().enumerate() {
        let d = libm::fabs(key(s) - target);
        if d < dist {
            dist = d;
            best = i;
        }
    }
    best
}

pub fn align(ts: &TrajectorySet, horizon: usize, alignment: Alignment) -> Result<Vec<AlignedTrip>> {
    if horizon == 0 {
        return Err(Error::InvalidInput("horizon must be positive".into()));
    }
    Ok(ts
        .trips
        .iter()
        .map(|trip| {
            let s = &trip.samples;
            let (first, last) = (&s[0], &s[s.len() - 1]);
            let picks: Vec<usize> = (0..=horizon)
                .map(|j| {
                    let frac = j as f64 / horizon as f64;
                    match alignment {
                        Alignment::ByIndex => nearest_by(s, first.t + frac * (last.t - first.t), |p| p.t),
                        Alignment::ByStateBin => nearest_by(s, first.x + frac * (last.x - first.x), |p| p.x),
                    }
                })
                .collect();
            AlignedTrip {
                x: picks.iter().map(|&i| s[i].x).collect(),
                u: picks[1..].iter().map(|&i| s[i].u).collect(),
            }
        })
        .collect())
}

/// Prior, plant and policy estimates from one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Factors {
    pub prior: GridDensity,
    pub plant: Vec<ConditionalKernel>,
    pub policy: Vec<ConditionalKernel>,
}

impl Factors {
    pub fn horizon(&self) -> usize {
        self.plant.len()
    }

    /// Relabels the kernels as reference (`g`-side) or closed-loop factors.
    pub fn with_reference_roles(mut self, reference: bool) -> Self {
        let (p, q) = if reference {
            (KernelRole::ReferencePlant, KernelRole::ReferencePolicy)
        } else {
            (KernelRole::Plant, KernelRole::Policy)
        };
        self.plant = self.plant.into_iter().map(|k| k.with_role(p)).collect();
        self.policy = self.policy.into_iter().map(|k| k.with_role(q)).collect();
        self
    }
}

fn check_coverage(grid: &Grid, values: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    let half = 0.5 * grid.spacing();
    for v in values {
        if v < grid.lower() - half || v > grid.upper() + half {
            return Err(Error::InvalidInput(format!(
                "{what} value {v} outside grid [{}, {}]",
                grid.lower(),
                grid.upper()
            )));
        }
    }
    Ok(())
}

pub fn estimate_factors(ts: &TrajectorySet, cfg: &EstimationConfig, horizon: usize) -> Result<Factors> {
    if !(cfg.smoothing >= 0.0) || !cfg.smoothing.is_finite() {
        return Err(Error::InvalidInput(format!("smoothing {}", cfg.smoothing)));
    }
    let aligned = align(ts, horizon, cfg.alignment)?;
    check_coverage(&cfg.state_grid, aligned.iter().flat_map(|a| a.x.iter().copied()), "state")?;
    check_coverage(&cfg.control_grid, aligned.iter().flat_map(|a| a.u.iter().copied()), "control")?;
    match cfg.method {
        EstimationMethod::GaussianMaxent => fit_gaussian(&aligned, cfg, horizon),
        EstimationMethod::Histogram => fit_histogram(&aligned, cfg, horizon),
    }
}

/// Ordinary least squares of `y` on `[1, columns...]` with moment-matched
/// residual variance. Regressors without spread are dropped (slope 0).
fn regress(y: &[f64], columns: &[Vec<f64>], what: &str) -> Result<LinearGaussian> {
    let m = y.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / m;
    let y_mean = mean(y);
    let spread = |v: &[f64], mu: f64| v.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / m;
    let y_var = spread(y, y_mean);
    if !(y_var > 1e-12 * (1.0 + y_mean * y_mean)) {
        return Err(Error::DegenerateFit(format!("{what}: zero variance")));
    }
    let means: Vec<f64> = columns.iter().map(|c| mean(c)).collect();
    let active: Vec<usize> = (0..columns.len())
        .filter(|&j| spread(&columns[j], means[j]) > 1e-12 * (1.0 + means[j] * means[j]))
        .collect();
    let mut slopes = vec![0.0; columns.len()];
    if !active.is_empty() {
        let p = active.len();
        let cov = DMatrix::from_fn(p, p, |a, b| {
            let (ca, cb) = (&columns[active[a]], &columns[active[b]]);
            (0..y.len())
                .map(|i| (ca[i] - means[active[a]]) * (cb[i] - means[active[b]]))
                .sum::<f64>()
                / m
        });
        let rhs = DVector::from_fn(p, |a, _| {
            let c = &columns[active[a]];
            (0..y.len()).map(|i| (c[i] - means[active[a]]) * (y[i] - y_mean)).sum::<f64>() / m
        });
        let sol = cov
            .cholesky()
            .ok_or_else(|| Error::DegenerateFit(format!("{what}: collinear regressors")))?
            .solve(&rhs);
        for (a, &j) in active.iter().enumerate() {
            slopes[j] = sol[a];
        }
    }
    let intercept = y_mean - slopes.iter().zip(&means).map(|(s, mu)| s * mu).sum::<f64>();
    let variance = (0..y.len())
        .map(|i| {
            let fit = intercept + slopes.iter().zip(columns).map(|(s, c)| s * c[i]).sum::<f64>();
            (y[i] - fit) * (y[i] - fit)
        })
        .sum::<f64>()
        / m;
    if !(variance > 1e-12 * y_var) {
        return Err(Error::DegenerateFit(format!("{what}: zero residual variance")));
    }
    Ok(LinearGaussian {
        intercept,
        slopes,
        variance,
    })
}

fn fit_gaussian(aligned: &[AlignedTrip], cfg: &EstimationConfig, horizon: usize) -> Result<Factors> {
    let (state, control) = (cfg.state_grid, cfg.control_grid);
    let x0: Vec<f64> = aligned.iter().map(|a| a.x[0]).collect();
    let p0 = regress(&x0, &[], "prior")?;
    let prior = discretize(&GaussianDensity::new(p0.intercept, p0.variance)?, &state).density;
    let mut plant = Vec::with_capacity(horizon);
    let mut policy = Vec::with_capacity(horizon);
    for k in 1..=horizon {
        let xp: Vec<f64> = aligned.iter().map(|a| a.x[k - 1]).collect();
        let xk: Vec<f64> = aligned.iter().map(|a| a.x[k]).collect();
        let uk: Vec<f64> = aligned.iter().map(|a| a.u[k - 1]).collect();
        let pol = regress(&uk, &[xp.clone()], &format!("policy step {k}"))?;
        let pla = regress(&xk, &[uk, xp], &format!("plant step {k}"))?;
        policy.push(ConditionalKernel::linear_gaussian(
            KernelRole::Policy,
            Conditioning::State(state),
            control,
            pol,
        )?);
        plant.push(ConditionalKernel::linear_gaussian(
            KernelRole::Plant,
            Conditioning::ControlState { control, state },
            state,
            pla,
        )?);
    }
    Ok(Factors { prior, plant, policy })
}

/// Row densities from per-row node counts (`counts[row * n + node]`).
fn histogram_rows(
    counts: &[f64],
    outcome: &Grid,
    smoothing: f64,
    min_count: usize,
    k: usize,
) -> Result<Vec<f64>> {
    let n = outcome.points();
    let mut out = Vec::with_capacity(counts.len());
    for (bin, row) in counts.chunks(n).enumerate() {
        let total: f64 = row.iter().sum();
        if smoothing == 0.0 && (total as usize) < min_count {
            return Err(Error::SparseBin {
                k,
                bin,
                count: total as usize,
                required: min_count,
            });
        }
        if total == 0.0 {
            out.extend((0..n).map(|_| 1.0));
            continue;
        }
        let pseudo = smoothing * total;
        out.extend(row.iter().enumerate().map(|(i, c)| (c + pseudo) / outcome.weight(i)));
    }
    Ok(out)
}

fn fit_histogram(aligned: &[AlignedTrip], cfg: &EstimationConfig, horizon: usize) -> Result<Factors> {
    let (state, control) = (cfg.state_grid, cfg.control_grid);
    let (nx, nu) = (state.points(), control.points());
    let mut prior_counts = vec![0.0; nx];
    for a in aligned {
        prior_counts[state.nearest(a.x[0])] += 1.0;
    }
    let prior_rows = histogram_rows(&prior_counts, &state, cfg.smoothing, cfg.min_bin_count, 0)?;
    let prior = GridDensity::new(state, prior_rows)?;
    let mut plant = Vec::with_capacity(horizon);
    let mut policy = Vec::with_capacity(horizon);
    for k in 1..=horizon {
        let mut pol = vec![0.0; nx * nu];
        let mut pla = vec![0.0; nx * nu * nx];
        for a in aligned {
            let ix = state.nearest(a.x[k - 1]);
            let iu = control.nearest(a.u[k - 1]);
            let jx = state.nearest(a.x[k]);
            pol[ix * nu + iu] += 1.0;
            pla[(ix * nu + iu) * nx + jx] += 1.0;
        }
        let pol = histogram_rows(&pol, &control, cfg.smoothing, cfg.min_bin_count, k)?;
        let pla = histogram_rows(&pla, &state, cfg.smoothing, cfg.min_bin_count, k)?;
        policy.push(ConditionalKernel::from_table(
            KernelRole::Policy,
            Conditioning::State(state),
            control,
            pol,
        )?);
        plant.push(ConditionalKernel::from_table(
            KernelRole::Plant,
            Conditioning::ControlState { control, state },
            state,
            pla,
        )?);
    }
    Ok(Factors { prior, plant, policy })
}

/// Where the support of an `f`-side factor leaves the support of its
/// `g`-side counterpart.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContinuityReport {
    pub prior_nodes: Vec<usize>,
    /// `(k, conditioning row)` pairs of plant kernels.
    pub plant_rows: Vec<(usize, usize)>,
    /// `(k, conditioning row)` pairs of policy kernels.
    pub policy_rows: Vec<(usize, usize)>,
}

impl ContinuityReport {
    pub fn ok(&self) -> bool {
        self.prior_nodes.is_empty() && self.plant_rows.is_empty() && self.policy_rows.is_empty()
    }
}

fn violating_rows(f: &ConditionalKernel, g: &ConditionalKernel, k: usize, out: &mut Vec<(usize, usize)>) -> Result<()> {
    g.check_shape(f.conditioning(), f.outcome(), "continuity check")?;
    let mut scratch = RowScratch::default();
    let parametric = matches!(g.body(), KernelBody::LinearGaussian(_));
    if parametric {
        return Ok(());
    }
    for r in 0..f.rows() {
        match conditional_kl_with(f, g, r, &mut scratch) {
            Ok(_) => {}
            Err(Error::AbsoluteContinuity { .. }) => out.push((k, r)),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Checks `S(f) <= S(g)` factor by factor.
pub fn check_continuity(f: &Factors, g: &Factors) -> Result<ContinuityReport> {
    if f.horizon() != g.horizon() {
        return Err(Error::InvalidInput("factor horizons differ".into()));
    }
    let mut report = ContinuityReport::default();
    let fmax = f.prior.max_weight();
    for (i, (&a, &b)) in f.prior.weights().iter().zip(g.prior.weights()).enumerate() {
        if a > SUPPORT_EPSILON * fmax && !(b >= f64::MIN_POSITIVE) {
            report.prior_nodes.push(i);
        }
    }
    for k in 0..f.horizon() {
        violating_rows(&f.plant[k], &g.plant[k], k + 1, &mut report.plant_rows)?;
        violating_rows(&f.policy[k], &g.policy[k], k + 1, &mut report.policy_rows)?;
    }
    Ok(report)
}
