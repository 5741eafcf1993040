//! Grid and Gaussian densities, trapezoid quadrature, KL divergence and
//! sampling.
//!
//! Every density lives on a uniform [`Grid`]. Integrals use the composite
//! trapezoid rule, so a [`GridDensity`] is normalized when
//! `sum_i w_i f_i = 1` with `w_i` the trapezoid weights. Node `i` "owns" the
//! cell `[x_i - h/2, x_i + h/2]` clipped to the grid, whose length is exactly
//! `w_i`; sampling and histogram estimation use these cells so that node
//! masses, empirical frequencies and quadrature all agree.

mod kernel;

pub use kernel::{
    conditional_kl, conditional_kl_with, push_state, Conditioning, ConditionalKernel, FactoredJoint, KernelBody, KernelRole,
    LinearGaussian, RowScratch,
};

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};

/// Relative threshold (w.r.t. the maximum weight) defining the numerical
/// support of a density.
pub const SUPPORT_EPSILON: f64 = 1e-12;

/// Uniform 1-D grid `lower, lower + h, ..., upper`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    lower: f64,
    upper: f64,
    points: usize,
}

impl Grid {
    pub fn new(lower: f64, upper: f64, points: usize) -> Result<Self> {
        if !lower.is_finite() || !upper.is_finite() {
            return Err(Error::InvalidGrid(format!("non-finite bounds [{lower}, {upper}]")));
        }
        if upper <= lower {
            return Err(Error::InvalidGrid(format!("upper {upper} must exceed lower {lower}")));
        }
        if points < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 points, got {points}")));
        }
        Ok(Grid { lower, upper, points })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn spacing(&self) -> f64 {
        (self.upper - self.lower) / (self.points - 1) as f64
    }

    /// Coordinate of node `i`. The last node is pinned to `upper`.
    pub fn coordinate(&self, i: usize) -> f64 {
        if i + 1 == self.points {
            self.upper
        } else {
            self.lower + i as f64 * self.spacing()
        }
    }

    pub fn coordinates(&self) -> Vec<f64> {
        (0..self.points).map(|i| self.coordinate(i)).collect()
    }

    /// Trapezoid weight of node `i`.
    pub fn weight(&self, i: usize) -> f64 {
        let h = self.spacing();
        if i == 0 || i + 1 == self.points {
            0.5 * h
        } else {
            h
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.points).map(|i| self.weight(i)).collect()
    }

    /// Index of the node nearest to `x` (clamped to the grid).
    pub fn nearest(&self, x: f64) -> usize {
        if !(x > self.lower) {
            return 0;
        }
        let pos = (x - self.lower) / self.spacing();
        let i = libm::round(pos) as usize;
        i.min(self.points - 1)
    }

    /// Cell `[x_i - h/2, x_i + h/2]` clipped to the grid bounds.
    pub fn cell(&self, i: usize) -> (f64, f64) {
        let h = self.spacing();
        let x = self.coordinate(i);
        ((x - 0.5 * h).max(self.lower), (x + 0.5 * h).min(self.upper))
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }

    pub fn integrate_table(&self, values: &[f64]) -> f64 {
        values.iter().enumerate().map(|(i, v)| self.weight(i) * v).sum()
    }
}

/// Normalized density tabulated at the nodes of a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    grid: Grid,
    weights: Vec<f64>,
}

impl GridDensity {
    /// Builds a density from non-negative node values, normalizing them to
    /// unit trapezoid mass.
    pub fn new(grid: Grid, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != grid.points() {
            return Err(Error::InvalidDensity(format!(
                "{} weights for a grid of {} points",
                weights.len(),
                grid.points()
            )));
        }
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidDensity(format!("weight {w} at node {i}")));
        }
        let mass = grid.integrate_table(&weights);
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::InvalidDensity(format!("total mass {mass}")));
        }
        let weights = weights.into_iter().map(|w| w / mass).collect();
        Ok(GridDensity { grid, weights })
    }

    /// Builds a density from log-values, max-shifting before exponentiation.
    /// `-inf` entries become zero weight.
    pub fn from_log_weights(grid: Grid, log_weights: &[f64]) -> Result<Self> {
        let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::InvalidDensity(format!("maximum log-weight {max}")));
        }
        let weights = log_weights.iter().map(|l| libm::exp(l - max)).collect();
        GridDensity::new(grid, weights)
    }

    pub fn uniform(grid: Grid) -> Self {
        let w = 1.0 / (grid.upper() - grid.lower());
        GridDensity {
            grid,
            weights: alloc::vec![w; grid.points()],
        }
    }

    /// All mass on a single node.
    pub fn point_mass(grid: Grid, node: usize) -> Result<Self> {
        if node >= grid.points() {
            return Err(Error::InvalidDensity(format!("node {node} outside grid")));
        }
        let mut weights = alloc::vec![0.0; grid.points()];
        weights[node] = 1.0;
        GridDensity::new(grid, weights)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    /// Trapezoid integral of the weights (1 up to rounding).
    pub fn mass(&self) -> f64 {
        self.grid.integrate_table(&self.weights)
    }

    /// Probability mass carried by each node (`w_i f_i`).
    pub fn node_masses(&self) -> Vec<f64> {
        self.weights
            .iter()
            .enumerate()
            .map(|(i, f)| self.grid.weight(i) * f)
            .collect()
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }

    /// Nodes whose weight exceeds `SUPPORT_EPSILON` times the maximum weight.
    pub fn support(&self) -> Vec<usize> {
        let threshold = SUPPORT_EPSILON * self.max_weight();
        (0..self.weights.len())
            .filter(|&i| self.weights[i] > threshold)
            .collect()
    }

    pub fn in_support(&self, i: usize) -> bool {
        self.weights[i] > SUPPORT_EPSILON * self.max_weight()
    }

    pub fn mean(&self) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(i, f)| self.grid.weight(i) * f * self.grid.coordinate(i))
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.weights
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let d = self.grid.coordinate(i) - m;
                self.grid.weight(i) * f * d * d
            })
            .sum()
    }
}

/// Trapezoid approximation of `E_d[phi(Z)]`.
pub fn integrate<F>(d: &GridDensity, phi: F) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    let grid = d.grid();
    let mut acc = 0.0;
    for (i, &f) in d.weights().iter().enumerate() {
        if f > 0.0 {
            let v = phi(grid.coordinate(i));
            if !v.is_finite() {
                return Err(Error::Domain { node: i, value: v });
            }
            acc += grid.weight(i) * f * v;
        }
    }
    Ok(acc)
}

/// Same as [`integrate`] with the integrand given as a node table.
pub fn integrate_table(d: &GridDensity, values: &[f64]) -> Result<f64> {
    if values.len() != d.grid().points() {
        return Err(Error::GridMismatch(format!(
            "{} values for a grid of {} points",
            values.len(),
            d.grid().points()
        )));
    }
    let grid = d.grid();
    let mut acc = 0.0;
    for (i, (&f, &v)) in d.weights().iter().zip(values).enumerate() {
        if f > 0.0 {
            if !v.is_finite() {
                return Err(Error::Domain { node: i, value: v });
            }
            acc += grid.weight(i) * f * v;
        }
    }
    Ok(acc)
}

/// KL divergence of two node tables sharing the trapezoid weights `w`.
///
/// The sum runs over the support of `phi`; a support node where `g` is not
/// strictly positive is an absolute-continuity violation.
pub(crate) fn kl_tables(w: &[f64], phi: &[f64], g: &[f64]) -> Result<f64> {
    let max = phi.iter().copied().fold(0.0, f64::max);
    let threshold = SUPPORT_EPSILON * max;
    let mut acc = 0.0;
    let mut bad = Vec::new();
    for i in 0..phi.len() {
        let p = phi[i];
        if p > threshold {
            let q = g[i];
            if !(q >= f64::MIN_POSITIVE) {
                bad.push(i);
                continue;
            }
            acc += w[i] * p * (libm::log(p) - libm::log(q));
        }
    }
    if bad.is_empty() {
        Ok(acc)
    } else {
        Err(Error::AbsoluteContinuity { nodes: bad })
    }
}

pub(crate) fn ensure_same_grid(a: &Grid, b: &Grid, what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::GridMismatch(format!("{what}: {a:?} vs {b:?}")))
    }
}

/// `D_KL(phi || g)` by trapezoid quadrature.
pub fn kl_divergence(phi: &GridDensity, g: &GridDensity) -> Result<f64> {
    ensure_same_grid(phi.grid(), g.grid(), "kl_divergence")?;
    kl_tables(&phi.grid().weights(), phi.weights(), g.weights())
}

/// Normalized density on the product grid `y x z`, stored row-major
/// (`weights[i * nz + j]` at `(y_i, z_j)`).
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity2 {
    y: Grid,
    z: Grid,
    weights: Vec<f64>,
}

impl GridDensity2 {
    pub fn new(y: Grid, z: Grid, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != y.points() * z.points() {
            return Err(Error::InvalidDensity(format!(
                "{} weights for a {}x{} grid",
                weights.len(),
                y.points(),
                z.points()
            )));
        }
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidDensity(format!("weight {w} at node {i}")));
        }
        let nz = z.points();
        let mass: f64 = weights
            .iter()
            .enumerate()
            .map(|(k, w)| y.weight(k / nz) * z.weight(k % nz) * w)
            .sum();
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::InvalidDensity(format!("total mass {mass}")));
        }
        let weights = weights.into_iter().map(|w| w / mass).collect();
        Ok(GridDensity2 { y, z, weights })
    }

    /// Independent product `a(y) b(z)`.
    pub fn product(a: &GridDensity, b: &GridDensity) -> Self {
        let weights = a
            .weights()
            .iter()
            .flat_map(|fa| b.weights().iter().map(move |fb| fa * fb))
            .collect();
        GridDensity2 {
            y: *a.grid(),
            z: *b.grid(),
            weights,
        }
    }

    pub fn y_grid(&self) -> &Grid {
        &self.y
    }

    pub fn z_grid(&self) -> &Grid {
        &self.z
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn row(&self, i: usize) -> &[f64] {
        let nz = self.z.points();
        &self.weights[i * nz..(i + 1) * nz]
    }

    /// Marginal over `y` (unnormalized table, mass 1 up to rounding).
    fn marginal_table(&self) -> Vec<f64> {
        (0..self.y.points())
            .map(|i| self.z.integrate_table(self.row(i)))
            .collect()
    }

    pub fn marginal_y(&self) -> Result<GridDensity> {
        GridDensity::new(self.y, self.marginal_table())
    }
}

/// Both sides of the KL splitting identity
/// `KL(phi_yz || g_yz) = KL(phi_y || g_y) + E_{phi_y}[KL(phi_{z|y} || g_{z|y})]`.
pub fn kl_split_check(phi: &GridDensity2, g: &GridDensity2) -> Result<(f64, f64)> {
    ensure_same_grid(phi.y_grid(), g.y_grid(), "kl_split_check (y)")?;
    ensure_same_grid(phi.z_grid(), g.z_grid(), "kl_split_check (z)")?;
    let (ny, nz) = (phi.y.points(), phi.z.points());
    let wy = phi.y.weights();
    let wz = phi.z.weights();
    let joint_w: Vec<f64> = (0..ny * nz).map(|k| wy[k / nz] * wz[k % nz]).collect();
    let lhs = kl_tables(&joint_w, &phi.weights, &g.weights)?;

    let phi_y = phi.marginal_table();
    let g_y = g.marginal_table();
    let mut rhs = kl_tables(&wy, &phi_y, &g_y)?;
    for i in 0..ny {
        if phi_y[i] <= 0.0 {
            continue;
        }
        let cond_phi: Vec<f64> = phi.row(i).iter().map(|v| v / phi_y[i]).collect();
        let cond_g: Vec<f64> = if g_y[i] > 0.0 {
            g.row(i).iter().map(|v| v / g_y[i]).collect()
        } else {
            alloc::vec![0.0; nz]
        };
        let kl = kl_tables(&wz, &cond_phi, &cond_g).map_err(|e| match e {
            Error::AbsoluteContinuity { nodes } => Error::AbsoluteContinuity {
                nodes: nodes.into_iter().map(|j| i * nz + j).collect(),
            },
            other => other,
        })?;
        rhs += wy[i] * phi_y[i] * kl;
    }
    Ok((lhs, rhs))
}

/// One-dimensional Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianDensity {
    mean: f64,
    variance: f64,
}

impl GaussianDensity {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if !mean.is_finite() || !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::InvalidDensity(format!("gaussian N({mean}, {variance})")));
        }
        Ok(GaussianDensity { mean, variance })
    }

    pub fn standard() -> Self {
        GaussianDensity { mean: 0.0, variance: 1.0 }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn std_dev(&self) -> f64 {
        libm::sqrt(self.variance)
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        let d = x - self.mean;
        -0.5 * d * d / self.variance - 0.5 * libm::log(2.0 * PI * self.variance)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        libm::exp(self.log_pdf(x))
    }

    pub fn cdf(&self, x: f64) -> f64 {
        0.5 * libm::erfc(-(x - self.mean) / (self.std_dev() * core::f64::consts::SQRT_2))
    }
}

/// Closed-form `D_KL(phi || g)` between Gaussians.
pub fn gaussian_kl(phi: &GaussianDensity, g: &GaussianDensity) -> f64 {
    let d = phi.mean - g.mean;
    0.5 * libm::log(g.variance / phi.variance) + (phi.variance + d * d) / (2.0 * g.variance) - 0.5
}

/// Emitted when a grid covers less than six standard deviations on a side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationWarning {
    /// Gaussian mass lying outside the grid.
    pub lost_mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discretized {
    pub density: GridDensity,
    pub warning: Option<TruncationWarning>,
}

/// Evaluates `g` at the grid nodes and renormalizes.
pub fn discretize(g: &GaussianDensity, grid: &Grid) -> Discretized {
    let logs: Vec<f64> = grid.coordinates().iter().map(|&x| g.log_pdf(x)).collect();
    let density = GridDensity::from_log_weights(*grid, &logs).expect("gaussian log-weights are finite");
    let sd = g.std_dev();
    let warning = if grid.lower() > g.mean - 6.0 * sd || grid.upper() < g.mean + 6.0 * sd {
        let lost_mass = g.cdf(grid.lower()) + (1.0 - g.cdf(grid.upper()));
        Some(TruncationWarning { lost_mass })
    } else {
        None
    };
    Discretized { density, warning }
}

/// Uniform `[0, 1)` draw with 53 bits of precision.
pub(crate) fn unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

/// Inverse-CDF sampler over the node cells of a density.
#[derive(Debug, Clone)]
pub struct Sampler {
    grid: Grid,
    cumulative: Vec<f64>,
}

impl Sampler {
    pub fn new(d: &GridDensity) -> Self {
        Sampler::from_table(d.grid(), d.weights())
    }

    pub(crate) fn from_table(grid: &Grid, weights: &[f64]) -> Self {
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .enumerate()
            .map(|(i, f)| {
                acc += grid.weight(i) * f;
                acc
            })
            .collect();
        Sampler { grid: *grid, cumulative }
    }

    /// Draws a node index with probability equal to its mass.
    pub fn sample_node<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, f64) {
        let total = *self.cumulative.last().unwrap();
        let r = unit(rng) * total;
        let mut i = self.cumulative.partition_point(|&c| c <= r);
        if i >= self.cumulative.len() {
            i = self.cumulative.len() - 1;
            while i > 0 && self.cumulative[i] == self.cumulative[i - 1] {
                i -= 1;
            }
        }
        let start = if i == 0 { 0.0 } else { self.cumulative[i - 1] };
        let mass = self.cumulative[i] - start;
        let frac = if mass > 0.0 { ((r - start) / mass).clamp(0.0, 1.0) } else { 0.5 };
        (i, frac)
    }

    /// Continuous draw: the node is chosen by its mass and the position is
    /// interpolated linearly inside the node's cell.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (i, frac) = self.sample_node(rng);
        let (lo, hi) = self.grid.cell(i);
        lo + frac * (hi - lo)
    }
}

/// Draws one value from `d`. Build a [`Sampler`] once for repeated draws.
pub fn sample<R: Rng + ?Sized>(d: &GridDensity, rng: &mut R) -> f64 {
    Sampler::new(d).sample(rng)
}

/// Empirical node masses: each sample is assigned to its nearest node.
pub fn histogram_masses(grid: &Grid, samples: &[f64]) -> Vec<f64> {
    let mut counts = alloc::vec![0.0; grid.points()];
    for &s in samples {
        counts[grid.nearest(s)] += 1.0;
    }
    let n = samples.len().max(1) as f64;
    counts.iter_mut().for_each(|c| *c /= n);
    counts
}

/// Total-variation distance between two mass vectors.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}
