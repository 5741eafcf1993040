use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{ensure_same_grid, GaussianDensity, Grid, GridDensity};
use crate::error::{Error, Result};

/// What a kernel models inside the closed loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelRole {
    /// `f(x_k | u_k, x_{k-1})`
    Plant,
    /// `f(u_k | x_{k-1})`
    Policy,
    /// `g(x_k | u_k, x_{k-1})`
    ReferencePlant,
    /// `g(u_k | x_{k-1})`
    ReferencePolicy,
}

/// Conditioning variables of a kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Conditioning {
    /// Policy kernels condition on the previous state only.
    State(Grid),
    /// Plant kernels condition on `(u_k, x_{k-1})`; rows are state-major,
    /// `row = ix * n_u + iu`.
    ControlState { control: Grid, state: Grid },
}

impl Conditioning {
    pub fn rows(&self) -> usize {
        match self {
            Conditioning::State(g) => g.points(),
            Conditioning::ControlState { control, state } => control.points() * state.points(),
        }
    }

    /// Conditioning coordinates of a row: `[x]` or `[u, x]`.
    pub fn coordinates(&self, row: usize) -> Vec<f64> {
        match self {
            Conditioning::State(g) => vec![g.coordinate(row)],
            Conditioning::ControlState { control, state } => {
                let nu = control.points();
                vec![control.coordinate(row % nu), state.coordinate(row / nu)]
            }
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Conditioning::State(_) => 1,
            Conditioning::ControlState { .. } => 2,
        }
    }
}

/// Gaussian rows whose mean is affine in the conditioning coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussian {
    pub intercept: f64,
    /// One slope per conditioning coordinate (`[u, x]` for plants).
    pub slopes: Vec<f64>,
    pub variance: f64,
}

impl LinearGaussian {
    pub fn mean_at(&self, coords: &[f64]) -> f64 {
        self.intercept + self.slopes.iter().zip(coords).map(|(a, c)| a * c).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelBody {
    /// Row-major normalized node tables, `rows x outcome.points()`.
    Table(Vec<f64>),
    /// Rows discretized on demand from a conditional Gaussian.
    LinearGaussian(LinearGaussian),
}

/// A family of densities over `outcome`, one per conditioning node.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalKernel {
    role: KernelRole,
    conditioning: Conditioning,
    outcome: Grid,
    body: KernelBody,
}

impl ConditionalKernel {
    /// Builds a tabulated kernel, normalizing every row.
    pub fn from_table(
        role: KernelRole,
        conditioning: Conditioning,
        outcome: Grid,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let rows = conditioning.rows();
        let n = outcome.points();
        if weights.len() != rows * n {
            return Err(Error::InvalidDensity(format!(
                "kernel table has {} entries, expected {rows} x {n}",
                weights.len()
            )));
        }
        let mut out = Vec::with_capacity(weights.len());
        for (r, chunk) in weights.chunks(n).enumerate() {
            let d = GridDensity::new(outcome, chunk.to_vec())
                .map_err(|e| Error::InvalidDensity(format!("kernel row {r}: {e}")))?;
            out.extend_from_slice(d.weights());
        }
        Ok(ConditionalKernel {
            role,
            conditioning,
            outcome,
            body: KernelBody::Table(out),
        })
    }

    pub fn from_rows(role: KernelRole, conditioning: Conditioning, rows: &[GridDensity]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidDensity("kernel without rows".into()))?;
        let outcome = *first.grid();
        let mut weights = Vec::with_capacity(rows.len() * outcome.points());
        for r in rows {
            ensure_same_grid(r.grid(), &outcome, "kernel rows")?;
            weights.extend_from_slice(r.weights());
        }
        ConditionalKernel::from_table(role, conditioning, outcome, weights)
    }

    pub fn linear_gaussian(
        role: KernelRole,
        conditioning: Conditioning,
        outcome: Grid,
        params: LinearGaussian,
    ) -> Result<Self> {
        if params.slopes.len() != conditioning.arity() {
            return Err(Error::InvalidInput(format!(
                "{} slopes for {} conditioning coordinates",
                params.slopes.len(),
                conditioning.arity()
            )));
        }
        if !(params.variance > 0.0) || !params.variance.is_finite() {
            return Err(Error::InvalidDensity(format!("conditional variance {}", params.variance)));
        }
        if !params.intercept.is_finite() || params.slopes.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidDensity("non-finite conditional mean coefficients".into()));
        }
        Ok(ConditionalKernel {
            role,
            conditioning,
            outcome,
            body: KernelBody::LinearGaussian(params),
        })
    }

    pub fn role(&self) -> KernelRole {
        self.role
    }

    pub fn with_role(mut self, role: KernelRole) -> Self {
        self.role = role;
        self
    }

    pub fn conditioning(&self) -> &Conditioning {
        &self.conditioning
    }

    pub fn outcome(&self) -> &Grid {
        &self.outcome
    }

    pub fn body(&self) -> &KernelBody {
        &self.body
    }

    pub fn rows(&self) -> usize {
        self.conditioning.rows()
    }

    /// Gaussian parameters of a row, for parametric kernels.
    pub fn gaussian_row(&self, row: usize) -> Option<GaussianDensity> {
        match &self.body {
            KernelBody::LinearGaussian(p) => {
                let mean = p.mean_at(&self.conditioning.coordinates(row));
                GaussianDensity::new(mean, p.variance).ok()
            }
            KernelBody::Table(_) => None,
        }
    }

    /// Writes the normalized weights of `row` into `buf`.
    pub fn row_into(&self, row: usize, buf: &mut Vec<f64>) {
        let n = self.outcome.points();
        buf.clear();
        match &self.body {
            KernelBody::Table(w) => buf.extend_from_slice(&w[row * n..(row + 1) * n]),
            KernelBody::LinearGaussian(p) => {
                let mean = p.mean_at(&self.conditioning.coordinates(row));
                let inv = 0.5 / p.variance;
                // Nearest node carries the largest exponent.
                let near = self.outcome.coordinate(self.outcome.nearest(mean));
                let top = -(near - mean) * (near - mean) * inv;
                buf.extend((0..n).map(|i| {
                    let d = self.outcome.coordinate(i) - mean;
                    libm::exp(-d * d * inv - top)
                }));
                let mass = self.outcome.integrate_table(buf);
                buf.iter_mut().for_each(|v| *v /= mass);
            }
        }
    }

    /// Writes the normalized weights of `row` and their logarithms (`-inf`
    /// where the weight is zero). Parametric rows get exact logarithms.
    pub(crate) fn row_with_log_into(&self, row: usize, vals: &mut Vec<f64>, logs: &mut Vec<f64>) {
        let n = self.outcome.points();
        vals.clear();
        logs.clear();
        match &self.body {
            KernelBody::Table(w) => {
                vals.extend_from_slice(&w[row * n..(row + 1) * n]);
                logs.extend(vals.iter().map(|&v| if v > 0.0 { libm::log(v) } else { f64::NEG_INFINITY }));
            }
            KernelBody::LinearGaussian(p) => {
                let mean = p.mean_at(&self.conditioning.coordinates(row));
                let inv = 0.5 / p.variance;
                let near = self.outcome.coordinate(self.outcome.nearest(mean));
                let top = -(near - mean) * (near - mean) * inv;
                logs.extend((0..n).map(|i| {
                    let d = self.outcome.coordinate(i) - mean;
                    -d * d * inv - top
                }));
                vals.extend(logs.iter().map(|&l| libm::exp(l)));
                let mass = self.outcome.integrate_table(vals);
                let log_mass = libm::log(mass);
                vals.iter_mut().for_each(|v| *v /= mass);
                logs.iter_mut().for_each(|l| *l -= log_mass);
            }
        }
    }

    pub fn row(&self, row: usize) -> GridDensity {
        let mut buf = Vec::new();
        self.row_into(row, &mut buf);
        GridDensity::new(self.outcome, buf).expect("kernel rows are valid densities")
    }

    /// Tabulated copy of this kernel.
    pub fn to_table(&self) -> ConditionalKernel {
        match self.body {
            KernelBody::Table(_) => self.clone(),
            KernelBody::LinearGaussian(_) => {
                let mut weights = Vec::with_capacity(self.rows() * self.outcome.points());
                let mut buf = Vec::new();
                for r in 0..self.rows() {
                    self.row_into(r, &mut buf);
                    weights.extend_from_slice(&buf);
                }
                ConditionalKernel {
                    role: self.role,
                    conditioning: self.conditioning,
                    outcome: self.outcome,
                    body: KernelBody::Table(weights),
                }
            }
        }
    }

    pub(crate) fn check_shape(&self, conditioning: &Conditioning, outcome: &Grid, what: &str) -> Result<()> {
        if &self.conditioning != conditioning {
            return Err(Error::GridMismatch(format!("{what}: conditioning grids differ")));
        }
        ensure_same_grid(&self.outcome, outcome, what)
    }
}

/// Reusable buffers for [`conditional_kl_with`].
#[derive(Debug, Default, Clone)]
pub struct RowScratch {
    f: Vec<f64>,
    lf: Vec<f64>,
    g: Vec<f64>,
    lg: Vec<f64>,
}

impl RowScratch {
    /// Normalized plant row left by the last [`conditional_kl_with`] call.
    pub fn plant_row(&self) -> &[f64] {
        &self.f
    }
}

/// `KL(f(. | row) || g(. | row))` for two kernels on the same grids.
pub fn conditional_kl(f: &ConditionalKernel, g: &ConditionalKernel, row: usize) -> Result<f64> {
    conditional_kl_with(f, g, row, &mut RowScratch::default())
}

/// Same as [`conditional_kl`]; the plant row stays in `scratch`.
///
/// Support and absolute-continuity rules match [`super::kl_divergence`].
pub fn conditional_kl_with(
    f: &ConditionalKernel,
    g: &ConditionalKernel,
    row: usize,
    scratch: &mut RowScratch,
) -> Result<f64> {
    f.row_with_log_into(row, &mut scratch.f, &mut scratch.lf);
    g.row_with_log_into(row, &mut scratch.g, &mut scratch.lg);
    let grid = f.outcome();
    let max = scratch.f.iter().copied().fold(0.0, f64::max);
    let threshold = super::SUPPORT_EPSILON * max;
    let parametric = matches!(g.body, KernelBody::LinearGaussian(_));
    let mut acc = 0.0;
    let mut bad = Vec::new();
    for i in 0..scratch.f.len() {
        let p = scratch.f[i];
        if p > threshold {
            if !parametric && !(scratch.g[i] >= f64::MIN_POSITIVE) {
                bad.push(i);
                continue;
            }
            acc += grid.weight(i) * p * (scratch.lf[i] - scratch.lg[i]);
        }
    }
    if bad.is_empty() {
        Ok(acc)
    } else {
        Err(Error::AbsoluteContinuity { nodes: bad })
    }
}

/// State marginal one step ahead:
/// `p'(x') = sum_x w_x p(x) sum_u w_u policy(u | x) plant(x' | u, x)`.
pub fn push_state(p: &GridDensity, plant: &ConditionalKernel, policy: &ConditionalKernel) -> Result<GridDensity> {
    let state = *p.grid();
    let control = *policy.outcome();
    plant.check_shape(&Conditioning::ControlState { control, state }, &state, "plant kernel")?;
    policy.check_shape(&Conditioning::State(state), &control, "policy kernel")?;
    let nu = control.points();
    let mut next = vec![0.0; state.points()];
    let mut policy_buf = Vec::new();
    let mut plant_buf = Vec::new();
    for (ix, m) in p.node_masses().into_iter().enumerate() {
        if m <= 0.0 {
            continue;
        }
        policy.row_into(ix, &mut policy_buf);
        for iu in 0..nu {
            let c = m * control.weight(iu) * policy_buf[iu];
            if c <= 0.0 {
                continue;
            }
            plant.row_into(ix * nu + iu, &mut plant_buf);
            next.iter_mut().zip(&plant_buf).for_each(|(a, f)| *a += c * f);
        }
    }
    GridDensity::new(state, next)
}

/// Chain-rule factorization `prior(x_0) prod_k plant_k(x_k | u_k, x_{k-1}) policy_k(u_k | x_{k-1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredJoint {
    prior: GridDensity,
    plant: Vec<ConditionalKernel>,
    policy: Vec<ConditionalKernel>,
}

impl FactoredJoint {
    pub fn new(prior: GridDensity, plant: Vec<ConditionalKernel>, policy: Vec<ConditionalKernel>) -> Result<Self> {
        if plant.is_empty() || plant.len() != policy.len() {
            return Err(Error::InvalidInput(format!(
                "{} plant kernels and {} policy kernels",
                plant.len(),
                policy.len()
            )));
        }
        let state = *prior.grid();
        let control = *policy[0].outcome();
        let pair = Conditioning::ControlState { control, state };
        for (k, (p, q)) in plant.iter().zip(&policy).enumerate() {
            p.check_shape(&pair, &state, &format!("plant kernel {}", k + 1))?;
            q.check_shape(&Conditioning::State(state), &control, &format!("policy kernel {}", k + 1))?;
        }
        Ok(FactoredJoint { prior, plant, policy })
    }

    pub fn horizon(&self) -> usize {
        self.plant.len()
    }

    pub fn prior(&self) -> &GridDensity {
        &self.prior
    }

    pub fn plant(&self) -> &[ConditionalKernel] {
        &self.plant
    }

    pub fn policy(&self) -> &[ConditionalKernel] {
        &self.policy
    }

    pub fn state_grid(&self) -> &Grid {
        self.prior.grid()
    }

    pub fn control_grid(&self) -> &Grid {
        self.policy[0].outcome()
    }

    /// State marginals `p_0, ..., p_n`.
    pub fn state_marginals(&self) -> Result<Vec<GridDensity>> {
        let mut out = vec![self.prior.clone()];
        for k in 0..self.horizon() {
            let next = push_state(&out[k], &self.plant[k], &self.policy[k])?;
            out.push(next);
        }
        Ok(out)
    }

    /// Explicit joint over `(x_0, u_1, x_1, ..., u_n, x_n)`, row-major in that
    /// order. Only for small instances.
    pub fn materialize(&self, max_entries: usize) -> Result<Vec<f64>> {
        let nx = self.state_grid().points();
        let nu = self.control_grid().points();
        let mut size = nx;
        for _ in 0..self.horizon() {
            size = size.saturating_mul(nu * nx);
        }
        if size > max_entries {
            return Err(Error::InvalidInput(format!("joint of {size} entries exceeds {max_entries}")));
        }
        let mut joint = self.prior.weights().to_vec();
        let mut prev_x: Vec<usize> = (0..nx).collect();
        let mut policy_buf = Vec::new();
        let mut plant_buf = Vec::new();
        for k in 0..self.horizon() {
            let mut next = Vec::with_capacity(joint.len() * nu * nx);
            let mut next_x = Vec::with_capacity(joint.len() * nu * nx);
            for (v, &ix) in joint.iter().zip(&prev_x) {
                self.policy[k].row_into(ix, &mut policy_buf);
                for iu in 0..nu {
                    self.plant[k].row_into(ix * nu + iu, &mut plant_buf);
                    for jx in 0..nx {
                        next.push(v * policy_buf[iu] * plant_buf[jx]);
                        next_x.push(jx);
                    }
                }
            }
            joint = next;
            prev_x = next_x;
        }
        Ok(joint)
    }
}
