//! Moment constraints `E_f[h(U)] = H` on the control density and the
//! algebraic-independence test for feature sets.
//!
//! The normalization row (`h_0 = 1`, `H_0 = 1`) is implicit: a
//! [`MomentConstraintSet`] only lists the additional rows.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::density::{Grid, GridDensity};
use crate::error::{Error, Result};

/// Threshold on the smallest eigenvalue of the L2-normalized Gram matrix.
pub const INDEPENDENCE_EPSILON: f64 = 1e-8;

/// Maximum monomial degree accepted in a feature.
pub const MAX_POWER: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureFunction {
    /// `u^p`
    Monomial { power: u32 },
    /// `(u - c)^p`
    CenteredMonomial { power: u32, center: f64 },
    /// `1[a <= u < b]`
    WindowIndicator { a: f64, b: f64 },
}

impl FeatureFunction {
    pub fn monomial(power: u32) -> Result<Self> {
        check_power(power)?;
        Ok(FeatureFunction::Monomial { power })
    }

    pub fn centered(power: u32, center: f64) -> Result<Self> {
        check_power(power)?;
        if !center.is_finite() {
            return Err(Error::InvalidFeature(format!("center {center}")));
        }
        Ok(FeatureFunction::CenteredMonomial { power, center })
    }

    pub fn window(a: f64, b: f64) -> Result<Self> {
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(Error::InvalidFeature(format!("window [{a}, {b}) needs a < b")));
        }
        Ok(FeatureFunction::WindowIndicator { a, b })
    }

    pub fn eval(&self, u: f64) -> f64 {
        match *self {
            FeatureFunction::Monomial { power } => libm::pow(u, power as f64),
            FeatureFunction::CenteredMonomial { power, center } => libm::pow(u - center, power as f64),
            FeatureFunction::WindowIndicator { a, b } => {
                if u >= a && u < b {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Smallest and largest value over the grid nodes.
    pub fn range_on(&self, grid: &Grid) -> (f64, f64) {
        grid.coordinates()
            .iter()
            .map(|&u| self.eval(u))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }
}

fn check_power(power: u32) -> Result<()> {
    if power == 0 || power > MAX_POWER {
        return Err(Error::InvalidFeature(format!("power {power} outside 1..={MAX_POWER}")));
    }
    Ok(())
}

impl fmt::Display for FeatureFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureFunction::Monomial { power } => write!(f, "monomial({power})"),
            FeatureFunction::CenteredMonomial { power, center } => write!(f, "centered_monomial({power}, {center})"),
            FeatureFunction::WindowIndicator { a, b } => write!(f, "window({a}, {b})"),
        }
    }
}

impl FromStr for FeatureFunction {
    type Err = Error;

    /// Parses `monomial(p)`, `centered_monomial(p, c)` or `window(a, b)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidFeature(format!("cannot parse `{s}`"));
        let open = s.find('(').ok_or_else(bad)?;
        if !s.ends_with(')') {
            return Err(bad());
        }
        let name = s[..open].trim();
        let args: Vec<&str> = s[open + 1..s.len() - 1].split(',').map(str::trim).collect();
        let num = |i: usize| -> Result<f64> { args.get(i).ok_or_else(bad)?.parse::<f64>().map_err(|_| bad()) };
        let power = |i: usize| -> Result<u32> { args.get(i).ok_or_else(bad)?.parse::<u32>().map_err(|_| bad()) };
        match (name, args.len()) {
            ("monomial", 1) => FeatureFunction::monomial(power(0)?),
            ("centered_monomial", 2) => FeatureFunction::centered(power(0)?, num(1)?),
            ("window" | "window_indicator", 2) => FeatureFunction::window(num(0)?, num(1)?),
            _ => Err(bad()),
        }
    }
}

/// Time step(s) a constraint set applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeIndex {
    Step(usize),
    All,
}

impl fmt::Display for TimeIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeIndex::Step(k) => write!(f, "{k}"),
            TimeIndex::All => f.write_str("all"),
        }
    }
}

/// How a variance requirement is turned into moment rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceForm {
    /// Single centered second moment about the given mean.
    #[default]
    Centered,
    /// Mean row plus centered second moment: pins both mean and variance.
    Pair,
}

impl FromStr for VarianceForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "centered" => Ok(VarianceForm::Centered),
            "pair" => Ok(VarianceForm::Pair),
            other => Err(Error::InvalidInput(format!("variance form `{other}`"))),
        }
    }
}

/// Feature rows `h` and targets `H` for one time index.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentConstraintSet {
    pub time_index: TimeIndex,
    features: Vec<FeatureFunction>,
    targets: Vec<f64>,
}

impl MomentConstraintSet {
    pub fn new(time_index: TimeIndex, features: Vec<FeatureFunction>, targets: Vec<f64>) -> Result<Self> {
        if features.len() != targets.len() {
            return Err(Error::InvalidInput(format!(
                "{} features but {} targets",
                features.len(),
                targets.len()
            )));
        }
        if let Some(t) = targets.iter().find(|t| !t.is_finite()) {
            return Err(Error::InvalidInput(format!("target {t}")));
        }
        Ok(MomentConstraintSet {
            time_index,
            features,
            targets,
        })
    }

    pub fn empty(time_index: TimeIndex) -> Self {
        MomentConstraintSet {
            time_index,
            features: Vec::new(),
            targets: Vec::new(),
        }
    }

    /// Variance requirement around `mean`.
    pub fn variance(time_index: TimeIndex, mean: f64, variance: f64, form: VarianceForm) -> Result<Self> {
        if !(variance > 0.0) {
            return Err(Error::InvalidInput(format!("variance target {variance}")));
        }
        let second = FeatureFunction::centered(2, mean)?;
        match form {
            VarianceForm::Centered => MomentConstraintSet::new(time_index, alloc::vec![second], alloc::vec![variance]),
            VarianceForm::Pair => MomentConstraintSet::new(
                time_index,
                alloc::vec![FeatureFunction::monomial(1)?, second],
                alloc::vec![mean, variance],
            ),
        }
    }

    pub fn features(&self) -> &[FeatureFunction] {
        &self.features
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Concatenation of two sets (the time index of `self` is kept).
    pub fn concat(&self, other: &MomentConstraintSet) -> MomentConstraintSet {
        let mut out = self.clone();
        out.features.extend_from_slice(&other.features);
        out.targets.extend_from_slice(&other.targets);
        out
    }

    /// Feature values per node: `table[node][i] = h_i(u_node)`.
    pub fn table(&self, grid: &Grid) -> Vec<Vec<f64>> {
        grid.coordinates()
            .iter()
            .map(|&u| self.features.iter().map(|h| h.eval(u)).collect())
            .collect()
    }

    pub fn describe(&self) -> String {
        if self.is_empty() {
            return "none".to_string();
        }
        let rows: Vec<String> = self
            .features
            .iter()
            .zip(&self.targets)
            .map(|(h, t)| format!("E[{h}] = {t}"))
            .collect();
        rows.join(", ")
    }
}

/// Constraint sets for a whole horizon; a step-specific set overrides `All`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConstraintSchedule {
    sets: Vec<MomentConstraintSet>,
}

impl ConstraintSchedule {
    pub fn new(sets: Vec<MomentConstraintSet>) -> Self {
        ConstraintSchedule { sets }
    }

    pub fn unconstrained() -> Self {
        ConstraintSchedule::default()
    }

    pub fn sets(&self) -> &[MomentConstraintSet] {
        &self.sets
    }

    pub fn for_step(&self, k: usize) -> MomentConstraintSet {
        self.sets
            .iter()
            .find(|s| s.time_index == TimeIndex::Step(k))
            .or_else(|| self.sets.iter().find(|s| s.time_index == TimeIndex::All))
            .cloned()
            .unwrap_or_else(|| MomentConstraintSet::empty(TimeIndex::Step(k)))
    }

    pub fn is_unconstrained(&self) -> bool {
        self.sets.iter().all(MomentConstraintSet::is_empty)
    }
}

/// `E_d[h_i]` for every feature of the set.
pub fn evaluate_features(set: &MomentConstraintSet, d: &GridDensity) -> Result<Vec<f64>> {
    set.features()
        .iter()
        .map(|h| crate::density::integrate(d, |u| h.eval(u)))
        .collect()
}

/// Gram matrix `G_ij = sum_k w_k rho_k h_i(z_k) h_j(z_k)` of tabulated
/// features, with `rho` the weight density (uniform when `None`).
pub fn gram_matrix(columns: &[Vec<f64>], grid: &Grid, weight: Option<&GridDensity>) -> Result<DMatrix<f64>> {
    let n = grid.points();
    if let Some(w) = weight {
        crate::density::ensure_same_grid(w.grid(), grid, "independence weight")?;
    }
    if columns.iter().any(|c| c.len() != n) {
        return Err(Error::GridMismatch("feature table length differs from grid".into()));
    }
    let rho = |k: usize| weight.map_or(1.0, |w| w.weights()[k]);
    let c = columns.len();
    let mut g = DMatrix::zeros(c, c);
    for i in 0..c {
        for j in i..c {
            let v: f64 = (0..n).map(|k| grid.weight(k) * rho(k) * columns[i][k] * columns[j][k]).sum();
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// Independence test on tabulated features. Features are L2-normalized
/// before the eigenvalue test, so the result is invariant to positive
/// rescaling of any feature.
pub fn independence_of_columns(
    columns: &[Vec<f64>],
    grid: &Grid,
    weight: Option<&GridDensity>,
) -> Result<(bool, f64)> {
    if columns.is_empty() {
        return Err(Error::InvalidInput("independence test needs at least one feature".into()));
    }
    let g = gram_matrix(columns, grid, weight)?;
    let c = columns.len();
    let diag: Vec<f64> = (0..c).map(|i| g[(i, i)]).collect();
    if diag.iter().any(|d| !(*d > 0.0)) {
        return Ok((false, 0.0));
    }
    let normalized = DMatrix::from_fn(c, c, |i, j| g[(i, j)] / libm::sqrt(diag[i] * diag[j]));
    let min = SymmetricEigen::new(normalized)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    Ok((min > INDEPENDENCE_EPSILON, min))
}

/// Definition-2 independence of `features` over `grid`.
pub fn is_algebraically_independent(
    features: &[FeatureFunction],
    grid: &Grid,
    weight: Option<&GridDensity>,
) -> Result<(bool, f64)> {
    let columns: Vec<Vec<f64>> = features
        .iter()
        .map(|h| grid.coordinates().iter().map(|&u| h.eval(u)).collect())
        .collect();
    independence_of_columns(&columns, grid, weight)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{discretize, GaussianDensity};
    use alloc::vec;

    fn grid01() -> Grid {
        Grid::new(0.0, 1.0, 201).unwrap()
    }

    #[test]
    fn feature_validation_and_parsing() {
        assert!(FeatureFunction::monomial(0).is_err());
        assert!(FeatureFunction::monomial(5).is_err());
        assert!(FeatureFunction::window(1.0, 1.0).is_err());
        let f: FeatureFunction = "centered_monomial(2, 1.5)".parse().unwrap();
        assert_eq!(f, FeatureFunction::CenteredMonomial { power: 2, center: 1.5 });
        assert_eq!(f.to_string().parse::<FeatureFunction>().unwrap(), f);
        assert_eq!("window(0, 0.5)".parse::<FeatureFunction>().unwrap(), FeatureFunction::WindowIndicator { a: 0.0, b: 0.5 });
        assert!("monomial(x)".parse::<FeatureFunction>().is_err());
        assert!("cubic(2)".parse::<FeatureFunction>().is_err());
    }

    #[test]
    fn evaluate_gaussian_mean() {
        let grid = Grid::new(-5.0, 11.0, 1601).unwrap();
        let d = discretize(&GaussianDensity::new(3.0, 1.0).unwrap(), &grid).density;
        let set = MomentConstraintSet::new(TimeIndex::All, vec![FeatureFunction::monomial(1).unwrap()], vec![0.0]).unwrap();
        let v = evaluate_features(&set, &d).unwrap();
        assert!((v[0] - 3.0).abs() <= 1e-6);
    }

    #[test]
    fn evaluate_centered_second_moment_uniform() {
        let grid = Grid::new(-1.0, 1.0, 2001).unwrap();
        let d = GridDensity::uniform(grid);
        let set =
            MomentConstraintSet::new(TimeIndex::All, vec![FeatureFunction::centered(2, 0.0).unwrap()], vec![0.0]).unwrap();
        let v = evaluate_features(&set, &d).unwrap();
        assert!((v[0] - 1.0 / 3.0).abs() <= 1e-6);
    }

    #[test]
    fn evaluate_empty_and_linearity() {
        let d = GridDensity::uniform(grid01());
        let empty = MomentConstraintSet::empty(TimeIndex::All);
        assert!(evaluate_features(&empty, &d).unwrap().is_empty());
        let a = MomentConstraintSet::new(TimeIndex::All, vec![FeatureFunction::monomial(2).unwrap()], vec![0.0]).unwrap();
        let b = MomentConstraintSet::new(
            TimeIndex::All,
            vec![FeatureFunction::window(0.2, 0.7).unwrap(), FeatureFunction::monomial(3).unwrap()],
            vec![0.0, 0.0],
        )
        .unwrap();
        let mut separate = evaluate_features(&a, &d).unwrap();
        separate.extend(evaluate_features(&b, &d).unwrap());
        assert_eq!(evaluate_features(&a.concat(&b), &d).unwrap(), separate);
    }

    #[test]
    fn independence_examples() {
        let m1 = FeatureFunction::monomial(1).unwrap();
        let (flag, min) = is_algebraically_independent(&[m1, m1], &grid01(), None).unwrap();
        assert!(!flag);
        assert!(min <= 1e-12);

        let m2 = FeatureFunction::monomial(2).unwrap();
        let (flag, _) = is_algebraically_independent(&[m1, m2], &grid01(), None).unwrap();
        assert!(flag);
        // Raw Gram against the hand integrals [[1/3, 1/4], [1/4, 1/5]].
        let cols: Vec<Vec<f64>> = [m1, m2]
            .iter()
            .map(|h| grid01().coordinates().iter().map(|&u| h.eval(u)).collect())
            .collect();
        let g = gram_matrix(&cols, &grid01(), None).unwrap();
        assert!((g[(0, 0)] - 1.0 / 3.0).abs() < 1e-4);
        assert!((g[(0, 1)] - 0.25).abs() < 1e-4);
        assert!((g[(1, 1)] - 0.2).abs() < 1e-4);
        assert!((g.determinant() - 1.0 / 240.0).abs() < 1e-5);

        let w1 = FeatureFunction::window(0.0, 0.5).unwrap();
        let w2 = FeatureFunction::window(0.5, 1.0).unwrap();
        let (flag, _) = is_algebraically_independent(&[w1, w2], &grid01(), None).unwrap();
        assert!(flag);
    }

    #[test]
    fn independence_is_scale_invariant_and_gram_is_psd() {
        let grid = Grid::new(-2.0, 3.0, 51).unwrap();
        let base: Vec<Vec<f64>> = (1..=3u32)
            .map(|p| grid.coordinates().iter().map(|&u| libm::pow(u, p as f64)).collect())
            .collect();
        let (flag, min) = independence_of_columns(&base, &grid, None).unwrap();
        for scale in [1e-6, 0.3, 7.0, 1e5] {
            let mut scaled = base.clone();
            scaled[1].iter_mut().for_each(|v| *v *= scale);
            let (f2, m2) = independence_of_columns(&scaled, &grid, None).unwrap();
            assert_eq!(flag, f2);
            assert!((min - m2).abs() <= 1e-10);
            let g = gram_matrix(&scaled, &grid, None).unwrap();
            assert!((g.clone() - g.transpose()).amax() <= 1e-12);
        }
    }

    #[test]
    fn schedule_prefers_specific_step() {
        let all = MomentConstraintSet::variance(TimeIndex::All, 0.0, 1.0, VarianceForm::Centered).unwrap();
        let three = MomentConstraintSet::variance(TimeIndex::Step(3), 0.0, 2.0, VarianceForm::Pair).unwrap();
        let s = ConstraintSchedule::new(vec![all.clone(), three.clone()]);
        assert_eq!(s.for_step(3), three);
        assert_eq!(s.for_step(1), all);
        assert!(ConstraintSchedule::unconstrained().for_step(2).is_empty());
    }
}
