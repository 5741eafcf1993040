//! Closed-form recursion for linear-Gaussian kernels on the real line.
//!
//! With Gaussian plant, reference plant and reference policy rows whose means
//! are affine in the conditioning variables, the cost-to-go is quadratic in
//! the state, `omega` is quadratic in `(u, x)`, and every policy row is
//! Gaussian. Mean constraints shift the row, a mean plus a second-moment
//! constraint fixes it entirely.

use alloc::vec::Vec;

use crate::constraints::{ConstraintSchedule, FeatureFunction, MomentConstraintSet};
use crate::density::{gaussian_kl, GaussianDensity, LinearGaussian};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    pub prior: GaussianDensity,
    /// Slopes `[u, x]`.
    pub plant: Vec<LinearGaussian>,
    /// Slopes `[u, x]`.
    pub reference_plant: Vec<LinearGaussian>,
    /// Slopes `[x]`.
    pub reference_policy: Vec<LinearGaussian>,
    pub constraints: ConstraintSchedule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicyStep {
    pub k: usize,
    /// Policy rows `N(intercept + slope x, variance)`.
    pub policy: LinearGaussian,
    /// `[c0, c1, c2]` with cost-to-go `c0 + c1 x + c2 x^2 = -ln gamma_k(x)`.
    pub cost_to_go: [f64; 3],
}

impl GaussianPolicyStep {
    pub fn cost_at(&self, x: f64) -> f64 {
        self.cost_to_go[0] + self.cost_to_go[1] * x + self.cost_to_go[2] * x * x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub steps: Vec<GaussianPolicyStep>,
    /// `B_k`, `k = 1..n`.
    pub values: Vec<f64>,
    /// Closed-loop state mean and variance, `k = 0..n`.
    pub state_moments: Vec<(f64, f64)>,
}

enum RowMoments {
    Free,
    Mean(f64),
    MeanVariance(f64, f64),
}

fn classify(set: &MomentConstraintSet) -> Result<RowMoments> {
    let mut mean = None;
    let mut second = None;
    for (h, &t) in set.features().iter().zip(set.targets()) {
        match *h {
            FeatureFunction::Monomial { power: 1 } => mean = Some(t),
            FeatureFunction::CenteredMonomial { power: 1, center } => mean = Some(t + center),
            FeatureFunction::Monomial { power: 2 } => second = Some((0.0, t)),
            FeatureFunction::CenteredMonomial { power: 2, center } => second = Some((center, t)),
            _ => return Err(Error::InvalidInput(alloc::format!("closed form does not cover feature {h}"))),
        }
    }
    match (mean, second) {
        (None, None) => Ok(RowMoments::Free),
        (Some(m), None) => Ok(RowMoments::Mean(m)),
        (Some(m), Some((c, s))) => {
            let var = s - (m - c) * (m - c);
            if var > 0.0 {
                Ok(RowMoments::MeanVariance(m, var))
            } else {
                Err(Error::InfeasibleConstraints {
                    index: 1,
                    target: s,
                    lower: (m - c) * (m - c),
                    upper: f64::INFINITY,
                })
            }
        }
        (None, Some(_)) => Err(Error::InvalidInput(
            "closed form needs a mean constraint alongside a second-moment constraint".into(),
        )),
    }
}

fn check_arity(p: &LinearGaussian, arity: usize, what: &str) -> Result<()> {
    if p.slopes.len() == arity && p.variance > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(alloc::format!("{what}: expected {arity} slopes and positive variance")))
    }
}

/// Backward recursion in closed form.
pub fn synthesize_gaussian(model: &GaussianModel) -> Result<GaussianPolicy> {
    let n = model.plant.len();
    if n == 0 || model.reference_plant.len() != n || model.reference_policy.len() != n {
        return Err(Error::InvalidInput("closed form: horizon mismatch".into()));
    }
    let mut steps = Vec::with_capacity(n);
    let mut next = [0.0; 3];
    for k in (1..=n).rev() {
        let (f, g, r) = (&model.plant[k - 1], &model.reference_plant[k - 1], &model.reference_policy[k - 1]);
        check_arity(f, 2, "plant")?;
        check_arity(g, 2, "reference plant")?;
        check_arity(r, 1, "reference policy")?;
        let (af, bf, cf, sf2) = (f.intercept, f.slopes[0], f.slopes[1], f.variance);
        let (ag, bg, cg, sg2) = (g.intercept, g.slopes[0], g.slopes[1], g.variance);
        let [v0, v1, v2] = next;
        let row_kl = 0.5 * (sf2 / sg2 - 1.0 + libm::log(sg2 / sf2));

        let a = 0.5 * (bf - bg) * (bf - bg) / sg2 + v2 * bf * bf;
        let b = |x: f64| (bf - bg) * ((af - ag) + (cf - cg) * x) / sg2 + 2.0 * v2 * bf * (af + cf * x) + v1 * bf;
        let c = |x: f64| {
            let d = (af - ag) + (cf - cg) * x;
            let mf = af + cf * x;
            row_kl + 0.5 * d * d / sg2 + v2 * (mf * mf + sf2) + v1 * mf + v0
        };
        let precision = 1.0 / r.variance + 2.0 * a;
        if !(precision > 0.0) {
            return Err(Error::InvalidInput(alloc::format!("step {k}: tilted control precision {precision}")));
        }
        let moments = classify(&model.constraints.for_step(k)).map_err(|e| e.at_step(k, 0))?;
        let row = |x: f64| -> (f64, f64) {
            let free = (r.mean_at(&[x]) / r.variance - b(x)) / precision;
            match moments {
                RowMoments::Free => (free, 1.0 / precision),
                RowMoments::Mean(m) => (m, 1.0 / precision),
                RowMoments::MeanVariance(m, v) => (m, v),
            }
        };
        let cost = |x: f64| {
            let (m, s2) = row(x);
            let reference = GaussianDensity::new(r.mean_at(&[x]), r.variance).expect("positive variance");
            let chosen = GaussianDensity::new(m, s2).expect("positive variance");
            gaussian_kl(&chosen, &reference) + a * (m * m + s2) + b(x) * m + c(x)
        };
        let (lo, mid, hi) = (cost(-1.0), cost(0.0), cost(1.0));
        let (m0, s2) = row(0.0);
        steps.push(GaussianPolicyStep {
            k,
            policy: LinearGaussian {
                intercept: m0,
                slopes: alloc::vec![row(1.0).0 - m0],
                variance: s2,
            },
            cost_to_go: [mid, 0.5 * (hi - lo), 0.5 * (hi + lo) - mid],
        });
        next = steps.last().unwrap().cost_to_go;
    }
    steps.reverse();

    let mut state_moments = alloc::vec![(model.prior.mean(), model.prior.variance())];
    let mut values = Vec::with_capacity(n);
    for (i, s) in steps.iter().enumerate() {
        let (mx, vx) = state_moments[i];
        let [c0, c1, c2] = s.cost_to_go;
        values.push(c0 + c1 * mx + c2 * (mx * mx + vx));
        let f = &model.plant[i];
        let (bf, cf) = (f.slopes[0], f.slopes[1]);
        let gain = bf * s.policy.slopes[0] + cf;
        state_moments.push((
            f.intercept + bf * s.policy.intercept + gain * mx,
            gain * gain * vx + bf * bf * s.policy.variance + f.variance,
        ));
    }
    Ok(GaussianPolicy {
        steps,
        values,
        state_moments,
    })
}
