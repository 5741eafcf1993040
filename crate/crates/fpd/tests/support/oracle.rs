//! Reference computations that share no code with the library: plain loops
//! over node tables and a primal Newton solver on the probability simplex.

use nalgebra::{DMatrix, DVector};

/// Trapezoid weights of a uniform grid with `n` nodes and spacing `h`.
pub fn trapezoid_weights(n: usize, h: f64) -> Vec<f64> {
    (0..n).map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h }).collect()
}

pub fn integrate(w: &[f64], values: &[f64]) -> f64 {
    w.iter().zip(values).map(|(w, v)| w * v).sum()
}

pub fn normalize(w: &[f64], values: &mut [f64]) {
    let z = integrate(w, values);
    values.iter_mut().for_each(|v| *v /= z);
}

/// `sum_i w_i p_i ln(p_i / q_i)`.
pub fn kl(w: &[f64], p: &[f64], q: &[f64]) -> f64 {
    w.iter()
        .zip(p.iter().zip(q))
        .map(|(w, (p, q))| if *p > 0.0 { w * p * (p / q).ln() } else { 0.0 })
        .sum()
}

/// Minimizer of `sum_i w_i p_i (ln(p_i / g_i) + c_i)` subject to
/// `sum_i w_i p_i a_j(i) = b_j`, with the normalization row prepended.
#[derive(Debug, Clone)]
pub struct PrimalSolution {
    pub density: Vec<f64>,
    pub value: f64,
}

pub fn primal_tilt(w: &[f64], g: &[f64], c: &[f64], features: &[Vec<f64>], targets: &[f64]) -> PrimalSolution {
    let n = w.len();
    let m = features.len() + 1;
    let mut a = DMatrix::<f64>::zeros(m, n);
    let mut b = DVector::<f64>::zeros(m);
    b[0] = 1.0;
    for i in 0..n {
        a[(0, i)] = w[i];
        for (j, h) in features.iter().enumerate() {
            a[(j + 1, i)] = w[i] * h[i];
        }
    }
    for (j, t) in targets.iter().enumerate() {
        b[j + 1] = *t;
    }
    let width: f64 = w.iter().sum();
    let mut p = DVector::from_element(n, 1.0 / width);
    let mut nu = DVector::<f64>::zeros(m);

    let gradient = |p: &DVector<f64>| DVector::from_iterator(n, (0..n).map(|i| w[i] * ((p[i] / g[i]).ln() + 1.0 + c[i])));
    let residual = |p: &DVector<f64>, nu: &DVector<f64>| -> f64 {
        let dual = gradient(p) + a.transpose() * nu;
        let primal = &a * p - &b;
        (dual.norm_squared() + primal.norm_squared()).sqrt()
    };

    for _ in 0..500 {
        let r = residual(&p, &nu);
        if r <= 1e-14 {
            break;
        }
        let mut kkt = DMatrix::<f64>::zeros(n + m, n + m);
        for i in 0..n {
            kkt[(i, i)] = w[i] / p[i];
        }
        kkt.view_mut((0, n), (n, m)).copy_from(&a.transpose());
        kkt.view_mut((n, 0), (m, n)).copy_from(&a);
        let mut rhs = DVector::<f64>::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(&(-gradient(&p)));
        rhs.rows_mut(n, m).copy_from(&(&b - &a * &p));
        let sol = kkt.lu().solve(&rhs).expect("singular KKT system");
        let dp = sol.rows(0, n).into_owned();
        let dnu = sol.rows(n, m).into_owned() - &nu;

        let mut t = 1.0;
        while (0..n).any(|i| p[i] + t * dp[i] <= 0.0) {
            t *= 0.5;
        }
        loop {
            let cand_p = &p + t * &dp;
            let cand_nu = &nu + t * &dnu;
            if residual(&cand_p, &cand_nu) <= (1.0 - 0.01 * t) * r || t < 1e-12 {
                p = cand_p;
                nu = cand_nu;
                break;
            }
            t *= 0.5;
        }
        if t < 1e-12 {
            break;
        }
    }
    let density: Vec<f64> = p.iter().copied().collect();
    let value = (0..n).map(|i| w[i] * density[i] * ((density[i] / g[i]).ln() + c[i])).sum();
    PrimalSolution { density, value }
}

/// Closed-loop model on node tables. Plant rows are indexed `ix * nu + iu`
/// and hold `nx` values; policy rows are indexed `ix` and hold `nu` values.
#[derive(Debug, Clone)]
pub struct Tables {
    pub wx: Vec<f64>,
    pub wu: Vec<f64>,
    pub u: Vec<f64>,
    pub prior: Vec<f64>,
    pub reference_prior: Vec<f64>,
    pub plant: Vec<Vec<f64>>,
    pub reference_plant: Vec<Vec<f64>>,
    pub reference_policy: Vec<Vec<f64>>,
}

impl Tables {
    pub fn nx(&self) -> usize {
        self.wx.len()
    }

    pub fn nu(&self) -> usize {
        self.wu.len()
    }

    pub fn horizon(&self) -> usize {
        self.plant.len()
    }

    fn plant_row<'a>(&self, table: &'a [f64], ix: usize, iu: usize) -> &'a [f64] {
        let (nx, nu) = (self.nx(), self.nu());
        let r = ix * nu + iu;
        &table[r * nx..(r + 1) * nx]
    }

    /// `sum_j w_j f(x_j | u, x) (ln(f / g)(x_j) + v(x_j))`.
    fn step_cost(&self, k: usize, ix: usize, iu: usize, next_value: &[f64]) -> f64 {
        let f = self.plant_row(&self.plant[k], ix, iu);
        let g = self.plant_row(&self.reference_plant[k], ix, iu);
        (0..self.nx()).map(|j| self.wx[j] * f[j] * ((f[j] / g[j]).ln() + next_value[j])).sum()
    }

    fn reference_row(&self, k: usize, ix: usize) -> &[f64] {
        let nu = self.nu();
        &self.reference_policy[k][ix * nu..(ix + 1) * nu]
    }

    /// Unconstrained recursion: `pi = g exp(-omega) / gamma`, cost-to-go
    /// `-ln gamma`. Returns policy tables, step 1 first.
    pub fn unconstrained_policy(&self) -> Vec<Vec<f64>> {
        let (nx, nu, n) = (self.nx(), self.nu(), self.horizon());
        let mut cost_to_go = vec![0.0; nx];
        let mut out = vec![Vec::new(); n];
        for k in (0..n).rev() {
            let mut table = vec![0.0; nx * nu];
            let mut next = vec![0.0; nx];
            for ix in 0..nx {
                let g = self.reference_row(k, ix);
                let tilted: Vec<f64> = (0..nu).map(|iu| g[iu] * (-self.step_cost(k, ix, iu, &cost_to_go)).exp()).collect();
                let gamma = integrate(&self.wu, &tilted);
                for iu in 0..nu {
                    table[ix * nu + iu] = tilted[iu] / gamma;
                }
                next[ix] = -gamma.ln();
            }
            cost_to_go = next;
            out[k] = table;
        }
        out
    }

    /// Backward recursion in which every row is minimized numerically by
    /// [`primal_tilt`]. Returns policy tables and the optimal total.
    pub fn nested_policy(&self, features: &[Vec<f64>], targets: &[f64]) -> (Vec<Vec<f64>>, f64) {
        let (nx, nu, n) = (self.nx(), self.nu(), self.horizon());
        let mut value = vec![0.0; nx];
        let mut out = vec![Vec::new(); n];
        for k in (0..n).rev() {
            let mut table = vec![0.0; nx * nu];
            let mut row_values = vec![0.0; nx];
            for ix in 0..nx {
                let c: Vec<f64> = (0..nu).map(|iu| self.step_cost(k, ix, iu, &value)).collect();
                let sol = primal_tilt(&self.wu, self.reference_row(k, ix), &c, features, targets);
                table[ix * nu..(ix + 1) * nu].copy_from_slice(&sol.density);
                row_values[ix] = sol.value;
            }
            value = row_values;
            out[k] = table;
        }
        let weighted: Vec<f64> = self.prior.iter().zip(&value).map(|(p, v)| p * v).collect();
        (out, kl(&self.wx, &self.prior, &self.reference_prior) + integrate(&self.wx, &weighted))
    }

    /// `D_KL(f^2 || g^2)` over the full node tensor `(x0, u1, x1, u2, x2)`.
    pub fn joint_kl_two_steps(&self, policy: &[Vec<f64>]) -> f64 {
        assert_eq!(self.horizon(), 2);
        let (nx, nu) = (self.nx(), self.nu());
        let mut total = 0.0;
        for x0 in 0..nx {
            for u1 in 0..nu {
                for x1 in 0..nx {
                    for u2 in 0..nu {
                        for x2 in 0..nx {
                            let f = self.prior[x0]
                                * policy[0][x0 * nu + u1]
                                * self.plant_row(&self.plant[0], x0, u1)[x1]
                                * policy[1][x1 * nu + u2]
                                * self.plant_row(&self.plant[1], x1, u2)[x2];
                            let g = self.reference_prior[x0]
                                * self.reference_row(0, x0)[u1]
                                * self.plant_row(&self.reference_plant[0], x0, u1)[x1]
                                * self.reference_row(1, x1)[u2]
                                * self.plant_row(&self.reference_plant[1], x1, u2)[x2];
                            let w = self.wx[x0] * self.wu[u1] * self.wx[x1] * self.wu[u2] * self.wx[x2];
                            if f > 0.0 {
                                total += w * f * (f / g).ln();
                            }
                        }
                    }
                }
            }
        }
        total
    }
}
