use fpd_core::constraints::{
    evaluate_features, gram_matrix, is_algebraically_independent, ConstraintSchedule, FeatureFunction,
    MomentConstraintSet, TimeIndex,
};
use fpd_core::datakit::{estimate_factors, select_reference, EstimationConfig, EstimationMethod, Sample, TrajectorySet, Trip};
use fpd_core::density::{
    discretize, gaussian_kl, kl_divergence, kl_split_check, Conditioning, ConditionalKernel, FactoredJoint,
    GaussianDensity, Grid, GridDensity, GridDensity2, KernelRole,
};
use fpd_core::evaluation::evaluate_objective;
use fpd_core::multipliers::{dual_gradient, dual_hessian, dual_value, solve_multipliers, DualProblem, SolverSettings};
use fpd_core::synthesis::{synthesize, SynthesisInput, SynthesisOptions};
use fpd_core::tilting::{direct_objective, solve_tilt, TiltProblem};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn positive(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| 0.05 + rng.random::<f64>()).collect()
}

fn density(rng: &mut ChaCha8Rng, grid: Grid) -> GridDensity {
    GridDensity::new(grid, positive(rng, grid.points())).unwrap()
}

fn pair(control: Grid, state: Grid) -> Conditioning {
    Conditioning::ControlState { control, state }
}

fn kernel(rng: &mut ChaCha8Rng, role: KernelRole, cond: Conditioning, outcome: Grid) -> ConditionalKernel {
    ConditionalKernel::from_table(role, cond, outcome, positive(rng, cond.rows() * outcome.points())).unwrap()
}

fn instance(seed: u64, nx: usize, nu: usize, n: usize) -> SynthesisInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = Grid::new(-1.0, 1.0, nx).unwrap();
    let control = Grid::new(-1.0, 1.0, nu).unwrap();
    let prior = density(&mut rng, state);
    let reference_prior = density(&mut rng, state);
    let (mut f, mut g, mut r) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        f.push(kernel(&mut rng, KernelRole::Plant, pair(control, state), state));
        g.push(kernel(&mut rng, KernelRole::ReferencePlant, pair(control, state), state));
        r.push(kernel(&mut rng, KernelRole::ReferencePolicy, Conditioning::State(state), control));
    }
    SynthesisInput::new(prior, reference_prior, f, g, r, ConstraintSchedule::unconstrained()).unwrap()
}

fn mean_constraint(k: usize, target: f64) -> MomentConstraintSet {
    MomentConstraintSet::new(TimeIndex::Step(k), vec![FeatureFunction::monomial(1).unwrap()], vec![target]).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m: f64, (x, y)| m.max((x - y).abs()))
}

fn feature() -> impl Strategy<Value = FeatureFunction> {
    prop_oneof![
        (1u32..=4).prop_map(|p| FeatureFunction::monomial(p).unwrap()),
        (1u32..=4, -1.0f64..1.0).prop_map(|(p, c)| FeatureFunction::centered(p, c).unwrap()),
        (-1.0f64..0.0, 0.1f64..1.0).prop_map(|(a, b)| FeatureFunction::window(a, b).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kl_splits_over_marginal_and_conditional(seed in any::<u64>(), ny in 2usize..9, nz in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = Grid::new(0.0, 1.0, ny).unwrap();
        let z = Grid::new(-1.0, 3.0, nz).unwrap();
        let phi = GridDensity2::new(y, z, positive(&mut rng, ny * nz)).unwrap();
        let g = GridDensity2::new(y, z, positive(&mut rng, ny * nz)).unwrap();
        let (lhs, rhs) = kl_split_check(&phi, &g).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-8, "{lhs} vs {rhs}");
    }

    #[test]
    fn gaussian_kl_matches_grid(m1 in -2.0f64..2.0, v1 in 0.2f64..3.0, m2 in -2.0f64..2.0, v2 in 0.2f64..3.0) {
        let a = GaussianDensity::new(m1, v1).unwrap();
        let b = GaussianDensity::new(m2, v2).unwrap();
        let sd = v1.sqrt().max(v2.sqrt());
        let grid = Grid::new(m1.min(m2) - 8.0 * sd, m1.max(m2) + 8.0 * sd, 2001).unwrap();
        let grid_kl = kl_divergence(&discretize(&a, &grid).density, &discretize(&b, &grid).density).unwrap();
        prop_assert!((grid_kl - gaussian_kl(&a, &b)).abs() <= 1e-4);
    }

    #[test]
    fn one_step_joint_marginalizes_to_factors(seed in any::<u64>(), nx in 2usize..7, nu in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = Grid::new(0.0, 2.0, nx).unwrap();
        let control = Grid::new(-1.0, 1.0, nu).unwrap();
        let prior = density(&mut rng, state);
        let plant = kernel(&mut rng, KernelRole::Plant, pair(control, state), state);
        let policy = kernel(&mut rng, KernelRole::Policy, Conditioning::State(state), control);
        let joint = FactoredJoint::new(prior.clone(), vec![plant.clone()], vec![policy.clone()]).unwrap();
        // p(x0, u1, x1) on nodes, then integrate back out.
        let (p0, pi, pl) = (joint.prior().weights(), joint.policy()[0].clone(), joint.plant()[0].clone());
        let mut tensor = vec![0.0; nx * nu * nx];
        for i0 in 0..nx {
            let row_u = pi.row(i0);
            for iu in 0..nu {
                let row_x = pl.row(i0 * nu + iu);
                for i1 in 0..nx {
                    tensor[(i0 * nu + iu) * nx + i1] = p0[i0] * row_u.weights()[iu] * row_x.weights()[i1];
                }
            }
        }
        let mut marg0 = vec![0.0; nx];
        for i0 in 0..nx {
            let mut s = 0.0;
            for iu in 0..nu {
                for i1 in 0..nx {
                    s += control.weight(iu) * state.weight(i1) * tensor[(i0 * nu + iu) * nx + i1];
                }
            }
            marg0[i0] = s;
        }
        prop_assert!(max_diff(&marg0, prior.weights()) <= 1e-9);
        for i0 in 0..nx {
            for iu in 0..nu {
                let mut cond_u = 0.0;
                for i1 in 0..nx {
                    cond_u += state.weight(i1) * tensor[(i0 * nu + iu) * nx + i1];
                }
                prop_assert!((cond_u / marg0[i0] - policy.row(i0).weights()[iu]).abs() <= 1e-9);
                for i1 in 0..nx {
                    let c = tensor[(i0 * nu + iu) * nx + i1] / cond_u;
                    prop_assert!((c - plant.row(i0 * nu + iu).weights()[i1]).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn gram_is_symmetric_psd(fs in prop::collection::vec(feature(), 1..5), points in 5usize..60) {
        let grid = Grid::new(-1.0, 1.0, points).unwrap();
        let cols: Vec<Vec<f64>> = fs.iter().map(|h| grid.coordinates().iter().map(|&u| h.eval(u)).collect()).collect();
        let g = gram_matrix(&cols, &grid, None).unwrap();
        let scale = g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!((&g - g.transpose()).amax() <= 1e-12 * scale);
        let min = g.clone().symmetric_eigen().eigenvalues.min();
        prop_assert!(min >= -1e-12 * scale, "{min}");
    }

    #[test]
    fn independence_ignores_positive_rescaling(fs in prop::collection::vec(feature(), 1..4), scale in 1e-3f64..1e3, which in 0usize..4) {
        let grid = Grid::new(-1.0, 1.0, 81).unwrap();
        let which = which % fs.len();
        let cols: Vec<Vec<f64>> = fs.iter().map(|h| grid.coordinates().iter().map(|&u| h.eval(u)).collect()).collect();
        let mut scaled = cols.clone();
        scaled[which].iter_mut().for_each(|v| *v *= scale);
        let (a, _) = fpd_core::constraints::independence_of_columns(&cols, &grid, None).unwrap();
        let (b, _) = fpd_core::constraints::independence_of_columns(&scaled, &grid, None).unwrap();
        prop_assert_eq!(a, b);
        let (c, _) = is_algebraically_independent(&fs, &grid, None).unwrap();
        prop_assert_eq!(a, c);
    }

    #[test]
    fn feature_evaluation_is_linear_in_the_list(a in prop::collection::vec(feature(), 1..4), b in prop::collection::vec(feature(), 1..4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid::new(-1.0, 1.0, 41).unwrap();
        let d = density(&mut rng, grid);
        let sa = MomentConstraintSet::new(TimeIndex::All, a.clone(), vec![0.0; a.len()]).unwrap();
        let sb = MomentConstraintSet::new(TimeIndex::All, b.clone(), vec![0.0; b.len()]).unwrap();
        let mut joined = evaluate_features(&sa, &d).unwrap();
        joined.extend(evaluate_features(&sb, &d).unwrap());
        prop_assert_eq!(evaluate_features(&sa.concat(&sb), &d).unwrap(), joined);
    }

    #[test]
    fn dual_gradient_matches_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid::new(-1.0, 1.0, 31).unwrap();
        let base = positive(&mut rng, 31);
        let cols: Vec<Vec<f64>> = (0..3).map(|p| grid.coordinates().iter().map(|u| u.powi(p)).collect()).collect();
        let p = DualProblem::from_tables(grid, &base, &cols, vec![1.0, 0.1, 0.4]).unwrap();
        let theta: Vec<f64> = (0..3).map(|_| rng.random::<f64>() - 0.5).collect();
        let g = dual_gradient(&p, &theta).unwrap();
        let h = dual_hessian(&p, &theta).unwrap();
        for i in 0..3 {
            let step = 1e-5;
            let mut hi = theta.clone();
            let mut lo = theta.clone();
            hi[i] += step;
            lo[i] -= step;
            let fd = (dual_value(&p, &hi).unwrap() - dual_value(&p, &lo).unwrap()) / (2.0 * step);
            prop_assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1.0));
            let gd: Vec<f64> = dual_gradient(&p, &hi).unwrap().iter().zip(dual_gradient(&p, &lo).unwrap()).map(|(a, b)| (a - b) / (2.0 * step)).collect();
            for j in 0..3 {
                prop_assert!((gd[j] - h[i * 3 + j]).abs() <= 1e-5 * h[i * 3 + j].abs().max(1.0));
            }
        }
    }

    #[test]
    fn newton_descends_on_positive_definite_hessians(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid::new(-1.0, 1.0, 41).unwrap();
        let base = positive(&mut rng, 41);
        let cols: Vec<Vec<f64>> = (0..3).map(|p| grid.coordinates().iter().map(|u| u.powi(p)).collect()).collect();
        let mean = 0.6 * (rng.random::<f64>() - 0.5);
        let second = mean * mean + 0.05 + 0.2 * rng.random::<f64>();
        let p = DualProblem::from_tables(grid, &base, &cols, vec![1.0, mean, second]).unwrap();
        let sol = solve_multipliers(&p, None, &SolverSettings::default()).unwrap();
        prop_assert!(sol.residual_norm() <= 1e-8);
        prop_assert!(sol.trace.iter().all(|r| r.min_hessian_eigenvalue > 0.0));
        for w in sol.trace.windows(2) {
            prop_assert!(w[1].objective <= w[0].objective, "{:#?}", sol.trace);
        }
        for _ in 0..10 {
            let init: Vec<f64> = (0..3).map(|_| 4.0 * (rng.random::<f64>() - 0.5)).collect();
            let other = solve_multipliers(&p, Some(&init), &SolverSettings::default()).unwrap();
            prop_assert!(max_diff(&other.theta, &sol.theta) <= 1e-6);
        }
    }

    #[test]
    fn tilt_is_optimal_among_feasible_perturbations(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid::new(-1.0, 1.0, 21).unwrap();
        let base = density(&mut rng, grid);
        let penalty: Vec<f64> = (0..21).map(|_| rng.random::<f64>()).collect();
        let target = 0.5 * (rng.random::<f64>() - 0.5);
        let set = MomentConstraintSet::new(TimeIndex::All, vec![FeatureFunction::monomial(1).unwrap()], vec![target]).unwrap();
        let p = TiltProblem::new(base, penalty, set).unwrap();
        let s = solve_tilt(&p).unwrap();
        let best = direct_objective(&p, &s.density).unwrap();
        let identity = best + 1.0 + s.lambda0 + s.lambdas[0] * target;
        prop_assert!(identity.abs() <= 1e-7, "{identity}");
        // Directions orthogonal (in the quadrature inner product) to 1 and u.
        let xs = grid.coordinates();
        let w: Vec<f64> = (0..21).map(|i| grid.weight(i)).collect();
        for _ in 0..20 {
            let mut d: Vec<f64> = (0..21).map(|_| rng.random::<f64>() - 0.5).collect();
            for basis in [vec![1.0; 21], xs.clone()] {
                let num: f64 = (0..21).map(|i| w[i] * d[i] * basis[i]).sum();
                let den: f64 = (0..21).map(|i| w[i] * basis[i] * basis[i]).sum();
                d.iter_mut().zip(&basis).for_each(|(v, b)| *v -= num / den * b);
            }
            let min = s.density.weights().iter().copied().fold(f64::INFINITY, f64::min);
            let amp = 0.5 * min / d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let moved: Vec<f64> = s.density.weights().iter().zip(&d).map(|(f, v)| f + amp * v).collect();
            let moved = GridDensity::new(grid, moved).unwrap();
            prop_assert!(direct_objective(&p, &moved).unwrap() >= best - 1e-7);
        }
    }

    #[test]
    fn unconstrained_tilt_is_penalized_base(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid::new(0.0, 1.0, 17).unwrap();
        let base = density(&mut rng, grid);
        let penalty: Vec<f64> = (0..17).map(|_| 2.0 * rng.random::<f64>()).collect();
        let expected: Vec<f64> = base.weights().iter().zip(&penalty).map(|(g, a)| g * (-a).exp()).collect();
        let expected = GridDensity::new(grid, expected).unwrap();
        let p = TiltProblem::new(base, penalty, MomentConstraintSet::empty(TimeIndex::All)).unwrap();
        prop_assert!(max_diff(solve_tilt(&p).unwrap().density.weights(), expected.weights()) <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn constraining_never_lowers_the_objective(seed in any::<u64>(), target in -0.3f64..0.3) {
        let free = instance(seed, 5, 5, 2);
        let bound = free.clone().with_constraints(ConstraintSchedule::new(vec![mean_constraint(1, target), mean_constraint(2, -target)])).unwrap();
        let opts = SynthesisOptions::default();
        let a = evaluate_objective(&free, &synthesize(&free, &opts).unwrap().kernels()).unwrap();
        let b = evaluate_objective(&bound, &synthesize(&bound, &opts).unwrap().kernels()).unwrap();
        prop_assert!(b.total_kl >= a.total_kl - 1e-9);
        prop_assert!(b.max_constraint_residual() <= 1e-6);
    }

    #[test]
    fn synthesis_is_bit_reproducible(seed in any::<u64>()) {
        let input = instance(seed, 4, 4, 3).with_constraints(ConstraintSchedule::new(vec![mean_constraint(2, 0.1)])).unwrap();
        let opts = SynthesisOptions::default();
        prop_assert_eq!(synthesize(&input, &opts).unwrap(), synthesize(&input, &opts).unwrap());
    }

    #[test]
    fn values_and_terms_telescope(seed in any::<u64>()) {
        let input = instance(seed, 5, 4, 3).with_constraints(ConstraintSchedule::new(vec![mean_constraint(3, 0.2)])).unwrap();
        let policy = synthesize(&input, &SynthesisOptions::default()).unwrap();
        let report = evaluate_objective(&input, &policy.kernels()).unwrap();
        let sum = report.prior_term + report.per_step_terms.iter().sum::<f64>();
        prop_assert!((sum - report.total_kl).abs() <= 1e-8);
        prop_assert!((policy.predicted_total() - report.total_kl).abs() <= 1e-6);
        for (k, step) in policy.steps.iter().enumerate() {
            let q = &policy.state_marginals[k];
            let b = q.grid().integrate_table(&q.weights().iter().zip(&step.row_minimum).map(|(p, m)| p * m).collect::<Vec<_>>());
            prop_assert!((b - policy.values[k]).abs() <= 1e-6);
        }
        let last = policy.steps.last().unwrap();
        let alpha = fpd_core::synthesis::alpha_hat(&input.plant()[2], &input.reference_plant()[2]).unwrap();
        prop_assert!(max_diff(&last.omega, &alpha) <= 1e-12);
    }

    #[test]
    fn reference_selection_is_idempotent(seed in any::<u64>(), trips in 3usize..12, keep in 1usize..12) {
        let keep = 1 + keep % trips;
        let ts = dataset(seed, trips, 6);
        let once = select_reference(&ts, "jerk", keep).unwrap();
        prop_assert_eq!(once.len(), keep);
        prop_assert_eq!(select_reference(&once, "jerk", keep).unwrap(), once);
    }

    #[test]
    fn estimated_rows_are_normalized(seed in any::<u64>(), histogram in any::<bool>()) {
        let ts = dataset(seed, 12, 5);
        let method = if histogram { EstimationMethod::Histogram } else { EstimationMethod::GaussianMaxent };
        let mut cfg = EstimationConfig::new(method, Grid::new(-2.0, 12.0, 15).unwrap(), Grid::new(-3.0, 5.0, 9).unwrap());
        cfg.min_bin_count = 0;
        let f = estimate_factors(&ts, &cfg, 4).unwrap();
        prop_assert!((f.prior.mass() - 1.0).abs() <= 1e-9);
        for kern in f.plant.iter().chain(&f.policy) {
            for r in 0..kern.rows() {
                prop_assert!((kern.row(r).mass() - 1.0).abs() <= 1e-9);
            }
        }
    }
}

fn dataset(seed: u64, trips: usize, samples: usize) -> TrajectorySet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trips = (0..trips)
        .map(|i| {
            let mut x = rng.random::<f64>();
            let samples = (0..samples)
                .map(|j| {
                    let u = 1.0 + rng.random::<f64>();
                    let s = Sample {
                        t: j as f64,
                        x,
                        u,
                        extras: vec![rng.random::<f64>() - 0.5],
                    };
                    x += u;
                    s
                })
                .collect();
            Trip {
                trip_id: format!("t{i:02}"),
                samples,
            }
        })
        .collect();
    TrajectorySet::new(vec!["jerk".into()], trips).unwrap()
}
