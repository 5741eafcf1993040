use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use fpd::io::{load_trajectories, read_density, read_density_table, read_kernel, read_kernel_matrix};
use fpd_core::density::{Conditioning, ConditionalKernel, Grid, GridDensity};
use serde_json::Value;
use tempfile::TempDir;

const BASE: &str = "\
horizon = 4
seed = 7
state_grid.lower = 10.0
state_grid.upper = 40.0
state_grid.points = 241
control_grid.lower = -4.0
control_grid.upper = 26.0
control_grid.points = 121
generator.trip_count = 40
generator.samples = 5
reference.n_keep = 10
rollouts.count = 400
";

fn fpd<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_fpd")).args(args).output().expect("spawn fpd");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn ok<S: AsRef<std::ffi::OsStr>>(args: &[S]) {
    let (code, err) = fpd(args);
    assert_eq!(code, 0, "fpd failed: {err}");
}

fn config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, format!("{BASE}{extra}")).unwrap();
    path
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Run {
    dir: TempDir,
    cfg: PathBuf,
    data: PathBuf,
    factors: PathBuf,
}

impl Run {
    fn new(extra: &str) -> Run {
        let dir = TempDir::new().unwrap();
        let cfg = config(dir.path(), "run.toml", extra);
        let data = dir.path().join("trips.csv");
        let factors = dir.path().join("factors");
        ok(&["generate", "--config", p(&cfg), "--out", p(&data)]);
        ok(&["fit", "--config", p(&cfg), "--data", p(&data), "--out", p(&factors)]);
        Run { dir, cfg, data, factors }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn synthesize(&self, cfg: &Path, rel: &str) -> PathBuf {
        let out = self.path(rel);
        ok(&["synthesize", "--config", p(cfg), "--factors", p(&self.factors), "--out", p(&out)]);
        out
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn state_grid() -> Grid {
    Grid::new(10.0, 40.0, 241).unwrap()
}

fn control_grid() -> Grid {
    Grid::new(-4.0, 26.0, 121).unwrap()
}

fn policy_rows(path: &Path) -> Vec<Vec<f64>> {
    let (nx, nu) = (state_grid().points(), control_grid().points());
    let table = read_kernel_matrix(path, Conditioning::State(state_grid()), control_grid()).unwrap();
    assert_eq!(table.len(), nx * nu);
    table.chunks(nu).map(<[f64]>::to_vec).collect()
}

fn kernel_rows(k: &ConditionalKernel) -> Vec<Vec<f64>> {
    let mut buf = Vec::new();
    (0..k.rows())
        .map(|r| {
            k.row_into(r, &mut buf);
            buf.clone()
        })
        .collect()
}

fn trapezoid(grid: &Grid, values: &[f64]) -> f64 {
    let h = grid.spacing();
    let n = values.len();
    h * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1]))
}

fn row_moments(grid: &Grid, row: &[f64]) -> (f64, f64) {
    let u = grid.coordinates();
    let mass = trapezoid(grid, row);
    let m1: Vec<f64> = row.iter().zip(&u).map(|(w, u)| w * u).collect();
    let mean = trapezoid(grid, &m1) / mass;
    let m2: Vec<f64> = row.iter().zip(&u).map(|(w, u)| w * (u - mean) * (u - mean)).collect();
    (mean, trapezoid(grid, &m2) / mass)
}

/// Reference closed-loop state marginals by direct quadrature over the
/// g-side files.
fn reference_marginals(factors: &Path, horizon: usize) -> Vec<Vec<f64>> {
    let (sg, cg) = (state_grid(), control_grid());
    let (nx, nu) = (sg.points(), cg.points());
    let (_, prior) = read_density_table(&factors.join("g/prior.csv")).unwrap();
    let z = trapezoid(&sg, &prior);
    let mut q: Vec<f64> = prior.iter().map(|w| w / z).collect();
    let mut out = vec![q.clone()];
    let (hx, hu) = (sg.spacing(), cg.spacing());
    let tw = |i: usize, n: usize, h: f64| if i == 0 || i == n - 1 { 0.5 * h } else { h };
    for k in 1..=horizon {
        let plant = kernel_rows(&read_kernel(&factors.join(format!("g/plant_{k:02}.json"))).unwrap());
        let policy = kernel_rows(&read_kernel(&factors.join(format!("g/policy_{k:02}.json"))).unwrap());
        let mut next = vec![0.0; nx];
        for ix in 0..nx {
            for iu in 0..nu {
                let w = q[ix] * tw(ix, nx, hx) * policy[ix][iu] * tw(iu, nu, hu);
                for (n, p) in next.iter_mut().zip(&plant[ix * nu + iu]) {
                    *n += w * p;
                }
            }
        }
        q = next;
        out.push(q.clone());
    }
    out
}

fn read_all(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_deterministic_and_round_trips() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, BASE.replace("generator.trip_count = 40", "generator.trip_count = 100")).unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    ok(&["generate", "--config", p(&cfg), "--out", p(&a)]);
    ok(&["generate", "--config", p(&cfg), "--out", p(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let (parsed, _) = fpd::config::RunConfig::load(&cfg).unwrap();
    let direct = fpd::generator::generate(&parsed.generator, parsed.seed).unwrap();
    assert_eq!(load_trajectories(&a).unwrap(), direct);
    assert_eq!(direct.len(), 100);

    let c = dir.path().join("c.csv");
    ok(&["--seed", "8", "generate", "--config", p(&cfg), "--out", p(&c)]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn bad_configs_exit_with_config_code() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.csv");
    let zero = config(dir.path(), "zero.toml", "generator.trip_count = 0\n");
    assert_eq!(fpd(&["generate", "--config", p(&zero), "--out", p(&out)]).0, 2);
    let unknown = config(dir.path(), "unknown.toml", "estimation.bogus = 1\n");
    assert_eq!(fpd(&["generate", "--config", p(&unknown), "--out", p(&out)]).0, 2);
    let missing = dir.path().join("absent.toml");
    assert_eq!(fpd(&["generate", "--config", p(&missing), "--out", p(&out)]).0, 1);
    assert_eq!(fpd(&["frobnicate"]).0, 2);
}

#[test]
fn fit_writes_both_sides_reproducibly() {
    let run = Run::new("");
    let m = json(&run.factors.join("manifest.json"));
    assert_eq!(m["continuity_ok"], Value::Bool(true));
    assert_eq!(m["reference_trips"].as_array().unwrap().len(), 10);
    for side in ["f", "g"] {
        assert!(run.factors.join(side).join("prior.csv").exists());
        for k in 1..=4 {
            assert!(run.factors.join(side).join(format!("plant_{k:02}.json")).exists());
            assert!(run.factors.join(side).join(format!("policy_{k:02}.json")).exists());
        }
    }
    let again = run.path("again");
    ok(&["fit", "--config", p(&run.cfg), "--data", p(&run.data), "--out", p(&again)]);
    assert_eq!(read_all(&run.factors), read_all(&again));

    let too_many = config(run.dir.path(), "many.toml", "").to_string_lossy().into_owned();
    fs::write(&too_many, BASE.replace("reference.n_keep = 10", "reference.n_keep = 41")).unwrap();
    let code = fpd(&["fit", "--config", &too_many, "--data", p(&run.data), "--out", p(&run.path("many"))]).0;
    assert_eq!(code, 2);
}

#[test]
fn sparse_histograms_fail_continuity() {
    let run = Run::new("");
    let cfg = config(
        run.dir.path(),
        "hist.toml",
        "estimation.method = \"histogram\"\nestimation.smoothing = 0.0\nestimation.min_bin_count = 0\n",
    );
    let out = run.path("hist");
    let (code, err) = fpd(&["fit", "--config", p(&cfg), "--data", p(&run.data), "--out", p(&out)]);
    assert_eq!(code, 3, "{err}");
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["continuity_ok"], Value::Bool(false));
}

#[test]
fn unconstrained_synthesis_reports_no_multipliers() {
    let run = Run::new("");
    let out = run.synthesize(&run.cfg, "policy");
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.starts_with("unconstrained FPD\n"));
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["unconstrained"], Value::Bool(true));
    for step in m["steps"].as_array().unwrap() {
        assert!(step["lambdas"].as_array().unwrap().iter().all(|l| l.as_array().unwrap().is_empty()));
    }
    let values = floats(&m["values"]);
    assert_eq!(values.len(), 4);
    let total = m["predicted_total"].as_f64().unwrap();
    assert!((total - m["prior_kl"].as_f64().unwrap() - values[0]).abs() <= 1e-12);
}

#[test]
fn variance_constraint_widens_every_row() {
    let run = Run::new("");
    let cfg = config(run.dir.path(), "wide.toml", "constraint.all.variance_scale = 2.0\n");
    let out = run.synthesize(&cfg, "policy");
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.starts_with("constrained FPD\n"));

    let cg = control_grid();
    let marginals = reference_marginals(&run.factors, 4);
    let sg = state_grid();
    for k in 1..=4 {
        let reference = kernel_rows(&read_kernel(&run.factors.join(format!("g/policy_{k:02}.json"))).unwrap());
        let q = &marginals[k - 1];
        let mass: Vec<f64> = q.iter().enumerate().map(|(i, w)| w * sg.weight(i)).collect();
        let (mut mbar, mut vbar) = (0.0, 0.0);
        for (row, m) in reference.iter().zip(&mass) {
            let (mean, var) = row_moments(&cg, row);
            mbar += m * mean;
            vbar += m * var;
        }
        let target = 2.0 * vbar;
        let policy = policy_rows(&out.join(format!("policy_{k:02}.csv")));
        for (ix, (row, reference_row)) in policy.iter().zip(&reference).enumerate() {
            let (mean, var) = row_moments(&cg, row);
            assert!((mean - mbar).abs() <= 1e-3 * vbar.sqrt(), "k={k} ix={ix} mean {mean} vs {mbar}");
            assert!((var - target).abs() <= 0.02 * target, "k={k} ix={ix} variance {var} vs {target}");
            let peak = row.iter().copied().fold(0.0, f64::max);
            let reference_peak = reference_row.iter().copied().fold(0.0, f64::max);
            assert!(peak < reference_peak, "k={k} ix={ix} peak {peak} vs {reference_peak}");
        }
    }
    let m = json(&out.join("manifest.json"));
    for step in m["steps"].as_array().unwrap() {
        assert!(step["max_peak_ratio_to_reference"].as_f64().unwrap() < 1.0);
        assert!(step["max_constraint_residual"].as_f64().unwrap() <= 1e-6);
    }
}

#[test]
fn infeasible_and_mismatched_requests_fail() {
    let run = Run::new("");
    let cfg = config(run.dir.path(), "far.toml", "constraint.2.feature = \"monomial(1)\"\nconstraint.2.target = 40.0\n");
    let (code, err) = fpd(&["synthesize", "--config", p(&cfg), "--factors", p(&run.factors), "--out", p(&run.path("far"))]);
    assert_eq!(code, 4, "{err}");

    let other = run.path("other.toml");
    fs::write(&other, BASE.replace("control_grid.points = 121", "control_grid.points = 61")).unwrap();
    let (code, err) = fpd(&["synthesize", "--config", p(&other), "--factors", p(&run.factors), "--out", p(&run.path("o"))]);
    assert_eq!(code, 6, "{err}");

    let policy = run.synthesize(&run.cfg, "policy");
    let short = run.path("short.toml");
    fs::write(&short, BASE.replace("horizon = 4", "horizon = 3")).unwrap();
    let report = run.path("r.json");
    let (code, _) =
        fpd(&["evaluate", "--config", p(&short), "--factors", p(&run.factors), "--policy", p(&policy), "--out", p(&report)]);
    assert_eq!(code, 6);
}

#[test]
fn gamma_modes_differ_by_the_normalizer_integral() {
    let dir = TempDir::new().unwrap();
    let extra = "constraint.all.variance_scale = 2.0\n";
    let one = |mode: &str| BASE.replace("horizon = 4", "horizon = 1") + extra + &format!("gamma_mode = \"{mode}\"\n");
    let theorem = dir.path().join("theorem.toml");
    let literal = dir.path().join("literal.toml");
    fs::write(&theorem, one("theorem")).unwrap();
    fs::write(&literal, one("algorithm_literal")).unwrap();
    let data = dir.path().join("trips.csv");
    let factors = dir.path().join("factors");
    ok(&["generate", "--config", p(&theorem), "--out", p(&data)]);
    ok(&["fit", "--config", p(&theorem), "--data", p(&data), "--out", p(&factors)]);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synthesize", "--config", p(&theorem), "--factors", p(&factors), "--out", p(&a)]);
    ok(&["synthesize", "--config", p(&literal), "--factors", p(&factors), "--out", p(&b)]);

    let (ma, mb) = (json(&a.join("manifest.json")), json(&b.join("manifest.json")));
    assert_eq!(ma["gamma_mode"], "theorem");
    assert_eq!(mb["gamma_mode"], "algorithm_literal");
    assert_eq!(fs::read(a.join("policy_01.csv")).unwrap(), fs::read(b.join("policy_01.csv")).unwrap());
    let prior = read_density(&factors.join("f/prior.csv")).unwrap();
    let log_gamma_tilde0 = floats(&ma["steps"][0]["log_gamma_tilde0"]);
    let weighted: Vec<f64> = prior.weights().iter().zip(&log_gamma_tilde0).map(|(w, l)| w * l).collect();
    let expected = trapezoid(prior.grid(), &weighted);
    let gap = floats(&mb["values"])[0] - floats(&ma["values"])[0];
    assert!(expected.abs() > 1e-6);
    assert!((gap - expected).abs() <= 1e-9 * (1.0 + expected.abs()), "{gap} vs {expected}");
}

#[test]
fn identical_sides_evaluate_to_zero() {
    let run = Run::new("");
    let f = run.factors.join("f");
    fs::remove_dir_all(&f).unwrap();
    fs::create_dir(&f).unwrap();
    for e in fs::read_dir(run.factors.join("g")).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), f.join(e.file_name())).unwrap();
    }
    let policy = run.synthesize(&run.cfg, "policy");
    let report = run.path("report.json");
    ok(&["evaluate", "--config", p(&run.cfg), "--factors", p(&run.factors), "--policy", p(&policy), "--out", p(&report)]);
    let r = json(&report);
    assert!(r["total_kl"].as_f64().unwrap().abs() <= 1e-8, "{}", r["total_kl"]);
    for t in floats(&r["per_step_terms"]) {
        assert!(t.abs() <= 1e-8);
    }
}

#[test]
fn every_command_is_reproducible() {
    let run = Run::new("constraint.all.variance_scale = 2.0\n");
    let a = run.synthesize(&run.cfg, "a");
    let b = run.synthesize(&run.cfg, "b");
    assert_eq!(read_all(&a), read_all(&b));

    let (r1, r4) = (run.path("r1.json"), run.path("r4.json"));
    let eval = |threads: &str, out: &Path| {
        ok(&[
            "--threads", threads, "evaluate", "--config", p(&run.cfg), "--factors", p(&run.factors), "--policy", p(&a),
            "--out", p(out),
        ])
    };
    eval("1", &r1);
    eval("4", &r4);
    assert_eq!(fs::read(&r1).unwrap(), fs::read(&r4).unwrap());
    let r = json(&r1);
    assert_eq!(r["rollouts"]["count"], 400);
    for gap in r["value_ledger"].as_array().unwrap() {
        assert!(gap["gap"].as_f64().unwrap().abs() <= 1e-6);
    }

    let (pa, pb) = (run.path("plots_a"), run.path("plots_b"));
    for out in [&pa, &pb] {
        ok(&[
            "export-plots", "--config", p(&run.cfg), "--factors", p(&run.factors), "--policy", p(&a), "--out", p(out),
        ]);
    }
    assert_eq!(read_all(&pa), read_all(&pb));
}

#[test]
fn exported_densities_reload_normalized() {
    let run = Run::new("constraint.all.variance_scale = 2.0\n");
    let policy = run.synthesize(&run.cfg, "policy");
    let plots = run.path("plots");
    ok(&[
        "export-plots", "--config", p(&run.cfg), "--factors", p(&run.factors), "--policy", p(&policy), "--out",
        p(&plots),
    ]);
    let mut files = vec![run.factors.join("f/prior.csv"), run.factors.join("g/prior.csv")];
    for kind in ["control", "state", "marginal"] {
        for label in ["reference", "unconstrained", "constrained"] {
            files.push(plots.join(format!("{kind}_{label}.csv")));
        }
    }
    for file in files {
        let (grid, weights) = read_density_table(&file).unwrap();
        assert!((trapezoid(&grid, &weights) - 1.0).abs() <= 1e-9, "{}", file.display());
        GridDensity::new(grid, weights).unwrap();
    }
    for k in 1..=4 {
        for row in policy_rows(&policy.join(format!("policy_{k:02}.csv"))) {
            assert!((trapezoid(&control_grid(), &row) - 1.0).abs() <= 1e-9);
        }
    }
}
