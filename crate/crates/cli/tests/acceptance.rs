//! Acceptance checks, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`) so the lines are printed even
//! under `cargo test`. Pass a substring to run only matching checks.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng as _;

use curriculum_cli::config::{ExperimentConfig, Setting};
use curriculum_cli::experiment::train_cohort;
use curriculum_core::bayesopt::{gp_posterior, kernel_rbf_ard, Dim, GPHyperparams, GPModel, GammaPrior, HyperPriors, ParamSpace};
use curriculum_core::cmdp::{exact_expected_return, exact_expected_visits};
use curriculum_core::env::lander::{reset_rescue, trigger, FunnelIntervention, LanderState, PadTrigger, PAD_HALF_WIDTH};
use curriculum_core::interventions::{check_learning_safety, induce, Intervention};
use curriculum_core::oracle::{
    broken_fixture, prop_fixtures, shortcut_cmdp, shortcut_solver, solve_exact, verify_prop1, verify_prop2, EnumerationBudget,
    SHORTCUT_STEPS,
};
use curriculum_core::rng::{derive_labeled, rng_from_seed};
use curriculum_core::student::{dual_update_eg, train_student, LagrangeState};
use curriculum_core::teacher::{cisr_optimize, gp_ucb_search, BayesOptConfig, CurriculumPolicyParams, StudentRun};

type Outcome = Result<String, String>;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&repo_root().join("configs").join(name)).expect("committed config loads")
}

fn tabular(config: &ExperimentConfig) -> curriculum_core::teacher::TabularSetting {
    match Setting::build(config).expect("setting builds") {
        Setting::Tabular(s) => s,
        Setting::Lander(_) => panic!("expected a tabular setting"),
    }
}

fn mean_success(runs: &[StudentRun]) -> f64 {
    runs.iter().map(|r| r.deployment.success_rate).sum::<f64>() / runs.len() as f64
}

fn safety_during_training() -> Outcome {
    let cfg = config("frozen_lake_sr1.toml");
    let setting = tabular(&cfg);
    let budget = cfg.cisr.n_units * cfg.cisr.unit_steps;
    if budget != 110_000 {
        return Err(format!("budget is {budget} steps, expected 11 x 10000"));
    }
    let mut lines = Vec::new();
    let mut ok = true;
    for (id, name) in ["SR1", "SR2", "HR"].iter().enumerate() {
        let mut failures = 0;
        let mut students = 0;
        for seed in 0..3 {
            let params = CurriculumPolicyParams::single(id);
            let runs = train_cohort(&setting, Some(&params), &cfg.cisr, &cfg.solver, 10, seed, None).map_err(|e| e.to_string())?;
            students += runs.len();
            failures += runs.iter().map(|r| r.training_failures).sum::<usize>();
            ok &= runs.iter().all(|r| r.units.len() == cfg.cisr.n_units);
        }
        ok &= failures == 0;
        lines.push(format!("{name} {failures} failures over {students} students"));
    }
    let detail = lines.join(", ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn unsafe_baseline() -> Outcome {
    let cfg = config("frozen_lake_none.toml");
    let setting = tabular(&cfg);
    let runs = train_cohort(&setting, None, &cfg.cisr, &cfg.solver, cfg.n_students, cfg.seed, None).map_err(|e| e.to_string())?;
    let failures: Vec<usize> = runs.iter().map(|r| r.training_failures).collect();
    let min = failures.iter().copied().min().unwrap_or(0);
    let detail = format!("per-student training failures {failures:?}");
    if runs.len() == 10 && min >= 100 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn prop1() -> Outcome {
    let fixtures = prop_fixtures().map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut ok = fixtures.len() >= 3;
    for (i, f) in fixtures.iter().enumerate() {
        let small = f.base.n_states() <= 9 && f.base.horizon() <= 10;
        let premise = f.intervention.tau() + f.intervention.kappa_i() <= f.base.kappa();
        let t = Instant::now();
        let r = verify_prop1(&f.base, &f.intervention, EnumerationBudget::default(), 10_000, derive_labeled(7, "prop1", i as u64))
            .map_err(|e| e.to_string())?;
        let secs = t.elapsed().as_secs_f64();
        ok &= small && premise && r.verified() && secs < 120.0;
        lines.push(format!("{} {} checked, {} counterexamples", f.name, r.policies_checked, r.counterexamples.len()));
    }
    let detail = lines.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn prop2() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for f in prop_fixtures().map_err(|e| e.to_string())? {
        let blanket = check_learning_safety(&f.base, &f.intervention);
        let r = verify_prop2(&f.base, &f.intervention, EnumerationBudget::default()).map_err(|e| e.to_string())?;
        // Independent recheck of a few policies with the DP evaluator.
        let induced = induce(Arc::new(f.base.clone()), Arc::new(f.intervention.clone())).map_err(|e| e.to_string())?;
        let uniform = curriculum_core::cmdp::TabularPolicy::uniform(f.base.n_states(), f.base.n_actions());
        let dp = exact_expected_visits(induced.cmdp(), &uniform, f.base.unsafe_set()).map_err(|e| e.to_string())?;
        ok &= blanket && r.verified() && dp.abs() <= 1e-10;
        lines.push(format!("{} {} checked, {} counterexamples", f.name, r.policies_checked, r.counterexamples.len()));
    }
    let b = broken_fixture().map_err(|e| e.to_string())?;
    let r = verify_prop2(&b.base, &b.intervention, EnumerationBudget::default()).map_err(|e| e.to_string())?;
    ok &= !r.counterexamples.is_empty();
    lines.push(format!("broken {}: {} counterexamples", b.name, r.counterexamples.len()));
    let detail = lines.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn solver_optimality() -> Outcome {
    let base = shortcut_cmdp();
    let best = solve_exact(&base, EnumerationBudget::default()).map_err(|e| e.to_string())?;
    let id = Intervention::identity(base.n_states(), base.kappa());
    let env = induce(Arc::new(base.clone()), Arc::new(id)).map_err(|e| e.to_string())?;
    let mut good = 0;
    let mut values = Vec::new();
    for seed in 0..5 {
        let (state, _) = train_student(&env, SHORTCUT_STEPS, &shortcut_solver(), None, seed).map_err(|e| e.to_string())?;
        let policy = state.policy();
        let ret = exact_expected_return(&base, &policy).map_err(|e| e.to_string())?;
        let unsafe_visits = exact_expected_visits(&base, &policy, base.unsafe_set()).map_err(|e| e.to_string())?;
        if (ret - best.value).abs() <= 0.05 * best.value.abs() && unsafe_visits <= base.kappa() + 0.02 {
            good += 1;
        }
        values.push(format!("{ret:.4}/{unsafe_visits:.4}"));
    }
    let detail = format!("oracle {:.4}, students (return/unsafe) {}, {good}/5 within bounds", best.value, values.join(" "));
    if good == 5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn eg_dual() -> Outcome {
    let s = LagrangeState::new(vec![0.25], 0.5).map_err(|e| e.to_string())?;
    let next = dual_update_eg(&s, &[1.0], 1.0, 0.5).map_err(|e| e.to_string())?;
    let e = std::f64::consts::E;
    let err = (next.lambdas()[0] - 0.5 * e / (1.0 + e)).abs();
    let mut rng = rng_from_seed(2024);
    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(1..=3);
        let b = rng.random_range(0.01..200.0);
        let eta = rng.random_range(0.01..5.0);
        let mut w: Vec<f64> = (0..=n).map(|_| rng.random::<f64>()).collect();
        let z: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v *= b / z);
        let mut state = LagrangeState::new(w[..n].to_vec(), b).map_err(|e| e.to_string())?;
        for _ in 0..rng.random_range(1..50) {
            let gaps: Vec<f64> = (0..n).map(|_| rng.random_range(-20.0..20.0)).collect();
            state = dual_update_eg(&state, &gaps, eta, b).map_err(|e| e.to_string())?;
            let sum: f64 = state.lambdas().iter().sum();
            worst = worst.max(sum - b);
            if sum > b || state.lambdas().iter().any(|l| *l < 0.0) {
                violations += 1;
            }
        }
    }
    let detail = format!("closed-form error {err:.2e}, {violations} budget violations, max sum - B {worst:.2e}");
    if err <= 1e-12 && violations == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gp_correctness() -> Outcome {
    let priors = HyperPriors::isotropic(2, GammaPrior { mean: 0.2, variance: 0.2 });
    let hyper = GPHyperparams { signal_variance: 1.7, lengthscales: vec![0.6, 1.3], noise_variance: 0.05 };
    let mut m = GPModel::new(hyper.clone(), priors.clone()).map_err(|e| e.to_string())?.without_normalization();
    let (x1, x2, y1, y2) = ([0.1, 0.4], [0.8, -0.2], 1.5, -0.7);
    m.add(x1.to_vec(), y1).map_err(|e| e.to_string())?;
    m.add(x2.to_vec(), y2).map_err(|e| e.to_string())?;
    // Direct 2x2 inversion with the kernel written out.
    let k = |a: &[f64; 2], b: &[f64; 2]| {
        let d0 = (a[0] - b[0]) / 0.6;
        let d1 = (a[1] - b[1]) / 1.3;
        1.7 * (-0.5 * (d0 * d0 + d1 * d1)).exp()
    };
    let (a, bb, d) = (k(&x1, &x1) + 0.05, k(&x1, &x2), k(&x2, &x2) + 0.05);
    let det = a * d - bb * bb;
    let inv = [[d / det, -bb / det], [-bb / det, a / det]];
    let mut max_err: f64 = 0.0;
    for q in [[0.3, 0.1], [0.1, 0.4], [-1.0, 2.0], [0.5, 0.5]] {
        let ks = [k(&x1, &q), k(&x2, &q)];
        let alpha = [inv[0][0] * y1 + inv[0][1] * y2, inv[1][0] * y1 + inv[1][1] * y2];
        let mean = ks[0] * alpha[0] + ks[1] * alpha[1];
        let quad = ks[0] * (inv[0][0] * ks[0] + inv[0][1] * ks[1]) + ks[1] * (inv[1][0] * ks[0] + inv[1][1] * ks[1]);
        let var = 1.7 - quad;
        let (gm, gv) = gp_posterior(&m, &q).map_err(|e| e.to_string())?;
        let kq = kernel_rbf_ard(&q, &x1, &hyper).map_err(|e| e.to_string())?;
        max_err = max_err.max((gm - mean).abs()).max((gv - var).abs()).max((kq - ks[0]).abs());
    }
    // Noise-free interpolation.
    let exact = GPHyperparams { noise_variance: 0.0, ..hyper };
    let mut n = GPModel::new(exact, priors).map_err(|e| e.to_string())?.without_normalization();
    let data = [([0.0, 0.0], 2.0), ([1.0, 0.5], -1.0), ([0.3, -0.8], 0.25)];
    for (x, y) in &data {
        n.add(x.to_vec(), *y).map_err(|e| e.to_string())?;
    }
    let mut interp_err: f64 = 0.0;
    for (x, y) in &data {
        let (m, v) = gp_posterior(&n, x).map_err(|e| e.to_string())?;
        interp_err = interp_err.max((m - y).abs()).max(v.abs());
    }
    // Gamma mean/variance to shape/scale and back.
    let mut gamma_err: f64 = 0.0;
    for (mean, var) in [(1.0, 0.2), (0.05, 0.02), (0.2, 0.2), (20.0, 4.0), (0.01, 0.1), (1.0, 0.3)] {
        let g = GammaPrior::new(mean, var).map_err(|e| e.to_string())?;
        let (k, theta) = (g.shape(), g.scale());
        gamma_err = gamma_err.max((k * theta - mean).abs() / mean).max((k * theta * theta - var).abs() / var);
    }
    let detail = format!("2x2 error {max_err:.2e}, interpolation error {interp_err:.2e}, gamma round-trip error {gamma_err:.2e}");
    if max_err <= 1e-10 && interp_err <= 1e-10 && gamma_err <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Negated Forrester function on [0, 1]; one global maximum near x = 0.757.
fn forrester(x: f64) -> f64 {
    -((6.0 * x - 2.0).powi(2) * (12.0 * x - 4.0).sin())
}

fn gp_ucb_efficacy() -> Outcome {
    let optimum = (0..=1_000_000).map(|i| forrester(i as f64 / 1e6)).fold(f64::NEG_INFINITY, f64::max);
    let space = ParamSpace { dims: vec![Dim::Interval(0.0, 1.0)] };
    let cfg = BayesOptConfig {
        n_init: 5,
        n_rounds: 20,
        priors: Some(HyperPriors::isotropic(1, GammaPrior { mean: 0.2, variance: 0.2 })),
        ..BayesOptConfig::default()
    };
    let mut gaps = Vec::new();
    for seed in 0..3 {
        let mut f = |_: usize, x: &[f64], _: u64| Ok(forrester(x[0]));
        let out = gp_ucb_search(&space, &cfg, seed, &mut f).map_err(|e| e.to_string())?;
        if out.trace.len() != 25 {
            return Err(format!("{} proposals", out.trace.len()));
        }
        gaps.push(optimum - out.trace[out.best].target);
    }
    let detail = format!("optimum {optimum:.4}, gaps {gaps:.4?}");
    if gaps.iter().all(|g| *g <= 0.05) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn curriculum_benefit() -> Outcome {
    let cfg = config("curriculum_benefit.toml");
    let setting = tabular(&cfg);
    let mut wins = 0;
    let mut lines = Vec::new();
    for teacher_seed in 0..3u64 {
        let opt = cisr_optimize(&setting, &cfg.cisr, &cfg.solver, &cfg.bayesopt, teacher_seed).map_err(|e| e.to_string())?;
        if opt.rounds.len() != 30 || opt.best.k() != 2 {
            return Err(format!("{} rounds with K = {}", opt.rounds.len(), opt.best.k()));
        }
        // Every policy gets the same fresh student seeds.
        let fresh = derive_labeled(teacher_seed, "fresh", 0);
        let cohort = |p: &CurriculumPolicyParams| {
            train_cohort(&setting, Some(p), &cfg.cisr, &cfg.solver, cfg.n_students, fresh, None).map(|r| mean_success(&r))
        };
        let best = cohort(&opt.best).map_err(|e| e.to_string())?;
        let singles: Vec<f64> = (0..3)
            .map(|id| cohort(&CurriculumPolicyParams::single(id)))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let best_single = singles.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let win = best > best_single && singles[2] < 0.05;
        wins += usize::from(win);
        lines.push(format!(
            "seed {teacher_seed}: optimized {:?} {best:.3} vs SR1 {:.3} SR2 {:.3} HR {:.3} [{}]",
            opt.best.intervention_sequence,
            singles[0],
            singles[1],
            singles[2],
            if win { "win" } else { "loss" }
        ));
    }
    let detail = format!("{wins}/3 teacher seeds; {}", lines.join("; "));
    if wins >= 2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Intersection of two lines `a1 x + b1 y = c1`, `a2 x + b2 y = c2` by Cramer's rule.
fn cramer(l1: [f64; 3], l2: [f64; 3]) -> (f64, f64) {
    let det = l1[0] * l2[1] - l1[1] * l2[0];
    ((l1[2] * l2[1] - l1[1] * l2[2]) / det, (l1[0] * l2[2] - l1[2] * l2[0]) / det)
}

/// Rescue point written as a linear system: the diagonal through the state
/// toward the pad meets the reset line.
fn rescue_by_hand(x0: f64, y0: f64, a_prime: f64) -> (f64, f64) {
    let w = PAD_HALF_WIDTH;
    if x0 > w {
        // x + y = x0 + y0 and a' x - y = a' w
        cramer([1.0, 1.0, x0 + y0], [a_prime, -1.0, a_prime * w])
    } else if x0 < -w {
        // -x + y = y0 - x0 and a' x + y = -a' w
        cramer([-1.0, 1.0, y0 - x0], [a_prime, 1.0, -a_prime * w])
    } else {
        (x0, (y0 - 0.1).max(0.0))
    }
}

fn lander_geometry() -> Outcome {
    let narrow = FunnelIntervention::narrow(0.1);
    let wide = FunnelIntervention::wide(0.1);
    let constants = narrow.steepness_a == 20.0 && narrow.reset_steepness_a_prime == 100.0 && wide.steepness_a == 0.5 && wide.reset_steepness_a_prime == 1.0;
    let st = |x: f64, y: f64, y_dot: f64, alpha: f64| LanderState { x, y, y_dot, alpha, ..LanderState::default() };
    // (state, funnel, pad form, expected trigger), worked out by hand.
    let points: Vec<(LanderState, &FunnelIntervention, PadTrigger, bool)> = vec![
        (st(0.6, 0.1, 0.0, 0.0), &wide, PadTrigger::Signed, true),
        (st(0.6, 0.3, 0.0, 0.0), &wide, PadTrigger::Signed, false),
        (st(-0.8, 0.29, 0.0, 0.0), &wide, PadTrigger::Signed, true),
        (st(-0.8, 0.31, 0.0, 0.0), &wide, PadTrigger::Signed, false),
        (st(0.21, 0.004, 0.0, 0.0), &wide, PadTrigger::Signed, true),
        (st(0.21, 0.006, 0.0, 0.0), &wide, PadTrigger::Signed, false),
        (st(0.25, 0.99, 0.0, 0.0), &narrow, PadTrigger::Signed, true),
        (st(0.25, 1.01, 0.0, 0.0), &narrow, PadTrigger::Signed, false),
        (st(-0.3, 1.9, 0.0, 0.0), &narrow, PadTrigger::Signed, true),
        (st(-0.3, 2.1, 0.0, 0.0), &narrow, PadTrigger::Signed, false),
        (st(1.0, 10.0, 0.0, 0.0), &narrow, PadTrigger::Signed, true),
        (st(0.0, 0.5, -0.5, 0.0), &narrow, PadTrigger::Signed, false),
        (st(0.1, 0.0, 0.3, 0.0), &narrow, PadTrigger::Signed, true),
        (st(0.1, 0.0, 0.29, 0.49), &wide, PadTrigger::Signed, false),
        (st(-0.1, 0.01, 0.0, 0.61), &wide, PadTrigger::Signed, true),
        (st(0.2, 0.02, 0.51, 0.0), &narrow, PadTrigger::Signed, true),
        (st(0.0, 0.0, -1.0, -1.0), &wide, PadTrigger::Signed, false),
        (st(0.0, 0.0, -1.0, -1.0), &wide, PadTrigger::Magnitude, true),
        (st(-0.2, 0.0, 0.0, 0.5), &wide, PadTrigger::Signed, true),
        (st(0.2000001, 0.0, 0.0, 0.0), &narrow, PadTrigger::Signed, true),
    ];
    let mut trigger_errors = Vec::new();
    let mut max_err: f64 = 0.0;
    let mut retriggers = 0;
    for (i, (s, f, form, expected)) in points.iter().enumerate() {
        if trigger(s, f.steepness_a, *form) != *expected {
            trigger_errors.push(i);
        }
        let r = reset_rescue(s, f.steepness_a, f.reset_steepness_a_prime).map_err(|e| e.to_string())?;
        let (hx, hy) = rescue_by_hand(s.x, s.y, f.reset_steepness_a_prime);
        max_err = max_err.max((r.x - hx).abs()).max((r.y - hy).abs());
        if *expected && trigger(&r, f.steepness_a, *form) {
            retriggers += 1;
        }
    }
    // Worked examples of the rescue closed form.
    let worked = [((0.6, 0.1), &wide, (0.45, 0.25)), ((-0.8, 0.29), &wide, (-0.645, 0.445)), ((0.0, 0.5), &narrow, (0.0, 0.4))];
    for ((x, y), f, (ex, ey)) in worked {
        let r = reset_rescue(&st(x, y, 0.0, 0.0), f.steepness_a, f.reset_steepness_a_prime).map_err(|e| e.to_string())?;
        max_err = max_err.max((r.x - ex).abs()).max((r.y - ey).abs());
    }
    // Random triggered states never stay triggered after the rescue.
    let mut rng = rng_from_seed(11);
    let mut sampled = 0;
    for _ in 0..20_000 {
        let f = if rng.random::<bool>() { &narrow } else { &wide };
        let s = st(rng.random_range(-1.0..1.0), rng.random_range(0.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
        if trigger(&s, f.steepness_a, PadTrigger::Signed) {
            sampled += 1;
            let r = reset_rescue(&s, f.steepness_a, f.reset_steepness_a_prime).map_err(|e| e.to_string())?;
            retriggers += usize::from(trigger(&r, f.steepness_a, PadTrigger::Signed));
        }
    }
    let detail = format!(
        "20 points, trigger mismatches {trigger_errors:?}, rescue error {max_err:.2e}, {retriggers} re-triggering rescues over {} triggered states, constants {}",
        sampled + points.iter().filter(|p| p.3).count(),
        if constants { "exact" } else { "WRONG" }
    );
    if constants && trigger_errors.is_empty() && max_err <= 1e-9 && retriggers == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run_cli(args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_curriculum"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

fn csv_bodies(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(Result::ok)
                .filter(|e| e.path().extension().is_some_and(|x| x == "csv"))
                .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap_or_default()))
                .collect()
        })
        .unwrap_or_default()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = repo_root().join("configs");
    let cfg = |name: &str| root.join(name).to_string_lossy().into_owned();
    let policy = tmp.path().join("policy.csv");
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("train-student", vec!["train-student".into(), "--config".into(), cfg("smoke_train.toml")]),
        ("train-student lander", vec!["train-student".into(), "--config".into(), cfg("smoke_lander.toml")]),
        ("run-experiment", vec!["run-experiment".into(), "--config".into(), cfg("smoke_curriculum.toml")]),
        ("optimize-teacher", vec!["optimize-teacher".into(), "--config".into(), cfg("smoke_teacher.toml")]),
        ("verify-props", vec!["verify-props".into(), "--random-policies".into(), "500".into()]),
        (
            "eval",
            vec!["eval".into(), "--config".into(), cfg("smoke_train.toml"), "--policy".into(), policy.to_string_lossy().into_owned()],
        ),
    ];
    let mut checked = 0;
    for (name, args) in &commands {
        let mut bodies = Vec::new();
        for (run, workers) in [(0, "1"), (1, "4")] {
            let dir = tmp.path().join(format!("{}-{run}", name.replace(' ', "_")));
            let mut a: Vec<&str> = args.iter().map(String::as_str).collect();
            a.extend(["--workers", workers]);
            run_cli(&a, &dir)?;
            if *name == "train-student" && run == 0 {
                fs::copy(dir.join("policy.csv"), &policy).map_err(|e| e.to_string())?;
            }
            bodies.push(csv_bodies(&dir));
        }
        if bodies[0].is_empty() {
            return Err(format!("{name} wrote no CSV files"));
        }
        if bodies[0] != bodies[1] {
            let differing: Vec<&String> = bodies[0].keys().filter(|k| bodies[0].get(*k) != bodies[1].get(*k)).collect();
            return Err(format!("{name}: {differing:?} differ between runs"));
        }
        checked += bodies[0].len();
    }
    Ok(format!("{} commands, {checked} CSV files byte-identical across reruns with 1 and 4 workers", commands.len()))
}

type Check = fn() -> Outcome;

const CHECKS: [(&str, Check); 11] = [
    ("safety_during_training", safety_during_training),
    ("unsafe_baseline", unsafe_baseline),
    ("prop1_feasibility_inclusion", prop1),
    ("prop2_learning_safety", prop2),
    ("student_solver_optimality", solver_optimality),
    ("eg_dual_mechanics", eg_dual),
    ("gp_correctness", gp_correctness),
    ("gp_ucb_efficacy", gp_ucb_efficacy),
    ("curriculum_benefit", curriculum_benefit),
    ("lander_geometry", lander_geometry),
    ("cli_determinism", determinism),
];

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in CHECKS {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
