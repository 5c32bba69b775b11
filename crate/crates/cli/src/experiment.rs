//! The harness commands, callable without the binary.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use curriculum_core::cmdp::TabularPolicy;
use curriculum_core::env::lander::{log_episodes, write_episode_csv, LanderEnv};
use curriculum_core::oracle::{
    broken_fixture, prop_fixtures, verify_prop1, verify_prop2, write_counterexamples_csv, EnumerationBudget, PropFixture,
    PropositionReport,
};
use curriculum_core::rng::derive_labeled;
use curriculum_core::sim::{run_policy, Budget, StudentEnv};
use curriculum_core::student::{train_student, SolverConfig};
use curriculum_core::teacher::{
    aggregate, cisr_optimize, run_curriculum_student, run_round, run_student, write_trace_csv, CISRConfig,
    CurriculumPolicyParams, Deployment, EnvChoice, Optimization, RoundResult, StudentRun, TeachingSetting,
};

use crate::config::{custom_intervention, load_custom_cmdp, BestParams, Environment, ExperimentConfig, PolicyMode, Provenance, Setting};
use crate::output::{self, create, RunClock};
use crate::HarnessError;

/// Runs `f` on a rayon pool of `workers` threads, or the global pool.
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R, HarnessError> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(HarnessError::runtime)?;
            Ok(pool.install(f))
        }
    }
}

macro_rules! with_setting {
    ($setting:expr, $s:ident => $body:expr) => {
        match $setting {
            Setting::Tabular($s) => $body,
            Setting::Lander($s) => $body,
        }
    };
}

fn intervention_names<S: TeachingSetting>(setting: &S) -> Vec<String> {
    (0..setting.n_interventions()).map(|i| setting.intervention_name(i)).collect()
}

/// Seed of student `j` in a cohort started from `seed`; the same derivation
/// as a teacher round, so a round can be replayed from its seed.
pub fn student_seed(seed: u64, j: usize) -> u64 {
    derive_labeled(seed, "student", j as u64)
}

/// Trains `n` fresh students in parallel, under `params` or in the original
/// problem when `params` is `None`.
pub fn train_cohort<S: TeachingSetting>(
    setting: &S,
    params: Option<&CurriculumPolicyParams>,
    cisr: &CISRConfig,
    solver: &SolverConfig,
    n: usize,
    seed: u64,
    explicit: Option<&[u64]>,
) -> Result<Vec<StudentRun>, HarnessError> {
    let seeds: Vec<u64> = match explicit {
        Some(s) => s.to_vec(),
        None => (0..n).map(|j| student_seed(seed, j)).collect(),
    };
    let result = match params {
        Some(p) if explicit.is_none() => {
            let cfg = CISRConfig { students_per_round: n, ..cisr.clone() };
            run_round(p, setting, &cfg, solver, seed).map(|r| r.students)
        }
        Some(p) => seeds
            .par_iter()
            .map(|&s| run_curriculum_student(setting, p, cisr, solver, s))
            .collect::<Result<Vec<_>, _>>(),
        None => seeds
            .par_iter()
            .map(|&s| run_student(setting, &mut |_, _| Ok(EnvChoice::Original), cisr, solver, s))
            .collect::<Result<Vec<_>, _>>(),
    };
    result.map_err(HarnessError::runtime)
}

/// Result of `run-experiment`.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub names: Vec<String>,
    /// Curriculum the students followed; `None` for the original problem.
    pub params: Option<CurriculumPolicyParams>,
    pub result: RoundResult,
    /// Present in optimized mode.
    pub optimization: Option<Optimization>,
}

fn resolve_params(config: &ExperimentConfig) -> Result<Option<CurriculumPolicyParams>, HarnessError> {
    match &config.policy {
        PolicyMode::NoIntervention | PolicyMode::Optimized => Ok(None),
        PolicyMode::Single { id } => Ok(Some(CurriculumPolicyParams::single(*id))),
        PolicyMode::FixedParams { file } => BestParams::load(file)?.params().map(Some),
        PolicyMode::Curriculum { intervention_sequence, switch_thresholds } => {
            CurriculumPolicyParams::new(intervention_sequence.clone(), switch_thresholds.clone())
                .map(Some)
                .map_err(|e| HarnessError::Config(format!("policy: {e}")))
        }
    }
}

fn check_ids(params: &CurriculumPolicyParams, n: usize) -> Result<(), HarnessError> {
    match params.intervention_sequence.iter().find(|&&id| id >= n) {
        Some(id) => Err(HarnessError::Config(format!("policy: intervention {id} out of range, library has {n}"))),
        None => Ok(()),
    }
}

/// Trains the configured cohort and writes `students.csv`, `final.csv` and
/// `aggregate.csv` (plus the optimization files in optimized mode).
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutcome, HarnessError> {
    let clock = RunClock::start("run-experiment");
    let setting = Setting::build(config)?;
    let params = resolve_params(config)?;
    let seed = config.base_seed();
    let explicit = config.student_seeds();
    let outcome = with_workers(config.workers, || {
        with_setting!(&setting, s => {
            let names = intervention_names(s);
            if let Some(p) = &params {
                check_ids(p, names.len())?;
            }
            let (params, optimization) = if config.policy == PolicyMode::Optimized {
                let opt = cisr_optimize(s, &config.cisr, &config.solver, &config.bayesopt, seed).map_err(HarnessError::runtime)?;
                (Some(opt.best.clone()), Some(opt))
            } else {
                (params, None)
            };
            // Fresh students after an optimization get seeds the teacher never saw.
            let cohort_seed = if optimization.is_some() { derive_labeled(seed, "fresh", 0) } else { seed };
            let runs = train_cohort(s, params.as_ref(), &config.cisr, &config.solver, config.n_students, cohort_seed, explicit.as_deref())?;
            let result = aggregate(params.clone().unwrap_or_else(|| CurriculumPolicyParams::single(0)), runs);
            Ok::<_, HarnessError>(ExperimentOutcome { names, params, result, optimization })
        })
    })??;
    if let Some(dir) = out {
        let names = &outcome.names;
        output::write_students_csv(create(dir, "students.csv")?, &outcome.result.students, names)?;
        output::write_final_csv(create(dir, "final.csv")?, &outcome.result.students, names)?;
        output::write_aggregate_csv(create(dir, "aggregate.csv")?, &outcome.result.students)?;
        if let Some(opt) = &outcome.optimization {
            write_optimization(dir, opt, &config.cisr, seed)?;
        }
        write_resolved_config(dir, config)?;
        clock.finish(dir)?;
    }
    Ok(outcome)
}

fn write_resolved_config(dir: &Path, config: &ExperimentConfig) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("resolved_config.toml"), config.to_toml())?;
    Ok(())
}

/// Best curriculum of an optimization with what is needed to replay its round.
pub fn best_params(opt: &Optimization, cisr: &CISRConfig, seed: u64) -> BestParams {
    let r = &opt.rounds[opt.best_round];
    BestParams {
        intervention_sequence: opt.best.intervention_sequence.clone(),
        switch_thresholds: opt.best.switch_thresholds.clone(),
        provenance: Some(Provenance {
            round: opt.best_round,
            round_seed: derive_labeled(seed, "round", opt.best_round as u64),
            students: cisr.students_per_round,
            final_value: r.final_value,
            mean_success: r.mean_success,
            teacher_reward: r.teacher_reward,
        }),
    }
}

/// `trace.csv`, `gp_data.csv` and `best_params.toml`.
fn write_optimization(dir: &Path, opt: &Optimization, cisr: &CISRConfig, seed: u64) -> Result<(), HarnessError> {
    write_trace_csv(opt, cisr.k, create(dir, "trace.csv")?)?;
    let mut w = csv::Writer::from_writer(create(dir, "gp_data.csv")?);
    let dim = opt.search.trace.first().map_or(0, |r| r.x.len());
    let mut header = vec!["round".to_string()];
    header.extend((0..dim).map(|d| format!("x_{d}")));
    header.push("target".into());
    w.write_record(&header)?;
    for row in &opt.search.trace {
        let mut rec = vec![row.round.to_string()];
        rec.extend(row.x.iter().map(f64::to_string));
        rec.push(row.target.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    let mut f = create(dir, "best_params.toml")?;
    f.write_all(best_params(opt, cisr, seed).to_toml().as_bytes())?;
    f.flush()?;
    Ok(())
}

/// Runs the teacher optimization and writes its trace and best parameters.
pub fn optimize_teacher(config: &ExperimentConfig, out: Option<&Path>) -> Result<(Optimization, BestParams), HarnessError> {
    let clock = RunClock::start("optimize-teacher");
    let setting = Setting::build(config)?;
    let seed = config.base_seed();
    let opt = with_workers(config.workers, || {
        with_setting!(&setting, s => cisr_optimize(s, &config.cisr, &config.solver, &config.bayesopt, seed))
    })?
    .map_err(HarnessError::runtime)?;
    let best = best_params(&opt, &config.cisr, seed);
    if let Some(dir) = out {
        write_optimization(dir, &opt, &config.cisr, seed)?;
        write_resolved_config(dir, config)?;
        clock.finish(dir)?;
    }
    Ok((opt, best))
}

/// Result of `train-student`.
#[derive(Clone, Debug)]
pub struct TrainedStudent {
    pub policy: TabularPolicy,
    pub training_failures: usize,
    pub deployment: Deployment,
}

fn env_for<'a, S: TeachingSetting>(setting: &'a S, config: &ExperimentConfig) -> Result<&'a S::Env, HarnessError> {
    match &config.policy {
        PolicyMode::NoIntervention => Ok(setting.original_env()),
        PolicyMode::Single { id } if *id < setting.n_interventions() => Ok(setting.training_env(*id)),
        PolicyMode::Single { id } => Err(HarnessError::Config(format!("policy.id: {id} out of range"))),
        _ => Err(HarnessError::Config(
            "policy.mode: train-student needs no_intervention or single; use run-experiment for curricula".into(),
        )),
    }
}

fn train_in<S: TeachingSetting>(setting: &S, config: &ExperimentConfig, seed: u64) -> Result<(TrainedStudent, curriculum_core::student::TrainingStats), HarnessError> {
    let env = env_for(setting, config)?;
    let steps = config.cisr.n_units * config.cisr.unit_steps;
    let (state, stats) = train_student(env, steps, &config.solver, None, seed).map_err(HarnessError::runtime)?;
    let policy = state.policy();
    let summary = run_policy(setting.deployment_env(), &policy, Budget::Steps(config.cisr.deploy_steps), derive_labeled(seed, "deploy", 0));
    let trained = TrainedStudent { policy, training_failures: stats.training_failures, deployment: Deployment::from(&summary) };
    Ok((trained, stats))
}

fn lander_episodes(dir: &Path, env: &LanderEnv, policy: &TabularPolicy, n: usize, seed: u64) -> Result<(), HarnessError> {
    let rows = log_episodes(env, policy, n, derive_labeled(seed, "episodes", 0));
    write_episode_csv(create(dir, "episodes.csv")?, &rows)?;
    Ok(())
}

/// Trains one student in a single environment for `n_units * unit_steps`
/// steps; writes `training.csv`, `policy.csv` and `deployment.csv`.
pub fn train_one(config: &ExperimentConfig, out: Option<&Path>) -> Result<TrainedStudent, HarnessError> {
    let clock = RunClock::start("train-student");
    let setting = Setting::build(config)?;
    let seed = config.base_seed();
    let (trained, stats) = with_workers(config.workers, || with_setting!(&setting, s => train_in(s, config, seed)))??;
    if let Some(dir) = out {
        stats.write_csv(create(dir, "training.csv")?)?;
        output::write_policy_csv(create(dir, "policy.csv")?, &trained.policy)?;
        output::write_deployment_csv(create(dir, "deployment.csv")?, &trained.deployment)?;
        if let Setting::Lander(s) = &setting {
            lander_episodes(dir, s.deployment_env(), &trained.policy, config.solver.eval_rollouts, seed)?;
        }
        write_resolved_config(dir, config)?;
        clock.finish(dir)?;
    }
    Ok(trained)
}

fn check_policy_shape<E: StudentEnv>(env: &E, policy: &TabularPolicy) -> Result<(), HarnessError> {
    if policy.n_states() != env.n_obs() || policy.n_actions() != env.n_actions() {
        return Err(HarnessError::Config(format!(
            "policy is {}x{}, environment has {} observations and {} actions",
            policy.n_states(),
            policy.n_actions(),
            env.n_obs(),
            env.n_actions()
        )));
    }
    Ok(())
}

/// Deploys a saved policy in the original problem for `deploy_steps` steps.
pub fn eval_policy(config: &ExperimentConfig, policy_path: &Path, out: Option<&Path>) -> Result<Deployment, HarnessError> {
    let clock = RunClock::start("eval");
    let setting = Setting::build(config)?;
    let policy = output::read_policy_csv(policy_path)?;
    let seed = derive_labeled(config.base_seed(), "eval", 0);
    let deployment = with_setting!(&setting, s => {
        check_policy_shape(s.deployment_env(), &policy)?;
        Deployment::from(&run_policy(s.deployment_env(), &policy, Budget::Steps(config.cisr.deploy_steps), seed))
    });
    if let Some(dir) = out {
        output::write_deployment_csv(create(dir, "deployment.csv")?, &deployment)?;
        if let Setting::Lander(s) = &setting {
            lander_episodes(dir, s.deployment_env(), &policy, config.solver.eval_rollouts, seed)?;
        }
        write_resolved_config(dir, config)?;
        clock.finish(dir)?;
    }
    Ok(deployment)
}

/// Reports of `verify-props`.
#[derive(Clone, Debug)]
pub struct Verification {
    pub reports: Vec<PropositionReport>,
    /// Reports of fixtures built to violate learning safety.
    pub broken: Vec<PropositionReport>,
}

impl Verification {
    /// No counterexample where the premise holds, and every broken fixture
    /// caught. A vacuous report (premise unmet) proves nothing but is not a
    /// failure.
    pub fn ok(&self) -> bool {
        self.reports.iter().all(|r| r.vacuous || r.counterexamples.is_empty())
            && self.broken.iter().all(|r| !r.counterexamples.is_empty())
    }
}

fn custom_fixtures(config: &ExperimentConfig) -> Result<Vec<PropFixture>, HarnessError> {
    let custom = config.custom.as_ref().expect("validated");
    let base = load_custom_cmdp(&custom.cmdp)?;
    custom
        .interventions
        .iter()
        .map(|iv| Ok(PropFixture { name: iv.name.clone(), base: base.clone(), intervention: custom_intervention(&base, iv)? }))
        .collect()
}

/// Checks both propositions on the shipped fixtures, or on the interventions
/// of a custom CMDP config, with `random_policies` sampled policies each.
pub fn verify_props(
    config: Option<&ExperimentConfig>,
    random_policies: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<Verification, HarnessError> {
    let clock = RunClock::start("verify-props");
    let (fixtures, broken) = match config {
        Some(c) if c.environment == Environment::CustomCmdp => (custom_fixtures(c)?, Vec::new()),
        _ => (prop_fixtures().map_err(HarnessError::runtime)?, vec![broken_fixture().map_err(HarnessError::runtime)?]),
    };
    let budget = EnumerationBudget::default();
    let run = || -> Result<Verification, HarnessError> {
        let mut reports = Vec::new();
        for (i, f) in fixtures.iter().enumerate() {
            let mut r1 = verify_prop1(&f.base, &f.intervention, budget, random_policies, derive_labeled(seed, "prop1", i as u64))
                .map_err(HarnessError::runtime)?;
            r1.fixture = f.name.clone();
            let mut r2 = verify_prop2(&f.base, &f.intervention, budget).map_err(HarnessError::runtime)?;
            r2.fixture = f.name.clone();
            reports.extend([r1, r2]);
        }
        let broken = broken
            .iter()
            .map(|f| {
                verify_prop2(&f.base, &f.intervention, budget).map(|mut r| {
                    r.fixture = f.name.clone();
                    r
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(HarnessError::runtime)?;
        Ok(Verification { reports, broken })
    };
    let v = with_workers(config.and_then(|c| c.workers), run)??;
    if let Some(dir) = out {
        let all: Vec<PropositionReport> = v.reports.iter().chain(&v.broken).cloned().collect();
        output::write_report_csv(create(dir, "report.csv")?, &all)?;
        write_counterexamples_csv(create(dir, "counterexamples.csv")?, &all)?;
        if let Some(c) = config {
            write_resolved_config(dir, c)?;
        }
        clock.finish(dir)?;
    }
    Ok(v)
}
