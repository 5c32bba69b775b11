//! Threshold-switching curriculum policies and the teacher's outer loop.
//!
//! A policy with `K` switches holds `K + 1` intervention ids and `K`
//! threshold pairs `(value, gap)`. After each interaction unit the teacher
//! advances to the next intervention when the student's estimated value is
//! at least the value threshold and its trigger-visit gap is at most the gap
//! threshold. Each round trains fresh students under one policy; a GP-UCB
//! loop over rounds searches for the best policy.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bayesopt::{map_fit, ucb_propose, BayesOptError, Dim, GPModel, HyperPriors, MapFitConfig, ParamSpace, UCBConfig};
use crate::cmdp::{PolicyStats, TabularCMDP, FEASIBILITY_TOL};
use crate::interventions::{induce, InducedCMDP, Intervention, InterventionError};
use crate::rng::{derive_labeled, rng_from_seed};
use crate::sim::{run_policy, Budget, EpisodeSummary, StudentEnv};
use crate::student::{train_student, SolverConfig, StudentError, StudentState, TeacherObservation};

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("stage {stage} is beyond the last stage {k}")]
    StageOutOfRange { stage: usize, k: usize },
    #[error("unknown intervention id {0}")]
    UnknownIntervention(usize),
    #[error("curriculum needs {expected} scalars, got {got}")]
    BadParamVector { expected: usize, got: usize },
    #[error("invalid curriculum: {0}")]
    InvalidParams(String),
    #[error("invalid teacher config: {0}")]
    Config(String),
    #[error(transparent)]
    Student(#[from] StudentError),
    #[error(transparent)]
    BayesOpt(#[from] BayesOptError),
    #[error(transparent)]
    Intervention(#[from] InterventionError),
}

/// `K + 1` intervention ids and `K` switch thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPolicyParams {
    pub intervention_sequence: Vec<usize>,
    /// `(value threshold, gap threshold)` guarding the switch out of each stage.
    pub switch_thresholds: Vec<[f64; 2]>,
}

impl CurriculumPolicyParams {
    pub fn new(intervention_sequence: Vec<usize>, switch_thresholds: Vec<[f64; 2]>) -> Result<Self, TeacherError> {
        if intervention_sequence.len() != switch_thresholds.len() + 1 {
            return Err(TeacherError::InvalidParams(format!(
                "{} interventions for {} thresholds",
                intervention_sequence.len(),
                switch_thresholds.len()
            )));
        }
        Ok(Self {
            intervention_sequence,
            switch_thresholds,
        })
    }

    /// Never switches.
    pub fn single(id: usize) -> Self {
        Self {
            intervention_sequence: vec![id],
            switch_thresholds: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.switch_thresholds.len()
    }

    pub fn n_scalars(&self) -> usize {
        3 * self.k() + 1
    }

    /// Flat layout: thresholds pair by pair, then one coordinate per id.
    pub fn to_vector(&self, n_interventions: usize) -> Vec<f64> {
        let mut v: Vec<f64> = self.switch_thresholds.iter().flat_map(|w| w.iter().copied()).collect();
        v.extend(self.intervention_sequence.iter().map(|&id| Dim::choice_coord(id, n_interventions)));
        v
    }

    pub fn from_vector(v: &[f64], k: usize, n_interventions: usize) -> Result<Self, TeacherError> {
        if v.len() != 3 * k + 1 {
            return Err(TeacherError::BadParamVector {
                expected: 3 * k + 1,
                got: v.len(),
            });
        }
        let switch_thresholds = (0..k).map(|i| [v[2 * i], v[2 * i + 1]]).collect();
        let intervention_sequence = v[2 * k..].iter().map(|&c| Dim::snap_choice(c, n_interventions)).collect();
        Ok(Self {
            intervention_sequence,
            switch_thresholds,
        })
    }

    fn check_ids(&self, n_interventions: usize) -> Result<(), TeacherError> {
        match self.intervention_sequence.iter().find(|&&id| id >= n_interventions) {
            Some(&id) => Err(TeacherError::UnknownIntervention(id)),
            None => Ok(()),
        }
    }
}

/// Applies the switching rule after a unit at `stage`; returns the
/// intervention for the next unit and the new stage. Comparisons are
/// inclusive and the last stage never advances.
pub fn decide_intervention(
    params: &CurriculumPolicyParams,
    stage: usize,
    obs: &TeacherObservation,
) -> Result<(usize, usize), TeacherError> {
    let k = params.k();
    if stage > k {
        return Err(TeacherError::StageOutOfRange { stage, k });
    }
    let mut next = stage;
    if stage < k {
        let [value_min, gap_max] = params.switch_thresholds[stage];
        if obs.value_estimate >= value_min && obs.violation_gap <= gap_max {
            next += 1;
        }
    }
    Ok((params.intervention_sequence[next], next))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CISRConfig {
    /// Interaction units per student.
    pub n_units: usize,
    pub unit_steps: usize,
    /// Maximum number of switches.
    pub k: usize,
    /// Deployment steps for the final evaluation in the original problem.
    pub deploy_steps: usize,
    /// Largest per-step reward magnitude.
    pub r_max: f64,
    /// Horizon used by the violation penalty.
    pub horizon_t: usize,
    /// Tolerance on deployment failures per episode.
    pub kappa: f64,
    /// Students trained per round; the teacher sees their mean reward.
    pub students_per_round: usize,
    /// Deploy after every unit as well (analysis only, unseen by the teacher).
    pub track_units: bool,
}

impl Default for CISRConfig {
    fn default() -> Self {
        Self::frozen_lake()
    }
}

impl CISRConfig {
    pub fn frozen_lake() -> Self {
        Self {
            n_units: 11,
            unit_steps: 10_000,
            k: 2,
            deploy_steps: 10_000,
            r_max: 6.0,
            horizon_t: 100,
            kappa: 0.1,
            students_per_round: 1,
            track_units: false,
        }
    }

    pub fn lander() -> Self {
        Self {
            n_units: 15,
            unit_steps: 100_000,
            k: 1,
            deploy_steps: 200_000,
            r_max: 100.0,
            horizon_t: 500,
            kappa: 0.1,
            students_per_round: 10,
            track_units: false,
        }
    }

    pub fn validate(&self) -> Result<(), TeacherError> {
        if self.n_units == 0 || self.unit_steps == 0 || self.deploy_steps == 0 || self.students_per_round == 0 {
            return Err(TeacherError::Config(
                "n_units, unit_steps, deploy_steps and students_per_round must be >= 1".into(),
            ));
        }
        if !(self.kappa >= 0.0 && self.r_max >= 0.0) {
            return Err(TeacherError::Config("kappa and r_max must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Deployment return, or `-2 * T * R_max` when unsafe visits exceed kappa.
pub fn teacher_reward(final_policy_eval: &PolicyStats, config: &CISRConfig) -> f64 {
    if final_policy_eval.expected_unsafe_visits > config.kappa + FEASIBILITY_TOL {
        // A zero horizon makes the penalty vanish; avoid returning -0.
        -2.0 * config.horizon_t as f64 * config.r_max + 0.0
    } else {
        final_policy_eval.expected_return
    }
}

/// Training environments indexed by intervention id, plus the original
/// problem for deployment.
pub trait TeachingSetting: Sync {
    type Env: StudentEnv;

    fn n_interventions(&self) -> usize;
    fn intervention_name(&self, id: usize) -> String;
    fn training_env(&self, id: usize) -> &Self::Env;
    /// The original problem without interventions.
    fn original_env(&self) -> &Self::Env;
    /// The original problem as used for deployment evaluation.
    fn deployment_env(&self) -> &Self::Env {
        self.original_env()
    }
}

/// Tabular setting: a base CMDP and its intervention library.
#[derive(Clone, Debug)]
pub struct TabularSetting {
    library: Vec<InducedCMDP>,
    original: InducedCMDP,
}

impl TabularSetting {
    pub fn new(base: TabularCMDP, interventions: Vec<Intervention>) -> Result<Self, TeacherError> {
        let base = Arc::new(base);
        let library = interventions
            .into_iter()
            .map(|iv| induce(base.clone(), Arc::new(iv)))
            .collect::<Result<Vec<_>, _>>()?;
        let identity = Intervention::identity(base.n_states(), base.kappa());
        let original = induce(base, Arc::new(identity))?;
        Ok(Self { library, original })
    }

    pub fn base(&self) -> &TabularCMDP {
        self.original.base()
    }

    pub fn library(&self) -> &[InducedCMDP] {
        &self.library
    }
}

impl TeachingSetting for TabularSetting {
    type Env = InducedCMDP;

    fn n_interventions(&self) -> usize {
        self.library.len()
    }

    fn intervention_name(&self, id: usize) -> String {
        self.library[id].intervention().name().to_string()
    }

    fn training_env(&self, id: usize) -> &InducedCMDP {
        &self.library[id]
    }

    fn original_env(&self) -> &InducedCMDP {
        &self.original
    }
}

/// Teacher observation from `n_rollouts` episodes in any environment whose
/// constraint 1 is the trigger set.
pub fn observe<E: StudentEnv>(env: &E, state: &StudentState, n_rollouts: usize, seed: u64) -> TeacherObservation {
    let summary = run_policy(env, &state.policy(), Budget::Episodes(n_rollouts.max(1)), seed);
    let tau = env.tolerances().get(1).copied().unwrap_or(0.0);
    TeacherObservation {
        value_estimate: summary.mean_return(),
        violation_gap: if summary.visits.len() > 1 { summary.mean_visits(1) - tau } else { -tau },
    }
}

/// Deployment outcome of a frozen policy in the original problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub episodes: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    pub failure_rate: f64,
}

impl From<&EpisodeSummary> for Deployment {
    fn from(s: &EpisodeSummary) -> Self {
        Self {
            episodes: s.episodes,
            mean_return: s.mean_return(),
            success_rate: s.success_rate(),
            failure_rate: s.failure_rate(),
        }
    }
}

impl Deployment {
    pub fn policy_stats(&self) -> PolicyStats {
        PolicyStats {
            expected_return: self.mean_return,
            expected_unsafe_visits: self.failure_rate,
            expected_trigger_visits: Vec::new(),
        }
    }
}

/// Per-unit record of one student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub unit: usize,
    pub intervention: usize,
    pub observation: TeacherObservation,
    pub training_failures: usize,
    pub training_episodes: usize,
    pub training_successes: usize,
    /// Present when units are tracked.
    pub deployment: Option<Deployment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentRun {
    pub seed: u64,
    pub units: Vec<UnitRecord>,
    /// `(unit, intervention)` for the first unit and every switch.
    pub switch_log: Vec<(usize, usize)>,
    pub training_failures: usize,
    pub deployment: Deployment,
    pub teacher_reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub params: CurriculumPolicyParams,
    pub students: Vec<StudentRun>,
    /// Mean deployment return over the round's students.
    pub final_value: f64,
    pub mean_success: f64,
    /// Mean teacher reward; the GP target.
    pub teacher_reward: f64,
    pub training_failures: usize,
}

impl RoundResult {
    /// Observations of the first student.
    pub fn observations(&self) -> Vec<TeacherObservation> {
        self.students[0].units.iter().map(|u| u.observation).collect()
    }
}

/// Where a student trains during a unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvChoice {
    Intervention(usize),
    Original,
}

/// Trains one fresh student, choosing its environment before every unit.
///
/// `schedule` receives the unit index and the observation from the previous
/// unit (none before the first one).
pub fn run_student<S: TeachingSetting>(
    setting: &S,
    schedule: &mut dyn FnMut(usize, Option<&TeacherObservation>) -> Result<EnvChoice, TeacherError>,
    config: &CISRConfig,
    solver: &SolverConfig,
    seed: u64,
) -> Result<StudentRun, TeacherError> {
    config.validate()?;
    let mut state: Option<StudentState> = None;
    let mut units = Vec::with_capacity(config.n_units);
    let mut switch_log = Vec::new();
    let mut last_obs: Option<TeacherObservation> = None;
    let mut last_choice = None;
    for n in 0..config.n_units {
        let choice = schedule(n, last_obs.as_ref())?;
        let env = match choice {
            EnvChoice::Intervention(id) if id < setting.n_interventions() => setting.training_env(id),
            EnvChoice::Intervention(id) => return Err(TeacherError::UnknownIntervention(id)),
            EnvChoice::Original => setting.original_env(),
        };
        let id = match choice {
            EnvChoice::Intervention(id) => id,
            EnvChoice::Original => usize::MAX,
        };
        if last_choice != Some(choice) {
            switch_log.push((n, id));
            last_choice = Some(choice);
        }
        let (next, stats) = train_student(
            env,
            config.unit_steps,
            solver,
            state.as_ref(),
            derive_labeled(seed, "train", n as u64),
        )?;
        let obs = observe(env, &next, solver.eval_rollouts, derive_labeled(seed, "observe", n as u64));
        let deployment = config.track_units.then(|| {
            let s = run_policy(
                setting.deployment_env(),
                &next.policy(),
                Budget::Steps(config.deploy_steps),
                derive_labeled(seed, "unit_deploy", n as u64),
            );
            Deployment::from(&s)
        });
        units.push(UnitRecord {
            unit: n,
            intervention: id,
            observation: obs,
            training_failures: stats.training_failures,
            training_episodes: stats.episodes,
            training_successes: stats.successes,
            deployment,
        });
        last_obs = Some(obs);
        state = Some(next);
    }
    let state = state.expect("at least one unit");
    let summary = run_policy(
        setting.deployment_env(),
        &state.policy(),
        Budget::Steps(config.deploy_steps),
        derive_labeled(seed, "deploy", 0),
    );
    let deployment = Deployment::from(&summary);
    let reward = teacher_reward(&deployment.policy_stats(), config);
    Ok(StudentRun {
        seed,
        training_failures: units.iter().map(|u| u.training_failures).sum(),
        units,
        switch_log,
        deployment,
        teacher_reward: reward,
    })
}

/// Trains one student under the curriculum policy `params`.
pub fn run_curriculum_student<S: TeachingSetting>(
    setting: &S,
    params: &CurriculumPolicyParams,
    config: &CISRConfig,
    solver: &SolverConfig,
    seed: u64,
) -> Result<StudentRun, TeacherError> {
    params.check_ids(setting.n_interventions())?;
    let mut stage = 0;
    let mut schedule = |_n: usize, obs: Option<&TeacherObservation>| -> Result<EnvChoice, TeacherError> {
        let id = match obs {
            None => params.intervention_sequence[0],
            Some(o) => {
                let (id, next) = decide_intervention(params, stage, o)?;
                stage = next;
                id
            }
        };
        Ok(EnvChoice::Intervention(id))
    };
    run_student(setting, &mut schedule, config, solver, seed)
}

/// One teacher round: `students_per_round` fresh students, trained in
/// parallel, each with a seed derived from `rng_seed`.
pub fn run_round<S: TeachingSetting>(
    params: &CurriculumPolicyParams,
    setting: &S,
    config: &CISRConfig,
    solver: &SolverConfig,
    rng_seed: u64,
) -> Result<RoundResult, TeacherError> {
    params.check_ids(setting.n_interventions())?;
    let students = (0..config.students_per_round)
        .into_par_iter()
        .map(|j| run_curriculum_student(setting, params, config, solver, derive_labeled(rng_seed, "student", j as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(aggregate(params.clone(), students))
}

pub fn aggregate(params: CurriculumPolicyParams, students: Vec<StudentRun>) -> RoundResult {
    let n = students.len().max(1) as f64;
    RoundResult {
        final_value: students.iter().map(|s| s.deployment.mean_return).sum::<f64>() / n,
        mean_success: students.iter().map(|s| s.deployment.success_rate).sum::<f64>() / n,
        teacher_reward: students.iter().map(|s| s.teacher_reward).sum::<f64>() / n,
        training_failures: students.iter().map(|s| s.training_failures).sum(),
        params,
        students,
    }
}

/// Search settings for the teacher's GP-UCB loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BayesOptConfig {
    /// Random curriculum policies evaluated before GP-UCB starts.
    pub n_init: usize,
    /// GP-UCB rounds.
    pub n_rounds: usize,
    pub value_threshold_range: [f64; 2],
    pub gap_threshold_range: [f64; 2],
    pub ucb: UCBConfig,
    pub map_fit: MapFitConfig,
    /// Defaults to the environment's table when absent.
    pub priors: Option<HyperPriors>,
}

impl Default for BayesOptConfig {
    fn default() -> Self {
        Self::frozen_lake()
    }
}

impl BayesOptConfig {
    pub fn frozen_lake() -> Self {
        Self {
            n_init: 10,
            n_rounds: 20,
            value_threshold_range: [-1.0, 6.0],
            gap_threshold_range: [-0.1, 1.0],
            ucb: UCBConfig::default(),
            map_fit: MapFitConfig::default(),
            priors: Some(HyperPriors::frozen_lake()),
        }
    }

    pub fn lander() -> Self {
        Self {
            n_init: 4,
            n_rounds: 10,
            value_threshold_range: [-200.0, 200.0],
            gap_threshold_range: [-0.1, 5.0],
            ucb: UCBConfig::default(),
            map_fit: MapFitConfig::default(),
            priors: Some(HyperPriors::lander()),
        }
    }

    /// Search space of a `k`-switch policy over `n_interventions` ids.
    pub fn space(&self, k: usize, n_interventions: usize) -> ParamSpace {
        let mut dims = Vec::with_capacity(3 * k + 1);
        for _ in 0..k {
            dims.push(Dim::Interval(self.value_threshold_range[0], self.value_threshold_range[1]));
            dims.push(Dim::Interval(self.gap_threshold_range[0], self.gap_threshold_range[1]));
        }
        dims.extend(std::iter::repeat_n(Dim::Choice(n_interventions), k + 1));
        ParamSpace { dims }
    }

    fn priors_for(&self, dim: usize) -> Result<HyperPriors, TeacherError> {
        let priors = self
            .priors
            .clone()
            .unwrap_or_else(|| HyperPriors::isotropic(dim, crate::bayesopt::GammaPrior { mean: 0.2, variance: 0.2 }));
        if priors.dim() != dim {
            return Err(TeacherError::Config(format!(
                "{} lengthscale priors for a {dim}-dimensional search space",
                priors.dim()
            )));
        }
        priors.validate()?;
        Ok(priors)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Ucb,
}

/// One evaluated point of a search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub phase: Phase,
    pub x: Vec<f64>,
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub trace: Vec<TraceRow>,
    /// Index into `trace` of the best target (first on ties).
    pub best: usize,
    pub model: GPModel,
}

/// Generic GP-UCB loop: `n_init` uniform draws then `n_rounds` proposals.
/// `evaluate` receives a snapped point and a round seed.
pub fn gp_ucb_search(
    space: &ParamSpace,
    config: &BayesOptConfig,
    seed: u64,
    evaluate: &mut dyn FnMut(usize, &[f64], u64) -> Result<f64, TeacherError>,
) -> Result<SearchOutcome, TeacherError> {
    space.validate()?;
    if config.n_init + config.n_rounds == 0 {
        return Err(TeacherError::Config("n_init + n_rounds must be >= 1".into()));
    }
    let mut model = GPModel::from_priors(config.priors_for(space.dims.len())?)?;
    let mut trace = Vec::new();
    let total = config.n_init + config.n_rounds;
    for round in 0..total {
        let phase = if round < config.n_init { Phase::Init } else { Phase::Ucb };
        let x = match phase {
            Phase::Init => space.sample(&mut rng_from_seed(derive_labeled(seed, "init", round as u64))),
            Phase::Ucb => {
                if model.len() >= 2 {
                    let fit_cfg = MapFitConfig {
                        seed: derive_labeled(seed, "map_fit", round as u64),
                        ..config.map_fit
                    };
                    model.hyper = map_fit(&model, &fit_cfg)?.hyper;
                }
                ucb_propose(&model, space, &config.ucb, derive_labeled(seed, "propose", round as u64))?
            }
        };
        let x = space.snap(&x);
        let target = evaluate(round, &x, derive_labeled(seed, "round", round as u64))?;
        model.add(x.clone(), target)?;
        trace.push(TraceRow { round, phase, x, target });
    }
    let best = (0..trace.len()).fold(0, |b, i| if trace[i].target > trace[b].target { i } else { b });
    Ok(SearchOutcome { trace, best, model })
}

/// Teacher optimization: the trace keeps every round's full result.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimization {
    pub best: CurriculumPolicyParams,
    pub best_round: usize,
    pub rounds: Vec<RoundResult>,
    pub search: SearchOutcome,
}

/// Runs the random initial design and GP-UCB rounds; returns the best
/// observed curriculum policy.
pub fn cisr_optimize<S: TeachingSetting>(
    setting: &S,
    config: &CISRConfig,
    solver: &SolverConfig,
    bayesopt: &BayesOptConfig,
    rng_seed: u64,
) -> Result<Optimization, TeacherError> {
    config.validate()?;
    let n_iv = setting.n_interventions();
    let space = bayesopt.space(config.k, n_iv);
    let mut rounds = Vec::new();
    let mut evaluate = |_round: usize, x: &[f64], seed: u64| -> Result<f64, TeacherError> {
        let params = CurriculumPolicyParams::from_vector(x, config.k, n_iv)?;
        let result = run_round(&params, setting, config, solver, seed)?;
        let target = result.teacher_reward;
        rounds.push(result);
        Ok(target)
    };
    let search = gp_ucb_search(&space, bayesopt, rng_seed, &mut evaluate)?;
    Ok(Optimization {
        best: rounds[search.best].params.clone(),
        best_round: search.best,
        rounds,
        search,
    })
}

/// Header of the optimization trace CSV for a `k`-switch policy.
pub fn trace_header(k: usize) -> Vec<String> {
    let mut h = vec!["round".to_string(), "phase".to_string()];
    for i in 0..k {
        h.push(format!("omega_{i}_value"));
        h.push(format!("omega_{i}_gap"));
    }
    for i in 0..=k {
        h.push(format!("intervention_{i}"));
    }
    h.extend(
        ["final_value", "success_rate", "teacher_reward", "training_failures"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

pub fn write_trace_csv<W: Write>(opt: &Optimization, k: usize, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trace_header(k))?;
    for (row, r) in opt.search.trace.iter().zip(&opt.rounds) {
        let mut rec = vec![
            row.round.to_string(),
            match row.phase {
                Phase::Init => "init".to_string(),
                Phase::Ucb => "ucb".to_string(),
            },
        ];
        for w in &r.params.switch_thresholds {
            rec.push(w[0].to_string());
            rec.push(w[1].to_string());
        }
        rec.extend(r.params.intervention_sequence.iter().map(|id| id.to_string()));
        rec.push(r.final_value.to_string());
        rec.push(r.mean_success.to_string());
        rec.push(r.teacher_reward.to_string());
        rec.push(r.training_failures.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(v: f64, g: f64) -> TeacherObservation {
        TeacherObservation {
            value_estimate: v,
            violation_gap: g,
        }
    }

    #[test]
    fn switch_fires_on_boundary() {
        let p = CurriculumPolicyParams::new(vec![0, 2], vec![[3.0, 0.05]]).unwrap();
        assert_eq!(decide_intervention(&p, 0, &obs(3.0, 0.05)).unwrap(), (2, 1));
        assert_eq!(decide_intervention(&p, 1, &obs(9.0, -1.0)).unwrap(), (2, 1));
        assert!(matches!(
            decide_intervention(&p, 2, &obs(0.0, 0.0)),
            Err(TeacherError::StageOutOfRange { stage: 2, k: 1 })
        ));
    }

    #[test]
    fn stays_below_value_threshold() {
        let p = CurriculumPolicyParams::new(vec![0, 1, 2], vec![[3.0, 0.5], [4.0, 0.5]]).unwrap();
        assert_eq!(decide_intervention(&p, 0, &obs(2.9, 0.0)).unwrap(), (0, 0));
        assert_eq!(decide_intervention(&p, 1, &obs(2.9, 0.0)).unwrap(), (1, 1));
    }

    #[test]
    fn vector_round_trip_has_3k_plus_1_scalars() {
        let p = CurriculumPolicyParams::new(vec![0, 2, 1], vec![[1.5, 0.2], [4.0, -0.05]]).unwrap();
        let v = p.to_vector(3);
        assert_eq!(v.len(), 7);
        assert_eq!(v, vec![1.5, 0.2, 4.0, -0.05, 0.0, 1.0, 0.5]);
        assert_eq!(CurriculumPolicyParams::from_vector(&v, 2, 3).unwrap(), p);
        assert!(CurriculumPolicyParams::from_vector(&v[..6], 2, 3).is_err());
    }

    #[test]
    fn teacher_reward_cases() {
        let cfg = CISRConfig::frozen_lake();
        let ok = PolicyStats {
            expected_return: 5.37,
            expected_unsafe_visits: 0.0,
            expected_trigger_visits: vec![],
        };
        assert_eq!(teacher_reward(&ok, &cfg), 5.37);
        let bad = PolicyStats {
            expected_unsafe_visits: 0.5,
            ..ok.clone()
        };
        assert_eq!(teacher_reward(&bad, &cfg), -1200.0);
        let zero = CISRConfig { horizon_t: 0, ..cfg };
        let r = teacher_reward(&bad, &zero);
        assert_eq!(r, 0.0);
        assert!(r.is_sign_positive());
    }
}
