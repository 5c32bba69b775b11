//! Primal-dual student.
//!
//! The primal step is tabular softmax actor-critic on the scalarized reward
//! `r - sum_c lambda_c * 1[s' in set_c]`. The dual step is exponentiated
//! gradient on a simplex scaled by `bound_b` that carries an explicit slack
//! coordinate, run once per epoch on the epoch's empirical visit gaps.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmdp::{TabularCMDP, TabularPolicy};
use crate::interventions::InducedCMDP;
use crate::rng::{rng_from_seed, Rng};
use crate::sim::{add_hits, run_policy, Budget, StudentEnv};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StudentError {
    #[error("lagrange multiplier {index} is {value}")]
    NegativeLambda { index: usize, value: f64 },
    #[error("all exponentiated-gradient weights vanished")]
    ZeroMassDegenerate,
    #[error("training budget must be at least one step")]
    BudgetZero,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid solver config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Exponentiated-gradient step size.
    pub eta: f64,
    /// Bound on the sum of the multipliers.
    pub bound_b: f64,
    pub primal_steps_per_epoch: usize,
    /// Actor step size.
    pub learning_rate: f64,
    pub critic_learning_rate: f64,
    /// Entropy bonus coefficient of the actor.
    pub exploration_temperature: f64,
    /// Critic discount.
    pub discount: f64,
    /// Rollouts behind each teacher observation.
    pub eval_rollouts: usize,
    /// Starting multipliers; `None` splits `bound_b` evenly with the slack.
    pub initial_lambda: Option<Vec<f64>>,
    /// Starting entry of every critic cell.
    pub initial_value: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::frozen_lake()
    }
}

impl SolverConfig {
    pub fn frozen_lake() -> Self {
        Self {
            eta: 1.0,
            bound_b: 0.5,
            primal_steps_per_epoch: 128,
            learning_rate: 0.1,
            critic_learning_rate: 0.2,
            exploration_temperature: 0.1,
            discount: 0.9,
            eval_rollouts: 100,
            initial_lambda: None,
            initial_value: 0.0,
        }
    }

    pub fn lander() -> Self {
        Self {
            eta: 1.0,
            bound_b: 120.0,
            primal_steps_per_epoch: 500,
            learning_rate: 0.5,
            critic_learning_rate: 0.2,
            exploration_temperature: 0.001,
            discount: 0.99,
            eval_rollouts: 20,
            initial_lambda: None,
            initial_value: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), StudentError> {
        let positive = [
            ("eta", self.eta),
            ("bound_b", self.bound_b),
            ("learning_rate", self.learning_rate),
            ("critic_learning_rate", self.critic_learning_rate),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(StudentError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.exploration_temperature >= 0.0) || !(0.0..=1.0).contains(&self.discount) {
            return Err(StudentError::Config("exploration_temperature >= 0 and discount in [0, 1]".into()));
        }
        if self.primal_steps_per_epoch == 0 || self.eval_rollouts == 0 {
            return Err(StudentError::Config("primal_steps_per_epoch and eval_rollouts must be >= 1".into()));
        }
        Ok(())
    }

    fn starting_lambda(&self, n_constraints: usize) -> Result<LagrangeState, StudentError> {
        match &self.initial_lambda {
            Some(l) if l.len() != n_constraints => Err(StudentError::DimensionMismatch(format!(
                "initial_lambda has {} entries for {n_constraints} constraints",
                l.len()
            ))),
            Some(l) => LagrangeState::new(l.clone(), self.bound_b),
            None => Ok(LagrangeState::uniform(n_constraints, self.bound_b)),
        }
    }
}

/// Multipliers on the `B`-scaled simplex; the slack is `B - sum(lambdas)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    lambdas: Vec<f64>,
}

impl LagrangeState {
    pub fn new(lambdas: Vec<f64>, bound_b: f64) -> Result<Self, StudentError> {
        for (index, &value) in lambdas.iter().enumerate() {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(StudentError::NegativeLambda { index, value });
            }
        }
        let sum: f64 = lambdas.iter().sum();
        if sum > bound_b + 1e-9 {
            return Err(StudentError::Config(format!("multipliers sum to {sum} > {bound_b}")));
        }
        Ok(Self { lambdas })
    }

    /// Each multiplier and the slack get `B / (m + 1)`.
    pub fn uniform(n_constraints: usize, bound_b: f64) -> Self {
        Self {
            lambdas: vec![bound_b / (n_constraints + 1) as f64; n_constraints],
        }
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }
}

/// One exponentiated-gradient step.
///
/// With slack weight `w0 = B - sum(lambda)` and `w_c = lambda_c * exp(eta * gap_c)`,
/// returns `lambda'_c = B * w_c / (w0 + sum_j w_j)`.
pub fn dual_update_eg(
    state: &LagrangeState,
    violation_gaps: &[f64],
    eta: f64,
    bound_b: f64,
) -> Result<LagrangeState, StudentError> {
    let lambdas = &state.lambdas;
    if lambdas.len() != violation_gaps.len() {
        return Err(StudentError::DimensionMismatch(format!(
            "{} multipliers, {} gaps",
            lambdas.len(),
            violation_gaps.len()
        )));
    }
    for (index, &value) in lambdas.iter().enumerate() {
        if !(value >= 0.0) {
            return Err(StudentError::NegativeLambda { index, value });
        }
    }
    let slack = (bound_b - lambdas.iter().sum::<f64>()).max(0.0);
    // Log-weights keep large gaps from overflowing.
    let logs: Vec<f64> = std::iter::once(slack.ln())
        .chain(lambdas.iter().zip(violation_gaps).map(|(l, g)| l.ln() + eta * g))
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(StudentError::ZeroMassDegenerate);
    }
    let weights: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = weights.iter().sum();
    let mut next: Vec<f64> = weights[1..].iter().map(|w| bound_b * w / z).collect();
    clamp_to_budget(&mut next, bound_b);
    Ok(LagrangeState { lambdas: next })
}

/// Removes floating-point excess so that the sum never exceeds `bound_b`.
fn clamp_to_budget(lambdas: &mut [f64], bound_b: f64) {
    while lambdas.iter().sum::<f64>() > bound_b {
        let (i, _) = lambdas
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let excess = lambdas.iter().sum::<f64>() - bound_b;
        lambdas[i] = (lambdas[i] - excess).max(0.0).next_down().max(0.0);
    }
}

/// Learner tables plus multipliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentState {
    n_obs: usize,
    n_actions: usize,
    logits: Vec<f64>,
    value_table: Vec<f64>,
    lagrange: LagrangeState,
}

impl StudentState {
    /// Uniform policy, zero values, starting multipliers from `config`.
    pub fn fresh(n_obs: usize, n_actions: usize, n_constraints: usize, config: &SolverConfig) -> Result<Self, StudentError> {
        Ok(Self {
            n_obs,
            n_actions,
            logits: vec![0.0; n_obs * n_actions],
            value_table: vec![config.initial_value; n_obs * n_actions],
            lagrange: config.starting_lambda(n_constraints)?,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn value_table(&self) -> &[f64] {
        &self.value_table
    }

    pub fn lagrange(&self) -> &LagrangeState {
        &self.lagrange
    }

    pub fn set_lagrange(&mut self, lagrange: LagrangeState) {
        self.lagrange = lagrange;
    }

    pub fn action_probs(&self, obs: usize, out: &mut [f64]) {
        softmax(&self.logits[obs * self.n_actions..(obs + 1) * self.n_actions], out);
    }

    pub fn policy(&self) -> TabularPolicy {
        let mut probs = vec![0.0; self.logits.len()];
        for s in 0..self.n_obs {
            let m = self.n_actions;
            softmax(&self.logits[s * m..(s + 1) * m], &mut probs[s * m..(s + 1) * m]);
        }
        TabularPolicy::new(self.n_obs, self.n_actions, probs).expect("softmax rows are stochastic")
    }

    /// Policy that puts all mass on the highest logit (lowest index on ties).
    pub fn greedy_policy(&self) -> TabularPolicy {
        let m = self.n_actions;
        let actions: Vec<usize> = (0..self.n_obs)
            .map(|s| argmax(&self.logits[s * m..(s + 1) * m]))
            .collect();
        TabularPolicy::deterministic(m, &actions).expect("valid actions")
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn softmax(logits: &[f64], out: &mut [f64]) {
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - top).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Per-epoch record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub return_estimate: f64,
    pub violation_gaps: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub training_failures_cumulative: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainingStats {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    pub episodes: usize,
    pub successes: usize,
    pub training_failures: usize,
}

impl TrainingStats {
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let n_c = self.epochs.first().map_or(0, |e| e.lambdas.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["epoch".to_string(), "return_estimate".to_string()];
        header.extend((0..n_c).map(|c| format!("violation_gap_{c}")));
        header.extend((0..n_c).map(|c| format!("lambda_{c}")));
        header.push("training_failures_cumulative".into());
        w.write_record(&header)?;
        for e in &self.epochs {
            let mut row = vec![e.epoch.to_string(), e.return_estimate.to_string()];
            row.extend(e.violation_gaps.iter().map(f64::to_string));
            row.extend(e.lambdas.iter().map(f64::to_string));
            row.push(e.training_failures_cumulative.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mutable training-loop bookkeeping; rebuilt on every training call.
struct Scratch<Ep> {
    rng: Rng,
    episode: Ep,
    obs: usize,
    ep_return: f64,
    ep_visits: Vec<f64>,
    probs: Vec<f64>,
    next_probs: Vec<f64>,
    // Per-epoch accumulators.
    done_returns: f64,
    done_visits: Vec<f64>,
    done_episodes: usize,
}

impl<Ep> Scratch<Ep> {
    fn start<E: StudentEnv<Episode = Ep>>(env: &E, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let n_c = env.tolerances().len();
        let (episode, obs, hits) = env.reset(&mut rng);
        let mut ep_visits = vec![0.0; n_c];
        add_hits(&mut ep_visits, hits);
        Self {
            rng,
            episode,
            obs,
            ep_return: 0.0,
            ep_visits,
            probs: vec![0.0; env.n_actions()],
            next_probs: vec![0.0; env.n_actions()],
            done_returns: 0.0,
            done_visits: vec![0.0; n_c],
            done_episodes: 0,
        }
    }
}

fn check_dims<E: StudentEnv>(env: &E, state: &StudentState) -> Result<(), StudentError> {
    if env.n_obs() != state.n_obs
        || env.n_actions() != state.n_actions
        || env.tolerances().len() != state.lagrange.lambdas.len()
    {
        return Err(StudentError::DimensionMismatch(format!(
            "environment {}x{} with {} constraints, student {}x{} with {}",
            env.n_obs(),
            env.n_actions(),
            env.tolerances().len(),
            state.n_obs,
            state.n_actions,
            state.lagrange.lambdas.len()
        )));
    }
    Ok(())
}

/// Counters returned by a run of primal steps.
#[derive(Clone, Copy, Debug, Default)]
struct PrimalCounts {
    failures: usize,
    episodes: usize,
    successes: usize,
}

fn primal_steps<E: StudentEnv>(
    env: &E,
    state: &mut StudentState,
    config: &SolverConfig,
    scratch: &mut Scratch<E::Episode>,
    steps: usize,
) -> PrimalCounts {
    let m = state.n_actions;
    let lambdas = state.lagrange.lambdas.clone();
    let mut counts = PrimalCounts::default();
    for _ in 0..steps {
        let s = scratch.obs;
        let overridden = env.overrides_action(&scratch.episode);
        state.action_probs(s, &mut scratch.probs);
        let action = if overridden {
            0
        } else {
            crate::cmdp::sample_index(&scratch.probs, &mut scratch.rng)
        };
        let o = env.step(&mut scratch.episode, action, &mut scratch.rng);
        let mut penalty = 0.0;
        for (c, l) in lambdas.iter().enumerate() {
            if o.hits & (1 << c) != 0 {
                penalty += l;
            }
        }
        let shaped = o.reward - penalty;
        // Truncated episodes bootstrap; absorbing ones do not.
        let absorbing = o.done && (o.success || o.failure);
        let next_value = if absorbing {
            0.0
        } else {
            state.action_probs(o.obs, &mut scratch.next_probs);
            let q = &state.value_table[o.obs * m..(o.obs + 1) * m];
            scratch.next_probs.iter().zip(q).map(|(p, q)| p * q).sum()
        };
        let target = shaped + config.discount * next_value;
        let row = s * m..(s + 1) * m;
        if overridden {
            // The action played no role: every entry gets the same target.
            for q in &mut state.value_table[row] {
                *q += config.critic_learning_rate * (target - *q);
            }
        } else {
            let q = &mut state.value_table[s * m + action];
            *q += config.critic_learning_rate * (target - *q);
            actor_update(state, s, &scratch.probs, config);
        }

        scratch.ep_return += o.reward;
        add_hits(&mut scratch.ep_visits, o.hits);
        counts.failures += usize::from(o.failure);
        if o.done {
            counts.episodes += 1;
            counts.successes += usize::from(o.success);
            scratch.done_episodes += 1;
            scratch.done_returns += scratch.ep_return;
            for (acc, v) in scratch.done_visits.iter_mut().zip(&scratch.ep_visits) {
                *acc += v;
            }
            let (episode, obs, hits) = env.reset(&mut scratch.rng);
            scratch.episode = episode;
            scratch.obs = obs;
            scratch.ep_return = 0.0;
            scratch.ep_visits.iter_mut().for_each(|v| *v = 0.0);
            add_hits(&mut scratch.ep_visits, hits);
        } else {
            scratch.obs = o.obs;
        }
    }
    counts
}

/// Softmax policy-gradient step at `s` using every action's critic value,
/// plus the entropy gradient.
fn actor_update(state: &mut StudentState, s: usize, probs: &[f64], config: &SolverConfig) {
    let m = state.n_actions;
    let q = &state.value_table[s * m..(s + 1) * m];
    let logits = &mut state.logits[s * m..(s + 1) * m];
    let v: f64 = probs.iter().zip(q).map(|(p, q)| p * q).sum();
    let entropy: f64 = -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    for ((l, &p), &qb) in logits.iter_mut().zip(probs).zip(q) {
        let log_p = if p > 0.0 { p.ln() } else { 0.0 };
        let grad = p * (qb - v) - config.exploration_temperature * p * (log_p + entropy);
        *l += config.learning_rate * grad;
    }
}

/// Runs one epoch of primal steps with the multipliers held fixed.
pub fn primal_epoch<E: StudentEnv>(
    env: &E,
    state: &mut StudentState,
    config: &SolverConfig,
    rng_seed: u64,
) -> Result<(), StudentError> {
    check_dims(env, state)?;
    let mut scratch = Scratch::start(env, rng_seed);
    primal_steps(env, state, config, &mut scratch, config.primal_steps_per_epoch);
    Ok(())
}

fn epoch_gaps<Ep>(scratch: &Scratch<Ep>, tolerances: &[f64]) -> (f64, Vec<f64>) {
    let (ret, visits, n) = if scratch.done_episodes > 0 {
        (scratch.done_returns, &scratch.done_visits, scratch.done_episodes as f64)
    } else {
        (scratch.ep_return, &scratch.ep_visits, 1.0)
    };
    let gaps = visits.iter().zip(tolerances).map(|(v, t)| v / n - t).collect();
    (ret / n, gaps)
}

/// Alternates primal epochs and dual updates for `budget_steps` steps.
///
/// A warm start copies the tables and multipliers of a previous student; the
/// episode and epoch bookkeeping always start fresh.
pub fn train_student<E: StudentEnv>(
    env: &E,
    budget_steps: usize,
    config: &SolverConfig,
    warm_start: Option<&StudentState>,
    rng_seed: u64,
) -> Result<(StudentState, TrainingStats), StudentError> {
    if budget_steps == 0 {
        return Err(StudentError::BudgetZero);
    }
    config.validate()?;
    let tolerances = env.tolerances();
    let mut state = match warm_start {
        Some(prev) => prev.clone(),
        None => StudentState::fresh(env.n_obs(), env.n_actions(), tolerances.len(), config)?,
    };
    check_dims(env, &state)?;
    let mut scratch = Scratch::start(env, rng_seed);
    let mut stats = TrainingStats::default();
    let mut epoch = 0;
    while stats.steps < budget_steps {
        let steps = config.primal_steps_per_epoch.min(budget_steps - stats.steps);
        let counts = primal_steps(env, &mut state, config, &mut scratch, steps);
        stats.steps += steps;
        stats.training_failures += counts.failures;
        stats.episodes += counts.episodes;
        stats.successes += counts.successes;
        let (return_estimate, gaps) = epoch_gaps(&scratch, &tolerances);
        state.lagrange = dual_update_eg(&state.lagrange, &gaps, config.eta, config.bound_b)?;
        stats.epochs.push(EpochRecord {
            epoch,
            return_estimate,
            violation_gaps: gaps,
            lambdas: state.lagrange.lambdas.clone(),
            training_failures_cumulative: stats.training_failures,
        });
        scratch.done_episodes = 0;
        scratch.done_returns = 0.0;
        scratch.done_visits.iter_mut().for_each(|v| *v = 0.0);
        epoch += 1;
    }
    Ok((state, stats))
}

/// What the teacher sees of a student: estimated value in the current
/// intervention CMDP and trigger-visit gap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherObservation {
    pub value_estimate: f64,
    pub violation_gap: f64,
}

/// Estimates the teacher observation from `n_rollouts` episodes of `policy`
/// under the intervention.
pub fn evaluate_features(policy: &TabularPolicy, induced: &InducedCMDP, n_rollouts: usize, rng_seed: u64) -> TeacherObservation {
    let summary = run_policy(induced, policy, Budget::Episodes(n_rollouts.max(1)), rng_seed);
    TeacherObservation {
        value_estimate: summary.mean_return(),
        violation_gap: summary.mean_visits(1) - induced.intervention().tau(),
    }
}

/// Exact counterpart of [`evaluate_features`] for Markov interventions.
pub fn exact_features(policy: &TabularPolicy, induced: &InducedCMDP) -> TeacherObservation {
    let cmdp: &TabularCMDP = induced.cmdp();
    let value = crate::cmdp::exact_expected_return(cmdp, policy).expect("dimensions checked by caller");
    let visits = crate::cmdp::exact_expected_visits(cmdp, policy, induced.trigger_set()).expect("dimensions checked");
    TeacherObservation {
        value_estimate: value,
        violation_gap: visits - induced.intervention().tau(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gaps_are_a_fixed_point() {
        let s = LagrangeState::new(vec![0.1, 0.2], 0.5).unwrap();
        let next = dual_update_eg(&s, &[0.0, 0.0], 1.0, 0.5).unwrap();
        for (a, b) in next.lambdas().iter().zip(s.lambdas()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_step_closed_form() {
        let s = LagrangeState::new(vec![0.25], 0.5).unwrap();
        let next = dual_update_eg(&s, &[1.0], 1.0, 0.5).unwrap();
        let e = std::f64::consts::E;
        assert!((next.lambdas()[0] - 0.5 * e / (1.0 + e)).abs() < 1e-12);
    }

    #[test]
    fn positive_gap_drives_lambda_up() {
        let mut s = LagrangeState::uniform(1, 0.5);
        let mut prev = s.lambdas()[0];
        for _ in 0..50 {
            s = dual_update_eg(&s, &[0.3], 1.0, 0.5).unwrap();
            assert!(s.lambdas()[0] > prev || s.lambdas()[0] == 0.5);
            assert!(s.lambdas()[0] <= 0.5);
            prev = s.lambdas()[0];
        }
        assert!(prev > 0.49);
    }

    #[test]
    fn corrupt_lambda_rejected() {
        let s = LagrangeState { lambdas: vec![-0.1] };
        assert!(matches!(
            dual_update_eg(&s, &[0.0], 1.0, 0.5),
            Err(StudentError::NegativeLambda { index: 0, .. })
        ));
        let zero = LagrangeState { lambdas: vec![0.0] };
        assert_eq!(dual_update_eg(&zero, &[1.0], 1.0, 0.0), Err(StudentError::ZeroMassDegenerate));
    }

    #[test]
    fn huge_gaps_stay_finite() {
        let s = LagrangeState::uniform(2, 120.0);
        let next = dual_update_eg(&s, &[1e6, -1e6], 1.0, 120.0).unwrap();
        assert!(next.lambdas().iter().all(|l| l.is_finite()));
        assert!(next.lambdas().iter().sum::<f64>() <= 120.0);
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut st = StudentState::fresh(3, 4, 2, &SolverConfig::default()).unwrap();
        st.logits = vec![1000.0, -1000.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0, -5.0, 2.0, 7.0, 1.0];
        let p = st.policy();
        for s in 0..3 {
            assert!((p.row(s).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
