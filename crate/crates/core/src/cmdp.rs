//! Finite-horizon, undiscounted constrained MDPs over finite state and action
//! sets, with seeded simulation and exact evaluation by dynamic programming.
//!
//! Terminal states end an episode on entry. Their transition rows are stored
//! as zero-reward self-loops so that the tensors stay uniform, but neither the
//! simulator nor the evaluators ever step out of a terminal state.

use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{rng_from_seed, Rng};

/// Tolerance on row sums of stochastic vectors.
pub const STOCHASTIC_TOL: f64 = 1e-9;
/// Slack granted to `expected visits <= kappa` comparisons.
pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CmdpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("row ({state}, {action}) sums to {sum}, expected 1")]
    NonStochasticRow { state: usize, action: usize, sum: f64 },
    #[error("initial distribution sums to {0}, expected 1")]
    NonStochasticInitial(f64),
    #[error("unsafe state {0} is not terminal")]
    UnsafeNotTerminal(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("cannot parse CMDP text: {0}")]
    Parse(String),
}

/// A subset of the state space stored as a membership mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StateSet {
    mask: Vec<bool>,
}

impl StateSet {
    pub fn empty(n_states: usize) -> Self {
        Self { mask: vec![false; n_states] }
    }

    pub fn from_ids(n_states: usize, ids: impl IntoIterator<Item = usize>) -> Result<Self, CmdpError> {
        let mut set = Self::empty(n_states);
        for id in ids {
            if id >= n_states {
                return Err(CmdpError::DimensionMismatch(format!(
                    "state {id} out of range for {n_states} states"
                )));
            }
            set.mask[id] = true;
        }
        Ok(set)
    }

    pub fn from_mask(mask: Vec<bool>) -> Self {
        Self { mask }
    }

    pub fn n_states(&self) -> usize {
        self.mask.len()
    }

    #[inline]
    pub fn contains(&self, s: usize) -> bool {
        self.mask.get(s).copied().unwrap_or(false)
    }

    pub fn insert(&mut self, s: usize) {
        self.mask[s] = true;
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i)
    }

    pub fn len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|m| *m)
    }

    pub fn is_subset(&self, other: &StateSet) -> bool {
        self.ids().all(|s| other.contains(s))
    }

    pub fn union(&self, other: &StateSet) -> StateSet {
        StateSet {
            mask: self.mask.iter().zip(&other.mask).map(|(a, b)| *a || *b).collect(),
        }
    }

    pub fn difference(&self, other: &StateSet) -> StateSet {
        StateSet {
            mask: self.mask.iter().zip(&other.mask).map(|(a, b)| *a && !*b).collect(),
        }
    }
}

/// Sparse, human-editable description of a CMDP; the input of [`build_cmdp`]
/// and the schema of the CMDP text format.
///
/// The text format is TOML:
///
/// ```toml
/// states = 2
/// actions = 1
/// horizon = 5
/// kappa = 0.0
/// initial = [[0, 1.0]]          # [state, probability]
/// unsafe = []
/// terminal = [1]
/// transitions = [
///   [0, 0, 1, 1.0, 6.0],        # [state, action, next_state, probability, reward]
/// ]
/// ```
///
/// Probabilities and rewards must be written as floats. Rows of terminal
/// states may be omitted; they become zero-reward self-loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmdpSpec {
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub kappa: f64,
    pub initial: Vec<(usize, f64)>,
    #[serde(rename = "unsafe")]
    pub unsafe_states: Vec<usize>,
    pub terminal: Vec<usize>,
    pub transitions: Vec<(usize, usize, usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularCMDP {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    unsafe_set: StateSet,
    initial_dist: Vec<f64>,
    horizon: usize,
    kappa: f64,
    terminal_set: StateSet,
}

/// Dense parts of a CMDP, validated by [`TabularCMDP::from_parts`].
#[derive(Clone, Debug)]
pub struct CmdpParts {
    pub n_states: usize,
    pub n_actions: usize,
    /// Indexed `(s * n_actions + a) * n_states + s'`.
    pub transition: Vec<f64>,
    /// Same layout as `transition`.
    pub reward: Vec<f64>,
    pub unsafe_set: StateSet,
    pub initial_dist: Vec<f64>,
    pub horizon: usize,
    pub kappa: f64,
    pub terminal_set: StateSet,
}

/// Builds and validates a CMDP from its sparse description.
///
/// Rows are checked, never renormalized.
pub fn build_cmdp(spec: &CmdpSpec) -> Result<TabularCMDP, CmdpError> {
    let (n, m) = (spec.states, spec.actions);
    if n == 0 || m == 0 {
        return Err(CmdpError::DimensionMismatch("need at least one state and one action".into()));
    }
    let terminal_set = StateSet::from_ids(n, spec.terminal.iter().copied())?;
    let unsafe_set = StateSet::from_ids(n, spec.unsafe_states.iter().copied())?;
    let mut transition = vec![0.0; n * m * n];
    let mut reward = vec![0.0; n * m * n];
    let mut given = vec![false; n * m];
    for &(s, a, next, p, r) in &spec.transitions {
        if s >= n || a >= m || next >= n {
            return Err(CmdpError::DimensionMismatch(format!(
                "transition ({s}, {a}, {next}) outside {n} states x {m} actions"
            )));
        }
        if !(p.is_finite() && p >= 0.0) || !r.is_finite() {
            return Err(CmdpError::InvalidParameter(format!(
                "transition ({s}, {a}, {next}) has probability {p} and reward {r}"
            )));
        }
        let idx = (s * m + a) * n + next;
        transition[idx] += p;
        reward[idx] = r;
        given[s * m + a] = true;
    }
    for s in terminal_set.ids() {
        for a in 0..m {
            if !given[s * m + a] {
                transition[(s * m + a) * n + s] = 1.0;
            }
        }
    }
    let mut initial_dist = vec![0.0; n];
    for &(s, p) in &spec.initial {
        if s >= n {
            return Err(CmdpError::DimensionMismatch(format!("initial state {s} out of range")));
        }
        initial_dist[s] += p;
    }
    TabularCMDP::from_parts(CmdpParts {
        n_states: n,
        n_actions: m,
        transition,
        reward,
        unsafe_set,
        initial_dist,
        horizon: spec.horizon,
        kappa: spec.kappa,
        terminal_set,
    })
}

impl TabularCMDP {
    /// Validates dense parts, including `unsafe ⊆ terminal`.
    pub fn from_parts(parts: CmdpParts) -> Result<Self, CmdpError> {
        let cmdp = Self::from_parts_relaxed(parts)?;
        if let Some(s) = cmdp.unsafe_set.ids().find(|&s| !cmdp.terminal_set.contains(s)) {
            return Err(CmdpError::UnsafeNotTerminal(s));
        }
        Ok(cmdp)
    }

    /// Same checks as [`TabularCMDP::from_parts`] except `unsafe ⊆ terminal`.
    ///
    /// Intervention-induced CMDPs replace the rows of trigger states with a
    /// reset kernel, so unsafe states inside a trigger set stop being terminal.
    pub(crate) fn from_parts_relaxed(parts: CmdpParts) -> Result<Self, CmdpError> {
        let CmdpParts { n_states: n, n_actions: m, .. } = parts;
        if n == 0 || m == 0 {
            return Err(CmdpError::DimensionMismatch("need at least one state and one action".into()));
        }
        if parts.transition.len() != n * m * n || parts.reward.len() != n * m * n {
            return Err(CmdpError::DimensionMismatch(format!(
                "tensors must have {} entries",
                n * m * n
            )));
        }
        if parts.initial_dist.len() != n
            || parts.unsafe_set.n_states() != n
            || parts.terminal_set.n_states() != n
        {
            return Err(CmdpError::DimensionMismatch("state vectors must match n_states".into()));
        }
        if parts.horizon == 0 {
            return Err(CmdpError::InvalidParameter("horizon must be at least 1".into()));
        }
        if !(parts.kappa.is_finite() && parts.kappa >= 0.0) {
            return Err(CmdpError::InvalidParameter(format!("kappa = {}", parts.kappa)));
        }
        for s in 0..n {
            for a in 0..m {
                let row = &parts.transition[(s * m + a) * n..(s * m + a + 1) * n];
                if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                    return Err(CmdpError::InvalidParameter(format!("row ({s}, {a}) has a bad entry")));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(CmdpError::NonStochasticRow { state: s, action: a, sum });
                }
            }
        }
        if parts.initial_dist.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(CmdpError::InvalidParameter("initial distribution has a bad entry".into()));
        }
        let init_sum: f64 = parts.initial_dist.iter().sum();
        if (init_sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(CmdpError::NonStochasticInitial(init_sum));
        }
        Ok(Self {
            n_states: n,
            n_actions: m,
            transition: parts.transition,
            reward: parts.reward,
            unsafe_set: parts.unsafe_set,
            initial_dist: parts.initial_dist,
            horizon: parts.horizon,
            kappa: parts.kappa,
            terminal_set: parts.terminal_set,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn unsafe_set(&self) -> &StateSet {
        &self.unsafe_set
    }

    pub fn terminal_set(&self) -> &StateSet {
        &self.terminal_set
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    #[inline]
    fn row_start(&self, s: usize, a: usize) -> usize {
        (s * self.n_actions + a) * self.n_states
    }

    /// `P(· | s, a)`.
    #[inline]
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let i = self.row_start(s, a);
        &self.transition[i..i + self.n_states]
    }

    /// `r(s, a, ·)`.
    #[inline]
    pub fn reward_row(&self, s: usize, a: usize) -> &[f64] {
        let i = self.row_start(s, a);
        &self.reward[i..i + self.n_states]
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[self.row_start(s, a) + next]
    }

    pub fn reward(&self, s: usize, a: usize, next: usize) -> f64 {
        self.reward[self.row_start(s, a) + next]
    }

    /// Returns a copy with another horizon.
    pub fn with_horizon(&self, horizon: usize) -> Result<Self, CmdpError> {
        if horizon == 0 {
            return Err(CmdpError::InvalidParameter("horizon must be at least 1".into()));
        }
        Ok(Self { horizon, ..self.clone() })
    }

    /// Returns a copy with another tolerance.
    pub fn with_kappa(&self, kappa: f64) -> Result<Self, CmdpError> {
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(CmdpError::InvalidParameter(format!("kappa = {kappa}")));
        }
        Ok(Self { kappa, ..self.clone() })
    }

    pub(crate) fn into_parts(self) -> CmdpParts {
        CmdpParts {
            n_states: self.n_states,
            n_actions: self.n_actions,
            transition: self.transition,
            reward: self.reward,
            unsafe_set: self.unsafe_set,
            initial_dist: self.initial_dist,
            horizon: self.horizon,
            kappa: self.kappa,
            terminal_set: self.terminal_set,
        }
    }

    /// Sparse description; omits zero-probability entries and the implicit
    /// self-loops of terminal states.
    pub fn to_spec(&self) -> CmdpSpec {
        let mut transitions = Vec::new();
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.transition_row(s, a);
                let implicit = self.terminal_set.contains(s)
                    && row[s] == 1.0
                    && self.reward(s, a, s) == 0.0;
                if implicit {
                    continue;
                }
                for (next, &p) in row.iter().enumerate() {
                    if p > 0.0 {
                        transitions.push((s, a, next, p, self.reward(s, a, next)));
                    }
                }
            }
        }
        CmdpSpec {
            states: self.n_states,
            actions: self.n_actions,
            horizon: self.horizon,
            kappa: self.kappa,
            initial: self
                .initial_dist
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(s, p)| (s, *p))
                .collect(),
            unsafe_states: self.unsafe_set.ids().collect(),
            terminal: self.terminal_set.ids().collect(),
            transitions,
        }
    }

    pub fn to_text(&self) -> String {
        toml::to_string(&self.to_spec()).expect("CMDP spec is always representable as TOML")
    }

    pub fn from_text(text: &str) -> Result<Self, CmdpError> {
        let spec: CmdpSpec = toml::from_str(text).map_err(|e| CmdpError::Parse(e.to_string()))?;
        build_cmdp(&spec)
    }

    fn check_policy(&self, policy: &TabularPolicy) -> Result<(), CmdpError> {
        if policy.n_states() != self.n_states || policy.n_actions() != self.n_actions {
            return Err(CmdpError::DimensionMismatch(format!(
                "policy is {}x{}, CMDP is {}x{}",
                policy.n_states(),
                policy.n_actions(),
                self.n_states,
                self.n_actions
            )));
        }
        Ok(())
    }
}

/// A Markov policy: one action distribution per state.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self, CmdpError> {
        if probs.len() != n_states * n_actions || n_actions == 0 {
            return Err(CmdpError::DimensionMismatch(format!(
                "expected {} action probabilities",
                n_states * n_actions
            )));
        }
        for s in 0..n_states {
            let row = &probs[s * n_actions..(s + 1) * n_actions];
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(CmdpError::InvalidParameter(format!("policy row {s} has a bad entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(CmdpError::NonStochasticRow { state: s, action: 0, sum });
            }
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self, CmdpError> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(CmdpError::DimensionMismatch(format!("action {a} at state {s}")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(Self { n_states: actions.len(), n_actions, probs })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn sample(&self, s: usize, rng: &mut Rng) -> usize {
        sample_index(self.row(s), rng)
    }
}

/// Draws an index from a probability vector.
#[inline]
pub fn sample_index(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Goal,
    Unsafe,
    Timeout,
    Horizon,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Termination::Goal => "goal",
            Termination::Unsafe => "unsafe",
            Termination::Timeout => "timeout",
            Termination::Horizon => "horizon",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
    pub reward: f64,
    pub intervention_triggered: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub terminated_by: Termination,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Exact or estimated statistics of a policy in a CMDP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyStats {
    pub expected_return: f64,
    pub expected_unsafe_visits: f64,
    pub expected_trigger_visits: Vec<f64>,
}

/// Samples one episode.
pub fn rollout(cmdp: &TabularCMDP, policy: &TabularPolicy, rng_seed: u64) -> Result<Trajectory, CmdpError> {
    cmdp.check_policy(policy)?;
    let mut rng = rng_from_seed(rng_seed);
    Ok(rollout_with(cmdp, policy, &mut rng))
}

pub(crate) fn rollout_with(cmdp: &TabularCMDP, policy: &TabularPolicy, rng: &mut Rng) -> Trajectory {
    let mut s = sample_index(&cmdp.initial_dist, rng);
    let mut steps = Vec::new();
    let classify = |s: usize| {
        if cmdp.unsafe_set.contains(s) {
            Termination::Unsafe
        } else {
            Termination::Goal
        }
    };
    if cmdp.terminal_set.contains(s) {
        return Trajectory { steps, terminated_by: classify(s) };
    }
    for _ in 0..cmdp.horizon {
        let a = policy.sample(s, rng);
        let next = sample_index(cmdp.transition_row(s, a), rng);
        steps.push(Step {
            state: s,
            action: a,
            next_state: next,
            reward: cmdp.reward(s, a, next),
            intervention_triggered: false,
        });
        s = next;
        if cmdp.terminal_set.contains(s) {
            return Trajectory { steps, terminated_by: classify(s) };
        }
    }
    Trajectory { steps, terminated_by: Termination::Horizon }
}

/// Expected undiscounted return over the horizon, by backward induction.
pub fn exact_expected_return(cmdp: &TabularCMDP, policy: &TabularPolicy) -> Result<f64, CmdpError> {
    cmdp.check_policy(policy)?;
    let (n, m) = (cmdp.n_states, cmdp.n_actions);
    // value[s]: expected reward-to-go with `k` steps left, for a live state s.
    let mut value = vec![0.0; n];
    let mut next_value = vec![0.0; n];
    for _ in 0..cmdp.horizon {
        for s in 0..n {
            if cmdp.terminal_set.contains(s) {
                next_value[s] = 0.0;
                continue;
            }
            let mut v = 0.0;
            for a in 0..m {
                let pa = policy.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                let p_row = cmdp.transition_row(s, a);
                let r_row = cmdp.reward_row(s, a);
                let mut q = 0.0;
                for sn in 0..n {
                    let p = p_row[sn];
                    if p > 0.0 {
                        let cont = if cmdp.terminal_set.contains(sn) { 0.0 } else { value[sn] };
                        q += p * (r_row[sn] + cont);
                    }
                }
                v += pa * q;
            }
            next_value[s] = v;
        }
        std::mem::swap(&mut value, &mut next_value);
    }
    Ok((0..n)
        .filter(|&s| !cmdp.terminal_set.contains(s))
        .map(|s| cmdp.initial_dist[s] * value[s])
        .sum())
}

/// State occupancy `d_t(s) = P(s_t = s, episode reached step t)` for
/// `t = 0..=horizon`. Mass that enters a terminal state is recorded at the
/// entry step and then leaves the episode.
pub fn occupancy(cmdp: &TabularCMDP, policy: &TabularPolicy) -> Result<Vec<Vec<f64>>, CmdpError> {
    cmdp.check_policy(policy)?;
    let (n, m) = (cmdp.n_states, cmdp.n_actions);
    let mut out = Vec::with_capacity(cmdp.horizon + 1);
    out.push(cmdp.initial_dist.clone());
    for t in 0..cmdp.horizon {
        let cur = &out[t];
        let mut next = vec![0.0; n];
        for s in 0..n {
            let mass = cur[s];
            if mass == 0.0 || cmdp.terminal_set.contains(s) {
                continue;
            }
            for a in 0..m {
                let w = mass * policy.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                for (sn, p) in cmdp.transition_row(s, a).iter().enumerate() {
                    next[sn] += w * p;
                }
            }
        }
        out.push(next);
    }
    Ok(out)
}

/// Expected number of time steps `t = 0..=horizon` with `s_t` in `target`.
pub fn exact_expected_visits(
    cmdp: &TabularCMDP,
    policy: &TabularPolicy,
    target: &StateSet,
) -> Result<f64, CmdpError> {
    if target.n_states() != cmdp.n_states {
        return Err(CmdpError::DimensionMismatch("target set size".into()));
    }
    if target.is_empty() {
        cmdp.check_policy(policy)?;
        return Ok(0.0);
    }
    let occ = occupancy(cmdp, policy)?;
    Ok(occ
        .iter()
        .map(|d| target.ids().map(|s| d[s]).sum::<f64>())
        .sum())
}

/// `true` iff the expected unsafe visits are within `kappa`.
pub fn is_feasible(cmdp: &TabularCMDP, policy: &TabularPolicy) -> Result<bool, CmdpError> {
    let visits = exact_expected_visits(cmdp, policy, &cmdp.unsafe_set)?;
    Ok(visits <= cmdp.kappa + FEASIBILITY_TOL)
}

/// Exact return, unsafe visits and visits to each of `extra_sets`.
pub fn exact_policy_stats(
    cmdp: &TabularCMDP,
    policy: &TabularPolicy,
    extra_sets: &[StateSet],
) -> Result<PolicyStats, CmdpError> {
    Ok(PolicyStats {
        expected_return: exact_expected_return(cmdp, policy)?,
        expected_unsafe_visits: exact_expected_visits(cmdp, policy, &cmdp.unsafe_set)?,
        expected_trigger_visits: extra_sets
            .iter()
            .map(|set| exact_expected_visits(cmdp, policy, set))
            .collect::<Result<_, _>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 0 -> 1 deterministic, 1 is a goal paying `goal_reward` on entry.
    pub(crate) fn chain(goal_reward: f64, horizon: usize) -> TabularCMDP {
        build_cmdp(&CmdpSpec {
            states: 2,
            actions: 2,
            horizon,
            kappa: 0.0,
            initial: vec![(0, 1.0)],
            unsafe_states: vec![],
            terminal: vec![1],
            transitions: vec![(0, 0, 0, 1.0, 0.0), (0, 1, 1, 1.0, goal_reward)],
        })
        .unwrap()
    }

    fn self_loop(r: f64, horizon: usize) -> TabularCMDP {
        build_cmdp(&CmdpSpec {
            states: 1,
            actions: 1,
            horizon,
            kappa: 0.0,
            initial: vec![(0, 1.0)],
            unsafe_states: vec![],
            terminal: vec![],
            transitions: vec![(0, 0, 0, 1.0, r)],
        })
        .unwrap()
    }

    #[test]
    fn identity_cmdp_builds() {
        let c = self_loop(0.0, 7);
        assert_eq!(c.horizon(), 7);
        assert_eq!(c.transition_row(0, 0), &[1.0]);
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let err = build_cmdp(&CmdpSpec {
            states: 2,
            actions: 1,
            horizon: 3,
            kappa: 0.0,
            initial: vec![(0, 1.0)],
            unsafe_states: vec![],
            terminal: vec![1],
            transitions: vec![(0, 0, 0, 0.49, 0.0), (0, 0, 1, 0.5, 0.0)],
        })
        .unwrap_err();
        assert!(matches!(err, CmdpError::NonStochasticRow { state: 0, action: 0, .. }));
    }

    #[test]
    fn rejects_unsafe_that_is_not_terminal() {
        let err = build_cmdp(&CmdpSpec {
            states: 2,
            actions: 1,
            horizon: 3,
            kappa: 0.0,
            initial: vec![(0, 1.0)],
            unsafe_states: vec![1],
            terminal: vec![],
            transitions: vec![(0, 0, 1, 1.0, 0.0), (1, 0, 1, 1.0, 0.0)],
        })
        .unwrap_err();
        assert_eq!(err, CmdpError::UnsafeNotTerminal(1));
    }

    #[test]
    fn rejects_out_of_range_and_zero_horizon() {
        let mut spec = chain(1.0, 3).to_spec();
        spec.transitions.push((0, 2, 1, 1.0, 0.0));
        assert!(matches!(build_cmdp(&spec), Err(CmdpError::DimensionMismatch(_))));
        let mut spec = chain(1.0, 3).to_spec();
        spec.horizon = 0;
        assert!(matches!(build_cmdp(&spec), Err(CmdpError::InvalidParameter(_))));
    }

    #[test]
    fn deterministic_chain_rollout_hits_goal_in_one_step() {
        let c = chain(6.0, 5);
        let pol = TabularPolicy::deterministic(2, &[1, 1]).unwrap();
        let traj = rollout(&c, &pol, 3).unwrap();
        assert_eq!(traj.steps.len(), 1);
        assert_eq!(traj.steps[0].next_state, 1);
        assert_eq!(traj.terminated_by, Termination::Goal);
        assert_eq!(exact_expected_return(&c, &pol).unwrap(), 6.0);
    }

    #[test]
    fn rollout_is_seed_deterministic() {
        let c = chain(1.0, 20);
        let pol = TabularPolicy::uniform(2, 2);
        assert_eq!(rollout(&c, &pol, 11).unwrap(), rollout(&c, &pol, 11).unwrap());
    }

    #[test]
    fn constant_reward_self_loop() {
        let c = self_loop(1.0, 4);
        let pol = TabularPolicy::uniform(1, 1);
        assert_eq!(exact_expected_return(&c, &pol).unwrap(), 4.0);
        // Initial state counted: 5 visits over t = 0..=4.
        let all = StateSet::from_ids(1, [0]).unwrap();
        assert_eq!(exact_expected_visits(&c, &pol, &all).unwrap(), 5.0);
    }

    #[test]
    fn visits_to_empty_and_single_target() {
        let c = chain(1.0, 5);
        let pol = TabularPolicy::deterministic(2, &[1, 1]).unwrap();
        assert_eq!(exact_expected_visits(&c, &pol, &StateSet::empty(2)).unwrap(), 0.0);
        let goal = StateSet::from_ids(2, [1]).unwrap();
        assert_eq!(exact_expected_visits(&c, &pol, &goal).unwrap(), 1.0);
    }

    #[test]
    fn feasibility_examples() {
        // Arm 0 is safe, arm 1 hits the unsafe state with probability 0.1.
        let spec = CmdpSpec {
            states: 3,
            actions: 2,
            horizon: 1,
            kappa: 0.0,
            initial: vec![(0, 1.0)],
            unsafe_states: vec![2],
            terminal: vec![1, 2],
            transitions: vec![(0, 0, 1, 1.0, 0.0), (0, 1, 1, 0.9, 1.0), (0, 1, 2, 0.1, 0.0)],
        };
        let c = build_cmdp(&spec).unwrap();
        let safe = TabularPolicy::deterministic(2, &[0, 0, 0]).unwrap();
        let risky = TabularPolicy::deterministic(2, &[1, 0, 0]).unwrap();
        assert!(is_feasible(&c, &safe).unwrap());
        assert!(!is_feasible(&c, &risky).unwrap());
        let v = exact_expected_visits(&c, &risky, c.unsafe_set()).unwrap();
        assert!((v - 0.1).abs() < 1e-15);
    }

    #[test]
    fn policy_dimension_mismatch() {
        let c = chain(1.0, 3);
        let pol = TabularPolicy::uniform(3, 2);
        assert!(matches!(exact_expected_return(&c, &pol), Err(CmdpError::DimensionMismatch(_))));
        assert!(matches!(rollout(&c, &pol, 0), Err(CmdpError::DimensionMismatch(_))));
    }

    #[test]
    fn text_format_round_trip() {
        let c = chain(6.0, 9);
        let text = c.to_text();
        assert!(text.contains("transitions"));
        assert_eq!(TabularCMDP::from_text(&text).unwrap(), c);
    }
}
