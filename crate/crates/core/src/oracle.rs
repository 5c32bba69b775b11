//! Brute-force ground truth for small tabular problems.
//!
//! Everything here enumerates deterministic Markov policies over the decision
//! states of a CMDP and evaluates each one exactly. The evaluators are written
//! independently of [`crate::cmdp`]: returns are accumulated forward in time
//! and visit counts backward, the reverse of the main code path, so that the
//! two can check each other.
//!
//! Deterministic enumeration is exhaustive for the learning-safety check,
//! because zero expected unsafe visits under every deterministic policy
//! implies zero under every mixture. For the feasibility-inclusion check it is
//! a strong but not exhaustive test, so it is backed by random stochastic
//! policies.

use std::io::Write;
use std::sync::Arc;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmdp::{CmdpError, PolicyStats, StateSet, TabularCMDP, TabularPolicy, FEASIBILITY_TOL};
use crate::env::frozen_lake::{build_flake_cmdp, parse_map, ring_trigger_set, FrozenLakeConfig, FrozenLakeError};
use crate::interventions::{
    check_eventual_safety, check_learning_safety, induce, Intervention, InterventionError,
};
use crate::rng::rng_from_seed;
use crate::student::SolverConfig;

/// Tolerance for "expected unsafe visits equal the initial unsafe mass".
pub const VISIT_EQUALITY_TOL: f64 = 1e-10;
/// Deepest horizon the trajectory-tree evaluator accepts.
pub const TREE_MAX_HORIZON: usize = 6;

/// The committed shortcut fixture.
pub const SHORTCUT_FIXTURE: &str = include_str!("../fixtures/shortcut.toml");

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("{policies} policies exceed the enumeration budget of {max}")]
    BudgetExceeded { policies: f64, max: u64 },
    #[error("no deterministic policy meets the unsafe-visit tolerance")]
    NoFeasible,
    #[error("trajectory tree needs horizon <= {max}, got {horizon}")]
    HorizonTooDeep { horizon: usize, max: usize },
    #[error(transparent)]
    Cmdp(#[from] CmdpError),
    #[error(transparent)]
    Intervention(#[from] InterventionError),
    #[error(transparent)]
    FrozenLake(#[from] FrozenLakeError),
}

/// Guard on the number of enumerated policies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnumerationBudget {
    pub max_policies: u64,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        Self { max_policies: 10_000_000 }
    }
}

/// Deterministic policies over a fixed list of decision states.
///
/// Policy `index` is read in base `n_actions` with the first decision state as
/// the least significant digit. States outside the list take action 0.
#[derive(Clone, Debug)]
pub struct PolicySpace {
    n_states: usize,
    n_actions: usize,
    decision: Vec<usize>,
    count: u64,
}

impl PolicySpace {
    pub fn new(n_states: usize, n_actions: usize, decision: Vec<usize>, budget: EnumerationBudget) -> Result<Self, OracleError> {
        let policies = (n_actions as f64).powi(decision.len() as i32);
        if budget.max_policies == 0 || policies > budget.max_policies as f64 {
            return Err(OracleError::BudgetExceeded { policies, max: budget.max_policies });
        }
        Ok(Self { n_states, n_actions, decision, count: policies as u64 })
    }

    /// Policies over the non-terminal states of `cmdp`.
    pub fn for_cmdp(cmdp: &TabularCMDP, budget: EnumerationBudget) -> Result<Self, OracleError> {
        Self::new(cmdp.n_states(), cmdp.n_actions(), decision_states(cmdp), budget)
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn decision_states(&self) -> &[usize] {
        &self.decision
    }

    pub fn actions(&self, mut index: u64) -> Vec<usize> {
        let m = self.n_actions as u64;
        let mut out = vec![0; self.n_states];
        for &s in &self.decision {
            out[s] = (index % m) as usize;
            index /= m;
        }
        out
    }

    pub fn policy(&self, index: u64) -> TabularPolicy {
        TabularPolicy::deterministic(self.n_actions, &self.actions(index)).expect("actions are in range")
    }
}

/// States where the choice of action can matter: the non-terminal ones.
pub fn decision_states(cmdp: &TabularCMDP) -> Vec<usize> {
    (0..cmdp.n_states()).filter(|&s| !cmdp.terminal_set().contains(s)).collect()
}

/// Expected return, accumulated forward over the live-state distribution.
pub fn forward_return(cmdp: &TabularCMDP, policy: &TabularPolicy) -> f64 {
    let n = cmdp.n_states();
    let live = |s: usize| !cmdp.terminal_set().contains(s);
    let mut dist: Vec<f64> = (0..n).map(|s| if live(s) { cmdp.initial_dist()[s] } else { 0.0 }).collect();
    let mut total = 0.0;
    for _ in 0..cmdp.horizon() {
        let mut next = vec![0.0; n];
        for (s, &mass) in dist.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (a, &pa) in policy.row(s).iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                let rewards = cmdp.reward_row(s, a);
                for (sn, &p) in cmdp.transition_row(s, a).iter().enumerate() {
                    let w = mass * pa * p;
                    total += w * rewards[sn];
                    if live(sn) {
                        next[sn] += w;
                    }
                }
            }
        }
        dist = next;
    }
    total
}

/// Expected steps `t = 0..=horizon` spent in `target`, by backward recursion on
/// the expected future visits from each live state.
pub fn backward_visits(cmdp: &TabularCMDP, policy: &TabularPolicy, target: &StateSet) -> f64 {
    let n = cmdp.n_states();
    let live = |s: usize| !cmdp.terminal_set().contains(s);
    let hit = |s: usize| f64::from(u8::from(target.contains(s)));
    // to_go[s]: expected visits over the remaining steps, excluding s itself.
    let mut to_go = vec![0.0; n];
    for _ in 0..cmdp.horizon() {
        let mut next = vec![0.0; n];
        for (s, slot) in next.iter_mut().enumerate() {
            if !live(s) {
                continue;
            }
            let mut v = 0.0;
            for (a, &pa) in policy.row(s).iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                for (sn, &p) in cmdp.transition_row(s, a).iter().enumerate() {
                    if p > 0.0 {
                        let cont = if live(sn) { to_go[sn] } else { 0.0 };
                        v += pa * p * (hit(sn) + cont);
                    }
                }
            }
            *slot = v;
        }
        to_go = next;
    }
    (0..n)
        .map(|s| {
            let mu = cmdp.initial_dist()[s];
            let cont = if live(s) { to_go[s] } else { 0.0 };
            mu * (hit(s) + cont)
        })
        .sum()
}

/// Return, unsafe visits and visits to `extra_sets` through the oracle's own
/// evaluators.
pub fn oracle_stats(cmdp: &TabularCMDP, policy: &TabularPolicy, extra_sets: &[StateSet]) -> PolicyStats {
    PolicyStats {
        expected_return: forward_return(cmdp, policy),
        expected_unsafe_visits: backward_visits(cmdp, policy, cmdp.unsafe_set()),
        expected_trigger_visits: extra_sets.iter().map(|set| backward_visits(cmdp, policy, set)).collect(),
    }
}

/// Same statistics by expanding every trajectory explicitly.
pub fn trajectory_tree_stats(cmdp: &TabularCMDP, policy: &TabularPolicy, extra_sets: &[StateSet]) -> Result<PolicyStats, OracleError> {
    if cmdp.horizon() > TREE_MAX_HORIZON {
        return Err(OracleError::HorizonTooDeep { horizon: cmdp.horizon(), max: TREE_MAX_HORIZON });
    }
    let mut sets = vec![cmdp.unsafe_set().clone()];
    sets.extend(extra_sets.iter().cloned());
    let mut acc = vec![0.0; sets.len() + 1];

    struct Tree<'a> {
        cmdp: &'a TabularCMDP,
        policy: &'a TabularPolicy,
        sets: &'a [StateSet],
    }
    impl Tree<'_> {
        fn visit(&self, s: usize, prob: f64, acc: &mut [f64]) {
            for (i, set) in self.sets.iter().enumerate() {
                if set.contains(s) {
                    acc[i + 1] += prob;
                }
            }
        }

        fn expand(&self, s: usize, depth: usize, prob: f64, acc: &mut [f64]) {
            if depth == self.cmdp.horizon() || self.cmdp.terminal_set().contains(s) {
                return;
            }
            for (a, &pa) in self.policy.row(s).iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                let rewards = self.cmdp.reward_row(s, a);
                for (sn, &p) in self.cmdp.transition_row(s, a).iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let w = prob * pa * p;
                    acc[0] += w * rewards[sn];
                    self.visit(sn, w, acc);
                    self.expand(sn, depth + 1, w, acc);
                }
            }
        }
    }

    let tree = Tree { cmdp, policy, sets: &sets };
    for (s, &mu) in cmdp.initial_dist().iter().enumerate() {
        if mu > 0.0 {
            tree.visit(s, mu, &mut acc);
            tree.expand(s, 0, mu, &mut acc);
        }
    }
    Ok(PolicyStats {
        expected_return: acc[0],
        expected_unsafe_visits: acc[1],
        expected_trigger_visits: acc[2..].to_vec(),
    })
}

/// One enumerated policy and its exact statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct EnumeratedPolicy {
    pub index: u64,
    pub actions: Vec<usize>,
    pub stats: PolicyStats,
}

/// Every deterministic policy over the decision states, in index order.
pub fn enumerate_policy_stats(
    cmdp: &TabularCMDP,
    extra_sets: &[StateSet],
    budget: EnumerationBudget,
) -> Result<Vec<EnumeratedPolicy>, OracleError> {
    let space = PolicySpace::for_cmdp(cmdp, budget)?;
    for set in extra_sets {
        if set.n_states() != cmdp.n_states() {
            return Err(CmdpError::DimensionMismatch("extra set size".into()).into());
        }
    }
    Ok((0..space.count())
        .into_par_iter()
        .map(|index| {
            let policy = space.policy(index);
            EnumeratedPolicy { index, actions: space.actions(index), stats: oracle_stats(cmdp, &policy, extra_sets) }
        })
        .collect())
}

/// Best feasible deterministic policy.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactSolution {
    pub index: u64,
    pub actions: Vec<usize>,
    pub policy: TabularPolicy,
    pub value: f64,
    pub unsafe_visits: f64,
}

/// Maximum-return deterministic policy among those with expected unsafe visits
/// within `kappa`. Ties go to the lowest policy index.
pub fn solve_exact(cmdp: &TabularCMDP, budget: EnumerationBudget) -> Result<ExactSolution, OracleError> {
    let space = PolicySpace::for_cmdp(cmdp, budget)?;
    let best = (0..space.count())
        .into_par_iter()
        .filter_map(|index| {
            let policy = space.policy(index);
            let visits = backward_visits(cmdp, &policy, cmdp.unsafe_set());
            (visits <= cmdp.kappa() + FEASIBILITY_TOL).then(|| (index, forward_return(cmdp, &policy), visits))
        })
        .reduce_with(|a, b| {
            // Higher value wins; equal values keep the lower index.
            match a.1.total_cmp(&b.1) {
                std::cmp::Ordering::Less => b,
                std::cmp::Ordering::Greater => a,
                std::cmp::Ordering::Equal => if a.0 <= b.0 { a } else { b },
            }
        });
    let (index, value, unsafe_visits) = best.ok_or(OracleError::NoFeasible)?;
    Ok(ExactSolution { index, actions: space.actions(index), policy: space.policy(index), value, unsafe_visits })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proposition {
    /// Policies feasible under the intervention are feasible without it.
    EventualSafety,
    /// A blanket intervention keeps the student out of the unsafe set.
    LearningSafety,
}

impl Proposition {
    pub fn as_str(self) -> &'static str {
        match self {
            Proposition::EventualSafety => "eventual_safety",
            Proposition::LearningSafety => "learning_safety",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckedPolicy {
    Deterministic { index: u64, actions: Vec<usize> },
    /// The `sample`-th random stochastic policy of the run.
    Sampled { sample: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub policy: CheckedPolicy,
    pub quantity: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropositionReport {
    pub proposition: Proposition,
    pub fixture: String,
    pub policies_checked: u64,
    /// The premise did not hold, so an empty counterexample list proves nothing.
    pub vacuous: bool,
    pub counterexamples: Vec<Counterexample>,
}

impl PropositionReport {
    pub fn verified(&self) -> bool {
        !self.vacuous && self.counterexamples.is_empty()
    }

    /// One human-readable line.
    pub fn summary(&self) -> String {
        let status = if self.vacuous {
            "VACUOUS"
        } else if self.counterexamples.is_empty() {
            "VERIFIED"
        } else {
            "VIOLATED"
        };
        format!(
            "{} {}: {} policies checked, {} counterexamples [{}]",
            self.proposition.as_str(),
            self.fixture,
            self.policies_checked,
            self.counterexamples.len(),
            status
        )
    }
}

/// Feasibility inclusion: every policy meeting both intervention constraints
/// (unsafe visits within `kappa_i`, trigger visits within `tau`) under the
/// intervention meets `kappa` without it.
///
/// Checks every deterministic policy over the base decision states, then
/// `random_policies` random stochastic policies drawn from `seed`.
pub fn verify_prop1(
    base: &TabularCMDP,
    intervention: &Intervention,
    budget: EnumerationBudget,
    random_policies: usize,
    seed: u64,
) -> Result<PropositionReport, OracleError> {
    let induced = induce(Arc::new(base.clone()), Arc::new(intervention.clone()))?;
    let m_i = induced.cmdp();
    let trigger = intervention.trigger_set();
    let check = |policy: &TabularPolicy| -> Option<(&'static str, f64)> {
        let unsafe_i = backward_visits(m_i, policy, m_i.unsafe_set());
        let trig_i = backward_visits(m_i, policy, trigger);
        let feasible_i = unsafe_i <= intervention.kappa_i() + FEASIBILITY_TOL && trig_i <= intervention.tau() + FEASIBILITY_TOL;
        if !feasible_i {
            return None;
        }
        let unsafe_base = backward_visits(base, policy, base.unsafe_set());
        (unsafe_base > base.kappa() + FEASIBILITY_TOL).then_some(("base_unsafe_visits", unsafe_base))
    };

    let space = PolicySpace::for_cmdp(base, budget)?;
    let mut counterexamples: Vec<Counterexample> = (0..space.count())
        .into_par_iter()
        .filter_map(|index| {
            check(&space.policy(index)).map(|(quantity, value)| Counterexample {
                policy: CheckedPolicy::Deterministic { index, actions: space.actions(index) },
                quantity: quantity.into(),
                value,
            })
        })
        .collect();
    let sampled: Vec<Counterexample> = (0..random_policies)
        .into_par_iter()
        .filter_map(|k| {
            let policy = random_policy(base.n_states(), base.n_actions(), crate::rng::derive_seed(seed, k as u64));
            check(&policy).map(|(quantity, value)| Counterexample {
                policy: CheckedPolicy::Sampled { sample: k },
                quantity: quantity.into(),
                value,
            })
        })
        .collect();
    counterexamples.extend(sampled);
    Ok(PropositionReport {
        proposition: Proposition::EventualSafety,
        fixture: intervention.name().to_string(),
        policies_checked: space.count() + random_policies as u64,
        vacuous: !check_eventual_safety(intervention, base.kappa()),
        counterexamples,
    })
}

/// Learning safety: under the intervention, expected unsafe visits equal the
/// initial mass on the unsafe set for every deterministic policy.
///
/// Actions in trigger states are irrelevant under the intervention, so the
/// enumeration covers the remaining live states of the induced CMDP.
pub fn verify_prop2(
    base: &TabularCMDP,
    intervention: &Intervention,
    budget: EnumerationBudget,
) -> Result<PropositionReport, OracleError> {
    let induced = induce(Arc::new(base.clone()), Arc::new(intervention.clone()))?;
    let m_i = induced.cmdp();
    let trigger = intervention.trigger_set();
    let decision = decision_states(m_i).into_iter().filter(|&s| !trigger.contains(s)).collect();
    let space = PolicySpace::new(m_i.n_states(), m_i.n_actions(), decision, budget)?;
    let unsafe_set = base.unsafe_set();
    let initial_mass: f64 = unsafe_set.ids().map(|s| base.initial_dist()[s]).sum();
    let counterexamples = (0..space.count())
        .into_par_iter()
        .filter_map(|index| {
            let visits = backward_visits(m_i, &space.policy(index), unsafe_set);
            ((visits - initial_mass).abs() > VISIT_EQUALITY_TOL).then(|| Counterexample {
                policy: CheckedPolicy::Deterministic { index, actions: space.actions(index) },
                quantity: "unsafe_visits_under_intervention".into(),
                value: visits,
            })
        })
        .collect();
    Ok(PropositionReport {
        proposition: Proposition::LearningSafety,
        fixture: intervention.name().to_string(),
        policies_checked: space.count(),
        vacuous: !check_learning_safety(base, intervention),
        counterexamples,
    })
}

/// Random stochastic policy: each row mixes flat and peaked draws so that
/// near-deterministic corners are covered too.
pub fn random_policy(n_states: usize, n_actions: usize, seed: u64) -> TabularPolicy {
    let mut rng = rng_from_seed(seed);
    let sharpness = [1.0, 2.0, 4.0, 8.0][(seed % 4) as usize];
    let mut probs = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states {
        // Exponential draws give a flat Dirichlet row; powers sharpen it.
        let row: Vec<f64> = (0..n_actions)
            .map(|_| (-(1.0 - rng.random::<f64>()).ln()).powf(sharpness))
            .collect();
        let sum: f64 = row.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            probs.extend(row.iter().map(|w| w / sum));
        } else {
            probs.extend(std::iter::repeat_n(1.0 / n_actions as f64, n_actions));
        }
    }
    TabularPolicy::new(n_states, n_actions, probs).expect("rows are normalized")
}

/// Writes counterexamples as CSV rows.
pub fn write_counterexamples_csv<W: Write>(out: W, reports: &[PropositionReport]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["proposition", "fixture", "policy_kind", "policy_id", "actions", "quantity", "value"])?;
    for r in reports {
        for c in &r.counterexamples {
            let (kind, id, actions) = match &c.policy {
                CheckedPolicy::Deterministic { index, actions } => {
                    let a: Vec<String> = actions.iter().map(usize::to_string).collect();
                    ("deterministic", index.to_string(), a.join(" "))
                }
                CheckedPolicy::Sampled { sample } => ("sampled", sample.to_string(), String::new()),
            };
            w.write_record([
                r.proposition.as_str(),
                &r.fixture,
                kind,
                &id,
                &actions,
                &c.quantity,
                &format!("{:.12}", c.value),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A small base CMDP with an intervention to verify.
#[derive(Clone, Debug)]
pub struct PropFixture {
    pub name: String,
    pub base: TabularCMDP,
    pub intervention: Intervention,
}

fn grid_fixture(
    name: &str,
    map: &str,
    horizon: usize,
    trigger: impl FnOnce(&crate::env::frozen_lake::GridMap) -> StateSet,
    hard: bool,
    tau: f64,
    kappa_i: f64,
) -> Result<PropFixture, OracleError> {
    let map = parse_map(map).map_err(FrozenLakeError::from)?;
    let base = build_flake_cmdp(&map, &FrozenLakeConfig { horizon, kappa: 0.1, ..FrozenLakeConfig::default() })?;
    let set = trigger(&map);
    let intervention = if hard {
        Intervention::hard_reset(name, &base, set, tau, kappa_i)?
    } else {
        Intervention::soft_reset(name, &base, set, tau, kappa_i)?
    };
    Ok(PropFixture { name: name.into(), base, intervention })
}

/// Shipped fixtures whose interventions are blanket and satisfy
/// `tau + kappa_i <= kappa`.
pub fn prop_fixtures() -> Result<Vec<PropFixture>, OracleError> {
    Ok(vec![
        grid_fixture("center_hole_soft", "SFF\nFHF\nFFG", 8, |m| ring_trigger_set(m, 1), false, 0.1, 0.0)?,
        grid_fixture("two_holes_hard", "SFH\nFFF\nHFG", 8, |m| ring_trigger_set(m, 1), true, 0.05, 0.05)?,
        grid_fixture("edge_hole_soft", "SFG\nFFH", 10, |m| ring_trigger_set(m, 1), false, 0.1, 0.0)?,
        grid_fixture("side_hole_hard", "SFF\nFFH\nFFG", 10, |m| ring_trigger_set(m, 1), true, 0.0, 0.1)?,
    ])
}

/// Two holes, but the trigger set only surrounds one of them.
pub fn broken_fixture() -> Result<PropFixture, OracleError> {
    grid_fixture(
        "uncovered_hole",
        "SFH\nFFF\nHFG",
        8,
        |m| StateSet::from_ids(m.n_cells(), [m.id(0, 2), m.id(0, 1), m.id(1, 2)]).expect("cells in range"),
        true,
        0.1,
        0.0,
    )
}

/// The shortcut CMDP: a risky two-move route and a safe four-move detour.
pub fn shortcut_cmdp() -> TabularCMDP {
    TabularCMDP::from_text(SHORTCUT_FIXTURE).expect("committed fixture parses")
}

/// Learner settings for the shortcut CMDP. The critic starts above every
/// achievable return so the untried detour gets explored, and `B` is large
/// enough for the unsafe-visit penalty to outweigh the shortcut's 0.2 gain.
pub fn shortcut_solver() -> SolverConfig {
    SolverConfig {
        bound_b: 5.0,
        discount: 1.0,
        exploration_temperature: 0.05,
        primal_steps_per_epoch: 200,
        initial_value: 10.0,
        ..SolverConfig::frozen_lake()
    }
}

/// Training steps for the shortcut CMDP.
pub const SHORTCUT_STEPS: usize = 30_000;
