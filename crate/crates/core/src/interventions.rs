//! Teacher interventions and the CMDPs they induce.
//!
//! An intervention is a set of trigger states together with a reset kernel
//! that moves the student out of the trigger set. Inside the induced CMDP the
//! rows of trigger states are replaced by the reset kernel, the rescue step
//! pays zero reward, and the student carries two constraints: expected visits
//! to the unsafe set within `kappa_i` and expected visits to the trigger set
//! within `tau`.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmdp::{CmdpError, StateSet, TabularCMDP, STOCHASTIC_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterventionError {
    #[error("trigger state {0} is out of range")]
    TriggerOutOfRange(usize),
    #[error("reset kernel of trigger state {state} puts mass on trigger state {target}")]
    ResetIntoTrigger { state: usize, target: usize },
    #[error("reset kernel row {state} sums to {sum}")]
    BadResetRow { state: usize, sum: f64 },
    #[error("invalid tolerance: {0}")]
    InvalidTolerance(String),
    #[error(transparent)]
    Cmdp(#[from] CmdpError),
}

/// How the simulator moves a student out of a trigger state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    /// Back to the state occupied one step before entering the trigger set.
    /// History dependent, so exact evaluation falls back to the fixed kernel.
    ToPreviousState,
    ToInitialDistribution,
    FixedKernel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Intervention {
    name: String,
    trigger_set: StateSet,
    /// Dense `n x n` kernel; only rows of trigger states are meaningful.
    reset_kernel: Vec<f64>,
    tau: f64,
    kappa_i: f64,
    mode: ResetMode,
}

impl Intervention {
    pub fn new(
        name: impl Into<String>,
        trigger_set: StateSet,
        reset_kernel: Vec<f64>,
        tau: f64,
        kappa_i: f64,
        mode: ResetMode,
    ) -> Result<Self, InterventionError> {
        let n = trigger_set.n_states();
        if reset_kernel.len() != n * n {
            return Err(CmdpError::DimensionMismatch(format!("reset kernel must be {n}x{n}")).into());
        }
        for (label, v) in [("tau", tau), ("kappa_i", kappa_i)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(InterventionError::InvalidTolerance(format!("{label} = {v}")));
            }
        }
        for s in trigger_set.ids() {
            let row = &reset_kernel[s * n..(s + 1) * n];
            if let Some(target) = row.iter().enumerate().find(|(t, p)| **p > 0.0 && trigger_set.contains(*t)) {
                return Err(InterventionError::ResetIntoTrigger { state: s, target: target.0 });
            }
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(InterventionError::BadResetRow { state: s, sum });
            }
        }
        Ok(Self {
            name: name.into(),
            trigger_set,
            reset_kernel,
            tau,
            kappa_i,
            mode,
        })
    }

    /// Empty trigger set: the induced CMDP equals the base CMDP.
    pub fn identity(n_states: usize, kappa_i: f64) -> Self {
        Self {
            name: "none".into(),
            trigger_set: StateSet::empty(n_states),
            reset_kernel: vec![0.0; n_states * n_states],
            tau: 0.0,
            kappa_i,
            mode: ResetMode::FixedKernel,
        }
    }

    /// Resets every trigger state to the base initial distribution.
    pub fn hard_reset(
        name: impl Into<String>,
        base: &TabularCMDP,
        trigger_set: StateSet,
        tau: f64,
        kappa_i: f64,
    ) -> Result<Self, InterventionError> {
        check_trigger_range(base, &trigger_set)?;
        let n = base.n_states();
        let mut kernel = vec![0.0; n * n];
        for s in trigger_set.ids() {
            kernel[s * n..(s + 1) * n].copy_from_slice(base.initial_dist());
        }
        Self::new(name, trigger_set, kernel, tau, kappa_i, ResetMode::ToInitialDistribution)
    }

    /// Resets to the previous state in simulation; exact evaluation uses
    /// [`predecessor_kernel`].
    pub fn soft_reset(
        name: impl Into<String>,
        base: &TabularCMDP,
        trigger_set: StateSet,
        tau: f64,
        kappa_i: f64,
    ) -> Result<Self, InterventionError> {
        check_trigger_range(base, &trigger_set)?;
        let kernel = predecessor_kernel(base, &trigger_set);
        Self::new(name, trigger_set, kernel, tau, kappa_i, ResetMode::ToPreviousState)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn trigger_set(&self) -> &StateSet {
        &self.trigger_set
    }

    pub fn reset_row(&self, s: usize) -> &[f64] {
        let n = self.trigger_set.n_states();
        &self.reset_kernel[s * n..(s + 1) * n]
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn kappa_i(&self) -> f64 {
        self.kappa_i
    }

    pub fn mode(&self) -> ResetMode {
        self.mode
    }

    /// Same trigger set and kernel, other tolerances.
    pub fn with_tolerances(&self, tau: f64, kappa_i: f64) -> Result<Self, InterventionError> {
        Self::new(self.name.clone(), self.trigger_set.clone(), self.reset_kernel.clone(), tau, kappa_i, self.mode)
    }

    /// Markov approximation used for exact evaluation. The simulator honours
    /// `mode`; this only matters for `ToPreviousState`.
    pub fn with_mode(mut self, mode: ResetMode) -> Self {
        self.mode = mode;
        self
    }
}

fn check_trigger_range(base: &TabularCMDP, trigger_set: &StateSet) -> Result<(), InterventionError> {
    if trigger_set.n_states() != base.n_states() {
        return Err(InterventionError::TriggerOutOfRange(trigger_set.n_states()));
    }
    Ok(())
}

/// Fixed-kernel stand-in for "reset to the previous state".
///
/// Each trigger state resets uniformly onto the live non-trigger states that
/// can reach it in one step. States without such a predecessor use the live
/// non-trigger states nearest in the undirected transition graph, and as a
/// last resort the initial distribution.
pub fn predecessor_kernel(base: &TabularCMDP, trigger_set: &StateSet) -> Vec<f64> {
    let n = base.n_states();
    let m = base.n_actions();
    let allowed = |s: usize| !trigger_set.contains(s) && !base.terminal_set().contains(s);
    let mut neighbours = vec![Vec::new(); n];
    let mut preds = vec![Vec::new(); n];
    for s in 0..n {
        if base.terminal_set().contains(s) {
            continue;
        }
        for a in 0..m {
            for (t, &p) in base.transition_row(s, a).iter().enumerate() {
                if p > 0.0 && t != s {
                    if !preds[t].contains(&s) {
                        preds[t].push(s);
                    }
                    if !neighbours[t].contains(&s) {
                        neighbours[t].push(s);
                    }
                    if !neighbours[s].contains(&t) {
                        neighbours[s].push(t);
                    }
                }
            }
        }
    }
    let mut kernel = vec![0.0; n * n];
    for s in trigger_set.ids() {
        let mut targets: Vec<usize> = preds[s].iter().copied().filter(|&p| allowed(p)).collect();
        if targets.is_empty() {
            targets = nearest_allowed(s, &neighbours, &allowed);
        }
        let row = &mut kernel[s * n..(s + 1) * n];
        if targets.is_empty() {
            row.copy_from_slice(base.initial_dist());
        } else {
            targets.sort_unstable();
            let w = 1.0 / targets.len() as f64;
            for t in targets {
                row[t] = w;
            }
        }
    }
    kernel
}

fn nearest_allowed(start: usize, neighbours: &[Vec<usize>], allowed: &dyn Fn(usize) -> bool) -> Vec<usize> {
    let mut dist = vec![usize::MAX; neighbours.len()];
    dist[start] = 0;
    let mut queue = VecDeque::from([start]);
    let mut found = Vec::new();
    let mut found_at = usize::MAX;
    while let Some(u) = queue.pop_front() {
        if dist[u] > found_at {
            break;
        }
        if u != start && allowed(u) {
            found_at = dist[u];
            found.push(u);
            continue;
        }
        for &v in &neighbours[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    found
}

/// A materialized intervention-induced CMDP.
///
/// `cmdp()` has the modified dynamics and rewards, keeps the base unsafe set
/// with tolerance `kappa_i`, and drops trigger states from the terminal set.
#[derive(Clone, Debug)]
pub struct InducedCMDP {
    base: Arc<TabularCMDP>,
    intervention: Arc<Intervention>,
    cmdp: TabularCMDP,
}

impl InducedCMDP {
    pub fn base(&self) -> &TabularCMDP {
        &self.base
    }

    pub fn intervention(&self) -> &Intervention {
        &self.intervention
    }

    pub fn cmdp(&self) -> &TabularCMDP {
        &self.cmdp
    }

    pub fn trigger_set(&self) -> &StateSet {
        self.intervention.trigger_set()
    }

    /// The two constraints of the student problem: unsafe visits within
    /// `kappa_i`, trigger visits within `tau`.
    pub fn constraints(&self) -> [(&StateSet, f64); 2] {
        [
            (self.cmdp.unsafe_set(), self.intervention.kappa_i()),
            (self.intervention.trigger_set(), self.intervention.tau()),
        ]
    }
}

/// Builds the CMDP a student faces under `intervention`.
pub fn induce(base: Arc<TabularCMDP>, intervention: Arc<Intervention>) -> Result<InducedCMDP, InterventionError> {
    let n = base.n_states();
    let m = base.n_actions();
    let trigger = intervention.trigger_set();
    if trigger.n_states() != n {
        return Err(InterventionError::TriggerOutOfRange(trigger.n_states()));
    }
    let mut parts = (*base).clone().into_parts();
    for s in trigger.ids() {
        let row = intervention.reset_row(s);
        for a in 0..m {
            let i = (s * m + a) * n;
            parts.transition[i..i + n].copy_from_slice(row);
            parts.reward[i..i + n].iter_mut().for_each(|r| *r = 0.0);
        }
    }
    parts.terminal_set = parts.terminal_set.difference(trigger);
    parts.kappa = intervention.kappa_i();
    let cmdp = TabularCMDP::from_parts_relaxed(parts)?;
    Ok(InducedCMDP { base, intervention, cmdp })
}

/// Preconditions for zero unsafe visits during learning: the trigger set
/// covers the unsafe set, and no state outside it reaches the unsafe set in
/// one step.
pub fn check_learning_safety(base: &TabularCMDP, intervention: &Intervention) -> bool {
    let trigger = intervention.trigger_set();
    let unsafe_set = base.unsafe_set();
    if trigger.n_states() != base.n_states() || !unsafe_set.is_subset(trigger) {
        return false;
    }
    if unsafe_set.is_empty() {
        return true;
    }
    (0..base.n_states()).filter(|&s| !trigger.contains(s)).all(|s| {
        (0..base.n_actions()).all(|a| {
            let row = base.transition_row(s, a);
            unsafe_set.ids().all(|d| row[d] == 0.0)
        })
    })
}

/// `tau + kappa_i <= kappa`: every policy feasible under the intervention is
/// feasible in the base CMDP.
pub fn check_eventual_safety(intervention: &Intervention, kappa: f64) -> bool {
    intervention.tau() + intervention.kappa_i() <= kappa + 1e-12
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::frozen_lake::{build_flake_cmdp, parse_map, FrozenLakeConfig};

    fn grid3() -> TabularCMDP {
        let map = parse_map("SFF\nFHF\nFFG").unwrap();
        build_flake_cmdp(&map, &FrozenLakeConfig { horizon: 8, ..Default::default() }).unwrap()
    }

    #[test]
    fn empty_trigger_is_identity() {
        let base = Arc::new(grid3());
        let id = Arc::new(Intervention::identity(base.n_states(), base.kappa()));
        let induced = induce(base.clone(), id).unwrap();
        assert_eq!(induced.cmdp(), &*base);
    }

    #[test]
    fn reset_into_trigger_rejected() {
        let base = grid3();
        let n = base.n_states();
        let trigger = StateSet::from_ids(n, [1, 3]).unwrap();
        let mut kernel = vec![0.0; n * n];
        kernel[n + 3] = 1.0;
        kernel[3 * n] = 1.0;
        let err = Intervention::new("bad", trigger, kernel, 0.1, 0.0, ResetMode::FixedKernel).unwrap_err();
        assert_eq!(err, InterventionError::ResetIntoTrigger { state: 1, target: 3 });
    }

    #[test]
    fn ring_intervention_rows() {
        let base = Arc::new(grid3());
        let n = base.n_states();
        // Hole at 4; the ring is its 4-neighbourhood.
        let trigger = StateSet::from_ids(n, [1, 3, 4, 5, 7]).unwrap();
        let hr = Arc::new(Intervention::hard_reset("HR", &base, trigger.clone(), 0.0, 0.0).unwrap());
        let induced = induce(base.clone(), hr.clone()).unwrap();
        for s in 0..n {
            for a in 0..4 {
                let row = induced.cmdp().transition_row(s, a);
                if trigger.contains(s) {
                    assert_eq!(row, hr.reset_row(s));
                    assert!(induced.cmdp().reward_row(s, a).iter().all(|r| *r == 0.0));
                } else {
                    assert_eq!(row, base.transition_row(s, a));
                    assert_eq!(induced.cmdp().reward_row(s, a), base.reward_row(s, a));
                }
            }
        }
        assert!(!induced.cmdp().terminal_set().contains(4));
        assert!(induced.cmdp().terminal_set().contains(8));
    }

    #[test]
    fn learning_safety_checks() {
        let base = grid3();
        let n = base.n_states();
        let just_hole = Intervention::hard_reset("D", &base, StateSet::from_ids(n, [4]).unwrap(), 0.1, 0.0).unwrap();
        assert!(!check_learning_safety(&base, &just_hole));
        let ring = Intervention::hard_reset("ring", &base, StateSet::from_ids(n, [1, 3, 4, 5, 7]).unwrap(), 0.1, 0.0)
            .unwrap();
        assert!(check_learning_safety(&base, &ring));
        let none = Intervention::identity(n, 0.0);
        assert!(!check_learning_safety(&base, &none));
    }

    #[test]
    fn eventual_safety_checks() {
        let n = 4;
        let make = |tau, k| Intervention::identity(n, 0.0).with_tolerances(tau, k).unwrap();
        assert!(check_eventual_safety(&make(0.1, 0.0), 0.1));
        assert!(!check_eventual_safety(&make(0.1, 0.05), 0.1));
        assert!(check_eventual_safety(&make(0.0, 0.0), 0.0));
    }

    #[test]
    fn predecessor_kernel_targets_live_neighbours() {
        let base = grid3();
        let n = base.n_states();
        let trigger = StateSet::from_ids(n, [1, 3, 4, 5, 7]).unwrap();
        let k = predecessor_kernel(&base, &trigger);
        // Cell 1 is entered from 0 and 2; both are outside the ring.
        assert_eq!(&k[n..n + 3], &[0.5, 0.0, 0.5]);
        // The hole has only ring predecessors; nearest live states are the corners.
        let hole_row = &k[4 * n..5 * n];
        assert!((hole_row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(hole_row.iter().enumerate().all(|(t, p)| *p == 0.0 || !trigger.contains(t)));
    }
}
