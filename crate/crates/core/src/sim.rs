//! Step-level simulator interface shared by tabular and continuous
//! environments, plus deployment evaluation of frozen policies.

use crate::cmdp::{sample_index, TabularPolicy};
use crate::interventions::{InducedCMDP, ResetMode};
use crate::rng::{rng_from_seed, Rng};

/// Result of one simulator step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: usize,
    pub reward: f64,
    /// Bit `c` is set when the entered state lies in constraint set `c`.
    pub hits: u32,
    pub done: bool,
    /// Entered an unsafe state of the original problem.
    pub failure: bool,
    pub success: bool,
    /// The student's action was ignored (teacher rescue step).
    pub overridden: bool,
}

/// An episodic environment with discrete observations and actions and a
/// fixed list of visit constraints.
pub trait StudentEnv: Sync {
    type Episode;

    fn n_obs(&self) -> usize;
    fn n_actions(&self) -> usize;
    /// Tolerance of each constraint, in the order of the `hits` bits.
    fn tolerances(&self) -> Vec<f64>;
    /// Starts an episode; returns the first observation and its constraint hits.
    fn reset(&self, rng: &mut Rng) -> (Self::Episode, usize, u32);
    fn step(&self, episode: &mut Self::Episode, action: usize, rng: &mut Rng) -> StepOutcome;
    /// Whether the next step ignores the student's action.
    fn overrides_action(&self, episode: &Self::Episode) -> bool;
}

#[derive(Clone, Copy, Debug)]
pub struct TabularEpisode {
    state: usize,
    previous: Option<usize>,
    t: usize,
}

/// Constraint 0 is the unsafe set, constraint 1 the trigger set.
impl StudentEnv for InducedCMDP {
    type Episode = TabularEpisode;

    fn n_obs(&self) -> usize {
        self.cmdp().n_states()
    }

    fn n_actions(&self) -> usize {
        self.cmdp().n_actions()
    }

    fn tolerances(&self) -> Vec<f64> {
        vec![self.intervention().kappa_i(), self.intervention().tau()]
    }

    fn reset(&self, rng: &mut Rng) -> (TabularEpisode, usize, u32) {
        let state = sample_index(self.cmdp().initial_dist(), rng);
        let ep = TabularEpisode { state, previous: None, t: 0 };
        (ep, state, self.hits(state))
    }

    fn step(&self, ep: &mut TabularEpisode, action: usize, rng: &mut Rng) -> StepOutcome {
        let cmdp = self.cmdp();
        let s = ep.state;
        let overridden = self.trigger_set().contains(s);
        let (next, reward) = if overridden {
            let back = match (self.intervention().mode(), ep.previous) {
                (ResetMode::ToPreviousState, Some(p)) if !self.trigger_set().contains(p) => p,
                _ => sample_index(self.intervention().reset_row(s), rng),
            };
            (back, 0.0)
        } else {
            let next = sample_index(cmdp.transition_row(s, action), rng);
            (next, cmdp.reward(s, action, next))
        };
        ep.previous = Some(s);
        ep.state = next;
        ep.t += 1;
        let terminal = cmdp.terminal_set().contains(next);
        let failure = cmdp.unsafe_set().contains(next);
        StepOutcome {
            obs: next,
            reward,
            hits: self.hits(next),
            done: terminal || ep.t >= cmdp.horizon(),
            failure,
            success: terminal && !failure,
            overridden,
        }
    }

    fn overrides_action(&self, ep: &TabularEpisode) -> bool {
        self.trigger_set().contains(ep.state)
    }
}

impl InducedCMDP {
    fn hits(&self, s: usize) -> u32 {
        u32::from(self.cmdp().unsafe_set().contains(s)) | (u32::from(self.trigger_set().contains(s)) << 1)
    }
}

/// Aggregate outcome of running a frozen policy.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeSummary {
    pub episodes: usize,
    pub successes: usize,
    pub failures: usize,
    pub total_return: f64,
    /// Summed per-episode visits to each constraint set.
    pub visits: Vec<f64>,
}

impl EpisodeSummary {
    pub fn mean_return(&self) -> f64 {
        self.total_return / self.episodes.max(1) as f64
    }

    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.episodes.max(1) as f64
    }

    pub fn failure_rate(&self) -> f64 {
        self.failures as f64 / self.episodes.max(1) as f64
    }

    pub fn mean_visits(&self, c: usize) -> f64 {
        self.visits[c] / self.episodes.max(1) as f64
    }
}

/// How long to run a frozen policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Budget {
    Episodes(usize),
    /// Run for this many steps; only completed episodes are counted unless
    /// none completed, in which case the partial episode counts as one.
    Steps(usize),
}

/// Runs `policy` (indexed by observation) without learning.
pub fn run_policy<E: StudentEnv>(env: &E, policy: &TabularPolicy, budget: Budget, seed: u64) -> EpisodeSummary {
    let mut rng = rng_from_seed(seed);
    let n_c = env.tolerances().len();
    let mut out = EpisodeSummary { visits: vec![0.0; n_c], ..Default::default() };
    let mut steps = 0usize;
    loop {
        match budget {
            Budget::Episodes(n) if out.episodes >= n => break,
            Budget::Steps(n) if steps >= n => break,
            _ => {}
        }
        let (mut ep, mut obs, hits) = env.reset(&mut rng);
        let mut ret = 0.0;
        let mut visits = vec![0.0; n_c];
        add_hits(&mut visits, hits);
        let mut finished = None;
        loop {
            if let Budget::Steps(n) = budget {
                if steps >= n {
                    break;
                }
            }
            let action = if env.overrides_action(&ep) { 0 } else { policy.sample(obs, &mut rng) };
            let o = env.step(&mut ep, action, &mut rng);
            steps += 1;
            ret += o.reward;
            add_hits(&mut visits, o.hits);
            obs = o.obs;
            if o.done {
                finished = Some((o.success, o.failure));
                break;
            }
        }
        let count = finished.is_some() || out.episodes == 0;
        if let Some((success, failure)) = finished.or(if count { Some((false, false)) } else { None }) {
            out.episodes += 1;
            out.successes += usize::from(success);
            out.failures += usize::from(failure);
            out.total_return += ret;
            for (acc, v) in out.visits.iter_mut().zip(&visits) {
                *acc += v;
            }
        }
        if finished.is_none() {
            break;
        }
    }
    out
}

pub(crate) fn add_hits(visits: &mut [f64], hits: u32) {
    for (c, v) in visits.iter_mut().enumerate() {
        if hits & (1 << c) != 0 {
            *v += 1.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::StateSet;
    use crate::env::frozen_lake::{build_flake_cmdp, parse_map, FrozenLakeConfig};
    use crate::interventions::{induce, Intervention};
    use std::sync::Arc;

    fn env(mode_soft: bool) -> InducedCMDP {
        let map = parse_map("SFF\nFHF\nFFG").unwrap();
        let base = Arc::new(build_flake_cmdp(&map, &FrozenLakeConfig { horizon: 20, ..Default::default() }).unwrap());
        let ring = StateSet::from_ids(9, [1, 3, 4, 5, 7]).unwrap();
        let iv = if mode_soft {
            Intervention::soft_reset("SR", &base, ring, 0.1, 0.0).unwrap()
        } else {
            Intervention::hard_reset("HR", &base, ring, 0.0, 0.0).unwrap()
        };
        induce(base, Arc::new(iv)).unwrap()
    }

    #[test]
    fn soft_reset_returns_to_previous_cell() {
        let env = env(true);
        let mut rng = rng_from_seed(3);
        for _ in 0..200 {
            let (mut ep, _, _) = env.reset(&mut rng);
            let o = env.step(&mut ep, 1, &mut rng);
            if o.obs == 1 {
                assert!(env.overrides_action(&ep));
                let back = env.step(&mut ep, 3, &mut rng);
                assert!(back.overridden);
                assert_eq!(back.obs, 0);
                assert_eq!(back.reward, 0.0);
                return;
            }
        }
        panic!("never entered the ring");
    }

    #[test]
    fn blanket_run_has_no_failures() {
        for soft in [true, false] {
            let env = env(soft);
            let policy = TabularPolicy::uniform(9, 4);
            let s = run_policy(&env, &policy, Budget::Steps(5000), 1);
            assert_eq!(s.failures, 0);
            assert!(s.episodes > 0);
        }
    }

    #[test]
    fn step_budget_counts_partial_episode_once() {
        let env = env(false);
        let policy = TabularPolicy::uniform(9, 4);
        let s = run_policy(&env, &policy, Budget::Steps(1), 1);
        assert_eq!(s.episodes, 1);
    }
}
