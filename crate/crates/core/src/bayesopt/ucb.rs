//! Upper-confidence-bound proposals over mixed discrete/continuous spaces.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::gp::{GPModel, Posterior};
use super::BayesOptError;
use crate::rng::rng_from_seed;

/// One coordinate of the search space.
///
/// `Choice(n)` holds one of `n` unordered options. Its raw coordinate is
/// `index / (n - 1)` in `[0, 1]`, and proposals are snapped to the nearest
/// index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dim {
    Choice(usize),
    Interval(f64, f64),
}

impl Dim {
    pub fn choice_coord(index: usize, n: usize) -> f64 {
        if n <= 1 {
            0.0
        } else {
            index as f64 / (n - 1) as f64
        }
    }

    pub fn snap_choice(coord: f64, n: usize) -> usize {
        if n <= 1 {
            return 0;
        }
        ((coord.clamp(0.0, 1.0) * (n - 1) as f64).round() as usize).min(n - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub dims: Vec<Dim>,
}

impl ParamSpace {
    pub fn validate(&self) -> Result<(), BayesOptError> {
        if self.dims.is_empty() {
            return Err(BayesOptError::EmptySpace);
        }
        for d in &self.dims {
            match *d {
                Dim::Choice(0) => return Err(BayesOptError::EmptySpace),
                Dim::Interval(lo, hi) if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() => {
                    return Err(BayesOptError::EmptySpace)
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Uniform draw: random option per choice, uniform value per interval.
    pub fn sample(&self, rng: &mut crate::rng::Rng) -> Vec<f64> {
        self.dims
            .iter()
            .map(|d| match *d {
                Dim::Choice(n) => Dim::choice_coord(rng.random_range(0..n), n),
                Dim::Interval(lo, hi) => lo + (hi - lo) * rng.random::<f64>(),
            })
            .collect()
    }

    /// Snaps choice coordinates and clamps intervals.
    pub fn snap(&self, x: &[f64]) -> Vec<f64> {
        self.dims
            .iter()
            .zip(x)
            .map(|(d, v)| match *d {
                Dim::Choice(n) => Dim::choice_coord(Dim::snap_choice(*v, n), n),
                Dim::Interval(lo, hi) => v.clamp(lo, hi),
            })
            .collect()
    }

    fn choice_combinations(&self) -> Vec<Vec<usize>> {
        let mut combos = vec![Vec::new()];
        for d in &self.dims {
            if let Dim::Choice(n) = *d {
                combos = combos
                    .into_iter()
                    .flat_map(|c| {
                        (0..n).map(move |i| {
                            let mut c = c.clone();
                            c.push(i);
                            c
                        })
                    })
                    .collect();
            }
        }
        combos
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UCBConfig {
    /// Exploration weight: the score is `mean + sqrt(beta) * std`.
    pub beta: f64,
    /// Random continuous draws per combination of choices.
    pub candidate_count: usize,
    /// Best candidates refined by local search.
    pub restarts: usize,
}

impl Default for UCBConfig {
    fn default() -> Self {
        Self {
            beta: 4.0,
            candidate_count: 64,
            restarts: 5,
        }
    }
}

const LOCAL_SEARCH_ROUNDS: usize = 12;
/// Initial local-search radius as a fraction of each interval's width.
pub const LOCAL_SEARCH_RADIUS: f64 = 0.1;

/// Proposes the next raw parameter vector.
pub fn ucb_propose(model: &GPModel, space: &ParamSpace, ucb: &UCBConfig, rng_seed: u64) -> Result<Vec<f64>, BayesOptError> {
    space.validate()?;
    if space.dims.len() != model.dim() {
        return Err(BayesOptError::DimensionMismatch {
            expected: model.dim(),
            got: space.dims.len(),
        });
    }
    if !(ucb.beta >= 0.0) {
        return Err(BayesOptError::InvalidConfig(format!("beta = {}", ucb.beta)));
    }
    let mut rng = rng_from_seed(rng_seed);
    if model.is_empty() {
        return Ok(space.sample(&mut rng));
    }
    let post = Posterior::fit(model)?;
    let root_beta = ucb.beta.sqrt();
    let score = |x: &[f64]| -> f64 {
        let z = model.normalization().input(x);
        match post.predict(model, &z) {
            Ok((m, v)) => m + root_beta * v.sqrt(),
            Err(_) => f64::NEG_INFINITY,
        }
    };

    let mut scored: Vec<(f64, Vec<f64>)> = Vec::new();
    let draws = ucb.candidate_count.max(1);
    for combo in space.choice_combinations() {
        for _ in 0..draws {
            let mut ci = combo.iter();
            let x: Vec<f64> = space
                .dims
                .iter()
                .map(|d| match *d {
                    Dim::Choice(n) => Dim::choice_coord(*ci.next().expect("one index per choice"), n),
                    Dim::Interval(lo, hi) => lo + (hi - lo) * rng.random::<f64>(),
                })
                .collect();
            scored.push((score(&x), x));
        }
    }
    // Observed points are candidates too, which matters when exploiting.
    for x in model.raw_inputs() {
        let x = space.snap(x);
        scored.push((score(&x), x));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.truncate(ucb.restarts.max(1));

    let mut best = scored[0].clone();
    for (s, x) in scored {
        let (s, x) = local_search(space, x, s, &score);
        if s > best.0 {
            best = (s, x);
        }
    }
    Ok(best.1)
}

/// Coordinate search on interval dimensions with a shrinking radius.
fn local_search(space: &ParamSpace, mut x: Vec<f64>, mut s: f64, score: &dyn Fn(&[f64]) -> f64) -> (f64, Vec<f64>) {
    let mut radius = LOCAL_SEARCH_RADIUS;
    for _ in 0..LOCAL_SEARCH_ROUNDS {
        let mut improved = false;
        for (d, dim) in space.dims.iter().enumerate() {
            if let Dim::Interval(lo, hi) = *dim {
                for sign in [-1.0, 1.0] {
                    let mut y = x.clone();
                    y[d] = (x[d] + sign * radius * (hi - lo)).clamp(lo, hi);
                    let v = score(&y);
                    if v > s {
                        s = v;
                        x = y;
                        improved = true;
                    }
                }
            }
        }
        if !improved {
            radius *= 0.5;
        }
    }
    (s, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayesopt::gp::{GammaPrior, HyperPriors};

    #[test]
    fn snapping_choices() {
        assert_eq!(Dim::snap_choice(0.0, 3), 0);
        assert_eq!(Dim::snap_choice(0.74, 3), 1);
        assert_eq!(Dim::snap_choice(0.76, 3), 2);
        assert_eq!(Dim::snap_choice(0.3, 1), 0);
    }

    #[test]
    fn empty_model_draws_inside_space() {
        let priors = HyperPriors::isotropic(2, GammaPrior { mean: 0.2, variance: 0.2 });
        let m = GPModel::from_priors(priors).unwrap();
        let space = ParamSpace {
            dims: vec![Dim::Interval(-2.0, 3.0), Dim::Choice(3)],
        };
        let x = ucb_propose(&m, &space, &UCBConfig::default(), 9).unwrap();
        assert!((-2.0..=3.0).contains(&x[0]));
        assert!([0.0, 0.5, 1.0].contains(&x[1]));
        assert_eq!(x, ucb_propose(&m, &space, &UCBConfig::default(), 9).unwrap());
    }

    #[test]
    fn empty_space_rejected() {
        let priors = HyperPriors::isotropic(1, GammaPrior { mean: 0.2, variance: 0.2 });
        let m = GPModel::from_priors(priors).unwrap();
        let space = ParamSpace { dims: vec![Dim::Choice(0)] };
        assert_eq!(ucb_propose(&m, &space, &UCBConfig::default(), 0), Err(BayesOptError::EmptySpace));
    }
}
