//! Gaussian-process regression with an ARD squared-exponential kernel,
//! Gamma hyperpriors and MAP hyperparameter fitting.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::neldermead::{minimize, NelderMeadOptions};
use super::BayesOptError;
use crate::rng::rng_from_seed;

const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];
/// Log-space box for the hyperparameter search.
const LOG_BOUNDS: (f64, f64) = (-18.0, 8.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GPHyperparams {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    pub noise_variance: f64,
}

impl GPHyperparams {
    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn to_log(&self) -> Vec<f64> {
        std::iter::once(self.signal_variance)
            .chain(self.lengthscales.iter().copied())
            .chain(std::iter::once(self.noise_variance))
            .map(f64::ln)
            .collect()
    }

    fn from_log(u: &[f64]) -> Self {
        let n = u.len();
        Self {
            signal_variance: u[0].exp(),
            lengthscales: u[1..n - 1].iter().map(|v| v.exp()).collect(),
            noise_variance: u[n - 1].exp(),
        }
    }
}

/// Gamma distribution given by mean and variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub mean: f64,
    pub variance: f64,
}

impl GammaPrior {
    pub fn new(mean: f64, variance: f64) -> Result<Self, BayesOptError> {
        if !(mean > 0.0 && variance > 0.0) {
            return Err(BayesOptError::InvalidPrior { mean, variance });
        }
        Ok(Self { mean, variance })
    }

    pub fn shape(&self) -> f64 {
        self.mean * self.mean / self.variance
    }

    pub fn scale(&self) -> f64 {
        self.variance / self.mean
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let k = self.shape();
        let theta = self.scale();
        (k - 1.0) * x.ln() - x / theta - libm::lgamma(k) - k * theta.ln()
    }
}

/// Priors for every hyperparameter, in the order of [`GPHyperparams`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperPriors {
    pub signal_variance: GammaPrior,
    pub lengthscales: Vec<GammaPrior>,
    pub noise_variance: GammaPrior,
}

impl HyperPriors {
    fn g(mean: f64, variance: f64) -> GammaPrior {
        GammaPrior { mean, variance }
    }

    /// Grid-world teacher with two switches (seven lengthscales).
    pub fn frozen_lake() -> Self {
        Self {
            signal_variance: Self::g(1.0, 0.2),
            lengthscales: vec![
                Self::g(1.0, 1.0),
                Self::g(0.05, 0.02),
                Self::g(1.0, 1.0),
                Self::g(0.05, 0.02),
                Self::g(0.2, 0.2),
                Self::g(0.2, 0.2),
                Self::g(0.2, 0.2),
            ],
            noise_variance: Self::g(0.01, 0.1),
        }
    }

    /// Lander teacher with one switch (four lengthscales).
    pub fn lander() -> Self {
        Self {
            signal_variance: Self::g(1.0, 0.2),
            lengthscales: vec![
                Self::g(20.0, 4.0),
                Self::g(1.0, 0.3),
                Self::g(0.2, 0.2),
                Self::g(0.2, 0.2),
            ],
            noise_variance: Self::g(0.01, 0.1),
        }
    }

    /// Same prior on every lengthscale.
    pub fn isotropic(dim: usize, lengthscale: GammaPrior) -> Self {
        Self {
            signal_variance: Self::g(1.0, 0.2),
            lengthscales: vec![lengthscale; dim],
            noise_variance: Self::g(0.01, 0.1),
        }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn means(&self) -> GPHyperparams {
        GPHyperparams {
            signal_variance: self.signal_variance.mean,
            lengthscales: self.lengthscales.iter().map(|p| p.mean).collect(),
            noise_variance: self.noise_variance.mean,
        }
    }

    pub fn validate(&self) -> Result<(), BayesOptError> {
        for p in std::iter::once(&self.signal_variance)
            .chain(&self.lengthscales)
            .chain(std::iter::once(&self.noise_variance))
        {
            GammaPrior::new(p.mean, p.variance)?;
        }
        Ok(())
    }

    fn ln_density(&self, h: &GPHyperparams) -> f64 {
        self.signal_variance.ln_pdf(h.signal_variance)
            + self.lengthscales.iter().zip(&h.lengthscales).map(|(p, l)| p.ln_pdf(*l)).sum::<f64>()
            + self.noise_variance.ln_pdf(h.noise_variance)
    }
}

/// `sigma_f^2 * exp(-0.5 * sum_d ((x1_d - x2_d) / l_d)^2)`.
pub fn kernel_rbf_ard(x1: &[f64], x2: &[f64], hyper: &GPHyperparams) -> Result<f64, BayesOptError> {
    if x1.len() != hyper.dim() || x2.len() != hyper.dim() {
        return Err(BayesOptError::DimensionMismatch {
            expected: hyper.dim(),
            got: x1.len().max(x2.len()),
        });
    }
    Ok(kernel(x1, x2, hyper))
}

fn kernel(x1: &[f64], x2: &[f64], hyper: &GPHyperparams) -> f64 {
    let mut d2 = 0.0;
    for ((a, b), l) in x1.iter().zip(x2).zip(&hyper.lengthscales) {
        let z = (a - b) / l;
        d2 += z * z;
    }
    hyper.signal_variance * (-0.5 * d2).exp()
}

/// Per-dimension input bounds and target moments used to rescale data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_min: Vec<f64>,
    pub input_max: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Self {
            input_min: vec![0.0; dim],
            input_max: vec![1.0; dim],
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    fn from_data(inputs: &[Vec<f64>], targets: &[f64], dim: usize) -> Self {
        let mut input_min = vec![f64::INFINITY; dim];
        let mut input_max = vec![f64::NEG_INFINITY; dim];
        for x in inputs {
            for d in 0..dim {
                input_min[d] = input_min[d].min(x[d]);
                input_max[d] = input_max[d].max(x[d]);
            }
        }
        if inputs.is_empty() {
            input_min = vec![0.0; dim];
            input_max = vec![1.0; dim];
        }
        let n = targets.len().max(1) as f64;
        let target_mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|y| (y - target_mean).powi(2)).sum::<f64>() / n;
        let target_std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        Self {
            input_min,
            input_max,
            target_mean,
            target_std,
        }
    }

    /// Dimensions without spread map to 0.
    pub fn input(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.input_min.iter().zip(&self.input_max))
            .map(|(v, (lo, hi))| if hi > lo { (v - lo) / (hi - lo) } else { v - lo })
            .collect()
    }

    pub fn input_inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.input_min.iter().zip(&self.input_max))
            .map(|(v, (lo, hi))| if hi > lo { lo + v * (hi - lo) } else { lo + v })
            .collect()
    }

    pub fn target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    pub fn target_inverse(&self, z: f64) -> f64 {
        self.target_mean + z * self.target_std
    }
}

/// Observed data, hyperparameters and priors.
///
/// Raw data is kept alongside its normalized image; the normalization is
/// recomputed whenever data is added.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GPModel {
    dim: usize,
    raw_inputs: Vec<Vec<f64>>,
    raw_targets: Vec<f64>,
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    pub hyper: GPHyperparams,
    pub priors: HyperPriors,
    normalization: Normalization,
    normalize: bool,
}

impl GPModel {
    pub fn new(hyper: GPHyperparams, priors: HyperPriors) -> Result<Self, BayesOptError> {
        if hyper.dim() != priors.dim() {
            return Err(BayesOptError::DimensionMismatch {
                expected: priors.dim(),
                got: hyper.dim(),
            });
        }
        let dim = hyper.dim();
        Ok(Self {
            dim,
            raw_inputs: Vec::new(),
            raw_targets: Vec::new(),
            inputs: Vec::new(),
            targets: Vec::new(),
            hyper,
            priors,
            normalization: Normalization::identity(dim),
            normalize: true,
        })
    }

    /// Model starting from the prior means.
    pub fn from_priors(priors: HyperPriors) -> Result<Self, BayesOptError> {
        priors.validate()?;
        Self::new(priors.means(), priors)
    }

    /// Keeps data in raw units; used by closed-form checks.
    pub fn without_normalization(mut self) -> Self {
        self.normalize = false;
        self.normalization = Normalization::identity(self.dim);
        self.inputs = self.raw_inputs.clone();
        self.targets = self.raw_targets.clone();
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.raw_targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_targets.is_empty()
    }

    pub fn raw_inputs(&self) -> &[Vec<f64>] {
        &self.raw_inputs
    }

    pub fn raw_targets(&self) -> &[f64] {
        &self.raw_targets
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn add(&mut self, x: Vec<f64>, y: f64) -> Result<(), BayesOptError> {
        if x.len() != self.dim {
            return Err(BayesOptError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(BayesOptError::NonFinite);
        }
        self.raw_inputs.push(x);
        self.raw_targets.push(y);
        *self = normalize_dataset(self);
        Ok(())
    }

    /// Posterior mean and variance at a normalized query.
    pub fn posterior_normalized(&self, z: &[f64]) -> Result<(f64, f64), BayesOptError> {
        let post = Posterior::fit(self)?;
        post.predict(self, z)
    }
}

/// Rescales inputs to `[0, 1]` per dimension and standardizes targets.
///
/// A single point maps to the zero vector with target 0.
pub fn normalize_dataset(model: &GPModel) -> GPModel {
    let mut out = model.clone();
    if !model.normalize {
        out.inputs = model.raw_inputs.clone();
        out.targets = model.raw_targets.clone();
        return out;
    }
    let norm = Normalization::from_data(&model.raw_inputs, &model.raw_targets, model.dim);
    out.inputs = model.raw_inputs.iter().map(|x| norm.input(x)).collect();
    out.targets = model.raw_targets.iter().map(|y| norm.target(*y)).collect();
    out.normalization = norm;
    out
}

/// Cached factorization of `K + sigma_n^2 I`.
pub(crate) struct Posterior {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

impl Posterior {
    pub(crate) fn fit(model: &GPModel) -> Result<Self, BayesOptError> {
        let (chol, _) = factor(&model.inputs, &model.hyper)?;
        let y = DVector::from_column_slice(&model.targets);
        let alpha = chol.solve(&y);
        Ok(Self { chol, alpha })
    }

    pub(crate) fn predict(&self, model: &GPModel, z: &[f64]) -> Result<(f64, f64), BayesOptError> {
        if model.inputs.is_empty() {
            return Ok((0.0, model.hyper.signal_variance));
        }
        let k_star = DVector::from_iterator(model.inputs.len(), model.inputs.iter().map(|x| kernel(x, z, &model.hyper)));
        let mean = k_star.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&k_star).expect("cholesky factor is invertible");
        let var = kernel(z, z, &model.hyper) - v.dot(&v);
        if var < -1e-10 {
            return Err(BayesOptError::NegativeVariance(var));
        }
        Ok((mean, var.max(0.0)))
    }
}

fn factor(inputs: &[Vec<f64>], hyper: &GPHyperparams) -> Result<(Cholesky<f64, Dyn>, f64), BayesOptError> {
    let n = inputs.len();
    let mut k = DMatrix::from_fn(n, n, |i, j| kernel(&inputs[i], &inputs[j], hyper));
    for i in 0..n {
        k[(i, i)] += hyper.noise_variance;
    }
    if let Some(c) = Cholesky::new(k.clone()) {
        return Ok((c, 0.0));
    }
    for jitter in JITTER_LADDER {
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(kj) {
            return Ok((c, jitter));
        }
    }
    Err(BayesOptError::SingularKernel)
}

/// Posterior mean and variance at a raw query, in raw target units.
pub fn gp_posterior(model: &GPModel, query: &[f64]) -> Result<(f64, f64), BayesOptError> {
    if query.len() != model.dim {
        return Err(BayesOptError::DimensionMismatch {
            expected: model.dim,
            got: query.len(),
        });
    }
    let z = model.normalization.input(query);
    let (m, v) = model.posterior_normalized(&z)?;
    let s = model.normalization.target_std;
    Ok((model.normalization.target_inverse(m), v * s * s))
}

/// Log marginal likelihood of the normalized data.
pub fn log_marginal_likelihood(model: &GPModel, hyper: &GPHyperparams) -> Result<f64, BayesOptError> {
    let n = model.inputs.len();
    let (chol, _) = factor(&model.inputs, hyper)?;
    let y = DVector::from_column_slice(&model.targets);
    let alpha = chol.solve(&y);
    let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    Ok(-0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Log posterior of the hyperparameters up to a constant.
pub fn log_posterior(model: &GPModel, hyper: &GPHyperparams) -> f64 {
    match log_marginal_likelihood(model, hyper) {
        Ok(l) => l + model.priors.ln_density(hyper),
        Err(_) => f64::NEG_INFINITY,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapFitConfig {
    /// Extra starts drawn from the priors besides the current values and the prior means.
    pub random_starts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for MapFitConfig {
    fn default() -> Self {
        Self {
            random_starts: 4,
            max_iters: 1500,
            seed: 0,
        }
    }
}

/// Outcome of a MAP fit. `fallback` marks a failed search that returned the
/// prior means.
#[derive(Clone, Debug, PartialEq)]
pub struct MapFit {
    pub hyper: GPHyperparams,
    pub log_posterior: f64,
    pub fallback: bool,
}

/// Maximizes the hyperparameter posterior with multi-start Nelder-Mead in
/// log space. The result is never worse than the model's current values.
pub fn map_fit(model: &GPModel, config: &MapFitConfig) -> Result<MapFit, BayesOptError> {
    if model.len() < 2 {
        return Err(BayesOptError::TooFewPoints(model.len()));
    }
    let mut objective = |u: &[f64]| -> f64 {
        if u.iter().any(|v| *v < LOG_BOUNDS.0 || *v > LOG_BOUNDS.1) {
            return f64::INFINITY;
        }
        -log_posterior(model, &GPHyperparams::from_log(u))
    };
    let mut starts = vec![model.hyper.to_log(), model.priors.means().to_log()];
    let mut rng = rng_from_seed(config.seed);
    for _ in 0..config.random_starts {
        let jitter: Vec<f64> = starts[1].iter().map(|u| u + rng.random_range(-1.0..1.0)).collect();
        starts.push(jitter);
    }
    let mut best_u = starts[0].clone();
    let mut best_v = objective(&best_u);
    let opts = NelderMeadOptions {
        initial_step: 0.5,
        max_iters: config.max_iters,
        f_tol: 1e-10,
    };
    for s in &starts {
        let (u, v) = minimize(&mut objective, s, opts);
        if v < best_v {
            best_u = u;
            best_v = v;
        }
    }
    if !best_v.is_finite() {
        let hyper = model.priors.means();
        let lp = log_posterior(model, &hyper);
        return Ok(MapFit {
            hyper,
            log_posterior: lp,
            fallback: true,
        });
    }
    Ok(MapFit {
        hyper: GPHyperparams::from_log(&best_u),
        log_posterior: -best_v,
        fallback: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper(sf: f64, ls: &[f64], sn: f64) -> GPHyperparams {
        GPHyperparams {
            signal_variance: sf,
            lengthscales: ls.to_vec(),
            noise_variance: sn,
        }
    }

    #[test]
    fn kernel_values() {
        let h = hyper(1.0, &[1.0, 2.0], 0.0);
        assert_eq!(kernel_rbf_ard(&[0.3, 0.1], &[0.3, 0.1], &h).unwrap(), 1.0);
        let k = kernel_rbf_ard(&[0.0, 0.0], &[1.0, 2.0], &h).unwrap();
        assert!((k - (-1.0f64).exp()).abs() < 1e-15);
        assert!(kernel_rbf_ard(&[0.0], &[1.0, 2.0], &h).is_err());
        let mut prev = 1.0;
        for d in [0.5, 1.0, 4.0, 16.0, 64.0] {
            let k = kernel_rbf_ard(&[0.0, 0.0], &[d, 0.0], &h).unwrap();
            assert!(k < prev);
            prev = k;
        }
        assert!(prev < 1e-300);
    }

    #[test]
    fn empty_model_returns_prior() {
        let m = GPModel::from_priors(HyperPriors::isotropic(2, GammaPrior { mean: 0.2, variance: 0.2 })).unwrap();
        assert_eq!(gp_posterior(&m, &[0.4, 0.9]).unwrap(), (0.0, 1.0));
    }

    #[test]
    fn single_noise_free_datum_interpolates() {
        let priors = HyperPriors::isotropic(1, GammaPrior { mean: 0.2, variance: 0.2 });
        let mut m = GPModel::new(hyper(1.0, &[0.3], 0.0), priors).unwrap();
        m.add(vec![0.7], 3.25).unwrap();
        let (mean, var) = gp_posterior(&m, &[0.7]).unwrap();
        assert_eq!(mean, 3.25);
        assert!(var.abs() < 1e-15);
    }

    #[test]
    fn normalization_conventions() {
        let priors = HyperPriors::isotropic(2, GammaPrior { mean: 0.2, variance: 0.2 });
        let mut m = GPModel::from_priors(priors).unwrap();
        m.add(vec![3.0, -1.0], 5.0).unwrap();
        assert_eq!(m.inputs()[0], vec![0.0, 0.0]);
        assert_eq!(m.targets()[0], 0.0);
        m.add(vec![4.0, -1.0], 7.0).unwrap();
        assert_eq!(m.inputs()[1], vec![1.0, 0.0]);
        let n = m.normalization();
        let x = [3.3, -1.0];
        let back = n.input_inverse(&n.input(&x));
        assert!(back.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn gamma_shape_scale() {
        let p = GammaPrior::new(0.05, 0.02).unwrap();
        assert!((p.shape() * p.scale() - 0.05).abs() < 1e-12);
        assert!((p.shape() * p.scale() * p.scale() - 0.02).abs() < 1e-12);
        assert!(GammaPrior::new(0.0, 1.0).is_err());
    }

    #[test]
    fn map_fit_not_worse_than_start() {
        let priors = HyperPriors::isotropic(1, GammaPrior { mean: 0.2, variance: 0.2 });
        let mut m = GPModel::from_priors(priors).unwrap();
        for i in 0..6 {
            let x = i as f64 / 5.0;
            m.add(vec![x], (6.0 * x).sin()).unwrap();
        }
        let start = log_posterior(&m, &m.hyper);
        let fit = map_fit(&m, &MapFitConfig::default()).unwrap();
        assert!(!fit.fallback);
        assert!(fit.log_posterior >= start);
    }
}
