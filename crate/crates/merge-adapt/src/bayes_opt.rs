//! Bayesian optimization of merge coefficients with a Gaussian-process
//! surrogate and expected improvement.
//!
//! The surrogate is a zero-mean GP with a Matern 5/2 kernel. Observation
//! counts stay small (tens of points), so the Gram matrix is factored with a
//! dense Cholesky decomposition and hyperparameters are refit each round by
//! scanning a fixed log-spaced grid for the best marginal likelihood.
//! Proposals maximize expected improvement over a quasi-random candidate set
//! followed by coordinate-wise golden-section refinement of the best starts.
//!
//! [`optimize`] and [`random_search`] consume the same budget and emit the
//! same [`BoTrace`] shape so downstream comparisons are like for like.

use crate::pim_objective::ObjectiveValue;
use crate::special::{normal_cdf, normal_pdf};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_N_INIT: usize = 10;
pub const DEFAULT_N_ITER: usize = 30;
pub const DEFAULT_XI: f64 = 0.01;
pub const DEFAULT_N_CANDIDATES: usize = 4096;
pub const DEFAULT_N_RESTARTS: usize = 8;

/// First jitter added to the Gram diagonal; escalates tenfold per retry.
pub const JITTER_FLOOR: f64 = 1e-8;
/// Largest jitter tried before giving up on the factorization.
pub const JITTER_CEILING: f64 = 1e-2;

/// Hyperparameter grid scanned on every refit: 8 length scales by 4 signal
/// variances, both log-spaced.
pub const LENGTH_SCALE_RANGE: (f64, f64) = (0.05, 5.0);
pub const SIGNAL_VAR_RANGE: (f64, f64) = (0.01, 100.0);
pub const N_LENGTH_SCALES: usize = 8;
pub const N_SIGNAL_VARS: usize = 4;

/// Bases for the Halton candidate sequence; caps the search dimension.
const HALTON_PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

#[derive(Debug, Error)]
pub enum BoError {
    #[error("bound {index} is invalid: ({lo}, {hi})")]
    InvalidBounds { index: usize, lo: f64, hi: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("model has no observations")]
    EmptyModel,
    #[error("observation {index} has {got} coordinates, expected {want}")]
    ObservationShape { index: usize, got: usize, want: usize },
    #[error("observation value {index} is not finite")]
    NonFiniteValue { index: usize },
    #[error("query has {got} coordinates, expected {want}")]
    QueryShape { got: usize, want: usize },
    #[error("kernel hyperparameters must be finite and positive: l={length_scale}, s2={signal_var}")]
    BadHyperparameters { length_scale: f64, signal_var: f64 },
    #[error("Gram matrix is not positive definite even with jitter {max_jitter}")]
    IllConditioned { max_jitter: f64 },
    #[error("objective evaluation failed after {completed} evaluations: {message}")]
    ObjectiveFailed {
        message: String,
        completed: usize,
        partial: Box<BoTrace>,
    },
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

/// Matern 5/2 covariance between two points.
///
/// k(a, b) = s2 * (1 + t + t^2/3) * exp(-t) with t = sqrt(5) * d / l and
/// d the Euclidean distance. At d = 0 this is exactly `signal_var`.
pub fn kernel_matern25(a: &[f64], b: &[f64], length_scale: f64, signal_var: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let d2: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let t = 5f64.sqrt() * d2.sqrt() / length_scale;
    signal_var * (1.0 + t + t * t / 3.0) * (-t).exp()
}

/// Closed-form expected improvement of a Gaussian posterior over the
/// incumbent `f_best`, with exploration margin `xi`.
///
/// EI = (mean - f_best - xi) * Phi(z) + sigma * phi(z), z = (mean - f_best - xi) / sigma.
/// Degenerates to max(mean - f_best - xi, 0) when sigma = 0. Never negative.
pub fn expected_improvement(mean: f64, variance: f64, f_best: f64, xi: f64) -> f64 {
    let imp = mean - f_best - xi;
    let sigma = variance.max(0.0).sqrt();
    if sigma == 0.0 {
        return imp.max(0.0);
    }
    let z = imp / sigma;
    (imp * normal_cdf(z) + sigma * normal_pdf(z)).max(0.0)
}

/// Zero-mean GP posterior conditioned on a fixed set of observations.
///
/// Holds the Cholesky factor of the jittered Gram matrix and the
/// precomputed weight vector, so posterior queries cost O(n^2).
#[derive(Debug, Clone)]
pub struct GpModel {
    points: Vec<Vec<f64>>,
    values: Vec<f64>,
    length_scale: f64,
    signal_var: f64,
    jitter: f64,
    chol: Array2<f64>,
    alpha: Array1<f64>,
}

impl GpModel {
    /// Condition a GP with the given kernel hyperparameters on observations.
    ///
    /// The Gram matrix gets `JITTER_FLOOR` added to its diagonal; if the
    /// Cholesky factorization fails the jitter escalates tenfold up to
    /// `JITTER_CEILING` before reporting the matrix as ill-conditioned.
    pub fn fit(
        points: Vec<Vec<f64>>,
        values: Vec<f64>,
        length_scale: f64,
        signal_var: f64,
    ) -> Result<Self, BoError> {
        if points.is_empty() {
            return Err(BoError::EmptyModel);
        }
        if points.len() != values.len() {
            return Err(BoError::InvalidConfig(format!(
                "{} points but {} values",
                points.len(),
                values.len()
            )));
        }
        let dim = points[0].len();
        for (index, p) in points.iter().enumerate() {
            if p.len() != dim || dim == 0 {
                return Err(BoError::ObservationShape {
                    index,
                    got: p.len(),
                    want: dim,
                });
            }
            if !p.iter().all(|x| x.is_finite()) {
                return Err(BoError::NonFiniteValue { index });
            }
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(BoError::NonFiniteValue { index });
        }
        if !(length_scale.is_finite() && length_scale > 0.0)
            || !(signal_var.is_finite() && signal_var > 0.0)
        {
            return Err(BoError::BadHyperparameters {
                length_scale,
                signal_var,
            });
        }

        let n = points.len();
        let mut gram = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let k = kernel_matern25(&points[i], &points[j], length_scale, signal_var);
                gram[(i, j)] = k;
                gram[(j, i)] = k;
            }
        }

        let mut jitter = JITTER_FLOOR;
        loop {
            let mut k = gram.clone();
            for i in 0..n {
                k[(i, i)] += jitter;
            }
            if let Some(chol) = cholesky_lower(&k) {
                let y = Array1::from(values.clone());
                let z = forward_solve(&chol, &y);
                let alpha = backward_solve_transposed(&chol, &z);
                return Ok(GpModel {
                    points,
                    values,
                    length_scale,
                    signal_var,
                    jitter,
                    chol,
                    alpha,
                });
            }
            if jitter >= JITTER_CEILING {
                return Err(BoError::IllConditioned {
                    max_jitter: JITTER_CEILING,
                });
            }
            jitter *= 10.0;
        }
    }

    /// Condition on observations, choosing hyperparameters by the largest log
    /// marginal likelihood over the fixed grid. Grid cells whose Gram matrix
    /// cannot be factored are skipped; ties keep the earliest cell.
    pub fn fit_grid(points: &[Vec<f64>], values: &[f64]) -> Result<Self, BoError> {
        let mut best: Option<(f64, GpModel)> = None;
        let mut last_err = BoError::EmptyModel;
        for length_scale in log_spaced(LENGTH_SCALE_RANGE, N_LENGTH_SCALES) {
            for signal_var in log_spaced(SIGNAL_VAR_RANGE, N_SIGNAL_VARS) {
                match GpModel::fit(points.to_vec(), values.to_vec(), length_scale, signal_var) {
                    Ok(model) => {
                        let lml = model.log_marginal_likelihood();
                        if best.as_ref().is_none_or(|(b, _)| lml > *b) {
                            best = Some((lml, model));
                        }
                    }
                    Err(e) => last_err = e,
                }
            }
        }
        match best {
            Some((_, model)) => Ok(model),
            None => Err(last_err),
        }
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn n_observations(&self) -> usize {
        self.points.len()
    }

    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }

    pub fn signal_var(&self) -> f64 {
        self.signal_var
    }

    /// Jitter that was actually added to the Gram diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Largest observed value.
    pub fn best_observed(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Posterior mean and variance at a query point. The variance is clamped
    /// at zero; at an observed point it is bounded by the jitter.
    pub fn posterior(&self, query: &[f64]) -> Result<(f64, f64), BoError> {
        if query.len() != self.dim() {
            return Err(BoError::QueryShape {
                got: query.len(),
                want: self.dim(),
            });
        }
        Ok(self.posterior_unchecked(query))
    }

    fn posterior_unchecked(&self, query: &[f64]) -> (f64, f64) {
        let kstar = Array1::from_iter(
            self.points
                .iter()
                .map(|p| kernel_matern25(p, query, self.length_scale, self.signal_var)),
        );
        let mean = kstar.dot(&self.alpha);
        let v = forward_solve(&self.chol, &kstar);
        let var = (self.signal_var - v.dot(&v)).max(0.0);
        (mean, var)
    }

    /// Log marginal likelihood of the observations under the fitted kernel:
    /// -1/2 y' K^-1 y - sum(ln L_ii) - n/2 ln(2 pi).
    pub fn log_marginal_likelihood(&self) -> f64 {
        let y = Array1::from(self.values.clone());
        let n = self.values.len() as f64;
        let log_det_half: f64 = (0..self.values.len())
            .map(|i| self.chol[(i, i)].ln())
            .sum();
        -0.5 * y.dot(&self.alpha) - log_det_half - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Dense lower Cholesky factor, or None if the matrix is not numerically
/// positive definite.
fn cholesky_lower(k: &Array2<f64>) -> Option<Array2<f64>> {
    let n = k.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = k[(i, j)];
            for t in 0..j {
                sum -= l[(i, t)] * l[(j, t)];
            }
            if i == j {
                if !(sum.is_finite() && sum > 0.0) {
                    return None;
                }
                l[(i, i)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Solves L z = b for lower-triangular L.
fn forward_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = b.len();
    let mut z = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for j in 0..i {
            sum -= l[(i, j)] * z[j];
        }
        z[i] = sum / l[(i, i)];
    }
    z
}

/// Solves L' x = z for lower-triangular L.
fn backward_solve_transposed(l: &Array2<f64>, z: &Array1<f64>) -> Array1<f64> {
    let n = z.len();
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut sum = z[i];
        for j in i + 1..n {
            sum -= l[(j, i)] * x[j];
        }
        x[i] = sum / l[(i, i)];
    }
    x
}

fn log_spaced(range: (f64, f64), n: usize) -> Vec<f64> {
    let (lo, hi) = range;
    if n == 1 {
        return vec![lo];
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (llo + (lhi - llo) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Search-space and budget configuration shared by [`optimize`] and
/// [`random_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    /// Per-coordinate closed intervals; every evaluated point stays inside.
    pub bounds: Vec<(f64, f64)>,
    /// Uniform probes evaluated before the surrogate is consulted.
    pub n_init: usize,
    /// Surrogate-guided rounds after the probes.
    pub n_iter: usize,
    /// Exploration margin subtracted from the improvement.
    pub xi: f64,
    pub seed: u64,
    /// Quasi-random candidates scored per proposal.
    pub n_candidates: usize,
    /// Top candidates refined by golden-section ascent.
    pub n_restarts: usize,
}

impl BoConfig {
    /// Defaults over the unit box [0, 1]^dim.
    pub fn unit_box(dim: usize) -> Self {
        BoConfig {
            bounds: vec![(0.0, 1.0); dim],
            n_init: DEFAULT_N_INIT,
            n_iter: DEFAULT_N_ITER,
            xi: DEFAULT_XI,
            seed: 0,
            n_candidates: DEFAULT_N_CANDIDATES,
            n_restarts: DEFAULT_N_RESTARTS,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_budget(mut self, n_init: usize, n_iter: usize) -> Self {
        self.n_init = n_init;
        self.n_iter = n_iter;
        self
    }

    pub fn validate(&self) -> Result<(), BoError> {
        if self.bounds.is_empty() {
            return Err(BoError::InvalidConfig("empty bounds".into()));
        }
        if self.bounds.len() > HALTON_PRIMES.len() {
            return Err(BoError::InvalidConfig(format!(
                "dimension {} exceeds the supported maximum {}",
                self.bounds.len(),
                HALTON_PRIMES.len()
            )));
        }
        for (index, &(lo, hi)) in self.bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(BoError::InvalidBounds { index, lo, hi });
            }
        }
        if self.n_init == 0 {
            return Err(BoError::InvalidConfig("n_init must be at least 1".into()));
        }
        if !(self.xi.is_finite() && self.xi >= 0.0) {
            return Err(BoError::InvalidConfig(format!(
                "xi must be finite and nonnegative, got {}",
                self.xi
            )));
        }
        if self.n_candidates == 0 || self.n_restarts == 0 {
            return Err(BoError::InvalidConfig(
                "n_candidates and n_restarts must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Posterior summary recorded in the trace before a point was evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub mean: f64,
    pub var: f64,
}

/// One evaluation: where, what came back, what the surrogate predicted
/// beforehand (None for uniform probes), and the running best.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub lambda: Vec<f64>,
    pub objective: ObjectiveValue,
    pub posterior: Option<Posterior>,
    pub best: f64,
}

/// Full evaluation history of one optimization run.
///
/// `lambda_star` is the earliest point attaining the maximum total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoTrace {
    pub config: BoConfig,
    pub iterations: Vec<IterationRecord>,
    pub lambda_star: Vec<f64>,
}

impl BoTrace {
    pub fn to_json(&self) -> Result<String, BoError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, BoError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Largest objective total seen, if anything was evaluated.
    pub fn best_value(&self) -> Option<f64> {
        self.iterations.last().map(|r| r.best)
    }
}

/// Running state shared by the two search loops.
struct SearchState {
    trace: BoTrace,
    points: Vec<Vec<f64>>,
    values: Vec<f64>,
    best_value: f64,
    best_lambda: Vec<f64>,
}

impl SearchState {
    fn new(config: BoConfig) -> Self {
        SearchState {
            trace: BoTrace {
                config,
                iterations: Vec::new(),
                lambda_star: Vec::new(),
            },
            points: Vec::new(),
            values: Vec::new(),
            best_value: f64::NEG_INFINITY,
            best_lambda: Vec::new(),
        }
    }

    /// Evaluates the objective at `lambda` and appends to the trace.
    /// Strict improvement updates the incumbent, so exact ties keep the
    /// earliest point. An objective error aborts with the partial trace.
    fn evaluate<F>(
        &mut self,
        objective: &mut F,
        lambda: Vec<f64>,
        posterior: Option<Posterior>,
    ) -> Result<(), BoError>
    where
        F: FnMut(&[f64]) -> Result<ObjectiveValue, String>,
    {
        let completed = self.trace.iterations.len();
        let fail = |message: String, state: &SearchState| BoError::ObjectiveFailed {
            message,
            completed,
            partial: Box::new(state.sealed_trace()),
        };
        let value = match objective(&lambda) {
            Ok(v) => v,
            Err(message) => return Err(fail(message, self)),
        };
        if !value.total.is_finite() {
            return Err(fail(
                format!("non-finite objective total {}", value.total),
                self,
            ));
        }
        if value.total > self.best_value {
            self.best_value = value.total;
            self.best_lambda = lambda.clone();
        }
        self.points.push(lambda.clone());
        self.values.push(value.total);
        self.trace.iterations.push(IterationRecord {
            lambda,
            objective: value,
            posterior,
            best: self.best_value,
        });
        Ok(())
    }

    fn sealed_trace(&self) -> BoTrace {
        let mut trace = self.trace.clone();
        trace.lambda_star = self.best_lambda.clone();
        trace
    }
}

fn sample_uniform(rng: &mut ChaCha8Rng, bounds: &[(f64, f64)]) -> Vec<f64> {
    bounds
        .iter()
        .map(|&(lo, hi)| lo + rng.random::<f64>() * (hi - lo))
        .collect()
}

/// Van der Corput radical inverse of `index` in the given base.
fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut result = 0.0;
    while index > 0 {
        result += f * (index % base) as f64;
        index /= base;
        f *= inv;
    }
    result
}

/// Golden-section ascent of a unimodal slice on [lo, hi].
/// Returns the located abscissa and its value.
fn golden_section_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let tol = (hi - lo) * 1e-10;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    (mid, f(mid))
}

/// Point with the highest expected improvement under the model.
///
/// Scores `n_candidates` Halton points (shifted by a rotation derived from
/// the seed and the observation count, so successive rounds scan different
/// candidates while remaining reproducible), then refines the `n_restarts`
/// best by two coordinate-wise golden-section sweeps. A refinement step is
/// kept only if it improves EI, so the result is never worse than the best
/// raw candidate. The returned point always lies inside the bounds.
pub fn propose_next(model: &GpModel, config: &BoConfig) -> Result<Vec<f64>, BoError> {
    config.validate()?;
    let dim = config.bounds.len();
    if model.dim() != dim {
        return Err(BoError::QueryShape {
            got: model.dim(),
            want: dim,
        });
    }
    let f_best = model.best_observed();
    let ei_at = |x: &[f64]| {
        let (mean, var) = model.posterior_unchecked(x);
        expected_improvement(mean, var, f_best, config.xi)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(
        config
            .seed
            .wrapping_add((model.n_observations() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    );
    let shift: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();

    let mut candidates = Vec::with_capacity(config.n_candidates);
    for i in 0..config.n_candidates {
        let point: Vec<f64> = (0..dim)
            .map(|j| {
                let u = (radical_inverse(i as u64 + 1, HALTON_PRIMES[j]) + shift[j]).fract();
                let (lo, hi) = config.bounds[j];
                lo + u * (hi - lo)
            })
            .collect();
        let ei = ei_at(&point);
        candidates.push((ei, point));
    }

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].0.total_cmp(&candidates[a].0).then(a.cmp(&b)));

    let (mut best_ei, mut best_point) = {
        let (ei, point) = &candidates[order[0]];
        (*ei, point.clone())
    };
    for &idx in order.iter().take(config.n_restarts.min(order.len())) {
        let mut x = candidates[idx].1.clone();
        let mut cur = candidates[idx].0;
        for _ in 0..2 {
            for c in 0..dim {
                let (lo, hi) = config.bounds[c];
                let slice = |t: f64| {
                    let mut probe = x.clone();
                    probe[c] = t;
                    ei_at(&probe)
                };
                let (t, v) = golden_section_max(slice, lo, hi);
                if v > cur {
                    x[c] = t.clamp(lo, hi);
                    cur = v;
                }
            }
        }
        if cur > best_ei {
            best_ei = cur;
            best_point = x;
        }
    }
    Ok(best_point)
}

/// GP-guided maximization of a black-box objective.
///
/// Evaluates `n_init` uniform probes, then runs `n_iter` rounds of: refit the
/// surrogate on everything seen (hyperparameters rechosen by marginal
/// likelihood), propose the EI maximizer, record its posterior, evaluate.
/// Deterministic for a fixed config. An objective error aborts the run and
/// the error carries the trace of the completed evaluations.
pub fn optimize<F>(mut objective: F, config: &BoConfig) -> Result<BoTrace, BoError>
where
    F: FnMut(&[f64]) -> Result<ObjectiveValue, String>,
{
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = SearchState::new(config.clone());

    for _ in 0..config.n_init {
        let lambda = sample_uniform(&mut rng, &config.bounds);
        state.evaluate(&mut objective, lambda, None)?;
    }
    for _ in 0..config.n_iter {
        let model = GpModel::fit_grid(&state.points, &state.values)?;
        let lambda = propose_next(&model, config)?;
        let (mean, var) = model.posterior(&lambda)?;
        state.evaluate(&mut objective, lambda, Some(Posterior { mean, var }))?;
    }
    Ok(state.sealed_trace())
}

/// Uniform random search with the same budget and trace shape as
/// [`optimize`]; the baseline it must be compared against.
pub fn random_search<F>(mut objective: F, config: &BoConfig) -> Result<BoTrace, BoError>
where
    F: FnMut(&[f64]) -> Result<ObjectiveValue, String>,
{
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = SearchState::new(config.clone());
    for _ in 0..config.n_init + config.n_iter {
        let lambda = sample_uniform(&mut rng, &config.bounds);
        state.evaluate(&mut objective, lambda, None)?;
    }
    Ok(state.sealed_trace())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::StandardNormal;

    fn scalar_objective(
        f: impl Fn(&[f64]) -> f64,
    ) -> impl FnMut(&[f64]) -> Result<ObjectiveValue, String> {
        move |x| Ok(ObjectiveValue::scalar(f(x)))
    }

    #[test]
    fn kernel_is_signal_variance_at_zero_distance() {
        let a = [0.3, -1.2, 7.0];
        assert_eq!(kernel_matern25(&a, &a, 0.7, 2.5), 2.5);
        assert_eq!(kernel_matern25(&a, &a, 0.01, 1e-3), 1e-3);
    }

    #[test]
    fn kernel_matches_closed_form_at_unit_distance() {
        // (1 + sqrt(5) + 5/3) * exp(-sqrt(5)) for d = 1, l = 1, s2 = 1.
        let k = kernel_matern25(&[0.0], &[1.0], 1.0, 1.0);
        assert!((k - 0.52399410883182031059).abs() < 1e-15);
    }

    #[test]
    fn kernel_scales_linearly_in_signal_variance() {
        let a = [0.2, 0.4];
        let b = [1.0, -0.3];
        let base = kernel_matern25(&a, &b, 0.8, 1.0);
        let scaled = kernel_matern25(&a, &b, 0.8, 3.7);
        assert!((scaled - 3.7 * base).abs() < 1e-15 * scaled.abs());
    }

    #[test]
    fn kernel_decreases_with_distance() {
        let mut prev = kernel_matern25(&[0.0], &[0.0], 1.0, 1.0);
        for i in 1..50 {
            let d = i as f64 * 0.1;
            let k = kernel_matern25(&[0.0], &[d], 1.0, 1.0);
            assert!(k < prev, "kernel not decreasing at d = {d}");
            prev = k;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn kernel_is_symmetric_and_bounded(
            a in proptest::collection::vec(-5.0..5.0f64, 3),
            b in proptest::collection::vec(-5.0..5.0f64, 3),
            l in 0.05..5.0f64,
            s2 in 0.01..100.0f64,
        ) {
            let kab = kernel_matern25(&a, &b, l, s2);
            let kba = kernel_matern25(&b, &a, l, s2);
            prop_assert_eq!(kab, kba);
            prop_assert!(kab > 0.0 && kab <= s2 * (1.0 + 1e-12));
        }

        #[test]
        fn ei_is_nonnegative_and_nondecreasing_in_sigma(
            mean in -3.0..3.0f64,
            f_best in -3.0..3.0f64,
            xi in 0.0..0.5f64,
            v1 in 1e-6..4.0f64,
            dv in 0.0..4.0f64,
        ) {
            let lo = expected_improvement(mean, v1, f_best, xi);
            let hi = expected_improvement(mean, v1 + dv, f_best, xi);
            prop_assert!(lo >= 0.0);
            prop_assert!(hi >= lo - 1e-12);
        }
    }

    #[test]
    fn ei_with_zero_variance_is_clipped_improvement() {
        assert_eq!(expected_improvement(1.5, 0.0, 1.0, 0.1), 0.4);
        assert_eq!(expected_improvement(0.5, 0.0, 1.0, 0.1), 0.0);
        assert_eq!(expected_improvement(2.0, 0.0, 2.0, 0.0), 0.0);
    }

    #[test]
    fn ei_matches_frozen_closed_form_values() {
        assert!((expected_improvement(0.3, 0.04, 0.25, 0.01) - 0.10137892717265529652).abs() < 1e-12);
        assert!((expected_improvement(-1.0, 1.0, 0.5, 0.0) - 0.029306793762604628607).abs() < 1e-12);
        // Zero improvement with unit variance collapses to the normal density at 0.
        assert!((expected_improvement(1.0, 1.0, 0.99, 0.01) - 0.39894228040143267794).abs() < 1e-12);
    }

    #[test]
    fn ei_matches_monte_carlo_estimate() {
        let cases = [(0.2f64, 0.49f64, 0.0f64, 0.01f64), (-0.3, 1.21, 0.1, 0.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (mean, var, f_best, xi) in cases {
            let sigma = var.sqrt();
            let n = 1_000_000;
            let mut acc = 0.0;
            for _ in 0..n {
                let z: f64 = rng.sample(StandardNormal);
                acc += (mean + sigma * z - f_best - xi).max(0.0);
            }
            let mc = acc / n as f64;
            let ei = expected_improvement(mean, var, f_best, xi);
            assert!(
                (ei - mc).abs() < 1e-2,
                "EI {ei} vs MC {mc} for mean={mean}, var={var}"
            );
        }
    }

    fn toy_model() -> GpModel {
        let points = vec![vec![0.1], vec![0.4], vec![0.65], vec![0.9]];
        let values = vec![0.2, 0.9, 0.6, -0.4];
        GpModel::fit(points, values, 0.5, 1.0).unwrap()
    }

    #[test]
    fn gp_interpolates_observations_with_minimal_jitter() {
        let points: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.5]).collect();
        let values: Vec<f64> = points.iter().map(|p| (p[0] * 1.3).sin()).collect();
        let model = GpModel::fit(points.clone(), values.clone(), 1.0, 1.0).unwrap();
        assert_eq!(model.jitter(), JITTER_FLOOR);
        for (p, y) in points.iter().zip(&values) {
            let (mean, var) = model.posterior(p).unwrap();
            assert!((mean - y).abs() < 1e-5, "mean {mean} vs {y}");
            assert!(var <= 1e-8, "variance {var} at an observed point");
        }
    }

    #[test]
    fn gp_reverts_to_prior_far_from_data() {
        let model = toy_model();
        let (mean, var) = model.posterior(&[1000.0]).unwrap();
        assert!(mean.abs() < 1e-8);
        assert!((var - model.signal_var()).abs() < 1e-8);
    }

    /// Gauss-Jordan inverse; test oracle only.
    fn naive_inverse(k: &Array2<f64>) -> Array2<f64> {
        let n = k.nrows();
        let mut aug = Array2::<f64>::zeros((n, 2 * n));
        for i in 0..n {
            for j in 0..n {
                aug[(i, j)] = k[(i, j)];
            }
            aug[(i, n + i)] = 1.0;
        }
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&a, &b| aug[(a, col)].abs().total_cmp(&aug[(b, col)].abs()))
                .unwrap();
            if pivot != col {
                for j in 0..2 * n {
                    let tmp = aug[(col, j)];
                    aug[(col, j)] = aug[(pivot, j)];
                    aug[(pivot, j)] = tmp;
                }
            }
            let d = aug[(col, col)];
            for j in 0..2 * n {
                aug[(col, j)] /= d;
            }
            for i in 0..n {
                if i != col {
                    let f = aug[(i, col)];
                    for j in 0..2 * n {
                        aug[(i, j)] -= f * aug[(col, j)];
                    }
                }
            }
        }
        let mut inv = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                inv[(i, j)] = aug[(i, n + j)];
            }
        }
        inv
    }

    fn dense_posterior(
        points: &[Vec<f64>],
        values: &[f64],
        query: &[f64],
        l: f64,
        s2: f64,
        jitter: f64,
    ) -> (f64, f64) {
        let n = points.len();
        let mut k = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = kernel_matern25(&points[i], &points[j], l, s2);
            }
            k[(i, i)] += jitter;
        }
        let inv = naive_inverse(&k);
        let kstar = Array1::from_iter(
            points
                .iter()
                .map(|p| kernel_matern25(p, query, l, s2)),
        );
        let y = Array1::from(values.to_vec());
        let w = inv.dot(&y);
        let mean = kstar.dot(&w);
        let var = s2 - kstar.dot(&inv.dot(&kstar));
        (mean, var)
    }

    #[test]
    fn gp_posterior_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..5 {
            let n = 2 + (rng.random::<f64>() * 7.0) as usize;
            let points: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| rng.random::<f64>()).collect())
                .collect();
            let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let query: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let model = GpModel::fit(points.clone(), values.clone(), 0.8, 1.5).unwrap();
            let (mean, var) = model.posterior(&query).unwrap();
            let (om, ov) = dense_posterior(&points, &values, &query, 0.8, 1.5, model.jitter());
            assert!((mean - om).abs() < 1e-6, "mean {mean} vs oracle {om}");
            assert!((var - ov.max(0.0)).abs() < 1e-6, "var {var} vs oracle {ov}");
        }
    }

    #[test]
    fn log_marginal_likelihood_matches_direct_formula() {
        let model = toy_model();
        let n = model.n_observations();
        let mut k = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] =
                    kernel_matern25(&model.points[i], &model.points[j], 0.5, 1.0);
            }
            k[(i, i)] += model.jitter();
        }
        let inv = naive_inverse(&k);
        let y = Array1::from(model.values.clone());
        let quad = y.dot(&inv.dot(&y));
        // det via the product of Cholesky diagonal squares of the oracle copy.
        let l = cholesky_lower(&k).unwrap();
        let log_det: f64 = (0..n).map(|i| 2.0 * l[(i, i)].ln()).sum();
        let expected =
            -0.5 * quad - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        assert!((model.log_marginal_likelihood() - expected).abs() < 1e-8);
    }

    #[test]
    fn fit_grid_picks_the_highest_marginal_likelihood_cell() {
        let points: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 / 5.0]).collect();
        let values: Vec<f64> = points.iter().map(|p| (6.0 * p[0]).sin() * 0.5).collect();
        let model = GpModel::fit_grid(&points, &values).unwrap();
        let chosen = model.log_marginal_likelihood();
        for l in log_spaced(LENGTH_SCALE_RANGE, N_LENGTH_SCALES) {
            for s2 in log_spaced(SIGNAL_VAR_RANGE, N_SIGNAL_VARS) {
                let cell = GpModel::fit(points.clone(), values.clone(), l, s2).unwrap();
                assert!(cell.log_marginal_likelihood() <= chosen + 1e-9);
            }
        }
        let lengths = log_spaced(LENGTH_SCALE_RANGE, N_LENGTH_SCALES);
        let vars = log_spaced(SIGNAL_VAR_RANGE, N_SIGNAL_VARS);
        assert!(lengths.contains(&model.length_scale()));
        assert!(vars.contains(&model.signal_var()));
        assert_eq!(lengths.len() * vars.len(), 32);
    }

    #[test]
    fn fit_rejects_bad_inputs() {
        assert!(matches!(
            GpModel::fit(vec![], vec![], 1.0, 1.0),
            Err(BoError::EmptyModel)
        ));
        assert!(matches!(
            GpModel::fit(vec![vec![0.0], vec![0.1, 0.2]], vec![1.0, 2.0], 1.0, 1.0),
            Err(BoError::ObservationShape { index: 1, .. })
        ));
        assert!(matches!(
            GpModel::fit(vec![vec![0.0]], vec![f64::NAN], 1.0, 1.0),
            Err(BoError::NonFiniteValue { index: 0 })
        ));
        assert!(matches!(
            GpModel::fit(vec![vec![0.0]], vec![1.0], -1.0, 1.0),
            Err(BoError::BadHyperparameters { .. })
        ));
        let model = toy_model();
        assert!(matches!(
            model.posterior(&[0.1, 0.2]),
            Err(BoError::QueryShape { got: 2, want: 1 })
        ));
    }

    #[test]
    fn duplicate_observations_survive_via_jitter() {
        let points = vec![vec![0.5, 0.5], vec![0.5, 0.5], vec![0.2, 0.8]];
        let values = vec![1.0, 1.0, 0.0];
        let model = GpModel::fit(points, values, 1.0, 1.0).unwrap();
        assert!(model.jitter() <= JITTER_CEILING);
        let (mean, _) = model.posterior(&[0.5, 0.5]).unwrap();
        assert!((mean - 1.0).abs() < 1e-3);
    }

    #[test]
    fn proposal_stays_in_bounds_and_is_deterministic() {
        let points = vec![vec![-1.5, 1.0], vec![-1.2, 2.5], vec![-1.9, 0.7]];
        let values = vec![0.3, -0.2, 0.5];
        let model = GpModel::fit(points, values, 0.5, 1.0).unwrap();
        let mut config = BoConfig::unit_box(2).with_seed(11);
        config.bounds = vec![(-2.0, -1.0), (0.5, 3.0)];
        let a = propose_next(&model, &config).unwrap();
        let b = propose_next(&model, &config).unwrap();
        assert_eq!(a, b);
        for (x, (lo, hi)) in a.iter().zip(&config.bounds) {
            assert!(lo <= x && x <= hi, "proposal {x} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn proposal_matches_dense_grid_argmax_in_one_dimension() {
        let model = toy_model();
        let config = BoConfig::unit_box(1).with_seed(3);
        let f_best = model.best_observed();
        let mut grid_best = (f64::NEG_INFINITY, 0.0);
        for i in 0..10_000 {
            let x = i as f64 / 9_999.0;
            let (mean, var) = model.posterior(&[x]).unwrap();
            let ei = expected_improvement(mean, var, f_best, config.xi);
            if ei > grid_best.0 {
                grid_best = (ei, x);
            }
        }
        let proposal = propose_next(&model, &config).unwrap();
        assert!(
            (proposal[0] - grid_best.1).abs() <= 0.1,
            "proposal {} vs grid argmax {}",
            proposal[0],
            grid_best.1
        );
    }

    #[test]
    fn optimize_respects_budget_bounds_and_monotone_best() {
        let config = BoConfig::unit_box(2).with_seed(7).with_budget(5, 6);
        let trace = optimize(
            scalar_objective(|x| -(x[0] - 0.3).powi(2) - (x[1] - 0.7).powi(2)),
            &config,
        )
        .unwrap();
        assert_eq!(trace.iterations.len(), 11);
        let mut running = f64::NEG_INFINITY;
        for (i, rec) in trace.iterations.iter().enumerate() {
            assert_eq!(rec.posterior.is_some(), i >= 5);
            for (x, (lo, hi)) in rec.lambda.iter().zip(&config.bounds) {
                assert!(lo <= x && x <= hi);
            }
            running = running.max(rec.objective.total);
            assert_eq!(rec.best, running);
        }
        let best_idx = trace
            .iterations
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.objective.total.total_cmp(&b.1.objective.total).then(b.0.cmp(&a.0)))
            .unwrap()
            .0;
        assert_eq!(trace.lambda_star, trace.iterations[best_idx].lambda);
        assert_eq!(trace.best_value(), Some(running));
    }

    #[test]
    fn optimize_is_deterministic() {
        let config = BoConfig::unit_box(3).with_seed(99).with_budget(4, 4);
        let f = |x: &[f64]| -(x[0] - 0.5).powi(2) - (x[1] - 0.5).powi(2) - (x[2] - 0.5).powi(2);
        let a = optimize(scalar_objective(f), &config).unwrap();
        let b = optimize(scalar_objective(f), &config).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn optimize_closes_in_on_a_quadratic_optimum() {
        let config = BoConfig::unit_box(3).with_seed(1);
        let trace = optimize(
            scalar_objective(|x| -x.iter().map(|v| (v - 0.5) * (v - 0.5)).sum::<f64>()),
            &config,
        )
        .unwrap();
        assert!(trace.best_value().unwrap() >= -0.05);
    }

    #[test]
    fn optimize_aborts_with_partial_trace_on_objective_error() {
        let mut calls = 0;
        let objective = |x: &[f64]| {
            calls += 1;
            if calls == 4 {
                Err("scorer exploded".to_string())
            } else {
                Ok(ObjectiveValue::scalar(-x[0]))
            }
        };
        let config = BoConfig::unit_box(1).with_seed(5).with_budget(6, 2);
        match optimize(objective, &config) {
            Err(BoError::ObjectiveFailed {
                message,
                completed,
                partial,
            }) => {
                assert_eq!(message, "scorer exploded");
                assert_eq!(completed, 3);
                assert_eq!(partial.iterations.len(), 3);
                let best = partial
                    .iterations
                    .iter()
                    .map(|r| r.objective.total)
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(partial.best_value(), Some(best));
                assert!(!partial.lambda_star.is_empty());
            }
            other => panic!("expected ObjectiveFailed, got {other:?}"),
        }
    }

    #[test]
    fn optimize_with_zero_rounds_returns_the_best_probe() {
        let config = BoConfig::unit_box(2).with_seed(13).with_budget(8, 0);
        let trace = optimize(scalar_objective(|x| x[0] + x[1]), &config).unwrap();
        assert_eq!(trace.iterations.len(), 8);
        assert!(trace.iterations.iter().all(|r| r.posterior.is_none()));
        let best = trace
            .iterations
            .iter()
            .max_by(|a, b| a.objective.total.total_cmp(&b.objective.total))
            .unwrap();
        assert_eq!(trace.lambda_star, best.lambda);
    }

    #[test]
    fn random_search_handles_a_budget_of_one() {
        let config = BoConfig::unit_box(2).with_seed(21).with_budget(1, 0);
        let trace = random_search(scalar_objective(|x| x[0]), &config).unwrap();
        assert_eq!(trace.iterations.len(), 1);
        assert_eq!(trace.lambda_star, trace.iterations[0].lambda);
        let again = random_search(scalar_objective(|x| x[0]), &config).unwrap();
        assert_eq!(trace, again);
    }

    #[test]
    fn random_search_uses_the_full_budget_without_posteriors() {
        let config = BoConfig::unit_box(2).with_seed(2).with_budget(10, 30);
        let trace = random_search(scalar_objective(|x| -x[0] * x[1]), &config).unwrap();
        assert_eq!(trace.iterations.len(), 40);
        assert!(trace.iterations.iter().all(|r| r.posterior.is_none()));
        for rec in &trace.iterations {
            for (x, (lo, hi)) in rec.lambda.iter().zip(&config.bounds) {
                assert!(lo <= x && x <= hi);
            }
        }
    }

    #[test]
    fn trace_json_has_the_documented_shape() {
        let config = BoConfig::unit_box(2).with_seed(4).with_budget(2, 1);
        let trace = optimize(scalar_objective(|x| -x[0]), &config).unwrap();
        let text = trace.to_json().unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let obj = value.as_object().unwrap();
        assert!(obj.contains_key("config"));
        assert!(obj.contains_key("iterations"));
        assert!(obj.contains_key("lambda_star"));
        let iters = value["iterations"].as_array().unwrap();
        assert_eq!(iters.len(), 3);
        for (i, it) in iters.iter().enumerate() {
            let rec = it.as_object().unwrap();
            for key in ["lambda", "objective", "posterior", "best"] {
                assert!(rec.contains_key(key), "missing {key}");
            }
            for key in ["total", "kl", "ent", "n"] {
                assert!(it["objective"].as_object().unwrap().contains_key(key));
            }
            if i < 2 {
                assert!(it["posterior"].is_null());
            } else {
                let p = it["posterior"].as_object().unwrap();
                assert!(p.contains_key("mean") && p.contains_key("var"));
            }
        }
        assert_eq!(BoTrace::from_json(&text).unwrap(), trace);
    }

    #[test]
    fn config_validation_rejects_degenerate_setups() {
        let mut c = BoConfig::unit_box(0);
        assert!(matches!(c.validate(), Err(BoError::InvalidConfig(_))));
        c = BoConfig::unit_box(2);
        c.bounds[1] = (0.5, 0.5);
        assert!(matches!(
            c.validate(),
            Err(BoError::InvalidBounds { index: 1, .. })
        ));
        c = BoConfig::unit_box(2);
        c.n_init = 0;
        assert!(c.validate().is_err());
        c = BoConfig::unit_box(2);
        c.xi = -0.1;
        assert!(c.validate().is_err());
        c = BoConfig::unit_box(17);
        assert!(c.validate().is_err());
    }
}
