//! Source-informed score prior: scaling, per-source Beta fits, moment-matched
//! unification, and discretization over the target score classes.
//!
//! The pipeline is scale_scores -> fit_beta_mle per source -> unify_betas ->
//! discretize. After fitting, a source survives only as [`SourceStatistics`]
//! (range, Beta parameters, sample count); no raw scores are retained, which
//! is what makes the downstream adaptation source-free.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::special::{digamma, ln_beta, reg_inc_beta, trigamma};

#[derive(Debug, Error)]
pub enum ScorePriorError {
    #[error("invalid score range [{a}, {b}]: need a <= b and at least 2 classes")]
    InvalidRange { a: i64, b: i64 },
    #[error("score {score} outside range [{a}, {b}]")]
    ScoreOutOfRange { score: i64, a: i64, b: i64 },
    #[error("need at least 2 samples, got {0}")]
    NotEnoughSamples(usize),
    #[error("all samples identical; Beta likelihood is unbounded")]
    DegenerateSample,
    #[error("scaled sample {0} outside the open interval (0, 1)")]
    SampleOutOfDomain(f64),
    #[error(
        "Beta MLE did not converge after {iterations} iterations; best iterate alpha={best_alpha}, beta={best_beta}, mean log-likelihood {log_likelihood}"
    )]
    NonConvergence {
        best_alpha: f64,
        best_beta: f64,
        log_likelihood: f64,
        iterations: usize,
    },
    #[error("beta parameters must be positive, got alpha={alpha}, beta={beta}")]
    BadBetaParams { alpha: f64, beta: f64 },
    #[error("empty statistics list")]
    EmptyList,
    #[error("mixture moments infeasible for a Beta: mean {mu}, variance {var} >= mu(1-mu)")]
    MomentInfeasible { mu: f64, var: f64 },
    #[error("incomplete beta evaluation failed at x={x} for alpha={alpha}, beta={beta}")]
    IncompleteBeta { x: f64, alpha: f64, beta: f64 },
    #[error("prior of length {len} sums to {sum}, expected 1 within 1e-9")]
    BadPrior { len: usize, sum: f64 },
    #[error("prior length {got} does not match target class count {want}")]
    PriorLength { got: usize, want: usize },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Inclusive integer score range [a, b] with at least two classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[i64; 2]", into = "[i64; 2]")]
pub struct ScoreRange {
    a: i64,
    b: i64,
}

impl ScoreRange {
    pub fn new(a: i64, b: i64) -> Result<Self, ScorePriorError> {
        if a > b || b - a + 1 < 2 {
            return Err(ScorePriorError::InvalidRange { a, b });
        }
        Ok(ScoreRange { a, b })
    }

    pub fn min(&self) -> i64 {
        self.a
    }

    pub fn max(&self) -> i64 {
        self.b
    }

    /// Number of integer classes C = b - a + 1.
    pub fn class_count(&self) -> usize {
        (self.b - self.a + 1) as usize
    }

    pub fn contains(&self, score: i64) -> bool {
        (self.a..=self.b).contains(&score)
    }
}

impl From<ScoreRange> for [i64; 2] {
    fn from(r: ScoreRange) -> Self {
        [r.a, r.b]
    }
}

impl TryFrom<[i64; 2]> for ScoreRange {
    type Error = ScorePriorError;

    fn try_from(v: [i64; 2]) -> Result<Self, Self::Error> {
        ScoreRange::new(v[0], v[1])
    }
}

/// Beta distribution parameters, both strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BetaParamsWire", into = "BetaParamsWire")]
pub struct BetaParams {
    alpha: f64,
    beta: f64,
}

#[derive(Serialize, Deserialize)]
struct BetaParamsWire {
    alpha: f64,
    beta: f64,
}

impl From<BetaParams> for BetaParamsWire {
    fn from(p: BetaParams) -> Self {
        BetaParamsWire {
            alpha: p.alpha,
            beta: p.beta,
        }
    }
}

impl TryFrom<BetaParamsWire> for BetaParams {
    type Error = ScorePriorError;

    fn try_from(w: BetaParamsWire) -> Result<Self, Self::Error> {
        BetaParams::new(w.alpha, w.beta)
    }
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, ScorePriorError> {
        if !(alpha.is_finite() && beta.is_finite() && alpha > 0.0 && beta > 0.0) {
            return Err(ScorePriorError::BadBetaParams { alpha, beta });
        }
        Ok(BetaParams { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    /// Variance via mu(1-mu)/(alpha+beta+1), which stays finite for extreme
    /// parameters where the textbook quotient would underflow.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        m * (1.0 - m) / (self.alpha + self.beta + 1.0)
    }
}

/// Categorical prior q over the target's score classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DiscretePriorWire", into = "DiscretePriorWire")]
pub struct DiscretePrior {
    probs: Vec<f64>,
    range: ScoreRange,
}

#[derive(Serialize, Deserialize)]
struct DiscretePriorWire {
    probs: Vec<f64>,
    range: ScoreRange,
}

impl From<DiscretePrior> for DiscretePriorWire {
    fn from(p: DiscretePrior) -> Self {
        DiscretePriorWire {
            probs: p.probs,
            range: p.range,
        }
    }
}

impl TryFrom<DiscretePriorWire> for DiscretePrior {
    type Error = ScorePriorError;

    fn try_from(w: DiscretePriorWire) -> Result<Self, Self::Error> {
        DiscretePrior::new(w.probs, w.range)
    }
}

impl DiscretePrior {
    pub fn new(probs: Vec<f64>, range: ScoreRange) -> Result<Self, ScorePriorError> {
        if probs.len() != range.class_count() {
            return Err(ScorePriorError::PriorLength {
                got: probs.len(),
                want: range.class_count(),
            });
        }
        let sum: f64 = probs.iter().sum();
        if !probs.iter().all(|p| p.is_finite() && *p >= 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(ScorePriorError::BadPrior {
                len: probs.len(),
                sum,
            });
        }
        Ok(DiscretePrior { probs, range })
    }

    /// Uniform prior 1/C per class.
    pub fn uniform(range: ScoreRange) -> Self {
        let c = range.class_count();
        DiscretePrior {
            probs: vec![1.0 / c as f64; c],
            range,
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn range(&self) -> ScoreRange {
        self.range
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Everything retained from a source dataset once it is gone: its score
/// range, the fitted Beta, and how many samples backed the fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SourceStatisticsWire", into = "SourceStatisticsWire")]
pub struct SourceStatistics {
    pub source_id: String,
    pub range: ScoreRange,
    pub params: BetaParams,
    pub n: usize,
}

/// Wire layout: {"source_id", "range": [a, b], "alpha", "beta", "n"}.
#[derive(Serialize, Deserialize)]
struct SourceStatisticsWire {
    source_id: String,
    range: [i64; 2],
    alpha: f64,
    beta: f64,
    n: usize,
}

impl From<SourceStatistics> for SourceStatisticsWire {
    fn from(s: SourceStatistics) -> Self {
        SourceStatisticsWire {
            source_id: s.source_id,
            range: s.range.into(),
            alpha: s.params.alpha(),
            beta: s.params.beta(),
            n: s.n,
        }
    }
}

impl TryFrom<SourceStatisticsWire> for SourceStatistics {
    type Error = ScorePriorError;

    fn try_from(w: SourceStatisticsWire) -> Result<Self, Self::Error> {
        Ok(SourceStatistics {
            source_id: w.source_id,
            range: w.range.try_into()?,
            params: BetaParams::new(w.alpha, w.beta)?,
            n: w.n,
        })
    }
}

impl SourceStatistics {
    pub fn to_json(&self) -> Result<String, ScorePriorError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ScorePriorError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Map integer scores into (0, 1): y_tilde = (y - a + 0.5) / (b - a + 1).
/// The half-offset keeps even the boundary scores strictly interior.
pub fn scale_scores(scores: &[i64], range: ScoreRange) -> Result<Vec<f64>, ScorePriorError> {
    let span = (range.b - range.a + 1) as f64;
    scores
        .iter()
        .map(|&y| {
            if !range.contains(y) {
                return Err(ScorePriorError::ScoreOutOfRange {
                    score: y,
                    a: range.a,
                    b: range.b,
                });
            }
            Ok(((y - range.a) as f64 + 0.5) / span)
        })
        .collect()
}

/// Mean log Beta density of `samples` under `params`.
pub fn beta_mean_log_likelihood(params: &BetaParams, samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean_ln: f64 = samples.iter().map(|x| x.ln()).sum::<f64>() / n;
    let mean_ln1m: f64 = samples.iter().map(|x| (1.0 - x).ln()).sum::<f64>() / n;
    (params.alpha - 1.0) * mean_ln + (params.beta - 1.0) * mean_ln1m
        - ln_beta(params.alpha, params.beta)
}

/// Method-of-moments Beta estimate. For samples strictly inside (0, 1) the
/// population variance is strictly below m(1-m), so the closed form is
/// always feasible.
pub fn fit_beta_moments(samples: &[f64]) -> Result<BetaParams, ScorePriorError> {
    validate_beta_samples(samples)?;
    let n = samples.len() as f64;
    let m: f64 = samples.iter().sum::<f64>() / n;
    let v: f64 = samples.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    let nu = m * (1.0 - m) / v - 1.0;
    BetaParams::new(
        (m * nu).clamp(PARAM_LO, PARAM_HI),
        ((1.0 - m) * nu).clamp(PARAM_LO, PARAM_HI),
    )
}

fn validate_beta_samples(samples: &[f64]) -> Result<(), ScorePriorError> {
    if samples.len() < 2 {
        return Err(ScorePriorError::NotEnoughSamples(samples.len()));
    }
    for &x in samples {
        if !(x.is_finite() && x > 0.0 && x < 1.0) {
            return Err(ScorePriorError::SampleOutOfDomain(x));
        }
    }
    if samples.iter().all(|&x| x == samples[0]) {
        return Err(ScorePriorError::DegenerateSample);
    }
    Ok(())
}

const PARAM_LO: f64 = 1e-3;
const PARAM_HI: f64 = 1e6;
const MLE_MAX_ITER: usize = 500;
const MLE_STEP_TOL: f64 = 1e-8;

/// Maximum-likelihood Beta fit: method-of-moments start, then Newton steps on
/// the digamma stationarity conditions with backtracking. The log-likelihood
/// never decreases across iterations, so the result is at least as good as
/// the initializer. Parameters are clamped to [1e-3, 1e6] throughout.
pub fn fit_beta_mle(samples: &[f64]) -> Result<BetaParams, ScorePriorError> {
    let init = fit_beta_moments(samples)?;
    let n = samples.len() as f64;
    let mean_ln: f64 = samples.iter().map(|x| x.ln()).sum::<f64>() / n;
    let mean_ln1m: f64 = samples.iter().map(|x| (1.0 - x).ln()).sum::<f64>() / n;
    let ll = |a: f64, b: f64| (a - 1.0) * mean_ln + (b - 1.0) * mean_ln1m - ln_beta(a, b);

    let (mut a, mut b) = (init.alpha, init.beta);
    let mut cur = ll(a, b);
    for _ in 0..MLE_MAX_ITER {
        let psi_ab = digamma(a + b);
        let g1 = mean_ln - digamma(a) + psi_ab;
        let g2 = mean_ln1m - digamma(b) + psi_ab;
        // Hessian of the log-likelihood (negative definite):
        //   [ psi1(a+b) - psi1(a)      psi1(a+b)          ]
        //   [ psi1(a+b)                psi1(a+b) - psi1(b) ]
        let t_ab = trigamma(a + b);
        let h11 = t_ab - trigamma(a);
        let h22 = t_ab - trigamma(b);
        let det = h11 * h22 - t_ab * t_ab;
        let (da, db) = if det.abs() > 1e-300 {
            // Newton direction: -H^{-1} g
            (
                -(h22 * g1 - t_ab * g2) / det,
                -(h11 * g2 - t_ab * g1) / det,
            )
        } else {
            // fall back to plain gradient ascent when the solve is singular
            (g1, g2)
        };

        // backtracking line search keeps the likelihood non-decreasing
        let mut accepted = false;
        let mut t = 1.0;
        for _ in 0..60 {
            let na = (a + t * da).clamp(PARAM_LO, PARAM_HI);
            let nb = (b + t * db).clamp(PARAM_LO, PARAM_HI);
            let cand = ll(na, nb);
            if cand >= cur && cand.is_finite() {
                let step = (na - a).abs().max((nb - b).abs());
                a = na;
                b = nb;
                cur = cand;
                accepted = true;
                if step < MLE_STEP_TOL {
                    return BetaParams::new(a, b);
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // no improving step exists at representable scale: stationary
            return BetaParams::new(a, b);
        }
    }
    Err(ScorePriorError::NonConvergence {
        best_alpha: a,
        best_beta: b,
        log_likelihood: cur,
        iterations: MLE_MAX_ITER,
    })
}

/// Single Beta matching the mean and variance of the uniform mixture of the
/// given components: mu = mean of means, sigma^2 = mean of (var + mean^2)
/// minus mu^2, then alpha = mu nu, beta = (1-mu) nu with
/// nu = mu(1-mu)/sigma^2 - 1.
pub fn unify_betas(params: &[BetaParams]) -> Result<BetaParams, ScorePriorError> {
    if params.is_empty() {
        return Err(ScorePriorError::EmptyList);
    }
    let m = params.len() as f64;
    let mu: f64 = params.iter().map(|p| p.mean()).sum::<f64>() / m;
    let second: f64 = params
        .iter()
        .map(|p| p.variance() + p.mean() * p.mean())
        .sum::<f64>()
        / m;
    let var = second - mu * mu;
    if !(var > 0.0 && var < mu * (1.0 - mu)) {
        return Err(ScorePriorError::MomentInfeasible { mu, var });
    }
    let nu = mu * (1.0 - mu) / var - 1.0;
    BetaParams::new(mu * nu, (1.0 - mu) * nu)
}

/// Bin the Beta density into C_T equal-width cells of (0, 1):
/// q_c = I(c/C; alpha, beta) - I((c-1)/C; alpha, beta).
pub fn discretize(
    prior: &BetaParams,
    target: ScoreRange,
) -> Result<DiscretePrior, ScorePriorError> {
    let c_t = target.class_count();
    let (alpha, beta) = (prior.alpha(), prior.beta());
    let eval = |x: f64| {
        reg_inc_beta(x, alpha, beta).ok_or(ScorePriorError::IncompleteBeta { x, alpha, beta })
    };
    let mut probs = Vec::with_capacity(c_t);
    let mut prev = 0.0;
    for c in 1..=c_t {
        let cur = if c == c_t {
            1.0
        } else {
            eval(c as f64 / c_t as f64)?
        };
        // differences of monotone CDF evaluations; clamp out negative dust
        probs.push((cur - prev).max(0.0));
        prev = cur;
    }
    DiscretePrior::new(probs, target)
}

/// unify_betas over the sources' fitted Betas, then discretize to the target
/// range. Pure composition.
pub fn build_prior(
    stats: &[SourceStatistics],
    target: ScoreRange,
) -> Result<DiscretePrior, ScorePriorError> {
    if stats.is_empty() {
        return Err(ScorePriorError::EmptyList);
    }
    let params: Vec<BetaParams> = stats.iter().map(|s| s.params).collect();
    discretize(&unify_betas(&params)?, target)
}
