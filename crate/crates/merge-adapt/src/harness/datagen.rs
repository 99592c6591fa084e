//! Synthetic desk-scale scoring domains.
//!
//! Every domain scores feature vectors by one linear concept: a unit
//! direction w and a mean m. A sample is x = m + z with z standard normal;
//! its latent quality u = sigmoid(gain * w'z) lands in (0, 1) and is binned
//! uniformly into the domain's integer range, then nudged one step with the
//! label-noise probability. Sources share a common concept up to jitter;
//! adversarial sources negate theirs, so their labels invert the shared
//! notion of quality. The target scores by the blend of the benign concepts
//! plus a novel drift, with its own mean shift.

use super::{derive_seed, ExperimentConfig, HarnessError};
use crate::score_prior::ScoreRange;
use crate::scoring_model::{FeatureVector, LabeledSet, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Labeled sources plus the target, labels still attached. Callers split
/// the target into features and held-back labels before anything persists.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDomains {
    pub sources: Vec<LabeledSet>,
    pub target: LabeledSet,
}

/// The held-back evaluation labels, stored apart from the features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetLabels {
    pub range: [i64; 2],
    pub labels: Vec<i64>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // A zero draw has probability zero; guard anyway.
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// One domain's samples under concept `w`, mean `m`.
fn gen_domain(
    rng: &mut ChaCha8Rng,
    w: &[f64],
    m: &[f64],
    range: ScoreRange,
    domain: &str,
    cfg: &ExperimentConfig,
) -> Result<LabeledSet, HarnessError> {
    let c = range.class_count();
    let mut samples = Vec::with_capacity(cfg.samples_per_domain);
    for _ in 0..cfg.samples_per_domain {
        let z = gaussian_vec(rng, cfg.feature_dim);
        let x: Vec<f64> = m.iter().zip(&z).map(|(mi, zi)| mi + zi).collect();
        let u = sigmoid(cfg.gain * w.iter().zip(&z).map(|(wi, zi)| wi * zi).sum::<f64>());
        let bin = ((u * c as f64) as i64).min(c as i64 - 1);
        let mut y = range.min() + bin;
        if cfg.label_noise > 0.0 && rng.random::<f64>() < cfg.label_noise {
            let step = if rng.random::<bool>() { 1 } else { -1 };
            y = (y + step).clamp(range.min(), range.max());
        }
        samples.push(Sample {
            x: FeatureVector::new(x)?,
            y: Some(y),
        });
    }
    Ok(LabeledSet::new(samples, range, domain.to_string())?)
}

/// Generates all source domains and the target. Deterministic in the
/// config's master seed; a fixed config reproduces every byte.
pub fn gen_domains(cfg: &ExperimentConfig) -> Result<GeneratedDomains, HarnessError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.master_seed, "datagen", 0));
    let concept = normalize(gaussian_vec(&mut rng, cfg.feature_dim));

    let mut sources = Vec::with_capacity(cfg.n_sources);
    let mut benign_blend = vec![0.0; cfg.feature_dim];
    let n_benign = (cfg.n_sources - cfg.n_adversarial) as f64;
    for j in 0..cfg.n_sources {
        let jitter = gaussian_vec(&mut rng, cfg.feature_dim);
        let mut w = normalize(
            concept
                .iter()
                .zip(&jitter)
                .map(|(c, x)| c + cfg.concept_jitter * x)
                .collect(),
        );
        if cfg.is_adversarial(j) {
            for x in &mut w {
                *x = -*x;
            }
        } else {
            for (acc, x) in benign_blend.iter_mut().zip(&w) {
                *acc += x / n_benign;
            }
        }
        let shift = gaussian_vec(&mut rng, cfg.feature_dim);
        let m: Vec<f64> = shift.iter().map(|s| cfg.shift_scale * s).collect();
        sources.push(gen_domain(
            &mut rng,
            &w,
            &m,
            cfg.source_range(j)?,
            &format!("source_{j}"),
            cfg,
        )?);
    }

    let drift = gaussian_vec(&mut rng, cfg.feature_dim);
    let w_target = normalize(
        benign_blend
            .iter()
            .zip(&drift)
            .map(|(b, d)| b + cfg.novel_shift * d)
            .collect(),
    );
    let shift = gaussian_vec(&mut rng, cfg.feature_dim);
    let m_target: Vec<f64> = shift.iter().map(|s| cfg.shift_scale * s).collect();
    let target = gen_domain(
        &mut rng,
        &w_target,
        &m_target,
        cfg.target_score_range()?,
        "target",
        cfg,
    )?;

    Ok(GeneratedDomains { sources, target })
}
