//! Experiment configuration: one JSON document drives every stage.

use super::HarnessError;
use crate::score_prior::ScoreRange;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Environment variable consulted for the output directory when no explicit
/// flag is given; an explicit flag still wins.
pub const OUT_ENV_VAR: &str = "MERGE_ADAPT_OUT";

/// Knobs for the synthetic suite. Every field has a default, so a config
/// file needs to mention only what it overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Number of source domains; the last `n_adversarial` of them are
    /// generated with an inverted scoring concept.
    pub n_sources: usize,
    pub n_adversarial: usize,
    pub feature_dim: usize,
    pub samples_per_domain: usize,
    /// Integer score ranges assigned to sources round-robin.
    pub source_ranges: Vec<(i64, i64)>,
    pub target_range: (i64, i64),
    /// Rank of the trained task-vector factors.
    pub rank: usize,
    /// Run seeds: adaptation repeats once per entry.
    pub seeds: Vec<u64>,
    /// Root seed for data generation and training; run seeds do not touch it.
    pub master_seed: u64,
    /// Probability that a generated score is nudged one step off.
    pub label_noise: f64,
    /// Spread of per-source concept directions around the shared one.
    pub concept_jitter: f64,
    /// Feature mean displacement per domain.
    pub shift_scale: f64,
    /// How far the target concept drifts from the benign-source blend.
    pub novel_shift: f64,
    /// Steepness of the latent-to-unit-interval squash; higher separates
    /// classes more cleanly.
    pub gain: f64,
    /// Objective batch size during adaptation; the whole target is used when
    /// it has fewer samples.
    pub adapt_batch: usize,
    /// Search budget: uniform probes, then surrogate-guided rounds.
    pub n_init: usize,
    pub n_iter: usize,
    pub xi: f64,
    /// Fallback output directory, lowest precedence after the CLI flag and
    /// the environment variable.
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_sources: 5,
            n_adversarial: 1,
            feature_dim: 16,
            samples_per_domain: 400,
            source_ranges: vec![(0, 3), (1, 6), (0, 4)],
            target_range: (1, 6),
            rank: 4,
            seeds: vec![0, 1, 2, 3, 4],
            master_seed: 7,
            label_noise: 0.02,
            concept_jitter: 0.35,
            shift_scale: 0.8,
            novel_shift: 0.3,
            gain: 3.0,
            adapt_batch: 64,
            n_init: 10,
            n_iter: 30,
            xi: 0.01,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: String| Err(HarnessError::Config(m));
        if self.n_sources == 0 {
            return fail("n_sources must be at least 1".into());
        }
        if self.n_adversarial >= self.n_sources {
            return fail(format!(
                "n_adversarial {} leaves no benign source among {}",
                self.n_adversarial, self.n_sources
            ));
        }
        if self.feature_dim == 0 || self.rank == 0 {
            return fail("feature_dim and rank must be positive".into());
        }
        if self.samples_per_domain < 2 {
            return fail("samples_per_domain must be at least 2".into());
        }
        if self.source_ranges.is_empty() {
            return fail("source_ranges must not be empty".into());
        }
        for j in 0..self.n_sources {
            self.source_range(j)?;
        }
        self.target_score_range()?;
        if !(0.0..1.0).contains(&self.label_noise) {
            return fail(format!("label_noise {} outside [0, 1)", self.label_noise));
        }
        for (name, v) in [
            ("concept_jitter", self.concept_jitter),
            ("shift_scale", self.shift_scale),
            ("novel_shift", self.novel_shift),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !(self.gain.is_finite() && self.gain > 0.0) {
            return fail(format!("gain must be positive, got {}", self.gain));
        }
        if self.adapt_batch == 0 || self.n_init == 0 {
            return fail("adapt_batch and n_init must be positive".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        if !(self.xi.is_finite() && self.xi >= 0.0) {
            return fail(format!("xi must be nonnegative, got {}", self.xi));
        }
        Ok(())
    }

    /// Score range of source `j`: the configured ranges, cycled.
    pub fn source_range(&self, j: usize) -> Result<ScoreRange, HarnessError> {
        let (a, b) = self.source_ranges[j % self.source_ranges.len()];
        Ok(ScoreRange::new(a, b)?)
    }

    pub fn target_score_range(&self) -> Result<ScoreRange, HarnessError> {
        Ok(ScoreRange::new(self.target_range.0, self.target_range.1)?)
    }

    /// Widest class count any domain needs; the shared logit dimension.
    pub fn c_max(&self) -> Result<usize, HarnessError> {
        let mut c = self.target_score_range()?.class_count();
        for j in 0..self.n_sources {
            c = c.max(self.source_range(j)?.class_count());
        }
        Ok(c)
    }

    /// Sources indexed `n_sources - n_adversarial ..` are adversarial.
    pub fn is_adversarial(&self, j: usize) -> bool {
        j >= self.n_sources - self.n_adversarial
    }

    pub fn to_json(&self) -> Result<String, HarnessError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Hex digest of the canonical JSON form; stamps output directories.
    pub fn hash(&self) -> Result<String, HarnessError> {
        let canonical = serde_json::to_string(self)?;
        let mut h = Sha256::new();
        h.update(canonical.as_bytes());
        Ok(format!("{:x}", h.finalize()))
    }
}

/// Output-directory precedence: explicit flag, then `MERGE_ADAPT_OUT`, then
/// the config's `out_dir`.
pub fn resolve_out_dir(
    flag: Option<PathBuf>,
    config: &ExperimentConfig,
) -> Result<PathBuf, HarnessError> {
    if let Some(p) = flag {
        return Ok(p);
    }
    if let Ok(v) = std::env::var(OUT_ENV_VAR) {
        if !v.is_empty() {
            return Ok(PathBuf::from(v));
        }
    }
    config.out_dir.clone().ok_or_else(|| {
        HarnessError::Config(format!(
            "no output directory: pass --out, set {OUT_ENV_VAR}, or put out_dir in the config"
        ))
    })
}
