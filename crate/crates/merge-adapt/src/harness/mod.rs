//! End-to-end experiment harness.
//!
//! Stages communicate only through files in one output directory, mirroring
//! the CLI subcommands: generate synthetic domains, pretrain per-source task
//! vectors, fit per-source score priors, adapt merge coefficients on the
//! unlabeled target, evaluate against the held-back target labels, report.
//!
//! The adaptation stage runs behind a restricted [`Pipeline`] that refuses to
//! read anything but the pretraining artifacts, the source statistics, the
//! unlabeled target features, and the config. Target labels live in a
//! separate file that only evaluation opens.

mod config;
mod datagen;
mod pipeline;
mod report;

pub use config::{resolve_out_dir, ExperimentConfig, OUT_ENV_VAR};
pub use datagen::{gen_domains, GeneratedDomains, TargetLabels};
pub use pipeline::{
    is_source_free_readable, run_adapt, run_adapt_with, run_evaluate, run_fit_priors,
    run_gen_data, run_pretrain, AccessPolicy, AdaptMethod, AdaptRecord, Pipeline,
    BASE_PARAMS_FILE, CONFIG_FILE, MANIFEST_FILE, METRICS_FILE, REPORT_JSON_FILE,
    REPORT_TEXT_FILE, SOURCE_STATS_FILE, TARGET_FEATURES_FILE, TARGET_LABELS_FILE,
};
pub use report::{parse_metrics_csv, render_text, run_report, MethodSummary, MetricsRow, Report};

use crate::bayes_opt::BoError;
use crate::metrics::MetricsError;
use crate::param_algebra::ParamAlgebraError;
use crate::pim_objective::PimError;
use crate::score_prior::ScorePriorError;
use crate::scoring_model::ScoringError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error("missing artifact {0}; run the earlier stage first")]
    MissingArtifact(PathBuf),
    #[error("{path}:{line}: {message}")]
    Csv {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("adaptation tried to read {0}, which is outside the source-free allowlist")]
    SourceFreeViolation(PathBuf),
    #[error("metrics file has no rows to report")]
    EmptyReport,
    #[error(transparent)]
    Algebra(#[from] ParamAlgebraError),
    #[error(transparent)]
    Prior(#[from] ScorePriorError),
    #[error(transparent)]
    Objective(#[from] PimError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Search(#[from] BoError),
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

/// Stage seeds are all derived from the one master seed, a stage tag, and an
/// index, so no two stages ever share an RNG stream.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"))
}

/// What has run in an output directory, when, and what it wrote.
/// Bookkeeping only; no stage reads it as a data input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub created_unix: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub completed_unix: u64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn load(out: &Path) -> Result<Option<Self>, HarnessError> {
        let path = out.join(pipeline::MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|source| HarnessError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    /// Appends or replaces one stage record. A manifest created under a
    /// different config hash is rejected rather than silently mixed.
    pub fn record(
        out: &Path,
        config_hash: &str,
        stage: &str,
        outputs: Vec<String>,
    ) -> Result<Self, HarnessError> {
        let mut manifest = match Self::load(out)? {
            Some(m) if m.config_hash == config_hash => m,
            Some(m) => {
                return Err(HarnessError::Config(format!(
                    "output directory was created for config {} but the current config is {}",
                    m.config_hash, config_hash
                )));
            }
            None => RunManifest {
                config_hash: config_hash.to_string(),
                created_unix: unix_now(),
                stages: BTreeMap::new(),
            },
        };
        manifest.stages.insert(
            stage.to_string(),
            StageRecord {
                completed_unix: unix_now(),
                outputs,
            },
        );
        let path = out.join(pipeline::MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::create_dir_all(out).map_err(|source| HarnessError::Io {
            path: out.to_path_buf(),
            source,
        })?;
        std::fs::write(&path, text).map_err(|source| HarnessError::Io { path, source })?;
        Ok(manifest)
    }

    /// Drops any existing manifest; data generation starts a directory over.
    pub fn reset(out: &Path) -> Result<(), HarnessError> {
        let path = out.join(pipeline::MANIFEST_FILE);
        if path.exists() {
            std::fs::remove_file(&path).map_err(|source| HarnessError::Io { path, source })?;
        }
        Ok(())
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
