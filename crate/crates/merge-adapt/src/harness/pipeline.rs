//! Stage implementations and the file-access discipline between them.
//!
//! Adaptation runs behind [`Pipeline::restricted`], which refuses reads
//! outside the source-free allowlist and logs every path it opens, so the
//! contract "no source data, no target labels during adaptation" is enforced
//! at runtime and checkable from tests.

use super::{derive_seed, ExperimentConfig, HarnessError, RunManifest, TargetLabels};
use crate::bayes_opt::{optimize, random_search, BoConfig, BoTrace};
use crate::harness::datagen::gen_domains;
use crate::metrics::{qwk, score_from_distribution, RatingPair};
use crate::param_algebra::{
    merge, merge_ties, MergeSpec, ParamSet, TaskVector, DEFAULT_TASK_ARITHMETIC_SCALE,
    DEFAULT_TIES_DENSITY, DEFAULT_TIES_SCALE,
};
use crate::pim_objective::{evaluate, ObjectiveConfig};
use crate::score_prior::{build_prior, fit_beta_mle, scale_scores, SourceStatistics};
use crate::scoring_model::{
    batch_predict, init_base_params, merged_scorer, train_source, FeatureVector, LabeledSet,
    ProbScorer, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TARGET_FEATURES_FILE: &str = "data/target_features.jsonl";
pub const TARGET_LABELS_FILE: &str = "data/target_labels.json";
pub const BASE_PARAMS_FILE: &str = "models/base.json";
pub const SOURCE_STATS_FILE: &str = "models/stats.json";
pub const METRICS_FILE: &str = "results/metrics.csv";
pub const REPORT_TEXT_FILE: &str = "results/report.txt";
pub const REPORT_JSON_FILE: &str = "results/report.json";

/// Base scorer weights are a small fixed draw; all signal lives in the
/// trained task vectors.
const BASE_INIT_SCALE: f64 = 0.05;

pub fn source_data_file(j: usize) -> PathBuf {
    PathBuf::from(format!("data/source_{j}.jsonl"))
}

pub fn task_vector_file(j: usize) -> PathBuf {
    PathBuf::from(format!("models/tv_{j}.json"))
}

pub fn adapt_record_file(method: AdaptMethod, seed: u64) -> PathBuf {
    PathBuf::from(format!("adapt/{method}_seed{seed}.json"))
}

/// What adaptation may read: pretraining artifacts, source statistics, the
/// unlabeled target features, and the config. Nothing else, in particular
/// no `data/source_*.jsonl` and no target labels.
pub fn is_source_free_readable(rel: &Path) -> bool {
    let Some(s) = rel.to_str() else {
        return false;
    };
    if s == CONFIG_FILE
        || s == BASE_PARAMS_FILE
        || s == SOURCE_STATS_FILE
        || s == TARGET_FEATURES_FILE
    {
        return true;
    }
    s.strip_prefix("models/tv_")
        .and_then(|rest| rest.strip_suffix(".json"))
        .is_some_and(|idx| !idx.is_empty() && idx.bytes().all(|b| b.is_ascii_digit()))
}

/// Read policy a [`Pipeline`] enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessPolicy {
    /// Any path under the root.
    Open,
    /// Only the source-free allowlist; everything else errors.
    SourceFree,
}

impl AccessPolicy {
    fn permits(self, rel: &Path) -> bool {
        match self {
            AccessPolicy::Open => true,
            AccessPolicy::SourceFree => is_source_free_readable(rel),
        }
    }
}

/// Root-scoped file access with a read log and a read policy.
///
/// Stages take paths relative to the experiment directory; writes create
/// parent directories. The log records reads in order, duplicates included.
#[derive(Debug)]
pub struct Pipeline {
    root: PathBuf,
    policy: AccessPolicy,
    reads: RefCell<Vec<PathBuf>>,
}

impl Pipeline {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Pipeline {
            root: root.into(),
            policy: AccessPolicy::Open,
            reads: RefCell::new(Vec::new()),
        }
    }

    pub fn restricted(root: impl Into<PathBuf>) -> Self {
        Pipeline {
            root: root.into(),
            policy: AccessPolicy::SourceFree,
            reads: RefCell::new(Vec::new()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn policy(&self) -> AccessPolicy {
        self.policy
    }

    /// Relative paths read so far, in order.
    pub fn reads(&self) -> Vec<PathBuf> {
        self.reads.borrow().clone()
    }

    pub fn exists(&self, rel: impl AsRef<Path>) -> bool {
        self.root.join(rel.as_ref()).exists()
    }

    pub fn read(&self, rel: impl AsRef<Path>) -> Result<String, HarnessError> {
        let rel = rel.as_ref();
        if !self.policy.permits(rel) {
            return Err(HarnessError::SourceFreeViolation(rel.to_path_buf()));
        }
        self.reads.borrow_mut().push(rel.to_path_buf());
        let path = self.root.join(rel);
        if !path.exists() {
            return Err(HarnessError::MissingArtifact(path));
        }
        std::fs::read_to_string(&path).map_err(|source| HarnessError::Io { path, source })
    }

    pub fn write(&self, rel: impl AsRef<Path>, text: &str) -> Result<(), HarnessError> {
        let path = self.root.join(rel.as_ref());
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| HarnessError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        std::fs::write(&path, text).map_err(|source| HarnessError::Io { path, source })
    }
}

/// Generates the synthetic domains and persists them: labeled source files,
/// unlabeled target features, and the held-back target labels in their own
/// file. Also freezes the resolved config into the directory.
pub fn run_gen_data(out: &Path, cfg: &ExperimentConfig) -> Result<RunManifest, HarnessError> {
    cfg.validate()?;
    let pipe = Pipeline::new(out);
    let data = gen_domains(cfg)?;

    let mut outputs = vec![CONFIG_FILE.to_string()];
    pipe.write(CONFIG_FILE, &cfg.to_json()?)?;
    for (j, set) in data.sources.iter().enumerate() {
        let rel = source_data_file(j);
        pipe.write(&rel, &set.to_jsonl())?;
        outputs.push(rel.to_string_lossy().into_owned());
    }
    pipe.write(TARGET_FEATURES_FILE, &data.target.strip_labels().to_jsonl())?;
    let labels = TargetLabels {
        range: [data.target.range().min(), data.target.range().max()],
        labels: data.target.labels()?,
    };
    pipe.write(TARGET_LABELS_FILE, &serde_json::to_string_pretty(&labels)?)?;
    outputs.push(TARGET_FEATURES_FILE.to_string());
    outputs.push(TARGET_LABELS_FILE.to_string());

    RunManifest::reset(out)?;
    RunManifest::record(out, &cfg.hash()?, "gen-data", outputs)
}

fn load_config(pipe: &Pipeline) -> Result<ExperimentConfig, HarnessError> {
    ExperimentConfig::from_json(&pipe.read(CONFIG_FILE)?)
}

fn fit_priors_inner(pipe: &Pipeline, cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let mut stats = Vec::with_capacity(cfg.n_sources);
    for j in 0..cfg.n_sources {
        let set = LabeledSet::from_jsonl(&pipe.read(source_data_file(j))?)?;
        let scaled = scale_scores(&set.labels()?, set.range())?;
        let params = fit_beta_mle(&scaled)?;
        stats.push(SourceStatistics {
            source_id: set.domain().to_string(),
            range: set.range(),
            params,
            n: set.len(),
        });
    }
    pipe.write(SOURCE_STATS_FILE, &serde_json::to_string_pretty(&stats)?)
}

/// Trains one task vector per source against a shared fixed base, fits the
/// per-source score priors, and writes base, task vectors, and statistics.
/// The statistics carry only fitted parameters, never raw scores.
pub fn run_pretrain(out: &Path) -> Result<RunManifest, HarnessError> {
    let pipe = Pipeline::new(out);
    let cfg = load_config(&pipe)?;
    let base = init_base_params(
        cfg.feature_dim,
        cfg.c_max()?,
        BASE_INIT_SCALE,
        derive_seed(cfg.master_seed, "base-init", 0),
    )?;
    pipe.write(BASE_PARAMS_FILE, &base.to_json()?)?;
    let mut outputs = vec![BASE_PARAMS_FILE.to_string()];
    for j in 0..cfg.n_sources {
        let set = LabeledSet::from_jsonl(&pipe.read(source_data_file(j))?)?;
        let train_cfg = TrainConfig {
            rank: cfg.rank,
            seed: derive_seed(cfg.master_seed, "train", j as u64),
            ..TrainConfig::default()
        };
        let tv = train_source(&base, &set, &train_cfg)?;
        let rel = task_vector_file(j);
        pipe.write(&rel, &tv.to_json()?)?;
        outputs.push(rel.to_string_lossy().into_owned());
    }
    fit_priors_inner(&pipe, &cfg)?;
    outputs.push(SOURCE_STATS_FILE.to_string());
    RunManifest::record(out, &cfg.hash()?, "train-sources", outputs)
}

/// Standalone prior fit: the statistics half of [`run_pretrain`] for
/// refreshing `stats.json` without retraining. Also the last stage allowed
/// to read source data.
pub fn run_fit_priors(out: &Path) -> Result<RunManifest, HarnessError> {
    let pipe = Pipeline::new(out);
    let cfg = load_config(&pipe)?;
    fit_priors_inner(&pipe, &cfg)?;
    RunManifest::record(
        out,
        &cfg.hash()?,
        "fit-priors",
        vec![SOURCE_STATS_FILE.to_string()],
    )
}

/// Coefficient-search strategies over the shared task vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMethod {
    /// Prior-matched information maximization via the GP search.
    Pim,
    /// Ablation: prior-matching term only.
    PimNoEntropy,
    /// Ablation: per-sample entropy term only.
    PimNoKl,
    /// Ablation: mutual information against a uniform marginal.
    MiUniform,
    /// Same objective and budget as `Pim`, uniform sampling instead of GP.
    RandomSearch,
    /// Fixed lambda = 1/M.
    Averaging,
    /// Fixed lambda = 0.4 on every source.
    TaskArithmetic,
    /// Trim-elect-merge baseline; no coefficient vector.
    Ties,
}

impl AdaptMethod {
    pub const ALL: [AdaptMethod; 8] = [
        AdaptMethod::Pim,
        AdaptMethod::PimNoEntropy,
        AdaptMethod::PimNoKl,
        AdaptMethod::MiUniform,
        AdaptMethod::RandomSearch,
        AdaptMethod::Averaging,
        AdaptMethod::TaskArithmetic,
        AdaptMethod::Ties,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AdaptMethod::Pim => "pim",
            AdaptMethod::PimNoEntropy => "pim-no-entropy",
            AdaptMethod::PimNoKl => "pim-no-kl",
            AdaptMethod::MiUniform => "mi-uniform",
            AdaptMethod::RandomSearch => "random-search",
            AdaptMethod::Averaging => "averaging",
            AdaptMethod::TaskArithmetic => "task-arithmetic",
            AdaptMethod::Ties => "ties",
        }
    }
}

impl fmt::Display for AdaptMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdaptMethod {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AdaptMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                HarnessError::Config(format!(
                    "unknown method {s:?}; expected one of: {}",
                    AdaptMethod::ALL.map(|m| m.as_str()).join(", ")
                ))
            })
    }
}

/// Outcome of one adaptation run. `lambda` is absent for `ties`, whose merge
/// is not a linear combination; `trace` is present for the searched methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptRecord {
    pub method: AdaptMethod,
    pub seed: u64,
    pub lambda: Option<Vec<f64>>,
    pub trace: Option<BoTrace>,
}

/// Everything adaptation is allowed to know, loaded through the restricted
/// pipeline.
struct AdaptInputs {
    cfg: ExperimentConfig,
    base: ParamSet,
    tvs: Vec<TaskVector>,
    stats: Vec<SourceStatistics>,
    batch: Vec<FeatureVector>,
}

fn load_task_vectors(pipe: &Pipeline, n: usize) -> Result<Vec<TaskVector>, HarnessError> {
    (0..n)
        .map(|j| Ok(TaskVector::from_json(&pipe.read(task_vector_file(j))?)?))
        .collect()
}

fn load_adapt_inputs(pipe: &Pipeline, seed: u64) -> Result<AdaptInputs, HarnessError> {
    let cfg = load_config(pipe)?;
    let base = ParamSet::from_json(&pipe.read(BASE_PARAMS_FILE)?)?;
    let tvs = load_task_vectors(pipe, cfg.n_sources)?;
    let stats: Vec<SourceStatistics> = serde_json::from_str(&pipe.read(SOURCE_STATS_FILE)?)?;
    let features = LabeledSet::from_jsonl(&pipe.read(TARGET_FEATURES_FILE)?)?;

    // One fixed batch per run seed, drawn without replacement; the whole
    // set when it is small enough.
    let xs: Vec<FeatureVector> = features.samples().iter().map(|s| s.x.clone()).collect();
    let batch = if xs.len() > cfg.adapt_batch {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.master_seed, "adapt-batch", seed));
        let mut idx = rand::seq::index::sample(&mut rng, xs.len(), cfg.adapt_batch).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| xs[i].clone()).collect()
    } else {
        xs
    };
    Ok(AdaptInputs {
        cfg,
        base,
        tvs,
        stats,
        batch,
    })
}

/// Adaptation against an explicit pipeline; [`run_adapt`] wraps this with
/// the restricted policy. Taking the pipeline lets tests observe exactly
/// which files the stage opened.
pub fn run_adapt_with(
    pipe: &Pipeline,
    method: AdaptMethod,
    seed: u64,
) -> Result<AdaptRecord, HarnessError> {
    let inputs = load_adapt_inputs(pipe, seed)?;
    let cfg = &inputs.cfg;
    let m = cfg.n_sources;
    let target_range = cfg.target_score_range()?;
    let c_t = target_range.class_count();

    let record = match method {
        AdaptMethod::Averaging => AdaptRecord {
            method,
            seed,
            lambda: Some(vec![1.0 / m as f64; m]),
            trace: None,
        },
        AdaptMethod::TaskArithmetic => AdaptRecord {
            method,
            seed,
            lambda: Some(vec![DEFAULT_TASK_ARITHMETIC_SCALE; m]),
            trace: None,
        },
        AdaptMethod::Ties => AdaptRecord {
            method,
            seed,
            lambda: None,
            trace: None,
        },
        _ => {
            let objective_cfg = match method {
                AdaptMethod::Pim | AdaptMethod::RandomSearch => {
                    ObjectiveConfig::pim(build_prior(&inputs.stats, target_range)?)
                }
                AdaptMethod::PimNoEntropy => {
                    ObjectiveConfig::pim_no_entropy(build_prior(&inputs.stats, target_range)?)
                }
                AdaptMethod::PimNoKl => {
                    ObjectiveConfig::pim_no_kl(build_prior(&inputs.stats, target_range)?)
                }
                AdaptMethod::MiUniform => ObjectiveConfig::mi_uniform(),
                _ => unreachable!("fixed-coefficient methods handled above"),
            };
            let objective = |lambda: &[f64]| {
                let spec = MergeSpec::new(lambda.to_vec()).map_err(|e| e.to_string())?;
                let scorer =
                    merged_scorer(&inputs.base, &inputs.tvs, &spec, c_t).map_err(|e| e.to_string())?;
                let dists = batch_predict(&scorer, &inputs.batch).map_err(|e| e.to_string())?;
                evaluate(&dists, &objective_cfg).map_err(|e| e.to_string())
            };
            let mut bo_cfg = BoConfig::unit_box(m)
                .with_seed(derive_seed(cfg.master_seed, "adapt-search", seed))
                .with_budget(cfg.n_init, cfg.n_iter);
            bo_cfg.xi = cfg.xi;
            let trace = if method == AdaptMethod::RandomSearch {
                random_search(objective, &bo_cfg)?
            } else {
                optimize(objective, &bo_cfg)?
            };
            AdaptRecord {
                method,
                seed,
                lambda: Some(trace.lambda_star.clone()),
                trace: Some(trace),
            }
        }
    };
    pipe.write(
        adapt_record_file(method, seed),
        &serde_json::to_string_pretty(&record)?,
    )?;
    Ok(record)
}

/// Searches (or fixes) merge coefficients for one method and run seed,
/// reading only through the source-free allowlist.
pub fn run_adapt(out: &Path, method: AdaptMethod, seed: u64) -> Result<AdaptRecord, HarnessError> {
    let pipe = Pipeline::restricted(out);
    let record = run_adapt_with(&pipe, method, seed)?;
    let cfg = load_config(&pipe)?;
    RunManifest::record(
        out,
        &cfg.hash()?,
        &format!("adapt:{method}:seed{seed}"),
        vec![adapt_record_file(method, seed)
            .to_string_lossy()
            .into_owned()],
    )?;
    Ok(record)
}

/// Materializes the merged parameters an adaptation record describes.
fn merged_params(
    base: &ParamSet,
    tvs: &[TaskVector],
    record: &AdaptRecord,
) -> Result<ParamSet, HarnessError> {
    match (&record.lambda, record.method) {
        (Some(lambda), _) => Ok(merge(base, tvs, &MergeSpec::new(lambda.clone())?)?),
        (None, AdaptMethod::Ties) => Ok(merge_ties(
            base,
            tvs,
            DEFAULT_TIES_DENSITY,
            DEFAULT_TIES_SCALE,
        )?),
        (None, m) => Err(HarnessError::Config(format!(
            "adaptation record for {m} carries no coefficients"
        ))),
    }
}

/// Scores every adaptation record on the held-back target labels and writes
/// one CSV row per record: `target_id,method,seed,qwk`. Rows are sorted by
/// method then seed, and floats use shortest round-trip formatting, so a
/// rerun over identical records is byte-identical.
pub fn run_evaluate(out: &Path) -> Result<PathBuf, HarnessError> {
    let pipe = Pipeline::new(out);
    let cfg = load_config(&pipe)?;
    let base = ParamSet::from_json(&pipe.read(BASE_PARAMS_FILE)?)?;
    let tvs = load_task_vectors(&pipe, cfg.n_sources)?;
    let features = LabeledSet::from_jsonl(&pipe.read(TARGET_FEATURES_FILE)?)?;
    let labels: TargetLabels = serde_json::from_str(&pipe.read(TARGET_LABELS_FILE)?)?;
    let target_range = cfg.target_score_range()?;
    let c_t = target_range.class_count();
    if labels.labels.len() != features.len() {
        return Err(HarnessError::Config(format!(
            "{} target labels for {} feature rows",
            labels.labels.len(),
            features.len()
        )));
    }

    let adapt_dir = out.join("adapt");
    let mut names: Vec<String> = match std::fs::read_dir(&adapt_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".json"))
            .collect(),
        Err(_) => return Err(HarnessError::MissingArtifact(adapt_dir)),
    };
    if names.is_empty() {
        return Err(HarnessError::MissingArtifact(adapt_dir));
    }
    names.sort();

    let mut rows = Vec::with_capacity(names.len());
    for name in &names {
        let record: AdaptRecord =
            serde_json::from_str(&pipe.read(PathBuf::from("adapt").join(name))?)?;
        let merged = merged_params(&base, &tvs, &record)?;
        let scorer = ProbScorer::new(&merged, c_t)?;
        let pairs: Vec<RatingPair> = features
            .samples()
            .iter()
            .zip(&labels.labels)
            .map(|(s, &y)| {
                let dist = scorer.predict(&s.x)?;
                let predicted = score_from_distribution(dist.probs(), target_range)
                    .map_err(HarnessError::from)?;
                Ok(RatingPair::new(predicted, y))
            })
            .collect::<Result<_, HarnessError>>()?;
        rows.push((record.method, record.seed, qwk(&pairs, target_range)?));
    }
    rows.sort_by(|a, b| a.0.as_str().cmp(b.0.as_str()).then(a.1.cmp(&b.1)));

    let mut csv = String::from("target_id,method,seed,qwk\n");
    for (method, seed, kappa) in &rows {
        csv.push_str(&format!("t0,{method},{seed},{kappa}\n"));
    }
    pipe.write(METRICS_FILE, &csv)?;
    RunManifest::record(
        out,
        &cfg.hash()?,
        "evaluate",
        vec![METRICS_FILE.to_string()],
    )?;
    Ok(out.join(METRICS_FILE))
}
