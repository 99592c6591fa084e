//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::Path;

use merge_adapt::harness::{
    run_gen_data, run_pretrain, ExperimentConfig, TargetLabels, BASE_PARAMS_FILE,
    TARGET_FEATURES_FILE, TARGET_LABELS_FILE,
};
use merge_adapt::metrics::{qwk, RatingPair};
use merge_adapt::param_algebra::{merge, MergeSpec, ParamSet, TaskVector};
use merge_adapt::scoring_model::{LabeledSet, ProbScorer};
use tempfile::TempDir;

/// Generates domains and pretrains sources under a fresh temp directory.
pub fn setup(cfg: &ExperimentConfig) -> TempDir {
    let dir = TempDir::new().unwrap();
    run_gen_data(dir.path(), cfg).unwrap();
    run_pretrain(dir.path()).unwrap();
    dir
}

fn read(out: &Path, rel: &str) -> String {
    std::fs::read_to_string(out.join(rel)).unwrap()
}

/// Full-target QWK of the merge at `lambda`, loaded from pipeline artifacts.
pub fn eval_lambda(out: &Path, cfg: &ExperimentConfig, lambda: &[f64]) -> f64 {
    let base = ParamSet::from_json(&read(out, BASE_PARAMS_FILE)).unwrap();
    let tvs: Vec<TaskVector> = (0..cfg.n_sources)
        .map(|j| TaskVector::from_json(&read(out, &format!("models/tv_{j}.json"))).unwrap())
        .collect();
    let spec = MergeSpec::new(lambda.to_vec()).unwrap();
    let merged = merge(&base, &tvs, &spec).unwrap();
    qwk_of(out, cfg, &merged)
}

/// Full-target QWK of an explicit parameter set.
pub fn qwk_of(out: &Path, cfg: &ExperimentConfig, params: &ParamSet) -> f64 {
    let range = cfg.target_score_range().unwrap();
    let scorer = ProbScorer::new(params, range.class_count()).unwrap();
    let features = LabeledSet::from_jsonl(&read(out, TARGET_FEATURES_FILE)).unwrap();
    let labels: TargetLabels = serde_json::from_str(&read(out, TARGET_LABELS_FILE)).unwrap();
    let pairs: Vec<RatingPair> = features
        .samples()
        .iter()
        .zip(&labels.labels)
        .map(|(s, &y)| {
            let dist = scorer.predict(&s.x).unwrap();
            let pred = merge_adapt::metrics::score_from_distribution(dist.probs(), range).unwrap();
            RatingPair::new(pred, y)
        })
        .collect();
    qwk(&pairs, range).unwrap()
}

/// A single source drawn from the same concept and range as the target.
pub fn matched_config() -> ExperimentConfig {
    ExperimentConfig {
        n_sources: 1,
        n_adversarial: 0,
        source_ranges: vec![(1, 6)],
        target_range: (1, 6),
        label_noise: 0.0,
        concept_jitter: 0.0,
        shift_scale: 0.0,
        novel_shift: 0.0,
        seeds: vec![0],
        ..ExperimentConfig::default()
    }
}
