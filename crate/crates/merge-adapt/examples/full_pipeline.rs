//! Runs every pipeline stage end to end on a generated benchmark.
//!
//! Mirrors what the CLI does: generate domains, train per-source scorers and
//! fit priors, search merge coefficients with a few methods, evaluate each
//! merged model on the held-out target labels, and print the ranked report.
//! Everything lands in a temporary directory that is removed on exit.
//!
//! Run with: cargo run --example full_pipeline

use std::error::Error;

use merge_adapt::harness::{
    render_text, run_adapt, run_evaluate, run_gen_data, run_pretrain, run_report, AdaptMethod,
    ExperimentConfig,
};

fn main() -> Result<(), Box<dyn Error>> {
    let cfg = ExperimentConfig::default();
    let dir = std::env::temp_dir().join(format!("merge-adapt-demo-{}", std::process::id()));
    let out = dir.as_path();

    println!("working in {}", out.display());
    run_gen_data(out, &cfg)?;
    println!(
        "generated {} sources (last {} adversarial) and a target of {} samples",
        cfg.n_sources, cfg.n_adversarial, cfg.samples_per_domain
    );

    run_pretrain(out)?;
    println!("trained sources, extracted task vectors, fit priors");

    let methods = [
        AdaptMethod::Pim,
        AdaptMethod::RandomSearch,
        AdaptMethod::Averaging,
        AdaptMethod::TaskArithmetic,
    ];
    for method in methods {
        for &seed in &cfg.seeds {
            run_adapt(out, method, seed)?;
        }
        println!("adapted with {method} on {} run seeds", cfg.seeds.len());
    }

    let csv = run_evaluate(out)?;
    println!("metrics at {}", csv.display());

    let report = run_report(out)?;
    println!();
    print!("{}", render_text(&report));

    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
