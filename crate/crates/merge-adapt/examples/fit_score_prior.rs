//! Builds a target-range score prior from per-source score histograms.
//!
//! Each source grades on its own integer scale. Scores are mapped into (0, 1),
//! a Beta distribution is fit per source by maximum likelihood, the Betas are
//! unified by moment matching, and the unified Beta is discretized onto the
//! target scale. No raw scores cross the source boundary, only (alpha, beta).
//!
//! Run with: cargo run --example fit_score_prior

use merge_adapt::score_prior::{
    build_prior, fit_beta_mle, scale_scores, ScoreRange, SourceStatistics,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Draws integer scores with a lenient or strict tilt.
fn sample_scores(rng: &mut ChaCha8Rng, range: ScoreRange, tilt: f64, n: usize) -> Vec<i64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().powf(tilt);
            let c = (u * range.class_count() as f64) as i64;
            range.min() + c.min(range.class_count() as i64 - 1)
        })
        .collect()
}

fn bar(p: f64) -> String {
    "#".repeat((p * 60.0).round() as usize)
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let sources = [
        ("essays-0-3", ScoreRange::new(0, 3).unwrap(), 0.7),
        ("essays-1-6", ScoreRange::new(1, 6).unwrap(), 1.4),
        ("essays-0-4", ScoreRange::new(0, 4).unwrap(), 1.0),
    ];

    let mut stats = Vec::new();
    for (id, range, tilt) in sources {
        let scores = sample_scores(&mut rng, range, tilt, 500);
        let scaled = scale_scores(&scores, range).unwrap();
        let params = fit_beta_mle(&scaled).unwrap();
        println!(
            "{id}: range [{}, {}], fitted Beta({:.3}, {:.3}), mean {:.3}",
            range.min(),
            range.max(),
            params.alpha(),
            params.beta(),
            params.mean()
        );
        stats.push(SourceStatistics {
            source_id: id.into(),
            range,
            params,
            n: scores.len(),
        });
    }

    let target = ScoreRange::new(1, 6).unwrap();
    let prior = build_prior(&stats, target).unwrap();

    println!();
    println!("unified prior on the target scale [1, 6]:");
    for (i, p) in prior.probs().iter().enumerate() {
        println!("  score {}: {:.4} {}", target.min() + i as i64, p, bar(*p));
    }
    let total: f64 = prior.probs().iter().sum();
    println!("  total {total:.12}");
}
