//! Source-free multi-source adaptation by merging low-rank task vectors.
//!
//! Given several scoring models fine-tuned on different source domains, this
//! crate searches for mixing coefficients that merge their task vectors into
//! one model for an unlabeled target domain. No source data is needed at
//! adaptation time: the search objective scores a merge candidate by how
//! confident its target predictions are and how closely their aggregate
//! matches a score prior fitted from per-source summary statistics.
//!
//! The pieces compose bottom-up:
//!
//! - [`param_algebra`]: parameter sets, factored task vectors, and the merge
//!   operators (weighted combination, averaging, task arithmetic, TIES).
//! - [`scoring_model`]: a linear softmax scorer over feature vectors, its
//!   training loop, and prediction.
//! - [`score_prior`]: Beta fitting from scaled integer scores, moment-matched
//!   unification across sources, and discretization onto a target scale.
//! - [`pim_objective`]: the adaptation objective, a prior-anchored
//!   information-maximization score over a batch of predictions.
//! - [`bayes_opt`]: Gaussian-process Bayesian optimization with expected
//!   improvement, plus a budget-matched random-search baseline.
//! - [`metrics`]: quadratic weighted kappa for ordinal agreement.
//! - [`harness`]: the experiment pipeline behind the CLI, from synthetic
//!   domain generation through adaptation, evaluation, and reporting, with a
//!   file-access policy that enforces the source-free contract at runtime.
//! - [`special`]: the few special functions the above need (log-gamma,
//!   regularized incomplete beta, normal CDF).
//!
//! The `examples/` directory exercises each capability in isolation;
//! `examples/full_pipeline.rs` runs the whole experiment end to end.

pub mod bayes_opt;
pub mod harness;
pub mod metrics;
pub mod param_algebra;
pub mod pim_objective;
pub mod score_prior;
pub mod scoring_model;
pub mod special;
