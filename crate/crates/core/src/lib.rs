//! Bayesian parameter inference for partially observed scalar SDEs driven by
//! fractional Brownian motion.
//!
//! The hidden process is Euler-discretized at mesh `2^{-l}`. Particle
//! marginal Metropolis-Hastings runs on cheap blockwise-independent "pseudo"
//! fBM increments, and importance weights correct the output to the exact
//! discretized posterior. A multilevel telescoping estimator combines coupled
//! fine/coarse chains across levels.
//!
//! Module map:
//!
//! * [`fgn`]: circulant-embedding fGN, pseudo and true increment maps.
//! * [`sde`]: models, Euler maps, Lamperti transform, synthetic data.
//! * [`pf`]: bootstrap particle filters over noise blocks.
//! * [`pmcmc`]: PMMH chains on the single-level and max-coupled targets.
//! * [`ml`]: correction weights, self-normalized and multilevel estimators.
//! * [`harness`]: configuration, experiments, cost-vs-MSE studies, CSV output.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cost;
pub mod fgn;
pub mod harness;
pub mod ml;
pub mod pf;
pub mod pmcmc;
pub mod rng;
pub mod sde;
