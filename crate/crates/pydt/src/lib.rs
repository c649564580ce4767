//! Pitman-Yor diffusion trees: Bayesian hierarchical clustering over
//! multifurcating trees.
//!
//! The crate covers the full modeling loop:
//!
//! - [`generative`]: forward simulation of tree structures, divergence times,
//!   and Brownian locations;
//! - [`density`]: exact log joint factors (branching structure, divergence
//!   times, locations) plus a sequential replay oracle;
//! - [`bp`]: Gaussian message passing for collapsed likelihoods, posterior
//!   location marginals, joint backward sampling, and local attachment
//!   scores;
//! - [`mcmc`]: a collapsed Metropolis-within-Gibbs sampler over structures,
//!   times, and hyperparameters;
//! - [`em`]: greedy Bayesian EM with a K-best structure search;
//! - [`predictive`]: predictive densities as weighted Gaussian mixtures;
//! - [`probit`]: binary observations via expectation propagation and
//!   auxiliary slice updates.

pub mod bp;
pub mod data;
pub mod density;
pub mod divergence;
pub mod em;
pub mod error;
pub mod generative;
pub mod hyper;
pub mod mcmc;
pub mod optim;
pub mod predictive;
pub mod probit;
pub mod slice;
pub mod test_support;
pub mod tree;
pub mod treeio;

pub use data::{BinaryData, DataSet};
pub use error::{Error, Result};
pub use hyper::{BetaPrior, GammaPrior, HyperPriors, Hyperparams};
pub use tree::{Attachment, DetachRecord, Node, NodeId, NodeKind, Tree};
