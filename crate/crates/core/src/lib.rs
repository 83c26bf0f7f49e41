//! Small-area estimation with global-local shrinkage priors.
//!
//! Survey estimates from several sources per area are combined through a
//! three-level normal model whose variances carry horseshoe or lasso priors,
//! fitted by Gibbs sampling. The crate also carries the simulation harness
//! used to compare the model variants.

pub mod diagnostics;
pub mod distributions;
mod error;
pub mod gibbs;
pub mod io;
pub mod model;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod simgen;
pub mod summary;

pub use error::{Error, Result};
pub use gibbs::{run_chain, run_chains, DrawStore, Quantity};
pub use model::{ChainState, ModelTag, Monitor, SamplerSettings, Scan, SourcePanel};
