//! Quantile-based reliability design optimization (RBDO) on adaptive
//! Kriging surrogates.
//!
//! The toolkit solves problems of the form
//!
//! ```text
//! d* = argmin c(d)   subject to   f_j(d) <= 0,
//!                                 Q_alpha_k( M_k(X(d), Z) ) <= g_bar_k,
//! ```
//!
//! where the hard constraints bound quantiles of expensive performance
//! models `M_k` under design-conditioned uncertainty `X|d` and
//! environmental uncertainty `Z`. Each `M_k` is replaced by an ordinary
//! Kriging surrogate built once in an augmented hyperrectangular space
//! covering all realizations of `(X, Z)`, and the surrogate's design of
//! experiments is enriched in two stages:
//!
//! 1. a *global* stage that adds points near the quantile contour across
//!    the whole design space until the deviation-number coverage criterion
//!    is met, and
//! 2. a *local* stage embedded in the optimization loop that adds points
//!    whenever the Kriging-variance bounds around the current quantile
//!    estimate are too wide.
//!
//! The optimizer is a constrained (1+1)-CMA-ES; quantiles are estimated by
//! Monte Carlo on the surrogate. Everything is deterministic under a single
//! run seed.
//!
//! Entry points: [`benchmarks`] for the bundled analytical problems,
//! [`optimizer::run_qrbdo`] for the full procedure, and the `qrbdo` binary
//! for file-based runs.

pub mod benchmarks;
pub mod cma;
pub mod config;
pub mod distributions;
pub mod doe;
pub mod enrichment;
pub mod error;
pub mod kriging;
pub mod optimizer;
pub mod output;
pub mod problem;
pub mod quantile;
pub mod rng;
pub mod space;
pub mod special;

pub use config::RunConfig;
pub use distributions::{
    DesignVariable, EnvVariable, Marginal, MarginalKind, ProbabilisticModel, Spread,
};
pub use error::{QrbdoError, Result};
pub use kriging::{Doe, KrigingModel};
pub use optimizer::{run_qrbdo, RbdoResult};
pub use problem::{HardConstraint, Problem};
pub use quantile::QuantileEstimate;
pub use space::AugmentedSpace;
