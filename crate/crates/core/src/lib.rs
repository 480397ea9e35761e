//! Committed-rate machinery for sequential VAEs at desk scale.
//!
//! A sequential VAE whose posterior factorizes over time cannot hide from an
//! autoregressive prior: against an AR(1) chain with coefficient alpha, any
//! such posterior pays a computable minimum KL, the committed rate. This
//! crate implements that machinery end to end:
//!
//! - [`gauss_kl`]: exact sequential Gaussian KL via two independent routes,
//!   with a per-(timestep, dimension) attribution.
//! - [`ar1`]: the stationary AR(1) prior, the committed-rate bound, and the
//!   solver that turns a target rate in nats into a coefficient.
//! - [`constraints`]: delta-constrained posteriors, both the independent
//!   per-cell construction and the softplus-floored temporal head.
//! - [`autodiff`]: a small reverse-mode tape over dense f64 matrices, enough
//!   to train the models here and to gradient-check everything.
//! - [`nets`]: GRU encoder/decoder stacks (anti-causal, non-causal, causal)
//!   and the auxiliary AR(1) fit to the aggregate posterior.
//! - [`mc_oracle`]: Monte Carlo KL estimation and a direct numeric KL
//!   minimizer, used as independent checks on the closed forms.
//! - [`data`]: a regime-switching synthetic dataset with a Kalman-filter
//!   Bayes oracle.
//! - [`training`]: ELBO objectives (vanilla, beta, free-bits, annealed,
//!   rate-targeted), the training loop, the linear probe, and sweeps.
//! - [`verify`]: reusable check suites behind the CLI and acceptance tests.
//!
//! All computation is in nats; bits appear only at reporting boundaries.
//! Everything is deterministic given a seed.

pub mod ar1;
pub mod autodiff;
pub mod consts;
pub mod constraints;
pub mod data;
pub mod error;
pub mod gauss_kl;
pub mod mc_oracle;
pub mod nets;
pub mod rng;
pub mod training;
pub mod verify;

pub use ar1::{linspace_alphas, solve_alpha_for_rate, Ar1Prior};
pub use error::{Error, Result};
pub use gauss_kl::{kl_seq_closed_form, kl_seq_decomposed, kl_univariate, GaussianSeqPosterior, KlBreakdown};
