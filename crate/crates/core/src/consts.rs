//! Numerical floors, caps, and tolerances used across the crate.
//!
//! These are pinned in one place so library code, the verification suites,
//! and the acceptance tests all agree on the exact numbers.

/// Floor applied to every posterior standard deviation built from raw
/// network outputs, and the minimum accepted by posterior constructors.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Largest admissible AR(1) coefficient. Values in `[0, ALPHA_MAX]` keep the
/// stationary variance finite and the innovation variance positive.
pub const ALPHA_MAX: f64 = 1.0 - 1e-6;

/// Fixed observation-model standard deviation of the toy decoder.
pub const OBS_STD: f64 = 0.1;

/// Convert nats to bits. Internal computation stays in nats; bits appear
/// only at reporting boundaries.
pub const NATS_TO_BITS: f64 = std::f64::consts::LOG2_E;

/// Rate solver: the bound at the returned alpha matches the target within
/// this many nats.
pub const SOLVER_RATE_TOL: f64 = 1e-9;

/// Rate solver round trip: recovering alpha from its own bound must land
/// within this of the original coefficient.
pub const SOLVER_ALPHA_TOL: f64 = 1e-6;

/// Numeric KL minimizer: stop when the gradient two-norm falls below this.
pub const MIN_KL_GRAD_TOL: f64 = 1e-10;

/// Numeric KL minimizer: iteration cap per restart.
pub const MIN_KL_MAX_ITERS: usize = 100_000;

/// Numeric KL minimizer: number of random restarts.
pub const MIN_KL_RESTARTS: usize = 5;

/// Agreement required between the two sequential-KL evaluation routes,
/// relative to `max(|a|, |b|, 1)`.
pub const PATH_EQUIV_TOL: f64 = 1e-10;

/// Agreement required between the closed-form bound and the numeric minimum.
pub const BOUND_VALUE_TOL: f64 = 1e-6;

/// Agreement required between the analytic argmin and the numeric argmin.
pub const BOUND_ARGMIN_TOL: f64 = 1e-4;

/// Gradient checks on full objectives must pass at this relative error.
pub const GRAD_CHECK_TOL: f64 = 1e-5;

/// Slack allowed when checking `KL >= delta` style guarantees (float dust).
pub const DELTA_GUARANTEE_SLACK: f64 = 1e-9;

/// A trained run counts as collapsed when its final rate falls below this
/// many nats per sequence.
pub const COLLAPSE_THRESHOLD_NATS: f64 = 0.01;

/// `|a - b| <= tol * max(|a|, |b|, 1)`: relative closeness with an absolute
/// floor so comparisons near zero stay meaningful.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}
