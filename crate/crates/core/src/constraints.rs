//! Posterior constructions that keep the KL to the prior from collapsing.
//!
//! Two mechanisms, matching the two prior shapes:
//!
//! - **Independent constraint** against an N(0, 1) prior: pick the posterior
//!   variance inside the interval where `0.5 * (s^2 - ln s^2 - 1) <= delta`,
//!   then push the mean far enough out that the per-cell KL is at least
//!   delta. The mean is `sqrt(2*delta + 1 + ln s^2 - s^2) + max(0, raw_mu)`:
//!   the square root alone makes the KL exactly delta, and the rectified
//!   offset can only add. The guarantee is structural, not a penalty.
//! - **Temporal head** for the AR(1) prior: a plain softplus-plus-floor
//!   std head. No per-cell guarantee is needed because the prior's
//!   committed rate already provides the floor.
//!
//! Every construction exists twice: a pure array path and a tape path built
//! from [`Graph`] ops. Both compute the same floating-point expressions in
//! the same order, so they agree bit for bit; tests enforce that.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid_scalar, softplus_scalar, Graph, NodeId};
use crate::consts::SIGMA_FLOOR;
use crate::error::{Error, Result};
use crate::gauss_kl::GaussianSeqPosterior;

/// Additive guard inside the mean's square root. Keeps the backward pass of
/// `sqrt` finite when the variance sits exactly on an interval endpoint;
/// only ever increases the mean, so the KL guarantee is preserved.
const MU_SQRT_GUARD: f64 = 1e-24;

/// Residual tolerance of the feasible-interval root finder.
const INTERVAL_RESIDUAL_TOL: f64 = 1e-10;

/// Variances `v` with `ln v - v + 2*delta + 1 >= 0`, i.e. those whose
/// zero-mean KL to N(0, 1) is at most `delta`, form an interval around 1.
/// Returns the interval endpoints as standard deviations `(sigma_lo,
/// sigma_hi)` with residual `|ln v - v + 2*delta + 1| <= 1e-10` at both
/// ends. `delta = 0` collapses the interval to `(1, 1)`.
pub fn feasible_sigma_interval(delta: f64) -> Result<(f64, f64)> {
    if !delta.is_finite() || delta < 0.0 {
        return Err(Error::Domain(format!(
            "delta must be finite and >= 0, got {delta}"
        )));
    }
    if delta == 0.0 {
        return Ok((1.0, 1.0));
    }
    let g = |v: f64| v.ln() - v + 2.0 * delta + 1.0;
    // g is increasing on (0, 1), peaks at g(1) = 2*delta > 0, then decreases;
    // bracket each root by doubling/halving away from 1.
    let mut lo = 0.5;
    while g(lo) >= 0.0 {
        lo *= 0.5;
    }
    let v_lo = bisect_root(g, lo, 1.0)?;
    let mut hi = 2.0;
    while g(hi) >= 0.0 {
        hi *= 2.0;
    }
    let v_hi = bisect_root(g, 1.0, hi)?;
    Ok((v_lo.sqrt(), v_hi.sqrt()))
}

/// Bisection for a sign change of `g` on `[lo, hi]`, run to f64 exhaustion,
/// verified against the residual tolerance.
fn bisect_root(g: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> Result<f64> {
    let (glo, ghi) = (g(lo), g(hi));
    if glo == 0.0 {
        return Ok(lo);
    }
    if ghi == 0.0 {
        return Ok(hi);
    }
    if glo.signum() == ghi.signum() {
        return Err(Error::Contract(format!(
            "no sign change on [{lo}, {hi}]: g = ({glo}, {ghi})"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid).signum() == glo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let root = 0.5 * (lo + hi);
    if g(root).abs() > INTERVAL_RESIDUAL_TOL {
        return Err(Error::NoConverge(format!(
            "bisection residual {} at {root}",
            g(root)
        )));
    }
    Ok(root)
}

/// Per-cell KL floor against an N(0, 1) prior, with its precomputed feasible
/// std interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndependentDeltaConstraint {
    delta: f64,
    sigma_lo: f64,
    sigma_hi: f64,
}

impl IndependentDeltaConstraint {
    pub fn new(delta: f64) -> Result<Self> {
        let (sigma_lo, sigma_hi) = feasible_sigma_interval(delta)?;
        Ok(Self {
            delta,
            sigma_lo,
            sigma_hi,
        })
    }

    /// Committed per-cell KL in nats.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Feasible std interval `(sigma_lo, sigma_hi)`.
    pub fn sigma_interval(&self) -> (f64, f64) {
        (self.sigma_lo, self.sigma_hi)
    }

    fn constrain_scalar(&self, raw_mu: f64, raw_sigma: f64) -> (f64, f64) {
        let sigma = self.sigma_lo + (self.sigma_hi - self.sigma_lo) * sigmoid_scalar(raw_sigma);
        let v = sigma * sigma;
        let inner = (v.ln() + (2.0 * self.delta + 1.0)) - v;
        let mu = (inner.max(0.0) + MU_SQRT_GUARD).sqrt() + raw_mu.max(0.0);
        (mu, sigma)
    }

    /// Map raw head outputs to constrained `(means, stds)`; every cell of
    /// the result has `KL(N(mu, sigma^2) || N(0, 1)) >= delta` by
    /// construction, for any finite raw inputs.
    pub fn constrain(
        &self,
        raw_mus: &Array2<f64>,
        raw_sigmas: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        if raw_mus.dim() != raw_sigmas.dim() {
            return Err(Error::Config(format!(
                "raw mean shape {:?} != raw sigma shape {:?}",
                raw_mus.dim(),
                raw_sigmas.dim()
            )));
        }
        if raw_mus.iter().any(|x| !x.is_finite())
            || raw_sigmas.iter().any(|x| !x.is_finite())
        {
            return Err(Error::Domain("raw head outputs must be finite".into()));
        }
        let mut mus = Array2::zeros(raw_mus.dim());
        let mut sigmas = Array2::zeros(raw_mus.dim());
        for (idx, (&rm, &rs)) in raw_mus.iter().zip(raw_sigmas.iter()).enumerate() {
            let (r, c) = (idx / raw_mus.ncols(), idx % raw_mus.ncols());
            let (m, s) = self.constrain_scalar(rm, rs);
            mus[[r, c]] = m;
            sigmas[[r, c]] = s;
        }
        Ok((mus, sigmas))
    }

    /// Tape version of [`IndependentDeltaConstraint::constrain`]: same
    /// expressions in the same order, so values match the pure path bit for
    /// bit while gradients flow to both raw heads.
    pub fn constrain_graph(
        &self,
        g: &mut Graph,
        raw_mu: NodeId,
        raw_sigma: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let sig = g.sigmoid(raw_sigma);
        let scaled = g.mul_scalar(sig, self.sigma_hi - self.sigma_lo);
        let sigma = g.add_scalar(scaled, self.sigma_lo);
        let v = g.square(sigma);
        let lnv = g.log(v);
        let shifted = g.add_scalar(lnv, 2.0 * self.delta + 1.0);
        let inner = g.sub(shifted, v)?;
        let pos = g.relu(inner);
        let guarded = g.add_scalar(pos, MU_SQRT_GUARD);
        let base = g.sqrt(guarded);
        let lift = g.relu(raw_mu);
        let mu = g.add(base, lift)?;
        Ok((mu, sigma))
    }
}

/// Convenience wrapper: build the constraint for `delta` and apply it.
pub fn constrain_independent(
    raw_mus: &Array2<f64>,
    raw_sigmas: &Array2<f64>,
    delta: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    IndependentDeltaConstraint::new(delta)?.constrain(raw_mus, raw_sigmas)
}

/// Temporal posterior head: means pass through, stds are
/// `softplus(raw) + 1e-4`. Used with the AR(1) prior, where the committed
/// rate, not the head, guarantees the floor.
pub fn temporal_posterior(
    raw_mus: &Array2<f64>,
    raw_sigmas: &Array2<f64>,
) -> Result<GaussianSeqPosterior> {
    if raw_mus.iter().any(|x| !x.is_finite()) || raw_sigmas.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("raw head outputs must be finite".into()));
    }
    let stds = raw_sigmas.mapv(|x| softplus_scalar(x) + SIGMA_FLOOR);
    GaussianSeqPosterior::new(raw_mus.clone(), stds)
}

/// Tape version of [`temporal_posterior`]: `(means, stds)` nodes with the
/// identical softplus-plus-floor arithmetic.
pub fn temporal_posterior_graph(
    g: &mut Graph,
    raw_mu: NodeId,
    raw_sigma: NodeId,
) -> (NodeId, NodeId) {
    let sp = g.softplus(raw_sigma);
    let sigma = g.add_scalar(sp, SIGMA_FLOOR);
    (raw_mu, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::gauss_kl::kl_univariate;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interval_frozen_for_small_delta() {
        // delta = 0.08 bits in nats.
        let delta = 0.08 * std::f64::consts::LN_2;
        let (lo, hi) = feasible_sigma_interval(delta).unwrap();
        assert_abs_diff_eq!(lo, 0.774521233258624, epsilon = 1e-9);
        assert_abs_diff_eq!(hi, 1.244035824175190, epsilon = 1e-9);
        let g = |v: f64| v.ln() - v + 2.0 * delta + 1.0;
        assert!(g(lo * lo).abs() <= 1e-10, "lower residual {}", g(lo * lo));
        assert!(g(hi * hi).abs() <= 1e-10, "upper residual {}", g(hi * hi));
    }

    #[test]
    fn interval_brackets_unit_sigma_and_respects_delta() {
        for &delta in &[1e-4, 0.05, 0.5, 2.0, 10.0] {
            let (lo, hi) = feasible_sigma_interval(delta).unwrap();
            assert!(lo < 1.0 && 1.0 < hi, "interval must straddle sigma = 1");
            for i in 0..=100 {
                let s = lo + (hi - lo) * i as f64 / 100.0;
                let kl = 0.5 * (s * s - (s * s).ln() - 1.0);
                assert!(
                    kl <= delta + 1e-9,
                    "sigma {s} inside the interval exceeds delta: {kl} > {delta}"
                );
            }
            let below = lo * 0.99;
            let just_out = 0.5 * (below * below - (below * below).ln() - 1.0);
            assert!(just_out > delta, "below sigma_lo must exceed delta");
            let above = hi * 1.01;
            let just_out = 0.5 * (above * above - (above * above).ln() - 1.0);
            assert!(just_out > delta, "above sigma_hi must exceed delta");
        }
    }

    #[test]
    fn interval_degenerates_at_zero_and_rejects_negative() {
        assert_eq!(feasible_sigma_interval(0.0).unwrap(), (1.0, 1.0));
        assert!(matches!(
            feasible_sigma_interval(-0.1),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            feasible_sigma_interval(f64::NAN),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn constraint_guarantees_delta_for_any_raw_inputs() {
        // 10_000 raw draws per delta, including saturating magnitudes.
        for &delta in &[0.01, 0.1, 1.0] {
            let con = IndependentDeltaConstraint::new(delta).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2024);
            for _ in 0..10_000 {
                let rm = rng.gen_range(-50.0..50.0);
                let rs = rng.gen_range(-50.0..50.0);
                let (mu, sigma) = con.constrain_scalar(rm, rs);
                let kl = kl_univariate(mu, sigma, 0.0, 1.0).unwrap();
                assert!(
                    kl >= delta - 1e-9,
                    "KL {kl} < delta {delta} at raw ({rm}, {rs})"
                );
            }
        }
    }

    #[test]
    fn constraint_is_tight_when_raw_mu_is_nonpositive() {
        let delta = 0.5;
        let con = IndependentDeltaConstraint::new(delta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1_000 {
            let rm = rng.gen_range(-20.0..0.0);
            let rs = rng.gen_range(-6.0..6.0);
            let (mu, sigma) = con.constrain_scalar(rm, rs);
            let kl = kl_univariate(mu, sigma, 0.0, 1.0).unwrap();
            assert!(
                (kl - delta).abs() <= 1e-9,
                "nonpositive raw mean must sit on the floor: KL {kl} vs {delta}"
            );
        }
    }

    #[test]
    fn midpoint_example_at_zero_raw_inputs() {
        let delta = 0.5;
        let con = IndependentDeltaConstraint::new(delta).unwrap();
        let (lo, hi) = con.sigma_interval();
        let (mu, sigma) = con.constrain_scalar(0.0, 0.0);
        // logistic(0) = 1/2 puts sigma at the interval midpoint.
        assert_abs_diff_eq!(sigma, lo + 0.5 * (hi - lo), epsilon = 1e-15);
        let kl = kl_univariate(mu, sigma, 0.0, 1.0).unwrap();
        assert!((kl - delta).abs() <= 1e-9);
    }

    #[test]
    fn zero_delta_reduces_to_rectified_mean_with_unit_sigma() {
        let con = IndependentDeltaConstraint::new(0.0).unwrap();
        for &rm in &[-3.0, -0.5, 0.0, 0.7, 4.2] {
            let (mu, sigma) = con.constrain_scalar(rm, 1.3);
            assert_eq!(sigma, 1.0);
            assert_abs_diff_eq!(mu, rm.max(0.0), epsilon = 1e-9);
        }
    }

    #[test]
    fn sigma_is_monotone_in_raw_sigma() {
        let con = IndependentDeltaConstraint::new(0.3).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in -30..=30 {
            let (_, sigma) = con.constrain_scalar(0.0, i as f64 * 0.4);
            assert!(sigma > prev, "sigma must increase with raw_sigma");
            prev = sigma;
        }
    }

    #[test]
    fn array_and_graph_paths_match_bitwise() {
        let con = IndependentDeltaConstraint::new(0.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let raw_mu = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-4.0..4.0));
        let raw_sigma = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-4.0..4.0));
        let (mus, sigmas) = con.constrain(&raw_mu, &raw_sigma).unwrap();
        let mut g = Graph::new();
        let rm = g.var(raw_mu.clone());
        let rs = g.var(raw_sigma.clone());
        let (mu_id, sigma_id) = con.constrain_graph(&mut g, rm, rs).unwrap();
        assert_eq!(g.value(mu_id), &mus, "graph means must match array means");
        assert_eq!(g.value(sigma_id), &sigmas);
        // Temporal head too.
        let pq = temporal_posterior(&raw_mu, &raw_sigma).unwrap();
        let (tm, ts) = temporal_posterior_graph(&mut g, rm, rs);
        assert_eq!(g.value(tm), pq.means());
        assert_eq!(g.value(ts), pq.stds());
    }

    #[test]
    fn both_constructors_pass_gradient_checks() {
        // Moderate raw values keep clear of the relu kink at raw_mu = 0.
        let con = IndependentDeltaConstraint::new(0.4).unwrap();
        let params = vec![
            array![[0.8, -1.2, 0.3], [2.0, -0.6, 1.1]],
            array![[0.2, 1.4, -0.9], [-2.2, 0.5, 3.0]],
        ];
        let err = grad_check(
            |g, p| {
                let (mu, sigma) = con.constrain_graph(g, p[0], p[1])?;
                let m2 = g.square(mu);
                let s2 = g.square(sigma);
                let t = g.add(m2, s2)?;
                Ok(g.sum(t))
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-6, "independent constraint grad error {err}");
        let err = grad_check(
            |g, p| {
                let (mu, sigma) = temporal_posterior_graph(g, p[0], p[1]);
                let m2 = g.square(mu);
                let s2 = g.square(sigma);
                let t = g.add(m2, s2)?;
                Ok(g.sum(t))
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-7, "temporal head grad error {err}");
    }

    #[test]
    fn temporal_head_applies_softplus_floor() {
        let raw_mu = array![[0.3, -1.0]];
        let raw_sigma = array![[0.0, -800.0]];
        let q = temporal_posterior(&raw_mu, &raw_sigma).unwrap();
        assert_eq!(q.means(), &raw_mu);
        // softplus(0) + 1e-4.
        assert_abs_diff_eq!(q.stds()[[0, 0]], 0.693247180559945, epsilon = 1e-12);
        // Deeply negative raw values land exactly on the floor.
        assert_eq!(q.stds()[[0, 1]], SIGMA_FLOOR);
        assert!(matches!(
            temporal_posterior(&array![[f64::NAN]], &array![[0.0]]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn constrain_checks_shapes() {
        let con = IndependentDeltaConstraint::new(0.1).unwrap();
        let a = Array2::zeros((2, 3));
        let b = Array2::zeros((3, 2));
        assert!(matches!(con.constrain(&a, &b), Err(Error::Config(_))));
    }
}
