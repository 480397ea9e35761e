//! Named verification suites behind the command-line `verify` subcommand
//! and the acceptance tests. Each suite cross-examines one slice of the
//! machinery against an independent referee and reports structured
//! pass/fail results instead of panicking, so the same batteries run from
//! the command line, from integration tests, and inside scripts.
//!
//! The four suites:
//!
//! * `kl`: the closed-form sequential KL against the chained per-step
//!   decomposition (1e-10 relative on 1e4 fuzzed instances) and against
//!   the Monte Carlo estimator (within 4 standard errors at 1e5 samples
//!   on 200 fuzzed instances).
//! * `bound`: the committed-rate formula against the numeric minimizer on
//!   the full coefficient/length/dimension grid, the minimizing variance
//!   profile, the alpha solver round trip, and the per-dimension KL
//!   guarantee of the independent constraint on fuzzed raw head outputs.
//! * `grad`: central-difference checks of the full training objective on
//!   a sequence-length-6, two-latent-dimension model, one check per
//!   posterior constraint route.
//! * `masks`: exact-zero causality gradients through the graph, no finite
//!   differences involved.
//!
//! Monte Carlo rerun policy: a 4-standard-error gate has a false-positive
//! probability near 6.3e-5 per instance, so across 200 instances a single
//! spurious miss shows up in roughly one run out of eighty. An instance
//! that misses the gate is therefore re-estimated once with a fresh
//! estimator seed (same posterior and prior) and must pass the rerun; a
//! second consecutive miss on the same instance fails the suite.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::ar1::{solve_alpha_for_rate, Ar1Prior};
use crate::autodiff::{grad_check, Graph, NodeId};
use crate::consts::{
    BOUND_ARGMIN_TOL, BOUND_VALUE_TOL, DELTA_GUARANTEE_SLACK, GRAD_CHECK_TOL, PATH_EQUIV_TOL,
    SOLVER_ALPHA_TOL,
};
use crate::constraints::IndependentDeltaConstraint;
use crate::error::{Error, Result};
use crate::gauss_kl::{kl_seq_closed_form, kl_seq_decomposed, kl_univariate, GaussianSeqPosterior};
use crate::mc_oracle::{mc_kl_estimate, numeric_min_kl};
use crate::nets::{ConstraintMode, EncoderMode, ModelCfg, ToyModel};
use crate::rng::{derive_seed, stream_rng};
use crate::training::{build_elbo, ObjectiveCfg};

/// Suite names accepted by [`run_suite`].
pub const SUITES: [&str; 4] = ["kl", "bound", "grad", "masks"];

/// One named check inside a suite.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst measured margin and the tolerance it was held to.
    pub detail: String,
}

/// Outcome of one suite run; serializes to the JSON report the command
/// line emits.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    fn new(suite: &str, seed: u64) -> Self {
        SuiteReport {
            suite: suite.to_string(),
            seed,
            passed: true,
            checks: Vec::new(),
        }
    }

    fn record(&mut self, name: &str, passed: bool, detail: String) {
        self.passed &= passed;
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    /// Pretty JSON for the machine-readable report.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Run one suite by name. Unknown names are a configuration error.
pub fn run_suite(suite: &str, seed: u64) -> Result<SuiteReport> {
    match suite {
        "kl" => kl_suite(seed),
        "bound" => bound_suite(seed),
        "grad" => grad_suite(seed),
        "masks" => masks_suite(seed),
        other => Err(Error::Config(format!(
            "unknown suite {other:?}; available: kl, bound, grad, masks"
        ))),
    }
}

/// Random posterior/prior pair in the regime the trainer visits: up to 12
/// steps, up to 4 dimensions, means within three prior standard
/// deviations, posterior scales from sharp (0.1) to diffuse (3).
fn fuzz_instance(rng: &mut impl Rng, min_n: usize) -> Result<(GaussianSeqPosterior, Ar1Prior)> {
    let n = rng.gen_range(min_n..=12);
    let d = rng.gen_range(1..=4);
    let mu = Array2::from_shape_fn((n, d), |_| rng.gen_range(-3.0..3.0));
    let sd = Array2::from_shape_fn((n, d), |_| rng.gen_range(0.1..3.0));
    let alphas = Array1::from_shape_fn(d, |_| rng.gen_range(0.0..0.99));
    Ok((GaussianSeqPosterior::new(mu, sd)?, Ar1Prior::new(alphas)?))
}

/// Closed-form KL against the chained decomposition and the Monte Carlo
/// estimator. See the module docs for the rerun policy.
pub fn kl_suite(seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("kl", seed);

    let mut rng = stream_rng(seed, 0x7A7B);
    let mut worst_dev = 0.0_f64;
    for _ in 0..10_000 {
        let (q, p) = fuzz_instance(&mut rng, 1)?;
        let total = kl_seq_closed_form(&q, &p)?.total;
        let chained = kl_seq_decomposed(&q, &p)?;
        let dev = (total - chained).abs() / total.abs().max(chained.abs()).max(1.0);
        worst_dev = worst_dev.max(dev);
    }
    report.record(
        "path_equivalence",
        worst_dev <= PATH_EQUIV_TOL,
        format!(
            "worst relative deviation {worst_dev:.3e} over 10000 instances \
             (tolerance {PATH_EQUIV_TOL:.0e})"
        ),
    );

    let mut rng = stream_rng(seed, 0xAC57);
    let mut worst_z = 0.0_f64;
    let mut reruns = 0usize;
    let mut failures = 0usize;
    for i in 0..200u64 {
        let (q, p) = fuzz_instance(&mut rng, 1)?;
        let exact = kl_seq_closed_form(&q, &p)?.total;
        let (est, se) = mc_kl_estimate(&q, &p, 100_000, derive_seed(seed, 0x4000 + i))?;
        let z = z_score(exact, est, se);
        if z <= 4.0 {
            worst_z = worst_z.max(z);
            continue;
        }
        reruns += 1;
        let (est2, se2) = mc_kl_estimate(&q, &p, 100_000, derive_seed(seed, 0x8000 + i))?;
        let z2 = z_score(exact, est2, se2);
        if z2 <= 4.0 {
            worst_z = worst_z.max(z2);
        } else {
            failures += 1;
        }
    }
    report.record(
        "mc_agreement",
        failures == 0,
        format!(
            "200 instances at 1e5 samples: worst surviving z {worst_z:.2} \
             (gate 4.0), {reruns} rerun(s), {failures} second miss(es)"
        ),
    );
    Ok(report)
}

/// Distance between a closed-form value and an MC estimate in standard
/// errors; an exact hit with zero spread counts as distance zero.
fn z_score(exact: f64, est: f64, se: f64) -> f64 {
    let diff = (exact - est).abs();
    if se == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / se
    }
}

/// The alpha/length/dimension grid shared by the bound checks.
const BOUND_GRID_ALPHAS: [f64; 3] = [0.1, 0.5, 0.9];
const BOUND_GRID_LENGTHS: [usize; 3] = [3, 8, 32];
const BOUND_GRID_DIMS: [usize; 2] = [1, 3];

/// Committed rate against the numeric minimizer, the minimizing profile,
/// the solver round trip, and the independent constraint's per-dimension
/// guarantee.
pub fn bound_suite(seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("bound", seed);

    let mut worst_gap = 0.0_f64;
    let mut worst_arg = 0.0_f64;
    let mut worst_alpha = 0.0_f64;
    let mut cells = 0usize;
    for &alpha in &BOUND_GRID_ALPHAS {
        for &n in &BOUND_GRID_LENGTHS {
            for &d in &BOUND_GRID_DIMS {
                cells += 1;
                let p = Ar1Prior::new(Array1::from_elem(d, alpha))?;
                let bound = p.committed_rate(n)?;
                let (numeric, argmin) = numeric_min_kl(&p, n)?;
                worst_gap = worst_gap.max((bound - numeric).abs());
                let profile = p.minimizing_stds(n)?;
                for ((&got, &want), &mean) in argmin
                    .stds()
                    .iter()
                    .zip(profile.iter())
                    .zip(argmin.means().iter())
                {
                    worst_arg = worst_arg.max((got - want).abs()).max(mean.abs());
                }
                let back = solve_alpha_for_rate(bound, n, d)?;
                worst_alpha = worst_alpha.max((back - alpha).abs());
            }
        }
    }
    report.record(
        "bound_tightness",
        worst_gap <= BOUND_VALUE_TOL,
        format!(
            "worst |bound - numeric min| {worst_gap:.3e} nats over {cells} \
             grid cells (tolerance {BOUND_VALUE_TOL:.0e})"
        ),
    );
    report.record(
        "argmin_profile",
        worst_arg <= BOUND_ARGMIN_TOL,
        format!(
            "worst |numeric argmin - closed-form profile| {worst_arg:.3e} \
             (tolerance {BOUND_ARGMIN_TOL:.0e})"
        ),
    );
    report.record(
        "solver_round_trip",
        worst_alpha <= SOLVER_ALPHA_TOL,
        format!(
            "worst |alpha - solve(bound(alpha))| {worst_alpha:.3e} \
             (tolerance {SOLVER_ALPHA_TOL:.0e})"
        ),
    );

    let mut rng = stream_rng(seed, 0xD317A);
    let mut worst_margin = f64::INFINITY;
    for &delta in &[0.01, 0.1, 1.0] {
        let constraint = IndependentDeltaConstraint::new(delta)?;
        let raw_mu = Array2::from_shape_fn((100, 100), |_| rng.gen_range(-40.0..40.0));
        let raw_sd = Array2::from_shape_fn((100, 100), |_| rng.gen_range(-40.0..40.0));
        let (mus, sds) = constraint.constrain(&raw_mu, &raw_sd)?;
        for (&m, &s) in mus.iter().zip(sds.iter()) {
            let kl = kl_univariate(m, s, 0.0, 1.0)?;
            worst_margin = worst_margin.min(kl - delta);
        }
    }
    report.record(
        "independent_guarantee",
        worst_margin >= -DELTA_GUARANTEE_SLACK,
        format!(
            "smallest per-dimension KL margin over delta {worst_margin:.3e} nats \
             across 3 x 10000 fuzzed raw heads (slack {DELTA_GUARANTEE_SLACK:.0e})"
        ),
    );
    Ok(report)
}

/// Model used by the gradient and mask suites: 2 latent dimensions over
/// 3-dimensional observations, small enough that a full central-difference
/// sweep is cheap.
fn probe_model(mode: EncoderMode, constraint: ConstraintMode, seed: u64) -> Result<ToyModel> {
    let cfg = ModelCfg {
        obs_dim: 3,
        latent_dim: 2,
        enc_hidden: 6,
        enc_depth: 1,
        dec_hidden: 6,
        dec_depth: 1,
        encoder_mode: mode,
        constraint,
        delta_nats: 0.05,
        prior_alphas: vec![0.5, 0.8],
    };
    ToyModel::new(cfg, ObjectiveCfg::Vanilla, seed)
}

/// Random batch of `count` sequences, `n` steps by `obs_dim`.
fn fuzz_batch(rng: &mut impl Rng, count: usize, n: usize, obs_dim: usize) -> Vec<Array2<f64>> {
    (0..count)
        .map(|_| Array2::from_shape_fn((n, obs_dim), |_| rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Central-difference referee on the full training objective, one check
/// per posterior constraint route, sequence length 6, two latent
/// dimensions. Objectives are differentiated exactly as the trainer
/// builds them, reparameterized sampling included.
pub fn grad_suite(seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("grad", seed);
    let routes = [
        ("grad_unconstrained", ConstraintMode::None, 2usize),
        ("grad_temporal_delta", ConstraintMode::TemporalDelta, 1),
        ("grad_independent_delta", ConstraintMode::IndependentDelta, 1),
    ];
    for (name, constraint, mc_samples) in routes {
        let model = probe_model(EncoderMode::AntiCausal, constraint, derive_seed(seed, 0x9AD))?;
        let mut rng = stream_rng(seed, 0xBA7C);
        let batch = fuzz_batch(&mut rng, 3, 6, model.cfg.obs_dim);
        let refs: Vec<&Array2<f64>> = batch.iter().collect();
        let params: Vec<Array2<f64>> = model.params().into_iter().cloned().collect();
        let worst = grad_check(
            |g, ids| {
                let vars = model.vars_from_ids(ids)?;
                let nodes = build_elbo(
                    &model,
                    g,
                    &vars,
                    &refs,
                    &ObjectiveCfg::Vanilla,
                    mc_samples,
                    derive_seed(seed, 0x015E),
                    0,
                )?;
                Ok(nodes.loss)
            },
            &params,
            1e-4,
        )?;
        report.record(
            name,
            worst <= GRAD_CHECK_TOL,
            format!(
                "worst relative gradient error {worst:.3e} over {} parameters \
                 (tolerance {GRAD_CHECK_TOL:.0e})",
                model.param_count()
            ),
        );
    }
    Ok(report)
}

/// Gradient of the summed posterior parameters at step `t` with respect to
/// each observation step, batch of one.
fn posterior_input_grads(
    model: &ToyModel,
    x: &Array2<f64>,
    t: usize,
) -> Result<Vec<Array2<f64>>> {
    let n = x.nrows();
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let xs: Vec<NodeId> = (0..n)
        .map(|s| g.var(x.row(s).to_owned().insert_axis(ndarray::Axis(0))))
        .collect();
    let params = model.posterior_graph(&mut g, &vars, &xs, 1)?;
    let (mu, sd) = params[t];
    let su = g.sum(mu);
    let ss = g.sum(sd);
    let root = g.add(su, ss)?;
    let grads = g.backward(root)?;
    Ok(xs
        .iter()
        .map(|&id| grads.get_or_zeros(id, (1, x.ncols())))
        .collect())
}

/// Exact-zero causality checks through the autodiff graph: the anti-causal
/// encoder's posterior parameters carry bitwise-zero gradient from strictly
/// past observations (every constraint route), the decoder's mean at step
/// `t` carries bitwise-zero gradient from observations at or after `t`
/// through its shifted-observation input, and a non-causal control model
/// confirms the probe can see leaks at all.
pub fn masks_suite(seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("masks", seed);
    let n = 5usize;
    let mut rng = stream_rng(seed, 0x3A5C);

    let mut leaked_cells = 0usize;
    let mut dead_heads = 0usize;
    for constraint in [
        ConstraintMode::None,
        ConstraintMode::TemporalDelta,
        ConstraintMode::IndependentDelta,
    ] {
        let model = probe_model(EncoderMode::AntiCausal, constraint, derive_seed(seed, 0x10))?;
        let batch = fuzz_batch(&mut rng, 1, n, model.cfg.obs_dim);
        for t in 0..n {
            let grads = posterior_input_grads(&model, &batch[0], t)?;
            leaked_cells += grads[..t]
                .iter()
                .map(|m| m.iter().filter(|&&v| v != 0.0).count())
                .sum::<usize>();
            let reachable: f64 = grads[t..].iter().map(|m| m.iter().sum::<f64>()).sum();
            if reachable == 0.0 {
                dead_heads += 1;
            }
        }
    }
    report.record(
        "encoder_anti_causal",
        leaked_cells == 0 && dead_heads == 0,
        format!(
            "{leaked_cells} nonzero past-gradient cells and {dead_heads} dead \
             heads across 3 constraint routes x {n} steps (both must be 0)"
        ),
    );

    let control = probe_model(EncoderMode::NonCausal, ConstraintMode::None, derive_seed(seed, 0x11))?;
    let control_batch = fuzz_batch(&mut rng, 1, n, control.cfg.obs_dim);
    let grads = posterior_input_grads(&control, &control_batch[0], n - 1)?;
    let past_reach = grads[..n - 1]
        .iter()
        .map(|m| m.iter().filter(|&&v| v != 0.0).count())
        .sum::<usize>();
    report.record(
        "non_causal_control",
        past_reach > 0,
        format!(
            "non-causal encoder reaches {past_reach} past-gradient cells at the \
             last step (must be > 0 for the leak probe to mean anything)"
        ),
    );

    let model = probe_model(EncoderMode::AntiCausal, ConstraintMode::None, derive_seed(seed, 0x12))?;
    let dec_batch = fuzz_batch(&mut rng, 1, n, model.cfg.obs_dim);
    let x_prev = &dec_batch[0];
    let z = Array2::from_shape_fn((n, model.cfg.latent_dim), |_| {
        rng.sample::<f64, _>(StandardNormal)
    });
    let mut leaked = 0usize;
    let mut dead = 0usize;
    {
        let mut g = Graph::new();
        let dv = model.decoder.bind(&mut g);
        let xp: Vec<NodeId> = (0..n)
            .map(|s| g.var(x_prev.row(s).to_owned().insert_axis(ndarray::Axis(0))))
            .collect();
        let zs: Vec<NodeId> = (0..n)
            .map(|s| g.constant(z.row(s).to_owned().insert_axis(ndarray::Axis(0))))
            .collect();
        let means = model.decoder.means(&mut g, &dv, &xp, &zs, 1)?;
        for t in 0..n {
            let root = g.sum(means[t]);
            let grads = g.backward(root)?;
            for (s, &id) in xp.iter().enumerate() {
                let grad = grads.get_or_zeros(id, (1, model.cfg.obs_dim));
                if s > t {
                    leaked += grad.iter().filter(|&&v| v != 0.0).count();
                }
            }
            let here = grads.get_or_zeros(xp[t], (1, model.cfg.obs_dim));
            if here.iter().all(|&v| v == 0.0) {
                dead += 1;
            }
        }
    }
    report.record(
        "decoder_strictly_causal",
        leaked == 0 && dead == 0,
        format!(
            "{leaked} nonzero future-gradient cells and {dead} dead steps \
             through the shifted-observation input (both must be 0)"
        ),
    );
    Ok(report)
}
