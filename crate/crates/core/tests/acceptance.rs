//! Acceptance gate for the workspace: eleven end-to-end properties, one
//! test each. They span the closed-form KL machinery against its oracles,
//! the committed-rate bound, solver, and constraint guarantees, gradient
//! and mask exactness of the autodiff stack, and the demo training runs
//! that reproduce posterior collapse and its prevention on the synthetic
//! regime dataset.
//!
//! Expensive fixtures (the demo dataset, the verification suites, the
//! three-seed training runs) are built once in `OnceLock`s and shared, so
//! tests that lean on the same runs pay for them once. Each test prints a
//! one-line summary of the measured margins on top of the harness
//! pass/fail line.

use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use deltavae::consts::{COLLAPSE_THRESHOLD_NATS, DELTA_GUARANTEE_SLACK};
use deltavae::data::Dataset;
use deltavae::kl_seq_closed_form;
use deltavae::nets::{fit_aux_prior, reparameterize, ToyModel};
use deltavae::rng::{derive_seed, stream_rng};
use deltavae::training::{
    collapse_demo_cfg, delta_demo_cfg, demo_dataset, probe_demo_cfg, train, RunRecord,
};
use deltavae::verify::{run_suite, Check, SuiteReport};

/// Seed for the verification suites; any value works, this one is fixed
/// so the gate is reproducible.
const SUITE_SEED: u64 = 7;

/// Seeds for the three-seed training comparisons.
const RUN_SEEDS: [u64; 3] = [1, 2, 3];

/// Time budgets, generous on purpose: they catch complexity regressions,
/// not scheduler noise.
const BOUND_GRID_BUDGET_SECS: f64 = 120.0;
const MC_BUDGET_SECS: f64 = 300.0;
const PATH_BUDGET_SECS: f64 = 60.0;
const TRAIN_RUN_BUDGET_SECS: f64 = 900.0;

fn dataset() -> &'static Dataset {
    static DATASET: OnceLock<Dataset> = OnceLock::new();
    DATASET.get_or_init(|| demo_dataset().expect("demo dataset generates"))
}

fn timed_suite(slot: &'static OnceLock<(SuiteReport, f64)>, name: &str) -> &'static (SuiteReport, f64) {
    slot.get_or_init(|| {
        let start = Instant::now();
        let report = run_suite(name, SUITE_SEED).expect("suite runs to completion");
        (report, start.elapsed().as_secs_f64())
    })
}

fn bound_fixture() -> &'static (SuiteReport, f64) {
    static SLOT: OnceLock<(SuiteReport, f64)> = OnceLock::new();
    timed_suite(&SLOT, "bound")
}

fn kl_fixture() -> &'static (SuiteReport, f64) {
    static SLOT: OnceLock<(SuiteReport, f64)> = OnceLock::new();
    timed_suite(&SLOT, "kl")
}

fn grad_fixture() -> &'static (SuiteReport, f64) {
    static SLOT: OnceLock<(SuiteReport, f64)> = OnceLock::new();
    timed_suite(&SLOT, "grad")
}

fn masks_fixture() -> &'static (SuiteReport, f64) {
    static SLOT: OnceLock<(SuiteReport, f64)> = OnceLock::new();
    timed_suite(&SLOT, "masks")
}

/// Unconstrained demo runs, one per seed in [`RUN_SEEDS`]. The collapsed
/// baseline for the probe comparison and the collapse half of the
/// collapse/prevention contrast.
fn vanilla_runs() -> &'static Vec<RunRecord> {
    static SLOT: OnceLock<Vec<RunRecord>> = OnceLock::new();
    SLOT.get_or_init(|| {
        RUN_SEEDS
            .iter()
            .map(|&seed| {
                let cfg = collapse_demo_cfg(seed);
                let (_, record) = train(&cfg, dataset()).expect("vanilla demo run trains");
                record
            })
            .collect()
    })
}

/// Rate-committed demo runs, one per seed, models kept for the aux-prior
/// evaluation.
fn probe_runs() -> &'static Vec<(ToyModel, RunRecord)> {
    static SLOT: OnceLock<Vec<(ToyModel, RunRecord)>> = OnceLock::new();
    SLOT.get_or_init(|| {
        RUN_SEEDS
            .iter()
            .map(|&seed| {
                let cfg = probe_demo_cfg(seed);
                train(&cfg, dataset()).expect("committed demo run trains")
            })
            .collect()
    })
}

fn find_check<'a>(report: &'a SuiteReport, name: &str) -> &'a Check {
    report
        .checks
        .iter()
        .find(|c| c.name == name)
        .unwrap_or_else(|| panic!("suite {:?} has no check named {name:?}", report.suite))
}

/// Assert one named suite check passed and hand back its detail line.
fn assert_check(report: &'static SuiteReport, name: &str) -> &'static str {
    let check = find_check(report, name);
    assert!(check.passed, "{name} failed: {}", check.detail);
    &check.detail
}

#[test]
fn c01_committed_rate_matches_numeric_minimum() {
    let (report, secs) = bound_fixture();
    let value = assert_check(report, "bound_tightness");
    let argmin = assert_check(report, "argmin_profile");
    assert!(
        *secs <= BOUND_GRID_BUDGET_SECS,
        "bound grid took {secs:.1}s, budget {BOUND_GRID_BUDGET_SECS}s"
    );
    println!("criterion 01 PASS ({secs:.1}s): {value}; {argmin}");
}

#[test]
fn c02_closed_form_kl_agrees_with_monte_carlo() {
    let (report, secs) = kl_fixture();
    let detail = assert_check(report, "mc_agreement");
    assert!(
        *secs <= MC_BUDGET_SECS,
        "KL suite took {secs:.1}s, budget {MC_BUDGET_SECS}s"
    );
    println!("criterion 02 PASS ({secs:.1}s): {detail}");
}

#[test]
fn c03_sequential_kl_paths_agree() {
    let (report, secs) = kl_fixture();
    let detail = assert_check(report, "path_equivalence");
    assert!(
        *secs <= PATH_BUDGET_SECS,
        "KL suite took {secs:.1}s, budget {PATH_BUDGET_SECS}s"
    );
    println!("criterion 03 PASS ({secs:.1}s): {detail}");
}

#[test]
fn c04_objective_gradients_match_finite_differences() {
    let (report, secs) = grad_fixture();
    let plain = assert_check(report, "grad_unconstrained");
    let temporal = assert_check(report, "grad_temporal_delta");
    let independent = assert_check(report, "grad_independent_delta");
    println!("criterion 04 PASS ({secs:.1}s): {plain}; {temporal}; {independent}");
}

#[test]
fn c05_causal_masks_are_exact() {
    let (report, secs) = masks_fixture();
    let encoder = assert_check(report, "encoder_anti_causal");
    let control = assert_check(report, "non_causal_control");
    let decoder = assert_check(report, "decoder_strictly_causal");
    println!("criterion 05 PASS ({secs:.1}s): {encoder}; {control}; {decoder}");
}

#[test]
fn c06_vanilla_collapses_and_delta_holds_the_floor() {
    let data = dataset();
    let vanilla = &vanilla_runs()[0];
    assert!(
        vanilla.wall_clock_secs <= TRAIN_RUN_BUDGET_SECS,
        "vanilla run took {:.0}s, budget {TRAIN_RUN_BUDGET_SECS}s",
        vanilla.wall_clock_secs
    );
    for (split, eval) in [("train", &vanilla.train_eval), ("test", &vanilla.test_eval)] {
        assert!(
            eval.rate_nats < COLLAPSE_THRESHOLD_NATS,
            "vanilla {split} rate {} nats/sequence is not collapsed (threshold {COLLAPSE_THRESHOLD_NATS})",
            eval.rate_nats
        );
    }

    // Same architecture, 2-nat structural commitment, every step logged.
    let mut cfg = delta_demo_cfg(2.0, data.seq_len, RUN_SEEDS[0]).expect("alpha solve succeeds");
    cfg.log_every = 1;
    let (_, record) = train(&cfg, data).expect("committed run trains");
    assert!(
        record.wall_clock_secs <= TRAIN_RUN_BUDGET_SECS,
        "committed run took {:.0}s, budget {TRAIN_RUN_BUDGET_SECS}s",
        record.wall_clock_secs
    );
    assert!(
        record.committed_floor_nats >= 2.0,
        "committed floor {} is below the 2-nat budget",
        record.committed_floor_nats
    );
    assert_eq!(
        record.steps.len() as u64,
        cfg.steps,
        "log_every = 1 should record every step"
    );
    let mut min_rate = f64::INFINITY;
    for s in &record.steps {
        assert!(
            s.rate >= 2.0 - DELTA_GUARANTEE_SLACK,
            "step {}: measured rate {} fell below the 2-nat budget",
            s.step,
            s.rate
        );
        min_rate = min_rate.min(s.rate);
    }
    assert!(
        record.test_eval.rate_nats >= 2.0 - DELTA_GUARANTEE_SLACK,
        "final test rate {} fell below the 2-nat budget",
        record.test_eval.rate_nats
    );
    println!(
        "criterion 06 PASS: vanilla ends at {:.4} nats/sequence (train {:.4}); \
         committed run holds floor {:.6} at every one of {} steps (min logged rate {:.4})",
        vanilla.test_eval.rate_nats,
        vanilla.train_eval.rate_nats,
        record.committed_floor_nats,
        record.steps.len(),
        min_rate
    );
}

#[test]
fn c07_committed_posteriors_probe_far_above_collapsed_baseline() {
    let vanilla = vanilla_runs();
    let committed = probe_runs();
    for record in vanilla {
        assert!(
            record.test_eval.rate_nats < COLLAPSE_THRESHOLD_NATS,
            "seed {}: baseline rate {} nats is not collapsed, comparison would be meaningless",
            record.cfg.seed,
            record.test_eval.rate_nats
        );
    }
    let baseline: f64 =
        vanilla.iter().map(|r| r.test_eval.probe_accuracy).sum::<f64>() / vanilla.len() as f64;
    let probed: f64 = committed
        .iter()
        .map(|(_, r)| r.test_eval.probe_accuracy)
        .sum::<f64>()
        / committed.len() as f64;
    let gap = probed - baseline;
    assert!(
        gap >= 0.20,
        "held-out probe gap {gap:.3} ({probed:.3} committed vs {baseline:.3} collapsed) \
         is under 20 percentage points"
    );
    println!(
        "criterion 07 PASS: probe accuracy {probed:.3} (committed) vs {baseline:.3} \
         (collapsed baseline), gap {:.1} points over 3 seeds, chance 0.25",
        gap * 100.0
    );
}

#[test]
fn c08_alpha_solver_round_trips() {
    let (report, secs) = bound_fixture();
    let detail = assert_check(report, "solver_round_trip");
    println!("criterion 08 PASS ({secs:.1}s): {detail}");
}

#[test]
fn c09_independent_constraint_guarantees_per_dim_rate() {
    let (report, secs) = bound_fixture();
    let detail = assert_check(report, "independent_guarantee");
    println!("criterion 09 PASS ({secs:.1}s): {detail}");
}

#[test]
fn c10_fitted_aux_prior_reduces_held_out_rate() {
    let data = dataset();
    let fit_count = 2000.min(data.train.len());
    let eval_count = 1000.min(data.test.len());
    let mut lines = Vec::new();
    for (model, record) in probe_runs() {
        let seed = record.cfg.seed;
        // Aggregate-posterior samples from the training split, one draw
        // per sequence.
        let mut rng = stream_rng(derive_seed(seed, 0xA0C5), 0);
        let mut samples = Vec::with_capacity(fit_count);
        for chunk in data.train.sequences[..fit_count].chunks(64) {
            let batch: Vec<&Array2<f64>> = chunk.iter().collect();
            for q in model.encode_batch(&batch).expect("train split encodes") {
                let noise = Array2::from_shape_fn((q.n(), q.dim()), |_| {
                    rng.sample::<f64, _>(StandardNormal)
                });
                samples.push(reparameterize(&q, &noise).expect("shapes match"));
            }
        }
        let aux = fit_aux_prior(&samples).expect("aux prior fits");

        let mut ar1_sum = 0.0;
        let mut aux_sum = 0.0;
        for chunk in data.test.sequences[..eval_count].chunks(64) {
            let batch: Vec<&Array2<f64>> = chunk.iter().collect();
            for q in model.encode_batch(&batch).expect("test split encodes") {
                ar1_sum += kl_seq_closed_form(&q, &model.prior).expect("closed form").total;
                aux_sum += aux.seq_kl(&q).expect("dims match");
            }
        }
        let ar1_rate = ar1_sum / eval_count as f64;
        let aux_rate = aux_sum / eval_count as f64;
        assert!(
            aux_rate.is_finite() && ar1_rate.is_finite(),
            "seed {seed}: non-finite rates (aux {aux_rate}, ar1 {ar1_rate})"
        );
        assert!(
            aux_rate <= ar1_rate,
            "seed {seed}: rate under the fitted aux prior ({aux_rate:.4} nats) exceeds \
             the rate under the training prior ({ar1_rate:.4} nats) on held-out data"
        );
        lines.push(format!("seed {seed}: {aux_rate:.3} <= {ar1_rate:.3}"));
    }
    println!(
        "criterion 10 PASS: held-out rate under fitted aux prior vs training prior, {}",
        lines.join("; ")
    );
}

#[test]
fn c11_same_seed_reruns_reproduce_metrics_bit_exactly() {
    let data = dataset();
    let mut cfg = collapse_demo_cfg(42);
    cfg.steps = 400;
    cfg.log_every = 50;
    cfg.eval_sequences = 200;
    let (_, first) = train(&cfg, data).expect("first run trains");
    let (_, second) = train(&cfg, data).expect("second run trains");
    assert!(
        first.metrics_eq(&second),
        "reruns with identical config and seed disagree: fingerprints {:#018x} vs {:#018x}",
        first.metrics_fingerprint(),
        second.metrics_fingerprint()
    );
    assert_eq!(
        first.metrics_fingerprint(),
        second.metrics_fingerprint(),
        "metric fingerprints disagree despite metric equality"
    );
    println!(
        "criterion 11 PASS: two {}-step runs reproduced every logged metric, \
         fingerprint {:#018x}",
        cfg.steps,
        first.metrics_fingerprint()
    );
}
