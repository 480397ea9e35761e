//! End-to-end tests of the `deltavae` binary: output formats, exit
//! codes, and a couple of frozen numeric values that must never drift.
//!
//! Training-backed commands run with deliberately tiny step counts; the
//! point here is the command surface, not the learning dynamics (the
//! library's own acceptance tests cover those).

use std::path::PathBuf;
use std::process::{Command, Output};

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deltavae"))
}

/// Fresh scratch directory per test, under the system temp dir.
fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("deltavae-cli-{name}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("scratch dir creates");
    dir
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "expected exit {code}, got {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        stdout_of(out),
        stderr_of(out)
    );
}

/// The CSV comment preamble: `# deltavae <version>` then a 64-bit config
/// hash, then the column header.
fn assert_csv_preamble(text: &str, header: &str) {
    let mut lines = text.lines();
    let version = lines.next().expect("version line");
    assert!(
        version.starts_with("# deltavae "),
        "first line should carry the version, got {version:?}"
    );
    let hash = lines.next().expect("hash line");
    assert!(
        hash.starts_with("# config_hash = 0x") && hash.len() == "# config_hash = 0x".len() + 16,
        "second line should carry a 16-digit config hash, got {hash:?}"
    );
    assert!(
        text.lines().any(|l| l == header),
        "missing column header {header:?} in:\n{text}"
    );
}

#[test]
fn rate_table_emits_versioned_csv_with_exact_values() {
    let dir = scratch("rate-table");
    let out_path = dir.join("table.csv");
    let out = binary()
        .args([
            "rate-table",
            "--alpha-grid",
            "0.0,0.5",
            "--n-grid",
            "2,32",
            "--dims",
            "1,3",
            "--out",
        ])
        .arg(&out_path)
        .output()
        .expect("binary runs");
    assert_exit(&out, 0);
    let text = std::fs::read_to_string(&out_path).expect("table written");
    assert_csv_preamble(&text, "alpha,n,d,delta_nats,delta_bits");
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 1 + 8, "header plus one row per grid cell");

    // Independent prior commits to nothing, regardless of n and d.
    for row in &rows[1..] {
        if row.starts_with("0,") || row.starts_with("0.0,") {
            let nats: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
            assert_eq!(nats, 0.0, "alpha = 0 must commit zero rate, row {row:?}");
        }
    }

    // Frozen reference value for alpha = 0.5, n = 32, d = 1.
    let row = rows
        .iter()
        .find(|r| r.starts_with("0.5,32,1,"))
        .expect("grid row for alpha 0.5, n 32, d 1");
    let mut fields = row.split(',').skip(3);
    let nats: f64 = fields.next().unwrap().parse().unwrap();
    let bits: f64 = fields.next().unwrap().parse().unwrap();
    assert!(
        (nats - 3.490994305939037).abs() < 1e-12,
        "committed rate drifted: {nats}"
    );
    assert!(
        (bits - nats * std::f64::consts::LOG2_E).abs() < 1e-12,
        "bits column is not nats / ln 2: {bits} vs {nats}"
    );

    // Three dimensions of the same coefficient commit three times the rate.
    let row3 = rows
        .iter()
        .find(|r| r.starts_with("0.5,32,3,"))
        .expect("grid row for alpha 0.5, n 32, d 3");
    let nats3: f64 = row3.split(',').nth(3).unwrap().parse().unwrap();
    assert!(
        (nats3 - 3.0 * nats).abs() < 1e-9,
        "rate should be additive over dimensions: {nats3} vs 3 x {nats}"
    );
}

#[test]
fn rate_table_rejects_out_of_range_alpha_as_usage_error() {
    let out = binary()
        .args(["rate-table", "--alpha-grid", "1.5", "--n-grid", "8", "--dims", "1"])
        .output()
        .expect("binary runs");
    assert_exit(&out, 2);
    assert!(
        stderr_of(&out).contains("alpha"),
        "stderr should name the offending value: {}",
        stderr_of(&out)
    );
}

#[test]
fn toy2d_reports_the_two_step_minimum_and_ellipses() {
    let out = binary()
        .args(["toy2d", "--alpha", "0.9"])
        .output()
        .expect("binary runs");
    assert_exit(&out, 0);
    let text = stdout_of(&out);
    assert_csv_preamble(&text, "curve,center_1,center_2,semi_axis_1,semi_axis_2,angle_deg");

    let grab = |prefix: &str| -> f64 {
        text.lines()
            .find_map(|l| l.strip_prefix(prefix))
            .unwrap_or_else(|| panic!("missing {prefix:?} line in:\n{text}"))
            .trim()
            .parse()
            .expect("numeric header value")
    };
    let min_kl = grab("# min_kl_nats =");
    let closed = grab("# closed_form_min_kl_nats =");
    // -0.5 ln(1 - 0.81), the fixture value for alpha = 0.9.
    assert!(
        (closed - 0.830_365_603_410_825_5).abs() < 1e-12,
        "closed-form minimum drifted: {closed}"
    );
    assert!(
        (min_kl - closed).abs() <= 1e-6 * closed.max(1.0),
        "numeric minimum {min_kl} disagrees with closed form {closed}"
    );

    let posterior = text
        .lines()
        .find(|l| l.starts_with("posterior,"))
        .expect("posterior row");
    let axes: Vec<f64> = posterior
        .split(',')
        .skip(3)
        .take(2)
        .map(|v| v.parse().unwrap())
        .collect();
    // Both optimal two-step standard deviations equal sqrt(1 - alpha^2).
    for a in &axes {
        assert!(
            (a - 0.435_889_894_354_067_33_f64).abs() < 1e-4,
            "posterior semi-axis drifted: {a}"
        );
    }
    let prior = text
        .lines()
        .find(|l| l.starts_with("prior,"))
        .expect("prior row");
    assert!(
        prior.ends_with(",45"),
        "prior ellipse should sit on the diagonal: {prior:?}"
    );
}

#[test]
fn verify_masks_suite_passes_and_reports_json() {
    let dir = scratch("verify");
    let report_path = dir.join("masks.json");
    let out = binary()
        .args(["verify", "--suite", "masks", "--seed", "3", "--out"])
        .arg(&report_path)
        .output()
        .expect("binary runs");
    assert_exit(&out, 0);
    let text = std::fs::read_to_string(&report_path).expect("report written");
    let json: serde_json::Value = serde_json::from_str(&text).expect("report is valid JSON");
    assert!(json["version"].is_string(), "missing version field");
    let hash = json["config_hash"].as_str().expect("config_hash field");
    assert!(
        hash.starts_with("0x") && hash.len() == 18,
        "config_hash should be a 64-bit hex literal, got {hash:?}"
    );
    assert_eq!(json["report"]["passed"], serde_json::json!(true));
    let checks = json["report"]["checks"].as_array().expect("checks array");
    assert_eq!(checks.len(), 3, "masks suite runs three checks");
    for c in checks {
        assert_eq!(
            c["passed"],
            serde_json::json!(true),
            "check {} failed: {}",
            c["name"],
            c["detail"]
        );
    }
}

#[test]
fn verify_rejects_unknown_suite_as_usage_error() {
    let out = binary()
        .args(["verify", "--suite", "everything"])
        .output()
        .expect("binary runs");
    assert_exit(&out, 2);
    assert!(
        stderr_of(&out).contains("unknown suite"),
        "stderr should explain: {}",
        stderr_of(&out)
    );
}

#[test]
fn train_runs_a_tiny_config_and_writes_the_record() {
    let dir = scratch("train");
    let cfg_path = dir.join("tiny.cfg");
    let record_path = dir.join("record.json");
    std::fs::write(
        &cfg_path,
        "# tiny smoke run, not a demonstration\n\
         steps = 30\n\
         batch_size = 8\n\
         eval_sequences = 60\n\
         log_every = 10\n\
         seed = 9\n\
         constraint = temporal_delta\n\
         prior_alphas = 0.5\n\
         objective = delta_structural\n",
    )
    .expect("config written");
    let out = binary()
        .arg("train")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(&record_path)
        .output()
        .expect("binary runs");
    assert_exit(&out, 0);
    let stdout = stdout_of(&out);
    assert!(
        stdout.contains("config_hash 0x"),
        "stdout should echo the config hash:\n{stdout}"
    );
    assert!(
        stdout.contains("committed floor"),
        "stdout should report the committed floor:\n{stdout}"
    );
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&record_path).expect("record written"))
            .expect("record is valid JSON");
    assert!(json["version"].is_string() && json["config_hash"].is_string());
    let record = &json["record"];
    assert_eq!(record["cfg"]["seed"], serde_json::json!(9));
    assert_eq!(record["cfg"]["steps"], serde_json::json!(30));
    let floor = record["committed_floor_nats"].as_f64().expect("floor");
    assert!(floor > 0.0, "temporal constraint should commit rate, floor {floor}");
    let steps = record["steps"].as_array().expect("steps array");
    assert_eq!(steps.len(), 4, "steps 0, 10, 20 plus the final step");
    for s in steps {
        let rate = s["rate"].as_f64().expect("rate");
        assert!(
            rate >= floor - 1e-9,
            "logged rate {rate} sits below the committed floor {floor}"
        );
    }
}

#[test]
fn train_rejects_unknown_config_key_as_usage_error() {
    let dir = scratch("badkey");
    let cfg_path = dir.join("typo.cfg");
    std::fs::write(&cfg_path, "stepz = 10\n").expect("config written");
    let out = binary()
        .arg("train")
        .arg("--config")
        .arg(&cfg_path)
        .output()
        .expect("binary runs");
    assert_exit(&out, 2);
    assert!(
        stderr_of(&out).contains("stepz"),
        "stderr should name the bad key: {}",
        stderr_of(&out)
    );
}

#[test]
fn train_rejects_unknown_preset_as_usage_error() {
    let out = binary()
        .args(["train", "--config", "no_such_preset"])
        .output()
        .expect("binary runs");
    assert_exit(&out, 2);
    let err = stderr_of(&out);
    assert!(
        err.contains("collapse_demo") && err.contains("delta2"),
        "stderr should list the presets: {err}"
    );
}

#[test]
fn sweep_trains_a_grid_and_writes_both_tables() {
    let dir = scratch("sweep");
    let grid_path = dir.join("grid.txt");
    let test_path = dir.join("test.csv");
    let train_path = dir.join("train.csv");
    std::fs::write(
        &grid_path,
        "# two tiny cells\n\
         vanilla 0 5 steps=25 eval_sequences=60 log_every=25\n\
         delta 1.0 5 steps=25 eval_sequences=60 log_every=25\n",
    )
    .expect("grid written");
    let out = binary()
        .arg("sweep")
        .arg("--grid")
        .arg(&grid_path)
        .args(["--threads", "1", "--out-test"])
        .arg(&test_path)
        .arg("--out-train")
        .arg(&train_path)
        .output()
        .expect("binary runs");
    assert_exit(&out, 0);
    for path in [&test_path, &train_path] {
        let text = std::fs::read_to_string(path).expect("table written");
        assert_csv_preamble(
            &text,
            "method,knob,rate_nats,rate_bits,distortion_nats,probe_acc,seed",
        );
        let rows: Vec<&str> = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("method,"))
            .collect();
        assert_eq!(rows.len(), 2, "one row per grid cell in:\n{text}");
        let delta_row = rows
            .iter()
            .find(|r| r.starts_with("delta,"))
            .expect("delta row");
        let rate: f64 = delta_row.split(',').nth(2).unwrap().parse().unwrap();
        assert!(
            rate >= 1.0 - 1e-9,
            "committed cell should hold its 1-nat budget even after 25 steps, rate {rate}"
        );
        let vanilla_row = rows
            .iter()
            .find(|r| r.starts_with("vanilla,"))
            .expect("vanilla row");
        let vrate: f64 = vanilla_row.split(',').nth(2).unwrap().parse().unwrap();
        assert!(vrate.is_finite() && vrate >= 0.0, "vanilla rate {vrate}");
    }
}
