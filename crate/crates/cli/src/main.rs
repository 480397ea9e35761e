//! Command-line surface over the deltavae library.
//!
//! Subcommands: `rate-table` (committed-rate grid as CSV), `toy2d`
//! (optimal two-step posterior and prior as plot-ready ellipse rows),
//! `verify` (named check suites with a JSON report), `train` (one run
//! from a key-value config file or a built-in preset), and `sweep`
//! (rate-distortion tables over a grid file, cells trained in parallel).
//!
//! Conventions shared by every subcommand:
//!
//! * deterministic output for a given seed;
//! * the tool version and a hash of the effective configuration embedded
//!   in every output: `# deltavae <version>` and `# config_hash = 0x...`
//!   comment lines in CSV, `version` and `config_hash` fields in JSON;
//! * rates reported in both nats and bits (bits = nats / ln 2);
//! * exit code 0 on success, 1 on a runtime failure or failed checks,
//!   2 on a usage error (bad flags, malformed config, unknown keys).
//!
//! Config files are plain `key = value` lines; `#` starts a comment and
//! blank lines are skipped. Unknown keys are errors, not warnings, so a
//! typo cannot silently fall back to a default. The full key list is in
//! this file next to `apply_train_key`, and `configs/` in the repository
//! root holds commented examples.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndarray::Array1;

use deltavae::ar1::Ar1Prior;
use deltavae::consts::{ALPHA_MAX, NATS_TO_BITS};
use deltavae::mc_oracle::numeric_min_kl;
use deltavae::nets::{ConstraintMode, EncoderMode};
use deltavae::rng::fnv1a64;
use deltavae::training::{
    collapse_demo_cfg, delta_demo_cfg, demo_dataset, rate_distortion_sweep, sweep_csv, train,
    FreeBitsGranularity, ObjectiveCfg, SweepCell, TrainCfg,
};
use deltavae::verify::run_suite;

#[derive(Parser)]
#[command(
    name = "deltavae",
    version,
    about = "Committed-rate tables, verification suites, and toy sequential VAE training"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Committed-rate table over a grid of prior coefficients, sequence
    /// lengths, and latent dimensionalities, as CSV.
    RateTable {
        /// Comma-separated prior coefficients, each in [0, 1).
        #[arg(long, value_name = "LIST")]
        alpha_grid: String,
        /// Comma-separated sequence lengths, each >= 2.
        #[arg(long, value_name = "LIST")]
        n_grid: String,
        /// Comma-separated latent dimensionalities, each >= 1.
        #[arg(long, value_name = "LIST")]
        dims: String,
        /// Output CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optimal two-step posterior against its prior: contour-ellipse rows
    /// for plotting, with the minimum KL in the header.
    Toy2d {
        /// Prior coefficient in [0, 1).
        #[arg(long)]
        alpha: f64,
        /// Output CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one verification suite and report as JSON.
    Verify {
        /// One of: kl, bound, grad, masks.
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Also write the JSON report to this path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model from a config file (or the built-in presets
    /// `collapse_demo` and `delta2`) on the bundled 4-regime dataset.
    Train {
        /// Path to a key-value config file, or a preset name.
        #[arg(long)]
        config: String,
        /// Override the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the full run record as JSON to this path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the trained model as JSON to this path.
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Train every cell of a grid file and emit rate-distortion tables.
    Sweep {
        /// Grid file: one `method knob seed [key=value ...]` line per run.
        #[arg(long)]
        grid: PathBuf,
        /// Worker threads (cells share nothing, order never matters).
        #[arg(long, default_value_t = 2)]
        threads: usize,
        /// Test-split CSV path; stdout when omitted.
        #[arg(long)]
        out_test: Option<PathBuf>,
        /// Train-split CSV path; skipped when omitted.
        #[arg(long)]
        out_train: Option<PathBuf>,
    },
}

/// Errors carrying their exit code: 2 for usage, 1 for runtime.
#[derive(Debug)]
struct CliError {
    msg: String,
    code: u8,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError {
            msg: msg.into(),
            code: 2,
        }
    }

    fn run(msg: impl Into<String>) -> Self {
        CliError {
            msg: msg.into(),
            code: 1,
        }
    }
}

impl From<deltavae::Error> for CliError {
    fn from(e: deltavae::Error) -> Self {
        CliError::run(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::run(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<u8, CliError> {
    match cmd {
        Cmd::RateTable {
            alpha_grid,
            n_grid,
            dims,
            out,
        } => rate_table(&alpha_grid, &n_grid, &dims, out.as_deref()),
        Cmd::Toy2d { alpha, out } => toy2d(alpha, out.as_deref()),
        Cmd::Verify { suite, seed, out } => verify(&suite, seed, out.as_deref()),
        Cmd::Train {
            config,
            seed,
            out,
            model_out,
        } => run_train(&config, seed, out.as_deref(), model_out.as_deref()),
        Cmd::Sweep {
            grid,
            threads,
            out_test,
            out_train,
        } => run_sweep(&grid, threads, out_test.as_deref(), out_train.as_deref()),
    }
}

/// `# deltavae <version>` / `# config_hash = ...` comment lines for CSV.
fn csv_header(config_hash: u64) -> String {
    format!(
        "# deltavae {}\n# config_hash = 0x{:016x}\n",
        env!("CARGO_PKG_VERSION"),
        config_hash
    )
}

/// Wrap a JSON payload with the version and config hash fields.
fn json_wrap(config_hash: u64, key: &str, value: serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": format!("0x{config_hash:016x}"),
        key: value,
    })
}

/// Write to the path, or to stdout when no path was given.
fn emit(out: Option<&Path>, content: &str) -> Result<(), CliError> {
    match out {
        Some(path) => {
            std::fs::write(path, content)
                .map_err(|e| CliError::run(format!("writing {}: {e}", path.display())))?;
            println!("wrote {}", path.display());
            Ok(())
        }
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn parse_f64_list(name: &str, text: &str) -> Result<Vec<f64>, CliError> {
    let vals: Result<Vec<f64>, _> = text.split(',').map(|t| t.trim().parse::<f64>()).collect();
    match vals {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::usage(format!(
            "--{name} wants a comma-separated list of numbers, got {text:?}"
        ))),
    }
}

fn parse_usize_list(name: &str, text: &str) -> Result<Vec<usize>, CliError> {
    let vals: Result<Vec<usize>, _> = text.split(',').map(|t| t.trim().parse::<usize>()).collect();
    match vals {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::usage(format!(
            "--{name} wants a comma-separated list of nonnegative integers, got {text:?}"
        ))),
    }
}

fn rate_table(
    alpha_grid: &str,
    n_grid: &str,
    dims: &str,
    out: Option<&Path>,
) -> Result<u8, CliError> {
    let alphas = parse_f64_list("alpha-grid", alpha_grid)?;
    let ns = parse_usize_list("n-grid", n_grid)?;
    let ds = parse_usize_list("dims", dims)?;
    for &a in &alphas {
        if !(0.0..=ALPHA_MAX).contains(&a) {
            return Err(CliError::usage(format!(
                "alpha {a} outside [0, {ALPHA_MAX}]"
            )));
        }
    }
    if let Some(&n) = ns.iter().find(|&&n| n < 2) {
        return Err(CliError::usage(format!(
            "sequence length {n} has no committed rate; lengths must be >= 2"
        )));
    }
    if ds.contains(&0) {
        return Err(CliError::usage("dimensionalities must be >= 1"));
    }
    let hash = fnv1a64(format!("rate-table {alphas:?} {ns:?} {ds:?}").as_bytes());
    let mut csv = csv_header(hash);
    csv.push_str("alpha,n,d,delta_nats,delta_bits\n");
    for &alpha in &alphas {
        for &n in &ns {
            for &d in &ds {
                let p = Ar1Prior::new(Array1::from_elem(d, alpha))?;
                let nats = p.committed_rate(n)?;
                csv.push_str(&format!(
                    "{alpha},{n},{d},{nats},{}\n",
                    nats * NATS_TO_BITS
                ));
            }
        }
    }
    emit(out, &csv)?;
    Ok(0)
}

fn toy2d(alpha: f64, out: Option<&Path>) -> Result<u8, CliError> {
    if !(0.0..=ALPHA_MAX).contains(&alpha) {
        return Err(CliError::usage(format!(
            "alpha {alpha} outside [0, {ALPHA_MAX}]"
        )));
    }
    let p = Ar1Prior::new(Array1::from_elem(1, alpha))?;
    let (min_kl, argmin) = numeric_min_kl(&p, 2)?;
    let closed = -0.5 * (1.0 - alpha * alpha).ln();
    let hash = fnv1a64(format!("toy2d {alpha:?}").as_bytes());
    let mut csv = csv_header(hash);
    csv.push_str(&format!(
        "# alpha = {alpha}\n# min_kl_nats = {min_kl}\n# min_kl_bits = {}\n\
         # closed_form_min_kl_nats = {closed}\n",
        min_kl * NATS_TO_BITS
    ));
    csv.push_str("curve,center_1,center_2,semi_axis_1,semi_axis_2,angle_deg\n");
    // The mean-field optimum is axis-aligned by construction: its
    // covariance is diag(sigma_1^2, sigma_2^2).
    csv.push_str(&format!(
        "posterior,0,0,{},{},0\n",
        argmin.stds()[[0, 0]],
        argmin.stds()[[1, 0]]
    ));
    // Two-step prior covariance [[1, alpha], [alpha, 1]]: eigenvalues
    // 1 +/- alpha along the +/- 45 degree diagonals.
    csv.push_str(&format!(
        "prior,0,0,{},{},45\n",
        (1.0 + alpha).sqrt(),
        (1.0 - alpha).sqrt()
    ));
    emit(out, &csv)?;
    Ok(0)
}

fn verify(suite: &str, seed: u64, out: Option<&Path>) -> Result<u8, CliError> {
    let report = match run_suite(suite, seed) {
        Ok(r) => r,
        // An unknown suite name is a usage problem, not a failed check.
        Err(deltavae::Error::Config(msg)) => return Err(CliError::usage(msg)),
        Err(e) => return Err(e.into()),
    };
    let hash = fnv1a64(format!("verify {suite} {seed}").as_bytes());
    let wrapped = json_wrap(hash, "report", serde_json::to_value(&report).map_err(|e| {
        CliError::run(format!("serializing report: {e}"))
    })?);
    let text = serde_json::to_string_pretty(&wrapped)
        .map_err(|e| CliError::run(format!("serializing report: {e}")))?;
    match out {
        Some(path) => {
            std::fs::write(path, &text)
                .map_err(|e| CliError::run(format!("writing {}: {e}", path.display())))?;
            println!("wrote {}", path.display());
        }
        None => println!("{text}"),
    }
    Ok(if report.passed { 0 } else { 1 })
}

/// Resolve `--config`: an existing file is parsed as key-value lines on
/// top of the demo defaults; otherwise the name must match a built-in
/// preset.
fn resolve_train_cfg(config: &str, seed_flag: Option<u64>) -> Result<TrainCfg, CliError> {
    let seed = seed_flag.unwrap_or(1);
    let path = Path::new(config);
    let mut cfg = if path.is_file() {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::run(format!("reading {}: {e}", path.display())))?;
        let pairs = parse_kv_file(&text).map_err(CliError::usage)?;
        build_train_cfg(&pairs, collapse_demo_cfg(seed)).map_err(CliError::usage)?
    } else {
        match config {
            "collapse_demo" => collapse_demo_cfg(seed),
            "delta2" => delta_demo_cfg(2.0, 24, seed)?,
            other => {
                return Err(CliError::usage(format!(
                    "{other:?} is neither a config file nor a preset \
                     (presets: collapse_demo, delta2)"
                )))
            }
        }
    };
    if let Some(s) = seed_flag {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run_train(
    config: &str,
    seed_flag: Option<u64>,
    out: Option<&Path>,
    model_out: Option<&Path>,
) -> Result<u8, CliError> {
    let cfg = resolve_train_cfg(config, seed_flag)?;
    let cfg_json = serde_json::to_string(&cfg)
        .map_err(|e| CliError::run(format!("serializing config: {e}")))?;
    let hash = fnv1a64(cfg_json.as_bytes());
    println!(
        "deltavae {} | config_hash 0x{hash:016x} | objective {} | seed {}",
        env!("CARGO_PKG_VERSION"),
        cfg.objective.name(),
        cfg.seed
    );
    let data = demo_dataset()?;
    let (model, record) = train(&cfg, &data)?;
    println!(
        "trained {} steps | committed floor {} nats | likelihood bound: {}",
        cfg.steps, record.committed_floor_nats, record.objective_is_likelihood_bound
    );
    for (label, eval) in [("train", &record.train_eval), ("test", &record.test_eval)] {
        println!(
            "{label}: rate {} nats ({} bits) | distortion {} nats | probe acc {}",
            eval.rate_nats, eval.rate_bits, eval.distortion_nats, eval.probe_accuracy
        );
    }
    if let Some(path) = out {
        let wrapped = json_wrap(
            hash,
            "record",
            serde_json::to_value(&record)
                .map_err(|e| CliError::run(format!("serializing record: {e}")))?,
        );
        let text = serde_json::to_string_pretty(&wrapped)
            .map_err(|e| CliError::run(format!("serializing record: {e}")))?;
        std::fs::write(path, text)
            .map_err(|e| CliError::run(format!("writing {}: {e}", path.display())))?;
        println!("wrote {}", path.display());
    }
    if let Some(path) = model_out {
        model.save(path)?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

fn run_sweep(
    grid: &Path,
    threads: usize,
    out_test: Option<&Path>,
    out_train: Option<&Path>,
) -> Result<u8, CliError> {
    let text = std::fs::read_to_string(grid)
        .map_err(|e| CliError::run(format!("reading {}: {e}", grid.display())))?;
    let data = demo_dataset()?;
    let cells = parse_grid(&text, data.seq_len).map_err(CliError::usage)?;
    let summary: Vec<(String, f64, TrainCfg)> = cells
        .iter()
        .map(|c| (c.method.clone(), c.knob, c.cfg.clone()))
        .collect();
    let hash = fnv1a64(
        serde_json::to_string(&summary)
            .map_err(|e| CliError::run(format!("serializing grid: {e}")))?
            .as_bytes(),
    );
    let tables = rate_distortion_sweep(&cells, &data, threads);
    let header = csv_header(hash);
    emit(out_test, &format!("{header}{}", sweep_csv(&tables.test)))?;
    if let Some(path) = out_train {
        emit(Some(path), &format!("{header}{}", sweep_csv(&tables.train)))?;
    }
    for failure in &tables.failures {
        eprintln!("failed cell: {failure}");
    }
    Ok(if tables.failures.is_empty() { 0 } else { 1 })
}

/// Split config text into ordered `(key, value)` pairs. `#` starts a
/// comment anywhere on a line; blank lines are skipped; everything else
/// must be `key = value`.
fn parse_kv_file(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut pairs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(format!(
                "line {}: expected `key = value`, got {raw:?}",
                idx + 1
            ));
        };
        let key = k.trim();
        let value = v.trim();
        if key.is_empty() || value.is_empty() {
            return Err(format!("line {}: empty key or value in {raw:?}", idx + 1));
        }
        pairs.push((key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

/// Objective-mode keys are collected across the file and assembled once
/// all lines are read, so key order never matters.
#[derive(Default)]
struct ObjectiveKeys {
    mode: Option<String>,
    beta: Option<f64>,
    free_bits_per_cell: Option<f64>,
    free_bits_granularity: Option<FreeBitsGranularity>,
    anneal_end_step: Option<u64>,
}

const TRAIN_KEYS: &str = "steps, batch_size, learning_rate, mc_samples, seed, log_every, \
     checkpoint_every, checkpoint_dir, eval_sequences, obs_dim, latent_dim, enc_hidden, \
     enc_depth, dec_hidden, dec_depth, encoder_mode, constraint, delta_nats, prior_alphas, \
     objective, beta, free_bits_per_cell, free_bits_granularity, anneal_end_step";

/// Apply ordered pairs on top of a base config; unknown keys and
/// mode/knob mismatches are errors.
fn build_train_cfg(pairs: &[(String, String)], base: TrainCfg) -> Result<TrainCfg, String> {
    let mut cfg = base;
    let mut obj = ObjectiveKeys::default();
    for (key, value) in pairs {
        apply_train_key(&mut cfg, &mut obj, key, value)
            .map_err(|e| format!("key `{key}`: {e}"))?;
    }
    if let Some(objective) = assemble_objective(&obj)? {
        cfg.objective = objective;
    }
    Ok(cfg)
}

fn parse_as<T: std::str::FromStr>(value: &str, what: &str) -> Result<T, String> {
    value
        .parse::<T>()
        .map_err(|_| format!("cannot parse {value:?} as {what}"))
}

fn apply_train_key(
    cfg: &mut TrainCfg,
    obj: &mut ObjectiveKeys,
    key: &str,
    value: &str,
) -> Result<(), String> {
    match key {
        "steps" => cfg.steps = parse_as(value, "an integer")?,
        "batch_size" => cfg.batch_size = parse_as(value, "an integer")?,
        "learning_rate" => cfg.learning_rate = parse_as(value, "a number")?,
        "mc_samples" => cfg.mc_samples = parse_as(value, "an integer")?,
        "seed" => cfg.seed = parse_as(value, "an integer")?,
        "log_every" => cfg.log_every = parse_as(value, "an integer")?,
        "checkpoint_every" => cfg.checkpoint_every = parse_as(value, "an integer")?,
        "checkpoint_dir" => cfg.checkpoint_dir = Some(PathBuf::from(value)),
        "eval_sequences" => cfg.eval_sequences = parse_as(value, "an integer")?,
        "obs_dim" => cfg.model.obs_dim = parse_as(value, "an integer")?,
        "latent_dim" => cfg.model.latent_dim = parse_as(value, "an integer")?,
        "enc_hidden" => cfg.model.enc_hidden = parse_as(value, "an integer")?,
        "enc_depth" => cfg.model.enc_depth = parse_as(value, "an integer")?,
        "dec_hidden" => cfg.model.dec_hidden = parse_as(value, "an integer")?,
        "dec_depth" => cfg.model.dec_depth = parse_as(value, "an integer")?,
        "encoder_mode" => {
            cfg.model.encoder_mode = match value {
                "anti_causal" => EncoderMode::AntiCausal,
                "non_causal" => EncoderMode::NonCausal,
                other => return Err(format!("unknown mode {other:?} (anti_causal, non_causal)")),
            }
        }
        "constraint" => {
            cfg.model.constraint = match value {
                "none" => ConstraintMode::None,
                "temporal_delta" => ConstraintMode::TemporalDelta,
                "independent_delta" => ConstraintMode::IndependentDelta,
                other => {
                    return Err(format!(
                        "unknown constraint {other:?} (none, temporal_delta, independent_delta)"
                    ))
                }
            }
        }
        "delta_nats" => cfg.model.delta_nats = parse_as(value, "a number")?,
        "prior_alphas" => {
            let alphas: Result<Vec<f64>, _> =
                value.split(',').map(|t| t.trim().parse::<f64>()).collect();
            cfg.model.prior_alphas =
                alphas.map_err(|_| format!("cannot parse {value:?} as comma-separated numbers"))?;
        }
        "objective" => obj.mode = Some(value.to_string()),
        "beta" => obj.beta = Some(parse_as(value, "a number")?),
        "free_bits_per_cell" => obj.free_bits_per_cell = Some(parse_as(value, "a number")?),
        "free_bits_granularity" => {
            obj.free_bits_granularity = Some(match value {
                "per_cell" => FreeBitsGranularity::PerCell,
                "per_timestep" => FreeBitsGranularity::PerTimestep,
                "per_dim" => FreeBitsGranularity::PerDim,
                "total" => FreeBitsGranularity::Total,
                other => {
                    return Err(format!(
                        "unknown granularity {other:?} (per_cell, per_timestep, per_dim, total)"
                    ))
                }
            })
        }
        "anneal_end_step" => obj.anneal_end_step = Some(parse_as(value, "an integer")?),
        other => return Err(format!("unknown key `{other}`; valid keys: {TRAIN_KEYS}")),
    }
    Ok(())
}

/// Build the objective from collected keys. Returns `None` when no
/// objective key appeared (keep the base objective); knobs for a mode
/// that was not selected are errors.
fn assemble_objective(obj: &ObjectiveKeys) -> Result<Option<ObjectiveCfg>, String> {
    let knobs_given = obj.beta.is_some()
        || obj.free_bits_per_cell.is_some()
        || obj.free_bits_granularity.is_some()
        || obj.anneal_end_step.is_some();
    let Some(mode) = obj.mode.as_deref() else {
        if knobs_given {
            return Err("objective knobs given without an `objective = ...` line".into());
        }
        return Ok(None);
    };
    let reject = |cond: bool, what: &str, mode: &str| {
        if cond {
            Err(format!("`{what}` does not apply to objective = {mode}"))
        } else {
            Ok(())
        }
    };
    let cfg = match mode {
        "vanilla" | "delta_structural" => {
            reject(obj.beta.is_some(), "beta", mode)?;
            reject(obj.free_bits_per_cell.is_some(), "free_bits_per_cell", mode)?;
            reject(
                obj.free_bits_granularity.is_some(),
                "free_bits_granularity",
                mode,
            )?;
            reject(obj.anneal_end_step.is_some(), "anneal_end_step", mode)?;
            if mode == "vanilla" {
                ObjectiveCfg::Vanilla
            } else {
                ObjectiveCfg::DeltaStructural
            }
        }
        "beta" => {
            reject(obj.free_bits_per_cell.is_some(), "free_bits_per_cell", mode)?;
            reject(
                obj.free_bits_granularity.is_some(),
                "free_bits_granularity",
                mode,
            )?;
            reject(obj.anneal_end_step.is_some(), "anneal_end_step", mode)?;
            ObjectiveCfg::Beta {
                beta: obj.beta.ok_or("objective = beta needs a `beta = ...` line")?,
            }
        }
        "free_bits" => {
            reject(obj.beta.is_some(), "beta", mode)?;
            reject(obj.anneal_end_step.is_some(), "anneal_end_step", mode)?;
            ObjectiveCfg::FreeBits {
                free_bits_per_cell: obj
                    .free_bits_per_cell
                    .ok_or("objective = free_bits needs a `free_bits_per_cell = ...` line")?,
                granularity: obj
                    .free_bits_granularity
                    .unwrap_or(FreeBitsGranularity::PerCell),
            }
        }
        "anneal" => {
            reject(obj.beta.is_some(), "beta", mode)?;
            reject(obj.free_bits_per_cell.is_some(), "free_bits_per_cell", mode)?;
            reject(
                obj.free_bits_granularity.is_some(),
                "free_bits_granularity",
                mode,
            )?;
            ObjectiveCfg::Anneal {
                anneal_end_step: obj
                    .anneal_end_step
                    .ok_or("objective = anneal needs an `anneal_end_step = ...` line")?,
            }
        }
        other => {
            return Err(format!(
                "unknown objective {other:?} \
                 (vanilla, delta_structural, beta, free_bits, anneal)"
            ))
        }
    };
    Ok(Some(cfg))
}

/// Parse a sweep grid: each non-comment line is
/// `method knob seed [key=value ...]`, where method is one of vanilla,
/// beta, free_bits, anneal, delta. The knob feeds the method's main dial
/// (beta coefficient, free-bits threshold, anneal end step, total delta
/// nats per sequence; ignored for vanilla) and trailing pairs override
/// any train-config key.
fn parse_grid(text: &str, seq_len: usize) -> Result<Vec<SweepCell>, String> {
    let mut cells = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |e: String| format!("line {}: {e}", idx + 1);
        let mut tokens = line.split_whitespace();
        let (Some(method), Some(knob), Some(seed)) =
            (tokens.next(), tokens.next(), tokens.next())
        else {
            return Err(err(format!(
                "expected `method knob seed [key=value ...]`, got {raw:?}"
            )));
        };
        let knob: f64 = parse_as(knob, "a number").map_err(&err)?;
        let seed: u64 = parse_as(seed, "an integer").map_err(&err)?;
        let base = cell_base(method, knob, seed, seq_len).map_err(&err)?;
        let overrides: Vec<(String, String)> = tokens
            .map(|t| {
                t.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| err(format!("override {t:?} is not key=value")))
            })
            .collect::<Result<_, _>>()?;
        let cfg = build_train_cfg(&overrides, base).map_err(&err)?;
        cells.push(SweepCell {
            method: method.to_string(),
            knob,
            cfg,
        });
    }
    if cells.is_empty() {
        return Err("grid file has no runs".into());
    }
    Ok(cells)
}

/// Map a method label and its knob onto a demo-based config.
fn cell_base(method: &str, knob: f64, seed: u64, seq_len: usize) -> Result<TrainCfg, String> {
    let mut cfg = collapse_demo_cfg(seed);
    match method {
        "vanilla" => {}
        "beta" => cfg.objective = ObjectiveCfg::Beta { beta: knob },
        "free_bits" => {
            cfg.objective = ObjectiveCfg::FreeBits {
                free_bits_per_cell: knob,
                granularity: FreeBitsGranularity::PerCell,
            }
        }
        "anneal" => {
            if knob < 0.0 || knob.fract() != 0.0 {
                return Err(format!("anneal knob must be a whole step count, got {knob}"));
            }
            cfg.objective = ObjectiveCfg::Anneal {
                anneal_end_step: knob as u64,
            };
        }
        "delta" => {
            cfg = delta_demo_cfg(knob, seq_len, seed).map_err(|e| e.to_string())?;
        }
        other => {
            return Err(format!(
                "unknown method {other:?} (vanilla, beta, free_bits, anneal, delta)"
            ))
        }
    }
    Ok(cfg)
}
