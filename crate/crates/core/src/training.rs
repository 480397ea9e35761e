//! Objectives, the batched ELBO graph, the Adam optimizer, the training
//! loop and its run record, the linear probe, and the rate-distortion
//! sweep.
//!
//! The rate term is always the analytic sequential KL, assembled inside
//! the autodiff graph from the same per-cell chain terms the closed form
//! sums; sampling enters only through the reconstruction term. Runs with a
//! structural constraint check the measured rate against the committed
//! floor at every step. A run is fully determined by its configuration and
//! seed: batches, reparameterization noise, evaluation, and the probe all
//! draw from derived streams, so repeating a run reproduces every logged
//! metric bit for bit (wall-clock time is the one field outside that
//! contract).

use ndarray::{Array1, Array2, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::ar1::Ar1Prior;
use crate::autodiff::{Graph, NodeId};
use crate::consts::{DELTA_GUARANTEE_SLACK, NATS_TO_BITS, OBS_STD};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nets::{ConstraintMode, ModelCfg, ModelVars, ToyModel};
use crate::rng::{derive_seed, fnv1a64_f64s_seeded, stream_rng, FNV_OFFSET};

/// Run-record format version; bumped on any layout change.
pub const RECORD_FORMAT_VERSION: u32 = 1;

/// Seed streams carved out of a run seed so no two consumers share one.
const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_EVAL_TRAIN: u64 = 4;
const STREAM_EVAL_TEST: u64 = 5;

/// Grouping at which the free-bits floor is applied. The threshold is
/// stated per cell and scaled by group size, so a given threshold spends
/// the same total floor budget at every granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreeBitsGranularity {
    /// Every (timestep, dimension) cell floored on its own.
    PerCell,
    /// Cells pooled across dimensions within a timestep.
    PerTimestep,
    /// Cells pooled across timesteps within a dimension.
    PerDim,
    /// One floor on the whole rate.
    Total,
}

/// The training objective. Exactly one mode is active; each variant
/// carries only the knobs that mode reads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ObjectiveCfg {
    /// Plain negative ELBO.
    Vanilla,
    /// Plain negative ELBO; the anti-collapse mechanism is the model's
    /// structural constraint, not a changed loss.
    DeltaStructural,
    /// Rate weighted by a fixed coefficient.
    Beta { beta: f64 },
    /// Rate terms floored so KL below the threshold is not rewarded.
    FreeBits {
        free_bits_per_cell: f64,
        granularity: FreeBitsGranularity,
    },
    /// Rate weight ramped linearly from 0 at step 0 to 1 at the end step.
    Anneal { anneal_end_step: u64 },
}

impl ObjectiveCfg {
    /// Stable identifier used in tables and file names.
    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveCfg::Vanilla => "vanilla",
            ObjectiveCfg::DeltaStructural => "delta_structural",
            ObjectiveCfg::Beta { .. } => "beta",
            ObjectiveCfg::FreeBits { .. } => "free_bits",
            ObjectiveCfg::Anneal { .. } => "anneal",
        }
    }

    /// Multiplier on the analytic rate at the given step.
    pub fn rate_weight(&self, step: u64) -> f64 {
        match self {
            ObjectiveCfg::Vanilla
            | ObjectiveCfg::DeltaStructural
            | ObjectiveCfg::FreeBits { .. } => 1.0,
            ObjectiveCfg::Beta { beta } => *beta,
            ObjectiveCfg::Anneal { anneal_end_step } => {
                if *anneal_end_step == 0 {
                    1.0
                } else {
                    (step as f64 / *anneal_end_step as f64).min(1.0)
                }
            }
        }
    }

    /// Whether minimizing this objective also maximizes a true lower
    /// bound on the data log-likelihood. A rate weight other than one or
    /// a positive free-bits floor breaks the bound; annealing breaks it
    /// until the ramp saturates, so it is flagged too.
    pub fn likelihood_bound(&self) -> bool {
        match self {
            ObjectiveCfg::Vanilla | ObjectiveCfg::DeltaStructural => true,
            ObjectiveCfg::Beta { beta } => *beta == 1.0,
            ObjectiveCfg::FreeBits {
                free_bits_per_cell, ..
            } => *free_bits_per_cell == 0.0,
            ObjectiveCfg::Anneal { anneal_end_step } => *anneal_end_step == 0,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ObjectiveCfg::Beta { beta } => {
                if !beta.is_finite() || *beta < 0.0 {
                    return Err(Error::Config(format!(
                        "beta must be finite and nonnegative, got {beta}"
                    )));
                }
            }
            ObjectiveCfg::FreeBits {
                free_bits_per_cell, ..
            } => {
                if !free_bits_per_cell.is_finite() || *free_bits_per_cell < 0.0 {
                    return Err(Error::Config(format!(
                        "free bits must be finite and nonnegative, got {free_bits_per_cell}"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// One evaluation of the objective on a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboBreakdown {
    /// Monte-Carlo estimate of `E_q[log p(x|z)]` per sequence, batch mean.
    pub reconstruction: f64,
    /// Analytic `KL(q || p)` per sequence, batch mean.
    pub rate: f64,
    /// Mode-transformed loss the optimizer sees.
    pub objective_value: f64,
    /// Batch-mean analytic KL per (timestep, dimension) cell, `n x d`.
    pub per_cell_kl: Array2<f64>,
}

impl ElboBreakdown {
    /// Negative ELBO in loss form.
    pub fn neg_elbo(&self) -> f64 {
        -self.reconstruction + self.rate
    }

    /// Negative expected reconstruction log-likelihood.
    pub fn distortion(&self) -> f64 {
        -self.reconstruction
    }
}

pub(crate) struct ElboNodes {
    pub(crate) loss: NodeId,
    pub(crate) recon: NodeId,
    pub(crate) rate: NodeId,
    pub(crate) per_cell: NodeId,
}

/// Assemble the batched objective on an existing tape. `vars` must come
/// from the same model, either via [`ToyModel::bind`] or rebuilt from
/// external parameter nodes; both the training loop and the gradient
/// checker go through this one builder.
pub(crate) fn build_elbo(
    model: &ToyModel,
    g: &mut Graph,
    vars: &ModelVars,
    batch: &[&Array2<f64>],
    objective: &ObjectiveCfg,
    mc_samples: usize,
    noise_seed: u64,
    step: u64,
) -> Result<ElboNodes> {
    objective.validate()?;
    if mc_samples == 0 {
        return Err(Error::Config(
            "reconstruction needs at least one Monte-Carlo sample".into(),
        ));
    }
    let first = batch
        .first()
        .ok_or_else(|| Error::Config("empty batch".into()))?;
    let (n, obs_dim) = first.dim();
    if obs_dim != model.cfg.obs_dim {
        return Err(Error::Config(format!(
            "batch has {obs_dim} observation dims, model expects {}",
            model.cfg.obs_dim
        )));
    }
    if n == 0 {
        return Err(Error::Domain("sequences must have at least one step".into()));
    }
    for x in batch {
        if x.dim() != (n, obs_dim) {
            return Err(Error::Config(
                "all sequences in a batch must share a shape".into(),
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("observations must be finite".into()));
        }
    }
    let b = batch.len();
    let d = model.cfg.latent_dim;

    // Observations and their right-shifted copies as constants.
    let slab = |g: &mut Graph, t: usize, shift: bool| -> NodeId {
        let mut rows = Array2::zeros((b, obs_dim));
        if !(shift && t == 0) {
            let src = if shift { t - 1 } else { t };
            for (row, x) in rows.rows_mut().into_iter().zip(batch) {
                let mut row = row;
                row.assign(&x.row(src));
            }
        }
        g.constant(rows)
    };
    let x_now: Vec<NodeId> = (0..n).map(|t| slab(g, t, false)).collect();
    let x_prev: Vec<NodeId> = (0..n).map(|t| slab(g, t, true)).collect();

    let posterior = model.posterior_graph(g, vars, &x_now, b)?;

    // Analytic per-cell KL against the AR(1) prior, chain-decomposed. Row
    // constants hold the per-dimension prior quantities.
    let alphas = model.prior.alphas();
    let row_const = |g: &mut Graph, f: &dyn Fn(f64) -> f64| -> NodeId {
        g.constant(Array2::from_shape_fn((1, d), |(_, k)| f(alphas[k])))
    };
    let alpha_row = row_const(g, &|a| a);
    let ln_ve_row = row_const(g, &|a| (1.0 - a * a).ln());
    let inv_ve_row = row_const(g, &|a| 1.0 / (1.0 - a * a));
    let a2_over_ve_row = row_const(g, &|a| a * a / (1.0 - a * a));
    let batch_mean = g.constant(Array2::from_elem((1, b), 1.0 / b as f64));

    let mut mean_cells: Vec<NodeId> = Vec::with_capacity(n);
    for t in 0..n {
        let (mu, sd) = posterior[t];
        let v = g.square(sd);
        let ln_v = g.log(v);
        let cell = if t == 0 {
            // KL(N(mu, v) || N(0, 1)) = (v + mu^2 - 1 - ln v) / 2.
            let mu2 = g.square(mu);
            let s = g.add(v, mu2)?;
            let s = g.sub(s, ln_v)?;
            let s = g.add_scalar(s, -1.0);
            g.mul_scalar(s, 0.5)
        } else {
            // Chain term: (ln(ve/v) + (v + dm^2 + a^2 vprev) / ve - 1) / 2
            // with dm = mu_t - a mu_{t-1} and ve the innovation variance.
            let (mu_prev, sd_prev) = posterior[t - 1];
            let a_mu_prev = g.mul_row(mu_prev, alpha_row)?;
            let dm = g.sub(mu, a_mu_prev)?;
            let dm2 = g.square(dm);
            let v_prev = g.square(sd_prev);
            let num = g.add(v, dm2)?;
            let num_over_ve = g.mul_row(num, inv_ve_row)?;
            let prev_term = g.mul_row(v_prev, a2_over_ve_row)?;
            let frac = g.add(num_over_ve, prev_term)?;
            let neg_ln_v = g.neg(ln_v);
            let ln_ratio = g.add_row(neg_ln_v, ln_ve_row)?;
            let s = g.add(ln_ratio, frac)?;
            let s = g.add_scalar(s, -1.0);
            g.mul_scalar(s, 0.5)
        };
        mean_cells.push(g.matmul(batch_mean, cell)?);
    }
    let per_cell = g.concat_rows(&mean_cells)?;
    let rate = g.sum(per_cell);

    // Reconstruction: Gaussian log-likelihood at the fixed observation
    // noise, Monte-Carlo averaged over reparameterized latents.
    let mut noise_rng = stream_rng(noise_seed, 0);
    let mut sq_err_sum: Option<NodeId> = None;
    for _ in 0..mc_samples {
        let zs: Vec<NodeId> = posterior
            .iter()
            .map(|&(mu, sd)| {
                let eps = Array2::from_shape_fn((b, d), |_| noise_rng.sample(StandardNormal));
                let eps = g.constant(eps);
                let scaled = g.mul(sd, eps)?;
                g.add(mu, scaled)
            })
            .collect::<Result<Vec<_>>>()?;
        let means = model.decoder.means(g, &vars.decoder, &x_prev, &zs, b)?;
        for t in 0..n {
            let diff = g.sub(x_now[t], means[t])?;
            let sq = g.square(diff);
            let s = g.sum(sq);
            sq_err_sum = Some(match sq_err_sum {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
    }
    let sq_err = sq_err_sum.expect("n >= 1 and mc_samples >= 1");
    let scale = -0.5 / (OBS_STD * OBS_STD * (b * mc_samples) as f64);
    let scaled = g.mul_scalar(sq_err, scale);
    let log_norm = (n * obs_dim) as f64
        * (-0.5 * (2.0 * std::f64::consts::PI).ln() - OBS_STD.ln());
    let recon = g.add_scalar(scaled, log_norm);

    // Mode transform on the rate side.
    let rate_term = match objective {
        ObjectiveCfg::Vanilla | ObjectiveCfg::DeltaStructural => rate,
        ObjectiveCfg::Beta { beta } => g.mul_scalar(rate, *beta),
        ObjectiveCfg::Anneal { .. } => g.mul_scalar(rate, objective.rate_weight(step)),
        ObjectiveCfg::FreeBits {
            free_bits_per_cell,
            granularity,
        } => {
            let fb = *free_bits_per_cell;
            match granularity {
                FreeBitsGranularity::PerCell => {
                    let floored = g.max_scalar(per_cell, fb);
                    g.sum(floored)
                }
                FreeBitsGranularity::PerTimestep => {
                    let per_t = g.sum_cols(per_cell);
                    let floored = g.max_scalar(per_t, fb * d as f64);
                    g.sum(floored)
                }
                FreeBitsGranularity::PerDim => {
                    let ones = g.constant(Array2::from_elem((1, n), 1.0));
                    let per_dim = g.matmul(ones, per_cell)?;
                    let floored = g.max_scalar(per_dim, fb * n as f64);
                    g.sum(floored)
                }
                FreeBitsGranularity::Total => g.max_scalar(rate, fb * (n * d) as f64),
            }
        }
    };
    let neg_recon = g.neg(recon);
    let loss = g.add(neg_recon, rate_term)?;
    Ok(ElboNodes {
        loss,
        recon,
        rate,
        per_cell,
    })
}

/// Evaluate the objective on a batch, with the annealing ramp saturated;
/// the training loop evaluates the live ramp through its own path.
pub fn elbo(
    model: &ToyModel,
    batch: &[&Array2<f64>],
    objective: &ObjectiveCfg,
    mc_samples: usize,
    seed: u64,
) -> Result<ElboBreakdown> {
    elbo_at_step(model, batch, objective, mc_samples, seed, u64::MAX)
}

/// Evaluate the objective on a batch as it would be seen at a training
/// step (the step only matters for annealing).
pub fn elbo_at_step(
    model: &ToyModel,
    batch: &[&Array2<f64>],
    objective: &ObjectiveCfg,
    mc_samples: usize,
    seed: u64,
    step: u64,
) -> Result<ElboBreakdown> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let nodes = build_elbo(model, &mut g, &vars, batch, objective, mc_samples, seed, step)?;
    Ok(ElboBreakdown {
        reconstruction: g.value(nodes.recon)[[0, 0]],
        rate: g.value(nodes.rate)[[0, 0]],
        objective_value: g.value(nodes.loss)[[0, 0]],
        per_cell_kl: g.value(nodes.per_cell).clone(),
    })
}

/// Adam with bias correction; hyperparameters fixed apart from the step
/// size.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    /// One update in place. Parameter and gradient lists must match the
    /// shapes this optimizer was built with.
    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer built for {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            if p.dim() != m.dim() || grad.dim() != m.dim() {
                return Err(Error::Contract(
                    "parameter shape drifted from the optimizer state".into(),
                ));
            }
            Zip::from(&mut **p)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                });
        }
        Ok(())
    }
}

/// Everything that determines a run, besides the dataset it is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCfg {
    pub model: ModelCfg,
    pub objective: ObjectiveCfg,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mc_samples: usize,
    pub seed: u64,
    /// Metrics are recorded every this many steps, plus the final step.
    pub log_every: u64,
    /// Checkpoint interval in steps; 0 disables checkpoints.
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Cap on sequences used per split in the final evaluation.
    pub eval_sequences: usize,
}

impl TrainCfg {
    fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if self.steps == 0 || self.batch_size == 0 || self.mc_samples == 0 {
            return Err(Error::Config(
                "steps, batch_size, and mc_samples must be positive".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return Err(Error::Config(
                "checkpoint_every needs a checkpoint_dir".into(),
            ));
        }
        if self.eval_sequences == 0 {
            return Err(Error::Config("eval_sequences must be positive".into()));
        }
        Ok(())
    }
}

/// Metrics at one logged step, all from before that step's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub reconstruction: f64,
    pub rate: f64,
    pub objective: f64,
}

/// Final evaluation of a trained model on one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitEval {
    /// ELBO per sequence (reconstruction minus rate); a likelihood bound.
    pub elbo: f64,
    pub rate_nats: f64,
    pub rate_bits: f64,
    pub distortion_nats: f64,
    pub probe_accuracy: f64,
}

/// The complete artifact of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: u32,
    pub cfg: TrainCfg,
    pub dataset_fingerprint: u64,
    /// Structural lower bound on the rate implied by the model's
    /// constraint mode; zero when unconstrained.
    pub committed_floor_nats: f64,
    /// False when the training objective deviates from a likelihood
    /// bound (rate weight != 1 or a positive free-bits floor).
    pub objective_is_likelihood_bound: bool,
    /// Logged in strictly increasing step order.
    pub steps: Vec<StepMetrics>,
    pub train_eval: SplitEval,
    pub test_eval: SplitEval,
    /// Informational only; excluded from the determinism contract.
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// Order-sensitive hash of every logged metric, excluding wall-clock
    /// time; two runs of the same config and seed must match on this.
    pub fn metrics_fingerprint(&self) -> u64 {
        let mut h = FNV_OFFSET;
        h = fnv1a64_f64s_seeded(h, [self.committed_floor_nats]);
        for s in &self.steps {
            h = fnv1a64_f64s_seeded(
                h,
                [s.step as f64, s.reconstruction, s.rate, s.objective],
            );
        }
        for e in [&self.train_eval, &self.test_eval] {
            h = fnv1a64_f64s_seeded(
                h,
                [
                    e.elbo,
                    e.rate_nats,
                    e.rate_bits,
                    e.distortion_nats,
                    e.probe_accuracy,
                ],
            );
        }
        h
    }

    /// Metric-level equality, the determinism contract: everything except
    /// wall-clock time.
    pub fn metrics_eq(&self, other: &RunRecord) -> bool {
        self.version == other.version
            && self.cfg == other.cfg
            && self.dataset_fingerprint == other.dataset_fingerprint
            && self.committed_floor_nats == other.committed_floor_nats
            && self.objective_is_likelihood_bound == other.objective_is_likelihood_bound
            && self.steps == other.steps
            && self.train_eval == other.train_eval
            && self.test_eval == other.test_eval
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let record: RunRecord = serde_json::from_reader(std::io::BufReader::new(file))?;
        if record.version != RECORD_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "run record version {} is not the supported {RECORD_FORMAT_VERSION}",
                record.version
            )));
        }
        Ok(record)
    }
}

/// Structural rate floor for a model on sequences of length `n`.
///
/// The per-cell constraint pins each marginal against N(0, 1), so its
/// additive floor `n * delta` applies to dimensions whose prior is exactly
/// that. A correlated dimension falls back to the family-mismatch bound,
/// which holds for every time-factorized posterior, constrained or not.
fn committed_floor(model: &ToyModel, n: usize) -> Result<f64> {
    match model.cfg.constraint {
        ConstraintMode::None => Ok(0.0),
        ConstraintMode::TemporalDelta => model.prior.committed_rate(n),
        ConstraintMode::IndependentDelta => {
            let mut floor = 0.0;
            for &a in model.prior.alphas() {
                if a == 0.0 {
                    floor += n as f64 * model.cfg.delta_nats;
                } else {
                    floor += Ar1Prior::new(Array1::from(vec![a]))?.committed_rate(n)?;
                }
            }
            Ok(floor)
        }
    }
}

/// Run the training loop to completion. The returned record holds the
/// config snapshot, logged metrics, and final train/test evaluations; the
/// trained model comes back alongside it.
pub fn train(cfg: &TrainCfg, data: &Dataset) -> Result<(ToyModel, RunRecord)> {
    cfg.validate()?;
    if data.obs_dim != cfg.model.obs_dim {
        return Err(Error::Config(format!(
            "dataset has {} observation dims, model expects {}",
            data.obs_dim, cfg.model.obs_dim
        )));
    }
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Config("dataset must have train and test sequences".into()));
    }
    let start = Instant::now();
    let mut model = ToyModel::new(
        cfg.model.clone(),
        cfg.objective,
        derive_seed(cfg.seed, STREAM_INIT),
    )?;
    let floor = committed_floor(&model, data.seq_len)?;
    let shapes: Vec<(usize, usize)> = model.params().iter().map(|p| p.dim()).collect();
    let mut adam = Adam::new(cfg.learning_rate, &shapes);
    let mut batch_rng = stream_rng(cfg.seed, STREAM_BATCH);
    let noise_base = derive_seed(cfg.seed, STREAM_NOISE);
    let mut steps_log: Vec<StepMetrics> = Vec::new();

    for step in 0..cfg.steps {
        let batch: Vec<&Array2<f64>> = (0..cfg.batch_size)
            .map(|_| &data.train.sequences[batch_rng.gen_range(0..data.train.len())])
            .collect();
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let nodes = build_elbo(
            &model,
            &mut g,
            &vars,
            &batch,
            &cfg.objective,
            cfg.mc_samples,
            derive_seed(noise_base, step),
            step,
        )?;
        let objective_value = g.value(nodes.loss)[[0, 0]];
        let reconstruction = g.value(nodes.recon)[[0, 0]];
        let rate = g.value(nodes.rate)[[0, 0]];
        if !objective_value.is_finite() {
            return Err(Error::Diverged(format!(
                "objective became {objective_value} at step {step} \
                 (reconstruction {reconstruction}, rate {rate})"
            )));
        }
        if floor > 0.0 && rate < floor - DELTA_GUARANTEE_SLACK {
            return Err(Error::Diverged(format!(
                "measured rate {rate} fell below the committed floor {floor} at step {step}"
            )));
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            steps_log.push(StepMetrics {
                step,
                reconstruction,
                rate,
                objective: objective_value,
            });
        }
        let grads = g.backward(nodes.loss)?;
        let gradient_arrays: Vec<Array2<f64>> = vars
            .ids()
            .iter()
            .zip(&shapes)
            .map(|(&id, &shape)| grads.get_or_zeros(id, shape))
            .collect();
        let mut params = model.params_mut();
        adam.step(&mut params, &gradient_arrays)?;
        // Circuit breaker: weights this large overflow to infinity as soon as
        // the next forward pass squares them, so call the run diverged now
        // while there is still a finite number to report.
        const PARAM_DIVERGENCE_LIMIT: f64 = 1e100;
        let exploded = params
            .iter()
            .any(|p| p.iter().any(|v| !v.is_finite() || v.abs() > PARAM_DIVERGENCE_LIMIT));
        drop(params);
        if exploded {
            return Err(Error::Diverged(format!(
                "parameters exploded after the update at step {step} \
                 (objective was {objective_value}); lower the learning rate"
            )));
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            let dir = cfg.checkpoint_dir.as_ref().expect("validated");
            std::fs::create_dir_all(dir)?;
            model.save(&dir.join(format!("checkpoint_{:07}.json", step + 1)))?;
        }
    }

    let train_eval = eval_split(&model, &data.train, cfg, STREAM_EVAL_TRAIN)?;
    let test_eval = eval_split(&model, &data.test, cfg, STREAM_EVAL_TEST)?;
    let record = RunRecord {
        version: RECORD_FORMAT_VERSION,
        cfg: cfg.clone(),
        dataset_fingerprint: data.fingerprint(),
        committed_floor_nats: floor,
        objective_is_likelihood_bound: cfg.objective.likelihood_bound(),
        steps: steps_log,
        train_eval,
        test_eval,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((model, record))
}

/// Plain-ELBO evaluation plus linear probe on one split, capped at the
/// configured sequence budget.
fn eval_split(model: &ToyModel, split: &Split, cfg: &TrainCfg, stream: u64) -> Result<SplitEval> {
    let count = cfg.eval_sequences.min(split.len());
    let seqs = &split.sequences[..count];
    let labels = &split.labels[..count];
    let seed = derive_seed(cfg.seed, stream);
    let mut recon_sum = 0.0;
    let mut rate_sum = 0.0;
    for (bi, chunk) in seqs.chunks(cfg.batch_size.max(1)).enumerate() {
        let batch: Vec<&Array2<f64>> = chunk.iter().collect();
        let b = elbo(
            model,
            &batch,
            &ObjectiveCfg::Vanilla,
            cfg.mc_samples,
            derive_seed(seed, bi as u64),
        )?;
        recon_sum += b.reconstruction * batch.len() as f64;
        rate_sum += b.rate * batch.len() as f64;
    }
    let reconstruction = recon_sum / count as f64;
    let rate = rate_sum / count as f64;
    let d = model.cfg.latent_dim;
    let n = split.sequences[0].nrows();
    let mut features = Array2::zeros((count, n * d));
    let mut done = 0;
    for chunk in seqs.chunks(64) {
        let batch: Vec<&Array2<f64>> = chunk.iter().collect();
        for q in model.encode_batch(&batch)? {
            let flat = Array1::from_iter(q.means().iter().copied());
            features.row_mut(done).assign(&flat);
            done += 1;
        }
    }
    let probe_accuracy = linear_probe(&features, labels, derive_seed(seed, 0xACC))?;
    Ok(SplitEval {
        elbo: reconstruction - rate,
        rate_nats: rate,
        rate_bits: rate * NATS_TO_BITS,
        distortion_nats: -reconstruction,
        probe_accuracy,
    })
}

const PROBE_ITERS: usize = 600;
const PROBE_LR: f64 = 0.05;
const PROBE_L2: f64 = 1e-3;

/// Held-out accuracy of a multinomial logistic probe on fixed features.
///
/// Labels must be `0..k` with every class present at least 10 times. The
/// split is stratified 75/25 and fixed by the seed; the probe itself is
/// trained from a zero init by this crate's own gradient loop (the
/// problem is convex, so the seed only moves the split).
pub fn linear_probe(features: &Array2<f64>, labels: &[usize], seed: u64) -> Result<f64> {
    let n = features.nrows();
    if labels.len() != n {
        return Err(Error::Config(format!(
            "{} feature rows but {} labels",
            n,
            labels.len()
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("features must be finite".into()));
    }
    let k = labels.iter().map(|&l| l + 1).max().unwrap_or(0);
    if k < 2 {
        return Err(Error::Domain(
            "probe needs at least two classes, got at most one".into(),
        ));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < 10 {
            return Err(Error::Domain(format!(
                "class {c} has {} examples, the probe needs at least 10 per class",
                members.len()
            )));
        }
    }
    let mut rng = stream_rng(seed, 0x9806E);
    let mut train_idx: Vec<usize> = Vec::new();
    let mut test_idx: Vec<usize> = Vec::new();
    for members in &by_class {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        let cut = members.len() * 3 / 4;
        train_idx.extend_from_slice(&members[..cut]);
        test_idx.extend_from_slice(&members[cut..]);
    }

    // Standardize columns on train statistics.
    let f = features.ncols();
    let m_train = train_idx.len();
    let mut mean = Array1::zeros(f);
    for &i in &train_idx {
        mean += &features.row(i);
    }
    mean /= m_train as f64;
    let mut var = Array1::zeros(f);
    for &i in &train_idx {
        let dev = &features.row(i) - &mean;
        var += &dev.mapv(|v| v * v);
    }
    let std = var.mapv(|v| (v / m_train as f64).sqrt().max(1e-8));
    let gather = |idx: &[usize]| -> Array2<f64> {
        let mut out = Array2::zeros((idx.len(), f));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&((&features.row(i) - &mean) / &std));
        }
        out
    };
    let xt = gather(&train_idx);
    let xs = gather(&test_idx);

    let mut w = Array2::zeros((f, k));
    let mut bias = Array2::zeros((1, k));
    let shapes = [(f, k), (1, k)];
    let mut adam = Adam::new(PROBE_LR, &shapes);
    for _ in 0..PROBE_ITERS {
        let mut p = xt.dot(&w);
        for (mut row, &i) in p.rows_mut().into_iter().zip(&train_idx) {
            row += &bias.row(0);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row /= sum;
            row[labels[i]] -= 1.0;
        }
        let gw = xt.t().dot(&p) / m_train as f64 + &w * PROBE_L2;
        let gb = p.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0)) / m_train as f64;
        let mut params: Vec<&mut Array2<f64>> = vec![&mut w, &mut bias];
        adam.step(&mut params, &[gw, gb])?;
    }

    let mut correct = 0usize;
    for (row, &i) in xs.rows().into_iter().zip(&test_idx) {
        let logits = row.dot(&w) + &bias.row(0);
        let mut best = 0usize;
        for (j, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = j;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_idx.len() as f64)
}

/// One configuration in a rate-distortion sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    /// Method label for the output tables, e.g. "beta" or "delta".
    pub method: String,
    /// The knob value this cell varies, e.g. the beta coefficient.
    pub knob: f64,
    pub cfg: TrainCfg,
}

/// One output row; failed runs keep their identity columns and carry NaN
/// metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub knob: f64,
    pub rate_nats: f64,
    pub rate_bits: f64,
    pub distortion_nats: f64,
    pub probe_acc: f64,
    pub seed: u64,
}

impl SweepRow {
    fn from_eval(cell: &SweepCell, eval: &SplitEval) -> Self {
        SweepRow {
            method: cell.method.clone(),
            knob: cell.knob,
            rate_nats: eval.rate_nats,
            rate_bits: eval.rate_bits,
            distortion_nats: eval.distortion_nats,
            probe_acc: eval.probe_accuracy,
            seed: cell.cfg.seed,
        }
    }

    fn failed(cell: &SweepCell) -> Self {
        SweepRow {
            method: cell.method.clone(),
            knob: cell.knob,
            rate_nats: f64::NAN,
            rate_bits: f64::NAN,
            distortion_nats: f64::NAN,
            probe_acc: f64::NAN,
            seed: cell.cfg.seed,
        }
    }
}

/// Test-split and train-split tables from one sweep, plus the error text
/// of any cells that failed (their rows carry NaN metrics).
#[derive(Debug, Clone, Default)]
pub struct SweepTables {
    pub test: Vec<SweepRow>,
    pub train: Vec<SweepRow>,
    pub failures: Vec<String>,
}

/// Train every cell and tabulate the final evaluations. Cells run on up
/// to `threads` worker threads; rows come back in input order and the
/// result is independent of scheduling because runs share nothing.
pub fn rate_distortion_sweep(
    cells: &[SweepCell],
    data: &Dataset,
    threads: usize,
) -> SweepTables {
    let results: Vec<Mutex<Option<(SweepRow, SweepRow, Option<String>)>>> =
        cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = threads.max(1).min(cells.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let cell = &cells[i];
                let outcome = match train(&cell.cfg, data) {
                    Ok((_, record)) => (
                        SweepRow::from_eval(cell, &record.test_eval),
                        SweepRow::from_eval(cell, &record.train_eval),
                        None,
                    ),
                    Err(e) => (
                        SweepRow::failed(cell),
                        SweepRow::failed(cell),
                        Some(format!("{} at knob {}: {e}", cell.method, cell.knob)),
                    ),
                };
                *results[i].lock().expect("sweep worker poisoned a cell") = Some(outcome);
            });
        }
    });
    let mut tables = SweepTables::default();
    for slot in results {
        let (test, train, failure) = slot
            .into_inner()
            .expect("sweep worker poisoned a cell")
            .expect("every index below cells.len() was claimed by a worker");
        tables.test.push(test);
        tables.train.push(train);
        if let Some(f) = failure {
            tables.failures.push(f);
        }
    }
    tables
}

/// Render rows as CSV under the fixed schema
/// `method,knob,rate_nats,rate_bits,distortion_nats,probe_acc,seed`.
/// Floats print in shortest round-trip form; failed runs show NaN.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("method,knob,rate_nats,rate_bits,distortion_nats,probe_acc,seed\n");
    for r in rows {
        debug_assert!(!r.method.contains(','), "method labels must be comma-free");
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.method, r.knob, r.rate_nats, r.rate_bits, r.distortion_nats, r.probe_acc, r.seed
        ));
    }
    out
}

/// The 4-regime dataset used by the demos: 24 steps of 4 observation
/// dims, 8000 train and 2000 test sequences.
pub fn demo_dataset() -> Result<Dataset> {
    crate::data::gen_synthetic(4, 24, 4, 8000, 2000, 0xDA7A_5E7)
}

fn demo_model(constraint: ConstraintMode, delta_nats: f64, prior_alpha: f64) -> ModelCfg {
    ModelCfg {
        obs_dim: 4,
        latent_dim: 1,
        enc_hidden: 24,
        enc_depth: 1,
        dec_hidden: 32,
        dec_depth: 1,
        encoder_mode: crate::nets::EncoderMode::AntiCausal,
        constraint,
        delta_nats,
        prior_alphas: vec![prior_alpha],
    }
}

fn demo_train(model: ModelCfg, objective: ObjectiveCfg, seed: u64) -> TrainCfg {
    TrainCfg {
        model,
        objective,
        steps: 6000,
        batch_size: 32,
        learning_rate: 1e-3,
        mc_samples: 1,
        seed,
        log_every: 25,
        checkpoint_every: 0,
        checkpoint_dir: None,
        eval_sequences: 400,
    }
}

/// Vanilla objective, unconstrained posterior, iid standard-normal prior,
/// and the strong autoregressive decoder: the collapse demonstration. The
/// horizon is long enough for the rate to pass well below 0.01 nats per
/// sequence and sit there.
pub fn collapse_demo_cfg(seed: u64) -> TrainCfg {
    demo_train(
        demo_model(ConstraintMode::None, 0.0, 0.0),
        ObjectiveCfg::Vanilla,
        seed,
    )
}

/// Same architecture with the sequential committed-rate construction: a
/// mean-field posterior against an AR(1) prior whose correlation is
/// solved so the whole sequence commits `total_delta_nats`. The solve
/// target carries a one-micronat margin so the measured rate stays
/// strictly above the nominal budget in floating point.
pub fn delta_demo_cfg(total_delta_nats: f64, seq_len: usize, seed: u64) -> Result<TrainCfg> {
    if !(total_delta_nats > 0.0) || seq_len == 0 {
        return Err(Error::Config(
            "demo needs a positive total delta and sequence length".into(),
        ));
    }
    let alpha = crate::ar1::solve_alpha_for_rate(total_delta_nats + 1e-6, seq_len, 1)?;
    Ok(demo_train(
        demo_model(ConstraintMode::TemporalDelta, 0.0, alpha),
        ObjectiveCfg::DeltaStructural,
        seed,
    ))
}

/// The representation-quality demonstration: the committed-rate model
/// with a strongly correlated prior (alpha = 0.7, about 4.7 nats per
/// sequence committed). High correlation makes sequence-constant signals
/// cheap relative to per-step ones, so the code the model buys with its
/// budget is dominated by the regime identity and probes well.
pub fn probe_demo_cfg(seed: u64) -> TrainCfg {
    demo_train(
        demo_model(ConstraintMode::TemporalDelta, 0.0, 0.7),
        ObjectiveCfg::DeltaStructural,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::data::gen_synthetic;
    use crate::gauss_kl::kl_seq_closed_form;
    use crate::nets::EncoderMode;
    use ndarray::array;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_data() -> Dataset {
        gen_synthetic(2, 6, 2, 64, 40, 11).unwrap()
    }

    fn tiny_model(constraint: ConstraintMode, delta: f64) -> ModelCfg {
        ModelCfg {
            obs_dim: 2,
            latent_dim: 1,
            enc_hidden: 6,
            enc_depth: 1,
            dec_hidden: 6,
            dec_depth: 1,
            encoder_mode: EncoderMode::AntiCausal,
            constraint,
            delta_nats: delta,
            prior_alphas: vec![0.6],
        }
    }

    fn tiny_cfg(objective: ObjectiveCfg, constraint: ConstraintMode, delta: f64) -> TrainCfg {
        TrainCfg {
            model: tiny_model(constraint, delta),
            objective,
            steps: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            mc_samples: 1,
            seed: 5,
            log_every: 10,
            checkpoint_every: 0,
            checkpoint_dir: None,
            eval_sequences: 40,
        }
    }

    fn tiny_batch(data: &Dataset, count: usize) -> Vec<&Array2<f64>> {
        data.train.sequences[..count].iter().collect()
    }

    #[test]
    fn anneal_weight_ramps_then_saturates() {
        let obj = ObjectiveCfg::Anneal {
            anneal_end_step: 100,
        };
        assert_eq!(obj.rate_weight(0), 0.0, "ramp starts at zero");
        assert_eq!(obj.rate_weight(50), 0.5, "ramp is linear");
        assert_eq!(obj.rate_weight(100), 1.0, "ramp reaches one on time");
        assert_eq!(obj.rate_weight(10_000), 1.0, "ramp stays saturated");
        let degenerate = ObjectiveCfg::Anneal { anneal_end_step: 0 };
        assert_eq!(degenerate.rate_weight(0), 1.0, "zero-length ramp is constant one");
    }

    #[test]
    fn objective_names_and_flags_are_stable() {
        assert_eq!(ObjectiveCfg::Vanilla.name(), "vanilla");
        assert_eq!(ObjectiveCfg::DeltaStructural.name(), "delta_structural");
        assert_eq!(ObjectiveCfg::Beta { beta: 0.3 }.name(), "beta");
        let fb = ObjectiveCfg::FreeBits {
            free_bits_per_cell: 0.1,
            granularity: FreeBitsGranularity::PerCell,
        };
        assert_eq!(fb.name(), "free_bits");
        assert_eq!(ObjectiveCfg::Anneal { anneal_end_step: 5 }.name(), "anneal");
        assert!(ObjectiveCfg::Vanilla.likelihood_bound());
        assert!(ObjectiveCfg::DeltaStructural.likelihood_bound());
        assert!(ObjectiveCfg::Beta { beta: 1.0 }.likelihood_bound());
        assert!(!ObjectiveCfg::Beta { beta: 0.5 }.likelihood_bound());
        assert!(!fb.likelihood_bound());
        assert!(!ObjectiveCfg::Anneal { anneal_end_step: 5 }.likelihood_bound());
    }

    #[test]
    fn objective_serde_roundtrip() {
        for obj in [
            ObjectiveCfg::Vanilla,
            ObjectiveCfg::Beta { beta: 0.25 },
            ObjectiveCfg::FreeBits {
                free_bits_per_cell: 0.05,
                granularity: FreeBitsGranularity::PerTimestep,
            },
            ObjectiveCfg::Anneal {
                anneal_end_step: 42,
            },
        ] {
            let s = serde_json::to_string(&obj).unwrap();
            let back: ObjectiveCfg = serde_json::from_str(&s).unwrap();
            assert_eq!(obj, back, "roundtrip failed for {s}");
        }
        let tagged: ObjectiveCfg =
            serde_json::from_str(r#"{"mode":"beta","beta":0.7}"#).unwrap();
        assert_eq!(tagged, ObjectiveCfg::Beta { beta: 0.7 });
    }

    #[test]
    fn vanilla_objective_is_exactly_the_negative_elbo() {
        let data = tiny_data();
        let model = ToyModel::new(
            tiny_model(ConstraintMode::None, 0.0),
            ObjectiveCfg::Vanilla,
            3,
        )
        .unwrap();
        let batch = tiny_batch(&data, 6);
        let b = elbo(&model, &batch, &ObjectiveCfg::Vanilla, 2, 17).unwrap();
        assert_eq!(
            b.objective_value,
            -b.reconstruction + b.rate,
            "vanilla loss must be the negative ELBO to the last bit"
        );
        let delta = elbo(&model, &batch, &ObjectiveCfg::DeltaStructural, 2, 17).unwrap();
        assert_eq!(delta.objective_value, b.objective_value);
    }

    #[test]
    fn beta_one_and_zero_free_bits_reduce_to_vanilla() {
        let data = tiny_data();
        let model = ToyModel::new(
            tiny_model(ConstraintMode::None, 0.0),
            ObjectiveCfg::Vanilla,
            3,
        )
        .unwrap();
        let batch = tiny_batch(&data, 5);
        let vanilla = elbo(&model, &batch, &ObjectiveCfg::Vanilla, 1, 23).unwrap();
        let beta_one = elbo(&model, &batch, &ObjectiveCfg::Beta { beta: 1.0 }, 1, 23).unwrap();
        assert_eq!(
            beta_one.objective_value, vanilla.objective_value,
            "beta = 1 must equal vanilla exactly"
        );
        for granularity in [
            FreeBitsGranularity::PerCell,
            FreeBitsGranularity::PerTimestep,
            FreeBitsGranularity::PerDim,
            FreeBitsGranularity::Total,
        ] {
            let fb = elbo(
                &model,
                &batch,
                &ObjectiveCfg::FreeBits {
                    free_bits_per_cell: 0.0,
                    granularity,
                },
                1,
                23,
            )
            .unwrap();
            assert!(
                (fb.objective_value - vanilla.objective_value).abs() < 1e-12,
                "zero free bits must reduce to vanilla at {granularity:?}"
            );
        }
    }

    #[test]
    fn beta_and_anneal_scale_only_the_rate() {
        let data = tiny_data();
        let model = ToyModel::new(
            tiny_model(ConstraintMode::None, 0.0),
            ObjectiveCfg::Vanilla,
            3,
        )
        .unwrap();
        let batch = tiny_batch(&data, 5);
        let vanilla = elbo(&model, &batch, &ObjectiveCfg::Vanilla, 1, 29).unwrap();
        let beta = elbo(&model, &batch, &ObjectiveCfg::Beta { beta: 0.25 }, 1, 29).unwrap();
        assert!(
            (beta.objective_value - (-vanilla.reconstruction + 0.25 * vanilla.rate)).abs()
                < 1e-12
        );
        assert_eq!(beta.rate, vanilla.rate, "reported rate stays unweighted");
        let half = elbo_at_step(
            &model,
            &batch,
            &ObjectiveCfg::Anneal {
                anneal_end_step: 100,
            },
            1,
            29,
            50,
        )
        .unwrap();
        assert!(
            (half.objective_value - (-vanilla.reconstruction + 0.5 * vanilla.rate)).abs() < 1e-12
        );
    }

    #[test]
    fn free_bits_floor_binds_and_granularities_order() {
        let data = tiny_data();
        let model = ToyModel::new(
            tiny_model(ConstraintMode::None, 0.0),
            ObjectiveCfg::Vanilla,
            3,
        )
        .unwrap();
        let batch = tiny_batch(&data, 5);
        let vanilla = elbo(&model, &batch, &ObjectiveCfg::Vanilla, 1, 31).unwrap();
        let fb = 0.5; // far above any initial per-cell KL here
        let mut rate_terms = Vec::new();
        for granularity in [
            FreeBitsGranularity::PerCell,
            FreeBitsGranularity::PerTimestep,
            FreeBitsGranularity::PerDim,
            FreeBitsGranularity::Total,
        ] {
            let out = elbo(
                &model,
                &batch,
                &ObjectiveCfg::FreeBits {
                    free_bits_per_cell: fb,
                    granularity,
                },
                1,
                31,
            )
            .unwrap();
            rate_terms.push(out.objective_value + out.reconstruction);
        }
        let n_cells = (6 * 1) as f64;
        assert!(
            (rate_terms[0] - fb * n_cells).abs() < 1e-12,
            "a dominating per-cell floor charges threshold times cells, got {}",
            rate_terms[0]
        );
        // Coarser pooling lets high cells offset low ones, so the charged
        // floor can only shrink toward max(rate, total threshold).
        assert!(rate_terms[0] >= rate_terms[1] - 1e-12);
        assert!(rate_terms[1] >= rate_terms[3] - 1e-12);
        assert!(rate_terms[2] >= rate_terms[3] - 1e-12);
        assert!(rate_terms[3] >= vanilla.rate.max(fb * n_cells) - 1e-12);
    }

    #[test]
    fn analytic_rate_matches_closed_form_and_is_not_a_sample_estimate() {
        let data = tiny_data();
        for (constraint, delta) in [
            (ConstraintMode::None, 0.0),
            (ConstraintMode::IndependentDelta, 0.02),
        ] {
            let model = ToyModel::new(tiny_model(constraint, delta), ObjectiveCfg::Vanilla, 9)
                .unwrap();
            let batch = tiny_batch(&data, 7);
            let b = elbo(&model, &batch, &ObjectiveCfg::Vanilla, 1, 41).unwrap();
            let mut closed = 0.0;
            for x in &batch {
                let q = model.encode(x).unwrap();
                closed += kl_seq_closed_form(&q, &model.prior).unwrap().total;
            }
            closed /= batch.len() as f64;
            assert!(
                (b.rate - closed).abs() <= 1e-9 * closed.abs().max(1.0),
                "graph rate {} disagrees with closed form {closed}",
                b.rate
            );
            let cell_sum = b.per_cell_kl.sum();
            assert!(
                (cell_sum - b.rate).abs() <= 1e-12,
                "per-cell table must sum to the rate"
            );
            // A one-sample estimator is a different number; the analytic
            // path must not secretly be one.
            let q = model.encode(batch[0]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let noise =
                Array2::from_shape_fn(q.means().dim(), |_| rng.sample(StandardNormal));
            let z = crate::nets::reparameterize(&q, &noise).unwrap();
            let mut log_q = 0.0;
            for t in 0..q.n() {
                for kdim in 0..q.dim() {
                    log_q += crate::ar1::log_normal(
                        z[[t, kdim]],
                        q.means()[[t, kdim]],
                        q.stds()[[t, kdim]],
                    );
                }
            }
            let sample_estimate = log_q - model.prior.log_prob(&z).unwrap();
            let analytic = kl_seq_closed_form(&q, &model.prior).unwrap().total;
            assert!(
                (sample_estimate - analytic).abs() > 1e-6,
                "a single-sample estimate should not match the analytic rate"
            );
        }
    }

    #[test]
    fn gradients_of_the_full_objective_match_finite_differences() {
        // The temporal head keeps the whole graph smooth; the max(0, .)
        // kinks of the independent constructor get their own checks at
        // points a safe distance from the kink.
        let data = tiny_data();
        let model = ToyModel::new(
            tiny_model(ConstraintMode::TemporalDelta, 0.0),
            ObjectiveCfg::Vanilla,
            13,
        )
        .unwrap();
        let batch = tiny_batch(&data, 3);
        let params: Vec<Array2<f64>> = model.params().into_iter().cloned().collect();
        let worst = grad_check(
            |g, ids| {
                let vars = model.vars_from_ids(ids)?;
                let nodes = build_elbo(
                    &model,
                    g,
                    &vars,
                    &batch,
                    &ObjectiveCfg::Vanilla,
                    1,
                    77,
                    0,
                )?;
                Ok(nodes.loss)
            },
            &params,
            // Step chosen for a loss of magnitude ~1e2: large enough that
            // central-difference cancellation (~|f| eps / h) stays below
            // the tolerance on small-gradient parameters, small enough
            // that truncation stays negligible.
            2e-4,
        )
        .unwrap();
        assert!(
            worst <= 1e-5,
            "worst relative gradient error {worst} exceeds 1e-5"
        );
    }

    #[test]
    fn committed_floor_covers_both_constraint_routes() {
        let per_cell = ToyModel::new(
            {
                let mut m = tiny_model(ConstraintMode::IndependentDelta, 0.05);
                m.prior_alphas = vec![0.0];
                m
            },
            ObjectiveCfg::DeltaStructural,
            1,
        )
        .unwrap();
        assert_eq!(committed_floor(&per_cell, 6).unwrap(), 6.0 * 0.05);
        let correlated = ToyModel::new(
            tiny_model(ConstraintMode::IndependentDelta, 0.05),
            ObjectiveCfg::DeltaStructural,
            1,
        )
        .unwrap();
        // With a correlated prior the per-cell pin no longer adds up, so
        // the floor falls back to the family-mismatch bound.
        assert_eq!(
            committed_floor(&correlated, 6).unwrap(),
            correlated.prior.committed_rate(6).unwrap()
        );
        let unconstrained = ToyModel::new(
            tiny_model(ConstraintMode::None, 0.0),
            ObjectiveCfg::Vanilla,
            1,
        )
        .unwrap();
        assert_eq!(committed_floor(&unconstrained, 6).unwrap(), 0.0);
    }

    #[test]
    fn training_runs_log_monotone_steps_and_respect_the_floor() {
        let data = tiny_data();
        let mut cfg = tiny_cfg(
            ObjectiveCfg::DeltaStructural,
            ConstraintMode::IndependentDelta,
            0.05,
        );
        cfg.model.prior_alphas = vec![0.0];
        let (_, record) = train(&cfg, &data).unwrap();
        let floor = 0.05 * (6 * 1) as f64;
        assert_eq!(record.committed_floor_nats, floor);
        assert!(record.objective_is_likelihood_bound);
        assert!(!record.steps.is_empty());
        for pair in record.steps.windows(2) {
            assert!(pair[0].step < pair[1].step, "step log must increase");
        }
        assert_eq!(record.steps.last().unwrap().step, cfg.steps - 1);
        for s in &record.steps {
            assert!(
                s.rate >= floor - 1e-9,
                "rate {} below committed floor at step {}",
                s.rate,
                s.step
            );
        }
    }

    #[test]
    fn reruns_reproduce_metrics_bit_exactly() {
        let data = tiny_data();
        let cfg = tiny_cfg(ObjectiveCfg::Beta { beta: 0.5 }, ConstraintMode::None, 0.0);
        let (_, a) = train(&cfg, &data).unwrap();
        let (_, b) = train(&cfg, &data).unwrap();
        assert!(a.metrics_eq(&b), "identical config and seed must reproduce metrics");
        assert_eq!(a.metrics_fingerprint(), b.metrics_fingerprint());
        assert!(!a.objective_is_likelihood_bound);
        let mut other = cfg.clone();
        other.seed = 6;
        let (_, c) = train(&other, &data).unwrap();
        assert_ne!(
            a.metrics_fingerprint(),
            c.metrics_fingerprint(),
            "a different seed should move the metrics"
        );
    }

    #[test]
    fn run_record_saves_and_reloads() {
        let data = tiny_data();
        let cfg = tiny_cfg(ObjectiveCfg::Vanilla, ConstraintMode::None, 0.0);
        let (_, record) = train(&cfg, &data).unwrap();
        let dir = std::env::temp_dir().join("deltavae-training-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("record.json");
        record.save(&path).unwrap();
        let back = RunRecord::load(&path).unwrap();
        assert_eq!(record, back, "record JSON roundtrip must be exact");
    }

    #[test]
    fn checkpoints_appear_at_the_configured_interval() {
        let data = tiny_data();
        let dir = std::env::temp_dir().join("deltavae-checkpoint-test");
        let _ = std::fs::remove_dir_all(&dir);
        let mut cfg = tiny_cfg(ObjectiveCfg::Vanilla, ConstraintMode::None, 0.0);
        cfg.steps = 20;
        cfg.checkpoint_every = 10;
        cfg.checkpoint_dir = Some(dir.clone());
        let (model, _) = train(&cfg, &data).unwrap();
        let ck10 = ToyModel::load(&dir.join("checkpoint_0000010.json")).unwrap();
        let ck20 = ToyModel::load(&dir.join("checkpoint_0000020.json")).unwrap();
        assert_eq!(ck20, model, "final checkpoint is the returned model");
        assert_ne!(ck10, ck20, "training between checkpoints moved the weights");
    }

    #[test]
    fn divergence_is_reported_not_propagated_as_nan() {
        let data = tiny_data();
        let mut cfg = tiny_cfg(ObjectiveCfg::Vanilla, ConstraintMode::None, 0.0);
        cfg.learning_rate = 1e160;
        cfg.steps = 10;
        match train(&cfg, &data) {
            Err(Error::Diverged(msg)) => {
                assert!(msg.contains("step"), "diagnostic should name the step: {msg}")
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configs_are_rejected_before_work() {
        let data = tiny_data();
        let mut cfg = tiny_cfg(ObjectiveCfg::Vanilla, ConstraintMode::None, 0.0);
        cfg.batch_size = 0;
        assert!(matches!(train(&cfg, &data), Err(Error::Config(_))));
        let mut cfg = tiny_cfg(ObjectiveCfg::Beta { beta: -0.1 }, ConstraintMode::None, 0.0);
        cfg.steps = 1;
        assert!(matches!(train(&cfg, &data), Err(Error::Config(_))));
        let mut cfg = tiny_cfg(ObjectiveCfg::Vanilla, ConstraintMode::None, 0.0);
        cfg.checkpoint_every = 5;
        assert!(matches!(train(&cfg, &data), Err(Error::Config(_))));
    }

    #[test]
    fn probe_hits_chance_on_random_labels_and_aces_separable_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 400;
        let noise = Array2::from_shape_fn((n, 6), |_| rng.sample::<f64, _>(StandardNormal));
        let random_labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let acc = linear_probe(&noise, &random_labels, 7).unwrap();
        assert!(
            (0.05..=0.45).contains(&acc),
            "random labels should score near chance 0.25, got {acc}"
        );
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let mut separable = noise.clone();
        for (i, &l) in labels.iter().enumerate() {
            separable[[i, l]] += 8.0;
        }
        let acc = linear_probe(&separable, &labels, 7).unwrap();
        assert!(acc >= 0.99, "separable clusters should be aced, got {acc}");
        let again = linear_probe(&separable, &labels, 7).unwrap();
        assert_eq!(acc, again, "same seed must reproduce the probe exactly");
    }

    #[test]
    fn probe_rejects_degenerate_label_sets() {
        let x = Array2::zeros((40, 3));
        let one_class = vec![0usize; 40];
        assert!(matches!(linear_probe(&x, &one_class, 1), Err(Error::Domain(_))));
        let mut thin = vec![0usize; 40];
        thin[39] = 1; // class 1 has a single example
        assert!(matches!(linear_probe(&x, &thin, 1), Err(Error::Domain(_))));
        let wrong_len = vec![0usize; 39];
        assert!(matches!(linear_probe(&x, &wrong_len, 1), Err(Error::Config(_))));
    }

    #[test]
    fn sweep_survives_failures_and_keeps_input_order() {
        let data = tiny_data();
        let good = tiny_cfg(ObjectiveCfg::Vanilla, ConstraintMode::None, 0.0);
        let mut bad = good.clone();
        bad.batch_size = 0;
        let cells = vec![
            SweepCell {
                method: "vanilla".into(),
                knob: 1.0,
                cfg: good.clone(),
            },
            SweepCell {
                method: "broken".into(),
                knob: 2.0,
                cfg: bad,
            },
            SweepCell {
                method: "beta".into(),
                knob: 0.5,
                cfg: TrainCfg {
                    objective: ObjectiveCfg::Beta { beta: 0.5 },
                    ..good
                },
            },
        ];
        let tables = rate_distortion_sweep(&cells, &data, 3);
        assert_eq!(tables.test.len(), 3);
        assert_eq!(tables.train.len(), 3);
        assert_eq!(tables.failures.len(), 1);
        assert_eq!(tables.test[1].method, "broken");
        assert!(tables.test[1].rate_nats.is_nan(), "failed cell carries NaN");
        assert!(tables.test[0].rate_nats.is_finite());
        assert!(tables.test[2].rate_nats.is_finite());
        let csv = sweep_csv(&tables.test);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "method,knob,rate_nats,rate_bits,distortion_nats,probe_acc,seed"
        );
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("NaN"), "NaN cells must be visible in the CSV");
        // NaN cells compare unequal as floats, so determinism across
        // thread counts is checked on the rendered tables.
        let serial = rate_distortion_sweep(&cells, &data, 1);
        assert_eq!(
            sweep_csv(&serial.test),
            sweep_csv(&tables.test),
            "thread count must not change sweep results"
        );
        assert_eq!(sweep_csv(&serial.train), sweep_csv(&tables.train));
    }

    #[test]
    fn demo_configs_are_self_consistent() {
        let collapse = collapse_demo_cfg(1);
        assert_eq!(collapse.objective, ObjectiveCfg::Vanilla);
        assert_eq!(collapse.model.constraint, ConstraintMode::None);
        assert_eq!(collapse.model.prior_alphas, vec![0.0]);
        let delta = delta_demo_cfg(2.0, 24, 1).unwrap();
        assert_eq!(delta.model.constraint, ConstraintMode::TemporalDelta);
        let prior = Ar1Prior::new(ndarray::arr1(&delta.model.prior_alphas)).unwrap();
        let floor = prior.committed_rate(24).unwrap();
        assert!(
            floor >= 2.0 && floor < 2.001,
            "demo floor should sit just above 2 nats, got {floor}"
        );
        assert!(delta_demo_cfg(0.0, 24, 1).is_err());
        let probe = probe_demo_cfg(1);
        assert_eq!(probe.model.constraint, ConstraintMode::TemporalDelta);
        assert_eq!(probe.model.prior_alphas, vec![0.7]);
        // The demos share one architecture apart from constraint and prior.
        assert_eq!(collapse.model.dec_hidden, delta.model.dec_hidden);
        assert_eq!(collapse.model.enc_hidden, delta.model.enc_hidden);
        assert_eq!(collapse.model.dec_hidden, probe.model.dec_hidden);
    }

    #[test]
    fn elbo_rejects_bad_batches() {
        let model = ToyModel::new(
            tiny_model(ConstraintMode::None, 0.0),
            ObjectiveCfg::Vanilla,
            3,
        )
        .unwrap();
        let empty: Vec<&Array2<f64>> = Vec::new();
        assert!(matches!(
            elbo(&model, &empty, &ObjectiveCfg::Vanilla, 1, 0),
            Err(Error::Config(_))
        ));
        let x = Array2::zeros((6, 2));
        assert!(matches!(
            elbo(&model, &[&x], &ObjectiveCfg::Vanilla, 0, 0),
            Err(Error::Config(_))
        ));
        let ragged = Array2::zeros((5, 2));
        assert!(matches!(
            elbo(&model, &[&x, &ragged], &ObjectiveCfg::Vanilla, 1, 0),
            Err(Error::Config(_))
        ));
        let bad_dim = Array2::zeros((6, 3));
        assert!(matches!(
            elbo(&model, &[&bad_dim], &ObjectiveCfg::Vanilla, 1, 0),
            Err(Error::Config(_))
        ));
        let poisoned = array![[f64::NAN, 0.0]];
        assert!(matches!(
            elbo(&model, &[&poisoned], &ObjectiveCfg::Vanilla, 1, 0),
            Err(Error::Domain(_))
        ));
    }
}
