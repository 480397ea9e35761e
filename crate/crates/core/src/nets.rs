//! The toy sequential VAE: recurrent encoders with controlled information
//! flow, an autoregressive decoder, reparameterized sampling, and the
//! auxiliary prior.
//!
//! Causality is structural, not masked arithmetic: a GRU stack run left to
//! right can only see the past, so the anti-causal encoder reverses time,
//! runs the stack, and reverses back, making the posterior at step t a
//! function of exactly x_t..x_n. The non-causal encoder adds a second
//! forward stack and concatenates both directions. The decoder reads the
//! previous observation and the current latent each step, carrying earlier
//! latents forward in its recurrent state. These flow properties are
//! checked by differentiating, not by inspection.
//!
//! Everything here is pure given the weights: the same input produces the
//! same output bit for bit, and checkpoints restore a model that does too.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::ar1::{log_normal, Ar1Prior};
use crate::autodiff::{Graph, NodeId};
use crate::consts::{ALPHA_MAX, SIGMA_FLOOR};
use crate::constraints::{temporal_posterior_graph, IndependentDeltaConstraint};
use crate::error::{Error, Result};
use crate::gauss_kl::{kl_univariate, GaussianSeqPosterior};
use crate::rng::stream_rng;

/// Checkpoint format version; bumped on any layout change.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// What the posterior parameters at timestep t may depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Only x_t and later observations.
    AntiCausal,
    /// The whole sequence.
    NonCausal,
}

/// How raw posterior head outputs become (mean, std).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    /// Plain head: mean passes through, std is softplus plus floor.
    None,
    /// Same head as `None`; the rate floor comes from the correlated
    /// prior's committed rate, not from the posterior family.
    TemporalDelta,
    /// Constrained head guaranteeing per-cell KL >= delta against N(0, 1).
    IndependentDelta,
}

/// Fully-connected layer, `input -> output`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// Weights, `input x output`.
    pub w: Array2<f64>,
    /// Bias row, `1 x output`.
    pub b: Array2<f64>,
}

pub(crate) struct DenseVars {
    w: NodeId,
    b: NodeId,
}

/// Pull the next id off a flat parameter-node list, failing loudly if the
/// caller supplied too few.
fn next_id(it: &mut impl Iterator<Item = NodeId>) -> Result<NodeId> {
    it.next()
        .ok_or_else(|| Error::Contract("parameter node list shorter than the model".into()))
}

impl Dense {
    fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (input as f64).sqrt();
        Dense {
            w: Array2::from_shape_fn((input, output), |_| rng.gen_range(-scale..scale)),
            b: Array2::zeros((1, output)),
        }
    }

    fn vars_from(it: &mut impl Iterator<Item = NodeId>) -> Result<DenseVars> {
        Ok(DenseVars {
            w: next_id(it)?,
            b: next_id(it)?,
        })
    }

    fn forward(g: &mut Graph, v: &DenseVars, x: NodeId) -> Result<NodeId> {
        let xw = g.matmul(x, v.w)?;
        g.add_row(xw, v.b)
    }

    fn param_refs(&self) -> Vec<&Array2<f64>> {
        vec![&self.w, &self.b]
    }

    fn param_refs_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Gated recurrent cell with reset gate r, update gate u, and candidate c:
/// `h' = u * h + (1 - u) * c` with `c = tanh(W_c x + U_c (r * h) + b_c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub w_reset: Array2<f64>,
    pub u_reset: Array2<f64>,
    pub b_reset: Array2<f64>,
    pub w_update: Array2<f64>,
    pub u_update: Array2<f64>,
    pub b_update: Array2<f64>,
    pub w_cand: Array2<f64>,
    pub u_cand: Array2<f64>,
    pub b_cand: Array2<f64>,
}

pub(crate) struct GruVars {
    w_reset: NodeId,
    u_reset: NodeId,
    b_reset: NodeId,
    w_update: NodeId,
    u_update: NodeId,
    b_update: NodeId,
    w_cand: NodeId,
    u_cand: NodeId,
    b_cand: NodeId,
}

impl GruCell {
    fn new(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let si = 1.0 / (input as f64).sqrt();
        let sh = 1.0 / (hidden as f64).sqrt();
        fn mat(rows: usize, cols: usize, s: f64, rng: &mut impl Rng) -> Array2<f64> {
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-s..s))
        }
        GruCell {
            w_reset: mat(input, hidden, si, rng),
            u_reset: mat(hidden, hidden, sh, rng),
            b_reset: Array2::zeros((1, hidden)),
            w_update: mat(input, hidden, si, rng),
            u_update: mat(hidden, hidden, sh, rng),
            b_update: Array2::zeros((1, hidden)),
            w_cand: mat(input, hidden, si, rng),
            u_cand: mat(hidden, hidden, sh, rng),
            b_cand: Array2::zeros((1, hidden)),
        }
    }

    fn hidden(&self) -> usize {
        self.u_reset.nrows()
    }

    fn vars_from(it: &mut impl Iterator<Item = NodeId>) -> Result<GruVars> {
        Ok(GruVars {
            w_reset: next_id(it)?,
            u_reset: next_id(it)?,
            b_reset: next_id(it)?,
            w_update: next_id(it)?,
            u_update: next_id(it)?,
            b_update: next_id(it)?,
            w_cand: next_id(it)?,
            u_cand: next_id(it)?,
            b_cand: next_id(it)?,
        })
    }

    fn step(g: &mut Graph, v: &GruVars, x: NodeId, h: NodeId) -> Result<NodeId> {
        let pre_r = {
            let xw = g.matmul(x, v.w_reset)?;
            let hu = g.matmul(h, v.u_reset)?;
            let s = g.add(xw, hu)?;
            g.add_row(s, v.b_reset)?
        };
        let reset = g.sigmoid(pre_r);
        let pre_u = {
            let xw = g.matmul(x, v.w_update)?;
            let hu = g.matmul(h, v.u_update)?;
            let s = g.add(xw, hu)?;
            g.add_row(s, v.b_update)?
        };
        let update = g.sigmoid(pre_u);
        let gated = g.mul(reset, h)?;
        let pre_c = {
            let xw = g.matmul(x, v.w_cand)?;
            let hu = g.matmul(gated, v.u_cand)?;
            let s = g.add(xw, hu)?;
            g.add_row(s, v.b_cand)?
        };
        let cand = g.tanh(pre_c);
        let keep = g.mul(update, h)?;
        let gate_complement = g.neg(update);
        let gate_complement = g.add_scalar(gate_complement, 1.0);
        let fresh = g.mul(gate_complement, cand)?;
        g.add(keep, fresh)
    }

    /// Run over a sequence of `batch x input` nodes in the order given,
    /// starting from a zero state; strictly causal in that order.
    fn run(
        &self,
        g: &mut Graph,
        v: &GruVars,
        xs: &[NodeId],
        batch: usize,
    ) -> Result<Vec<NodeId>> {
        let mut h = g.constant(Array2::zeros((batch, self.hidden())));
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            h = Self::step(g, v, x, h)?;
            out.push(h);
        }
        Ok(out)
    }

    fn param_refs(&self) -> Vec<&Array2<f64>> {
        vec![
            &self.w_reset,
            &self.u_reset,
            &self.b_reset,
            &self.w_update,
            &self.u_update,
            &self.b_update,
            &self.w_cand,
            &self.u_cand,
            &self.b_cand,
        ]
    }

    fn param_refs_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![
            &mut self.w_reset,
            &mut self.u_reset,
            &mut self.b_reset,
            &mut self.w_update,
            &mut self.u_update,
            &mut self.b_update,
            &mut self.w_cand,
            &mut self.u_cand,
            &mut self.b_cand,
        ]
    }

    fn var_ids(v: &GruVars) -> Vec<NodeId> {
        vec![
            v.w_reset, v.u_reset, v.b_reset, v.w_update, v.u_update, v.b_update,
            v.w_cand, v.u_cand, v.b_cand,
        ]
    }
}

fn run_stack(
    stack: &[GruCell],
    g: &mut Graph,
    vars: &[GruVars],
    xs: &[NodeId],
    batch: usize,
) -> Result<Vec<NodeId>> {
    let mut seq = xs.to_vec();
    for (cell, v) in stack.iter().zip(vars) {
        seq = cell.run(g, v, &seq, batch)?;
    }
    Ok(seq)
}

/// Posterior-parameter network. The time-reversed stack sees the current
/// and future observations; non-causal mode adds a forward stack so both
/// directions reach the heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub mode: EncoderMode,
    /// Run on the reversed sequence: features at t cover x_t..x_n.
    pub future_stack: Vec<GruCell>,
    /// Run in natural order, non-causal mode only: features cover x_1..x_t.
    pub past_stack: Vec<GruCell>,
    pub head_mean: Dense,
    pub head_raw_sigma: Dense,
}

pub(crate) struct EncoderVars {
    future: Vec<GruVars>,
    past: Vec<GruVars>,
    head_mean: DenseVars,
    head_raw_sigma: DenseVars,
}

impl Encoder {
    fn new(
        mode: EncoderMode,
        obs_dim: usize,
        latent_dim: usize,
        hidden: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Self {
        fn stack(
            obs_dim: usize,
            hidden: usize,
            depth: usize,
            rng: &mut impl Rng,
        ) -> Vec<GruCell> {
            (0..depth)
                .map(|l| GruCell::new(if l == 0 { obs_dim } else { hidden }, hidden, rng))
                .collect()
        }
        let future_stack = stack(obs_dim, hidden, depth, rng);
        let past_stack = match mode {
            EncoderMode::AntiCausal => Vec::new(),
            EncoderMode::NonCausal => stack(obs_dim, hidden, depth, rng),
        };
        let feat = match mode {
            EncoderMode::AntiCausal => hidden,
            EncoderMode::NonCausal => 2 * hidden,
        };
        Encoder {
            mode,
            future_stack,
            past_stack,
            head_mean: Dense::new(feat, latent_dim, rng),
            head_raw_sigma: Dense::new(feat, latent_dim, rng),
        }
    }

    fn vars_from(&self, it: &mut impl Iterator<Item = NodeId>) -> Result<EncoderVars> {
        let future = self
            .future_stack
            .iter()
            .map(|_| GruCell::vars_from(it))
            .collect::<Result<Vec<_>>>()?;
        let past = self
            .past_stack
            .iter()
            .map(|_| GruCell::vars_from(it))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderVars {
            future,
            past,
            head_mean: Dense::vars_from(it)?,
            head_raw_sigma: Dense::vars_from(it)?,
        })
    }

    /// Raw per-timestep head outputs `(mean, raw sigma)`, each `batch x
    /// latent_dim`, before any constraint mapping.
    pub(crate) fn raw_heads(
        &self,
        g: &mut Graph,
        v: &EncoderVars,
        xs: &[NodeId],
        batch: usize,
    ) -> Result<Vec<(NodeId, NodeId)>> {
        let reversed: Vec<NodeId> = xs.iter().rev().copied().collect();
        let future_rev = run_stack(&self.future_stack, g, &v.future, &reversed, batch)?;
        let future: Vec<NodeId> = future_rev.into_iter().rev().collect();
        let feats: Vec<NodeId> = match self.mode {
            EncoderMode::AntiCausal => future,
            EncoderMode::NonCausal => {
                let past = run_stack(&self.past_stack, g, &v.past, xs, batch)?;
                future
                    .into_iter()
                    .zip(past)
                    .map(|(f, p)| g.concat_cols(f, p))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        feats
            .into_iter()
            .map(|f| {
                let mu = Dense::forward(g, &v.head_mean, f)?;
                let rs = Dense::forward(g, &v.head_raw_sigma, f)?;
                Ok((mu, rs))
            })
            .collect()
    }

    fn param_refs(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        for c in self.future_stack.iter().chain(&self.past_stack) {
            out.extend(c.param_refs());
        }
        out.extend(self.head_mean.param_refs());
        out.extend(self.head_raw_sigma.param_refs());
        out
    }

    fn param_refs_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        for c in self.future_stack.iter_mut().chain(&mut self.past_stack) {
            out.extend(c.param_refs_mut());
        }
        out.extend(self.head_mean.param_refs_mut());
        out.extend(self.head_raw_sigma.param_refs_mut());
        out
    }

    fn var_ids(v: &EncoderVars) -> Vec<NodeId> {
        let mut out = Vec::new();
        for gv in v.future.iter().chain(&v.past) {
            out.extend(GruCell::var_ids(gv));
        }
        out.extend([v.head_mean.w, v.head_mean.b]);
        out.extend([v.head_raw_sigma.w, v.head_raw_sigma.b]);
        out
    }
}

/// Autoregressive observation model: a causal GRU over `[x_{t-1}, z_t]`
/// inputs emitting the Gaussian mean of x_t; the likelihood std is fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub stack: Vec<GruCell>,
    pub head_mean: Dense,
}

pub(crate) struct DecoderVars {
    stack: Vec<GruVars>,
    head_mean: DenseVars,
}

impl Decoder {
    fn new(
        obs_dim: usize,
        latent_dim: usize,
        hidden: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let input = obs_dim + latent_dim;
        Decoder {
            stack: (0..depth)
                .map(|l| GruCell::new(if l == 0 { input } else { hidden }, hidden, rng))
                .collect(),
            head_mean: Dense::new(hidden, obs_dim, rng),
        }
    }

    fn vars_from(&self, it: &mut impl Iterator<Item = NodeId>) -> Result<DecoderVars> {
        let stack = self
            .stack
            .iter()
            .map(|_| GruCell::vars_from(it))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecoderVars {
            stack,
            head_mean: Dense::vars_from(it)?,
        })
    }

    pub(crate) fn bind(&self, g: &mut Graph) -> DecoderVars {
        let ids: Vec<NodeId> = self
            .param_refs()
            .into_iter()
            .map(|w| g.var(w.clone()))
            .collect();
        self.vars_from(&mut ids.into_iter())
            .expect("decoder id list is built from its own parameters")
    }

    /// Per-timestep likelihood means, `batch x obs_dim`, strictly causal
    /// in the shifted observations and conditioned on all latents so far.
    pub(crate) fn means(
        &self,
        g: &mut Graph,
        v: &DecoderVars,
        x_prev: &[NodeId],
        z: &[NodeId],
        batch: usize,
    ) -> Result<Vec<NodeId>> {
        if x_prev.len() != z.len() {
            return Err(Error::Config(format!(
                "decoder got {} observation steps but {} latent steps",
                x_prev.len(),
                z.len()
            )));
        }
        let inputs: Vec<NodeId> = x_prev
            .iter()
            .zip(z)
            .map(|(&xp, &zt)| g.concat_cols(xp, zt))
            .collect::<Result<Vec<_>>>()?;
        let hs = run_stack(&self.stack, g, &v.stack, &inputs, batch)?;
        hs.into_iter()
            .map(|h| Dense::forward(g, &v.head_mean, h))
            .collect()
    }

    fn param_refs(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        for c in &self.stack {
            out.extend(c.param_refs());
        }
        out.extend(self.head_mean.param_refs());
        out
    }

    fn param_refs_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        for c in &mut self.stack {
            out.extend(c.param_refs_mut());
        }
        out.extend(self.head_mean.param_refs_mut());
        out
    }

    fn var_ids(v: &DecoderVars) -> Vec<NodeId> {
        let mut out = Vec::new();
        for gv in &v.stack {
            out.extend(GruCell::var_ids(gv));
        }
        out.extend([v.head_mean.w, v.head_mean.b]);
        out
    }
}

/// Architecture and constraint configuration of a [`ToyModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCfg {
    pub obs_dim: usize,
    pub latent_dim: usize,
    pub enc_hidden: usize,
    pub enc_depth: usize,
    pub dec_hidden: usize,
    pub dec_depth: usize,
    pub encoder_mode: EncoderMode,
    pub constraint: ConstraintMode,
    /// Per-cell KL floor for `IndependentDelta`, in nats; informational
    /// otherwise.
    pub delta_nats: f64,
    /// Prior correlation per latent dimension.
    pub prior_alphas: Vec<f64>,
}

impl ModelCfg {
    fn validate(&self) -> Result<()> {
        if self.obs_dim == 0
            || self.latent_dim == 0
            || self.enc_hidden == 0
            || self.enc_depth == 0
            || self.dec_hidden == 0
            || self.dec_depth == 0
        {
            return Err(Error::Config("all model dimensions must be positive".into()));
        }
        if self.prior_alphas.len() != self.latent_dim {
            return Err(Error::Config(format!(
                "{} prior coefficients for latent_dim {}",
                self.prior_alphas.len(),
                self.latent_dim
            )));
        }
        if self.constraint == ConstraintMode::IndependentDelta && self.delta_nats <= 0.0 {
            return Err(Error::Config(
                "independent delta constraint needs delta_nats > 0".into(),
            ));
        }
        Ok(())
    }

    /// Parameter count implied by the configuration.
    pub fn expected_param_count(&self) -> usize {
        let gru = |i: usize, h: usize| 3 * (i * h + h * h + h);
        let dense = |i: usize, o: usize| i * o + o;
        let enc_stack: usize = (0..self.enc_depth)
            .map(|l| {
                gru(
                    if l == 0 { self.obs_dim } else { self.enc_hidden },
                    self.enc_hidden,
                )
            })
            .sum();
        let directions = match self.encoder_mode {
            EncoderMode::AntiCausal => 1,
            EncoderMode::NonCausal => 2,
        };
        let feat = directions * self.enc_hidden;
        let dec_stack: usize = (0..self.dec_depth)
            .map(|l| {
                gru(
                    if l == 0 {
                        self.obs_dim + self.latent_dim
                    } else {
                        self.dec_hidden
                    },
                    self.dec_hidden,
                )
            })
            .sum();
        directions * enc_stack
            + 2 * dense(feat, self.latent_dim)
            + dec_stack
            + dense(self.dec_hidden, self.obs_dim)
    }
}

/// The complete toy VAE: weights, prior, constraint mode, and objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub version: u32,
    pub cfg: ModelCfg,
    pub objective: crate::training::ObjectiveCfg,
    pub prior: Ar1Prior,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

pub(crate) struct ModelVars {
    pub(crate) encoder: EncoderVars,
    pub(crate) decoder: DecoderVars,
}

impl ModelVars {
    /// Weight node ids in the same order as [`ToyModel::params`].
    pub(crate) fn ids(&self) -> Vec<NodeId> {
        let mut out = Encoder::var_ids(&self.encoder);
        out.extend(Decoder::var_ids(&self.decoder));
        out
    }
}

impl ToyModel {
    /// Build a model with weights drawn deterministically from the seed.
    pub fn new(
        cfg: ModelCfg,
        objective: crate::training::ObjectiveCfg,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.constraint == ConstraintMode::IndependentDelta {
            // Fail at construction, not first encode, if delta is infeasible.
            IndependentDeltaConstraint::new(cfg.delta_nats)?;
        }
        let prior = Ar1Prior::new(Array1::from(cfg.prior_alphas.clone()))?;
        let mut rng = stream_rng(seed, 0xE0C0DE);
        let encoder = Encoder::new(
            cfg.encoder_mode,
            cfg.obs_dim,
            cfg.latent_dim,
            cfg.enc_hidden,
            cfg.enc_depth,
            &mut rng,
        );
        let decoder = Decoder::new(
            cfg.obs_dim,
            cfg.latent_dim,
            cfg.dec_hidden,
            cfg.dec_depth,
            &mut rng,
        );
        Ok(ToyModel {
            version: MODEL_FORMAT_VERSION,
            cfg,
            objective,
            prior,
            encoder,
            decoder,
        })
    }

    /// The posterior head constraint, when the mode uses one.
    pub fn head_constraint(&self) -> Result<Option<IndependentDeltaConstraint>> {
        match self.cfg.constraint {
            ConstraintMode::IndependentDelta => {
                Ok(Some(IndependentDeltaConstraint::new(self.cfg.delta_nats)?))
            }
            _ => Ok(None),
        }
    }

    pub(crate) fn bind(&self, g: &mut Graph) -> ModelVars {
        let ids: Vec<NodeId> = self
            .params()
            .into_iter()
            .map(|w| g.var(w.clone()))
            .collect();
        self.vars_from_ids(&ids)
            .expect("id list is built from this model's own parameters")
    }

    /// Rebuild typed weight bindings from a flat node list in
    /// [`ToyModel::params`] order, e.g. nodes created by a gradient
    /// checker. Rejects lists of the wrong length.
    pub(crate) fn vars_from_ids(&self, ids: &[NodeId]) -> Result<ModelVars> {
        let mut it = ids.iter().copied();
        let encoder = self.encoder.vars_from(&mut it)?;
        let decoder = self.decoder.vars_from(&mut it)?;
        if it.next().is_some() {
            return Err(Error::Contract(
                "parameter node list longer than the model".into(),
            ));
        }
        Ok(ModelVars { encoder, decoder })
    }

    /// Per-timestep posterior `(mean, std)` nodes with the model's
    /// constraint mapping applied.
    pub(crate) fn posterior_graph(
        &self,
        g: &mut Graph,
        v: &ModelVars,
        xs: &[NodeId],
        batch: usize,
    ) -> Result<Vec<(NodeId, NodeId)>> {
        let raw = self.encoder.raw_heads(g, &v.encoder, xs, batch)?;
        match self.head_constraint()? {
            Some(constraint) => raw
                .into_iter()
                .map(|(m, s)| constraint.constrain_graph(g, m, s))
                .collect(),
            None => Ok(raw
                .into_iter()
                .map(|(m, s)| temporal_posterior_graph(g, m, s))
                .collect()),
        }
    }

    fn check_obs(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.cfg.obs_dim {
            return Err(Error::Config(format!(
                "sequence has {} observation dims, model expects {}",
                x.ncols(),
                self.cfg.obs_dim
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::Domain("sequence must have at least one step".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("observations must be finite".into()));
        }
        Ok(())
    }

    /// Posterior over the latents of a batch of equal-length sequences.
    pub fn encode_batch(&self, seqs: &[&Array2<f64>]) -> Result<Vec<GaussianSeqPosterior>> {
        if seqs.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let n = seqs[0].nrows();
        for x in seqs {
            self.check_obs(x)?;
            if x.nrows() != n {
                return Err(Error::Config(
                    "all sequences in a batch must share a length".into(),
                ));
            }
        }
        let batch = seqs.len();
        let mut g = Graph::new();
        let v = self.bind(&mut g);
        let xs: Vec<NodeId> = (0..n)
            .map(|t| {
                let mut rows = Array2::zeros((batch, self.cfg.obs_dim));
                for (b, x) in seqs.iter().enumerate() {
                    rows.row_mut(b).assign(&x.row(t));
                }
                g.constant(rows)
            })
            .collect();
        let params = self.posterior_graph(&mut g, &v, &xs, batch)?;
        let d = self.cfg.latent_dim;
        (0..batch)
            .map(|b| {
                let mut mus = Array2::zeros((n, d));
                let mut sds = Array2::zeros((n, d));
                for (t, &(mu, sd)) in params.iter().enumerate() {
                    mus.row_mut(t).assign(&g.value(mu).row(b));
                    sds.row_mut(t).assign(&g.value(sd).row(b));
                }
                GaussianSeqPosterior::new(mus, sds)
            })
            .collect()
    }

    /// Posterior over the latents of one sequence.
    pub fn encode(&self, x: &Array2<f64>) -> Result<GaussianSeqPosterior> {
        Ok(self.encode_batch(&[x])?.pop().unwrap())
    }

    /// Likelihood means for one sequence given shifted observations and
    /// latents; the likelihood std is the fixed observation noise.
    pub fn decode(&self, x_prev: &Array2<f64>, z: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_obs(x_prev)?;
        if z.dim() != (x_prev.nrows(), self.cfg.latent_dim) {
            return Err(Error::Config(format!(
                "latent shape {:?} does not match {} steps x {} dims",
                z.dim(),
                x_prev.nrows(),
                self.cfg.latent_dim
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("latents must be finite".into()));
        }
        let n = x_prev.nrows();
        let mut g = Graph::new();
        let v = self.decoder.bind(&mut g);
        let xp: Vec<NodeId> = (0..n)
            .map(|t| g.constant(x_prev.row(t).to_owned().insert_axis(ndarray::Axis(0))))
            .collect();
        let zs: Vec<NodeId> = (0..n)
            .map(|t| g.constant(z.row(t).to_owned().insert_axis(ndarray::Axis(0))))
            .collect();
        let means = self.decoder.means(&mut g, &v, &xp, &zs, 1)?;
        let mut out = Array2::zeros((n, self.cfg.obs_dim));
        for (t, &m) in means.iter().enumerate() {
            out.row_mut(t).assign(&g.value(m).row(0));
        }
        Ok(out)
    }

    /// All weight arrays in a fixed documented order: encoder future
    /// stack, encoder past stack, encoder heads, decoder stack, decoder
    /// head; each GRU contributes reset, update, candidate triples.
    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut out = self.encoder.param_refs();
        out.extend(self.decoder.param_refs());
        out
    }

    /// Mutable view in the same order as [`ToyModel::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = self.encoder.param_refs_mut();
        out.extend(self.decoder.param_refs_mut());
        out
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Write the model as versioned JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    /// Load a checkpoint, rejecting unknown versions and weight layouts
    /// that contradict their own configuration.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let model: ToyModel = serde_json::from_reader(std::io::BufReader::new(file))?;
        if model.version != MODEL_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} is not the supported {}",
                model.version, MODEL_FORMAT_VERSION
            )));
        }
        model.cfg.validate()?;
        let expected = model.cfg.expected_param_count();
        if model.param_count() != expected {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameters but its config implies {expected}",
                model.param_count()
            )));
        }
        Ok(model)
    }
}

/// `z = mu + sigma * noise`, elementwise.
pub fn reparameterize(q: &GaussianSeqPosterior, noise: &Array2<f64>) -> Result<Array2<f64>> {
    if noise.dim() != q.means().dim() {
        return Err(Error::Config(format!(
            "noise shape {:?} does not match posterior shape {:?}",
            noise.dim(),
            q.means().dim()
        )));
    }
    Ok(q.means() + &(q.stds() * noise))
}

/// Tape version of [`reparameterize`] for one timestep slab.
pub fn reparameterize_graph(
    g: &mut Graph,
    mu: NodeId,
    sigma: NodeId,
    noise: NodeId,
) -> Result<NodeId> {
    let scaled = g.mul(sigma, noise)?;
    g.add(mu, scaled)
}

/// First-order linear-Gaussian model fit to aggregate-posterior samples:
/// per dimension, `z_t ~ N(a z_{t-1} + b, s^2)` with the stationary
/// marginal at t = 1. Fit post hoc; never trains the encoder or decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxPrior {
    pub ar_coefs: Vec<f64>,
    pub offsets: Vec<f64>,
    pub noise_stds: Vec<f64>,
    /// True when any dimension hit the noise floor or correlation clamp,
    /// which happens for degenerate (near-constant) samples.
    pub degenerate: bool,
}

impl AuxPrior {
    pub fn dim(&self) -> usize {
        self.ar_coefs.len()
    }

    /// Stationary mean and std of dimension `k` at the first step.
    fn stationary(&self, k: usize) -> (f64, f64) {
        let a = self.ar_coefs[k];
        let m = self.offsets[k] / (1.0 - a);
        let sd = self.noise_stds[k] / (1.0 - a * a).sqrt();
        (m, sd)
    }

    /// Exact log-density of a trajectory, shape `(n, dim)`, in nats.
    pub fn log_prob(&self, z: &Array2<f64>) -> Result<f64> {
        let (n, d) = z.dim();
        if d != self.dim() {
            return Err(Error::Config(format!(
                "trajectory has {d} dims, aux prior has {}",
                self.dim()
            )));
        }
        if n == 0 {
            return Err(Error::Domain("trajectory must have n >= 1 steps".into()));
        }
        let mut lp = 0.0;
        for k in 0..d {
            let (m, sd) = self.stationary(k);
            lp += log_normal(z[[0, k]], m, sd);
            for t in 1..n {
                lp += log_normal(
                    z[[t, k]],
                    self.ar_coefs[k] * z[[t - 1, k]] + self.offsets[k],
                    self.noise_stds[k],
                );
            }
        }
        Ok(lp)
    }

    /// Exact `E_q[log q(z) - log aux(z)]` for a time-factorized Gaussian
    /// posterior: the chain decomposition against the AR(1) prior, carried
    /// over to learned correlation, offset, and noise scale.
    pub fn seq_kl(&self, q: &GaussianSeqPosterior) -> Result<f64> {
        if q.dim() != self.dim() {
            return Err(Error::Config(format!(
                "posterior has {} dims, aux prior has {}",
                q.dim(),
                self.dim()
            )));
        }
        let (n, d) = (q.n(), q.dim());
        let mu = q.means();
        let sd = q.stds();
        let mut total = 0.0;
        for k in 0..d {
            let a = self.ar_coefs[k];
            let (m0, sd0) = self.stationary(k);
            total += kl_univariate(mu[[0, k]], sd[[0, k]], m0, sd0)?;
            let ve = self.noise_stds[k] * self.noise_stds[k];
            for t in 1..n {
                let v = sd[[t, k]] * sd[[t, k]];
                let vprev = sd[[t - 1, k]] * sd[[t - 1, k]];
                let dm = mu[[t, k]] - (a * mu[[t - 1, k]] + self.offsets[k]);
                total += 0.5 * ((ve / v).ln() + (v + dm * dm + a * a * vprev) / ve - 1.0);
            }
        }
        Ok(total)
    }
}

/// Closed-form least-squares fit of the auxiliary prior to posterior
/// samples (each `n x d`). Correlations are clamped inside the open unit
/// interval and noise scales floored at [`SIGMA_FLOOR`]; either event sets
/// the `degenerate` flag.
pub fn fit_aux_prior(samples: &[Array2<f64>]) -> Result<AuxPrior> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Domain("need at least one sample trajectory".into()))?;
    let (n, d) = first.dim();
    if n < 2 {
        return Err(Error::Domain(format!(
            "aux prior needs at least 2 timesteps to see a transition, got {n}"
        )));
    }
    for z in samples {
        if z.dim() != (n, d) {
            return Err(Error::Config("sample trajectories must share a shape".into()));
        }
    }
    let mut ar_coefs = Vec::with_capacity(d);
    let mut offsets = Vec::with_capacity(d);
    let mut noise_stds = Vec::with_capacity(d);
    let mut degenerate = false;
    let pairs = (samples.len() * (n - 1)) as f64;
    for k in 0..d {
        let mut sum_prev = 0.0;
        let mut sum_next = 0.0;
        for z in samples {
            for t in 1..n {
                sum_prev += z[[t - 1, k]];
                sum_next += z[[t, k]];
            }
        }
        let mean_prev = sum_prev / pairs;
        let mean_next = sum_next / pairs;
        let mut cov = 0.0;
        let mut var_prev = 0.0;
        for z in samples {
            for t in 1..n {
                let dp = z[[t - 1, k]] - mean_prev;
                cov += dp * (z[[t, k]] - mean_next);
                var_prev += dp * dp;
            }
        }
        let mut a = if var_prev > 1e-18 { cov / var_prev } else { 0.0 };
        if a.abs() > ALPHA_MAX {
            a = a.clamp(-ALPHA_MAX, ALPHA_MAX);
            degenerate = true;
        }
        let b = mean_next - a * mean_prev;
        let mut ss = 0.0;
        for z in samples {
            for t in 1..n {
                let r = z[[t, k]] - (a * z[[t - 1, k]] + b);
                ss += r * r;
            }
        }
        let mut s = (ss / pairs).sqrt();
        if s < SIGMA_FLOOR {
            s = SIGMA_FLOOR;
            degenerate = true;
        }
        ar_coefs.push(a);
        offsets.push(b);
        noise_stds.push(s);
    }
    Ok(AuxPrior {
        ar_coefs,
        offsets,
        noise_stds,
        degenerate,
    })
}
