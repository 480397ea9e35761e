//! Synthetic regime-labeled sequence data.
//!
//! Each sequence follows one of `k` regimes. A regime is a scalar AR(1)
//! state with its own correlation, emitted into observation space through
//! a fixed direction plus a small regime offset and isotropic noise. The
//! emission gain matches the observation noise scale, so one-step
//! prediction from the previous observation is already strong (a decoder
//! can reach low distortion with an empty latent), while telling regimes
//! apart requires pooling evidence across many timesteps. Regime identity
//! is therefore exactly the kind of slow feature a sequence latent can
//! carry.
//!
//! The generative parameters are recorded in the dataset itself, which
//! makes an exact Bayes-rule classifier computable: the scalar state gives
//! a rank-one Kalman filter per regime, and the regime posterior follows
//! from the filter likelihoods.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{fnv1a64_f64s_seeded, stream_rng, FNV_OFFSET};

/// Serialization format version; bumped on any layout change.
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Scale of the per-regime observation offset. Sized so that the best
/// observation direction is worth just over a nat of likelihood per nat
/// of rate once encoder and decoder coordinate, while staying useless
/// during the early phase when the decoder ignores the latent. That
/// keeps full collapse a stable optimum for the unconstrained objective
/// over a demo-length run, yet gives a rate-committed model something
/// real to spend its budget on.
const OFFSET_SCALE: f64 = 0.10;

/// Emission gain from the scalar state into observation space. At half
/// the observation noise, the state trail is visible across a window of
/// steps but too faint for per-step latent coding to pay for its rate.
const EMISSION_GAIN: f64 = 0.05;

/// Observation noise used when sampling, deliberately a little below the
/// decoder emission scale [`crate::consts::OBS_STD`]. A latent-free decoder is then
/// already calibrated or better on every coordinate, so a nat of rate
/// spent describing any residual buys back less than a nat of
/// likelihood. That makes the zero-rate solution a true optimum for the
/// unconstrained objective rather than a plateau the optimizer can
/// eventually climb out of.
const GEN_NOISE_STD: f64 = 0.085;

/// AR coefficients cycled across regimes; distinct dynamics are the
/// second regime cue besides the offset.
const REGIME_AR_MENU: [f64; 4] = [0.95, 0.8, 0.6, 0.3];

/// Generative parameters of one regime, recorded for auditability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeParams {
    /// AR(1) correlation of the scalar state.
    pub ar_coef: f64,
    /// State innovation std, set for unit stationary variance.
    pub state_noise_std: f64,
    /// Constant observation offset, length `obs_dim`.
    pub offset: Vec<f64>,
    /// Unit emission direction, length `obs_dim`.
    pub loading: Vec<f64>,
}

/// One side of the train/test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    /// Sequences, each `seq_len x obs_dim`.
    pub sequences: Vec<Array2<f64>>,
    /// Regime label per sequence.
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// A generated dataset together with everything needed to regenerate or
/// audit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub version: u32,
    pub seed: u64,
    pub seq_len: usize,
    pub obs_dim: usize,
    pub emission_gain: f64,
    pub obs_noise_std: f64,
    pub regimes: Vec<RegimeParams>,
    pub train: Split,
    pub test: Split,
}

fn regime_direction(phase: f64, obs_dim: usize, fallback: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..obs_dim)
        .map(|j| (phase + std::f64::consts::PI * j as f64 / obs_dim as f64).cos())
        .collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-9 {
        let mut e = vec![0.0; obs_dim];
        e[fallback % obs_dim] = 1.0;
        return e;
    }
    raw.iter().map(|v| v / norm).collect()
}

fn regime_params(r: usize, k: usize, obs_dim: usize) -> RegimeParams {
    let ar = REGIME_AR_MENU[r % REGIME_AR_MENU.len()];
    // Phases spread over the full circle. The cosine directions satisfy
    // dir(a) . dir(b) = cos(a - b), so this makes adjacent offsets
    // orthogonal and opposite ones antipodal: the best worst-case
    // separation the construction allows.
    let theta = std::f64::consts::PI * (2 * r + 1) as f64 / k as f64;
    let offset = regime_direction(theta, obs_dim, r)
        .into_iter()
        .map(|v| OFFSET_SCALE * v)
        .collect();
    // The loading uses the quarter-turned phase so offset and emission
    // directions differ.
    let loading = regime_direction(theta + std::f64::consts::FRAC_PI_2, obs_dim, r + 1);
    RegimeParams {
        ar_coef: ar,
        state_noise_std: (1.0 - ar * ar).sqrt(),
        offset,
        loading,
    }
}

fn gen_split(
    regimes: &[RegimeParams],
    count: usize,
    seq_len: usize,
    obs_dim: usize,
    seed: u64,
    stream: u64,
) -> Split {
    let mut rng = stream_rng(seed, stream);
    let mut sequences = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % regimes.len();
        let p = &regimes[label];
        let mut x = Array2::<f64>::zeros((seq_len, obs_dim));
        let mut h = 0.0;
        for t in 0..seq_len {
            let eps: f64 = rng.sample(StandardNormal);
            h = if t == 0 {
                eps
            } else {
                p.ar_coef * h + p.state_noise_std * eps
            };
            for j in 0..obs_dim {
                let noise: f64 = rng.sample(StandardNormal);
                x[[t, j]] =
                    p.offset[j] + EMISSION_GAIN * p.loading[j] * h + GEN_NOISE_STD * noise;
            }
        }
        sequences.push(x);
        labels.push(label);
    }
    Split { sequences, labels }
}

/// Generate a `k_regimes`-way labeled sequence dataset. Labels are
/// assigned round robin, so both splits are balanced to within one
/// sequence per regime, and the two splits draw from separate random
/// streams. Deterministic given the seed.
pub fn gen_synthetic(
    k_regimes: usize,
    seq_len: usize,
    obs_dim: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<Dataset> {
    if k_regimes < 2 {
        return Err(Error::Domain(format!(
            "need at least 2 regimes to have labels worth predicting, got {k_regimes}"
        )));
    }
    if seq_len < 2 || obs_dim == 0 {
        return Err(Error::Domain(format!(
            "need seq_len >= 2 and obs_dim >= 1, got {seq_len} and {obs_dim}"
        )));
    }
    if n_train < k_regimes || n_test < k_regimes {
        return Err(Error::Domain(format!(
            "need at least one sequence per regime in each split, got {n_train}/{n_test} \
             for {k_regimes} regimes"
        )));
    }
    let regimes: Vec<RegimeParams> = (0..k_regimes)
        .map(|r| regime_params(r, k_regimes, obs_dim))
        .collect();
    let train = gen_split(&regimes, n_train, seq_len, obs_dim, seed, 1);
    let test = gen_split(&regimes, n_test, seq_len, obs_dim, seed, 2);
    Ok(Dataset {
        version: DATASET_FORMAT_VERSION,
        seed,
        seq_len,
        obs_dim,
        emission_gain: EMISSION_GAIN,
        obs_noise_std: GEN_NOISE_STD,
        regimes,
        train,
        test,
    })
}

impl Dataset {
    pub fn k_regimes(&self) -> usize {
        self.regimes.len()
    }

    /// Order-sensitive FNV-1a fingerprint over the header, labels, and
    /// every observation value.
    pub fn fingerprint(&self) -> u64 {
        let mut header = vec![
            self.version as f64,
            self.seed as f64,
            self.seq_len as f64,
            self.obs_dim as f64,
            self.k_regimes() as f64,
        ];
        for p in &self.regimes {
            header.push(p.ar_coef);
            header.extend_from_slice(&p.offset);
            header.extend_from_slice(&p.loading);
        }
        let mut hash = fnv1a64_f64s_seeded(FNV_OFFSET, header.iter().copied());
        for split in [&self.train, &self.test] {
            for (x, &label) in split.sequences.iter().zip(&split.labels) {
                hash = fnv1a64_f64s_seeded(hash, std::iter::once(label as f64));
                hash = fnv1a64_f64s_seeded(hash, x.iter().copied());
            }
        }
        hash
    }

    /// Write as versioned JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    /// Read back a dataset written by [`Dataset::save`], rejecting
    /// unknown format versions.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ds: Dataset = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ds.version != DATASET_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "dataset format version {} is not the supported {}",
                ds.version, DATASET_FORMAT_VERSION
            )));
        }
        Ok(ds)
    }

    /// Exact log-likelihood of a sequence under one regime's generator,
    /// via a Kalman filter on the scalar state. The innovation covariance
    /// is rank one plus isotropic, so each update needs only the
    /// projection of the innovation onto the emission direction.
    pub fn regime_log_lik(&self, regime: usize, x: &Array2<f64>) -> f64 {
        let p = &self.regimes[regime];
        let (n, d) = x.dim();
        let sig2 = self.obs_noise_std * self.obs_noise_std;
        let w: Vec<f64> = p.loading.iter().map(|c| self.emission_gain * c).collect();
        let w2: f64 = w.iter().map(|v| v * v).sum();
        let q = p.state_noise_std * p.state_noise_std;
        let mut m = 0.0;
        let mut cov = 1.0;
        let mut log_lik = 0.0;
        for t in 0..n {
            let (m_pred, cov_pred) = if t == 0 {
                (0.0, 1.0)
            } else {
                (p.ar_coef * m, p.ar_coef * p.ar_coef * cov + q)
            };
            let mut err_sq = 0.0;
            let mut w_dot_e = 0.0;
            for j in 0..d {
                let e = x[[t, j]] - (p.offset[j] + w[j] * m_pred);
                err_sq += e * e;
                w_dot_e += w[j] * e;
            }
            let denom = sig2 + cov_pred * w2;
            // log det of (sig2 I + cov_pred w w^T) and its quadratic form,
            // both through the rank-one structure.
            let log_det = (d as f64 - 1.0) * sig2.ln() + denom.ln();
            let quad = err_sq / sig2 - cov_pred * w_dot_e * w_dot_e / (sig2 * denom);
            log_lik +=
                -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad);
            m = m_pred + cov_pred * w_dot_e / denom;
            cov = cov_pred * sig2 / denom;
        }
        log_lik
    }

    /// Bayes-rule regime decision under the recorded generator and a
    /// uniform regime prior.
    pub fn bayes_classify(&self, x: &Array2<f64>) -> usize {
        (0..self.k_regimes())
            .map(|r| (r, self.regime_log_lik(r, x)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(r, _)| r)
            .unwrap()
    }

    /// Accuracy of the Bayes classifier on a split.
    pub fn bayes_accuracy(&self, split: &Split) -> f64 {
        let hits = split
            .sequences
            .iter()
            .zip(&split.labels)
            .filter(|(x, &y)| self.bayes_classify(x) == y)
            .count();
        hits as f64 / split.len() as f64
    }
}
