//! Frequency-wise normalization layers over `(N, C, F, T)` feature maps.
//!
//! * IFN standardizes every `(n, f)` row with statistics pooled over
//!   channels and time.
//! * LN standardizes every utterance `n` over `(C, F, T)`.
//! * RFN blends the two: `lambda * LN + (1 - lambda) * IFN`.
//! * WRFN scales each branch by a sigmoid-squashed per-frequency weight.
//! * BWRFN draws those weights from a diagonal Gaussian posterior via the
//!   reparameterization `w = mu + sigma * eps`.
//!
//! All statistics are population statistics, and the weighted branches are
//! not renormalized to sum to one.

use rand::RngCore;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::param::{ParamId, ParamKind, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{ElementwiseOp, Tensor, TensorError};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Initial posterior standard deviation.
pub const INIT_SIGMA: f64 = 0.1;
/// Standard deviation of the initial posterior means.
pub const INIT_MU_STD: f64 = 0.1;

const FREQ_AXIS: usize = 2;

#[derive(Debug, Error)]
pub enum NormError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NormError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxationConfig {
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for RelaxationConfig {
    fn default() -> Self {
        RelaxationConfig { lambda: DEFAULT_LAMBDA, epsilon: DEFAULT_EPSILON }
    }
}

impl RelaxationConfig {
    pub fn new(lambda: f64, epsilon: f64) -> Result<Self> {
        let cfg = RelaxationConfig { lambda, epsilon };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(NormError::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(NormError::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

fn check_rank4(tape: &Tape, x: Var) -> Result<[usize; 4]> {
    let s = tape.value(x).shape();
    match s {
        &[n, c, f, t] => Ok([n, c, f, t]),
        _ => Err(TensorError::Shape(format!("expected (N, C, F, T), got {s:?}")).into()),
    }
}

/// `(x - mean) / sqrt(var + eps)` with statistics over `axes`.
fn standardize(tape: &mut Tape, x: Var, axes: &[usize], epsilon: f64) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let mean = tape.reduce_mean(x, axes, true)?;
    let mean = tape.expand(mean, &shape)?;
    let centered = tape.sub(x, mean)?;
    let var = tape.reduce_var(x, axes, true)?;
    let var = tape.add_scalar(var, epsilon)?;
    let std = tape.sqrt(var)?;
    let std = tape.expand(std, &shape)?;
    Ok(tape.div(centered, std)?)
}

/// Instance frequency-wise normalization: per `(n, f)` over `(C, T)`.
pub fn ifn(tape: &mut Tape, x: Var, epsilon: f64) -> Result<Var> {
    check_rank4(tape, x)?;
    standardize(tape, x, &[1, 3], epsilon)
}

/// Layer normalization: per `n` over `(C, F, T)`.
pub fn layer_norm(tape: &mut Tape, x: Var, epsilon: f64) -> Result<Var> {
    check_rank4(tape, x)?;
    standardize(tape, x, &[1, 2, 3], epsilon)
}

/// `lambda * a + (1 - lambda) * b`.
fn blend(tape: &mut Tape, a: Var, b: Var, lambda: f64) -> Result<Var> {
    let a = tape.mul_scalar(a, lambda)?;
    let b = tape.mul_scalar(b, 1.0 - lambda)?;
    Ok(tape.add(a, b)?)
}

/// Relaxed instance frequency-wise normalization.
pub fn rfn(tape: &mut Tape, x: Var, cfg: &RelaxationConfig) -> Result<Var> {
    cfg.validate()?;
    let ln = layer_norm(tape, x, cfg.epsilon)?;
    let inst = ifn(tape, x, cfg.epsilon)?;
    blend(tape, ln, inst, cfg.lambda)
}

/// Weighted RFN with raw (pre-sigmoid) per-frequency weights `w1`, `w2`.
pub fn wrfn(tape: &mut Tape, x: Var, cfg: &RelaxationConfig, w1: Var, w2: Var) -> Result<Var> {
    cfg.validate()?;
    let [_, _, f, _] = check_rank4(tape, x)?;
    for (name, w) in [("w1", w1), ("w2", w2)] {
        let s = tape.value(w).shape();
        if s != [f] {
            return Err(TensorError::Shape(format!(
                "{name} has shape {s:?}, layer has {f} frequency bins"
            ))
            .into());
        }
    }
    let ln = layer_norm(tape, x, cfg.epsilon)?;
    let inst = ifn(tape, x, cfg.epsilon)?;
    let s1 = tape.sigmoid(w1)?;
    let s2 = tape.sigmoid(w2)?;
    let ln = tape.elementwise_along(ElementwiseOp::Mul, ln, s1, FREQ_AXIS)?;
    let inst = tape.elementwise_along(ElementwiseOp::Mul, inst, s2, FREQ_AXIS)?;
    blend(tape, ln, inst, cfg.lambda)
}

/// Point-estimate WRFN weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeterministicWeights {
    pub w1: ParamId,
    pub w2: ParamId,
    pub n_freq: usize,
}

impl DeterministicWeights {
    /// Registers `{prefix}.w1` and `{prefix}.w2`, both zero (sigmoid 0.5).
    pub fn register(store: &mut ParamStore, prefix: &str, n_freq: usize) -> Result<Self> {
        let w1 = store.register(format!("{prefix}.w1"), Tensor::zeros(&[n_freq]), ParamKind::Weight)?;
        let w2 = store.register(format!("{prefix}.w2"), Tensor::zeros(&[n_freq]), ParamKind::Weight)?;
        Ok(DeterministicWeights { w1, w2, n_freq })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        cfg: &RelaxationConfig,
    ) -> Result<Var> {
        let w1 = tape.param(store, self.w1)?;
        let w2 = tape.param(store, self.w2)?;
        wrfn(tape, x, cfg, w1, w2)
    }
}

/// Diagonal Gaussian posterior over `w = [w1; w2]` (length `2F`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariationalWeights {
    pub mu: ParamId,
    /// Stores `ln sigma`.
    pub log_sigma: ParamId,
    pub n_freq: usize,
}

impl VariationalWeights {
    /// Registers `{prefix}.mu ~ N(0, 0.1^2)` and `{prefix}.log_sigma = ln 0.1`.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        n_freq: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, INIT_MU_STD).expect("valid normal");
        let mu = Tensor::from_fn(&[2 * n_freq], |_| normal.sample(rng));
        let mu = store.register(format!("{prefix}.mu"), mu, ParamKind::Variational)?;
        let log_sigma = store.register(
            format!("{prefix}.log_sigma"),
            Tensor::full(&[2 * n_freq], INIT_SIGMA.ln()),
            ParamKind::Variational,
        )?;
        Ok(VariationalWeights { mu, log_sigma, n_freq })
    }

    pub fn len(&self) -> usize {
        2 * self.n_freq
    }

    pub fn is_empty(&self) -> bool {
        self.n_freq == 0
    }
}

/// Where the reparameterization noise comes from.
pub enum NoiseMode<'a> {
    /// Fresh `eps ~ N(0, I)` from the caller's stream.
    Sample(&'a mut dyn RngCore),
    /// Caller-supplied `eps`, for deterministic gradient checks.
    Fixed(&'a [f64]),
    /// Posterior mean, `w = mu`.
    Mean,
}

/// Draw `n` standard normal values.
pub fn standard_normal(rng: &mut dyn RngCore, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `w = mu + exp(log_sigma) * eps`, differentiable in `mu` and `log_sigma`.
pub fn sample_weights(
    tape: &mut Tape,
    store: &ParamStore,
    vw: &VariationalWeights,
    mode: NoiseMode<'_>,
) -> Result<Var> {
    let mu = tape.param(store, vw.mu)?;
    let eps = match mode {
        NoiseMode::Mean => return Ok(mu),
        NoiseMode::Fixed(eps) => {
            if eps.len() != vw.len() {
                return Err(TensorError::Shape(format!(
                    "fixed noise has {} values, posterior has {}",
                    eps.len(),
                    vw.len()
                ))
                .into());
            }
            eps.to_vec()
        }
        NoiseMode::Sample(rng) => standard_normal(rng, vw.len()),
    };
    let log_sigma = tape.param(store, vw.log_sigma)?;
    let sigma = tape.exp(log_sigma)?;
    let eps = tape.constant(Tensor::vector(eps))?;
    let scaled = tape.mul(sigma, eps)?;
    Ok(tape.add(mu, scaled)?)
}

/// Split a `2F` weight vector into its `(w1, w2)` halves.
pub fn split_weights(tape: &mut Tape, w: Var) -> Result<(Var, Var)> {
    let len = tape.value(w).len();
    if len % 2 != 0 {
        return Err(TensorError::Shape(format!("weight vector of odd length {len}")).into());
    }
    let half = len / 2;
    Ok((tape.narrow(w, 0, 0, half)?, tape.narrow(w, 0, half, half)?))
}

/// Bayesian weighted RFN: WRFN with `w` drawn per `mode`.
pub fn bwrfn(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    cfg: &RelaxationConfig,
    vw: &VariationalWeights,
    mode: NoiseMode<'_>,
) -> Result<Var> {
    let [_, _, f, _] = check_rank4(tape, x)?;
    if vw.n_freq != f {
        return Err(TensorError::Shape(format!(
            "posterior covers {} frequency bins, input has {f}",
            vw.n_freq
        ))
        .into());
    }
    let w = sample_weights(tape, store, vw, mode)?;
    let (w1, w2) = split_weights(tape, w)?;
    wrfn(tape, x, cfg, w1, w2)
}

/// `KL(q || N(0, I)) = -1/2 sum_j [1 + ln sigma_j^2 - sigma_j^2 - mu_j^2]`
/// over all `2F` coordinates.
pub fn kl_to_standard_normal(tape: &mut Tape, store: &ParamStore, vw: &VariationalWeights) -> Result<Var> {
    let mu = tape.param(store, vw.mu)?;
    let log_sigma = tape.param(store, vw.log_sigma)?;
    let two_log_sigma = tape.mul_scalar(log_sigma, 2.0)?;
    let var = tape.exp(two_log_sigma)?;
    let mu2 = tape.square(mu)?;
    // per coordinate: sigma^2 + mu^2 - 1 - ln sigma^2
    let a = tape.add(var, mu2)?;
    let b = tape.sub(a, two_log_sigma)?;
    let c = tape.add_scalar(b, -1.0)?;
    let total = tape.sum_all(c)?;
    Ok(tape.mul_scalar(total, 0.5)?)
}

/// Closed-form KL from raw `mu` and `ln sigma` values.
pub fn kl_value(mu: &[f64], log_sigma: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(log_sigma)
        .map(|(&m, &ls)| (2.0 * ls).exp() + m * m - 1.0 - 2.0 * ls)
        .sum::<f64>()
}
