//! Minibatch ELBO training with momentum SGD and step learning-rate decay.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontend::wrap_crop;
use crate::net::{NetError, NetNoise, Network};
use crate::param::{ParamKind, ParamStore};
use crate::rng::{stream, Rng, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

impl From<NetError> for TrainError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Config(m) => TrainError::Config(m),
            NetError::Tensor(t) => t.into(),
        }
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite(_) => TrainError::Numeric(e.to_string()),
            TensorError::Usage(m) => TrainError::Config(m),
            other => TrainError::Data(other.to_string()),
        }
    }
}

/// How the KL term is scaled against a batch-mean data term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlScaleMode {
    /// `1 / num_batches`: an epoch sees the KL once in aggregate.
    PerExample,
    Unit,
    /// No KL term: maximum-likelihood training of `mu`.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    /// Monte Carlo samples of the data term per minibatch.
    pub mc_samples: usize,
    pub kl_scale_mode: KlScaleMode,
    /// Random crop length in frames; `None` trains on whole, equal-length inputs.
    pub crop_frames: Option<usize>,
    /// Taken from the run seed, never from the config document.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 100,
            lr_init: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 10,
            mc_samples: 1,
            kl_scale_mode: KlScaleMode::PerExample,
            crop_frames: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return Err(TrainError::Config("epochs, batch_size and lr_decay_every must be positive".into()));
        }
        if self.mc_samples == 0 {
            return Err(TrainError::Config("mc_samples must be at least 1".into()));
        }
        if !(self.lr_init > 0.0) || !(self.lr_decay_factor > 0.0) {
            return Err(TrainError::Config("lr_init and lr_decay_factor must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config(format!(
                "momentum must lie in [0, 1) and weight_decay be non-negative, got {} and {}",
                self.momentum, self.weight_decay
            )));
        }
        if self.crop_frames == Some(0) {
            return Err(TrainError::Config("crop_frames must be positive".into()));
        }
        Ok(())
    }
}

pub fn num_batches(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Per-minibatch KL weight for a dataset of `n` examples.
pub fn kl_weight(mode: KlScaleMode, n: usize, batch_size: usize) -> f64 {
    match mode {
        KlScaleMode::PerExample => 1.0 / num_batches(n, batch_size) as f64,
        KlScaleMode::Unit => 1.0,
        KlScaleMode::Off => 0.0,
    }
}

pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr_init * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    pub lr: f64,
    pub epoch: usize,
    pub steps: usize,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        OptimizerState {
            velocity: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
            lr,
            epoch: 0,
            steps: 0,
        }
    }
}

/// `v <- momentum v + g + wd p; p <- p - lr v`. Variational parameters get
/// no weight decay and frozen parameters are left untouched. A non-finite
/// gradient aborts before anything is modified.
pub fn sgd_step(store: &mut ParamStore, state: &mut OptimizerState, momentum: f64, weight_decay: f64) -> Result<()> {
    if state.velocity.len() != store.len() {
        return Err(TrainError::Config(format!(
            "optimizer tracks {} parameters, store has {}",
            state.velocity.len(),
            store.len()
        )));
    }
    for (_, p) in store.iter() {
        if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(TrainError::Numeric(format!(
                "non-finite gradient {} at {}[{i}]",
                p.grad.data()[i],
                p.name
            )));
        }
    }
    let lr = state.lr;
    for (p, v) in store.iter_mut().zip(state.velocity.iter_mut()) {
        if p.frozen {
            continue;
        }
        let wd = if p.kind == ParamKind::Variational { 0.0 } else { weight_decay };
        let (vals, grads, vel) = (p.value.data_mut(), p.grad.data(), v.data_mut());
        for i in 0..vals.len() {
            vel[i] = momentum * vel[i] + grads[i] + wd * vals[i];
            vals[i] -= lr * vel[i];
        }
    }
    state.steps += 1;
    Ok(())
}

/// Noise for the `K` Monte Carlo passes of one minibatch.
pub enum McNoise<'a> {
    Sample(&'a mut dyn RngCore),
    /// `K` entries, each one noise vector per BWRFN site.
    Fixed(&'a [Vec<Vec<f64>>]),
    Mean,
}

pub struct MinibatchLoss {
    pub loss: Var,
    /// Monte Carlo mean cross-entropy.
    pub data_term: f64,
    /// Unweighted KL.
    pub kl: f64,
    /// Correct top-1 predictions under the first sample.
    pub correct: usize,
}

/// `(1/K) sum_k mean_i CE(logits_k(x_i), s_i) + kl_weight * KL`.
pub fn elbo_minibatch_loss(
    tape: &mut Tape,
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    k: usize,
    mut noise: McNoise<'_>,
    kl_weight: f64,
) -> Result<MinibatchLoss> {
    if k == 0 {
        return Err(TrainError::Config("K must be at least 1".into()));
    }
    if let McNoise::Fixed(all) = &noise {
        if all.len() != k {
            return Err(TrainError::Config(format!("{} fixed noise draws for K = {k}", all.len())));
        }
    }
    let s = net.config().num_speakers;
    if let Some(&bad) = labels.iter().find(|&&l| l >= s) {
        return Err(TrainError::Data(format!("label {bad} out of range for {s} speakers")));
    }
    let xv = tape.constant(x.clone())?;
    let mut total: Option<Var> = None;
    let mut correct = 0;
    for i in 0..k {
        let mut net_noise = match &mut noise {
            McNoise::Sample(rng) => NetNoise::Sample(&mut **rng),
            McNoise::Fixed(all) => NetNoise::Fixed(&all[i]),
            McNoise::Mean => NetNoise::Mean,
        };
        let logits = net.forward_logits(tape, xv, &mut net_noise)?;
        if i == 0 {
            correct = count_correct(tape.value(logits), labels);
        }
        let logp = tape.log_softmax_rows(logits)?;
        let picked = tape.pick(logp, labels)?;
        let nll = tape.mean_all(picked)?;
        let ce = tape.neg(nll)?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
    }
    let data = tape.mul_scalar(total.expect("k >= 1"), 1.0 / k as f64)?;
    let data_term = tape.value(data).item()?;
    let (loss, kl) = match net.kl_total(tape)? {
        Some(kl) if kl_weight != 0.0 => {
            let kl_value = tape.value(kl).item()?;
            let weighted = tape.mul_scalar(kl, kl_weight)?;
            (tape.add(data, weighted)?, kl_value)
        }
        _ => (data, net.kl_total_value()),
    };
    Ok(MinibatchLoss { loss, data_term, kl, correct })
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let s = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = &logits.data()[i * s..(i + 1) * s];
            let best = (0..s).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap_or(0);
            best == l
        })
        .count()
}

/// One labelled `(1, F, T)` training input.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub features: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub data_term: f64,
    pub kl: f64,
    pub correct: usize,
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub mean_kl: f64,
    pub train_acc: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6e}\t{:.6}\t{:.6}\t{:.4}",
            self.epoch, self.lr, self.mean_loss, self.mean_kl, self.train_acc
        )
    }
}

/// Optimizer state and the two random streams of a training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub state: OptimizerState,
    shuffle_rng: Rng,
    noise_rng: Rng,
}

impl Trainer {
    pub fn new(net: &Network, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let state = OptimizerState::new(net.params(), lr_schedule(0, &cfg));
        Ok(Trainer {
            shuffle_rng: stream(cfg.seed, Stream::Shuffle),
            noise_rng: stream(cfg.seed, Stream::TrainingNoise),
            cfg,
            state,
        })
    }

    /// Forward, backward and one SGD update on a `(B, 1, F, T)` batch.
    pub fn step(&mut self, net: &mut Network, x: &Tensor, labels: &[usize], kl_weight: f64) -> Result<StepStats> {
        let mut tape = Tape::new();
        let k = if net.variational_sites().is_empty() { 1 } else { self.cfg.mc_samples };
        let parts = elbo_minibatch_loss(
            &mut tape,
            net,
            x,
            labels,
            k,
            McNoise::Sample(&mut self.noise_rng),
            kl_weight,
        )?;
        let loss = tape.value(parts.loss).item()?;
        tape.backward(parts.loss, net.params_mut())?;
        sgd_step(net.params_mut(), &mut self.state, self.cfg.momentum, self.cfg.weight_decay)?;
        Ok(StepStats {
            loss,
            data_term: parts.data_term,
            kl: parts.kl,
            correct: parts.correct,
            batch_size: labels.len(),
        })
    }

    /// One pass over `examples` in a seeded random order.
    pub fn epoch(&mut self, net: &mut Network, examples: &[Example]) -> Result<EpochLog> {
        if examples.is_empty() {
            return Err(TrainError::Data("training set is empty".into()));
        }
        let epoch = self.state.epoch;
        self.state.lr = lr_schedule(epoch, &self.cfg);
        let b = self.cfg.batch_size;
        let klw = kl_weight(self.cfg.kl_scale_mode, examples.len(), b);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let (mut loss_sum, mut kl_sum, mut correct, mut batches) = (0.0, 0.0, 0, 0);
        for (bi, idx) in order.chunks(b).enumerate() {
            let x = self.batch(examples, idx).map_err(|e| with_batch(e, epoch, bi))?;
            let labels: Vec<usize> = idx.iter().map(|&i| examples[i].label).collect();
            let s = self.step(net, &x, &labels, klw).map_err(|e| with_batch(e, epoch, bi))?;
            loss_sum += s.loss;
            kl_sum += s.kl;
            correct += s.correct;
            batches += 1;
        }
        self.state.epoch += 1;
        Ok(EpochLog {
            epoch,
            lr: self.state.lr,
            mean_loss: loss_sum / batches as f64,
            mean_kl: kl_sum / batches as f64,
            train_acc: correct as f64 / examples.len() as f64,
        })
    }

    fn batch(&mut self, examples: &[Example], idx: &[usize]) -> Result<Tensor> {
        let items: Vec<Tensor> = match self.cfg.crop_frames {
            None => idx.iter().map(|&i| examples[i].features.clone()).collect(),
            Some(len) => idx
                .iter()
                .map(|&i| {
                    let f = &examples[i].features;
                    let [c, fr, t] = dims3(f)?;
                    let start = if t > len { self.shuffle_rng.random_range(0..=t - len) } else { 0 };
                    let v = wrap_crop(f.data(), c * fr, t, start, len);
                    Ok(Tensor::new(vec![c, fr, len], v)?)
                })
                .collect::<Result<_>>()?,
        };
        Ok(Tensor::stack(&items)?)
    }
}

fn dims3(t: &Tensor) -> Result<[usize; 3]> {
    match t.shape() {
        &[c, f, n] => Ok([c, f, n]),
        s => Err(TrainError::Data(format!("training input must be (C, F, T), got {s:?}"))),
    }
}

fn with_batch(e: TrainError, epoch: usize, batch: usize) -> TrainError {
    let ctx = format!("epoch {epoch}, batch {batch}");
    match e {
        TrainError::Config(m) => TrainError::Config(format!("{ctx}: {m}")),
        TrainError::Data(m) => TrainError::Data(format!("{ctx}: {m}")),
        TrainError::Numeric(m) => TrainError::Numeric(format!("{ctx}: {m}")),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub logs: Vec<EpochLog>,
    pub steps: usize,
}

/// Train for `cfg.epochs` epochs; `on_epoch` sees each log as it is produced.
pub fn train(
    net: &mut Network,
    examples: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    if let Some(&bad) = examples.iter().map(|e| &e.label).find(|&&l| l >= net.config().num_speakers) {
        return Err(TrainError::Data(format!(
            "label {bad} out of range for {} speakers",
            net.config().num_speakers
        )));
    }
    let mut trainer = Trainer::new(net, cfg.clone())?;
    let mut logs = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let log = trainer.epoch(net, examples)?;
        on_epoch(&log);
        logs.push(log);
    }
    Ok(TrainReport { logs, steps: trainer.state.steps })
}
