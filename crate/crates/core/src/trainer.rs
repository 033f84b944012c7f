//! Weighted real + synthetic training realised by in-batch composition.
//!
//! Each mini-batch holds `round(alpha * B)` real samples and the remainder
//! synthetic ones, so the batch-mean loss is, in expectation, the
//! alpha-weighted sum of the real and synthetic objectives. `alpha = 1`
//! never touches the synthetic pool and reduces to ordinary training.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::datasets::LabeledSet;
use crate::error::{ensure_dim, Error, Result};
use crate::generator::SyntheticPool;
use crate::nnet::{self, LossMode, MlpClassifier, OptimState};
use crate::seed::{self, StreamRng};

#[derive(Debug, Clone, PartialEq)]
pub struct SioConfig {
    /// Weight on real data; 1 - alpha goes to synthetic data.
    pub alpha: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss_mode: LossMode,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub seed: u64,
    /// Use only the first n samples per class of the pool; `None` uses all of it.
    pub n_syn_per_class: Option<usize>,
    /// Hidden layer widths of the classifier.
    pub hidden: Vec<usize>,
}

impl Default for SioConfig {
    fn default() -> Self {
        SioConfig {
            alpha: 0.8,
            batch_size: 128,
            epochs: 30,
            loss_mode: LossMode::CrossEntropy,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            nesterov: true,
            seed: 0,
            n_syn_per_class: None,
            hidden: vec![16, 16, 16, 16],
        }
    }
}

impl SioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid("lr0 must be a nonnegative number"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight decay must be nonnegative"));
        }
        self.loss_mode.validate()
    }

    pub fn layer_dims(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend_from_slice(&self.hidden);
        dims.push(classes);
        dims
    }
}

/// Real and synthetic counts for one batch: (round(alpha * B), B - that),
/// rounding half away from zero.
pub fn batch_split(alpha: f64, batch_size: usize) -> (usize, usize) {
    let n_real = ((alpha * batch_size as f64).round() as usize).min(batch_size);
    (n_real, batch_size - n_real)
}

/// Steps per epoch, identical for every alpha: one epoch is the number of
/// batches a real-only run needs to cover the real set once.
pub fn steps_per_epoch(n_real: usize, batch_size: usize) -> usize {
    n_real.div_ceil(batch_size)
}

/// Deterministic shuffle of `0..n` for one epoch.
pub fn epoch_stream(n: usize, seed: u64, epoch_index: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = seed::stream(seed, "train.shuffle", epoch_index);
    perm.shuffle(&mut rng);
    perm
}

/// Endless sequence of real-sample indices: consecutive epoch permutations
/// consumed front to back.
#[derive(Debug, Clone)]
pub struct RealStream {
    n: usize,
    seed: u64,
    epoch: u64,
    perm: Vec<usize>,
    cursor: usize,
}

impl RealStream {
    pub fn new(n: usize, seed: u64) -> Self {
        RealStream { n, seed, epoch: 0, perm: epoch_stream(n, seed, 0), cursor: 0 }
    }

    pub fn take(&mut self, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        if self.n == 0 {
            return out;
        }
        while out.len() < count {
            if self.cursor == self.perm.len() {
                self.epoch += 1;
                self.perm = epoch_stream(self.n, self.seed, self.epoch);
                self.cursor = 0;
            }
            let take = (count - out.len()).min(self.perm.len() - self.cursor);
            out.extend_from_slice(&self.perm[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}

/// Builds mixed batches from a real stream and a synthetic pool.
pub struct BatchComposer<'a> {
    real: &'a LabeledSet,
    syn: Option<&'a LabeledSet>,
    n_real: usize,
    n_syn: usize,
    stream: RealStream,
    syn_rng: StreamRng,
    order_rng: StreamRng,
}

impl<'a> BatchComposer<'a> {
    pub fn new(real: &'a LabeledSet, syn: Option<&'a LabeledSet>, alpha: f64, batch_size: usize, seed: u64) -> Result<Self> {
        if real.is_empty() {
            return Err(Error::invalid("real training set is empty"));
        }
        let (n_real, n_syn) = batch_split(alpha, batch_size);
        let syn = syn.filter(|s| !s.is_empty());
        if n_syn > 0 {
            let pool = syn.ok_or_else(|| Error::invalid(format!("alpha {alpha} < 1 needs a nonempty synthetic pool")))?;
            ensure_dim(real.dim(), pool.dim())?;
        }
        Ok(BatchComposer {
            real,
            syn,
            n_real,
            n_syn,
            stream: RealStream::new(real.len(), seed),
            syn_rng: seed::stream(seed, "train.synthetic", 0),
            order_rng: seed::stream(seed, "train.batch_order", 0),
        })
    }

    pub fn counts(&self) -> (usize, usize) {
        (self.n_real, self.n_syn)
    }

    /// Next batch: the real block, then the synthetic block, then shuffled.
    /// A batch without synthetic samples is already in random order and is
    /// left as drawn.
    pub fn next_batch(&mut self) -> LabeledSet {
        let real_idx = self.stream.take(self.n_real);
        let mut batch = self.real.select(&real_idx);
        if self.n_syn == 0 {
            return batch;
        }
        let pool = self.syn.expect("checked at construction");
        let syn_idx: Vec<usize> = (0..self.n_syn).map(|_| self.syn_rng.random_range(0..pool.len())).collect();
        let syn_part = pool.select(&syn_idx);
        for (row, &y) in syn_part.rows().zip(syn_part.labels()) {
            batch.push(row, y);
        }
        let mut order: Vec<usize> = (0..batch.len()).collect();
        order.shuffle(&mut self.order_rng);
        batch.select(&order)
    }
}

/// One batch drawn from a fresh composer; see [`BatchComposer`].
pub fn compose_batch(real: &LabeledSet, syn: Option<&SyntheticPool>, alpha: f64, batch_size: usize, seed: u64) -> Result<LabeledSet> {
    let mut c = BatchComposer::new(real, syn.map(|p| &p.samples), alpha, batch_size, seed)?;
    Ok(c.next_batch())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: MlpClassifier,
    pub log: Vec<EpochLog>,
    pub config: SioConfig,
    pub steps: usize,
    pub wall_time: Duration,
}

/// Fraction of argmax-correct predictions (ties to the lowest class).
pub fn accuracy(model: &MlpClassifier, set: &LabeledSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let mut correct = 0usize;
    for (x, &y) in set.rows().zip(set.labels()) {
        if model.predict(x)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Train a classifier on `real` mixed with `syn` per `config`. Outliers are
/// required exactly when the loss mode is outlier exposure.
pub fn train(real: &LabeledSet, syn: Option<&SyntheticPool>, config: &SioConfig, outliers: Option<&LabeledSet>) -> Result<TrainRun> {
    config.validate()?;
    let oe = matches!(config.loss_mode, LossMode::OutlierExposure { .. });
    match (oe, outliers) {
        (true, None) => return Err(Error::invalid("outlier-exposure training needs an outlier set")),
        (false, Some(_)) => return Err(Error::invalid("an outlier set is only used by outlier-exposure training")),
        (true, Some(o)) if o.is_empty() => return Err(Error::invalid("outlier set is empty")),
        _ => {}
    }
    if let Some(o) = outliers {
        ensure_dim(real.dim(), o.dim())?;
    }
    let start = Instant::now();
    let limited = match (syn, config.n_syn_per_class) {
        (Some(p), Some(n)) => Some(p.take_per_class(n)),
        (p, _) => p.cloned(),
    };
    let syn_set = limited.as_ref().map(|p| &p.samples);
    if let Some(s) = syn_set {
        if s.num_classes() > real.num_classes() {
            return Err(Error::invalid("synthetic pool has more classes than the real set"));
        }
    }

    let mut model = MlpClassifier::init(&config.layer_dims(real.dim(), real.num_classes()), seed::derive_seed(config.seed, "train.init", 0))?;
    let mut composer = BatchComposer::new(real, syn_set, config.alpha, config.batch_size, config.seed)?;
    let per_epoch = steps_per_epoch(real.len(), config.batch_size);
    let total = per_epoch * config.epochs;
    let mut opt = OptimState::new(&model, config.lr0, config.momentum, config.weight_decay, config.nesterov, total);
    let mut outlier_rng = seed::stream(config.seed, "train.outliers", 0);

    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = opt.current_lr()?;
        let mut loss_sum = 0.0;
        for _ in 0..per_epoch {
            let batch = composer.next_batch();
            let outlier_batch = outliers.map(|o| {
                let idx: Vec<usize> = (0..config.batch_size).map(|_| outlier_rng.random_range(0..o.len())).collect();
                o.select(&idx)
            });
            let out = nnet::loss(&model, &batch, config.loss_mode, outlier_batch.as_ref())?;
            loss_sum += out.value;
            nnet::sgd_step(&mut model, &out.gradients, &mut opt)?;
        }
        log.push(EpochLog {
            epoch: epoch + 1,
            mean_loss: loss_sum / per_epoch as f64,
            lr,
            train_acc: accuracy(&model, real)?,
        });
    }
    Ok(TrainRun { model, log, config: config.clone(), steps: opt.step, wall_time: start.elapsed() })
}

pub fn log_to_csv_string(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,mean_loss,lr,train_acc\n");
    for r in log {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.mean_loss, r.lr, r.train_acc);
    }
    out
}

pub fn save_log_csv(log: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, log_to_csv_string(log)).map_err(|e| Error::io(path, e))
}
