//! End-to-end training: batching, the sparsity-regularised loss, temperature
//! annealing, and evaluation.

mod metrics;
mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, Tape, Var};
use crate::data::{Dataset, SkeletonSequence};
use crate::error::{Error, Result};
use crate::gumbel::{Noise, TemperatureSchedule};
use crate::models::{GraphMode, Model};

pub use metrics::{evaluate, history_csv, EpochRecord, InstancePrediction, Metrics, HISTORY_HEADER};
pub use optim::{Optimizer, OptimizerConfig};

/// Temperature settings; `decay = None` picks the rate that reaches
/// `tau_min` at 80% of the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub tau0: f64,
    pub tau_min: f64,
    pub decay: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            tau0: 5.0,
            tau_min: 0.5,
            decay: None,
        }
    }
}

impl ScheduleConfig {
    pub fn resolve(&self, epochs: usize) -> Result<TemperatureSchedule> {
        match self.decay {
            Some(d) => TemperatureSchedule::new(self.tau0, self.tau_min, d),
            None => TemperatureSchedule::reaching_min_at(self.tau0, self.tau_min, epochs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    /// Weight of the mean keep probability in the loss.
    pub sparsity: f64,
    pub optimizer: OptimizerConfig,
    /// Straight-through hard masks; `false` trains on relaxed masks.
    pub hard: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            epochs: 50,
            batch_size: 16,
            seed: 0,
            schedule: ScheduleConfig::default(),
            sparsity: 0.0,
            optimizer: OptimizerConfig::default(),
            hard: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be finite and >= 0"));
        }
        if self.epochs < 1 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(self.sparsity >= 0.0 && self.sparsity.is_finite()) {
            return Err(Error::config("train.sparsity", "must be finite and >= 0"));
        }
        self.optimizer.validate()?;
        self.schedule.resolve(self.epochs)?;
        Ok(())
    }
}

/// Cross-entropy of `[B, 2]` logits plus `sparsity` times the mean keep
/// probability over all instances and edges.
pub fn loss(tape: &mut Tape, logits: Var, labels: &[usize], keep_probs: &[Var], sparsity: f64) -> Result<Var> {
    let ce = tape.cross_entropy(logits, labels)?;
    if sparsity == 0.0 || keep_probs.is_empty() {
        return Ok(ce);
    }
    let total: usize = keep_probs.iter().map(|&p| tape.value(p).len()).sum();
    let all = tape.concat(keep_probs, vec![total])?;
    let mean = tape.mean(all);
    let penalty = tape.scale(mean, sparsity);
    tape.add(ce, penalty)
}

/// Mutable training state: the optimizer and the two random streams.
pub struct TrainState {
    pub optimizer: Optimizer,
    shuffle_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: &Model, config: &TrainConfig) -> Self {
        let sizes: Vec<usize> = model.named_tensors().iter().map(|(_, t)| t.numel()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(1);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
        noise_rng.set_stream(2);
        TrainState {
            optimizer: Optimizer::new(config.optimizer, config.learning_rate, &sizes),
            shuffle_rng,
            noise_rng,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Training-time (sampled-graph) predictions, one per instance.
    pub predicted: Vec<usize>,
}

/// One optimisation step on `batch`: every instance gets its own sampled
/// graph; the loss is averaged over the batch.
pub fn train_step(
    model: &mut Model,
    batch: &[&SkeletonSequence],
    state: &mut TrainState,
    tau: f64,
    config: &TrainConfig,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::config("train.batch_size", "empty batch"));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let mut logits = Vec::with_capacity(batch.len());
    let mut keep_probs = vec![];
    {
        let mut noise = Noise::Sample(&mut state.noise_rng);
        for seq in batch {
            let out = model.forward_instance(&mut tape, &bound, seq, tau, config.hard, &mut noise)?;
            logits.push(out.logits);
            if let Some(mask) = out.mask {
                keep_probs.push(mask.keep_prob);
            }
        }
    }
    let stacked = tape.concat(&logits, vec![batch.len(), 2])?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let total = loss(&mut tape, stacked, &labels, &keep_probs, config.sparsity)?;
    let value = tape.value(total)[0];
    if !value.is_finite() {
        tape.check_finite()?;
        return Err(Error::NonFinite {
            node: total.node_id(),
            op: "loss",
        });
    }
    let predicted = logits.iter().map(|&l| argmax(tape.value(l))).collect();
    tape.backward(total)?;
    let grads: Vec<Vec<f64>> = bound.vars().iter().map(|&v| tape.grad(v).to_vec()).collect();
    if model.config.graph_mode == GraphMode::Anatomy {
        // upstream is unused; its gradients are exactly zero
        debug_assert!(grads[..5].iter().all(|g| g.iter().all(|&x| x == 0.0)));
    }
    state.optimizer.update(model.tensors_mut(), &grads);
    Ok(StepOutcome { loss: value, predicted })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best test accuracy (earliest on ties).
    pub best: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Final-epoch parameters.
    pub last: Model,
}

/// Full training run on `train`, scoring `test` after every epoch.
pub fn train(model: Model, train: &Dataset, test: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::config("split.train", "empty training split"));
    }
    if test.is_empty() {
        return Err(Error::config("split.test", "empty test split"));
    }
    let schedule = config.schedule.resolve(config.epochs)?;
    let mut model = model;
    let mut state = TrainState::new(&model, config);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 0..config.epochs {
        let tau = schedule.at(epoch as f64);
        order.shuffle(&mut state.shuffle_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&SkeletonSequence> = chunk.iter().map(|&i| &train.sequences[i]).collect();
            let out = train_step(&mut model, &batch, &mut state, tau, config)?;
            loss_sum += out.loss * batch.len() as f64;
            correct += out
                .predicted
                .iter()
                .zip(&batch)
                .filter(|(p, s)| **p == s.label)
                .count();
        }
        let test_metrics = evaluate(&model, test)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            test_acc: test_metrics.accuracy,
            mean_edges: test_metrics.mean_edges,
            tau,
        };
        if best.as_ref().is_none_or(|(acc, _, _)| record.test_acc > *acc) {
            best = Some((record.test_acc, epoch + 1, model.clone()));
        }
        history.push(record);
    }
    let (_, best_epoch, best) = best.expect("epochs >= 1");
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
        last: model,
    })
}
