//! Mini-batch training loop with deterministic shuffling, metrics and
//! resumable state.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_dataset, AugmentConfig};
use crate::dataset::{Dataset, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::network::Network;
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Overrides the model's routing depth when set.
    pub routing_iters: Option<usize>,
    pub seed: u64,
    pub loss: LossConfig,
    /// Emit a checkpoint event every this many steps; 0 disables.
    pub checkpoint_every: u64,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub clip_norm: Option<f64>,
    /// Stop after this many total steps, even mid-epoch.
    pub max_steps: Option<u64>,
    /// Augment the training set once, before the first epoch.
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 50,
            epochs: 1,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            routing_iters: None,
            seed: 0,
            loss: LossConfig::default(),
            checkpoint_every: 0,
            clip_norm: None,
            max_steps: None,
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        self.loss.validate()
    }
}

/// Position in the run; everything else is re-derived from the seed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    /// Optimizer steps taken so far.
    pub step: u64,
    pub epoch: usize,
    /// Batches already consumed in the current epoch.
    pub batch_in_epoch: usize,
    pub epoch_correct: usize,
    pub epoch_seen: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// 1-based index of the step just taken.
    pub step: u64,
    pub margin_loss: f64,
    pub recon_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    /// 1-based.
    pub epoch: usize,
    pub steps: u64,
    /// Accuracy of the training-mode predictions seen during the epoch.
    pub train_accuracy: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainMetrics {
    pub steps: Vec<StepMetrics>,
    pub epochs: Vec<EpochSummary>,
}

pub enum TrainEvent<'a> {
    Step(&'a StepMetrics),
    Epoch(&'a EpochSummary),
    /// The trainer is at a checkpoint boundary; persist it if wanted.
    Checkpoint(&'a Trainer),
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "shuffle", epoch as u64));
    order
}

/// Global L2 norm over all gradient blocks, summed in block order.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub network: Network,
    pub optimizer: Optimizer,
    pub state: TrainState,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(mut network: Network, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if let Some(r) = config.routing_iters {
            network.capsnet.set_routing_iters(r)?;
        }
        let optimizer = Optimizer::new(config.optimizer, &network.param_shapes());
        Ok(Trainer {
            network,
            optimizer,
            state: TrainState::default(),
            config,
        })
    }

    /// Continues from saved network, optimizer and position.
    pub fn resume(mut network: Network, optimizer: Optimizer, state: TrainState, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if optimizer.kind() != config.optimizer {
            return Err(Error::Config(format!(
                "checkpoint optimizer is {}, run asks for {}",
                optimizer.kind(),
                config.optimizer
            )));
        }
        if let Some(r) = config.routing_iters {
            network.capsnet.set_routing_iters(r)?;
        }
        Ok(Trainer {
            network,
            optimizer,
            state,
            config,
        })
    }

    /// One optimizer update on a batch; `step_seed` drives dropout.
    pub fn train_batch(&mut self, x: &Tensor, labels: &[usize], step_seed: u64) -> Result<(StepMetrics, usize)> {
        let result = self.network.loss_and_grad(x, labels, &self.config.loss, true, step_seed)?;
        let step = self.state.step + 1;
        let loss = result.loss;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                margin: loss.margin,
                recon: loss.recon,
                total: loss.total,
            });
        }
        let mut grads = result.grads;
        if let Some(max) = self.config.clip_norm {
            let norm = global_norm(&grads);
            if norm > max {
                let k = max / norm;
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|v| *v *= k);
                }
            }
        }
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        let mut params = self.network.params_mut();
        self.optimizer.step(&mut params, &grad_refs, self.config.learning_rate)?;
        self.state.step = step;
        let correct = result.predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok((
            StepMetrics {
                step,
                margin_loss: loss.margin,
                recon_loss: loss.recon,
                final_loss: loss.total,
            },
            correct,
        ))
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        let c = self.network.config();
        if data.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        if data.channels() != c.channels {
            return Err(Error::Config(format!(
                "dataset has {} channels, model expects {}",
                data.channels(),
                c.channels
            )));
        }
        if c.input_height != IMAGE_SIZE || c.input_width != IMAGE_SIZE {
            return Err(Error::Config(format!(
                "model expects {}x{} inputs, datasets hold {IMAGE_SIZE}x{IMAGE_SIZE}",
                c.input_height, c.input_width
            )));
        }
        if let Some(&l) = data.labels().iter().find(|&&l| l as usize >= c.num_classes) {
            return Err(Error::Dataset(format!("label {l} outside the model's {} classes", c.num_classes)));
        }
        Ok(())
    }

    /// Runs until `epochs` (or `max_steps`) is reached, reporting through `on_event`.
    pub fn run(&mut self, data: &Dataset, mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>) -> Result<TrainMetrics> {
        self.check_data(data)?;
        let augmented;
        let data = match &self.config.augment {
            Some(a) => {
                augmented = augment_dataset(data, a)?;
                &augmented
            }
            None => data,
        };
        let n = data.len();
        let bs = self.config.batch_size;
        let batches = n.div_ceil(bs);
        let mut metrics = TrainMetrics::default();
        let mut epoch_start = Instant::now();
        while self.state.epoch < self.config.epochs {
            let order = epoch_permutation(self.config.seed, self.state.epoch, n);
            while self.state.batch_in_epoch < batches {
                if self.config.max_steps.is_some_and(|m| self.state.step >= m) {
                    return Ok(metrics);
                }
                let b = self.state.batch_in_epoch;
                let (x, labels) = data.batch(&order[b * bs..((b + 1) * bs).min(n)]);
                let step_seed = rng::derive_seed(self.config.seed, "step", self.state.step);
                let (m, correct) = self.train_batch(&x, &labels, step_seed)?;
                self.state.batch_in_epoch += 1;
                self.state.epoch_correct += correct;
                self.state.epoch_seen += labels.len();
                on_event(TrainEvent::Step(&m))?;
                metrics.steps.push(m);
                if self.state.batch_in_epoch == batches {
                    let summary = EpochSummary {
                        epoch: self.state.epoch + 1,
                        steps: self.state.step,
                        train_accuracy: self.state.epoch_correct as f64 / self.state.epoch_seen as f64,
                        wall_seconds: epoch_start.elapsed().as_secs_f64(),
                    };
                    self.state.epoch += 1;
                    self.state.batch_in_epoch = 0;
                    self.state.epoch_correct = 0;
                    self.state.epoch_seen = 0;
                    epoch_start = Instant::now();
                    on_event(TrainEvent::Epoch(&summary))?;
                    metrics.epochs.push(summary);
                }
                let every = self.config.checkpoint_every;
                if every > 0 && self.state.step % every == 0 {
                    on_event(TrainEvent::Checkpoint(self))?;
                }
                if self.state.batch_in_epoch == 0 {
                    // Epoch boundary: the next epoch needs its own permutation.
                    break;
                }
            }
        }
        Ok(metrics)
    }
}

/// Writes the metrics CSV. Wall time is deliberately left out so that
/// identical runs produce identical files.
pub struct MetricsWriter<W: Write> {
    out: W,
}

pub const METRICS_HEADER: &str = "step,margin_loss,recon_loss,final_loss";

impl<W: Write> MetricsWriter<W> {
    /// Starts a fresh file with the column header.
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(MetricsWriter { out })
    }

    /// Continues an existing file.
    pub fn append(out: W) -> Self {
        MetricsWriter { out }
    }

    pub fn step(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(self.out, "{},{},{},{}", m.step, m.margin_loss, m.recon_loss, m.final_loss)?;
        Ok(())
    }

    pub fn epoch(&mut self, e: &EpochSummary) -> Result<()> {
        writeln!(self.out, "# epoch={} steps={} train_accuracy={}", e.epoch, e.steps, e.train_accuracy)?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Evaluation-mode accuracy over a dataset, in batches.
pub fn accuracy(network: &Network, data: &Dataset, batch_size: usize) -> Result<f64> {
    let preds = predict_dataset(network, data, batch_size)?;
    let correct = preds.iter().zip(data.labels()).filter(|(p, &l)| **p == l as usize).count();
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Argmax predictions (dropout off) for every sample, in dataset order.
pub fn predict_dataset(network: &Network, data: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    let bs = batch_size.max(1);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(bs) {
        let (x, _) = data.batch(chunk);
        out.extend(network.infer(&x)?.predictions_argmax());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capsule::{CapsNetConfig, InitScheme};
    use crate::dataset::synthesize_toy_dataset;

    fn tiny() -> (Network, Dataset) {
        let config = CapsNetConfig {
            input_height: 32,
            input_width: 32,
            channels: 3,
            conv1_kernel: 5,
            conv1_filters: 4,
            conv2_kernel: 5,
            conv2_filters: 4,
            conv2_stride: 4,
            primary_dim: 4,
            num_classes: 2,
            class_dim: 4,
            routing_iters: 2,
            dropout_rate: 0.0,
        };
        let net = Network::new(config, vec![8], InitScheme::Default { transform_std: 0.5 }, 3).unwrap();
        (net, synthesize_toy_dataset(2, 3, 1).unwrap())
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (net, data) = tiny();
        let before = net.clone();
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 2,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(net, cfg).unwrap();
        let m = t.run(&data, |_| Ok(())).unwrap();
        assert_eq!(m.steps.len(), 4);
        assert_eq!(t.network, before);
    }

    #[test]
    fn last_partial_batch_is_kept() {
        let (net, data) = tiny();
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 1,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(net, cfg).unwrap();
        let m = t.run(&data, |_| Ok(())).unwrap();
        assert_eq!(m.steps.len(), 2);
        assert_eq!(m.epochs.len(), 1);
        assert_eq!(t.state.epoch, 1);
    }

    #[test]
    fn permutation_is_seeded() {
        let a = epoch_permutation(5, 0, 20);
        assert_eq!(a, epoch_permutation(5, 0, 20));
        assert_ne!(a, epoch_permutation(5, 1, 20));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let (net, data) = tiny();
        let gray = Dataset::new(
            data.images().chunks(3).map(|p| p[0]).collect(),
            data.labels().to_vec(),
            1,
            data.split(),
        )
        .unwrap();
        let mut t = Trainer::new(net, TrainConfig::default()).unwrap();
        assert!(matches!(t.run(&gray, |_| Ok(())), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (mut net, data) = tiny();
        net.capsnet.conv1_bias.data_mut()[0] = f64::NAN;
        let mut t = Trainer::new(net, TrainConfig::default()).unwrap();
        let err = t.run(&data, |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step: 1, .. }), "{err}");
    }

    #[test]
    fn clipping_bounds_the_update() {
        let g = vec![Tensor::new(&[2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(global_norm(&g), 5.0);
    }
}
