//! Optimizers, schedules, losses, metrics, data and the training loop.

mod data;
mod gradcheck;
mod loss;
mod optim;
mod suite;

pub use data::{load_cifar10_bin, nme, parse_cifar10_bin, synthetic_blobs, Dataset, CIFAR_RECORD};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, INPUT_NAME};
pub use loss::{argmax_rows, cross_entropy_loss, l2_loss};
pub use optim::{
    adam_step, cosine_lr, sgd_momentum_step, AdamState, Optimizer, OptimizerKind, ADAM_BETA1,
    ADAM_BETA2, ADAM_EPS,
};
pub use suite::{gradcheck_suite, GRADCHECK_CASES};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Layer, Mode};
use crate::tensor::{Element, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerChoice {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Cosine,
    Constant,
    /// Multiply by `gamma` every `every_epochs` epochs.
    Step {
        every_epochs: usize,
        gamma: f64,
    },
}

/// Optional second stage run after the main one with augmentation off and a
/// fresh optimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineTune {
    pub epochs: usize,
    pub lr_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerChoice,
    pub lr0: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
    /// Random horizontal flips during the main stage.
    pub augment: bool,
    pub fine_tune: Option<FineTune>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerChoice::SgdMomentum,
            lr0: 0.5,
            schedule: Schedule::Cosine,
            epochs: 30,
            batch_size: 32,
            momentum: 0.9,
            seed: 0,
            augment: false,
            fine_tune: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if let Schedule::Step {
            every_epochs: 0, ..
        } = self.schedule
        {
            return Err(Error::Config(
                "step schedule needs every_epochs >= 1".into(),
            ));
        }
        if let Some(ft) = self.fine_tune {
            if ft.epochs == 0 || ft.lr_scale.is_nan() || ft.lr_scale <= 0.0 {
                return Err(Error::Config(
                    "fine-tune stage needs epochs >= 1 and a positive lr scale".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerChoice::SgdMomentum => OptimizerKind::SgdMomentum {
                momentum: self.momentum,
            },
            OptimizerChoice::Adam => OptimizerKind::Adam,
        }
    }
}

/// Learning rate at `step` of `total_steps`, with `steps_per_epoch` used by
/// the step schedule.
pub fn lr_at(
    schedule: Schedule,
    lr0: f64,
    step: usize,
    total_steps: usize,
    steps_per_epoch: usize,
) -> Result<f64> {
    match schedule {
        Schedule::Cosine => cosine_lr(step, total_steps, lr0),
        Schedule::Constant => Ok(lr0),
        Schedule::Step {
            every_epochs,
            gamma,
        } => {
            let epoch = step / steps_per_epoch.max(1);
            Ok(lr0 * gamma.powi((epoch / every_epochs.max(1)) as i32))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// 0 for the main stage, 1 for fine-tuning.
    pub stage: usize,
    /// 1-based within the stage.
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_loss: Option<f64>,
    pub eval_acc: Option<f64>,
}

impl EpochStats {
    pub const TSV_HEADER: &'static str =
        "stage\tepoch\tlr\ttrain_loss\ttrain_acc\teval_loss\teval_acc";

    pub fn tsv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.4}\t{}\t{}",
            self.stage,
            self.epoch,
            self.lr,
            self.train_loss,
            self.train_acc,
            opt(self.eval_loss),
            opt(self.eval_acc)
        )
    }
}

fn flip_horizontal<T: Element>(x: &mut Tensor4<T>, sample: usize) {
    let s = x.shape();
    for c in 0..s.c {
        for row in x.plane_mut(sample, c).chunks_mut(s.w) {
            row.reverse();
        }
    }
}

fn index_batches(n: usize, batch: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).step_by(batch).map(move |s| s..(s + batch).min(n))
}

/// Mean cross-entropy and accuracy with inference-mode statistics.
pub fn evaluate<T: Element>(
    net: &dyn Layer<T>,
    data: &Dataset<T>,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let order: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    for range in index_batches(data.len(), batch_size.max(1)) {
        let (x, y) = data.batch(&order[range]);
        let logits = net.infer(&x)?;
        let (l, _) = cross_entropy_loss(&logits, &y)?;
        loss += l.as_f64() * y.len() as f64;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
    }
    let n = data.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Mean cross-entropy using per-batch statistics, as seen by the optimizer.
/// Running statistics are restored afterwards, so the call has no side effects
/// on the network state.
pub fn batch_stat_loss<T: Element>(
    net: &mut dyn Layer<T>,
    data: &Dataset<T>,
    batch_size: usize,
) -> Result<f64> {
    let saved: Vec<Tensor4<T>> = net.buffers().into_iter().map(|(_, b)| b.clone()).collect();
    let order: Vec<usize> = (0..data.len()).collect();
    let mut loss = 0.0;
    for range in index_batches(data.len(), batch_size.max(1)) {
        let (x, y) = data.batch(&order[range]);
        let logits = net.forward(&x, Mode::Train)?;
        loss += cross_entropy_loss(&logits, &y)?.0.as_f64() * y.len() as f64;
    }
    for ((_, b), s) in net.buffers_mut().into_iter().zip(saved) {
        *b = s;
    }
    Ok(loss / data.len().max(1) as f64)
}

/// Trains a classifier with cross-entropy. Deterministic for a fixed
/// configuration, network initialisation and dataset.
pub fn train<T: Element>(
    net: &mut dyn Layer<T>,
    data: &Dataset<T>,
    eval: Option<&Dataset<T>>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let mut stages = vec![(cfg.epochs, cfg.lr0, cfg.augment)];
    if let Some(ft) = cfg.fine_tune {
        stages.push((ft.epochs, cfg.lr0 * ft.lr_scale, false));
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for (stage, &(epochs, lr0, augment)) in stages.iter().enumerate() {
        let mut opt = Optimizer::new(cfg.optimizer_kind());
        let total_steps = epochs * steps_per_epoch;
        let mut step = 0;
        for epoch in 1..=epochs {
            order.shuffle(&mut rng);
            let (mut loss_sum, mut correct) = (0.0, 0usize);
            let mut lr = lr0;
            for range in index_batches(order.len(), cfg.batch_size) {
                let (mut x, y) = data.batch(&order[range]);
                if augment {
                    for i in 0..y.len() {
                        if rng.random::<bool>() {
                            flip_horizontal(&mut x, i);
                        }
                    }
                }
                lr = lr_at(cfg.schedule, lr0, step, total_steps, steps_per_epoch)?;
                net.zero_grad();
                let logits = net.forward(&x, Mode::Train)?;
                let (loss, grad) = cross_entropy_loss(&logits, &y)?;
                let loss = loss.as_f64();
                if !loss.is_finite() {
                    return Err(Error::Numeric {
                        tensor: "loss".into(),
                        detail: format!("non-finite loss at stage {stage} epoch {epoch}"),
                    });
                }
                net.backward(&grad)?;
                opt.step(net, lr)?;
                loss_sum += loss * y.len() as f64;
                correct += argmax_rows(&logits)
                    .iter()
                    .zip(&y)
                    .filter(|(p, t)| p == t)
                    .count();
                step += 1;
            }
            let (eval_loss, eval_acc) = match eval {
                Some(d) => {
                    let (l, a) = evaluate(&*net, d, cfg.batch_size)?;
                    (Some(l), Some(a))
                }
                None => (None, None),
            };
            let stats = EpochStats {
                stage,
                epoch,
                lr,
                train_loss: loss_sum / data.len() as f64,
                train_acc: correct as f64 / data.len() as f64,
                eval_loss,
                eval_acc,
            };
            on_epoch(&stats);
            history.push(stats);
        }
    }
    Ok(history)
}
