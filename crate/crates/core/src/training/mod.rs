//! Training protocols: self-supervised pretraining, linear evaluation with a
//! frozen encoder, and full finetuning.

mod downstream;
mod ssl;

use std::fmt;
use std::str::FromStr;

pub use downstream::{
    evaluate, export_embeddings, extract_features, finetune, linear_eval, predict,
    write_embeddings_csv,
};
pub use ssl::{evaluate_pretext, pretrain_ssl, SslOutput};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::models::{Encoder, ModelBinding};
use crate::models::ParamStore;
use crate::tensor::{LrSchedule, Sgd, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Ssl,
    LinearEval,
    Finetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Ssl => "ssl",
            Phase::LinearEval => "linear-eval",
            Phase::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Learning-rate policy, resolved against the epoch count at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum LrPolicy {
    Constant,
    /// Multiply by `factor` once `epoch >= round(fraction·epochs)` for each
    /// fraction.
    StepDecay { fractions: Vec<f64>, factor: f32 },
}

impl LrPolicy {
    pub fn resolve(&self, epochs: usize) -> LrSchedule {
        match self {
            LrPolicy::Constant => LrSchedule::Constant,
            LrPolicy::StepDecay { fractions, factor } => LrSchedule::StepDecay {
                milestones: fractions
                    .iter()
                    .map(|f| (f * epochs as f64).round() as usize)
                    .collect(),
                factor: *factor,
            },
        }
    }
}

impl fmt::Display for LrPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrPolicy::Constant => f.write_str("constant"),
            LrPolicy::StepDecay { fractions, factor } => {
                let fr: Vec<String> = fractions.iter().map(|v| v.to_string()).collect();
                write!(f, "step:{}:{}", fr.join(","), factor)
            }
        }
    }
}

impl FromStr for LrPolicy {
    type Err = Error;

    /// `constant` or `step:<fraction>,<fraction>...:<factor>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "constant" {
            return Ok(LrPolicy::Constant);
        }
        let bad = || Error::Config(format!("bad lr schedule {s:?}"));
        let rest = s.strip_prefix("step:").ok_or_else(bad)?;
        let (fr, factor) = rest.rsplit_once(':').ok_or_else(bad)?;
        let fractions = fr
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        let factor = factor.parse::<f32>().map_err(|_| bad())?;
        Ok(LrPolicy::StepDecay { fractions, factor })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub lr_schedule: LrPolicy,
    pub seed: u64,
    /// Width of the hidden layer in the downstream classifier.
    pub hidden_width: usize,
    /// Stop early once an epoch's training accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
}

impl TrainConfig {
    /// Pretraining defaults: 200 epochs, batch 64, lr 0.1 decayed ×0.2 at
    /// 60% and 80% of training.
    pub fn ssl() -> Self {
        Self {
            phase: Phase::Ssl,
            epochs: 200,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_schedule: LrPolicy::StepDecay {
                fractions: vec![0.6, 0.8],
                factor: 0.2,
            },
            seed: 0,
            hidden_width: 128,
            stop_at_accuracy: None,
        }
    }

    /// Linear-evaluation defaults: 100 epochs, batch 32, constant lr 0.01.
    pub fn linear_eval() -> Self {
        Self {
            phase: Phase::LinearEval,
            epochs: 100,
            batch_size: 32,
            lr: 0.01,
            lr_schedule: LrPolicy::Constant,
            ..Self::ssl()
        }
    }

    /// Finetuning defaults: 20 epochs, batch 32, constant lr 0.001.
    pub fn finetune() -> Self {
        Self {
            phase: Phase::Finetune,
            epochs: 20,
            batch_size: 32,
            lr: 0.001,
            lr_schedule: LrPolicy::Constant,
            ..Self::ssl()
        }
    }

    pub fn for_phase(phase: Phase) -> Self {
        match phase {
            Phase::Ssl => Self::ssl(),
            Phase::LinearEval => Self::linear_eval(),
            Phase::Finetune => Self::finetune(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        // negated so that NaN is rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.lr > 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "need lr > 0, momentum >= 0, weight decay >= 0 (got {}, {}, {})",
                self.lr, self.momentum, self.weight_decay
            )));
        }
        Ok(())
    }

    fn optimizer(&self) -> Sgd {
        Sgd::new(self.lr, self.momentum, self.weight_decay)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean cross-entropy over every item seen this epoch.
    pub loss: f64,
    pub accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub phase: Phase,
    pub epochs: Vec<EpochMetrics>,
    pub test_accuracy: Option<f64>,
}

impl RunMetrics {
    fn new(phase: Phase) -> Self {
        Self {
            phase,
            epochs: Vec::new(),
            test_accuracy: None,
        }
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    /// `epoch,loss,accuracy` rows. Wall time is left out so that identical
    /// runs produce identical files; see [`RunMetrics::timing_csv`].
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,accuracy\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.accuracy));
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("epoch,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{:.3}\n", e.epoch, e.seconds));
        }
        out
    }
}

/// Stacks equally sized images into an N×C×H×W tensor.
pub fn images_to_tensor<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor> {
    let mut dims = None;
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        let d = (img.channels(), img.height(), img.width());
        match dims {
            None => dims = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::shape(
                    "batch",
                    format!("image {d:?} differs from {prev:?}"),
                ))
            }
            _ => {}
        }
        data.extend(img.to_planar());
        n += 1;
    }
    let (c, h, w) = dims.ok_or(Error::EmptyDataset)?;
    Tensor::new(vec![n, c, h, w], data)
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

pub(crate) fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(logits.row(*i)) == l)
        .count()
}

/// Turns an op-level non-finite error into a training abort.
pub(crate) fn numeric_abort(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NonFiniteValue(_) => Error::NonFiniteLoss { epoch, batch },
        other => other,
    }
}

/// One SGD update over the head and, when `train_encoder`, the encoder.
pub(crate) fn apply_update(
    opt: &mut Sgd,
    tape: &Tape,
    binding: &ModelBinding,
    encoder: &mut Encoder,
    head: &mut ParamStore,
    train_encoder: bool,
) -> Result<()> {
    let enc_grads = if train_encoder {
        encoder.params().grads(tape, &binding.encoder)
    } else {
        Vec::new()
    };
    let head_grads = head.grads(tape, &binding.head);
    let enc = encoder.params_mut().with_grads(&enc_grads);
    let hd = head.with_grads(&head_grads);
    opt.step(enc.chain(hd))
}
