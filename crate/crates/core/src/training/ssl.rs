use std::path::Path;
use std::time::Instant;

use super::{apply_update, count_correct, images_to_tensor, numeric_abort, EpochMetrics, Phase, RunMetrics, TrainConfig};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::models::{EncoderSpec, HeadKind, Mode, ModelInput, PretextModel};
use crate::pretext::{build_epoch, PretextBatch, PretextConfig, TaskVariant};
use crate::tensor::{write_checkpoint, Checkpoint, Tape, Tensor};

pub struct SslOutput {
    /// Weights after the last epoch.
    pub model: PretextModel,
    pub metrics: RunMetrics,
    /// Snapshot from the epoch with the highest pretext accuracy.
    pub best: Checkpoint,
    pub best_epoch: usize,
}

fn batch_inputs(batch: &PretextBatch) -> Result<Vec<Tensor>> {
    match batch {
        PretextBatch::Samples(s) => Ok(vec![images_to_tensor(s.iter().map(|s| &s.image))?]),
        PretextBatch::Pairs(p) => Ok(vec![
            images_to_tensor(p.iter().map(|p| &p.image_a))?,
            images_to_tensor(p.iter().map(|p| &p.image_b))?,
        ]),
    }
}

fn model_input(tape: &mut Tape, inputs: Vec<Tensor>) -> ModelInput {
    let mut vars = inputs.into_iter().map(|t| tape.constant(t));
    let first = vars.next().expect("at least one input");
    match vars.next() {
        Some(second) => ModelInput::Pair(first, second),
        None => ModelInput::Single(first),
    }
}

/// Self-supervised pretraining on unlabeled images.
///
/// Each epoch visits every pretext item once (or one per image, depending on
/// `pretext.sampling`) and the reported loss is the mean cross-entropy over
/// all of them. With `checkpoint_dir` set, `best.ckpt` and `last.ckpt` are
/// written there after training.
pub fn pretrain_ssl(
    images: &[Image],
    variant: TaskVariant,
    spec: EncoderSpec,
    pretext: &PretextConfig,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<SslOutput> {
    cfg.validate()?;
    let first = images.first().ok_or(Error::EmptyDataset)?;
    if first.channels() != spec.input_channels {
        return Err(Error::ChannelMismatch {
            expected: spec.input_channels,
            actual: first.channels(),
        });
    }
    let mut model = PretextModel::new(spec, HeadKind::for_variant(variant), cfg.seed)?;
    let mut opt = cfg.optimizer();
    let schedule = cfg.lr_schedule.resolve(cfg.epochs);
    let mut metrics = RunMetrics::new(Phase::Ssl);
    let mut best = (model.to_checkpoint(), 0, -1.0f64);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        opt.lr = schedule.lr_at(cfg.lr, epoch);
        let stream = build_epoch(images, variant, pretext, epoch, cfg.batch_size)?;
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for (b, batch) in stream.enumerate() {
            let batch = batch?;
            let labels = batch.labels();
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape, true);
            let input = model_input(&mut tape, batch_inputs(&batch)?);
            let step = (|| {
                let pass = model.forward(&mut tape, &binding, input, Mode::Train)?;
                let loss = tape.softmax_cross_entropy(pass.logits, &labels)?;
                tape.backward(loss)?;
                Ok::<_, Error>((pass, loss))
            })();
            let (pass, loss) = step.map_err(|e| numeric_abort(e, epoch, b))?;
            loss_sum += tape.value(loss).data()[0] as f64 * labels.len() as f64;
            correct += count_correct(tape.value(pass.logits), &labels);
            seen += labels.len();

            let (encoder, head) = model.parts_mut();
            apply_update(&mut opt, &tape, &binding, encoder, head, true)?;
            for p in &pass.encoder_passes {
                encoder.apply_bn_updates(&p.bn_updates);
            }
        }
        let accuracy = correct as f64 / seen as f64;
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / seen as f64,
            accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        if !m.loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        on_epoch(&m);
        metrics.epochs.push(m);
        if accuracy > best.2 {
            best = (model.to_checkpoint(), epoch, accuracy);
        }
        if cfg.stop_at_accuracy.is_some_and(|t| accuracy >= t) {
            break;
        }
    }

    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_checkpoint(&best.0, dir.join("best.ckpt"))?;
        write_checkpoint(&model.to_checkpoint(), dir.join("last.ckpt"))?;
    }
    Ok(SslOutput {
        model,
        metrics,
        best: best.0,
        best_epoch: best.1,
    })
}

/// Eval-mode pretext loss and accuracy over the items generated for `epoch`.
pub fn evaluate_pretext(
    model: &PretextModel,
    images: &[Image],
    variant: TaskVariant,
    pretext: &PretextConfig,
    epoch: usize,
) -> Result<(f64, f64)> {
    if HeadKind::for_variant(variant) != model.kind() {
        return Err(Error::InvalidConfig(format!(
            "{variant} needs a {} head, model has {}",
            HeadKind::for_variant(variant),
            model.kind()
        )));
    }
    let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
    for batch in build_epoch(images, variant, pretext, epoch, 64)? {
        let batch = batch?;
        let labels = batch.labels();
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, false);
        let input = model_input(&mut tape, batch_inputs(&batch)?);
        let pass = model.forward(&mut tape, &binding, input, Mode::Eval)?;
        let loss = tape.softmax_cross_entropy(pass.logits, &labels)?;
        loss_sum += tape.value(loss).data()[0] as f64 * labels.len() as f64;
        correct += count_correct(tape.value(pass.logits), &labels);
        seen += labels.len();
    }
    Ok((loss_sum / seen as f64, correct as f64 / seen as f64))
}
