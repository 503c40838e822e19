use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use super::{apply_update, argmax, count_correct, images_to_tensor, numeric_abort, EpochMetrics, Phase, RunMetrics, TrainConfig};
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::models::{DownstreamModel, Encoder, Mode, ModelBinding};
use crate::rng::{self, stream};
use crate::tensor::{Tape, Tensor};

/// Batch size for inference-only passes.
const INFER_BATCH: usize = 64;

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(seed, &[stream::EVAL_SHUFFLE, epoch as u64]));
    order
}

fn class_count(train: &LabeledDataset, test: &LabeledDataset) -> Result<usize> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = train.num_classes().max(test.num_classes());
    if classes < 2 {
        return Err(Error::TooFewClasses(classes));
    }
    Ok(classes)
}

/// Eval-mode latents for `images`, stacked into an N×64 tensor.
pub fn extract_features(encoder: &Encoder, images: &[Image]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut data = Vec::with_capacity(images.len() * encoder.spec().latent_dim);
    for chunk in images.chunks(INFER_BATCH) {
        data.extend_from_slice(encoder.encode(&images_to_tensor(chunk)?)?.data());
    }
    Tensor::new(vec![images.len(), encoder.spec().latent_dim], data)
}

fn gather_rows(features: &Tensor, idx: &[usize]) -> Tensor {
    let d = features.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(features.row(i));
    }
    Tensor::new(vec![idx.len(), d], data).expect("row count matches")
}

/// Trains a fresh classifier head on frozen eval-mode features of `encoder`
/// and reports top-1 test accuracy. The encoder is never written to.
pub fn linear_eval(
    encoder: &Encoder,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(DownstreamModel, RunMetrics)> {
    cfg.validate()?;
    let classes = class_count(train, test)?;
    let mut model = DownstreamModel::new(encoder.clone(), cfg.hidden_width, classes, cfg.seed)?;
    let features = extract_features(encoder, &train.images)?;
    let mut opt = cfg.optimizer();
    let schedule = cfg.lr_schedule.resolve(cfg.epochs);
    let mut metrics = RunMetrics::new(Phase::LinearEval);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        opt.lr = schedule.lr_at(cfg.lr, epoch);
        let order = shuffled(train.len(), cfg.seed, epoch);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut tape = Tape::new();
            let head = model.bind_head(&mut tape, true);
            let x = tape.constant(gather_rows(&features, idx));
            let step = (|| {
                let logits = model.head_forward(&mut tape, &head, x)?;
                let loss = tape.softmax_cross_entropy(logits, &labels)?;
                tape.backward(loss)?;
                Ok::<_, Error>((logits, loss))
            })();
            let (logits, loss) = step.map_err(|e| numeric_abort(e, epoch, b))?;
            loss_sum += tape.value(loss).data()[0] as f64 * labels.len() as f64;
            correct += count_correct(tape.value(logits), &labels);

            let (encoder, head_params) = model.parts_mut();
            let binding = ModelBinding {
                encoder: crate::models::Binding::empty(),
                head,
            };
            apply_update(&mut opt, &tape, &binding, encoder, head_params, false)?;
        }
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / train.len() as f64,
            accuracy: correct as f64 / train.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&m);
        metrics.epochs.push(m);
        if cfg.stop_at_accuracy.is_some_and(|t| metrics.epochs[epoch].accuracy >= t) {
            break;
        }
    }
    if !test.is_empty() {
        let test_features = extract_features(encoder, &test.images)?;
        let logits = model.classify_features(&test_features)?;
        metrics.test_accuracy = Some(count_correct(&logits, &test.labels) as f64 / test.len() as f64);
    }
    Ok((model, metrics))
}

/// Trains encoder and a fresh classifier head together, with batch norm in
/// training mode, and reports top-1 test accuracy.
pub fn finetune(
    encoder: Encoder,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(DownstreamModel, RunMetrics)> {
    cfg.validate()?;
    let classes = class_count(train, test)?;
    let mut model = DownstreamModel::new(encoder, cfg.hidden_width, classes, cfg.seed)?;
    let mut opt = cfg.optimizer();
    let schedule = cfg.lr_schedule.resolve(cfg.epochs);
    let mut metrics = RunMetrics::new(Phase::Finetune);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        opt.lr = schedule.lr_at(cfg.lr, epoch);
        let order = shuffled(train.len(), cfg.seed, epoch);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let batch = images_to_tensor(idx.iter().map(|&i| &train.images[i]))?;
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape, true);
            let x = tape.constant(batch);
            let step = (|| {
                let pass = model.forward(&mut tape, &binding, x, Mode::Train)?;
                let loss = tape.softmax_cross_entropy(pass.logits, &labels)?;
                tape.backward(loss)?;
                Ok::<_, Error>((pass, loss))
            })();
            let (pass, loss) = step.map_err(|e| numeric_abort(e, epoch, b))?;
            loss_sum += tape.value(loss).data()[0] as f64 * labels.len() as f64;
            correct += count_correct(tape.value(pass.logits), &labels);

            let (encoder, head) = model.parts_mut();
            apply_update(&mut opt, &tape, &binding, encoder, head, true)?;
            encoder.apply_bn_updates(&pass.encoder_passes[0].bn_updates);
        }
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / train.len() as f64,
            accuracy: correct as f64 / train.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&m);
        metrics.epochs.push(m);
        if cfg.stop_at_accuracy.is_some_and(|t| metrics.epochs[epoch].accuracy >= t) {
            break;
        }
    }
    if !test.is_empty() {
        metrics.test_accuracy = Some(evaluate(&model, test)?);
    }
    Ok((model, metrics))
}

/// Eval-mode top-1 predictions in dataset order.
pub fn predict(model: &DownstreamModel, images: &[Image]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_BATCH) {
        let logits = model.classify(&images_to_tensor(chunk)?)?;
        out.extend((0..chunk.len()).map(|i| argmax(logits.row(i))));
    }
    Ok(out)
}

/// Top-1 accuracy on `test`.
pub fn evaluate(model: &DownstreamModel, test: &LabeledDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let predicted = predict(model, &test.images)?;
    let hits = predicted.iter().zip(&test.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / test.len() as f64)
}

/// CSV text with one `label,z0,...,z63` row per sample, in dataset order.
/// Floats use the shortest representation that parses back to the same
/// value.
pub fn write_embeddings_csv(encoder: &Encoder, dataset: &LabeledDataset) -> Result<String> {
    let features = extract_features(encoder, &dataset.images)?;
    let mut out = String::new();
    for (i, label) in dataset.labels.iter().enumerate() {
        write!(out, "{label}").expect("writing to a String");
        for v in features.row(i) {
            write!(out, ",{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_embeddings(encoder: &Encoder, dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv = write_embeddings_csv(encoder, dataset)?;
    std::fs::write(path, csv).map_err(|e| Error::io(path, e))
}
