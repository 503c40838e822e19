mod common;

use common::*;
use patchrot::datasets::{make_synthetic_shapes, LabeledDataset};
use patchrot::imaging::Image;
use patchrot::models::{Encoder, EncoderSpec, EncoderVariant, PretextModel};
use patchrot::pretext::{PretextConfig, TaskVariant};
use patchrot::training::*;
use patchrot::Error;

fn spec() -> EncoderSpec {
    EncoderSpec::new(EncoderVariant::ResNet8, 3)
}

fn images(n: usize, side: usize, seed: u64) -> Vec<Image> {
    let mut r = rng(seed);
    (0..n).map(|_| random_image(side, side, 3, &mut r)).collect()
}

fn short(epochs: usize, batch: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: batch, seed: 3, ..TrainConfig::ssl() }
}

#[test]
fn ssl_epoch_loss_is_mean_cross_entropy_over_all_transforms() {
    let data = images(4, 16, 1);
    let pretext = PretextConfig::default();
    for variant in [TaskVariant::PatchRotNet, TaskVariant::PatchRelNet] {
        let cfg = short(1, 32);
        let out = pretrain_ssl(&data, variant, spec(), &pretext, &cfg, None, |_| {}).unwrap();

        let (want, items) = first_epoch_loss_oracle(&data, variant, &pretext, spec(), cfg.seed);
        assert_eq!(items, if variant == TaskVariant::PatchRotNet { 32 } else { 16 });
        let got = out.metrics.epochs[0].loss;
        assert!((got - want).abs() < 1e-5, "{variant}: {got} vs {want}");
    }
}

fn toy_split(n: usize, seed: u64) -> LabeledDataset {
    // class 0 dark, class 1 bright, both noisy
    let mut r = rng(seed);
    let mut out = LabeledDataset::default();
    for i in 0..n {
        let label = i % 2;
        let noise = random_image(16, 16, 3, &mut r);
        let img = Image::from_fn(16, 16, 3, |y, x, c| 0.2 * noise.get(y, x, c) + 0.7 * label as f32);
        out.images.push(img);
        out.labels.push(label);
    }
    out
}

#[test]
fn linear_eval_keeps_encoder_frozen_and_separates_toy_classes() {
    let encoder = Encoder::new(spec(), 4).unwrap();
    let before = encoder.params().fingerprint();
    let (train, test) = (toy_split(40, 1), toy_split(20, 2));
    let cfg = TrainConfig { epochs: 30, ..TrainConfig::linear_eval() };
    let (model, metrics) = linear_eval(&encoder, &train, &test, &cfg, |_| {}).unwrap();
    assert_eq!(encoder.params().fingerprint(), before);
    assert_eq!(model.encoder.params().fingerprint(), before);
    assert_eq!(metrics.epochs.len(), 30);
    let acc = metrics.test_accuracy.unwrap();
    assert!(acc > 0.9, "toy accuracy {acc}");
    assert_eq!(evaluate(&model, &test).unwrap(), acc);
}

#[test]
fn finetune_updates_the_encoder() {
    let encoder = Encoder::new(spec(), 4).unwrap();
    let before = encoder.params().fingerprint();
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::finetune() };
    let (model, metrics) = finetune(encoder, &toy_split(16, 1), &toy_split(8, 2), &cfg, |_| {}).unwrap();
    assert_ne!(model.encoder.params().fingerprint(), before);
    assert!(metrics.test_accuracy.is_some());
}

#[test]
fn evaluate_scores_against_labels() {
    let encoder = Encoder::new(spec(), 4).unwrap();
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::linear_eval() };
    let (model, _) = linear_eval(&encoder, &toy_split(8, 1), &LabeledDataset::default(), &cfg, |_| {}).unwrap();
    let mut test = toy_split(12, 3);
    test.labels = predict(&model, &test.images).unwrap();
    assert_eq!(evaluate(&model, &test).unwrap(), 1.0);
    // flip every label of a two-class set
    test.labels.iter_mut().for_each(|l| *l = 1 - (*l).min(1));
    assert_eq!(evaluate(&model, &test).unwrap(), 0.0);
    assert!(matches!(evaluate(&model, &LabeledDataset::default()), Err(Error::EmptyTestSet)));
}

#[test]
fn downstream_input_errors() {
    let encoder = Encoder::new(spec(), 4).unwrap();
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::linear_eval() };
    let one_class = LabeledDataset { labels: vec![0; 4], ..toy_split(4, 1) };
    assert!(matches!(linear_eval(&encoder, &one_class, &one_class, &cfg, |_| {}), Err(Error::TooFewClasses(1))));
    let empty = LabeledDataset::default();
    assert!(matches!(linear_eval(&encoder, &empty, &empty, &cfg, |_| {}), Err(Error::EmptyDataset)));
}

#[test]
fn embedding_export_matches_encoder() {
    let encoder = Encoder::new(spec(), 9).unwrap();
    let data = make_synthetic_shapes(10, 16, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    export_embeddings(&encoder, &data, &a).unwrap();
    export_embeddings(&encoder, &data, &b).unwrap();
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let latent = encoder.encode(&stack_images(data.images.iter())).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 10);
    for (i, row) in rows.iter().enumerate() {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 65);
        assert_eq!(fields[0].parse::<usize>().unwrap(), data.labels[i]);
        for (f, want) in fields[1..].iter().zip(latent.row(i)) {
            assert_eq!(f.parse::<f32>().unwrap().to_bits(), want.to_bits());
        }
    }
}

#[test]
fn pretraining_is_deterministic() {
    let data = images(6, 16, 2);
    let run = || {
        let out = pretrain_ssl(&data, TaskVariant::PatchRotNet, spec(), &PretextConfig::default(), &short(2, 16), None, |_| {})
            .unwrap();
        (out.model.to_checkpoint().encode(), out.best.encode(), out.metrics.to_csv())
    };
    assert_eq!(run(), run());
}

#[test]
fn pretraining_reduces_loss_on_glyphs() {
    let data = make_synthetic_shapes(16, 32, 5).unwrap().images;
    let cfg = TrainConfig { lr_schedule: LrPolicy::Constant, ..short(12, 64) };
    let out = pretrain_ssl(&data, TaskVariant::PatchRotNet, spec(), &PretextConfig::default(), &cfg, None, |_| {}).unwrap();
    let first = out.metrics.epochs[0].loss;
    let last = out.metrics.last().unwrap().loss;
    assert!(last < 0.8 * first, "loss {first} -> {last}");
    assert!(out.metrics.last().unwrap().accuracy > 0.125);
}

#[test]
fn early_stop_and_checkpoint_files() {
    let data = images(4, 16, 3);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { stop_at_accuracy: Some(0.0), ..short(5, 32) };
    let out = pretrain_ssl(&data, TaskVariant::PatchRotNet, spec(), &PretextConfig::default(), &cfg, Some(dir.path()), |_| {})
        .unwrap();
    assert_eq!(out.metrics.epochs.len(), 1);
    assert_eq!(out.best_epoch, 0);
    for name in ["best.ckpt", "last.ckpt"] {
        let ckpt = patchrot::tensor::read_checkpoint(dir.path().join(name)).unwrap();
        assert!(PretextModel::from_checkpoint(&ckpt).is_ok());
    }
}

#[test]
fn ssl_input_errors() {
    let pretext = PretextConfig::default();
    let gray: Vec<Image> = (0..2).map(|_| Image::filled(16, 16, 1, 0.5)).collect();
    assert!(matches!(
        pretrain_ssl(&gray, TaskVariant::PatchRotNet, spec(), &pretext, &short(1, 8), None, |_| {}),
        Err(Error::ChannelMismatch { expected: 3, actual: 1 })
    ));
    assert!(matches!(
        pretrain_ssl(&[], TaskVariant::PatchRotNet, spec(), &pretext, &short(1, 8), None, |_| {}),
        Err(Error::EmptyDataset)
    ));
    let cfg = TrainConfig { lr: 1e30, ..short(3, 8) };
    let data = images(2, 16, 4);
    assert!(matches!(
        pretrain_ssl(&data, TaskVariant::PatchRotNet, spec(), &pretext, &cfg, None, |_| {}),
        Err(Error::NonFiniteLoss { .. })
    ));
}
