//! Gradient-weighted class activation maps over the last residual stage.

use super::heads::{DownstreamModel, ModelInput, PretextModel};
use super::resnet::Mode;
use crate::error::{Error, Result};
use crate::imaging::{bilinear_resize, Image};
use crate::tensor::{Tape, Tensor};

/// Heatmap from one sample's activations and their gradients, both C×H×W
/// flattened. Channel weights are spatial means of the gradient; the map is
/// `ReLU(Σ_c w_c·A_c)` divided by its maximum (an all-zero map stays zero).
pub fn gradcam_from_activations(
    activations: &[f32],
    gradients: &[f32],
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Image> {
    let plane = height * width;
    if activations.len() != channels * plane || gradients.len() != activations.len() {
        return Err(Error::shape(
            "gradcam",
            format!(
                "{} activations / {} gradients for {channels}×{height}×{width}",
                activations.len(),
                gradients.len()
            ),
        ));
    }
    let mut cam = vec![0.0f64; plane];
    for c in 0..channels {
        let g = &gradients[c * plane..(c + 1) * plane];
        let w = g.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        if w == 0.0 {
            continue;
        }
        for (acc, &a) in cam.iter_mut().zip(&activations[c * plane..(c + 1) * plane]) {
            *acc += w * a as f64;
        }
    }
    let max = cam.iter().copied().fold(0.0f64, f64::max);
    let data = cam
        .iter()
        .map(|&v| if max > 0.0 { (v.max(0.0) / max) as f32 } else { 0.0 })
        .collect();
    Image::new(height, width, 1, data)
}

fn image_batch(img: &Image) -> Tensor {
    Tensor::new(
        vec![1, img.channels(), img.height(), img.width()],
        img.to_planar(),
    )
    .expect("planar image matches its shape")
}

fn check_class(class: usize, classes: usize) -> Result<()> {
    if class >= classes {
        return Err(Error::InvalidClass { class, classes });
    }
    Ok(())
}

/// Seeds `target_class` on `logits`, backpropagates, and builds the map over
/// `features`.
fn run(
    tape: &mut Tape,
    logits: crate::tensor::Var,
    features: crate::tensor::Var,
    target_class: usize,
) -> Result<Image> {
    let classes = tape.shape(logits)[1];
    check_class(target_class, classes)?;
    let mut seed = Tensor::zeros(vec![1, classes]);
    seed.data_mut()[target_class] = 1.0;
    tape.backward_with(logits, seed)?;
    let acts = tape.value(features).clone();
    let grads = tape
        .grad(features)
        .unwrap_or_else(|| Tensor::zeros(acts.shape().to_vec()));
    let s = acts.shape();
    gradcam_from_activations(acts.data(), grads.data(), s[1], s[2], s[3])
}

/// GradCAM for a single-input pretext model (RotNet or Patch RotNet head).
/// The map has the last stage's spatial size.
pub fn gradcam(model: &PretextModel, image: &Image, target_class: usize) -> Result<Image> {
    check_class(target_class, model.kind().num_classes())?;
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, true);
    let x = tape.constant(image_batch(image));
    let pass = model.forward(&mut tape, &binding, ModelInput::Single(x), Mode::Eval)?;
    let features = pass.encoder_passes[0].features;
    run(&mut tape, pass.logits, features, target_class)
}

/// GradCAM for a pairwise (Patch RelNet) model, taken over the second
/// (patched) image of the pair.
pub fn gradcam_pair(
    model: &PretextModel,
    image_a: &Image,
    image_b: &Image,
    target_class: usize,
) -> Result<Image> {
    check_class(target_class, model.kind().num_classes())?;
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, true);
    let a = tape.constant(image_batch(image_a));
    let b = tape.constant(image_batch(image_b));
    let pass = model.forward(&mut tape, &binding, ModelInput::Pair(a, b), Mode::Eval)?;
    let features = pass.encoder_passes[1].features;
    run(&mut tape, pass.logits, features, target_class)
}

/// GradCAM for a downstream classifier.
pub fn gradcam_downstream(
    model: &DownstreamModel,
    image: &Image,
    target_class: usize,
) -> Result<Image> {
    check_class(target_class, model.num_classes())?;
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, true);
    let x = tape.constant(image_batch(image));
    let pass = model.forward(&mut tape, &binding, x, Mode::Eval)?;
    let features = pass.encoder_passes[0].features;
    run(&mut tape, pass.logits, features, target_class)
}

/// Bilinear upsampling of a heatmap to `height×width`.
pub fn upsample(heatmap: &Image, height: usize, width: usize) -> Result<Image> {
    bilinear_resize(heatmap, height, width)
}

/// Blue-to-red ramp for a heat value in `[0, 1]`.
fn heat_color(v: f32) -> [f32; 3] {
    [
        (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0),
        (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0),
        (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0),
    ]
}

/// Half-and-half blend of `image` with a colorized `heatmap`, upsampled to
/// the image size.
pub fn overlay(image: &Image, heatmap: &Image) -> Result<Image> {
    let heat = upsample(heatmap, image.height(), image.width())?;
    Ok(Image::from_fn(image.height(), image.width(), 3, |r, c, ch| {
        let base = image.get(r, c, ch.min(image.channels() - 1));
        0.5 * base + 0.5 * heat_color(heat.get(r, c, 0))[ch]
    }))
}
