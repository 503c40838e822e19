//! CIFAR-style residual encoders (6n+2 layers, widths 16/32/64).
//!
//! Layout: a 3×3 stem conv to 16 channels, then three stages of `n` basic
//! blocks. The first block of stages two and three halves the resolution with
//! a stride-2 conv; its shortcut subsamples and zero-pads the channel axis, so
//! shortcuts carry no parameters. The last stage is global-average-pooled to a
//! 64-dimensional latent.

use std::fmt;
use std::str::FromStr;

use super::params::{kaiming_normal, Binding, ParamStore};
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::{BatchNormMode, BatchStats, Padding, Tape, Tensor, Var};

pub const LATENT_DIM: usize = 64;
pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
pub const STAGE_WIDTHS: [usize; 3] = [16, 32, 64];
/// Smallest spatial side the encoder accepts.
pub const MIN_INPUT_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncoderVariant {
    ResNet8,
    ResNet32,
}

impl EncoderVariant {
    pub fn blocks_per_stage(self) -> usize {
        match self {
            EncoderVariant::ResNet8 => 1,
            EncoderVariant::ResNet32 => 5,
        }
    }

    /// Weighted layer count, `6n + 2`.
    pub fn depth(self) -> usize {
        6 * self.blocks_per_stage() + 2
    }

    pub fn name(self) -> &'static str {
        match self {
            EncoderVariant::ResNet8 => "resnet8",
            EncoderVariant::ResNet32 => "resnet32",
        }
    }

    fn from_blocks(n: usize) -> Option<Self> {
        match n {
            1 => Some(EncoderVariant::ResNet8),
            5 => Some(EncoderVariant::ResNet32),
            _ => None,
        }
    }
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "resnet8" => Ok(EncoderVariant::ResNet8),
            "resnet32" => Ok(EncoderVariant::ResNet32),
            other => Err(Error::Config(format!("unknown encoder {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EncoderSpec {
    pub variant: EncoderVariant,
    pub input_channels: usize,
    pub latent_dim: usize,
}

impl EncoderSpec {
    pub fn new(variant: EncoderVariant, input_channels: usize) -> Self {
        Self {
            variant,
            input_channels,
            latent_dim: LATENT_DIM,
        }
    }

    pub fn descriptor(&self) -> String {
        format!(
            "{}/in{}/latent{}",
            self.variant.name(),
            self.input_channels,
            self.latent_dim
        )
    }
}

/// Whether batch norm uses batch statistics (and updates running ones).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct ConvBn {
    weight: usize,
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
    stride: usize,
}

#[derive(Debug, Clone)]
struct Block {
    conv1: ConvBn,
    conv2: ConvBn,
    stride: usize,
    out_channels: usize,
}

/// Running-stat update produced by one training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    running_mean: usize,
    running_var: usize,
    stats: BatchStats,
}

/// Result of one encoder forward pass.
#[derive(Debug, Clone)]
pub struct EncoderPass {
    /// N×64 pooled latent.
    pub latent: Var,
    /// N×64×h×w output of the last stage, before pooling.
    pub features: Var,
    pub bn_updates: Vec<BnUpdate>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    spec: EncoderSpec,
    params: ParamStore,
    stem: ConvBn,
    blocks: Vec<Block>,
}

impl Encoder {
    /// Fresh encoder with seeded initialization.
    pub fn new(spec: EncoderSpec, seed: u64) -> Result<Self> {
        if spec.latent_dim != LATENT_DIM {
            return Err(Error::InvalidConfig(format!(
                "latent dimension is fixed at {LATENT_DIM}, got {}",
                spec.latent_dim
            )));
        }
        if spec.input_channels == 0 {
            return Err(Error::InvalidConfig("encoder needs at least one input channel".into()));
        }
        let mut rng = rng::substream(seed, &[stream::INIT, 0]);
        let mut params = ParamStore::new();
        let mut conv_bn = |name: &str, cin: usize, cout: usize, stride: usize| {
            let fan_in = cin * 9;
            let weight = params.push(
                format!("{name}.conv.weight"),
                kaiming_normal(vec![cout, cin, 3, 3], fan_in, &mut rng),
                true,
            );
            let gamma = params.push(format!("{name}.bn.gamma"), Tensor::full(vec![cout], 1.0), true);
            let beta = params.push(format!("{name}.bn.beta"), Tensor::zeros(vec![cout]), true);
            let running_mean =
                params.push(format!("{name}.bn.running_mean"), Tensor::zeros(vec![cout]), false);
            let running_var =
                params.push(format!("{name}.bn.running_var"), Tensor::full(vec![cout], 1.0), false);
            ConvBn {
                weight,
                gamma,
                beta,
                running_mean,
                running_var,
                stride,
            }
        };
        let stem = conv_bn("stem", spec.input_channels, STAGE_WIDTHS[0], 1);
        let mut blocks = Vec::new();
        let mut cin = STAGE_WIDTHS[0];
        for (s, &width) in STAGE_WIDTHS.iter().enumerate() {
            for b in 0..spec.variant.blocks_per_stage() {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let name = format!("stage{}.block{b}", s + 1);
                let conv1 = conv_bn(&format!("{name}.conv1"), cin, width, stride);
                let conv2 = conv_bn(&format!("{name}.conv2"), width, width, 1);
                blocks.push(Block {
                    conv1,
                    conv2,
                    stride,
                    out_channels: width,
                });
                cin = width;
            }
        }
        Ok(Self {
            spec,
            params,
            stem,
            blocks,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Binding {
        self.params.bind(tape, requires_grad)
    }

    fn conv_bn(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        layer: &ConvBn,
        x: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let y = tape.conv2d(x, binding.var(layer.weight), layer.stride, Padding::Same)?;
        let bn_mode = match mode {
            Mode::Train => BatchNormMode::Train,
            Mode::Eval => BatchNormMode::Eval {
                mean: self.params.get(layer.running_mean).data(),
                var: self.params.get(layer.running_var).data(),
            },
        };
        let (y, stats) = tape.batch_norm2d(
            y,
            binding.var(layer.gamma),
            binding.var(layer.beta),
            bn_mode,
            BN_EPS,
        )?;
        if let Some(stats) = stats {
            updates.push(BnUpdate {
                running_mean: layer.running_mean,
                running_var: layer.running_var,
                stats,
            });
        }
        Ok(y)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4
            || shape[1] != self.spec.input_channels
            || shape[2] < MIN_INPUT_SIDE
            || shape[3] < MIN_INPUT_SIDE
        {
            return Err(Error::shape(
                "encode",
                format!(
                    "expected N×{}×H×W with H, W ≥ {MIN_INPUT_SIDE}, got {shape:?}",
                    self.spec.input_channels
                ),
            ));
        }
        Ok(())
    }

    /// Records the encoder graph for `x` (N×C×H×W) on `tape`.
    pub fn forward(&self, tape: &mut Tape, binding: &Binding, x: Var, mode: Mode) -> Result<EncoderPass> {
        self.check_input(tape.shape(x))?;
        let mut updates = Vec::new();
        let h = self.conv_bn(tape, binding, &self.stem, x, mode, &mut updates)?;
        let mut h = tape.relu(h)?;
        for block in &self.blocks {
            let y = self.conv_bn(tape, binding, &block.conv1, h, mode, &mut updates)?;
            let y = tape.relu(y)?;
            let y = self.conv_bn(tape, binding, &block.conv2, y, mode, &mut updates)?;
            let skip = if block.stride == 1 && tape.shape(h)[1] == block.out_channels {
                h
            } else {
                tape.shortcut(h, block.stride, block.out_channels)?
            };
            let sum = tape.add(y, skip)?;
            h = tape.relu(sum)?;
        }
        let latent = tape.global_avg_pool(h)?;
        Ok(EncoderPass {
            latent,
            features: h,
            bn_updates: updates,
        })
    }

    /// Folds batch statistics into the running averages:
    /// `running = (1 - momentum)·running + momentum·batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            for (idx, batch) in [(u.running_mean, &u.stats.mean), (u.running_var, &u.stats.var)] {
                for (r, &b) in self.params.get_mut(idx).data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }

    /// Eval-mode latents for an N×C×H×W batch.
    pub fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let pass = self.forward(&mut tape, &binding, x, Mode::Eval)?;
        Ok(tape.value(pass.latent).clone())
    }

    /// Rebuilds an encoder from `encoder.`-prefixed checkpoint entries.
    pub(crate) fn from_entries(entries: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let stem = find("encoder.stem.conv.weight")
            .ok_or_else(|| Error::CheckpointMismatch("missing encoder.stem.conv.weight".into()))?;
        let input_channels = stem.shape()[1];
        let blocks = (0..)
            .take_while(|b| find(&format!("encoder.stage3.block{b}.conv1.conv.weight")).is_some())
            .count();
        let variant = EncoderVariant::from_blocks(blocks).ok_or_else(|| {
            Error::CheckpointMismatch(format!("unsupported encoder with {blocks} blocks per stage"))
        })?;
        let mut enc = Encoder::new(EncoderSpec::new(variant, input_channels), 0)?;
        let own: Vec<(String, Tensor)> = entries
            .iter()
            .filter(|(n, _)| n.starts_with("encoder."))
            .cloned()
            .collect();
        enc.params.load_entries("encoder.", &own)?;
        Ok(enc)
    }
}
