//! Pretext sample generation: whole-image rotations, rotated patches pasted
//! onto the upright image, and (rotated, patched) pairs.
//!
//! Label semantics for the 8-way task: `0..=3` is the whole image rotated by
//! `label` counter-clockwise quarter turns; `4..=7` is the upright image with
//! a downscaled copy of itself, rotated by `label - 4` quarter turns, pasted
//! at a random position.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::imaging::{bilinear_resize, paste, rotate90, Image};
use crate::rng::{self, stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskVariant {
    /// 4-way whole-image rotation baseline.
    RotNet,
    /// 8-way: 4 rotations plus 4 patch rotations.
    PatchRotNet,
    /// 4-way over (rotated image, patched image) pairs.
    PatchRelNet,
}

impl TaskVariant {
    pub fn num_classes(self) -> usize {
        match self {
            TaskVariant::RotNet | TaskVariant::PatchRelNet => 4,
            TaskVariant::PatchRotNet => 8,
        }
    }

    /// Training items generated per source image.
    pub fn items_per_image(self) -> usize {
        self.num_classes()
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskVariant::RotNet => "rotnet",
            TaskVariant::PatchRotNet => "patch-rotnet",
            TaskVariant::PatchRelNet => "patch-relnet",
        }
    }
}

impl fmt::Display for TaskVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "rotnet" => Ok(TaskVariant::RotNet),
            "patch-rotnet" | "patchrotnet" => Ok(TaskVariant::PatchRotNet),
            "patch-relnet" | "patchrelnet" | "relnet" => Ok(TaskVariant::PatchRelNet),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Where a patch was pasted, in background pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Placement {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.top + self.height).contains(&row)
            && (self.left..self.left + self.width).contains(&col)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretextSample {
    pub image: Image,
    pub label: usize,
    pub variant: TaskVariant,
    /// Set for patched samples (labels 4..=7).
    pub placement: Option<Placement>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretextPair {
    /// Whole image rotated by `label` quarter turns.
    pub image_a: Image,
    /// Upright image with a patch rotated by `label` quarter turns.
    pub image_b: Image,
    pub label: usize,
    pub placement: Placement,
}

/// How each source image contributes to an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampling {
    /// Every pretext class of every image, every epoch.
    #[default]
    AllTransforms,
    /// One randomly chosen pretext class per image per epoch.
    OneTransformPerImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretextConfig {
    /// Patch side as a fraction of the background side.
    pub ratio: f64,
    pub rng_seed: u64,
    pub resample_position_each_epoch: bool,
    pub sampling: Sampling,
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self {
            ratio: 0.4,
            rng_seed: 0,
            resample_position_each_epoch: true,
            sampling: Sampling::AllTransforms,
        }
    }
}

impl PretextConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ratio must lie in (0, 1), got {}",
                self.ratio
            )));
        }
        Ok(())
    }

    /// Patch size for an `height×width` background, rounding half up per axis.
    pub fn patch_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let side = |dim: usize| -> Result<usize> {
            let side = (self.ratio * dim as f64 + 0.5).floor() as usize;
            if side == 0 || side > dim {
                return Err(Error::PatchTooLarge {
                    ratio: self.ratio,
                    side,
                    dim,
                });
            }
            Ok(side)
        };
        Ok((side(height)?, side(width)?))
    }
}

fn draw_placement(rng: &mut Rng, bg: &Image, ph: usize, pw: usize) -> Placement {
    Placement {
        top: rng.gen_range(0..=bg.height() - ph),
        left: rng.gen_range(0..=bg.width() - pw),
        height: ph,
        width: pw,
    }
}

/// Upright `x` with `x` rotated by `k` quarter turns, downscaled and pasted.
fn patched(x: &Image, k: u8, ph: usize, pw: usize, rng: &mut Rng) -> Result<(Image, Placement)> {
    let patch = bilinear_resize(&rotate90(x, k), ph, pw)?;
    let at = draw_placement(rng, x, ph, pw);
    Ok((paste(x, &patch, at.top, at.left)?, at))
}

/// The 4 whole-image rotations, labels `0..=3`.
pub fn generate_rotnet_set(x: &Image) -> Vec<PretextSample> {
    (0..4u8)
        .map(|k| PretextSample {
            image: rotate90(x, k),
            label: k as usize,
            variant: TaskVariant::RotNet,
            placement: None,
        })
        .collect()
}

/// The 8 Patch RotNet samples for one image, labels `0..=7` in order.
pub fn generate_patched_set(
    x: &Image,
    cfg: &PretextConfig,
    rng: &mut Rng,
) -> Result<Vec<PretextSample>> {
    let (ph, pw) = cfg.patch_size(x.height(), x.width())?;
    let mut out = Vec::with_capacity(8);
    for k in 0..4u8 {
        out.push(PretextSample {
            image: rotate90(x, k),
            label: k as usize,
            variant: TaskVariant::PatchRotNet,
            placement: None,
        });
    }
    for k in 0..4u8 {
        let (image, at) = patched(x, k, ph, pw, rng)?;
        out.push(PretextSample {
            image,
            label: 4 + k as usize,
            variant: TaskVariant::PatchRotNet,
            placement: Some(at),
        });
    }
    Ok(out)
}

/// The 4 Patch RelNet pairs for one image, labels `0..=3` in order.
pub fn generate_pairs(x: &Image, cfg: &PretextConfig, rng: &mut Rng) -> Result<Vec<PretextPair>> {
    let (ph, pw) = cfg.patch_size(x.height(), x.width())?;
    (0..4u8)
        .map(|k| {
            let (image_b, placement) = patched(x, k, ph, pw, rng)?;
            Ok(PretextPair {
                image_a: rotate90(x, k),
                image_b,
                label: k as usize,
                placement,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum PretextBatch {
    Samples(Vec<PretextSample>),
    Pairs(Vec<PretextPair>),
}

impl PretextBatch {
    pub fn len(&self) -> usize {
        match self {
            PretextBatch::Samples(s) => s.len(),
            PretextBatch::Pairs(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Vec<usize> {
        match self {
            PretextBatch::Samples(s) => s.iter().map(|s| s.label).collect(),
            PretextBatch::Pairs(p) => p.iter().map(|p| p.label).collect(),
        }
    }
}

/// The items [`build_epoch`] produces for source image `index` in `epoch`,
/// in label order (before any batching).
pub fn items_for_image(
    x: &Image,
    index: usize,
    epoch: usize,
    variant: TaskVariant,
    cfg: &PretextConfig,
) -> Result<PretextBatch> {
    if variant != TaskVariant::RotNet {
        cfg.validate()?;
    }
    Ok(into_batch(expand_image(x, index, epoch, variant, cfg)?))
}

enum Item {
    Sample(PretextSample),
    Pair(PretextPair),
}

fn into_batch(items: Vec<Item>) -> PretextBatch {
    let mut samples = Vec::new();
    let mut pairs = Vec::new();
    for item in items {
        match item {
            Item::Sample(s) => samples.push(s),
            Item::Pair(p) => pairs.push(p),
        }
    }
    if pairs.is_empty() {
        PretextBatch::Samples(samples)
    } else {
        PretextBatch::Pairs(pairs)
    }
}

/// Pretext items for source image `index` in `epoch`.
fn expand_image(
    x: &Image,
    index: usize,
    epoch: usize,
    variant: TaskVariant,
    cfg: &PretextConfig,
) -> Result<Vec<Item>> {
    let placement_epoch = if cfg.resample_position_each_epoch {
        epoch as u64
    } else {
        0
    };
    let mut rng = rng::substream(
        cfg.rng_seed,
        &[stream::PLACEMENT, placement_epoch, index as u64],
    );
    let mut items: Vec<Item> = match variant {
        TaskVariant::RotNet => generate_rotnet_set(x).into_iter().map(Item::Sample).collect(),
        TaskVariant::PatchRotNet => generate_patched_set(x, cfg, &mut rng)?
            .into_iter()
            .map(Item::Sample)
            .collect(),
        TaskVariant::PatchRelNet => generate_pairs(x, cfg, &mut rng)?
            .into_iter()
            .map(Item::Pair)
            .collect(),
    };
    if cfg.sampling == Sampling::OneTransformPerImage {
        let mut pick = rng::substream(
            cfg.rng_seed,
            &[stream::TRANSFORM_PICK, epoch as u64, index as u64],
        );
        let chosen = pick.gen_range(0..items.len());
        items = vec![items.swap_remove(chosen)];
    }
    Ok(items)
}

/// Lazily generated batches for one epoch.
///
/// Source images are shuffled, then each is expanded into its pretext items
/// in label order, and the flattened stream is cut into `batch_size` chunks
/// (the last chunk may be short).
pub struct EpochStream<'a> {
    dataset: &'a [Image],
    order: Vec<usize>,
    next_image: usize,
    pending: std::collections::VecDeque<Item>,
    variant: TaskVariant,
    cfg: PretextConfig,
    epoch: usize,
    batch_size: usize,
}

pub fn build_epoch<'a>(
    dataset: &'a [Image],
    variant: TaskVariant,
    cfg: &PretextConfig,
    epoch: usize,
    batch_size: usize,
) -> Result<EpochStream<'a>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    if variant != TaskVariant::RotNet {
        cfg.validate()?;
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = rng::substream(cfg.rng_seed, &[stream::SHUFFLE, epoch as u64]);
    order.shuffle(&mut rng);
    Ok(EpochStream {
        dataset,
        order,
        next_image: 0,
        pending: Default::default(),
        variant,
        cfg: cfg.clone(),
        epoch,
        batch_size,
    })
}

impl EpochStream<'_> {
    /// Number of items the epoch will yield in total.
    pub fn total_items(&self) -> usize {
        match self.cfg.sampling {
            Sampling::AllTransforms => self.dataset.len() * self.variant.items_per_image(),
            Sampling::OneTransformPerImage => self.dataset.len(),
        }
    }

    /// Source image indices in the order this epoch visits them.
    pub fn image_order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for EpochStream<'_> {
    type Item = Result<PretextBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        while self.pending.len() < self.batch_size && self.next_image < self.order.len() {
            let idx = self.order[self.next_image];
            self.next_image += 1;
            match expand_image(&self.dataset[idx], idx, self.epoch, self.variant, &self.cfg) {
                Ok(items) => self.pending.extend(items),
                Err(e) => return Some(Err(e)),
            }
        }
        if self.pending.is_empty() {
            return None;
        }
        let take = self.batch_size.min(self.pending.len());
        let chunk: Vec<Item> = self.pending.drain(..take).collect();
        let batch = into_batch(chunk);
        Some(Ok(batch))
    }
}
