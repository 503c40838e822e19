//! Dataset ingestion: CIFAR-10 binary batches, PPM directories, and a seeded
//! synthetic glyph set.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::imaging::{read_ppm, Image};
use crate::rng::{self, stream};

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// One more than the largest label.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    /// First `n` items (or all of them).
    pub fn take(&self, n: usize) -> LabeledDataset {
        LabeledDataset {
            images: self.images.iter().take(n).cloned().collect(),
            labels: self.labels.iter().take(n).copied().collect(),
        }
    }
}

/// Parses CIFAR-10 binary records: one label byte, then 1024 red, 1024
/// green and 1024 blue bytes, each plane row-major.
pub fn parse_cifar_binary(bytes: &[u8]) -> Result<LabeledDataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(Error::TruncatedRecord {
            len: bytes.len() as u64,
        });
    }
    let mut out = LabeledDataset::default();
    for (record, chunk) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = chunk[0];
        if label as usize >= CIFAR_CLASSES {
            return Err(Error::LabelOutOfRange { label, record });
        }
        let planes = &chunk[1..];
        let image = Image::from_fn(32, 32, 3, |r, c, ch| {
            planes[ch * 1024 + r * 32 + c] as f32 / 255.0
        });
        out.images.push(image);
        out.labels.push(label as usize);
    }
    Ok(out)
}

pub fn load_cifar_binary(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_binary(&bytes)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    Ok(entries)
}

fn is_ppm(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

/// Loads `*.ppm` files. With class subdirectories, each subdirectory (in
/// name order) is one label; a flat directory is labeled 0 throughout.
pub fn load_ppm_dir(dir: impl AsRef<Path>) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let entries = sorted_entries(dir)?;
    let subdirs: Vec<&PathBuf> = entries.iter().filter(|p| p.is_dir()).collect();
    let mut out = LabeledDataset::default();
    if subdirs.is_empty() {
        for p in entries.iter().filter(|p| is_ppm(p)) {
            out.images.push(read_ppm(p)?);
            out.labels.push(0);
        }
    } else {
        for (label, sub) in subdirs.into_iter().enumerate() {
            for p in sorted_entries(sub)?.iter().filter(|p| is_ppm(p)) {
                out.images.push(read_ppm(p)?);
                out.labels.push(label);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

/// Glyph bitmaps on a 5×5 grid, row-major, `#` = ink. None of them equals
/// any of its own nontrivial quarter-turn rotations.
pub const GLYPHS: [(&str, [&str; 5]); 4] = [
    ("ell", ["#....", "#....", "#....", "#....", "####."]),
    ("eff", ["####.", "#....", "###..", "#....", "#...."]),
    ("arrow", ["..#..", ".###.", "#.#.#", "..#..", "..#.."]),
    ("tee", ["#####", "..#..", "..#..", "..#..", "..#.."]),
];

pub const GLYPH_GRID: usize = 5;

pub fn glyph_bitmap(class: usize) -> [[bool; GLYPH_GRID]; GLYPH_GRID] {
    let mut out = [[false; GLYPH_GRID]; GLYPH_GRID];
    for (r, row) in GLYPHS[class].1.iter().enumerate() {
        for (c, ch) in row.bytes().enumerate() {
            out[r][c] = ch == b'#';
        }
    }
    out
}

/// `n` images of `size×size` RGB, each holding one upright glyph at a random
/// position, scale and color over a dark noisy background. Labels are glyph
/// indices, assigned round-robin so classes stay balanced.
pub fn make_synthetic_shapes(n: usize, size: usize, seed: u64) -> Result<LabeledDataset> {
    if size < 16 {
        return Err(Error::InvalidConfig(format!(
            "synthetic images need size >= 16, got {size}"
        )));
    }
    let mut out = LabeledDataset::default();
    let min_cell = (size / 10).max(2);
    let max_cell = (size / 6).max(min_cell);
    for i in 0..n {
        let class = i % GLYPHS.len();
        let bitmap = glyph_bitmap(class);
        let mut rng = rng::substream(seed, &[stream::SYNTHETIC, i as u64]);
        let cell = rng.gen_range(min_cell..=max_cell);
        let extent = cell * GLYPH_GRID;
        let top = rng.gen_range(0..=size - extent);
        let left = rng.gen_range(0..=size - extent);
        let bg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..0.3));
        let fg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.65..1.0));
        let noise: Vec<f32> = (0..size * size * 3)
            .map(|_| rng.gen_range(-0.06f32..0.06))
            .collect();
        let image = Image::from_fn(size, size, 3, |r, c, ch| {
            let inside = r >= top && r < top + extent && c >= left && c < left + extent;
            let ink = inside && bitmap[(r - top) / cell][(c - left) / cell];
            let base = if ink { fg[ch] } else { bg[ch] };
            base + noise[(r * size + c) * 3 + ch]
        });
        out.images.push(image);
        out.labels.push(class);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSource {
    CifarBinary(PathBuf),
    PpmDirectory(PathBuf),
    /// `n` images of `size×size`; the split picks an independent seed stream.
    SyntheticShapes { n: usize, size: usize },
}

impl DatasetSource {
    pub fn load(&self, split: Split, seed: u64) -> Result<LabeledDataset> {
        match self {
            DatasetSource::CifarBinary(p) => load_cifar_binary(p),
            DatasetSource::PpmDirectory(p) => load_ppm_dir(p),
            DatasetSource::SyntheticShapes { n, size } => {
                let split_seed = match split {
                    Split::Train => rng::derive_seed(seed, &[0x7472]),
                    Split::Test => rng::derive_seed(seed, &[0x7465]),
                };
                make_synthetic_shapes(*n, *size, split_seed)
            }
        }
    }
}

impl fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSource::CifarBinary(p) => write!(f, "cifar:{}", p.display()),
            DatasetSource::PpmDirectory(p) => write!(f, "ppm:{}", p.display()),
            DatasetSource::SyntheticShapes { n, size } => write!(f, "synthetic:{n}:{size}"),
        }
    }
}

impl FromStr for DatasetSource {
    type Err = Error;

    /// `cifar:<file>`, `ppm:<dir>` or `synthetic:<n>:<size>`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("dataset source {s:?} lacks a kind prefix")))?;
        match kind {
            "cifar" => Ok(DatasetSource::CifarBinary(rest.into())),
            "ppm" => Ok(DatasetSource::PpmDirectory(rest.into())),
            "synthetic" => {
                let parts: Vec<&str> = rest.split(':').collect();
                let parse = |v: &str| {
                    v.parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad synthetic parameter {v:?}")))
                };
                match parts[..] {
                    [n, size] => Ok(DatasetSource::SyntheticShapes {
                        n: parse(n)?,
                        size: parse(size)?,
                    }),
                    [n] => Ok(DatasetSource::SyntheticShapes {
                        n: parse(n)?,
                        size: 32,
                    }),
                    _ => Err(Error::Config(format!("bad synthetic source {s:?}"))),
                }
            }
            other => Err(Error::Config(format!("unknown dataset kind {other:?}"))),
        }
    }
}
