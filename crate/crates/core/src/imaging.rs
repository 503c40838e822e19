//! Float rasters and the geometric transforms used to build pretext samples.
//!
//! Images are stored row-major with channels interleaved per pixel, values in
//! `[0, 1]`. Every transform here returns a new image and leaves its inputs
//! untouched.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "expected {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Constant image. Panics if `value` is outside `[0, 1]` or a dimension is zero.
    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
            .expect("valid constant image")
    }

    /// Builds an image from a per-pixel function `f(row, col, channel)`.
    /// Values are clamped to `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        assert!(height > 0 && width > 0 && (channels == 1 || channels == 3));
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Copies the rectangle starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::OutOfBounds {
                top,
                left,
                patch_h: height,
                patch_w: width,
                bg_h: self.height,
                bg_w: self.width,
            });
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for r in top..top + height {
            let start = (r * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(Image {
            height,
            width,
            channels: self.channels,
            data,
        })
    }

    /// Channel-planar copy (C×H×W), the layout the tensor ops consume.
    pub fn to_planar(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * self.channels];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * plane + i] = v;
            }
        }
        out
    }
}

/// Rotates counter-clockwise by `k` quarter turns (`k` is taken mod 4).
///
/// Source pixel `(r, c)` of an `H×W` image lands at `(W-1-c, r)` for one
/// quarter turn.
pub fn rotate90(img: &Image, k: u8) -> Image {
    let (h, w, ch) = (img.height, img.width, img.channels);
    let k = k % 4;
    if k == 0 {
        return img.clone();
    }
    let (out_h, out_w) = if k % 2 == 1 { (w, h) } else { (h, w) };
    let mut data = Vec::with_capacity(img.data.len());
    for r in 0..out_h {
        for c in 0..out_w {
            let (sr, sc) = match k {
                1 => (c, w - 1 - r),
                2 => (h - 1 - r, w - 1 - c),
                _ => (h - 1 - c, r),
            };
            data.extend_from_slice(img.pixel(sr, sc));
        }
    }
    Image {
        height: out_h,
        width: out_w,
        channels: ch,
        data,
    }
}

/// Source sample positions for one axis under the half-pixel-centers mapping.
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    let max = (input - 1) as f64;
    (0..output)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn bilinear_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidImage(format!(
            "resize target must be positive, got {out_h}x{out_w}"
        )));
    }
    let rows = axis_taps(img.height, out_h);
    let cols = axis_taps(img.width, out_w);
    let ch = img.channels;
    let mut data = Vec::with_capacity(out_h * out_w * ch);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            for k in 0..ch {
                let p00 = img.get(r0, c0, k);
                let p01 = img.get(r0, c1, k);
                let p10 = img.get(r1, c0, k);
                let p11 = img.get(r1, c1, k);
                let top = p00 as f64 * (1.0 - fc) + p01 as f64 * fc;
                let bottom = p10 as f64 * (1.0 - fc) + p11 as f64 * fc;
                let v = (top * (1.0 - fr) + bottom * fr) as f32;
                let lo = p00.min(p01).min(p10).min(p11);
                let hi = p00.max(p01).max(p10).max(p11);
                data.push(v.clamp(lo, hi));
            }
        }
    }
    Ok(Image {
        height: out_h,
        width: out_w,
        channels: ch,
        data,
    })
}

/// Returns `background` with the rectangle at `(top, left)` replaced by `patch`.
pub fn paste(background: &Image, patch: &Image, top: usize, left: usize) -> Result<Image> {
    if patch.channels != background.channels {
        return Err(Error::ChannelMismatch {
            expected: background.channels,
            actual: patch.channels,
        });
    }
    if top + patch.height > background.height || left + patch.width > background.width {
        return Err(Error::OutOfBounds {
            top,
            left,
            patch_h: patch.height,
            patch_w: patch.width,
            bg_h: background.height,
            bg_w: background.width,
        });
    }
    let mut out = background.clone();
    let ch = background.channels;
    let row_len = patch.width * ch;
    for r in 0..patch.height {
        let dst = ((top + r) * background.width + left) * ch;
        let src = r * row_len;
        out.data[dst..dst + row_len].copy_from_slice(&patch.data[src..src + row_len]);
    }
    Ok(out)
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Encodes as binary P6. Single-channel images are written as gray RGB.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.width * img.height * 3);
    for px in img.data.chunks_exact(img.channels) {
        if img.channels == 1 {
            let v = quantize(px[0]);
            out.extend_from_slice(&[v, v, v]);
        } else {
            out.extend(px.iter().map(|&v| quantize(v)));
        }
    }
    out
}

pub fn write_ppm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_ppm(img))
        .map_err(|e| Error::io(path, e))
}

/// Header tokenizer: whitespace separated, `#` comments run to end of line.
struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn token(&mut self) -> Result<&[u8]> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(Error::MalformedHeader("unexpected end of header".into())),
            }
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                Error::MalformedHeader(format!("bad {what}: {:?}", String::from_utf8_lossy(tok)))
            })
    }
}

/// Decodes a binary P6 image with maxval 255 into a 3-channel image.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut cur = HeaderCursor { bytes, pos: 0 };
    let magic = cur.token()?;
    if magic != b"P6" {
        return Err(Error::MalformedHeader(format!(
            "expected magic P6, found {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(format!(
            "zero dimension {width}x{height}"
        )));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::MalformedHeader("missing separator after maxval".into())),
    }
    let expected = width * height * 3;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            actual: payload.len(),
        });
    }
    let data = payload[..expected]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Ok(Image {
        height,
        width,
        channels: 3,
        data,
    })
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}
