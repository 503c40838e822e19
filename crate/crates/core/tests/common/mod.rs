//! Independent reference implementations shared by the integration tests and
//! the acceptance runner. Everything here is straight-line f64 code that does
//! not call into the library's numeric paths.

#![allow(dead_code, clippy::needless_range_loop)]

use patchrot::imaging::Image;
use patchrot::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Image {
    let data = (0..h * w * c).map(|_| rng.gen::<f32>()).collect();
    Image::new(h, w, c, data).unwrap()
}

// ---------- transforms ----------

/// One counter-clockwise quarter turn, written as a coordinate map: source
/// pixel (r, c) lands at (W - 1 - c, r).
fn quarter_turn(img: &Image) -> Image {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut out = vec![0.0f32; h * w * ch];
    for r in 0..h {
        for c in 0..w {
            let (dr, dc) = (w - 1 - c, r);
            for k in 0..ch {
                out[(dr * h + dc) * ch + k] = img.get(r, c, k);
            }
        }
    }
    Image::new(w, h, ch, out).unwrap()
}

pub fn rotate_oracle(img: &Image, k: u8) -> Image {
    let mut out = img.clone();
    for _ in 0..k % 4 {
        out = quarter_turn(&out);
    }
    out
}

/// Bilinear sample with half-pixel centers and edge clamping.
pub fn bilinear_oracle(img: &Image, out_h: usize, out_w: usize, r: usize, c: usize, ch: usize) -> f64 {
    let (h, w) = (img.height() as f64, img.width() as f64);
    let sy = ((r as f64 + 0.5) * h / out_h as f64 - 0.5).clamp(0.0, h - 1.0);
    let sx = ((c as f64 + 0.5) * w / out_w as f64 - 0.5).clamp(0.0, w - 1.0);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let y1 = (y0 + 1).min(img.height() - 1);
    let x1 = (x0 + 1).min(img.width() - 1);
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let p = |y: usize, x: usize| img.get(y, x, ch) as f64;
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
    let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

// ---------- f64 tensors and reference ops ----------

#[derive(Debug, Clone, PartialEq)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Arr { shape, data }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Arr::new(t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| v as f32).collect()).unwrap()
    }

    /// Uniform in `[-scale, scale]`, rounded through f32 so the tape sees the
    /// same values.
    pub fn random(shape: Vec<usize>, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| ((rng.gen::<f64>() * 2.0 - 1.0) * scale) as f32 as f64)
            .collect();
        Arr::new(shape, data)
    }

    /// Like [`Arr::random`] but with magnitudes in `[gap, 1]`, keeping values
    /// clear of zero.
    pub fn random_away_from_zero(shape: Vec<usize>, gap: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let m = gap + rng.gen::<f64>() * (1.0 - gap);
                let s = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                (s * m) as f32 as f64
            })
            .collect();
        Arr::new(shape, data)
    }
}

pub fn ref_add(a: &Arr, b: &Arr) -> Arr {
    Arr::new(a.shape.clone(), a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
}

pub fn ref_mul(a: &Arr, b: &Arr) -> Arr {
    Arr::new(a.shape.clone(), a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect())
}

pub fn ref_matmul(a: &Arr, b: &Arr) -> Arr {
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a.data[i * k + t] * b.data[t * n + j];
            }
        }
    }
    Arr::new(vec![m, n], out)
}

pub fn ref_sum(a: &Arr) -> Arr {
    Arr::new(vec![], vec![a.data.iter().sum()])
}

pub fn ref_relu(a: &Arr) -> Arr {
    Arr::new(a.shape.clone(), a.data.iter().map(|&v| v.max(0.0)).collect())
}

/// Direct convolution, zero padding `pad`, no bias.
pub fn ref_conv2d(x: &Arr, w: &Arr, stride: usize, pad: usize) -> Arr {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let y = (i * stride + ki) as isize - pad as isize;
                                let xx = (j * stride + kj) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                acc += x.data[((b * c + ic) * h + y as usize) * wd + xx as usize]
                                    * w.data[((oc * c + ic) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Arr::new(vec![n, o, oh, ow], out)
}

/// Batch norm over N×C×H×W. With `stats = None` the batch's own mean and
/// biased variance are used.
pub fn ref_batch_norm(x: &Arr, gamma: &Arr, beta: &Arr, stats: Option<(&[f64], &[f64])>, eps: f64) -> Arr {
    let (n, c, plane) = (x.shape[0], x.shape[1], x.shape[2] * x.shape[3]);
    let mut out = x.data.clone();
    for ch in 0..c {
        let idx = |b: usize, p: usize| (b * c + ch) * plane + p;
        let (mean, var) = match stats {
            Some((m, v)) => (m[ch], v[ch]),
            None => {
                let count = (n * plane) as f64;
                let mut mean = 0.0;
                for b in 0..n {
                    for p in 0..plane {
                        mean += x.data[idx(b, p)];
                    }
                }
                mean /= count;
                let mut var = 0.0;
                for b in 0..n {
                    for p in 0..plane {
                        var += (x.data[idx(b, p)] - mean).powi(2);
                    }
                }
                (mean, var / count)
            }
        };
        for b in 0..n {
            for p in 0..plane {
                let i = idx(b, p);
                out[i] = (x.data[i] - mean) / (var + eps).sqrt() * gamma.data[ch] + beta.data[ch];
            }
        }
    }
    Arr::new(x.shape.clone(), out)
}

pub fn ref_global_avg_pool(x: &Arr) -> Arr {
    let plane = x.shape[2] * x.shape[3];
    let data = x.data.chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
    Arr::new(vec![x.shape[0], x.shape[1]], data)
}

pub fn ref_linear(x: &Arr, w: &Arr, b: &Arr) -> Arr {
    let (n, inp, outp) = (x.shape[0], x.shape[1], w.shape[0]);
    let mut out = vec![0.0; n * outp];
    for i in 0..n {
        for o in 0..outp {
            let mut acc = b.data[o];
            for t in 0..inp {
                acc += x.data[i * inp + t] * w.data[o * inp + t];
            }
            out[i * outp + o] = acc;
        }
    }
    Arr::new(vec![n, outp], out)
}

/// Concatenation along `axis` via explicit multi-index arithmetic.
pub fn ref_concat(inputs: &[&Arr], axis: usize) -> Arr {
    let mut shape = inputs[0].shape.clone();
    shape[axis] = inputs.iter().map(|a| a.shape[axis]).sum();
    let total: usize = shape.iter().product();
    let mut out = vec![0.0; total];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut idx = vec![0; shape.len()];
        let mut rem = flat;
        for d in (0..shape.len()).rev() {
            idx[d] = rem % shape[d];
            rem /= shape[d];
        }
        let mut along = idx[axis];
        for a in inputs {
            if along < a.shape[axis] {
                let mut src = 0;
                for d in 0..shape.len() {
                    let i = if d == axis { along } else { idx[d] };
                    src = src * a.shape[d] + i;
                }
                *slot = a.data[src];
                break;
            }
            along -= a.shape[axis];
        }
    }
    Arr::new(shape, out)
}

/// Per-sample cross-entropies `log Σ exp(z) - z_label`.
pub fn ref_cross_entropies(logits: &Arr, labels: &[usize]) -> Vec<f64> {
    let k = logits.shape[1];
    logits
        .data
        .chunks(k)
        .zip(labels)
        .map(|(row, &l)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[l]
        })
        .collect()
}

pub fn ref_softmax_ce(logits: &Arr, labels: &[usize]) -> Arr {
    let ces = ref_cross_entropies(logits, labels);
    Arr::new(vec![], vec![ces.iter().sum::<f64>() / ces.len() as f64])
}

pub fn ref_shortcut(x: &Arr, stride: usize, out_channels: usize) -> Arr {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut out = vec![0.0; n * out_channels * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    out[((b * out_channels + ch) * oh + i) * ow + j] =
                        x.data[((b * c + ch) * h + i * stride) * w + j * stride];
                }
            }
        }
    }
    Arr::new(vec![n, out_channels, oh, ow], out)
}

// ---------- gradient check ----------

pub const FD_STEP: f64 = 1e-3;

/// Compares the tape's vector-Jacobian product against central finite
/// differences of an f64 reference forward.
///
/// A random cotangent `r` (shaped like the output) is seeded into the tape;
/// the numerical gradient of `Σ r·reference(inputs)` is taken with step
/// [`FD_STEP`]. For each differentiated input the error is
/// `max|analytic - numeric| / max|numeric|` (the denominator floored at
/// 1e-6); the worst input's error is returned.
pub fn grad_check(
    inputs: &[Arr],
    differentiate: &[usize],
    on_tape: impl Fn(&mut Tape, &[Var]) -> Var,
    reference: impl Fn(&[Arr]) -> Arr,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, a)| tape.leaf(a.to_tensor(), differentiate.contains(&i)))
        .collect();
    let out = on_tape(&mut tape, &vars);
    let out_shape = tape.shape(out).to_vec();
    let cot = Arr::random(out_shape.clone(), 1.0, rng);
    tape.backward_with(out, cot.to_tensor()).unwrap();

    let objective = |xs: &[Arr]| -> f64 {
        let y = reference(xs);
        assert_eq!(y.shape, out_shape, "reference output shape");
        y.data.iter().zip(&cot.data).map(|(a, b)| a * b).sum()
    };

    let mut worst = 0.0f64;
    for &i in differentiate {
        let analytic = tape
            .grad(vars[i])
            .map(|g| g.data().iter().map(|&v| v as f64).collect::<Vec<_>>())
            .unwrap_or_else(|| vec![0.0; inputs[i].data.len()]);
        let mut xs = inputs.to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].data.len() {
            let orig = xs[i].data[j];
            xs[i].data[j] = orig + FD_STEP;
            let plus = objective(&xs);
            xs[i].data[j] = orig - FD_STEP;
            let minus = objective(&xs);
            xs[i].data[j] = orig;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
        let err = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        worst = worst.max(err / scale);
    }
    worst
}

// ---------- statistics ----------

/// Two-sided 99% normal-approximation interval for a binomial proportion.
pub fn binomial_ci99(p: f64, n: usize) -> (f64, f64) {
    let half = 2.5758 * (p * (1.0 - p) / n as f64).sqrt();
    (p - half, p + half)
}

/// Worst grad-check error per op over `instances` random cases each.
pub fn grad_check_suite(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    use patchrot::tensor::{BatchNormMode, Padding};

    let mut r = rng(seed);
    let mut results = Vec::new();
    let mut run = |name: &'static str, case: &mut dyn FnMut(&mut ChaCha8Rng) -> f64| {
        let worst = (0..instances).map(|_| case(&mut r)).fold(0.0f64, f64::max);
        results.push((name, worst));
    };

    run("add", &mut |r| {
        let s = vec![r.gen_range(1..5), r.gen_range(1..6)];
        let xs = [Arr::random(s.clone(), 1.0, r), Arr::random(s, 1.0, r)];
        grad_check(&xs, &[0, 1], |t, v| t.add(v[0], v[1]).unwrap(), |a| ref_add(&a[0], &a[1]), r)
    });
    run("mul", &mut |r| {
        let s = vec![r.gen_range(1..5), r.gen_range(1..6)];
        let xs = [Arr::random(s.clone(), 1.0, r), Arr::random(s, 1.0, r)];
        grad_check(&xs, &[0, 1], |t, v| t.mul(v[0], v[1]).unwrap(), |a| ref_mul(&a[0], &a[1]), r)
    });
    run("matmul", &mut |r| {
        let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..6), r.gen_range(1..5));
        let xs = [Arr::random(vec![m, k], 1.0, r), Arr::random(vec![k, n], 1.0, r)];
        grad_check(&xs, &[0, 1], |t, v| t.matmul(v[0], v[1]).unwrap(), |a| ref_matmul(&a[0], &a[1]), r)
    });
    run("sum", &mut |r| {
        let s: Vec<usize> = (0..r.gen_range(1..4)).map(|_| r.gen_range(1..4)).collect();
        let xs = [Arr::random(s, 1.0, r)];
        grad_check(&xs, &[0], |t, v| t.sum(v[0]).unwrap(), |a| ref_sum(&a[0]), r)
    });
    run("relu", &mut |r| {
        let s = vec![r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..5)];
        let xs = [Arr::random_away_from_zero(s, 0.05, r)];
        grad_check(&xs, &[0], |t, v| t.relu(v[0]).unwrap(), |a| ref_relu(&a[0]), r)
    });
    run("conv2d", &mut |r| {
        let (n, c, o) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
        let (h, w) = (r.gen_range(3..7), r.gen_range(3..7));
        let k = if r.gen::<bool>() { 3 } else { 1 };
        let stride = r.gen_range(1..3);
        let padding = if r.gen::<bool>() { Padding::Same } else { Padding::Valid };
        let pad = if padding == Padding::Same { k / 2 } else { 0 };
        let xs = [
            Arr::random(vec![n, c, h, w], 1.0, r),
            Arr::random(vec![o, c, k, k], 1.0, r),
        ];
        grad_check(
            &xs,
            &[0, 1],
            |t, v| t.conv2d(v[0], v[1], stride, padding).unwrap(),
            |a| ref_conv2d(&a[0], &a[1], stride, pad),
            r,
        )
    });
    run("batch_norm2d (train)", &mut |r| {
        let (n, c) = (r.gen_range(2..4), r.gen_range(1..4));
        let (h, w) = (r.gen_range(2..4), r.gen_range(2..4));
        let xs = [
            Arr::random(vec![n, c, h, w], 1.0, r),
            Arr::random(vec![c], 1.0, r),
            Arr::random(vec![c], 1.0, r),
        ];
        grad_check(
            &xs,
            &[0, 1, 2],
            |t, v| t.batch_norm2d(v[0], v[1], v[2], BatchNormMode::Train, 1e-5).unwrap().0,
            |a| ref_batch_norm(&a[0], &a[1], &a[2], None, 1e-5),
            r,
        )
    });
    run("batch_norm2d (eval)", &mut |r| {
        let (n, c) = (r.gen_range(1..4), r.gen_range(1..4));
        let (h, w) = (r.gen_range(1..4), r.gen_range(1..4));
        let mean: Vec<f32> = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
        let var: Vec<f32> = (0..c).map(|_| r.gen_range(0.2..2.0)).collect();
        let (m64, v64): (Vec<f64>, Vec<f64>) =
            (mean.iter().map(|&v| v as f64).collect(), var.iter().map(|&v| v as f64).collect());
        let xs = [
            Arr::random(vec![n, c, h, w], 1.0, r),
            Arr::random(vec![c], 1.0, r),
            Arr::random(vec![c], 1.0, r),
        ];
        grad_check(
            &xs,
            &[0, 1, 2],
            |t, v| {
                let mode = BatchNormMode::Eval { mean: &mean, var: &var };
                t.batch_norm2d(v[0], v[1], v[2], mode, 1e-5).unwrap().0
            },
            |a| ref_batch_norm(&a[0], &a[1], &a[2], Some((&m64, &v64)), 1e-5),
            r,
        )
    });
    run("global_avg_pool", &mut |r| {
        let s = vec![r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..5)];
        let xs = [Arr::random(s, 1.0, r)];
        grad_check(&xs, &[0], |t, v| t.global_avg_pool(v[0]).unwrap(), |a| ref_global_avg_pool(&a[0]), r)
    });
    run("linear", &mut |r| {
        let (n, i, o) = (r.gen_range(1..5), r.gen_range(1..6), r.gen_range(1..5));
        let xs = [
            Arr::random(vec![n, i], 1.0, r),
            Arr::random(vec![o, i], 1.0, r),
            Arr::random(vec![o], 1.0, r),
        ];
        grad_check(
            &xs,
            &[0, 1, 2],
            |t, v| t.linear(v[0], v[1], v[2]).unwrap(),
            |a| ref_linear(&a[0], &a[1], &a[2]),
            r,
        )
    });
    run("concat", &mut |r| {
        let rank = r.gen_range(2..5);
        let axis = r.gen_range(0..rank);
        let base: Vec<usize> = (0..rank).map(|_| r.gen_range(1..4)).collect();
        let parts = r.gen_range(2..4);
        let xs: Vec<Arr> = (0..parts)
            .map(|_| {
                let mut s = base.clone();
                s[axis] = r.gen_range(1..4);
                Arr::random(s, 1.0, r)
            })
            .collect();
        let all: Vec<usize> = (0..parts).collect();
        grad_check(
            &xs,
            &all,
            |t, v| t.concat(v, axis).unwrap(),
            |a| ref_concat(&a.iter().collect::<Vec<_>>(), axis),
            r,
        )
    });
    run("softmax_cross_entropy", &mut |r| {
        let (n, k) = (r.gen_range(1..6), r.gen_range(2..9));
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let xs = [Arr::random(vec![n, k], 3.0, r)];
        grad_check(
            &xs,
            &[0],
            |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap(),
            |a| ref_softmax_ce(&a[0], &labels),
            r,
        )
    });
    run("shortcut", &mut |r| {
        let (n, c) = (r.gen_range(1..3), r.gen_range(1..4));
        let (h, w) = (r.gen_range(1..6), r.gen_range(1..6));
        let stride = r.gen_range(1..3);
        let out_c = c + r.gen_range(0..4);
        let xs = [Arr::random(vec![n, c, h, w], 1.0, r)];
        grad_check(
            &xs,
            &[0],
            |t, v| t.shortcut(v[0], stride, out_c).unwrap(),
            |a| ref_shortcut(&a[0], stride, out_c),
            r,
        )
    });
    results
}

// ---------- pretext loss ----------

pub fn stack_images<'a>(imgs: impl Iterator<Item = &'a Image>) -> Tensor {
    let imgs: Vec<&Image> = imgs.collect();
    let (c, h, w) = (imgs[0].channels(), imgs[0].height(), imgs[0].width());
    let data = imgs.iter().flat_map(|i| i.to_planar()).collect();
    Tensor::new(vec![imgs.len(), c, h, w], data).unwrap()
}

/// Epoch-0 loss when the whole epoch fits in one batch: a fresh model built
/// from `seed`, one train-mode forward, and per-item cross-entropies averaged
/// in f64. Returns the loss and the item count.
pub fn first_epoch_loss_oracle(
    images: &[Image],
    variant: patchrot::pretext::TaskVariant,
    pretext: &patchrot::pretext::PretextConfig,
    spec: patchrot::models::EncoderSpec,
    seed: u64,
) -> (f64, usize) {
    use patchrot::models::{HeadKind, Mode, ModelInput, PretextModel};
    use patchrot::pretext::{build_epoch, PretextBatch};

    let model = PretextModel::new(spec, HeadKind::for_variant(variant), seed).unwrap();
    let mut stream = build_epoch(images, variant, pretext, 0, usize::MAX).unwrap();
    let batch = stream.next().unwrap().unwrap();
    assert!(stream.next().is_none());
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, false);
    let input = match &batch {
        PretextBatch::Samples(s) => ModelInput::Single(tape.constant(stack_images(s.iter().map(|s| &s.image)))),
        PretextBatch::Pairs(p) => ModelInput::Pair(
            tape.constant(stack_images(p.iter().map(|p| &p.image_a))),
            tape.constant(stack_images(p.iter().map(|p| &p.image_b))),
        ),
    };
    let pass = model.forward(&mut tape, &binding, input, Mode::Train).unwrap();
    let labels = batch.labels();
    let ces = ref_cross_entropies(&Arr::from_tensor(tape.value(pass.logits)), &labels);
    (ces.iter().sum::<f64>() / ces.len() as f64, ces.len())
}
