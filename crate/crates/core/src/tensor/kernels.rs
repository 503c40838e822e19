//! Numeric kernels behind the tape ops. Every reduction runs in a fixed
//! order so that identical inputs give bit-identical outputs.

/// `c = a·b` (or `c += a·b` when `accumulate`), with optional transposes.
///
/// `a` is `m×k` after transposition, `b` is `k×n`, `c` is `m×n`, all
/// row-major and contiguous in their stored orientation.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths were checked against the strides above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad)
        .checked_sub(kernel)
        .map(|span| span / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Output columns `oj` whose input column `oj·stride + k - pad` lies inside
/// `0..w`, as a half-open range.
fn valid_range(out: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = (w + pad).saturating_sub(k).div_ceil(stride).min(out);
    (lo.min(hi), hi)
}

/// Unfolds `x` (N×C×H×W) into a `(C·kh·kw) × (N·oh·ow)` column matrix.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let cols = g.cols();
    let plane = g.oh * g.ow;
    let mut out = vec![0.0f32; g.rows() * cols];
    for c in 0..g.c {
        for ki in 0..g.kh {
            let (ilo, ihi) = valid_range(g.oh, g.h, ki, g.stride, g.pad);
            for kj in 0..g.kw {
                let (jlo, jhi) = valid_range(g.ow, g.w, kj, g.stride, g.pad);
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * plane..(n + 1) * plane];
                    for oi in ilo..ihi {
                        let ii = oi * g.stride + ki - g.pad;
                        let src_row = &src[ii * g.w..(ii + 1) * g.w];
                        let d = &mut dst[oi * g.ow + jlo..oi * g.ow + jhi];
                        let j0 = jlo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            d.copy_from_slice(&src_row[j0..j0 + d.len()]);
                        } else {
                            for (t, v) in d.iter_mut().enumerate() {
                                *v = src_row[j0 + t * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an N×C×H×W buffer.
pub(crate) fn col2im(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let cols = g.cols();
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.kh {
            let (ilo, ihi) = valid_range(g.oh, g.h, ki, g.stride, g.pad);
            for kj in 0..g.kw {
                let (jlo, jhi) = valid_range(g.ow, g.w, kj, g.stride, g.pad);
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &col[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let src = &src_row[n * plane..(n + 1) * plane];
                    for oi in ilo..ihi {
                        let ii = oi * g.stride + ki - g.pad;
                        let dst_row = &mut dst[ii * g.w..(ii + 1) * g.w];
                        let s = &src[oi * g.ow + jlo..oi * g.ow + jhi];
                        let j0 = jlo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            for (d, &v) in dst_row[j0..j0 + s.len()].iter_mut().zip(s) {
                                *d += v;
                            }
                        } else {
                            for (t, &v) in s.iter().enumerate() {
                                dst_row[j0 + t * g.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[O, N·P]` -> `[N, O, P]`.
pub(crate) fn channel_major_to_batch(src: &[f32], o: usize, n: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0.0; src.len()];
    for oc in 0..o {
        for b in 0..n {
            let s = &src[(oc * n + b) * p..(oc * n + b + 1) * p];
            out[(b * o + oc) * p..(b * o + oc + 1) * p].copy_from_slice(s);
        }
    }
    out
}

/// `[N, O, P]` -> `[O, N·P]`.
pub(crate) fn batch_to_channel_major(src: &[f32], o: usize, n: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0.0; src.len()];
    for b in 0..n {
        for oc in 0..o {
            let s = &src[(b * o + oc) * p..(b * o + oc + 1) * p];
            out[(oc * n + b) * p..(oc * n + b + 1) * p].copy_from_slice(s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i % 7) as f32 - 3.0).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, false);
        for i in 0..m {
            for j in 0..n {
                let want: f32 = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
                assert_eq!(c[i * n + j], want);
            }
        }
        // transposed operands: a^T stored as k×m, b^T stored as n×k
        let at: Vec<f32> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let bt: Vec<f32> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut c2, false);
        assert_eq!(c, c2);
    }

    #[test]
    fn output_sizes() {
        assert_eq!(conv_output_size(32, 3, 1, 1), Some(32));
        assert_eq!(conv_output_size(32, 3, 2, 1), Some(16));
        assert_eq!(conv_output_size(7, 3, 2, 1), Some(4));
        assert_eq!(conv_output_size(3, 3, 1, 0), Some(1));
        assert_eq!(conv_output_size(2, 3, 1, 0), None);
    }

    #[test]
    fn layout_round_trip() {
        let src: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let b = channel_major_to_batch(&src, 2, 3, 4);
        assert_eq!(batch_to_channel_major(&b, 2, 3, 4), src);
    }

    fn naive_col(x: &[f32], g: &ConvGeom, row: usize, col: usize) -> f32 {
        let (c, k) = (row / (g.kh * g.kw), row % (g.kh * g.kw));
        let (ki, kj) = (k / g.kw, k % g.kw);
        let (n, p) = (col / (g.oh * g.ow), col % (g.oh * g.ow));
        let ii = (p / g.ow * g.stride + ki) as isize - g.pad as isize;
        let jj = (p % g.ow * g.stride + kj) as isize - g.pad as isize;
        if ii < 0 || jj < 0 || ii >= g.h as isize || jj >= g.w as isize {
            return 0.0;
        }
        x[((n * g.c + c) * g.h + ii as usize) * g.w + jj as usize]
    }

    proptest::proptest! {
        #[test]
        fn unfold_matches_index_oracle(
            n in 1usize..3, c in 1usize..3, h in 1usize..7, w in 1usize..7,
            k in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed in 0u32..1000,
        ) {
            let (Some(oh), Some(ow)) = (conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)) else {
                return Ok(());
            };
            let g = ConvGeom { n, c, h, w, kh: k, kw: k, stride, pad, oh, ow };
            let x: Vec<f32> = (0..n * c * h * w).map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 97) as f32).collect();
            let col = im2col(&x, &g);
            for r in 0..g.rows() {
                for q in 0..g.cols() {
                    proptest::prop_assert_eq!(col[r * g.cols() + q], naive_col(&x, &g, r, q));
                }
            }
            // adjoint: <im2col(x), y> == <x, col2im(y)>, exact on small integers
            let y: Vec<f32> = (0..col.len()).map(|i| (((i as u32).wrapping_mul(40503) ^ seed) % 13) as f32).collect();
            let mut dx = vec![0.0; x.len()];
            col2im(&y, &g, &mut dx);
            let lhs: f64 = col.iter().zip(&y).map(|(a, b)| (a * b) as f64).sum();
            let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| (a * b) as f64).sum();
            proptest::prop_assert_eq!(lhs, rhs);
        }
    }
}
