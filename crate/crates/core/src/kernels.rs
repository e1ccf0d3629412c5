//! Slice-level numeric kernels shared by the differentiable ops.
//!
//! Every reduction runs in a fixed order so results are bit-reproducible.

/// `c += a · b` for row-major `a: [m,k]`, `b: [k,n]`, `c: [m,n]`.
///
/// Each output element accumulates its `k` products in ascending `k` order,
/// exactly like the textbook triple loop.
pub fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Output size `⌊(H + 2·pad − k)/stride⌋ + 1`, or `None` when the division
    /// leaves a remainder larger than the padding, i.e. real input pixels
    /// would never be visited.
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let span_h = (h + 2 * pad).checked_sub(kh)?;
        let span_w = (w + 2 * pad).checked_sub(kw)?;
        if stride == 0 || span_h % stride > pad || span_w % stride > pad {
            return None;
        }
        Some(ConvGeom {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            h_out: span_h / stride + 1,
            w_out: span_w / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds `input: [C,H,W]` into `[C·kh·kw, H'·W']` patch columns.
pub fn im2col(g: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let hw_out = g.out_len();
    let mut cols = vec![0.0; g.patch_len() * hw_out];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &input[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.w_out + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds patch columns back, summing overlaps.
pub fn col2im(g: &ConvGeom, cols: &[f64]) -> Vec<f64> {
    let hw_out = g.out_len();
    let mut out = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut out[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Non-overlapping `k×k` max pooling over `[C,H,W]`. Returns the pooled values
/// and, per output, the flat input index of the first maximum in row-major
/// window order.
pub fn max_pool(c: usize, h: usize, w: usize, k: usize, input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / k, w / k);
    let mut vals = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_ix = usize::MAX;
                for dy in 0..k {
                    for dx in 0..k {
                        let ix = (ch * h + oy * k + dy) * w + ox * k + dx;
                        if input[ix] > best || best_ix == usize::MAX {
                            best = input[ix];
                            best_ix = ix;
                        }
                    }
                }
                vals.push(best);
                arg.push(best_ix);
            }
        }
    }
    (vals, arg)
}

pub fn avg_pool(c: usize, h: usize, w: usize, k: usize, input: &[f64]) -> Vec<f64> {
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        s += input[(ch * h + oy * k + dy) * w + ox * k + dx];
                    }
                }
                out.push(s * inv);
            }
        }
    }
    out
}

pub fn avg_pool_backward(c: usize, h: usize, w: usize, k: usize, grad_out: &[f64]) -> Vec<f64> {
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut g = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let go = grad_out[(ch * ho + oy) * wo + ox] * inv;
                for dy in 0..k {
                    for dx in 0..k {
                        g[(ch * h + oy * k + dy) * w + ox * k + dx] += go;
                    }
                }
            }
        }
    }
    g
}

/// Source taps `(i0, i1, frac)` for one axis of bilinear upsampling by an
/// integer factor, half-pixel (align-corners-false) convention.
pub fn bilinear_taps(len_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len_in - 1);
            let i1 = if i0 + 1 < len_in { i0 + 1 } else { i0 };
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear(c: usize, h: usize, w: usize, factor: usize, input: &[f64]) -> Vec<f64> {
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                out[(ch * ho + oy) * wo + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward(
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
    grad_out: &[f64],
) -> Vec<f64> {
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let (ho, wo) = (h * factor, w * factor);
    let mut g = vec![0.0; c * h * w];
    for ch in 0..c {
        let dst = &mut g[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let go = grad_out[(ch * ho + oy) * wo + ox];
                dst[y0 * w + x0] += go * (1.0 - ly) * (1.0 - lx);
                dst[y0 * w + x1] += go * (1.0 - ly) * lx;
                dst[y1 * w + x0] += go * ly * (1.0 - lx);
                dst[y1 * w + x1] += go * ly * lx;
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_roundtrip() {
        let a: Vec<f64> = (0..6).map(f64::from).collect();
        let t = transpose(2, 3, &a);
        assert_eq!(t, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(transpose(3, 2, &t), a);
    }

    #[test]
    fn conv_geometry() {
        let g = ConvGeom::new(1, 8, 8, 3, 3, 2, 1).unwrap();
        assert_eq!((g.h_out, g.w_out), (4, 4));
        assert!(ConvGeom::new(1, 8, 8, 3, 3, 4, 1).is_none());
        assert!(ConvGeom::new(1, 8, 8, 2, 2, 4, 0).is_none());
        assert!(ConvGeom::new(1, 1, 1, 5, 5, 1, 0).is_none());
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom::new(2, 5, 4, 3, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.patch_len() * g.out_len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = im2col(&g, &x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&g, &y)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn upsample_adjoint() {
        let x: Vec<f64> = (0..2 * 3 * 2).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..2 * 9 * 6).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = upsample_bilinear(2, 3, 2, 3, &x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x
            .iter()
            .zip(upsample_bilinear_backward(2, 3, 2, 3, &y))
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
