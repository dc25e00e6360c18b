//! Plain-slice compute kernels behind the differentiable ops.
//!
//! Every kernel works on one image (or one vector) at a time so batched and
//! unbatched callers go through identical arithmetic.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Geometry of one stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.padding + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.padding + 1 - self.kw
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kh > self.h + 2 * self.padding {
            return Err(Error::shape(
                "conv2d",
                "kernel height",
                format!("kH={} exceeds H+2p={}", self.kh, self.h + 2 * self.padding),
            ));
        }
        if self.kw > self.w + 2 * self.padding {
            return Err(Error::shape(
                "conv2d",
                "kernel width",
                format!("kW={} exceeds W+2p={}", self.kw, self.w + 2 * self.padding),
            ));
        }
        Ok(())
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, input: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    let mut cols = vec![T::zero(); g.patch_len() * hw];
    let pad = g.padding as isize;
    for ci in 0..g.c_in {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let iy = oy as isize + ki as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = ox as isize + kj as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(g: &ConvGeometry, cols: &[T], grad_input: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    let pad = g.padding as isize;
    for ci in 0..g.c_in {
        let plane = &mut grad_input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let iy = oy as isize + ki as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = ox as isize + kj as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of one `[C_in,H,W]` image; returns `[C_out,H',W']`.
pub fn conv2d_image<T: Scalar>(g: &ConvGeometry, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let cols = im2col(g, input);
    let hw = g.out_len();
    let k = g.patch_len();
    let mut out = vec![T::zero(); g.c_out * hw];
    T::gemm(
        g.c_out, k, hw, kernel, k as isize, 1, &cols, hw as isize, 1, &mut out, hw as isize, 1, false,
    );
    for (co, row) in out.chunks_exact_mut(hw).enumerate() {
        let b = bias[co];
        row.iter_mut().for_each(|v| *v += b);
    }
    out
}

/// Accumulates the gradients of one image's convolution.
/// `grad_input` is skipped when `None`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_image_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    grad_input: Option<&mut [T]>,
    grad_kernel: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let hw = g.out_len();
    let k = g.patch_len();
    if let Some(gk) = grad_kernel {
        let cols = im2col(g, input);
        // dK[C_out, K] += dY[C_out, HW] · colsᵀ[HW, K]
        T::gemm(g.c_out, hw, k, grad_out, hw as isize, 1, &cols, 1, hw as isize, gk, k as isize, 1, true);
    }
    if let Some(gb) = grad_bias {
        for (co, row) in grad_out.chunks_exact(hw).enumerate() {
            let mut s = T::zero();
            for &v in row {
                s += v;
            }
            gb[co] += s;
        }
    }
    if let Some(gi) = grad_input {
        // dcols[K, HW] = Kᵀ[K, C_out] · dY[C_out, HW]
        let mut dcols = vec![T::zero(); k * hw];
        T::gemm(k, g.c_out, hw, kernel, 1, k as isize, grad_out, hw as isize, 1, &mut dcols, hw as isize, 1, false);
        col2im_add(g, &dcols, gi);
    }
}

/// 2×2 max pooling of one `[C,H,W]` image. Returns the pooled values and
/// the flat input index of each window's maximum (first in row-major scan
/// order on ties).
pub fn maxpool2x2_image<T: Scalar>(c: usize, h: usize, w: usize, input: &[T]) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = input[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}

/// `out[o] = Σ_i W[o,i]·x[i] (+ b[o])`, summed in index order.
pub fn matvec<T: Scalar>(weight: &[T], n_out: usize, n_in: usize, x: &[T], bias: Option<&[T]>, out: &mut [T]) {
    for o in 0..n_out {
        let row = &weight[o * n_in..(o + 1) * n_in];
        let mut acc = T::zero();
        for (&wv, &xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        out[o] = match bias {
            Some(b) => acc + b[o],
            None => acc,
        };
    }
}

/// Channel offsets for a temporal shift: `(forward, backward)` counts.
pub fn shift_channels(channels: usize, fraction: f64) -> (usize, usize) {
    let c = (channels as f64 * fraction).floor() as usize;
    let c_fwd = c.min(channels);
    let c_bwd = c.min(channels - c_fwd);
    (c_fwd, c_bwd)
}

/// Source time step for element `(t, c)` of a shifted map, or `None` when
/// the slot is zero-filled.
#[inline]
pub(crate) fn shift_source(t: usize, c: usize, steps: usize, c_fwd: usize, c_bwd: usize) -> Option<usize> {
    if steps == 1 {
        return Some(t);
    }
    if c < c_fwd {
        t.checked_sub(1)
    } else if c < c_fwd + c_bwd {
        (t + 1 < steps).then_some(t + 1)
    } else {
        Some(t)
    }
}

/// Temporal shift of a `[T,C,H,W]` feature map.
///
/// Channels `[0, c)` take their values from `t-1`, channels `[c, 2c)` from
/// `t+1`, with `c = ⌊C·fraction⌋` and zero fill at the sequence ends. A
/// single-step map is returned unchanged.
pub fn temporal_shift<T: Scalar>(fmap: &Tensor<T>, fraction: f64) -> Result<Tensor<T>> {
    if fmap.rank() != 4 {
        return Err(Error::shape("temporal_shift", "rank", format!("expected [T,C,H,W], got {:?}", fmap.shape())));
    }
    if !(0.0..=0.5).contains(&fraction) {
        return Err(Error::invalid(format!("temporal shift fraction {fraction} outside [0, 0.5]")));
    }
    let c = fmap.shape()[1];
    let (c_fwd, c_bwd) = shift_channels(c, fraction);
    Ok(shift_with(fmap, c_fwd, c_bwd))
}

pub(crate) fn shift_with<T: Scalar>(fmap: &Tensor<T>, c_fwd: usize, c_bwd: usize) -> Tensor<T> {
    let s = fmap.shape();
    let (steps, c, plane) = (s[0], s[1], s[2] * s[3]);
    let src = fmap.data();
    let mut out = vec![T::zero(); src.len()];
    for t in 0..steps {
        for ch in 0..c {
            if let Some(ts) = shift_source(t, ch, steps, c_fwd, c_bwd) {
                let d = (t * c + ch) * plane;
                let o = (ts * c + ch) * plane;
                out[d..d + plane].copy_from_slice(&src[o..o + plane]);
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeometry, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.c_out * oh * ow];
        for co in 0..g.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias[co];
                    for ci in 0..g.c_in {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let iy = oy as isize + ki as isize - g.padding as isize;
                                let ix = ox as isize + kj as isize - g.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    s += input[(ci * g.h + iy as usize) * g.w + ix as usize]
                                        * kernel[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let g = ConvGeometry { c_in: 2, h: 5, w: 4, c_out: 3, kh: 3, kw: 3, padding: 1 };
        let input: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let kernel: Vec<f64> = (0..54).map(|i| ((i * 5) % 13) as f64 * 0.1 - 0.6).collect();
        let bias = [0.5, -1.0, 2.0];
        let fast = conv2d_image(&g, &input, &kernel, &bias);
        let slow = naive_conv(&g, &input, &kernel, &bias);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_ties_pick_first_in_scan_order() {
        let (out, arg) = maxpool2x2_image(1, 2, 2, &[3.0f32, 3.0, 3.0, 3.0]);
        assert_eq!(out, vec![3.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn shift_channel_counts() {
        assert_eq!(shift_channels(256, 1.0 / 8.0), (32, 32));
        assert_eq!(shift_channels(4, 0.25), (1, 1));
        assert_eq!(shift_channels(2, 0.5), (1, 1));
        assert_eq!(shift_channels(7, 0.0), (0, 0));
    }
}
