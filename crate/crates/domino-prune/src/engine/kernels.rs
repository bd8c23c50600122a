//! Layer computation kernels. Inner products accumulate in f64 and store
//! f32. Parallel loops split over disjoint output regions (batch items or
//! output channels) so results do not depend on the worker count.

use rayon::prelude::*;

use crate::graph::GroupMapping;

pub const BN_EPS: f32 = 1e-5;

#[inline]
fn idx4(c: usize, y: usize, x: usize, ch: usize, h: usize, w: usize) -> usize {
    debug_assert!(c < ch && y < h);
    (c * h + y) * w + x
}

pub struct ConvShape {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub mapping: GroupMapping,
}

impl ConvShape {
    fn m_in(&self) -> usize {
        self.in_c / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_c / self.groups
    }

    fn in_channel(&self, group: usize, slot: usize) -> usize {
        self.mapping.channel_of(group, slot, self.m_in(), self.groups)
    }
}

/// Valid `ox` range such that `ox*stride + k - pad` stays inside `[0, in)`.
#[inline]
fn ox_bounds(out: usize, in_: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let max_i = in_ + pad;
    let hi = if max_i > k {
        ((max_i - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(out), hi)
}

/// Grouped 2-D convolution. `x` is `[n, in_c, in_h, in_w]`, `weight` is
/// `[out_c, m_in, k, k]`, output `[n, out_c, out_h, out_w]`.
///
/// Accumulates one output row at a time in f64; the per-position
/// accumulators are independent, so the summation order of each output
/// element never depends on vector width or thread count.
pub fn conv2d_forward(
    x: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
    out: &mut [f32],
    n: usize,
    s: &ConvShape,
) {
    let in_plane = s.in_c * s.in_h * s.in_w;
    let out_plane = s.out_c * s.out_h * s.out_w;
    debug_assert_eq!(out.len(), n * out_plane);
    let m_in = s.m_in();
    let kk = s.kernel * s.kernel;
    out.par_chunks_mut(out_plane).enumerate().for_each(|(item, out_item)| {
        let x_item = &x[item * in_plane..(item + 1) * in_plane];
        let mut acc_row = vec![0.0f64; s.out_w];
        for o in 0..s.out_c {
            let group = o / s.out_per_group();
            let w_row = &weight[o * m_in * kk..(o + 1) * m_in * kk];
            let b = bias.map_or(0.0f64, |b| b[o] as f64);
            for oy in 0..s.out_h {
                acc_row.fill(b);
                for slot in 0..m_in {
                    let c = s.in_channel(group, slot);
                    for ky in 0..s.kernel {
                        let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                        if iy < 0 || iy >= s.in_h as isize {
                            continue;
                        }
                        let x_row = &x_item[(c * s.in_h + iy as usize) * s.in_w..][..s.in_w];
                        let w_k = &w_row[(slot * s.kernel + ky) * s.kernel..][..s.kernel];
                        if s.kernel == 3 && s.stride == 1 && s.pad == 1 && s.out_w == s.in_w && s.in_w >= 2
                        {
                            // fused 3-tap path
                            let (w0, w1, w2) = (w_k[0] as f64, w_k[1] as f64, w_k[2] as f64);
                            let w_end = s.in_w - 1;
                            acc_row[0] += w1 * x_row[0] as f64 + w2 * x_row[1] as f64;
                            for ox in 1..w_end {
                                acc_row[ox] += w0 * x_row[ox - 1] as f64
                                    + w1 * x_row[ox] as f64
                                    + w2 * x_row[ox + 1] as f64;
                            }
                            if w_end > 0 {
                                acc_row[w_end] +=
                                    w0 * x_row[w_end - 1] as f64 + w1 * x_row[w_end] as f64;
                            }
                            continue;
                        }
                        for (kx, &wv) in w_k.iter().enumerate() {
                            let (lo, hi) = ox_bounds(s.out_w, s.in_w, s.stride, kx, s.pad);
                            if lo >= hi {
                                continue;
                            }
                            let wv = wv as f64;
                            if s.stride == 1 {
                                let base = lo + kx - s.pad;
                                for (a, &xv) in acc_row[lo..hi]
                                    .iter_mut()
                                    .zip(&x_row[base..base + (hi - lo)])
                                {
                                    *a += wv * xv as f64;
                                }
                            } else {
                                for (ox, a) in acc_row[lo..hi].iter_mut().enumerate() {
                                    let ix = (lo + ox) * s.stride + kx - s.pad;
                                    *a += wv * x_row[ix] as f64;
                                }
                            }
                        }
                    }
                }
                let out_row = &mut out_item[(o * s.out_h + oy) * s.out_w..][..s.out_w];
                for (o_val, &a) in out_row.iter_mut().zip(acc_row.iter()) {
                    *o_val = a as f32;
                }
            }
        }
    });
}

/// Gradient w.r.t. conv weights and bias.
pub fn conv2d_backward_weights(
    x: &[f32],
    grad_out: &[f32],
    grad_w: &mut [f32],
    grad_b: Option<&mut [f32]>,
    n: usize,
    s: &ConvShape,
) {
    let in_plane = s.in_c * s.in_h * s.in_w;
    let out_plane = s.out_c * s.out_h * s.out_w;
    let m_in = s.m_in();
    let kk = s.kernel * s.kernel;
    grad_w
        .par_chunks_mut(m_in * kk)
        .enumerate()
        .for_each(|(o, gw_row)| {
            let group = o / s.out_per_group();
            let mut acc_k = vec![0.0f64; s.kernel];
            for slot in 0..m_in {
                let c = s.in_channel(group, slot);
                for ky in 0..s.kernel {
                    acc_k.fill(0.0);
                    for item in 0..n {
                        let x_item = &x[item * in_plane..];
                        let g_item = &grad_out[item * out_plane..];
                        for oy in 0..s.out_h {
                            let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                            if iy < 0 || iy >= s.in_h as isize {
                                continue;
                            }
                            let x_row = &x_item[(c * s.in_h + iy as usize) * s.in_w..][..s.in_w];
                            let g_row = &g_item[(o * s.out_h + oy) * s.out_w..][..s.out_w];
                            for (ox, &g) in g_row.iter().enumerate() {
                                let g = g as f64;
                                let ix0 = (ox * s.stride) as isize - s.pad as isize;
                                // per-kx accumulators stay independent
                                for (kx, a) in acc_k.iter_mut().enumerate() {
                                    let ix = ix0 + kx as isize;
                                    if ix >= 0 && ix < s.in_w as isize {
                                        *a += g * x_row[ix as usize] as f64;
                                    }
                                }
                            }
                        }
                    }
                    for (kx, &a) in acc_k.iter().enumerate() {
                        gw_row[(slot * s.kernel + ky) * s.kernel + kx] = a as f32;
                    }
                }
            }
        });
    if let Some(gb) = grad_b {
        for (o, slot) in gb.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for item in 0..n {
                let g_item = &grad_out[item * out_plane..];
                for oy in 0..s.out_h {
                    for ox in 0..s.out_w {
                        acc += g_item[idx4(o, oy, ox, s.out_c, s.out_h, s.out_w)] as f64;
                    }
                }
            }
            *slot = acc as f32;
        }
    }
}

/// Gradient w.r.t. the conv input.
pub fn conv2d_backward_input(
    weight: &[f32],
    grad_out: &[f32],
    grad_in: &mut [f32],
    _n: usize,
    s: &ConvShape,
) {
    let in_plane = s.in_c * s.in_h * s.in_w;
    let out_plane = s.out_c * s.out_h * s.out_w;
    let m_in = s.m_in();
    let kk = s.kernel * s.kernel;
    let out_per_group = s.out_per_group();
    grad_in
        .par_chunks_mut(in_plane)
        .enumerate()
        .for_each(|(item, gi_item)| {
            let g_item = &grad_out[item * out_plane..(item + 1) * out_plane];
            let mut acc_row = vec![0.0f64; s.in_w];
            for c in 0..s.in_c {
                // which group reads channel c, and through which slot
                let (group, slot) = match s.mapping {
                    GroupMapping::Interleaved => (c / m_in, c % m_in),
                    GroupMapping::Blocked => (c % s.groups, c / s.groups),
                };
                for iy in 0..s.in_h {
                    acc_row.fill(0.0);
                    for og in 0..out_per_group {
                        let o = group * out_per_group + og;
                        let w_row = &weight[o * m_in * kk + slot * kk..][..kk];
                        for ky in 0..s.kernel {
                            let oy_num = iy as isize + s.pad as isize - ky as isize;
                            if oy_num < 0 || oy_num % s.stride as isize != 0 {
                                continue;
                            }
                            let oy = (oy_num / s.stride as isize) as usize;
                            if oy >= s.out_h {
                                continue;
                            }
                            let g_row = &g_item[(o * s.out_h + oy) * s.out_w..][..s.out_w];
                            for kx in 0..s.kernel {
                                let wv = w_row[ky * s.kernel + kx] as f64;
                                let (lo, hi) = ox_bounds(s.out_w, s.in_w, s.stride, kx, s.pad);
                                if lo >= hi {
                                    continue;
                                }
                                if s.stride == 1 {
                                    // ix = ox + kx - pad over the valid span
                                    let base = lo + kx - s.pad;
                                    for (a, &g) in acc_row[base..base + (hi - lo)]
                                        .iter_mut()
                                        .zip(&g_row[lo..hi])
                                    {
                                        *a += wv * g as f64;
                                    }
                                } else {
                                    for (ox, &g) in g_row[lo..hi].iter().enumerate() {
                                        let ix = (lo + ox) * s.stride + kx - s.pad;
                                        acc_row[ix] += wv * g as f64;
                                    }
                                }
                            }
                        }
                    }
                    let gi_row = &mut gi_item[(c * s.in_h + iy) * s.in_w..][..s.in_w];
                    for (g_val, &a) in gi_row.iter_mut().zip(acc_row.iter()) {
                        *g_val = a as f32;
                    }
                }
            }
        });
}

/// Fully-connected forward: `x` `[n, in_f]`, `weight` `[out_f, in_f]`.
pub fn fc_forward(
    x: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
    out: &mut [f32],
    _n: usize,
    in_f: usize,
    out_f: usize,
) {
    out.par_chunks_mut(out_f).enumerate().for_each(|(item, out_item)| {
        let x_item = &x[item * in_f..(item + 1) * in_f];
        for o in 0..out_f {
            let mut acc = bias.map_or(0.0f64, |b| b[o] as f64);
            let w_row = &weight[o * in_f..(o + 1) * in_f];
            for (xv, wv) in x_item.iter().zip(w_row) {
                acc += *xv as f64 * *wv as f64;
            }
            out_item[o] = acc as f32;
        }
    });
}

pub fn fc_backward_weights(
    x: &[f32],
    grad_out: &[f32],
    grad_w: &mut [f32],
    grad_b: Option<&mut [f32]>,
    n: usize,
    in_f: usize,
    out_f: usize,
) {
    grad_w.par_chunks_mut(in_f).enumerate().for_each(|(o, gw_row)| {
        for (f, gw) in gw_row.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for item in 0..n {
                acc += grad_out[item * out_f + o] as f64 * x[item * in_f + f] as f64;
            }
            *gw = acc as f32;
        }
    });
    if let Some(gb) = grad_b {
        for (o, slot) in gb.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for item in 0..n {
                acc += grad_out[item * out_f + o] as f64;
            }
            *slot = acc as f32;
        }
    }
}

pub fn fc_backward_input(
    weight: &[f32],
    grad_out: &[f32],
    grad_in: &mut [f32],
    _n: usize,
    in_f: usize,
    out_f: usize,
) {
    grad_in.par_chunks_mut(in_f).enumerate().for_each(|(item, gi_item)| {
        let g_item = &grad_out[item * out_f..(item + 1) * out_f];
        for (f, gi) in gi_item.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for o in 0..out_f {
                acc += g_item[o] as f64 * weight[o * in_f + f] as f64;
            }
            *gi = acc as f32;
        }
    });
}

pub fn relu_forward(x: &[f32], out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if v > 0.0 { v } else { 0.0 };
    }
}

pub fn relu_backward(x: &[f32], grad_out: &[f32], grad_in: &mut [f32]) {
    for ((gi, &go), &v) in grad_in.iter_mut().zip(grad_out).zip(x) {
        *gi = if v > 0.0 { go } else { 0.0 };
    }
}

/// Inference-mode batch norm over channel planes of `[n, c, h, w]` (or
/// `[n, c]` with plane = 1). Zeroed (gamma, beta, mean) force an exactly
/// zero output for any finite input.
pub fn batchnorm_forward(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    out: &mut [f32],
    channels: usize,
    plane: usize,
) {
    let sample = channels * plane;
    for (o_item, x_item) in out.chunks_mut(sample).zip(x.chunks(sample)) {
        for c in 0..channels {
            let inv = 1.0 / (var[c] + BN_EPS).sqrt();
            let (g, b, m) = (gamma[c], beta[c], mean[c]);
            for p in 0..plane {
                o_item[c * plane + p] = (x_item[c * plane + p] - m) * inv * g + b;
            }
        }
    }
}

pub fn batchnorm_backward(
    x: &[f32],
    gamma: &[f32],
    mean: &[f32],
    var: &[f32],
    grad_out: &[f32],
    grad_in: &mut [f32],
    grad_gamma: &mut [f32],
    grad_beta: &mut [f32],
    channels: usize,
    plane: usize,
) {
    let sample = channels * plane;
    let n = x.len() / sample;
    for c in 0..channels {
        let inv = 1.0 / (var[c] + BN_EPS).sqrt();
        let (mut gg, mut gb) = (0.0f64, 0.0f64);
        for item in 0..n {
            for p in 0..plane {
                let i = item * sample + c * plane + p;
                let go = grad_out[i] as f64;
                gg += go * ((x[i] - mean[c]) * inv) as f64;
                gb += go;
                grad_in[i] = (go * (gamma[c] * inv) as f64) as f32;
            }
        }
        grad_gamma[c] = gg as f32;
        grad_beta[c] = gb as f32;
    }
}

pub fn bias_forward(x: &[f32], bias: &[f32], out: &mut [f32], channels: usize, plane: usize) {
    let sample = channels * plane;
    for (o_item, x_item) in out.chunks_mut(sample).zip(x.chunks(sample)) {
        for c in 0..channels {
            for p in 0..plane {
                o_item[c * plane + p] = x_item[c * plane + p] + bias[c];
            }
        }
    }
}

pub fn bias_backward(grad_out: &[f32], grad_b: &mut [f32], channels: usize, plane: usize) {
    let sample = channels * plane;
    let n = grad_out.len() / sample;
    for c in 0..channels {
        let mut acc = 0.0f64;
        for item in 0..n {
            for p in 0..plane {
                acc += grad_out[item * sample + c * plane + p] as f64;
            }
        }
        grad_b[c] = acc as f32;
    }
}

pub struct PoolShape {
    pub c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Max pool; out-of-bounds window cells are ignored (every window covers at
/// least one real cell).
pub fn maxpool_forward(x: &[f32], out: &mut [f32], n: usize, s: &PoolShape) {
    let in_plane = s.in_h * s.in_w;
    let out_plane = s.out_h * s.out_w;
    for item in 0..n {
        for c in 0..s.c {
            let x_map = &x[(item * s.c + c) * in_plane..][..in_plane];
            let o_map = &mut out[(item * s.c + c) * out_plane..][..out_plane];
            for oy in 0..s.out_h {
                for ox in 0..s.out_w {
                    let mut best = f32::NEG_INFINITY;
                    for ky in 0..s.kernel {
                        let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                        if iy < 0 || iy >= s.in_h as isize {
                            continue;
                        }
                        for kx in 0..s.kernel {
                            let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                            if ix < 0 || ix >= s.in_w as isize {
                                continue;
                            }
                            let v = x_map[iy as usize * s.in_w + ix as usize];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    o_map[oy * s.out_w + ox] = best;
                }
            }
        }
    }
}

/// Routes each output gradient to the first maximal input cell of its
/// window (same scan order as the forward pass).
pub fn maxpool_backward(x: &[f32], grad_out: &[f32], grad_in: &mut [f32], n: usize, s: &PoolShape) {
    let in_plane = s.in_h * s.in_w;
    let out_plane = s.out_h * s.out_w;
    grad_in.fill(0.0);
    for item in 0..n {
        for c in 0..s.c {
            let x_map = &x[(item * s.c + c) * in_plane..][..in_plane];
            let g_map = &grad_out[(item * s.c + c) * out_plane..][..out_plane];
            let gi_map = &mut grad_in[(item * s.c + c) * in_plane..][..in_plane];
            for oy in 0..s.out_h {
                for ox in 0..s.out_w {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = None;
                    for ky in 0..s.kernel {
                        let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                        if iy < 0 || iy >= s.in_h as isize {
                            continue;
                        }
                        for kx in 0..s.kernel {
                            let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                            if ix < 0 || ix >= s.in_w as isize {
                                continue;
                            }
                            let idx = iy as usize * s.in_w + ix as usize;
                            if x_map[idx] > best {
                                best = x_map[idx];
                                best_idx = Some(idx);
                            }
                        }
                    }
                    if let Some(idx) = best_idx {
                        gi_map[idx] += g_map[oy * s.out_w + ox];
                    }
                }
            }
        }
    }
}

/// Average pool, padding cells count as zeros (divisor is always k*k).
pub fn avgpool_forward(x: &[f32], out: &mut [f32], n: usize, s: &PoolShape) {
    let in_plane = s.in_h * s.in_w;
    let out_plane = s.out_h * s.out_w;
    let divisor = (s.kernel * s.kernel) as f64;
    for item in 0..n {
        for c in 0..s.c {
            let x_map = &x[(item * s.c + c) * in_plane..][..in_plane];
            let o_map = &mut out[(item * s.c + c) * out_plane..][..out_plane];
            for oy in 0..s.out_h {
                for ox in 0..s.out_w {
                    let mut acc = 0.0f64;
                    for ky in 0..s.kernel {
                        let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                        if iy < 0 || iy >= s.in_h as isize {
                            continue;
                        }
                        for kx in 0..s.kernel {
                            let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                            if ix < 0 || ix >= s.in_w as isize {
                                continue;
                            }
                            acc += x_map[iy as usize * s.in_w + ix as usize] as f64;
                        }
                    }
                    o_map[oy * s.out_w + ox] = (acc / divisor) as f32;
                }
            }
        }
    }
}

pub fn avgpool_backward(grad_out: &[f32], grad_in: &mut [f32], n: usize, s: &PoolShape) {
    let in_plane = s.in_h * s.in_w;
    let out_plane = s.out_h * s.out_w;
    let divisor = (s.kernel * s.kernel) as f32;
    grad_in.fill(0.0);
    for item in 0..n {
        for c in 0..s.c {
            let g_map = &grad_out[(item * s.c + c) * out_plane..][..out_plane];
            let gi_map = &mut grad_in[(item * s.c + c) * in_plane..][..in_plane];
            for oy in 0..s.out_h {
                for ox in 0..s.out_w {
                    let g = g_map[oy * s.out_w + ox] / divisor;
                    for ky in 0..s.kernel {
                        let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                        if iy < 0 || iy >= s.in_h as isize {
                            continue;
                        }
                        for kx in 0..s.kernel {
                            let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                            if ix < 0 || ix >= s.in_w as isize {
                                continue;
                            }
                            gi_map[iy as usize * s.in_w + ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

pub fn global_avgpool_forward(x: &[f32], out: &mut [f32], n: usize, c: usize, plane: usize) {
    for item in 0..n {
        for ch in 0..c {
            let map = &x[(item * c + ch) * plane..][..plane];
            let mut acc = 0.0f64;
            for &v in map {
                acc += v as f64;
            }
            out[item * c + ch] = (acc / plane as f64) as f32;
        }
    }
}

pub fn global_avgpool_backward(grad_out: &[f32], grad_in: &mut [f32], n: usize, c: usize, plane: usize) {
    for item in 0..n {
        for ch in 0..c {
            let g = grad_out[item * c + ch] / plane as f32;
            for p in 0..plane {
                grad_in[(item * c + ch) * plane + p] = g;
            }
        }
    }
}

/// Mean cross-entropy over the batch plus top-1 correct count.
/// Returns `(loss, correct)`; if `grad_logits` is given it receives
/// `(softmax - onehot) / n`.
pub fn softmax_loss(
    logits: &[f32],
    labels: &[usize],
    classes: usize,
    grad_logits: Option<&mut [f32]>,
) -> (f64, usize) {
    let n = labels.len();
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    let mut grads = grad_logits;
    for (item, &label) in labels.iter().enumerate() {
        let row = &logits[item * classes..(item + 1) * classes];
        let mut max = f64::NEG_INFINITY;
        let mut argmax = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if (v as f64) > max {
                max = v as f64;
                argmax = i;
            }
        }
        if argmax == label {
            correct += 1;
        }
        let mut denom = 0.0f64;
        for &v in row {
            denom += (v as f64 - max).exp();
        }
        let log_denom = denom.ln() + max;
        loss += log_denom - row[label] as f64;
        if let Some(g) = grads.as_deref_mut() {
            for (i, &v) in row.iter().enumerate() {
                let p = (v as f64 - max).exp() / denom;
                let onehot = if i == label { 1.0 } else { 0.0 };
                g[item * classes + i] = ((p - onehot) / n as f64) as f32;
            }
        }
    }
    (loss / n as f64, correct)
}
