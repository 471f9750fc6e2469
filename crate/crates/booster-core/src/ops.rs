//! Forward and backward numeric kernels.
//!
//! Pure functions over flat `f32` slices; the graph dispatches into these and
//! `Model::predict` reuses the forward halves directly. All reductions
//! accumulate in a fixed order so results are bit-reproducible across runs
//! and thread counts.

use crate::error::{Error, Result};

/// Dot product with eight independent accumulators. The lane split is part of
/// the result's definition: fixed order, vectorizable.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let n8 = (a.len() / 8) * 8;
    let mut acc = [0.0f32; 8];
    for (ca, cb) in a[..n8].chunks_exact(8).zip(b[..n8].chunks_exact(8)) {
        for i in 0..8 {
            acc[i] += ca[i] * cb[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in a[n8..].iter().zip(&b[n8..]) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(out: &mut [f32], a: f32, x: &[f32]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

pub fn relu_forward(x: &[f32]) -> Vec<f32> {
    x.iter().map(|v| v.max(0.0)).collect()
}

pub fn relu_backward(x: &[f32], grad_out: &[f32], grad_x: &mut [f32]) {
    for i in 0..x.len() {
        if x[i] > 0.0 {
            grad_x[i] += grad_out[i];
        }
    }
}

pub fn tanh_forward(x: &[f32]) -> Vec<f32> {
    x.iter().map(|v| v.tanh()).collect()
}

pub fn tanh_backward(x: &[f32], grad_out: &[f32], grad_x: &mut [f32]) {
    for i in 0..x.len() {
        let y = x[i].tanh();
        grad_x[i] += grad_out[i] * (1.0 - y * y);
    }
}

/// sign(0) = 0 so a zero input gradient produces a no-op attack step.
pub fn sign_forward(x: &[f32]) -> Vec<f32> {
    x.iter()
        .map(|v| {
            if *v > 0.0 {
                1.0
            } else if *v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect()
}

pub fn clamp_forward(x: &[f32], lo: f32, hi: f32) -> Vec<f32> {
    x.iter().map(|v| v.clamp(lo, hi)).collect()
}

/// Pass-through strictly inside the interval, zero at and beyond the rails.
pub fn clamp_backward(x: &[f32], lo: f32, hi: f32, grad_out: &[f32], grad_x: &mut [f32]) {
    for i in 0..x.len() {
        if x[i] > lo && x[i] < hi {
            grad_x[i] += grad_out[i];
        }
    }
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

pub fn conv2d_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::shape("conv2d: stride must be >= 1"));
    }
    let he = h + 2 * padding;
    let we = w + 2 * padding;
    if kh > he || kw > we {
        return Err(Error::shape(format!(
            "conv2d: kernel {}x{} larger than padded input {}x{}",
            kh, kw, he, we
        )));
    }
    Ok(((he - kh) / stride + 1, (we - kw) / stride + 1))
}

/// x: [n,ci,h,w], k: [co,ci,kh,kw] -> [n,co,oh,ow]
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f32],
    (n, ci, h, w): (usize, usize, usize, usize),
    k: &[f32],
    (co, _ci, kh, kw): (usize, usize, usize, usize),
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
) -> Vec<f32> {
    let mut out = vec![0.0f32; n * co * oh * ow];
    let x_img = ci * h * w;
    let o_img = co * oh * ow;
    for ni in 0..n {
        for coi in 0..co {
            let out_plane = &mut out[ni * o_img + coi * oh * ow..ni * o_img + (coi + 1) * oh * ow];
            for cii in 0..ci {
                let x_plane = &x[ni * x_img + cii * h * w..ni * x_img + (cii + 1) * h * w];
                let k_base = ((coi * ci) + cii) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = k[k_base + ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        if stride == 1 {
                            // shifted-row accumulation, contiguous in x and out
                            let ox_lo = padding.saturating_sub(kx);
                            let ox_hi = (w + padding - kx).min(ow);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = oy + ky;
                                if iy < padding || iy >= h + padding {
                                    continue;
                                }
                                let iy = iy - padding;
                                let ix0 = ox_lo + kx - padding;
                                let src = &x_plane[iy * w + ix0..iy * w + ix0 + (ox_hi - ox_lo)];
                                let dst = &mut out_plane[oy * ow + ox_lo..oy * ow + ox_hi];
                                axpy(dst, wv, src);
                            }
                        } else {
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                let row = iy as usize * w;
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix as usize >= w {
                                        continue;
                                    }
                                    out_plane[oy * ow + ox] += wv * x_plane[row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the convolution input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_input(
    grad_out: &[f32],
    (n, ci, h, w): (usize, usize, usize, usize),
    k: &[f32],
    (co, _ci, kh, kw): (usize, usize, usize, usize),
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
    grad_x: &mut [f32],
) {
    let x_img = ci * h * w;
    let o_img = co * oh * ow;
    for ni in 0..n {
        for coi in 0..co {
            let g_plane = &grad_out[ni * o_img + coi * oh * ow..ni * o_img + (coi + 1) * oh * ow];
            for cii in 0..ci {
                let gx_plane = &mut grad_x[ni * x_img + cii * h * w..ni * x_img + (cii + 1) * h * w];
                let k_base = ((coi * ci) + cii) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = k[k_base + ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        if stride == 1 {
                            let ox_lo = padding.saturating_sub(kx);
                            let ox_hi = (w + padding - kx).min(ow);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = oy + ky;
                                if iy < padding || iy >= h + padding {
                                    continue;
                                }
                                let iy = iy - padding;
                                let ix0 = ox_lo + kx - padding;
                                let src = &g_plane[oy * ow + ox_lo..oy * ow + ox_hi];
                                let dst = &mut gx_plane[iy * w + ix0..iy * w + ix0 + (ox_hi - ox_lo)];
                                axpy(dst, wv, src);
                            }
                        } else {
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                let row = iy as usize * w;
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix as usize >= w {
                                        continue;
                                    }
                                    gx_plane[row + ix as usize] += wv * g_plane[oy * ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the convolution kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_kernel(
    grad_out: &[f32],
    x: &[f32],
    (n, ci, h, w): (usize, usize, usize, usize),
    (co, _ci, kh, kw): (usize, usize, usize, usize),
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
    grad_k: &mut [f32],
) {
    let x_img = ci * h * w;
    let o_img = co * oh * ow;
    for coi in 0..co {
        for cii in 0..ci {
            let k_base = ((coi * ci) + cii) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = 0.0f32;
                    for ni in 0..n {
                        let g_plane = &grad_out[ni * o_img + coi * oh * ow..ni * o_img + (coi + 1) * oh * ow];
                        let x_plane = &x[ni * x_img + cii * h * w..ni * x_img + (cii + 1) * h * w];
                        if stride == 1 {
                            let ox_lo = padding.saturating_sub(kx);
                            let ox_hi = (w + padding - kx).min(ow);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = oy + ky;
                                if iy < padding || iy >= h + padding {
                                    continue;
                                }
                                let iy = iy - padding;
                                let ix0 = ox_lo + kx - padding;
                                acc += dot(
                                    &g_plane[oy * ow + ox_lo..oy * ow + ox_hi],
                                    &x_plane[iy * w + ix0..iy * w + ix0 + (ox_hi - ox_lo)],
                                );
                            }
                        } else {
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                let row = iy as usize * w;
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix as usize >= w {
                                        continue;
                                    }
                                    acc += g_plane[oy * ow + ox] * x_plane[row + ix as usize];
                                }
                            }
                        }
                    }
                    grad_k[k_base + ky * kw + kx] += acc;
                }
            }
        }
    }
}

/// Per-channel bias over [n,c,h,w].
pub fn bias_channel_forward(x: &[f32], (n, c, h, w): (usize, usize, usize, usize), b: &[f32]) -> Vec<f32> {
    let plane = h * w;
    let mut out = Vec::with_capacity(x.len());
    for ni in 0..n {
        for (cc, &bv) in b.iter().enumerate().take(c) {
            let base = (ni * c + cc) * plane;
            out.extend(x[base..base + plane].iter().map(|v| v + bv));
        }
    }
    out
}

pub fn bias_channel_backward_bias(grad_out: &[f32], (n, c, h, w): (usize, usize, usize, usize), grad_b: &mut [f32]) {
    let plane = h * w;
    for (cc, gb) in grad_b.iter_mut().enumerate().take(c) {
        let mut acc = 0.0f32;
        for ni in 0..n {
            let base = (ni * c + cc) * plane;
            acc += grad_out[base..base + plane].iter().sum::<f32>();
        }
        *gb += acc;
    }
}

// ---------------------------------------------------------------------------
// max pooling
// ---------------------------------------------------------------------------

/// Non-overlapping window pooling (stride == window). Ties keep the first
/// element in row-major scan order so replay is deterministic.
pub fn maxpool2d_forward(
    x: &[f32],
    (n, c, h, w): (usize, usize, usize, usize),
    window: usize,
) -> (Vec<f32>, Vec<u32>, (usize, usize)) {
    let oh = h / window;
    let ow = w / window;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut switches = Vec::with_capacity(n * c * oh * ow);
    for ni in 0..n {
        for cc in 0..c {
            let plane = &x[(ni * c + cc) * h * w..(ni * c + cc + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = (oy * window + dy) * w + ox * window + dx;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx as u32;
                            }
                        }
                    }
                    out.push(best);
                    switches.push(best_idx);
                }
            }
        }
    }
    (out, switches, (oh, ow))
}

pub fn maxpool2d_backward(
    grad_out: &[f32],
    switches: &[u32],
    (n, c, h, w): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
    grad_x: &mut [f32],
) {
    for img in 0..n * c {
        let sw = &switches[img * oh * ow..(img + 1) * oh * ow];
        let go = &grad_out[img * oh * ow..(img + 1) * oh * ow];
        let gx = &mut grad_x[img * h * w..(img + 1) * h * w];
        for (g, idx) in go.iter().zip(sw) {
            gx[*idx as usize] += g;
        }
    }
}

// ---------------------------------------------------------------------------
// affine
// ---------------------------------------------------------------------------

/// x: [n, d_in] (trailing axes flattened), w: [d_out, d_in], b: [d_out].
pub fn affine_forward(x: &[f32], n: usize, d_in: usize, w: &[f32], d_out: usize, b: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * d_out);
    for i in 0..n {
        let xi = &x[i * d_in..(i + 1) * d_in];
        for j in 0..d_out {
            out.push(dot(xi, &w[j * d_in..(j + 1) * d_in]) + b[j]);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn affine_backward(
    grad_out: &[f32],
    x: &[f32],
    n: usize,
    d_in: usize,
    w: &[f32],
    d_out: usize,
    grad_x: Option<&mut [f32]>,
    grad_w: Option<&mut [f32]>,
    grad_b: Option<&mut [f32]>,
) {
    if let Some(gx) = grad_x {
        for i in 0..n {
            let go = &grad_out[i * d_out..(i + 1) * d_out];
            let gxi = &mut gx[i * d_in..(i + 1) * d_in];
            for j in 0..d_out {
                axpy(gxi, go[j], &w[j * d_in..(j + 1) * d_in]);
            }
        }
    }
    if let Some(gw) = grad_w {
        for i in 0..n {
            let go = &grad_out[i * d_out..(i + 1) * d_out];
            let xi = &x[i * d_in..(i + 1) * d_in];
            for j in 0..d_out {
                axpy(&mut gw[j * d_in..(j + 1) * d_in], go[j], xi);
            }
        }
    }
    if let Some(gb) = grad_b {
        for i in 0..n {
            let go = &grad_out[i * d_out..(i + 1) * d_out];
            for j in 0..d_out {
                gb[j] += go[j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Row-wise softmax probabilities, numerically stabilized.
pub fn softmax_rows(logits: &[f32], n: usize, k: usize) -> Vec<f32> {
    let mut probs = Vec::with_capacity(n * k);
    for i in 0..n {
        let row = &logits[i * k..(i + 1) * k];
        let m = row.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b));
        let mut denom = 0.0f32;
        let exps: Vec<f32> = row
            .iter()
            .map(|z| {
                let e = (z - m).exp();
                denom += e;
                e
            })
            .collect();
        probs.extend(exps.iter().map(|e| e / denom));
    }
    probs
}

fn log_sum_exp(row: &[f32]) -> f32 {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b));
    m + row.iter().map(|z| (z - m).exp()).sum::<f32>().ln()
}

pub fn softmax_ce_forward(logits: &[f32], n: usize, k: usize, labels: &[usize], reduction: Reduction) -> f32 {
    let mut total = 0.0f32;
    for i in 0..n {
        let row = &logits[i * k..(i + 1) * k];
        total += log_sum_exp(row) - row[labels[i]];
    }
    match reduction {
        Reduction::Mean => total / n as f32,
        Reduction::Sum => total,
    }
}

#[allow(clippy::too_many_arguments)]
pub fn softmax_ce_backward(
    logits: &[f32],
    n: usize,
    k: usize,
    labels: &[usize],
    reduction: Reduction,
    upstream: f32,
    grad_logits: &mut [f32],
) {
    let scale = match reduction {
        Reduction::Mean => upstream / n as f32,
        Reduction::Sum => upstream,
    };
    let probs = softmax_rows(logits, n, k);
    for i in 0..n {
        for j in 0..k {
            let indicator = if j == labels[i] { 1.0 } else { 0.0 };
            grad_logits[i * k + j] += scale * (probs[i * k + j] - indicator);
        }
    }
}

/// Mean over rows of KL(softmax(p_logits) || softmax(q_logits)).
pub fn kl_forward(p_logits: &[f32], q_logits: &[f32], n: usize, k: usize) -> f32 {
    let mut total = 0.0f32;
    for i in 0..n {
        let pr = &p_logits[i * k..(i + 1) * k];
        let qr = &q_logits[i * k..(i + 1) * k];
        let lse_p = log_sum_exp(pr);
        let lse_q = log_sum_exp(qr);
        let mut row = 0.0f32;
        for j in 0..k {
            let lp = pr[j] - lse_p;
            let lq = qr[j] - lse_q;
            row += lp.exp() * (lp - lq);
        }
        total += row.max(0.0); // row-offs can leave a tiny negative residue
    }
    total / n as f32
}

#[allow(clippy::too_many_arguments)]
pub fn kl_backward(
    p_logits: &[f32],
    q_logits: &[f32],
    n: usize,
    k: usize,
    upstream: f32,
    grad_p: Option<&mut [f32]>,
    grad_q: Option<&mut [f32]>,
) {
    let scale = upstream / n as f32;
    let p = softmax_rows(p_logits, n, k);
    let q = softmax_rows(q_logits, n, k);
    let mut row_kl = vec![0.0f32; n];
    let mut log_ratio = vec![0.0f32; n * k];
    for i in 0..n {
        let mut acc = 0.0f32;
        for j in 0..k {
            let lr = p[i * k + j].ln() - q[i * k + j].ln();
            log_ratio[i * k + j] = lr;
            acc += p[i * k + j] * lr;
        }
        row_kl[i] = acc;
    }
    if let Some(gp) = grad_p {
        for i in 0..n {
            for j in 0..k {
                gp[i * k + j] += scale * p[i * k + j] * (log_ratio[i * k + j] - row_kl[i]);
            }
        }
    }
    if let Some(gq) = grad_q {
        for i in 0..n {
            for j in 0..k {
                gq[i * k + j] += scale * (q[i * k + j] - p[i * k + j]);
            }
        }
    }
}

/// Sum over rows of max(z_y - max_{j != y} z_j, -kappa).
pub fn cw_margin_forward(logits: &[f32], n: usize, k: usize, labels: &[usize], kappa: f32) -> f32 {
    let mut total = 0.0f32;
    for i in 0..n {
        let row = &logits[i * k..(i + 1) * k];
        let y = labels[i];
        let other = best_other(row, y);
        total += (row[y] - row[other]).max(-kappa);
    }
    total
}

pub fn cw_margin_backward(
    logits: &[f32],
    n: usize,
    k: usize,
    labels: &[usize],
    kappa: f32,
    upstream: f32,
    grad_logits: &mut [f32],
) {
    for i in 0..n {
        let row = &logits[i * k..(i + 1) * k];
        let y = labels[i];
        let other = best_other(row, y);
        if row[y] - row[other] > -kappa {
            grad_logits[i * k + y] += upstream;
            grad_logits[i * k + other] -= upstream;
        }
    }
}

fn best_other(row: &[f32], y: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f32::NEG_INFINITY;
    for (j, v) in row.iter().enumerate() {
        if j != y && *v > best_v {
            best_v = *v;
            best = j;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// frame injection
// ---------------------------------------------------------------------------

/// Place each image at the center of the frame canvas; the border comes from
/// the frame, the interior only from the image.
pub fn inject_forward(x: &[f32], (n, c, h, w): (usize, usize, usize, usize), frame: &[f32], width: usize) -> Vec<f32> {
    let hf = h + 2 * width;
    let wf = w + 2 * width;
    let mut out = Vec::with_capacity(n * c * hf * wf);
    for _ in 0..n {
        out.extend_from_slice(frame);
    }
    for ni in 0..n {
        for cc in 0..c {
            let dst_plane = (ni * c + cc) * hf * wf;
            let src_plane = (ni * c + cc) * h * w;
            for y in 0..h {
                let dst = dst_plane + (y + width) * wf + width;
                out[dst..dst + w].copy_from_slice(&x[src_plane + y * w..src_plane + (y + 1) * w]);
            }
        }
    }
    out
}

/// grad wrt image = interior crop; identity there, zero on the border.
pub fn inject_backward_input(
    grad_out: &[f32],
    (n, c, h, w): (usize, usize, usize, usize),
    width: usize,
    grad_x: &mut [f32],
) {
    let hf = h + 2 * width;
    let wf = w + 2 * width;
    for ni in 0..n {
        for cc in 0..c {
            let src_plane = (ni * c + cc) * hf * wf;
            let dst_plane = (ni * c + cc) * h * w;
            for y in 0..h {
                let src = src_plane + (y + width) * wf + width;
                let dst = &mut grad_x[dst_plane + y * w..dst_plane + (y + 1) * w];
                for (g, u) in dst.iter_mut().zip(&grad_out[src..src + w]) {
                    *g += u;
                }
            }
        }
    }
}

/// grad wrt frame = batch sum over border coordinates, zero on the interior.
pub fn inject_backward_frame(
    grad_out: &[f32],
    (n, c, h, w): (usize, usize, usize, usize),
    width: usize,
    grad_frame: &mut [f32],
) {
    let hf = h + 2 * width;
    let wf = w + 2 * width;
    let plane = hf * wf;
    for ni in 0..n {
        for cc in 0..c {
            let src = (ni * c + cc) * plane;
            let dst = &mut grad_frame[cc * plane..(cc + 1) * plane];
            for y in 0..hf {
                let interior_row = y >= width && y < width + h;
                let row = y * wf;
                if !interior_row {
                    for xcol in 0..wf {
                        dst[row + xcol] += grad_out[src + row + xcol];
                    }
                } else {
                    for xcol in 0..width {
                        dst[row + xcol] += grad_out[src + row + xcol];
                    }
                    for xcol in width + w..wf {
                        dst[row + xcol] += grad_out[src + row + xcol];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        assert_eq!(relu_forward(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn sign_values() {
        assert_eq!(sign_forward(&[-3.0, 0.0, 0.5]), vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn conv_counting_window() {
        // 1x1x4x4 ones, single 3x3 ones kernel, stride 1, padding 0 -> 2x2 of 9
        let x = vec![1.0f32; 16];
        let k = vec![1.0f32; 9];
        let dims = conv2d_out_dims(4, 4, 3, 3, 1, 0).unwrap();
        assert_eq!(dims, (2, 2));
        let out = conv2d_forward(&x, (1, 1, 4, 4), &k, (1, 1, 3, 3), 1, 0, dims);
        assert_eq!(out, vec![9.0; 4]);
    }

    #[test]
    fn conv_padding_matches_reference() {
        // brute-force reference on a small random case
        let mut rng = crate::rng::stream(11, &[1]);
        let dims_in = (2usize, 3usize, 5usize, 4usize);
        let kd = (4usize, 3usize, 3usize, 3usize);
        let x: Vec<f32> = (0..dims_in.0 * dims_in.1 * dims_in.2 * dims_in.3)
            .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
            .collect();
        let k: Vec<f32> = (0..kd.0 * kd.1 * kd.2 * kd.3)
            .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
            .collect();
        let od = conv2d_out_dims(dims_in.2, dims_in.3, kd.2, kd.3, 1, 1).unwrap();
        let fast = conv2d_forward(&x, dims_in, &k, kd, 1, 1, od);
        let mut slow = vec![0.0f32; dims_in.0 * kd.0 * od.0 * od.1];
        let (n, ci, h, w) = dims_in;
        let (co, _, kh, kw) = kd;
        for ni in 0..n {
            for coi in 0..co {
                for oy in 0..od.0 {
                    for ox in 0..od.1 {
                        let mut acc = 0.0f32;
                        for cii in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy as isize + ky as isize - 1;
                                    let ix = ox as isize + kx as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += k[((coi * ci + cii) * kh + ky) * kw + kx]
                                        * x[((ni * ci + cii) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        slow[((ni * co + coi) * od.0 + oy) * od.1 + ox] = acc;
                    }
                }
            }
        }
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-4, "fast {} vs slow {}", a, b);
        }
    }

    #[test]
    fn softmax_ce_symmetric_logits() {
        let loss = softmax_ce_forward(&[0.0, 0.0], 1, 2, &[0], Reduction::Mean);
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-6);
        let mut g = vec![0.0f32; 2];
        softmax_ce_backward(&[0.0, 0.0], 1, 2, &[0], Reduction::Mean, 1.0, &mut g);
        assert!((g[0] + 0.5).abs() < 1e-6 && (g[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn kl_identical_distributions_is_zero() {
        let logits = [0.3f32, -1.0, 2.0, 0.1, 0.1, 0.2];
        let v = kl_forward(&logits, &logits, 2, 3);
        assert!(v.abs() < 1e-6);
    }

    #[test]
    fn maxpool_tie_keeps_first() {
        let x = [1.0f32, 1.0, 0.0, 0.5];
        let (out, sw, od) = maxpool2d_forward(&x, (1, 1, 2, 2), 2);
        assert_eq!(od, (1, 1));
        assert_eq!(out, vec![1.0]);
        assert_eq!(sw, vec![0]);
    }

    #[test]
    fn inject_and_crop_round_trip() {
        let x: Vec<f32> = (0..2 * 3 * 2 * 2).map(|i| i as f32).collect();
        let width = 1;
        let frame = vec![0.5f32; 3 * 4 * 4];
        let out = inject_forward(&x, (2, 3, 2, 2), &frame, width);
        assert_eq!(out.len(), 2 * 3 * 16);
        // interior must be the original image, bit-exact
        for ni in 0..2 {
            for cc in 0..3 {
                for y in 0..2 {
                    for xcol in 0..2 {
                        let o = out[(ni * 3 + cc) * 16 + (y + 1) * 4 + xcol + 1];
                        let i = x[(ni * 3 + cc) * 4 + y * 2 + xcol];
                        assert_eq!(o.to_bits(), i.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn inject_frame_grad_skips_interior() {
        let g = vec![1.0f32; 32]; // n * c * canvas = 2 * 1 * 4 * 4
        let mut gf = vec![0.0f32; 16];
        inject_backward_frame(&g, (2, 1, 2, 2), 1, &mut gf);
        // 12 border coords get batch-sum 2.0, 4 interior coords stay 0
        let border_sum: f32 = gf.iter().sum();
        assert_eq!(border_sum, 24.0);
        for y in 1..3 {
            for x in 1..3 {
                assert_eq!(gf[y * 4 + x], 0.0);
            }
        }
    }
}
