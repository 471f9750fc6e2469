//! Gradient self-checks: every differentiable primitive, and the end-to-end
//! input gradient, against an independent finite-difference oracle.
//!
//! The finite-difference oracle does not run the production engine. Each
//! primitive has a naive f64 reference implementation here, written directly
//! from its mathematical definition, and the central difference is taken on
//! that. This keeps the oracle's own noise floor (~1e-12) far below the 1e-3
//! tolerance; differencing the f32 engine instead would leave the oracle as
//! noisy as the thing under test.
//!
//! Every differentiable primitive gets 20 random probe points. Inputs are
//! resampled away from kinks (relu at 0, clamp at its bounds, pool/margin
//! ties) so the central difference at h=1e-3 stays valid.

use crate::graph::{grad_of, Graph, Var};
use crate::model::Model;
use crate::ops::Reduction;
use crate::rng;
use crate::tensor::Tensor;
use crate::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_H: f32 = 1e-3;
pub const GRAD_TOL: f64 = 1e-3;
pub const POINTS: usize = 20;
/// Minimum distance from any kink, comfortably above FD_H.
const KINK_MARGIN: f32 = 5e-3;

/// |ad - fd|_2 / max(|fd|_2, floor). One number per probe point.
pub fn vec_rel_err(ad: &[f32], fd: &[f64]) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (a, f) in ad.iter().zip(fd) {
        let d = *a as f64 - f;
        num += d * d;
        den += f * f;
    }
    num.sqrt() / den.sqrt().max(1e-9)
}

/// Central differences of an f64-valued function, stepping each coordinate
/// in f32 exactly as the engine would see it and dividing by the step that
/// actually happened after rounding.
pub fn fd64<F>(x: &[f32], h: f32, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f32]) -> f64,
{
    let mut xs = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        let hi = orig + h;
        let lo = orig - h;
        xs[i] = hi;
        let fp = f(&xs);
        xs[i] = lo;
        let fm = f(&xs);
        xs[i] = orig;
        g.push((fp - fm) / (hi as f64 - lo as f64));
    }
    g
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Uniform draw with every coordinate at least KINK_MARGIN away from each
/// listed kink value.
fn uniform_off_kinks(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32, kinks: &[f32]) -> Vec<f32> {
    (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > KINK_MARGIN) {
                return v;
            }
        })
        .collect()
}

/// AD gradient vs f64 reference FD for one probe point.
fn compare<B, R>(x: &Tensor, ad_build: B, reference: R) -> f64
where
    B: Fn(&mut Graph, Var) -> Result<Var>,
    R: FnMut(&[f32]) -> f64,
{
    let (_, ad) = grad_of(x, &ad_build).expect("forward/backward failed");
    let fd = fd64(x.data(), FD_H, reference);
    vec_rel_err(&ad, &fd)
}

// ---------------------------------------------------------------------------
// f64 reference math
// ---------------------------------------------------------------------------

mod refmath {
    pub fn f64s(x: &[f32]) -> Vec<f64> {
        x.iter().map(|v| *v as f64).collect()
    }

    pub fn contract(y: &[f64], w: &[f32]) -> f64 {
        y.iter().zip(w).map(|(a, b)| a * *b as f64).sum()
    }

    pub fn relu(x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v.max(0.0)).collect()
    }

    pub fn tanh(x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v.tanh()).collect()
    }

    pub fn clamp(x: &[f64], lo: f64, hi: f64) -> Vec<f64> {
        x.iter().map(|v| v.clamp(lo, hi)).collect()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        x: &[f64],
        (n, ci, h, w): (usize, usize, usize, usize),
        k: &[f64],
        (co, kh, kw): (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * co * oh * ow];
        for ni in 0..n {
            for oc in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x[((ni * ci + ic) * h + iy as usize) * w + ix as usize];
                                    let kv = k[((oc * ci + ic) * kh + ky) * kw + kx];
                                    acc += xv * kv;
                                }
                            }
                        }
                        out[((ni * co + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    pub fn bias_channel(x: &[f64], (n, c, hw): (usize, usize, usize), b: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        for ni in 0..n {
            for ci in 0..c {
                for p in 0..hw {
                    out[(ni * c + ci) * hw + p] += b[ci];
                }
            }
        }
        out
    }

    pub fn maxpool(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), win: usize) -> Vec<f64> {
        let (oh, ow) = (h / win, w / win);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..win {
                        for dx in 0..win {
                            m = m.max(x[base + (oy * win + dy) * w + ox * win + dx]);
                        }
                    }
                    out.push(m);
                }
            }
        }
        out
    }

    pub fn affine(x: &[f64], n: usize, d_in: usize, w: &[f64], d_out: usize, b: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * d_out);
        for i in 0..n {
            for o in 0..d_out {
                let mut acc = b[o];
                for j in 0..d_in {
                    acc += x[i * d_in + j] * w[o * d_in + j];
                }
                out.push(acc);
            }
        }
        out
    }

    fn log_softmax_row(row: &[f64]) -> Vec<f64> {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        row.iter().map(|z| z - lse).collect()
    }

    pub fn softmax_ce(logits: &[f64], n: usize, k: usize, labels: &[usize], mean: bool) -> f64 {
        let mut total = 0.0;
        for i in 0..n {
            let ls = log_softmax_row(&logits[i * k..(i + 1) * k]);
            total -= ls[labels[i]];
        }
        if mean {
            total / n as f64
        } else {
            total
        }
    }

    /// Mean over rows of KL(softmax(p) || softmax(q)).
    pub fn kl(pl: &[f64], ql: &[f64], n: usize, k: usize) -> f64 {
        let mut total = 0.0;
        for i in 0..n {
            let lp = log_softmax_row(&pl[i * k..(i + 1) * k]);
            let lq = log_softmax_row(&ql[i * k..(i + 1) * k]);
            for j in 0..k {
                total += lp[j].exp() * (lp[j] - lq[j]);
            }
        }
        total / n as f64
    }

    /// Sum over rows of max(z_y - max_{j!=y} z_j, -kappa).
    pub fn cw_margin(logits: &[f64], n: usize, k: usize, labels: &[usize], kappa: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..n {
            let row = &logits[i * k..(i + 1) * k];
            let y = labels[i];
            let other = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != y)
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            total += (row[y] - other).max(-kappa);
        }
        total
    }

    fn sig_relu(x: &[f64], sig: &mut u64) -> Vec<f64> {
        x.iter()
            .map(|v| {
                *sig = (*sig ^ (*v > 0.0) as u64).wrapping_mul(0x0000_0100_0000_01b3);
                v.max(0.0)
            })
            .collect()
    }

    fn sig_maxpool(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), win: usize, sig: &mut u64) -> Vec<f64> {
        let (oh, ow) = (h / win, w / win);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    let mut arg = 0u64;
                    for dy in 0..win {
                        for dx in 0..win {
                            let v = x[base + (oy * win + dy) * w + ox * win + dx];
                            if v > m {
                                m = v;
                                arg = (dy * win + dx) as u64;
                            }
                        }
                    }
                    *sig = (*sig ^ arg).wrapping_mul(0x0000_0100_0000_01b3);
                    out.push(m);
                }
            }
        }
        out
    }

    /// cnn-small forward on a 2x1x12x12 batch. Returns the mean CE loss and
    /// a hash of every relu sign bit and pool argmax, for kink detection.
    pub fn cnn_small(p: &[Vec<f64>], x: &[f64], labels: &[usize]) -> (f64, u64) {
        let mut sig = 0xcbf2_9ce4_8422_2325u64;
        let a = conv2d(x, (2, 1, 12, 12), &p[0], (8, 3, 3), 1, 1);
        let a = bias_channel(&a, (2, 8, 144), &p[1]);
        let a = sig_maxpool(&sig_relu(&a, &mut sig), (2, 8, 12, 12), 2, &mut sig);
        let a = conv2d(&a, (2, 8, 6, 6), &p[2], (16, 3, 3), 1, 1);
        let a = bias_channel(&a, (2, 16, 36), &p[3]);
        let a = sig_maxpool(&sig_relu(&a, &mut sig), (2, 16, 6, 6), 2, &mut sig);
        let a = affine(&a, 2, 16 * 9, &p[4], 64, &p[5]);
        let a = affine(&sig_relu(&a, &mut sig), 2, 64, &p[6], 10, &p[7]);
        (softmax_ce(&a, 2, 10, labels, true), sig)
    }

    /// Frame replicated per example with the image pasted into the center.
    pub fn inject(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), frame: &[f64], width: usize) -> Vec<f64> {
        let hf = h + 2 * width;
        let wf = w + 2 * width;
        let mut out = Vec::with_capacity(n * c * hf * wf);
        for _ in 0..n {
            out.extend_from_slice(frame);
        }
        for ni in 0..n {
            for cc in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        out[(ni * c + cc) * hf * wf + (y + width) * wf + (xx + width)] =
                            x[(ni * c + cc) * h * w + y * w + xx];
                    }
                }
            }
        }
        out
    }
}

pub const GRADCHECK_NAMES: &[&str] = &[
    "relu",
    "tanh",
    "clamp",
    "add",
    "sub",
    "mul",
    "mul_aliased",
    "scale",
    "add_scalar",
    "sum",
    "mean",
    "conv2d_x",
    "conv2d_kernel",
    "conv2d_strided",
    "bias_channel_x",
    "bias_channel_b",
    "maxpool2d",
    "affine_x",
    "affine_w",
    "affine_b",
    "softmax_ce_mean",
    "softmax_ce_sum",
    "kl_left",
    "kl_right",
    "cw_margin",
    "inject_x",
    "inject_frame",
    "model_input_gradient",
];

/// Worst relative error over POINTS probes of one primitive.
pub fn run_gradcheck(name: &str) -> f64 {
    let mut worst = 0.0f64;
    for point in 0..POINTS {
        let mut r = rng::stream(0xC1, &[hash_name(name), point as u64]);
        let err = probe_once(name, &mut r);
        if err > worst {
            worst = err;
        }
    }
    worst
}

fn hash_name(name: &str) -> u64 {
    // FNV-1a, enough to decorrelate the per-primitive streams
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn tensor(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
    Tensor::from_vec(shape, data).unwrap()
}

/// Fixed-weight contraction to a scalar; a plain sum would miss errors that
/// permute coordinates.
fn contract(g: &mut Graph, v: Var, weights: &[f32]) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = g.leaf_from(shape, weights.to_vec(), false)?;
    let prod = g.mul(v, w)?;
    g.sum(prod)
}

fn probe_once(name: &str, r: &mut ChaCha8Rng) -> f64 {
    use refmath::f64s;
    match name {
        "relu" => {
            let x = tensor(vec![24], uniform_off_kinks(r, 24, -1.0, 1.0, &[0.0]));
            let w = uniform(r, 24, -1.0, 1.0);
            let wr = w.clone();
            compare(
                &x,
                |g, v| {
                    let y = g.relu(v)?;
                    contract(g, y, &w)
                },
                move |vals| refmath::contract(&refmath::relu(&f64s(vals)), &wr),
            )
        }
        "tanh" => {
            let x = tensor(vec![24], uniform(r, 24, -2.0, 2.0));
            let w = uniform(r, 24, -1.0, 1.0);
            let wr = w.clone();
            compare(
                &x,
                |g, v| {
                    let y = g.tanh(v)?;
                    contract(g, y, &w)
                },
                move |vals| refmath::contract(&refmath::tanh(&f64s(vals)), &wr),
            )
        }
        "clamp" => {
            let x = tensor(vec![24], uniform_off_kinks(r, 24, -0.2, 1.2, &[0.2, 0.8]));
            let w = uniform(r, 24, -1.0, 1.0);
            let wr = w.clone();
            compare(
                &x,
                |g, v| {
                    let y = g.clamp(v, 0.2, 0.8)?;
                    contract(g, y, &w)
                },
                move |vals| refmath::contract(&refmath::clamp(&f64s(vals), 0.2, 0.8), &wr),
            )
        }
        "add" => {
            let x = tensor(vec![18], uniform(r, 18, -1.0, 1.0));
            let b = uniform(r, 18, -1.0, 1.0);
            let w = uniform(r, 18, -1.0, 1.0);
            let (br, wr) = (f64s(&b), w.clone());
            compare(
                &x,
                move |g, v| {
                    let bv = g.leaf_from(vec![18], b.clone(), false)?;
                    let y = g.add(v, bv)?;
                    contract(g, y, &w)
                },
                move |vals| {
                    let y: Vec<f64> = f64s(vals).iter().zip(&br).map(|(a, b)| a + b).collect();
                    refmath::contract(&y, &wr)
                },
            )
        }
        "sub" => {
            let x = tensor(vec![18], uniform(r, 18, -1.0, 1.0));
            let a = uniform(r, 18, -1.0, 1.0);
            let w = uniform(r, 18, -1.0, 1.0);
            let (ar, wr) = (f64s(&a), w.clone());
            compare(
                &x,
                move |g, v| {
                    let av = g.leaf_from(vec![18], a.clone(), false)?;
                    let y = g.sub(av, v)?;
                    contract(g, y, &w)
                },
                move |vals| {
                    let y: Vec<f64> = ar.iter().zip(f64s(vals)).map(|(a, b)| a - b).collect();
                    refmath::contract(&y, &wr)
                },
            )
        }
        "mul" => {
            let x = tensor(vec![18], uniform(r, 18, -1.0, 1.0));
            let b = uniform(r, 18, 0.5, 1.5);
            let w = uniform(r, 18, -1.0, 1.0);
            let (br, wr) = (f64s(&b), w.clone());
            compare(
                &x,
                move |g, v| {
                    let bv = g.leaf_from(vec![18], b.clone(), false)?;
                    let y = g.mul(v, bv)?;
                    contract(g, y, &w)
                },
                move |vals| {
                    let y: Vec<f64> = f64s(vals).iter().zip(&br).map(|(a, b)| a * b).collect();
                    refmath::contract(&y, &wr)
                },
            )
        }
        "mul_aliased" => {
            // both factors are the same node; gradient must fan in as 2x
            let x = tensor(vec![18], uniform(r, 18, -1.0, 1.0));
            let w = uniform(r, 18, -1.0, 1.0);
            let wr = w.clone();
            compare(
                &x,
                |g, v| {
                    let y = g.mul(v, v)?;
                    contract(g, y, &w)
                },
                move |vals| {
                    let y: Vec<f64> = f64s(vals).iter().map(|a| a * a).collect();
                    refmath::contract(&y, &wr)
                },
            )
        }
        "scale" => {
            let x = tensor(vec![18], uniform(r, 18, -1.0, 1.0));
            let w = uniform(r, 18, -1.0, 1.0);
            let wr = w.clone();
            compare(
                &x,
                |g, v| {
                    let y = g.scale(v, 1.7)?;
                    contract(g, y, &w)
                },
                move |vals| {
                    let y: Vec<f64> = f64s(vals).iter().map(|a| a * 1.7).collect();
                    refmath::contract(&y, &wr)
                },
            )
        }
        "add_scalar" => {
            let x = tensor(vec![18], uniform(r, 18, -1.0, 1.0));
            let w = uniform(r, 18, -1.0, 1.0);
            let wr = w.clone();
            compare(
                &x,
                |g, v| {
                    let y = g.add_scalar(v, 0.3)?;
                    contract(g, y, &w)
                },
                move |vals| {
                    let y: Vec<f64> = f64s(vals).iter().map(|a| a + 0.3).collect();
                    refmath::contract(&y, &wr)
                },
            )
        }
        "sum" => {
            let x = tensor(vec![30], uniform(r, 30, -1.0, 1.0));
            compare(&x, |g, v| g.sum(v), |vals| f64s(vals).iter().sum())
        }
        "mean" => {
            let x = tensor(vec![30], uniform(r, 30, -1.0, 1.0));
            compare(
                &x,
                |g, v| g.mean(v),
                |vals| f64s(vals).iter().sum::<f64>() / vals.len() as f64,
            )
        }
        "conv2d_x" => {
            let x = tensor(vec![1, 2, 6, 6], uniform(r, 72, -1.0, 1.0));
            let k = uniform(r, 3 * 2 * 3 * 3, -0.5, 0.5);
            let w = uniform(r, 3 * 6 * 6, -1.0, 1.0);
            let (kr, wr) = (f64s(&k), w.clone());
            compare(
                &x,
                move |g, v| {
                    let kv = g.leaf_from(vec![3, 2, 3, 3], k.clone(), false)?;
                    let y = g.conv2d(v, kv, 1, 1)?;
                    contract(g, y, &w)
                },
                move |vals| {
                    let y = refmath::conv2d(&f64s(vals), (1, 2, 6, 6), &kr, (3, 3, 3), 1, 1);
                    refmath::contract(&y, &wr)
                },
            )
        }
        "conv2d_kernel" => {
            let k = tensor(vec![3, 2, 3, 3], uniform(r, 54, -0.5, 0.5));
            let x = uniform(r, 72, -1.0, 1.0);
            let w = uniform(r, 3 * 6 * 6, -1.0, 1.0);
            let (xr, wr) = (f64s(&x), w.clone());
            compare(
                &k,
                move |g, v| {
                    let xv = g.leaf_from(vec![1, 2, 6, 6], x.clone(), false)?;
                    let y = g.conv2d(xv, v, 1, 1)?;
                    contract(g, y, &w)
                },
                move |vals| {
                    let y = refmath::conv2d(&xr, (1, 2, 6, 6), &f64s(vals), (3, 3, 3), 1, 1);
                    refmath::contract(&y, &wr)
                },
            )
        }
        "conv2d_strided" => {
            let x = tensor(vec![1, 2, 7, 7], uniform(r, 98, -1.0, 1.0));
            let k = uniform(r, 3 * 2 * 3 * 3, -0.5, 0.5);
            let w = uniform(r, 3 * 3 * 3, -1.0, 1.0);
            let (kr, wr) = (f64s(&k), w.clone());
            compare(
                &x,
                move |g, v| {
                    let kv = g.leaf_from(vec![3, 2, 3, 3], k.clone(), false)?;
                    let y = g.conv2d(v, kv, 2, 0)?;
                    contract(g, y, &w)
                },
                move |vals| {
                    let y = refmath::conv2d(&f64s(vals), (1, 2, 7, 7), &kr, (3, 3, 3), 2, 0);
                    refmath::contract(&y, &wr)
                },
            )
        }
        "bias_channel_x" => {
            let x = tensor(vec![2, 3, 4, 4], uniform(r, 96, -1.0, 1.0));
            let b = uniform(r, 3, -0.5, 0.5);
            let w = uniform(r, 96, -1.0, 1.0);
            let (br, wr) = (f64s(&b), w.clone());
            compare(
                &x,
                move |g, v| {
                    let bv = g.leaf_from(vec![3], b.clone(), false)?;
                    let y = g.bias_channel(v, bv)?;
                    contract(g, y, &w)
                },
                move |vals| {
                    let y = refmath::bias_channel(&f64s(vals), (2, 3, 16), &br);
                    refmath::contract(&y, &wr)
                },
            )
        }
        "bias_channel_b" => {
            let b = tensor(vec![3], uniform(r, 3, -0.5, 0.5));
            let x = uniform(r, 96, -1.0, 1.0);
            let w = uniform(r, 96, -1.0, 1.0);
            let (xr, wr) = (f64s(&x), w.clone());
            compare(
                &b,
                move |g, v| {
                    let xv = g.leaf_from(vec![2, 3, 4, 4], x.clone(), false)?;
                    let y = g.bias_channel(xv, v)?;
                    contract(g, y, &w)
                },
                move |vals| {
                    let y = refmath::bias_channel(&xr, (2, 3, 16), &f64s(vals));
                    refmath::contract(&y, &wr)
                },
            )
        }
        "maxpool2d" => {
            // keep the top two values of every window apart so h=1e-3 cannot
            // flip the argmax
            let x = loop {
                let cand = uniform(r, 2 * 2 * 6 * 6, -1.0, 1.0);
                if pool_gaps_ok(&cand, 2, 6, 6) {
                    break tensor(vec![2, 2, 6, 6], cand);
                }
            };
            let w = uniform(r, 2 * 2 * 3 * 3, -1.0, 1.0);
            let wr = w.clone();
            compare(
                &x,
                move |g, v| {
                    let y = g.maxpool2d(v, 2)?;
                    contract(g, y, &w)
                },
                move |vals| {
                    let y = refmath::maxpool(&f64s(vals), (2, 2, 6, 6), 2);
                    refmath::contract(&y, &wr)
                },
            )
        }
        "affine_x" => {
            let x = tensor(vec![2, 12], uniform(r, 24, -1.0, 1.0));
            let wt = uniform(r, 5 * 12, -0.5, 0.5);
            let b = uniform(r, 5, -0.5, 0.5);
            let w = uniform(r, 10, -1.0, 1.0);
            let (wtr, br, wr) = (f64s(&wt), f64s(&b), w.clone());
            compare(
                &x,
                move |g, v| {
                    let wv = g.leaf_from(vec![5, 12], wt.clone(), false)?;
                    let bv = g.leaf_from(vec![5], b.clone(), false)?;
                    let y = g.affine(v, wv, bv)?;
                    contract(g, y, &w)
                },
                move |vals| {
                    let y = refmath::affine(&f64s(vals), 2, 12, &wtr, 5, &br);
                    refmath::contract(&y, &wr)
                },
            )
        }
        "affine_w" => {
            let wt = tensor(vec![5, 12], uniform(r, 60, -0.5, 0.5));
            let x = uniform(r, 24, -1.0, 1.0);
            let b = uniform(r, 5, -0.5, 0.5);
            let w = uniform(r, 10, -1.0, 1.0);
            let (xr, br, wr) = (f64s(&x), f64s(&b), w.clone());
            compare(
                &wt,
                move |g, v| {
                    let xv = g.leaf_from(vec![2, 12], x.clone(), false)?;
                    let bv = g.leaf_from(vec![5], b.clone(), false)?;
                    let y = g.affine(xv, v, bv)?;
                    contract(g, y, &w)
                },
                move |vals| {
                    let y = refmath::affine(&xr, 2, 12, &f64s(vals), 5, &br);
                    refmath::contract(&y, &wr)
                },
            )
        }
        "affine_b" => {
            let b = tensor(vec![5], uniform(r, 5, -0.5, 0.5));
            let x = uniform(r, 24, -1.0, 1.0);
            let wt = uniform(r, 60, -0.5, 0.5);
            let w = uniform(r, 10, -1.0, 1.0);
            let (xr, wtr, wr) = (f64s(&x), f64s(&wt), w.clone());
            compare(
                &b,
                move |g, v| {
                    let xv = g.leaf_from(vec![2, 12], x.clone(), false)?;
                    let wv = g.leaf_from(vec![5, 12], wt.clone(), false)?;
                    let y = g.affine(xv, wv, v)?;
                    contract(g, y, &w)
                },
                move |vals| {
                    let y = refmath::affine(&xr, 2, 12, &wtr, 5, &f64s(vals));
                    refmath::contract(&y, &wr)
                },
            )
        }
        "softmax_ce_mean" => {
            let x = tensor(vec![4, 6], uniform(r, 24, -2.0, 2.0));
            let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..6)).collect();
            let lr = labels.clone();
            compare(
                &x,
                move |g, v| g.softmax_cross_entropy(v, &labels, Reduction::Mean),
                move |vals| refmath::softmax_ce(&f64s(vals), 4, 6, &lr, true),
            )
        }
        "softmax_ce_sum" => {
            let x = tensor(vec![4, 6], uniform(r, 24, -2.0, 2.0));
            let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..6)).collect();
            let lr = labels.clone();
            compare(
                &x,
                move |g, v| g.softmax_cross_entropy(v, &labels, Reduction::Sum),
                move |vals| refmath::softmax_ce(&f64s(vals), 4, 6, &lr, false),
            )
        }
        "kl_left" => {
            let x = tensor(vec![4, 6], uniform(r, 24, -2.0, 2.0));
            let q = uniform(r, 24, -2.0, 2.0);
            let qr = f64s(&q);
            compare(
                &x,
                move |g, v| {
                    let qv = g.leaf_from(vec![4, 6], q.clone(), false)?;
                    g.kl_divergence(v, qv)
                },
                move |vals| refmath::kl(&f64s(vals), &qr, 4, 6),
            )
        }
        "kl_right" => {
            let x = tensor(vec![4, 6], uniform(r, 24, -2.0, 2.0));
            let p = uniform(r, 24, -2.0, 2.0);
            let pr = f64s(&p);
            compare(
                &x,
                move |g, v| {
                    let pv = g.leaf_from(vec![4, 6], p.clone(), false)?;
                    g.kl_divergence(pv, v)
                },
                move |vals| refmath::kl(&pr, &f64s(vals), 4, 6),
            )
        }
        "cw_margin" => {
            let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..6)).collect();
            let kappa = 0.1f32;
            let x = loop {
                let cand = uniform(r, 24, -2.0, 2.0);
                if margin_gaps_ok(&cand, &labels, 6, kappa) {
                    break tensor(vec![4, 6], cand);
                }
            };
            let lr = labels.clone();
            compare(
                &x,
                move |g, v| g.cw_margin(v, &labels, kappa),
                move |vals| refmath::cw_margin(&f64s(vals), 4, 6, &lr, kappa as f64),
            )
        }
        "inject_x" => {
            let x = tensor(vec![2, 1, 4, 4], uniform(r, 32, 0.0, 1.0));
            let f = uniform(r, 64, 0.0, 1.0);
            let w = uniform(r, 2 * 64, -1.0, 1.0);
            let (fr, wr) = (f64s(&f), w.clone());
            compare(
                &x,
                move |g, v| {
                    let fv = g.leaf_from(vec![1, 8, 8], f.clone(), false)?;
                    let y = g.inject(v, fv, 2)?;
                    contract(g, y, &w)
                },
                move |vals| {
                    let y = refmath::inject(&f64s(vals), (2, 1, 4, 4), &fr, 2);
                    refmath::contract(&y, &wr)
                },
            )
        }
        "inject_frame" => {
            let f = tensor(vec![1, 8, 8], uniform(r, 64, 0.0, 1.0));
            let x = uniform(r, 32, 0.0, 1.0);
            let w = uniform(r, 2 * 64, -1.0, 1.0);
            let (xr, wr) = (f64s(&x), w.clone());
            compare(
                &f,
                move |g, v| {
                    let xv = g.leaf_from(vec![2, 1, 4, 4], x.clone(), false)?;
                    let y = g.inject(xv, v, 2)?;
                    contract(g, y, &w)
                },
                move |vals| {
                    let y = refmath::inject(&xr, (2, 1, 4, 4), &f64s(vals), 2);
                    refmath::contract(&y, &wr)
                },
            )
        }
        "model_input_gradient" => {
            let model = Model::build("cnn-small", (1, 12, 12), 10, r.gen_range(0..1_000)).unwrap();
            let x = tensor(vec![2, 1, 12, 12], uniform(r, 288, 0.0, 1.0));
            let labels: Vec<usize> = (0..2).map(|_| r.gen_range(0..10)).collect();
            let (_, ad) = model.input_gradient(&x, &labels).unwrap();
            let p: Vec<Vec<f64>> = model.params().iter().map(|t| refmath::f64s(t.data())).collect();
            let eval = |vals: &[f32]| refmath::cnn_small(&p, &f64s(vals), &labels);

            // Per-pixel central difference. A pixel only counts when the
            // relu/pool branch pattern is identical at both endpoints; the
            // pre-activations are piecewise linear along the step, so equal
            // endpoint patterns rule out any flip inside the interval and the
            // difference quotient is exact up to the CE curvature.
            let mut coords: Vec<usize> = (0..x.data().len()).collect();
            for i in (1..coords.len()).rev() {
                coords.swap(i, r.gen_range(0..=i));
            }
            let mut xs = x.data().to_vec();
            let mut ad_sub = Vec::new();
            let mut fd_sub = Vec::new();
            for &i in &coords {
                let orig = xs[i];
                let (hi, lo) = (orig + FD_H, orig - FD_H);
                xs[i] = hi;
                let (fp, sig_p) = eval(&xs);
                xs[i] = lo;
                let (fm, sig_m) = eval(&xs);
                xs[i] = orig;
                if sig_p != sig_m {
                    continue;
                }
                ad_sub.push(ad[i]);
                fd_sub.push((fp - fm) / (hi as f64 - lo as f64));
                if ad_sub.len() == 24 {
                    break;
                }
            }
            assert!(ad_sub.len() >= 20, "too few branch-stable pixels");
            vec_rel_err(&ad_sub, &fd_sub)
        }
        other => panic!("no gradcheck named '{}'", other),
    }
}

fn pool_gaps_ok(x: &[f32], window: usize, h: usize, w: usize) -> bool {
    for plane in x.chunks(h * w) {
        for by in 0..h / window {
            for bx in 0..w / window {
                let mut vals = Vec::with_capacity(window * window);
                for dy in 0..window {
                    for dx in 0..window {
                        vals.push(plane[(by * window + dy) * w + bx * window + dx]);
                    }
                }
                vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if vals[0] - vals[1] < KINK_MARGIN {
                    return false;
                }
            }
        }
    }
    true
}

fn margin_gaps_ok(logits: &[f32], labels: &[usize], k: usize, kappa: f32) -> bool {
    for (row, &y) in logits.chunks(k).zip(labels) {
        let mut others: Vec<f32> = row
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != y)
            .map(|(_, v)| *v)
            .collect();
        others.sort_by(|a, b| b.partial_cmp(a).unwrap());
        // max-over-others kink and the kappa hinge kink
        if others[0] - others[1] < KINK_MARGIN {
            return false;
        }
        if ((row[y] - others[0]) + kappa).abs() < KINK_MARGIN {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalogue_covers_every_probe() {
        for name in GRADCHECK_NAMES {
            let mut r = rng::stream(0xC1, &[0]);
            // must not panic; the tolerance is the integration suite's job
            let _ = probe_once(name, &mut r);
        }
    }

    #[test]
    fn corrupted_derivative_rule_is_caught() {
        // a 1% scale error on the reference slope must trip the tolerance
        let mut r = rng::stream(0xC1, &[99]);
        let x = tensor(vec![24], uniform(&mut r, 24, -2.0, 2.0));
        let w = uniform(&mut r, 24, -1.0, 1.0);
        let wr = w.clone();
        let err = compare(
            &x,
            |g, v| {
                let y = g.tanh(v)?;
                contract(g, y, &w)
            },
            move |vals| 1.01 * refmath::contract(&refmath::tanh(&refmath::f64s(vals)), &wr),
        );
        assert!(err > GRAD_TOL, "harness failed to flag a wrong gradient: {err:.2e}");
    }
}
