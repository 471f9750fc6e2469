//! Reverse-mode autodiff over a flat tape.
//!
//! Every op appends one node and evaluates eagerly; `backward` walks the tape
//! once in reverse insertion order. Node ids are tape indices, which is what
//! `Error::Numerical` reports when a non-finite value or gradient shows up.

use crate::error::{Error, Result};
use crate::ops::{self, Reduction};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Relu {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Sign,
    Clamp {
        x: Var,
        lo: f32,
        hi: f32,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f32,
    },
    AddScalar {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        padding: usize,
        out_hw: (usize, usize),
    },
    BiasChannel {
        x: Var,
        b: Var,
    },
    MaxPool {
        x: Var,
        switches: Vec<u32>,
        out_hw: (usize, usize),
    },
    Affine {
        x: Var,
        w: Var,
        b: Var,
        n: usize,
        d_in: usize,
        d_out: usize,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        reduction: Reduction,
    },
    Kl {
        p: Var,
        q: Var,
    },
    CwMargin {
        logits: Var,
        labels: Vec<usize>,
        kappa: f32,
    },
    Inject {
        x: Var,
        frame: Var,
        width: usize,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any flowed there.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn scalar_value(&self, v: Var) -> f32 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "leaf: shape {:?} wants {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        self.push(Op::Leaf, shape, data, requires_grad)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f32>, requires_grad: bool) -> Result<Var> {
        let id = self.nodes.len();
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(id, "non-finite value produced in forward pass"));
        }
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
            grad: None,
        });
        Ok(Var(id))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // -- elementwise ---------------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = ops::relu_forward(self.value(x));
        self.push(Op::Relu { x }, self.nodes[x.0].shape.clone(), value, self.rg(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = ops::tanh_forward(self.value(x));
        self.push(Op::Tanh { x }, self.nodes[x.0].shape.clone(), value, self.rg(x))
    }

    /// Piecewise constant, so the output never carries gradient.
    pub fn sign(&mut self, x: Var) -> Result<Var> {
        let value = ops::sign_forward(self.value(x));
        self.push(Op::Sign, self.nodes[x.0].shape.clone(), value, false)
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var> {
        // partial_cmp also rejects NaN bounds
        if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
            return Err(Error::config(format!("clamp: lo {} must be < hi {}", lo, hi)));
        }
        let value = ops::clamp_forward(self.value(x), lo, hi);
        self.push(
            Op::Clamp { x, lo, hi },
            self.nodes[x.0].shape.clone(),
            value,
            self.rg(x),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let value: Vec<f32> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(
            Op::Add { a, b },
            self.nodes[a.0].shape.clone(),
            value,
            self.rg(a) || self.rg(b),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let value: Vec<f32> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.push(
            Op::Sub { a, b },
            self.nodes[a.0].shape.clone(),
            value,
            self.rg(a) || self.rg(b),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let value: Vec<f32> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push(
            Op::Mul { a, b },
            self.nodes[a.0].shape.clone(),
            value,
            self.rg(a) || self.rg(b),
        )
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let value: Vec<f32> = self.value(x).iter().map(|v| v * c).collect();
        self.push(Op::Scale { x, c }, self.nodes[x.0].shape.clone(), value, self.rg(x))
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Result<Var> {
        let value: Vec<f32> = self.value(x).iter().map(|v| v + c).collect();
        self.push(Op::AddScalar { x }, self.nodes[x.0].shape.clone(), value, self.rg(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = vec![self.value(x).iter().sum::<f32>()];
        self.push(Op::Sum { x }, vec![], value, self.rg(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::shape("mean of empty tensor"));
        }
        let value = vec![self.value(x).iter().sum::<f32>() / n as f32];
        self.push(Op::Mean { x }, vec![], value, self.rg(x))
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(format!(
                "{}: shape mismatch {:?} vs {:?}",
                what, self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    // -- structured ops ------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let xd = self.dims4(x, "conv2d input")?;
        let kd = self.dims4(k, "conv2d kernel")?;
        if xd.1 != kd.1 {
            return Err(Error::shape(format!(
                "conv2d: input channels {} != kernel channels {}",
                xd.1, kd.1
            )));
        }
        let out_hw = ops::conv2d_out_dims(xd.2, xd.3, kd.2, kd.3, stride, padding)?;
        let value = ops::conv2d_forward(self.value(x), xd, self.value(k), kd, stride, padding, out_hw);
        self.push(
            Op::Conv2d {
                x,
                k,
                stride,
                padding,
                out_hw,
            },
            vec![xd.0, kd.0, out_hw.0, out_hw.1],
            value,
            self.rg(x) || self.rg(k),
        )
    }

    pub fn bias_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let xd = self.dims4(x, "bias input")?;
        if self.nodes[b.0].shape != [xd.1] {
            return Err(Error::shape(format!(
                "bias: expected [{}], got {:?}",
                xd.1, self.nodes[b.0].shape
            )));
        }
        let value = ops::bias_channel_forward(self.value(x), xd, self.value(b));
        self.push(
            Op::BiasChannel { x, b },
            self.nodes[x.0].shape.clone(),
            value,
            self.rg(x) || self.rg(b),
        )
    }

    /// Non-overlapping max pooling; trailing rows/cols that do not fill a
    /// window are dropped.
    pub fn maxpool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let xd = self.dims4(x, "maxpool input")?;
        if window == 0 || window > xd.2 || window > xd.3 {
            return Err(Error::shape(format!(
                "maxpool: window {} does not fit {}x{}",
                window, xd.2, xd.3
            )));
        }
        let (value, switches, out_hw) = ops::maxpool2d_forward(self.value(x), xd, window);
        self.push(
            Op::MaxPool { x, switches, out_hw },
            vec![xd.0, xd.1, out_hw.0, out_hw.1],
            value,
            self.rg(x),
        )
    }

    /// x: [n, ...] with trailing axes flattened, w: [d_out, d_in], b: [d_out].
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = &self.nodes[x.0].shape;
        if xs.is_empty() {
            return Err(Error::shape("affine: input must have a batch axis"));
        }
        let n = xs[0];
        let d_in: usize = xs[1..].iter().product();
        let ws = &self.nodes[w.0].shape;
        if ws.len() != 2 || ws[1] != d_in {
            return Err(Error::shape(format!(
                "affine: weight {:?} incompatible with input {:?} (d_in {})",
                ws, xs, d_in
            )));
        }
        let d_out = ws[0];
        if self.nodes[b.0].shape != [d_out] {
            return Err(Error::shape(format!(
                "affine: bias {:?}, expected [{}]",
                self.nodes[b.0].shape, d_out
            )));
        }
        let value = ops::affine_forward(self.value(x), n, d_in, self.value(w), d_out, self.value(b));
        self.push(
            Op::Affine {
                x,
                w,
                b,
                n,
                d_in,
                d_out,
            },
            vec![n, d_out],
            value,
            self.rg(x) || self.rg(w) || self.rg(b),
        )
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let (n, k) = self.dims2(logits, "cross-entropy logits")?;
        self.check_labels(labels, n, k)?;
        let value = vec![ops::softmax_ce_forward(self.value(logits), n, k, labels, reduction)];
        self.push(
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                reduction,
            },
            vec![],
            value,
            self.rg(logits),
        )
    }

    /// Mean over the batch of KL(softmax(p) || softmax(q)).
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let (n, k) = self.dims2(p, "kl p-logits")?;
        let (nq, kq) = self.dims2(q, "kl q-logits")?;
        if (n, k) != (nq, kq) {
            return Err(Error::shape(format!(
                "kl: logits shapes differ, [{}, {}] vs [{}, {}]",
                n, k, nq, kq
            )));
        }
        let value = vec![ops::kl_forward(self.value(p), self.value(q), n, k)];
        self.push(Op::Kl { p, q }, vec![], value, self.rg(p) || self.rg(q))
    }

    /// Sum over the batch of max(z_y - max_{j!=y} z_j, -kappa).
    pub fn cw_margin(&mut self, logits: Var, labels: &[usize], kappa: f32) -> Result<Var> {
        let (n, k) = self.dims2(logits, "margin logits")?;
        self.check_labels(labels, n, k)?;
        let value = vec![ops::cw_margin_forward(self.value(logits), n, k, labels, kappa)];
        self.push(
            Op::CwMargin {
                logits,
                labels: labels.to_vec(),
                kappa,
            },
            vec![],
            value,
            self.rg(logits),
        )
    }

    /// Center the batch inside a frame canvas. frame: [c, h+2*width, w+2*width].
    pub fn inject(&mut self, x: Var, frame: Var, width: usize) -> Result<Var> {
        let xd = self.dims4(x, "inject input")?;
        let (n, c, h, w) = xd;
        let want = vec![c, h + 2 * width, w + 2 * width];
        if self.nodes[frame.0].shape != want {
            return Err(Error::shape(format!(
                "inject: frame {:?}, expected {:?}",
                self.nodes[frame.0].shape, want
            )));
        }
        let value = ops::inject_forward(self.value(x), xd, self.value(frame), width);
        self.push(
            Op::Inject { x, frame, width },
            vec![n, c, h + 2 * width, w + 2 * width],
            value,
            self.rg(x) || self.rg(frame),
        )
    }

    fn dims4(&self, v: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 4 {
            return Err(Error::shape(format!("{}: expected 4 axes, got {:?}", what, s)));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::shape(format!("{}: expected 2 axes, got {:?}", what, s)));
        }
        Ok((s[0], s[1]))
    }

    fn check_labels(&self, labels: &[usize], n: usize, k: usize) -> Result<()> {
        if labels.len() != n {
            return Err(Error::shape(format!(
                "labels: {} entries for batch of {}",
                labels.len(),
                n
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= k) {
            return Err(Error::data(format!("label {} out of range for {} classes", bad, k)));
        }
        Ok(())
    }

    // -- backward ------------------------------------------------------------

    /// Reverse pass from a scalar loss. Visits each tape node exactly once,
    /// newest first; leaves reachable through differentiable ops end up with
    /// `grad(var)` set.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lid = loss.0;
        if self.nodes[lid].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward: loss must be scalar, got {:?}",
                self.nodes[lid].shape
            )));
        }
        if !self.nodes[lid].requires_grad {
            return Err(Error::config(
                "backward: loss does not depend on any tensor that requires grad",
            ));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[lid].grad = Some(vec![1.0]);

        for idx in (0..=lid).rev() {
            if self.nodes[idx].grad.is_none() {
                continue;
            }
            {
                let g = self.nodes[idx].grad.as_ref().unwrap();
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numerical(idx, "non-finite gradient in backward pass"));
                }
            }
            self.step_backward(idx);
        }
        Ok(())
    }

    fn step_backward(&mut self, idx: usize) {
        let (head, tail) = self.nodes.split_at_mut(idx);
        let node = &tail[0];
        let g = node.grad.as_deref().unwrap();
        match &node.op {
            Op::Leaf | Op::Sign => {}
            Op::Relu { x } => {
                if head[x.0].requires_grad {
                    let mut gx = vec![0.0f32; head[x.0].value.len()];
                    ops::relu_backward(&head[x.0].value, g, &mut gx);
                    add_into(&mut head[x.0], gx);
                }
            }
            Op::Tanh { x } => {
                if head[x.0].requires_grad {
                    let mut gx = vec![0.0f32; head[x.0].value.len()];
                    ops::tanh_backward(&head[x.0].value, g, &mut gx);
                    add_into(&mut head[x.0], gx);
                }
            }
            Op::Clamp { x, lo, hi } => {
                if head[x.0].requires_grad {
                    let mut gx = vec![0.0f32; head[x.0].value.len()];
                    ops::clamp_backward(&head[x.0].value, *lo, *hi, g, &mut gx);
                    add_into(&mut head[x.0], gx);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if head[a.0].requires_grad {
                    add_into(&mut head[a.0], g.to_vec());
                }
                if head[b.0].requires_grad {
                    add_into(&mut head[b.0], g.to_vec());
                }
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                if head[a.0].requires_grad {
                    add_into(&mut head[a.0], g.to_vec());
                }
                if head[b.0].requires_grad {
                    add_into(&mut head[b.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if head[a.0].requires_grad {
                    let ga: Vec<f32> = g.iter().zip(&head[b.0].value).map(|(u, v)| u * v).collect();
                    add_into(&mut head[a.0], ga);
                }
                if head[b.0].requires_grad {
                    let gb: Vec<f32> = g.iter().zip(&head[a.0].value).map(|(u, v)| u * v).collect();
                    add_into(&mut head[b.0], gb);
                }
            }
            Op::Scale { x, c } => {
                if head[x.0].requires_grad {
                    let c = *c;
                    add_into(&mut head[x.0], g.iter().map(|v| v * c).collect());
                }
            }
            Op::AddScalar { x } => {
                if head[x.0].requires_grad {
                    add_into(&mut head[x.0], g.to_vec());
                }
            }
            Op::Sum { x } => {
                if head[x.0].requires_grad {
                    let n = head[x.0].value.len();
                    add_into(&mut head[x.0], vec![g[0]; n]);
                }
            }
            Op::Mean { x } => {
                if head[x.0].requires_grad {
                    let n = head[x.0].value.len();
                    add_into(&mut head[x.0], vec![g[0] / n as f32; n]);
                }
            }
            Op::Conv2d {
                x,
                k,
                stride,
                padding,
                out_hw,
            } => {
                let (x, k, stride, padding, out_hw) = (*x, *k, *stride, *padding, *out_hw);
                let xd = shape4(&head[x.0].shape);
                let kd = shape4(&head[k.0].shape);
                if head[x.0].requires_grad {
                    let mut gx = vec![0.0f32; head[x.0].value.len()];
                    ops::conv2d_backward_input(g, xd, &head[k.0].value, kd, stride, padding, out_hw, &mut gx);
                    add_into(&mut head[x.0], gx);
                }
                if head[k.0].requires_grad {
                    let mut gk = vec![0.0f32; head[k.0].value.len()];
                    ops::conv2d_backward_kernel(g, &head[x.0].value, xd, kd, stride, padding, out_hw, &mut gk);
                    add_into(&mut head[k.0], gk);
                }
            }
            Op::BiasChannel { x, b } => {
                let (x, b) = (*x, *b);
                let xd = shape4(&head[x.0].shape);
                if head[x.0].requires_grad {
                    add_into(&mut head[x.0], g.to_vec());
                }
                if head[b.0].requires_grad {
                    let mut gb = vec![0.0f32; head[b.0].value.len()];
                    ops::bias_channel_backward_bias(g, xd, &mut gb);
                    add_into(&mut head[b.0], gb);
                }
            }
            Op::MaxPool { x, switches, out_hw } => {
                if head[x.0].requires_grad {
                    let xd = shape4(&head[x.0].shape);
                    let mut gx = vec![0.0f32; head[x.0].value.len()];
                    ops::maxpool2d_backward(g, switches, xd, *out_hw, &mut gx);
                    add_into(&mut head[x.0], gx);
                }
            }
            Op::Affine {
                x,
                w,
                b,
                n,
                d_in,
                d_out,
            } => {
                let (x, w, b, n, d_in, d_out) = (*x, *w, *b, *n, *d_in, *d_out);
                let mut gx = head[x.0].requires_grad.then(|| vec![0.0f32; head[x.0].value.len()]);
                let mut gw = head[w.0].requires_grad.then(|| vec![0.0f32; head[w.0].value.len()]);
                let mut gb = head[b.0].requires_grad.then(|| vec![0.0f32; head[b.0].value.len()]);
                ops::affine_backward(
                    g,
                    &head[x.0].value,
                    n,
                    d_in,
                    &head[w.0].value,
                    d_out,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    add_into(&mut head[x.0], gx);
                }
                if let Some(gw) = gw {
                    add_into(&mut head[w.0], gw);
                }
                if let Some(gb) = gb {
                    add_into(&mut head[b.0], gb);
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                reduction,
            } => {
                if head[logits.0].requires_grad {
                    let s = &head[logits.0].shape;
                    let (n, k) = (s[0], s[1]);
                    let mut gl = vec![0.0f32; head[logits.0].value.len()];
                    ops::softmax_ce_backward(&head[logits.0].value, n, k, labels, *reduction, g[0], &mut gl);
                    add_into(&mut head[logits.0], gl);
                }
            }
            Op::Kl { p, q } => {
                let (p, q) = (*p, *q);
                let s = &head[p.0].shape;
                let (n, k) = (s[0], s[1]);
                let mut gp = head[p.0].requires_grad.then(|| vec![0.0f32; n * k]);
                let mut gq = head[q.0].requires_grad.then(|| vec![0.0f32; n * k]);
                ops::kl_backward(
                    &head[p.0].value,
                    &head[q.0].value,
                    n,
                    k,
                    g[0],
                    gp.as_deref_mut(),
                    gq.as_deref_mut(),
                );
                if let Some(gp) = gp {
                    add_into(&mut head[p.0], gp);
                }
                if let Some(gq) = gq {
                    add_into(&mut head[q.0], gq);
                }
            }
            Op::CwMargin { logits, labels, kappa } => {
                if head[logits.0].requires_grad {
                    let s = &head[logits.0].shape;
                    let (n, k) = (s[0], s[1]);
                    let mut gl = vec![0.0f32; n * k];
                    ops::cw_margin_backward(&head[logits.0].value, n, k, labels, *kappa, g[0], &mut gl);
                    add_into(&mut head[logits.0], gl);
                }
            }
            Op::Inject { x, frame, width } => {
                let (x, frame, width) = (*x, *frame, *width);
                let xd = shape4(&head[x.0].shape);
                if head[x.0].requires_grad {
                    let mut gx = vec![0.0f32; head[x.0].value.len()];
                    ops::inject_backward_input(g, xd, width, &mut gx);
                    add_into(&mut head[x.0], gx);
                }
                if head[frame.0].requires_grad {
                    let mut gf = vec![0.0f32; head[frame.0].value.len()];
                    ops::inject_backward_frame(g, xd, width, &mut gf);
                    add_into(&mut head[frame.0], gf);
                }
            }
        }
    }
}

fn add_into(node: &mut Node, contribution: Vec<f32>) {
    match &mut node.grad {
        None => node.grad = Some(contribution),
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&contribution) {
                *a += b;
            }
        }
    }
}

fn shape4(s: &[usize]) -> (usize, usize, usize, usize) {
    (s[0], s[1], s[2], s[3])
}

/// Loss and input gradient in one call: build the subgraph with the supplied
/// closure, run backward, read the leaf's gradient.
pub fn grad_of<F>(x: &Tensor, build: F) -> Result<(f32, Vec<f32>)>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.leaf_from(x.shape().to_vec(), x.data().to_vec(), true)?;
    let loss = build(&mut g, leaf)?;
    g.backward(loss)?;
    let grad = g.grad(leaf).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
    Ok((g.scalar_value(loss), grad))
}

/// Central differences with f64 quotients; the oracle for gradient checks.
pub fn finite_diff_grad<F>(x: &[f32], h: f32, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f32]) -> f32,
{
    let mut xs = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs) as f64;
        xs[i] = orig - h;
        let fm = f(&xs) as f64;
        xs[i] = orig;
        g.push((fp - fm) / (2.0 * h as f64));
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, data: &[f32], rg: bool) -> Var {
        g.leaf_from(vec![data.len()], data.to_vec(), rg).unwrap()
    }

    #[test]
    fn chain_rule_by_hand() {
        // loss = mean(2 * relu(x)), x = [-1, 2, 3]
        // relu -> [0, 2, 3]; scaled -> [0, 4, 6]; mean = 10/3
        // d loss / dx = (2/3) * 1[x>0] = [0, 2/3, 2/3]
        let mut g = Graph::new();
        let x = leaf(&mut g, &[-1.0, 2.0, 3.0], true);
        let r = g.relu(x).unwrap();
        let s = g.scale(r, 2.0).unwrap();
        let loss = g.mean(s).unwrap();
        g.backward(loss).unwrap();
        assert!((g.scalar_value(loss) - 10.0 / 3.0).abs() < 1e-6);
        let gx = g.grad(x).unwrap();
        assert_eq!(gx[0], 0.0);
        assert!((gx[1] - 2.0 / 3.0).abs() < 1e-6);
        assert!((gx[2] - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x * x): grad = 2x, exercises one node feeding two slots
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1.5, -2.0], true);
        let m = g.mul(x, x).unwrap();
        let loss = g.sum(m).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, -4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1.0, 2.0], true);
        let r = g.relu(x).unwrap();
        assert!(matches!(g.backward(r), Err(Error::Shape(_))));
    }

    #[test]
    fn overflow_reports_node_id() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1e30], true);
        let err = g.scale(x, 1e30); // 1e60 overflows f32
        match err {
            Err(Error::Numerical { node, .. }) => assert_eq!(node, 1),
            Err(other) => panic!("expected numerical error, got {}", other),
            Ok(_) => panic!("overflow not detected"),
        }
    }

    #[test]
    fn sign_blocks_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2.0, -3.0], true);
        let s = g.sign(x).unwrap();
        assert!(!g.requires_grad(s));
        // loss = sum(x * sign(x)) = sum(|x|); grad = sign(x) since sign is constant
        let m = g.mul(x, s).unwrap();
        let loss = g.sum(m).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.scalar_value(loss), 5.0);
        assert_eq!(g.grad(x).unwrap(), &[1.0, -1.0]);
    }

    #[test]
    fn no_grad_leaf_gets_none() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1.0], true);
        let c = leaf(&mut g, &[4.0], false);
        let m = g.mul(x, c).unwrap();
        let loss = g.sum(m).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn tape_grows_one_node_per_op() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1.0, 2.0], true);
        let before = g.node_count();
        let mut v = x;
        for _ in 0..17 {
            v = g.relu(v).unwrap();
        }
        assert_eq!(g.node_count(), before + 17);
    }

    #[test]
    fn backward_twice_resets_grads() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3.0], true);
        let m = g.mul(x, x).unwrap();
        let loss = g.sum(m).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]); // not 12: grads reset per pass
    }

    #[test]
    fn clamp_gradient_strict_interior() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[-0.5, 0.0, 0.5, 1.0, 1.5], true);
        let c = g.clamp(x, 0.0, 1.0).unwrap();
        let loss = g.sum(c).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn finite_diff_matches_simple_quadratic() {
        let f = |v: &[f32]| v.iter().map(|x| x * x).sum::<f32>();
        let g = finite_diff_grad(&[1.0, -2.0, 0.5], 1e-3, f);
        assert!((g[0] - 2.0).abs() < 1e-3);
        assert!((g[1] + 4.0).abs() < 1e-3);
        assert!((g[2] - 1.0).abs() < 1e-3);
    }
}
