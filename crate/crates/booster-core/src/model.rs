//! Convolutional classifier assembled on top of the tape.
//!
//! A model is a layer list plus an ordered parameter vector; the order is the
//! contract shared by the optimizer, checkpoints, and `forward_graph`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::Reduction;
use crate::rng::{self, tag};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Debug)]
enum Layer {
    /// kernel/bias are indices into the parameter vector
    Conv {
        kernel: usize,
        bias: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        window: usize,
    },
    Affine {
        weight: usize,
        bias: usize,
    },
}

pub struct Model {
    arch: String,
    input: (usize, usize, usize),
    num_classes: usize,
    layers: Vec<Layer>,
    params: Vec<Tensor>,
    param_names: Vec<String>,
}

struct Builder {
    layers: Vec<Layer>,
    params: Vec<Tensor>,
    param_names: Vec<String>,
    shape: (usize, usize, usize), // c, h, w flowing through conv stages
    flat: Option<usize>,          // set once an affine flattens
    convs: usize,
    fcs: usize,
}

impl Builder {
    fn new(input: (usize, usize, usize)) -> Self {
        Builder {
            layers: Vec::new(),
            params: Vec::new(),
            param_names: Vec::new(),
            shape: input,
            flat: None,
            convs: 0,
            fcs: 0,
        }
    }

    fn he_uniform(fan_in: usize, shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
        let bound = (6.0 / fan_in as f32).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::from_vec(shape, data).unwrap().with_requires_grad(true)
    }

    fn conv(&mut self, co: usize, k: usize, padding: usize, rng: &mut impl Rng) -> Result<()> {
        let (ci, h, w) = self.shape;
        self.convs += 1;
        let kernel = Builder::he_uniform(ci * k * k, vec![co, ci, k, k], rng);
        let bias = Tensor::zeros(vec![co]).with_requires_grad(true);
        let ki = self.push_param(format!("conv{}.kernel", self.convs), kernel);
        let bi = self.push_param(format!("conv{}.bias", self.convs), bias);
        self.layers.push(Layer::Conv {
            kernel: ki,
            bias: bi,
            stride: 1,
            padding,
        });
        let (oh, ow) = crate::ops::conv2d_out_dims(h, w, k, k, 1, padding)?;
        self.shape = (co, oh, ow);
        Ok(())
    }

    fn relu(&mut self) {
        self.layers.push(Layer::Relu);
    }

    fn pool(&mut self, window: usize) {
        self.layers.push(Layer::MaxPool { window });
        let (c, h, w) = self.shape;
        self.shape = (c, h / window, w / window);
    }

    fn affine(&mut self, d_out: usize, rng: &mut impl Rng) {
        let d_in = self.flat.unwrap_or_else(|| {
            let (c, h, w) = self.shape;
            c * h * w
        });
        self.fcs += 1;
        let weight = Builder::he_uniform(d_in, vec![d_out, d_in], rng);
        let bias = Tensor::zeros(vec![d_out]).with_requires_grad(true);
        let wi = self.push_param(format!("fc{}.weight", self.fcs), weight);
        let bi = self.push_param(format!("fc{}.bias", self.fcs), bias);
        self.layers.push(Layer::Affine { weight: wi, bias: bi });
        self.flat = Some(d_out);
    }

    fn push_param(&mut self, name: String, t: Tensor) -> usize {
        self.params.push(t);
        self.param_names.push(name);
        self.params.len() - 1
    }
}

impl Model {
    /// Known architectures: "cnn-small" (2 conv stages) and "cnn-mid"
    /// (same depth, double width). Initialization draws a dedicated stream
    /// from the seed, so models with equal (arch, input, seed) are identical.
    pub fn build(arch: &str, input: (usize, usize, usize), num_classes: usize, seed: u64) -> Result<Model> {
        let mut rng = rng::stream(seed, &[tag::MODEL_INIT]);
        let mut b = Builder::new(input);
        match arch {
            "cnn-small" => {
                b.conv(8, 3, 1, &mut rng)?;
                b.relu();
                b.pool(2);
                b.conv(16, 3, 1, &mut rng)?;
                b.relu();
                b.pool(2);
                b.affine(64, &mut rng);
                b.relu();
                b.affine(num_classes, &mut rng);
            }
            "cnn-mid" => {
                b.conv(16, 3, 1, &mut rng)?;
                b.relu();
                b.pool(2);
                b.conv(32, 3, 1, &mut rng)?;
                b.relu();
                b.pool(2);
                b.affine(128, &mut rng);
                b.relu();
                b.affine(num_classes, &mut rng);
            }
            other => {
                return Err(Error::config(format!(
                    "unknown architecture '{}'; expected cnn-small or cnn-mid",
                    other
                )))
            }
        }
        Ok(Model {
            arch: arch.to_string(),
            input,
            num_classes,
            layers: b.layers,
            params: b.params,
            param_names: b.param_names,
        })
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn input_dims(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Replace a parameter's values; shape must match.
    pub fn set_param(&mut self, name: &str, data: Vec<f32>) -> Result<()> {
        let idx = self
            .param_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::config(format!("no parameter named '{}'", name)))?;
        if data.len() != self.params[idx].numel() {
            return Err(Error::shape(format!(
                "parameter '{}' wants {} values, got {}",
                name,
                self.params[idx].numel(),
                data.len()
            )));
        }
        self.params[idx].data_mut().copy_from_slice(&data);
        Ok(())
    }

    /// Append the classifier to the graph. Parameters become leaves with
    /// `requires_grad = trainable`; the returned vars line up with `params()`.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let mut param_vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let v = g.leaf_from(p.shape().to_vec(), p.data().to_vec(), trainable)?;
            param_vars.push(v);
        }
        let out = self.forward_graph_with(g, x, &param_vars)?;
        Ok((out, param_vars))
    }

    /// Forward pass reusing existing parameter leaves, so two passes (clean
    /// and adversarial) can share one set of gradients.
    pub fn forward_graph_with(&self, g: &mut Graph, x: Var, param_vars: &[Var]) -> Result<Var> {
        if param_vars.len() != self.params.len() {
            return Err(Error::config("forward_graph_with: wrong parameter var count"));
        }
        let mut cur = x;
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv {
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let c = g.conv2d(cur, param_vars[*kernel], *stride, *padding)?;
                    g.bias_channel(c, param_vars[*bias])?
                }
                Layer::Relu => g.relu(cur)?,
                Layer::MaxPool { window } => g.maxpool2d(cur, *window)?,
                Layer::Affine { weight, bias } => g.affine(cur, param_vars[*weight], param_vars[*bias])?,
            };
        }
        Ok(cur)
    }

    /// Pull gradients off the tape into the parameter tensors, replacing any
    /// previous values. Order must be the vars from `forward_graph`.
    pub fn absorb_grads(&mut self, g: &Graph, param_vars: &[Var]) -> Result<()> {
        if param_vars.len() != self.params.len() {
            return Err(Error::config("absorb_grads: var count mismatch"));
        }
        for (p, v) in self.params.iter_mut().zip(param_vars) {
            let grad = g
                .grad(*v)
                .ok_or_else(|| Error::config("absorb_grads: missing gradient; was backward run?"))?;
            p.set_grad(grad.to_vec())?;
        }
        Ok(())
    }

    /// Logits for a batch, parameters frozen.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let xv = g.leaf_from(x.shape().to_vec(), x.data().to_vec(), false)?;
        let (out, _) = self.forward_graph(&mut g, xv, false)?;
        Ok(g.value(out).to_vec())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        let k = self.num_classes;
        Ok(logits
            .chunks_exact(k)
            .map(|row| {
                let mut best = 0;
                for j in 1..k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f32> {
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f32 / labels.len().max(1) as f32)
    }

    /// Mean cross-entropy and its gradient w.r.t. the input batch.
    pub fn input_gradient(&self, x: &Tensor, labels: &[usize]) -> Result<(f32, Vec<f32>)> {
        let mut g = Graph::new();
        let xv = g.leaf_from(x.shape().to_vec(), x.data().to_vec(), true)?;
        let (logits, _) = self.forward_graph(&mut g, xv, false)?;
        let loss = g.softmax_cross_entropy(logits, labels, Reduction::Mean)?;
        g.backward(loss)?;
        let grad = g.grad(xv).expect("input requires grad").to_vec();
        Ok((g.scalar_value(loss), grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let a = Model::build("cnn-small", (1, 12, 12), 10, 7).unwrap();
        let b = Model::build("cnn-small", (1, 12, 12), 10, 7).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.data(), pb.data());
        }
        let c = Model::build("cnn-small", (1, 12, 12), 10, 8).unwrap();
        assert_ne!(a.params()[0].data(), c.params()[0].data());
    }

    #[test]
    fn logits_shape_and_grad_flow() {
        let m = Model::build("cnn-small", (1, 12, 12), 10, 1).unwrap();
        let x = Tensor::zeros(vec![3, 1, 12, 12]);
        let logits = m.logits(&x).unwrap();
        assert_eq!(logits.len(), 3 * 10);

        let mut g = Graph::new();
        let xv = g.leaf_from(vec![2, 1, 12, 12], vec![0.3; 2 * 144], false).unwrap();
        let (out, vars) = m.forward_graph(&mut g, xv, true).unwrap();
        let loss = g.softmax_cross_entropy(out, &[1, 2], Reduction::Mean).unwrap();
        g.backward(loss).unwrap();
        let mut m = m;
        m.absorb_grads(&g, &vars).unwrap();
        assert!(m.params().iter().all(|p| p.grad().is_some()));
        // at least the final bias must receive nonzero gradient
        let last_bias = m.params().last().unwrap();
        assert!(last_bias.grad().unwrap().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn unknown_arch_rejected() {
        assert!(matches!(
            Model::build("resnet-900", (1, 8, 8), 10, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn odd_input_sizes_flow_through() {
        // 30x30 pools to 15 then 7 with the floor rule; must still classify
        let m = Model::build("cnn-small", (1, 30, 30), 10, 3).unwrap();
        let x = Tensor::zeros(vec![1, 1, 30, 30]);
        assert_eq!(m.logits(&x).unwrap().len(), 10);
    }
}
