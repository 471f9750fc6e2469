//! Parameter update rules.
//!
//! Both optimizers act on a fixed-order slice of tensors whose `grad` buffers
//! were filled by a backward pass. State vectors are indexed by position in
//! that slice, so callers must pass parameters in a stable order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// v <- momentum * v + g;  p <- p - lr * v
pub struct Sgd {
    lr: f32,
    momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    pub fn momentum(&self) -> f32 {
        self.momentum
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    /// Restore velocity saved in a checkpoint. Shapes are validated on the
    /// next `step` against the actual parameters.
    pub fn load_velocity(&mut self, v: Vec<Vec<f32>>) {
        self.velocity = v;
    }

    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::config(format!(
                "sgd: {} velocity buffers for {} parameters",
                self.velocity.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            if v.len() != p.numel() {
                return Err(Error::config("sgd: velocity/parameter size mismatch"));
            }
            let g = p
                .grad()
                .ok_or_else(|| Error::config("sgd: parameter has no gradient"))?
                .to_vec();
            let (lr, mom) = (self.lr, self.momentum);
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *vv = mom * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// Adam with the usual bias correction; the first step moves each coordinate
/// by almost exactly lr regardless of gradient scale.
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::config(format!(
                "adam: {} state buffers for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p
                .grad()
                .ok_or_else(|| Error::config("adam: parameter has no gradient"))?
                .to_vec();
            let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
            for ((pv, (mv, vv)), gv) in p.data_mut().iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(&g) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / b1t;
                let vhat = *vv / b2t;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
