//! The trainable frame placed around every image.
//!
//! The frame lives on a canvas the size of the padded input. Two invariants
//! hold at all times: interior coordinates are exactly zero, and border
//! pixels stay inside [0, 1] (they are pixels, the model sees them raw).

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone)]
pub struct BoosterSignal {
    width: usize,
    channels: usize,
    inner: (usize, usize),
    frame: Tensor, // [c, h + 2*width, w + 2*width]
}

impl BoosterSignal {
    pub fn null(width: usize, channels: usize, inner: (usize, usize)) -> Self {
        let (h, w) = inner;
        let frame = Tensor::zeros(vec![channels, h + 2 * width, w + 2 * width]);
        BoosterSignal {
            width,
            channels,
            inner,
            frame,
        }
    }

    /// Uniform [0,1] on the border, zero interior; the draw consumes the
    /// full canvas in row-major order so the result does not depend on the
    /// mask implementation.
    pub fn random(width: usize, channels: usize, inner: (usize, usize), seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[tag::SIGNAL_INIT]);
        let mut s = BoosterSignal::null(width, channels, inner);
        let n = s.frame.numel();
        let draws: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        s.frame.data_mut().copy_from_slice(&draws);
        s.zero_interior();
        s
    }

    pub fn from_frame(width: usize, channels: usize, inner: (usize, usize), data: Vec<f32>) -> Result<Self> {
        let (h, w) = inner;
        let want = channels * (h + 2 * width) * (w + 2 * width);
        if data.len() != want {
            return Err(Error::shape(format!(
                "frame: expected {} values for width {}, got {}",
                want,
                width,
                data.len()
            )));
        }
        let mut s = BoosterSignal {
            width,
            channels,
            inner,
            frame: Tensor::from_vec(vec![channels, h + 2 * width, w + 2 * width], data)?,
        };
        s.zero_interior();
        Ok(s)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn inner_dims(&self) -> (usize, usize) {
        self.inner
    }

    pub fn canvas_dims(&self) -> (usize, usize, usize) {
        let (h, w) = self.inner;
        (self.channels, h + 2 * self.width, w + 2 * self.width)
    }

    pub fn frame(&self) -> &Tensor {
        &self.frame
    }

    pub fn frame_data(&self) -> &[f32] {
        self.frame.data()
    }

    pub fn is_null(&self) -> bool {
        self.frame.data().iter().all(|v| *v == 0.0)
    }

    pub fn l2_norm(&self) -> f32 {
        self.frame.l2_norm()
    }

    /// 1.0 at interior (image) coordinates of the canvas, 0.0 on the border.
    pub fn interior_mask(&self) -> Vec<f32> {
        let (c, hf, wf) = self.canvas_dims();
        let (h, w) = self.inner;
        let mut m = vec![0.0f32; c * hf * wf];
        for cc in 0..c {
            for y in self.width..self.width + h {
                let row = cc * hf * wf + y * wf;
                for x in self.width..self.width + w {
                    m[row + x] = 1.0;
                }
            }
        }
        m
    }

    /// One plain descent step on the border pixels, then project back to the
    /// invariants. Gradient layout must match the canvas.
    pub fn apply_step(&mut self, grad: &[f32], lr: f32) -> Result<()> {
        if grad.len() != self.frame.numel() {
            return Err(Error::shape(format!(
                "signal step: gradient has {} values, frame has {}",
                grad.len(),
                self.frame.numel()
            )));
        }
        for (p, g) in self.frame.data_mut().iter_mut().zip(grad) {
            *p = (*p - lr * g).clamp(0.0, 1.0);
        }
        self.zero_interior();
        Ok(())
    }

    fn zero_interior(&mut self) {
        let (c, hf, wf) = self.canvas_dims();
        let (h, w) = self.inner;
        let width = self.width;
        let data = self.frame.data_mut();
        for cc in 0..c {
            for y in width..width + h {
                let row = cc * hf * wf + y * wf;
                data[row + width..row + width + w].fill(0.0);
            }
        }
    }

    /// Compose the canvas batch without a graph; used by eval paths.
    pub fn inject_batch(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels || (h, w) != self.inner {
            return Err(Error::shape(format!(
                "inject: batch [{}, {}, {}, {}] does not match signal for {}x{}x{}",
                n, c, h, w, self.channels, self.inner.0, self.inner.1
            )));
        }
        let out = crate::ops::inject_forward(x.data(), (n, c, h, w), self.frame.data(), self.width);
        let (cc, hf, wf) = self.canvas_dims();
        debug_assert_eq!(cc, c);
        Tensor::from_vec(vec![n, c, hf, wf], out)
    }
}

/// Per-example frame choice from a pool, one draw per example. Composes the
/// canvases directly; all frames must share geometry.
pub fn inject_batch_pooled(x: &Tensor, pool: &[BoosterSignal], rng: &mut impl Rng) -> Result<Tensor> {
    if pool.is_empty() {
        return Err(Error::config("signal pool is empty"));
    }
    let (n, c, h, w) = x.dims4()?;
    let geom = pool[0].canvas_dims();
    if pool.iter().any(|s| s.canvas_dims() != geom) {
        return Err(Error::config("signal pool mixes canvas geometries"));
    }
    let (_, hf, wf) = geom;
    let mut out = Vec::with_capacity(n * c * hf * wf);
    for i in 0..n {
        let s = &pool[rng.gen_range(0..pool.len())];
        let xi = &x.data()[i * c * h * w..(i + 1) * c * h * w];
        out.extend(crate::ops::inject_forward(xi, (1, c, h, w), s.frame_data(), s.width()));
    }
    Tensor::from_vec(vec![n, c, hf, wf], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interior_zero_survives_updates() {
        let mut s = BoosterSignal::random(2, 1, (4, 4), 99);
        assert!(!s.is_null());
        let n = s.frame().numel();
        s.apply_step(&vec![-0.7; n], 0.5).unwrap(); // pushes everything up
        let mask = s.interior_mask();
        for (v, m) in s.frame_data().iter().zip(&mask) {
            if *m == 1.0 {
                assert_eq!(*v, 0.0);
            } else {
                assert!(*v >= 0.0 && *v <= 1.0);
            }
        }
    }

    #[test]
    fn step_clamps_to_pixel_range() {
        let mut s = BoosterSignal::null(1, 1, (2, 2));
        let n = s.frame().numel();
        s.apply_step(&vec![1.0; n], 10.0).unwrap(); // would go to -10
        assert!(s.frame_data().iter().all(|v| *v == 0.0));
        s.apply_step(&vec![-1.0; n], 10.0).unwrap(); // border saturates at 1
        let mask = s.interior_mask();
        for (v, m) in s.frame_data().iter().zip(&mask) {
            assert_eq!(*v, if *m == 1.0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn zero_width_is_inert() {
        let s = BoosterSignal::random(0, 1, (3, 3), 5);
        assert!(s.is_null()); // no border coordinates exist
        let x = Tensor::filled(vec![2, 1, 3, 3], 0.25);
        let out = s.inject_batch(&x).unwrap();
        assert_eq!(out.shape(), &[2, 1, 3, 3]);
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn pooled_injection_draws_per_example() {
        let a = BoosterSignal::random(1, 1, (2, 2), 1);
        let b = BoosterSignal::random(1, 1, (2, 2), 2);
        let x = Tensor::zeros(vec![8, 1, 2, 2]);
        let mut rng = crate::rng::stream(3, &[crate::rng::tag::POOL_CHOICE]);
        let out = inject_batch_pooled(&x, &[a.clone(), b.clone()], &mut rng).unwrap();
        let plane = 16;
        let mut seen_a = false;
        let mut seen_b = false;
        for i in 0..8 {
            let canvas = &out.data()[i * plane..(i + 1) * plane];
            if canvas == a.frame_data() {
                seen_a = true;
            } else if canvas == b.frame_data() {
                seen_b = true;
            } else {
                panic!("canvas matches neither frame");
            }
        }
        assert!(seen_a && seen_b, "8 draws should hit both frames");
    }
}
