//! Dense n-dimensional f32 tensor.
//!
//! The single numeric currency of the crate: inputs, parameters, signal
//! frames, perturbations and gradients are all `Tensor`s. Storage is
//! row-major, 32-bit float throughout.

use crate::error::{Error, Result};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    /// Build from raw parts. Fails unless `product(shape) == data.len()`.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform draw in `[lo, hi)`, element order fixed by the stream.
    pub fn rand_uniform(shape: impl Into<Vec<usize>>, lo: f32, hi: f32, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Attach a gradient; must match the tensor's own shape.
    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient length {} != tensor length {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Interpret as `[n, c, h, w]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!("expected 4-d tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn l2_norm(&self) -> f32 {
        self.data.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() as f32
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise a - b.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "sub: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Tensor::from_vec(self.shape.clone(), data)
    }

    /// Elementwise a + b.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Tensor::from_vec(self.shape.clone(), data)
    }

    /// Copy of row `i` along the leading axis.
    pub fn slice_leading(&self, i: usize) -> Result<Tensor> {
        if self.shape.is_empty() || i >= self.shape[0] {
            return Err(Error::shape(format!(
                "leading index {} out of range for shape {:?}",
                i, self.shape
            )));
        }
        let row = self.numel() / self.shape[0];
        let data = self.data[i * row..(i + 1) * row].to_vec();
        let mut shape = vec![1];
        shape.extend_from_slice(&self.shape[1..]);
        Tensor::from_vec(shape, data)
    }

    /// Stack tensors with identical trailing shape along a new leading axis.
    pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
        let first = rows.first().ok_or_else(|| Error::shape("stack_rows: empty input"))?;
        let trailing = &first.shape[1..];
        let mut data = Vec::with_capacity(rows.len() * first.numel() / first.shape[0].max(1));
        let mut n = 0;
        for r in rows {
            if &r.shape[1..] != trailing {
                return Err(Error::shape("stack_rows: trailing shapes differ"));
            }
            n += r.shape[0];
            data.extend_from_slice(&r.data);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(trailing);
        Tensor::from_vec(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::from_vec(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn grad_shape_enforced() {
        let mut t = Tensor::zeros(vec![4]);
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        assert!(t.set_grad(vec![1.0; 4]).is_ok());
        assert_eq!(t.grad().unwrap(), &[1.0; 4]);
    }

    #[test]
    fn rand_uniform_is_seeded() {
        let mut a = crate::rng::stream(3, &[1]);
        let mut b = crate::rng::stream(3, &[1]);
        let ta = Tensor::rand_uniform(vec![8], 0.0, 1.0, &mut a);
        let tb = Tensor::rand_uniform(vec![8], 0.0, 1.0, &mut b);
        assert_eq!(ta.data(), tb.data());
        assert!(ta.data().iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn slice_and_stack_round_trip() {
        let t = Tensor::from_vec(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let rows: Vec<Tensor> = (0..3).map(|i| t.slice_leading(i).unwrap()).collect();
        let back = Tensor::stack_rows(&rows).unwrap();
        assert_eq!(back, t.clone().with_requires_grad(false));
    }
}
