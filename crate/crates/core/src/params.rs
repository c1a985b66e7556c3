//! Uniform access to named parameter tensors.
//!
//! Gradients reuse the parameter structs themselves, so anything implementing
//! [`Parameters`] can be flattened for the optimizer, averaged for SWA, zeroed
//! and serialized in one fixed traversal order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub trait Parameters {
    /// Visits every tensor in a fixed order.
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.num_params();
        if flat.len() != expected {
            return Err(Error::shape(
                "load_flat",
                format!("expected {expected} values, got {}", flat.len()),
            ));
        }
        let mut offset = 0;
        self.visit_mut(&mut |_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }

    fn fill_zero(&mut self) {
        self.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
    }

    /// `self += other`, tensor by tensor.
    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut offset = 0;
        self.visit_mut(&mut |_, t| {
            for v in t.data_mut() {
                *v += flat[offset];
                offset += 1;
            }
        });
    }

    fn scale(&mut self, factor: f64) {
        self.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v *= factor));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.is_finite());
        ok
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, _| out.push(name.to_string()));
        out
    }
}

/// Zero-initialized copy with the same shapes (a gradient buffer).
pub fn zeros_like<P: Parameters + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.fill_zero();
    z
}

/// A dense affine map `y = W x + b` with `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::shape(
                "Linear::new",
                format!("weight {:?}, bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        Ok(Self { weight, bias })
    }

    /// Gaussian weights with variance `gain / in_dim`, zero bias.
    pub fn init(out_dim: usize, in_dim: usize, gain: f64, rng: &mut crate::rng::Rng) -> Self {
        let std = (gain / in_dim as f64).sqrt();
        let w = (0..out_dim * in_dim).map(|_| std * rng.normal()).collect();
        Self {
            weight: Tensor::matrix(out_dim, in_dim, w).expect("consistent shape"),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Applies the map to each row of `x` (`[rows, in]` -> `[rows, out]`).
    pub fn forward_rows(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (o, i) = (self.out_dim(), self.in_dim());
        let mut y = Vec::with_capacity(rows * o);
        for _ in 0..rows {
            y.extend_from_slice(self.bias.data());
        }
        crate::tensor::matmul_bt_into(x, self.weight.data(), &mut y, rows, i, o);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward_rows(&self, x: &[f64], dy: &[f64], rows: usize, grad: &mut Linear) -> Vec<f64> {
        let (o, i) = (self.out_dim(), self.in_dim());
        crate::tensor::matmul_at_into(dy, x, grad.weight.data_mut(), o, rows, i);
        for r in 0..rows {
            crate::tensor::axpy(1.0, &dy[r * o..(r + 1) * o], grad.bias.data_mut());
        }
        let mut dx = vec![0.0; rows * i];
        crate::tensor::matmul_into(dy, self.weight.data(), &mut dx, rows, o, i);
        dx
    }

    /// Parameter-gradient-free variant of [`Linear::backward_rows`].
    pub fn backward_input(&self, dy: &[f64], rows: usize) -> Vec<f64> {
        let (o, i) = (self.out_dim(), self.in_dim());
        let mut dx = vec![0.0; rows * i];
        crate::tensor::matmul_into(dy, self.weight.data(), &mut dx, rows, o, i);
        dx
    }
}

impl Parameters for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("weight", &self.weight);
        f("bias", &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}
