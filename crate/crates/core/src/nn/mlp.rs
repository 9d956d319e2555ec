use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{join, Parameters};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    pub fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn forward(self, x: &Tensor) -> Tensor {
        if self == Activation::Identity {
            x.clone()
        } else {
            x.map(|v| self.apply(v))
        }
    }

    /// Chain rule through the activation given its output `y`.
    pub fn backward(self, y: &Tensor, dy: &Tensor) -> Tensor {
        if self == Activation::Identity {
            return dy.clone();
        }
        let mut out = dy.clone();
        for (g, &v) in out.data_mut().iter_mut().zip(y.data()) {
            *g *= self.grad_from_output(v);
        }
        out
    }
}

/// Affine map `y = x Wᵀ + b`, weight stored as `out x in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform(−1/√fan_in, 1/√fan_in) weights, zero bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::matrix(output, input, data).expect("positive dims"),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut l = Self::zeros(dim, dim);
        for i in 0..dim {
            l.weight.set(i, i, 1.0);
        }
        l
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("Linear::forward", self.input_dim(), x.cols()));
        }
        let mut y = x.matmul_t(&self.weight)?;
        let b = self.bias.data();
        for r in 0..y.rows() {
            for (v, bi) in y.row_mut(r).iter_mut().zip(b) {
                *v += bi;
            }
        }
        Ok(y)
    }

    /// Returns parameter gradients and the gradient w.r.t. `x`.
    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<(Linear, Tensor)> {
        let dw = dy.t_matmul(x)?;
        let db = dy.column_sums();
        let dx = dy.matmul(&self.weight)?;
        Ok((Linear { weight: dw, bias: db }, dx))
    }

    /// Parameter gradients only.
    pub fn backward_params(&self, x: &Tensor, dy: &Tensor) -> Result<Linear> {
        Ok(Linear {
            weight: dy.t_matmul(x)?,
            bias: dy.column_sums(),
        })
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Feed-forward stack: hidden layers use `hidden`, the output layer is affine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
}

/// Per-layer inputs recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Tensor>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Self { layers, hidden }
    }

    pub fn from_layers(layers: Vec<Linear>, hidden: Activation) -> Result<Self> {
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::shape(
                    format!("Mlp layer {}", i + 1),
                    w[0].output_dim(),
                    w[1].input_dim(),
                ));
            }
        }
        Ok(Self { layers, hidden })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("Mlp::forward", self.input_dim(), x.cols()));
        }
        x.ensure_finite("Mlp input")?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(&h)?;
            inputs.push(h);
            h = if i < last { self.hidden.forward(&y) } else { y };
        }
        Ok((h, MlpCache { inputs }))
    }

    /// Backpropagates `dout`; returns parameter gradients and the input gradient.
    pub fn backward(&self, cache: &MlpCache, dout: &Tensor) -> Result<(Mlp, Tensor)> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut d = dout.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (g, dx) = layer.backward(&cache.inputs[i], &d)?;
            grads.push(g);
            d = if i > 0 {
                // cache.inputs[i] is the activated output of layer i-1
                self.hidden.backward(&cache.inputs[i], &dx)
            } else {
                dx
            };
        }
        grads.reverse();
        Ok((
            Mlp {
                layers: grads,
                hidden: self.hidden,
            },
            d,
        ))
    }
}

impl Parameters for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.layers.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.layers.visit_mut(prefix, f);
    }
}
