//! Affine layers and ReLU MLPs that can be evaluated directly or bound to a
//! [`Tape`] for differentiation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grad::{Gradients, Tape, Var};
use crate::tensor::Tensor2D;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in × out`
    pub weight: Tensor2D,
    /// `1 × out`
    pub bias: Tensor2D,
}

impl Linear {
    /// Weights uniform in `±1/sqrt(fan_in)`, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self::init_with_gain(fan_in, fan_out, 1.0, rng)
    }

    /// Weights uniform in `±gain/sqrt(fan_in)`, zero bias.
    pub fn init_with_gain(fan_in: usize, fan_out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let bound = gain / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor2D::from_vec(fan_in, fan_out, data).expect("sized"),
            bias: Tensor2D::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor2D::zeros(fan_in, fan_out),
            bias: Tensor2D::zeros(1, fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor2D) -> Result<Tensor2D> {
        x.affine(&self.weight, &self.bias)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLinear {
        BoundLinear {
            weight: tape.param(self.weight.clone()),
            bias: tape.param(self.bias.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.affine(x, self.weight, self.bias)
    }

    pub fn grads(&self, g: &Gradients) -> Vec<Tensor2D> {
        vec![g.get(self.weight), g.get(self.bias)]
    }
}

/// Affine layers with ReLU between them; the last layer is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> Self {
        Self::init_with_gain(dims, 1.0, rng)
    }

    pub fn init_with_gain(dims: &[usize], gain: f64, rng: &mut impl Rng) -> Self {
        assert!(
            dims.len() >= 2,
            "an MLP needs at least input and output widths"
        );
        Self {
            layers: dims
                .windows(2)
                .map(|w| Linear::init_with_gain(w[0], w[1], gain, rng))
                .collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn forward(&self, x: &Tensor2D) -> Result<Tensor2D> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp {
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor2D> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2D> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|t| t.shape()).collect()
    }

    /// Parameter names `<prefix>.<layer>.{w,b}`, aligned with [`Mlp::tensors`].
    pub fn names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.{i}.w"), format!("{prefix}.{i}.b")])
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<BoundLinear>,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Gradients aligned with [`Mlp::tensors`].
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor2D> {
        self.layers.iter().flat_map(|l| l.grads(g)).collect()
    }
}
