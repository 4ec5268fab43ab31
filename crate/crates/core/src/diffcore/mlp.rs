use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Softplus,
    Relu,
}

impl Activation {
    fn apply(self, g: &mut Graph, v: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(v),
            Activation::Softplus => g.softplus(v),
            Activation::Relu => g.relu(v),
        }
    }
}

/// Layout of a fully connected network stored in a flat parameter slice.
///
/// Layer `l` stores its weight matrix (`in x out`, row-major) followed by
/// its bias row. The output layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(sizes: Vec<usize>, activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        assert!(sizes.iter().all(|&s| s >= 1), "layer widths must be >= 1");
        Self { sizes, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for w in self.sizes.windows(2) {
            let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
            out.extend((0..w[0] * w[1]).map(|_| rng.gen_range(-bound..bound)));
            out.extend(std::iter::repeat_n(0.0, w[1]));
        }
        out
    }

    /// Forward pass; `flat` is a `1 x P` node holding this network's parameters.
    pub fn forward(&self, g: &mut Graph, flat: Var, x: Var) -> Var {
        let mut h = x;
        let mut offset = 0;
        let layers = self.sizes.len() - 1;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let weight = g.view(flat, offset, w[0], w[1]);
            offset += w[0] * w[1];
            let bias = g.view(flat, offset, 1, w[1]);
            offset += w[1];
            let z = g.matmul(h, weight);
            h = g.add(z, bias);
            if l + 1 < layers {
                h = self.activation.apply(g, h);
            }
        }
        h
    }
}
