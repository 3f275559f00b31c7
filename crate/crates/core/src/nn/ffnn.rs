use crate::autodiff::{Array, Graph, Tensor};
use crate::error::{Error, Result};

/// Slope of the leaky ReLU used by every hidden layer that asks for one.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    LeakyRelu,
    Sigmoid,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Relu => 1,
            Activation::LeakyRelu => 2,
            Activation::Sigmoid => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Linear,
            1 => Activation::Relu,
            2 => Activation::LeakyRelu,
            3 => Activation::Sigmoid,
            _ => return None,
        })
    }

    pub(crate) fn apply(self, g: &mut Graph, x: Tensor) -> Tensor {
        match self {
            Activation::Linear => x,
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu => g.leaky_relu(x, LEAKY_SLOPE),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// One affine layer `x W + b` followed by an activation.
/// `weight` is `[in, out]`, `bias` is `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array,
    pub bias: Array,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Array, bias: Array, activation: Activation) -> Result<Self> {
        let (_, out) = weight.require_matrix("layer weight")?;
        if bias.shape() != [out] {
            return Err(Error::Shape {
                op: "layer bias",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Layer {
            weight,
            bias,
            activation,
        })
    }

    pub fn in_width(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_width(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Feedforward network of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffnn {
    layers: Vec<Layer>,
}

impl Ffnn {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a network needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_width() != pair[1].in_width() {
                return Err(Error::Shape {
                    op: "ffnn layers",
                    lhs: pair[0].weight.shape().to_vec(),
                    rhs: pair[1].weight.shape().to_vec(),
                });
            }
        }
        Ok(Ffnn { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn out_width(&self) -> usize {
        self.layers[self.layers.len() - 1].out_width()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters in binding order: weight then bias for each layer.
    pub fn params(&self) -> Vec<&Array> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.layer{i}.weight"), format!("{prefix}.layer{i}.bias")])
            .collect()
    }

    /// Places the parameters on `g`, as differentiable leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundFfnn {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (w, b) = if trainable {
                    (g.param(l.weight.clone()), g.param(l.bias.clone()))
                } else {
                    (g.constant(l.weight.clone()), g.constant(l.bias.clone()))
                };
                BoundLayer {
                    weight: w,
                    bias: b,
                    activation: l.activation,
                }
            })
            .collect();
        BoundFfnn {
            layers,
            in_width: self.in_width(),
        }
    }

    /// Plain evaluation without gradients.
    pub fn predict(&self, input: &Array) -> Result<Array> {
        let mut g = Graph::new();
        let net = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let y = net.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Debug, Clone, Copy)]
struct BoundLayer {
    weight: Tensor,
    bias: Tensor,
    activation: Activation,
}

/// An [`Ffnn`] whose parameters live on a particular graph.
#[derive(Debug, Clone)]
pub struct BoundFfnn {
    layers: Vec<BoundLayer>,
    in_width: usize,
}

impl BoundFfnn {
    pub fn params(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    pub fn forward(&self, g: &mut Graph, x: Tensor) -> Result<Tensor> {
        let (pre, last) = self.forward_pre_activation(g, x)?;
        Ok(last.apply(g, pre))
    }

    /// Runs every layer but returns the last layer's pre-activation output,
    /// along with the activation that would follow it.
    pub fn forward_pre_activation(&self, g: &mut Graph, x: Tensor) -> Result<(Tensor, Activation)> {
        let width = g.value(x).cols();
        if g.value(x).rank() != 2 || width != self.in_width {
            return Err(Error::Shape {
                op: "ffnn input",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.in_width],
            });
        }
        let mut h = x;
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            let z = g.matmul(h, l.weight)?;
            let z = g.add(z, l.bias)?;
            if i + 1 == n {
                return Ok((z, l.activation));
            }
            h = l.activation.apply(g, z);
        }
        unreachable!("network has at least one layer")
    }
}
