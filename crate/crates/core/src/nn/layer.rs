use rand::Rng;

use super::gemm::{gemm, MatRef};
use super::tape::{GradTape, Gradients, NodeId};
use super::{NnError, Tensor};
use crate::par::Exec;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    /// Fixed negative slope of 0.2.
    LeakyRelu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Linear => v,
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu => {
                if v > 0.0 {
                    v
                } else {
                    LEAKY_SLOPE * v
                }
            }
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        }
    }

    /// Derivative expressed through the activation output `y`.
    pub(crate) fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if y > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

/// Affine map followed by an elementwise activation. Weights are `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

/// `x · wᵀ + b` for a batch `x` of shape `[n, in]`.
pub(crate) fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    let (out, inp) = (w.shape()[0], w.cols());
    if x.cols() != inp {
        return Err(NnError::ShapeMismatch {
            expected: vec![inp],
            found: vec![x.cols()],
        });
    }
    if b.len() != out {
        return Err(NnError::ShapeMismatch {
            expected: vec![out],
            found: b.shape().to_vec(),
        });
    }
    let n = x.rows();
    let mut y = Vec::with_capacity(n * out);
    for _ in 0..n {
        y.extend_from_slice(b.data());
    }
    gemm(
        Exec::default(),
        n,
        inp,
        out,
        MatRef::row_major(x.data(), inp),
        MatRef::transposed(w.data(), inp),
        &mut y,
        true,
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out;
    Ok(Tensor::from_parts(shape, y))
}

impl DenseLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(inp: usize, out: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (inp + out) as f64).sqrt();
        let data = (0..inp * out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        DenseLayer {
            weights: Tensor::from_parts(vec![out, inp], data),
            bias: Tensor::zeros(&[out]),
            activation,
        }
    }

    pub fn zeroed(inp: usize, out: usize, activation: Activation) -> Self {
        DenseLayer {
            weights: Tensor::zeros(&[out, inp]),
            bias: Tensor::zeros(&[out]),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let mut y = affine(x, &self.weights, &self.bias)?;
        if self.activation != Activation::Linear {
            let act = self.activation;
            y.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        }
        Ok(y)
    }
}

/// Stack of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`; every layer but the last uses `hidden`.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an mlp needs at least input and output widths");
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { output } else { hidden };
                DenseLayer::new(w[0], w[1], act, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::BadShape(vec![]));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NnError::ShapeMismatch {
                    expected: vec![pair[0].out_dim()],
                    found: vec![pair[1].in_dim()],
                });
            }
        }
        Ok(Mlp { layers })
    }

    /// Sets the last layer's weights and bias to zero.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().unwrap();
        last.weights.data_mut().iter_mut().for_each(|v| *v = 0.0);
        last.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.in_dim()];
        w.extend(self.layers.iter().map(|l| l.out_dim()));
        w
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let mut h = self.layers[0].forward(x)?;
        for layer in &self.layers[1..] {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// Output of the first `count` layers only.
    pub fn forward_prefix(&self, x: &Tensor, count: usize) -> Result<Tensor, NnError> {
        let mut h = x.clone();
        for layer in &self.layers[..count] {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// Forward pass with the final activation left off.
    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let last = self.layers.len() - 1;
        let h = self.forward_prefix(x, last)?;
        let l = &self.layers[last];
        affine(&h, &l.weights, &l.bias)
    }

    /// Output of every layer, in order.
    pub fn forward_all(&self, x: &Tensor) -> Result<Vec<Tensor>, NnError> {
        let mut outs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = layer.forward(outs.last().unwrap_or(x))?;
            outs.push(h);
        }
        Ok(outs)
    }

    /// Parameters in `[w0, b0, w1, b1, ...]` order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weights, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|p| p.shape().to_vec()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Registers the parameters on `tape`. Frozen bindings receive no gradient.
    pub fn bind<'a>(&'a self, tape: &mut GradTape<'a>, trainable: bool) -> BoundMlp {
        let nodes = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(&l.weights), tape.param(&l.bias), l.activation)
                } else {
                    (
                        tape.constant_ref(&l.weights),
                        tape.constant_ref(&l.bias),
                        l.activation,
                    )
                }
            })
            .collect();
        BoundMlp { nodes }
    }
}

/// Tape handles for an [`Mlp`]'s parameters.
pub struct BoundMlp {
    nodes: Vec<(NodeId, NodeId, Activation)>,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut GradTape<'_>, x: NodeId) -> Result<NodeId, NnError> {
        Ok(*self.forward_all(tape, x)?.last().unwrap())
    }

    /// Output node of the first `count` layers.
    pub fn forward_layers(&self, tape: &mut GradTape<'_>, x: NodeId, count: usize) -> Result<NodeId, NnError> {
        let mut h = x;
        for &(w, b, act) in &self.nodes[..count] {
            h = tape.linear(h, w, b)?;
            h = tape.activation(h, act)?;
        }
        Ok(h)
    }

    pub fn forward_all(&self, tape: &mut GradTape<'_>, x: NodeId) -> Result<Vec<NodeId>, NnError> {
        let mut outs = Vec::with_capacity(self.nodes.len());
        let mut h = x;
        for &(w, b, act) in &self.nodes {
            h = tape.linear(h, w, b)?;
            h = tape.activation(h, act)?;
            outs.push(h);
        }
        Ok(outs)
    }

    /// Output of every layer with the final activation left off.
    pub fn forward_logits(&self, tape: &mut GradTape<'_>, x: NodeId) -> Result<NodeId, NnError> {
        let last = self.nodes.len() - 1;
        let h = self.forward_layers(tape, x, last)?;
        let (w, b, _) = self.nodes[last];
        tape.linear(h, w, b)
    }

    /// Gradients in [`Mlp::params`] order.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.nodes
            .iter()
            .flat_map(|&(w, b, _)| [grads.wrt(w), grads.wrt(b)])
            .collect()
    }
}
