//! Neural building blocks lowered onto a [`Graph`].

use super::graph::{Graph, HasParams, Param};
use super::rng::{uniform_vec, SceneRng};
use super::tape::{sigmoid_scalar, softplus_scalar, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Softplus,
}

impl Activation {
    pub fn apply(self, x: Real) -> Real {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid_scalar(x),
            Activation::Softplus => softplus_scalar(x),
        }
    }

    pub fn lower(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => g.tape.relu(x),
            Activation::Sigmoid => g.tape.sigmoid(x),
            Activation::Softplus => g.tape.softplus(x),
        }
    }
}

/// Affine map `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// Uniform init in `±scale / sqrt(in)`, zero bias.
    pub fn new(name: &str, inputs: usize, outputs: usize, scale: Real, rng: &mut SceneRng) -> Self {
        let bound = scale / (inputs.max(1) as Real).sqrt();
        let w = uniform_vec(rng, inputs * outputs, -bound, bound);
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::from_parts(vec![inputs, outputs], w)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![outputs])),
        }
    }

    pub fn zeros(name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(vec![inputs, outputs])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![outputs])),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn zero_(&mut self) {
        self.weight.value.data_mut().fill(0.0);
        self.bias.value.data_mut().fill(0.0);
    }

    /// `x: [n, in] -> [n, out]`.
    pub fn lower(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.bind(&self.weight)?;
        let b = g.bind(&self.bias)?;
        let xw = g.tape.matmul(x, w)?;
        g.tape.add(xw, b)
    }

    /// Direct evaluation on one input vector.
    pub fn apply(&self, x: &[Real]) -> Result<Vec<Real>> {
        let (n_in, n_out) = (self.inputs(), self.outputs());
        if x.len() != n_in {
            return Err(Error::shape("linear", format!("input of length {} for [{n_in}, {n_out}]", x.len())));
        }
        let w = self.weight.value.data();
        let mut y = self.bias.value.data().to_vec();
        for (i, xi) in x.iter().enumerate() {
            let row = &w[i * n_out..(i + 1) * n_out];
            for (o, wv) in y.iter_mut().zip(row) {
                *o += xi * wv;
            }
        }
        Ok(y)
    }
}

impl HasParams for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Stack of linear layers, each followed by its activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activations: Vec<Activation>,
}

impl Mlp {
    pub fn new(name: &str, dims: &[usize], activations: &[Activation], rng: &mut SceneRng) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::invalid(format!(
                "mlp {name}: {} dims need {} activations, got {}",
                dims.len(),
                dims.len().saturating_sub(1),
                activations.len()
            )));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{name}.l{i}"), w[0], w[1], 1.0, rng))
            .collect();
        Self::from_layers(layers, activations.to_vec())
    }

    pub fn from_layers(layers: Vec<Linear>, activations: Vec<Activation>) -> Result<Self> {
        if layers.len() != activations.len() || layers.is_empty() {
            return Err(Error::invalid("mlp: one activation per layer required"));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::invalid(format!(
                    "mlp: layer widths do not chain ({} -> {})",
                    pair[0].outputs(),
                    pair[1].inputs()
                )));
            }
        }
        Ok(Self { layers, activations })
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().unwrap().outputs()
    }

    pub fn last_layer_mut(&mut self) -> &mut Linear {
        self.layers.last_mut().unwrap()
    }

    pub fn lower(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            h = layer.lower(g, h)?;
            h = act.lower(g, h)?;
        }
        Ok(h)
    }

    pub fn apply(&self, x: &[Real]) -> Result<Vec<Real>> {
        let mut h = x.to_vec();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            h = layer.apply(&h)?;
            for v in h.iter_mut() {
                *v = act.apply(*v);
            }
        }
        Ok(h)
    }
}

impl HasParams for Mlp {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNorm {
    pub const EPS: Real = 1e-5;

    pub fn new(name: &str, width: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::filled(vec![width], 1.0)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(vec![width])),
        }
    }

    pub fn lower(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.bind(&self.gamma)?;
        let beta = g.bind(&self.beta)?;
        g.tape.layer_norm(x, gamma, beta, Self::EPS)
    }
}

impl HasParams for LayerNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Multi-head scaled dot-product self-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(name: &str, width: usize, heads: usize, rng: &mut SceneRng) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::invalid(format!("attention width {width} not divisible into {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(&format!("{name}.qkv"), width, 3 * width, 1.0, rng),
            out: Linear::new(&format!("{name}.out"), width, width, 1.0, rng),
            heads,
        })
    }

    /// `x: [n, d] -> [n, d]`.
    pub fn lower(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let d = self.out.inputs();
        let dh = d / self.heads;
        let qkv = self.qkv.lower(g, x)?;
        let mut head_out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.tape.slice_cols(qkv, h * dh, (h + 1) * dh)?;
            let k = g.tape.slice_cols(qkv, d + h * dh, d + (h + 1) * dh)?;
            let v = g.tape.slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh)?;
            let kt = g.tape.transpose(k)?;
            let scores = g.tape.matmul(q, kt)?;
            let scores = g.tape.scale(scores, 1.0 / (dh as Real).sqrt())?;
            let attn = g.tape.softmax(scores)?;
            head_out.push(g.tape.matmul(attn, v)?);
        }
        let merged = g.tape.concat_cols(&head_out)?;
        self.out.lower(g, merged)
    }
}

impl HasParams for SelfAttention {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.qkv.params();
        p.extend(self.out.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.qkv.params_mut();
        p.extend(self.out.params_mut());
        p
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl TransformerBlock {
    pub fn new(name: &str, width: usize, heads: usize, ff_width: usize, rng: &mut SceneRng) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&format!("{name}.norm1"), width),
            attn: SelfAttention::new(&format!("{name}.attn"), width, heads, rng)?,
            norm2: LayerNorm::new(&format!("{name}.norm2"), width),
            ff_in: Linear::new(&format!("{name}.ff_in"), width, ff_width, 1.0, rng),
            ff_out: Linear::new(&format!("{name}.ff_out"), ff_width, width, 1.0, rng),
        })
    }

    pub fn lower(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.norm1.lower(g, x)?;
        let h = self.attn.lower(g, h)?;
        let x = g.tape.add(x, h)?;
        let h = self.norm2.lower(g, x)?;
        let h = self.ff_in.lower(g, h)?;
        let h = g.tape.relu(h)?;
        let h = self.ff_out.lower(g, h)?;
        g.tape.add(x, h)
    }
}

impl HasParams for TransformerBlock {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.norm1.params();
        p.extend(self.attn.params());
        p.extend(self.norm2.params());
        p.extend(self.ff_in.params());
        p.extend(self.ff_out.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.norm1.params_mut();
        p.extend(self.attn.params_mut());
        p.extend(self.norm2.params_mut());
        p.extend(self.ff_in.params_mut());
        p.extend(self.ff_out.params_mut());
        p
    }
}
