use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamKey, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Elu => g.elu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Affine layer `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub weight: ParamKey,
    pub bias: ParamKey,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.insert_glorot(format!("{name}.w"), fan_in, fan_out, rng);
        let bias = store.insert(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// Look up an existing layer by name (checkpoint restore).
    pub fn lookup(store: &ParamStore, name: &str) -> Option<Self> {
        let weight = store.key(&format!("{name}.w"))?;
        let bias = store.key(&format!("{name}.b"))?;
        let [fan_in, fan_out] = store.value(weight).shape();
        Some(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.affine(x, w, b)
    }
}

/// Stack of dense layers; the activation is applied after every layer but the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i < last {
                h = self.activation.apply(g, h);
            }
        }
        h
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn keys(&self) -> Vec<ParamKey> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

/// Gated recurrent unit parameters: input and recurrent projections for the
/// reset, update and candidate gates, packed as `[r | u | n]`.
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub input: Dense,
    pub recurrent: Dense,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            input: Dense::new(store, &format!("{name}.x"), input_dim, 3 * hidden, rng),
            recurrent: Dense::new(store, &format!("{name}.h"), hidden, 3 * hidden, rng),
            hidden,
        }
    }

    pub fn keys(&self) -> Vec<ParamKey> {
        vec![
            self.input.weight,
            self.input.bias,
            self.recurrent.weight,
            self.recurrent.bias,
        ]
    }
}

/// One GRU step: `h' = (1 - u) * n + u * h`.
pub fn gru_cell(g: &Graph, store: &ParamStore, cell: &GruCell, x: Var, h: Var) -> Var {
    let d = cell.hidden;
    let xi = cell.input.forward(g, store, x);
    let hh = cell.recurrent.forward(g, store, h);
    let r = g.sigmoid(g.add(g.slice_cols(xi, 0, d), g.slice_cols(hh, 0, d)));
    let u = g.sigmoid(g.add(g.slice_cols(xi, d, d), g.slice_cols(hh, d, d)));
    let n = g.tanh(g.add(
        g.slice_cols(xi, 2 * d, d),
        g.mul(r, g.slice_cols(hh, 2 * d, d)),
    ));
    // (1 - u) * n + u * h = n + u * (h - n)
    g.add(n, g.mul(u, g.sub(h, n)))
}
