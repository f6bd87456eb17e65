//! Fully connected networks recorded onto a [`Graph`].

use disent_tensor::{Graph, NodeId, ParamStore, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const DEFAULT_SLOPE: f64 = 0.2;

/// Whether a network's parameters receive gradients in a given graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Frozen,
}

/// Leaky-relu MLP; the last layer is linear. Parameters live in a shared
/// store under `{prefix}.w{i}` / `{prefix}.b{i}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub dims: Vec<usize>,
    pub slope: f64,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output sizes");
        Self {
            prefix: prefix.into(),
            dims: dims.to_vec(),
            slope: DEFAULT_SLOPE,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.w{layer}", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.b{layer}", self.prefix)
    }

    /// He-scaled normal weights, zero biases.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            store.insert(self.weight_name(l), Tensor::matrix(fan_in, fan_out, w).unwrap());
            store.insert(self.bias_name(l), Tensor::zeros(&[1, fan_out]));
        }
    }

    /// Records the forward pass of a `[batch, input_dim]` node.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, mode: Mode) -> Result<NodeId> {
        let mut h = x;
        for l in 0..self.layers() {
            let (w, b) = match mode {
                Mode::Train => (
                    g.param(store, &self.weight_name(l))?,
                    g.param(store, &self.bias_name(l))?,
                ),
                Mode::Frozen => (
                    g.frozen(store, &self.weight_name(l))?,
                    g.frozen(store, &self.bias_name(l))?,
                ),
            };
            h = g.matmul(h, w)?;
            h = g.broadcast_add(h, b)?;
            if l + 1 < self.layers() {
                h = g.leaky_relu(h, self.slope)?;
            }
        }
        Ok(h)
    }

    /// Forward pass on plain rows, no gradient bookkeeping.
    pub fn apply(&self, store: &ParamStore, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(rows)?)?;
        let out = self.forward(&mut g, store, x, Mode::Frozen)?;
        Ok(rows_of(g.value(out)))
    }
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}
