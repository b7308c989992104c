//! Layers with explicit forward and backward passes.
//!
//! Batched inputs carry the batch on the leading axis: `[B, n]` for dense
//! layers and `[B, T, C]` for sequence layers.

pub mod container;
pub mod conv;
pub mod dense;
pub mod loss;
pub mod lstm;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use conv::{conv1d_forward, maxpool1d, Conv1d, ConvFilterBank, Flatten, MaxPool1d, Relu};
pub use dense::{dense_forward, Activation, Dense};
pub use loss::{xent_loss, CrossEntropyHead};
pub use lstm::{
    bilstm_sequence, lstm_sequence, lstm_sequence_from, lstm_step, split_units, BiLstm, CandidateActivation, Lstm,
    LstmState, LstmVariant, LstmWeights,
};

/// Read-only view of a named parameter.
pub struct ParamRef<'a> {
    pub name: String,
    pub value: &'a Tensor,
}

/// Mutable view of a named parameter and its accumulated gradient.
pub struct ParamMut<'a> {
    pub name: String,
    pub value: &'a mut Tensor,
    pub grad: &'a mut Tensor,
}

pub trait Layer: Send + Sync {
    fn name(&self) -> &'static str;

    /// Pure inference pass.
    fn forward(&self, input: &Tensor) -> Result<Tensor>;

    /// Forward pass that keeps what `backward` needs.
    fn forward_train(&mut self, input: &Tensor) -> Result<Tensor>;

    /// Accumulates parameter gradients and returns the gradient wrt the input
    /// of the last `forward_train` call.
    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor>;

    fn params(&self) -> Vec<ParamRef<'_>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        Vec::new()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

/// Layers applied in order. Parameter names are prefixed with the layer index.
#[derive(Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, layer: impl Layer + 'static) {
        self.layers.push(Box::new(layer));
    }

    pub fn layers(&self) -> &[Box<dyn Layer>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Box<dyn Layer>] {
        &mut self.layers
    }

    /// Output shape after every layer for the given input.
    pub fn trace_shapes(&self, input: &Tensor) -> Result<Vec<(&'static str, Vec<usize>)>> {
        let mut x = input.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.forward(&x)?;
            shapes.push((layer.name(), x.shape().to_vec()));
        }
        Ok(shapes)
    }
}

impl Layer for Sequential {
    fn name(&self) -> &'static str {
        "sequential"
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut layers = self.layers.iter();
        let Some(first) = layers.next() else {
            return Ok(input.clone());
        };
        let mut x = first.forward(input)?;
        for layer in layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = layer.forward_train(&x)?;
        }
        Ok(x)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let mut g = grad_output.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for p in layer.params() {
                out.push(ParamRef {
                    name: format!("{i}.{}.{}", layer.name(), p.name),
                    value: p.value,
                });
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let lname = layer.name();
            for p in layer.params_mut() {
                out.push(ParamMut {
                    name: format!("{i}.{lname}.{}", p.name),
                    value: p.value,
                    grad: p.grad,
                });
            }
        }
        out
    }
}

/// Uniform(−r, r) with r = sqrt(6 / (fan_in + fan_out)).
pub(crate) fn glorot_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-r..r);
    }
    t
}

pub(crate) fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::invalid(format!(
            "{op}: expected a rank-{rank} tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}
