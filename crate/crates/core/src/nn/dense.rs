use rand::Rng;

use super::{expect_rank, glorot_uniform, Layer, ParamMut, ParamRef};
use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_tn, transposed, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// `activation(W·x + b)` for a single vector, `W` is `[m, n]`.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor, activation: Activation) -> Result<Tensor> {
    let layer = Dense::from_parts(w.clone(), b.clone(), activation)?;
    if x.rank() != 1 {
        return Err(Error::invalid(format!("dense_forward takes a vector, got {:?}", x.shape())));
    }
    let batch = x.clone().reshape(&[1, x.len()])?;
    let y = layer.forward(&batch)?;
    y.reshape(&[w.shape()[0]])
}

/// Fully connected layer on `[B, n]` inputs.
pub struct Dense {
    weight: Tensor,
    bias: Tensor,
    d_weight: Tensor,
    d_bias: Tensor,
    activation: Activation,
    cache: Option<(Tensor, Tensor)>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let weight = glorot_uniform(rng, &[outputs, inputs], inputs, outputs);
        Self::from_parts(weight, Tensor::zeros(&[outputs]), activation).expect("consistent shapes")
    }

    pub fn from_parts(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        expect_rank("dense weight", &weight, 2)?;
        if bias.shape() != [weight.shape()[0]] {
            return Err(Error::shape("dense bias", bias.shape(), &weight.shape()[..1]));
        }
        Ok(Dense {
            d_weight: Tensor::zeros(weight.shape()),
            d_bias: Tensor::zeros(bias.shape()),
            weight,
            bias,
            activation,
            cache: None,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    fn run(&self, x: &Tensor) -> Result<Tensor> {
        expect_rank("dense input", x, 2)?;
        let (batch, n) = (x.shape()[0], x.shape()[1]);
        if n != self.inputs() {
            return Err(Error::shape("dense input", x.shape(), &[batch, self.inputs()]));
        }
        let m = self.outputs();
        let mut y = Vec::with_capacity(batch * m);
        for _ in 0..batch {
            y.extend_from_slice(self.bias.data());
        }
        gemm_nn(batch, n, m, x.data(), &transposed(m, n, self.weight.data()), &mut y);
        if self.activation == Activation::Relu {
            for v in &mut y {
                *v = v.max(0.0);
            }
        }
        Tensor::new(vec![batch, m], y)
    }
}

impl Layer for Dense {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.run(input)
    }

    fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let y = self.run(input)?;
        self.cache = Some((input.clone(), y.clone()));
        Ok(y)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let (x, y) = self.cache.as_ref().ok_or(Error::MissingCache { layer: "dense" })?;
        if grad_output.shape() != y.shape() {
            return Err(Error::shape("dense backward", grad_output.shape(), y.shape()));
        }
        let (batch, n, m) = (x.shape()[0], self.inputs(), self.outputs());
        let mut dz = grad_output.data().to_vec();
        if self.activation == Activation::Relu {
            for (g, &out) in dz.iter_mut().zip(y.data()) {
                if out <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        gemm_tn(m, batch, n, &dz, x.data(), self.d_weight.data_mut());
        let db = self.d_bias.data_mut();
        for row in dz.chunks_exact(m) {
            for (d, g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        let mut dx = vec![0.0; batch * n];
        gemm_nn(batch, m, n, &dz, self.weight.data(), &mut dx);
        Tensor::new(vec![batch, n], dx)
    }

    fn params(&self) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef {
                name: "weight".into(),
                value: &self.weight,
            },
            ParamRef {
                name: "bias".into(),
                value: &self.bias,
            },
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        vec![
            ParamMut {
                name: "weight".into(),
                value: &mut self.weight,
                grad: &mut self.d_weight,
            },
            ParamMut {
                name: "bias".into(),
                value: &mut self.bias,
                grad: &mut self.d_bias,
            },
        ]
    }
}
