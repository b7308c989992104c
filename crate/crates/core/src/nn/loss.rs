use super::{expect_rank, Layer};
use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Tensor};

/// Cross-entropy of one logit vector against a class index. Returns the loss
/// and its gradient `softmax(logits) − onehot(label)`.
pub fn xent_loss(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    expect_rank("xent logits", logits, 1)?;
    let c = logits.len();
    if label >= c {
        return Err(Error::invalid(format!("label {label} out of range for {c} classes")));
    }
    let z = logits.data();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let mut grad = z.to_vec();
    softmax_in_place(&mut grad);
    grad[label] -= 1.0;
    Ok((lse - z[label], Tensor::vector(grad)))
}

/// Mean cross-entropy over a `[B, c]` batch of logits against fixed labels.
/// Forward yields a one-element tensor.
pub struct CrossEntropyHead {
    labels: Vec<usize>,
    cache: Option<Tensor>,
}

impl CrossEntropyHead {
    pub fn new(labels: Vec<usize>) -> Self {
        CrossEntropyHead { labels, cache: None }
    }

    pub fn set_labels(&mut self, labels: Vec<usize>) {
        self.labels = labels;
        self.cache = None;
    }

    fn run(&self, logits: &Tensor) -> Result<(f64, Tensor)> {
        expect_rank("xent logits", logits, 2)?;
        let (batch, c) = (logits.shape()[0], logits.shape()[1]);
        if batch != self.labels.len() {
            return Err(Error::shape("xent labels", logits.shape(), &[self.labels.len(), c]));
        }
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(batch * c);
        for (row, &label) in logits.data().chunks_exact(c).zip(&self.labels) {
            let (l, g) = xent_loss(&Tensor::vector(row.to_vec()), label)?;
            total += l;
            grad.extend(g.into_data());
        }
        let inv = 1.0 / batch as f64;
        for g in &mut grad {
            *g *= inv;
        }
        Ok((total * inv, Tensor::new(vec![batch, c], grad)?))
    }
}

impl Layer for CrossEntropyHead {
    fn name(&self) -> &'static str {
        "xent"
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        Ok(Tensor::vector(vec![self.run(input)?.0]))
    }

    fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let (loss, grad) = self.run(input)?;
        self.cache = Some(grad);
        Ok(Tensor::vector(vec![loss]))
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let grad = self.cache.as_ref().ok_or(Error::MissingCache { layer: "xent" })?;
        if grad_output.len() != 1 {
            return Err(Error::shape("xent backward", grad_output.shape(), &[1]));
        }
        Ok(grad.scale(grad_output.data()[0]))
    }
}
