//! Valid 1D convolution, max pooling and the small shape layers around them.

use rand::Rng;

use super::{expect_rank, glorot_uniform, Layer, ParamMut, ParamRef};
use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, Tensor};

/// `F` filters of width `K` over `C` channels, plus one bias per filter.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvFilterBank {
    pub filters: Tensor,
    pub biases: Tensor,
}

impl ConvFilterBank {
    pub fn new(filters: Tensor, biases: Tensor) -> Result<Self> {
        expect_rank("conv filters", &filters, 3)?;
        if biases.shape() != [filters.shape()[0]] {
            return Err(Error::shape("conv biases", biases.shape(), &filters.shape()[..1]));
        }
        Ok(ConvFilterBank { filters, biases })
    }

    pub fn random(filters: usize, width: usize, channels: usize, rng: &mut impl Rng) -> Self {
        let w = glorot_uniform(rng, &[filters, width, channels], width * channels, width * filters);
        ConvFilterBank {
            filters: w,
            biases: Tensor::zeros(&[filters]),
        }
    }

    pub fn count(&self) -> usize {
        self.filters.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.filters.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.filters.shape()[2]
    }
}

/// `Y[t, f] = b_f + Σ_{k,c} filters[f, k, c] · X[t + k, c]` for `X` of shape `[T, C]`.
pub fn conv1d_forward(x: &Tensor, bank: &ConvFilterBank) -> Result<Tensor> {
    expect_rank("conv1d input", x, 2)?;
    let batch = x.clone().reshape(&[1, x.shape()[0], x.shape()[1]])?;
    let y = Conv1d::from_bank(bank.clone()).forward(&batch)?;
    let (l, f) = (y.shape()[1], y.shape()[2]);
    y.reshape(&[l, f])
}

/// Per-channel max over non-overlapping windows of `Y[L, F]`; a trailing
/// remainder shorter than `pool` is dropped.
pub fn maxpool1d(y: &Tensor, pool: usize) -> Result<Tensor> {
    expect_rank("maxpool input", y, 2)?;
    let batch = y.clone().reshape(&[1, y.shape()[0], y.shape()[1]])?;
    let out = MaxPool1d::new(pool)?.forward(&batch)?;
    let (l, f) = (out.shape()[1], out.shape()[2]);
    out.reshape(&[l, f])
}

/// Stride-1 valid convolution over `[B, T, C]`.
pub struct Conv1d {
    bank: ConvFilterBank,
    d_filters: Tensor,
    d_biases: Tensor,
    cache: Option<Tensor>,
}

impl Conv1d {
    pub fn new(filters: usize, width: usize, channels: usize, rng: &mut impl Rng) -> Self {
        Self::from_bank(ConvFilterBank::random(filters, width, channels, rng))
    }

    pub fn from_bank(bank: ConvFilterBank) -> Self {
        Conv1d {
            d_filters: Tensor::zeros(bank.filters.shape()),
            d_biases: Tensor::zeros(bank.biases.shape()),
            bank,
            cache: None,
        }
    }

    pub fn bank(&self) -> &ConvFilterBank {
        &self.bank
    }

    fn dims(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        expect_rank("conv1d input", x, 3)?;
        let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if c != self.bank.channels() {
            return Err(Error::shape("conv1d input", x.shape(), &[b, t, self.bank.channels()]));
        }
        let k = self.bank.width();
        if t < k {
            return Err(Error::invalid(format!(
                "conv1d: sequence length {t} is shorter than filter width {k}"
            )));
        }
        Ok((b, t, c))
    }

    fn run(&self, x: &Tensor) -> Result<Tensor> {
        let (batch, t, c) = self.dims(x)?;
        let (f, k) = (self.bank.count(), self.bank.width());
        let l = t - k + 1;
        let span = k * c;
        let filters = self.bank.filters.data();
        let biases = self.bank.biases.data();
        let mut y = vec![0.0; batch * l * f];
        for b in 0..batch {
            let xb = &x.data()[b * t * c..(b + 1) * t * c];
            for pos in 0..l {
                // X[pos..pos+K, :] is contiguous in row-major layout.
                let patch = &xb[pos * c..pos * c + span];
                let out = &mut y[(b * l + pos) * f..(b * l + pos + 1) * f];
                for (fi, o) in out.iter_mut().enumerate() {
                    *o = biases[fi] + dot(&filters[fi * span..(fi + 1) * span], patch);
                }
            }
        }
        Tensor::new(vec![batch, l, f], y)
    }
}

impl Layer for Conv1d {
    fn name(&self) -> &'static str {
        "conv1d"
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.run(input)
    }

    fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let y = self.run(input)?;
        self.cache = Some(input.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or(Error::MissingCache { layer: "conv1d" })?;
        let (batch, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (f, k) = (self.bank.count(), self.bank.width());
        let l = t - k + 1;
        if grad_output.shape() != [batch, l, f] {
            return Err(Error::shape("conv1d backward", grad_output.shape(), &[batch, l, f]));
        }
        let span = k * c;
        let filters = self.bank.filters.data();
        let d_filters = self.d_filters.data_mut();
        let d_biases = self.d_biases.data_mut();
        let mut dx = vec![0.0; batch * t * c];
        for b in 0..batch {
            let xb = &x.data()[b * t * c..(b + 1) * t * c];
            let dxb = &mut dx[b * t * c..(b + 1) * t * c];
            for pos in 0..l {
                let patch = &xb[pos * c..pos * c + span];
                let g = &grad_output.data()[(b * l + pos) * f..(b * l + pos + 1) * f];
                for (fi, &gv) in g.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    d_biases[fi] += gv;
                    axpy(gv, patch, &mut d_filters[fi * span..(fi + 1) * span]);
                    axpy(gv, &filters[fi * span..(fi + 1) * span], &mut dxb[pos * c..pos * c + span]);
                }
            }
        }
        Tensor::new(vec![batch, t, c], dx)
    }

    fn params(&self) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef {
                name: "filters".into(),
                value: &self.bank.filters,
            },
            ParamRef {
                name: "biases".into(),
                value: &self.bank.biases,
            },
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        vec![
            ParamMut {
                name: "filters".into(),
                value: &mut self.bank.filters,
                grad: &mut self.d_filters,
            },
            ParamMut {
                name: "biases".into(),
                value: &mut self.bank.biases,
                grad: &mut self.d_biases,
            },
        ]
    }
}

/// Non-overlapping max pooling along time on `[B, L, F]`. Ties resolve to the
/// earliest position.
pub struct MaxPool1d {
    pool: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
    last_min_gap: Option<f64>,
}

impl MaxPool1d {
    pub fn new(pool: usize) -> Result<Self> {
        if pool == 0 {
            return Err(Error::invalid("pool size must be at least 1"));
        }
        Ok(MaxPool1d {
            pool,
            cache: None,
            last_min_gap: None,
        })
    }

    pub fn pool(&self) -> usize {
        self.pool
    }

    /// Smallest gap between the winner and runner-up of any window seen by the
    /// last `forward_train`. `None` when `pool == 1`.
    pub fn last_min_gap(&self) -> Option<f64> {
        self.last_min_gap
    }

    fn run(&self, x: &Tensor) -> Result<(Tensor, Vec<usize>, Option<f64>)> {
        expect_rank("maxpool input", x, 3)?;
        let (batch, l, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if l < self.pool {
            return Err(Error::invalid(format!(
                "maxpool: length {l} is shorter than pool {}",
                self.pool
            )));
        }
        let out_len = l / self.pool;
        let mut y = vec![0.0; batch * out_len * f];
        let mut arg = vec![0usize; batch * out_len * f];
        let mut min_gap: Option<f64> = None;
        let data = x.data();
        for b in 0..batch {
            for o in 0..out_len {
                for fi in 0..f {
                    let start = o * self.pool;
                    let mut best = start;
                    let mut best_v = data[(b * l + start) * f + fi];
                    let mut second = f64::NEG_INFINITY;
                    for p in start + 1..start + self.pool {
                        let v = data[(b * l + p) * f + fi];
                        if v > best_v {
                            second = best_v;
                            best_v = v;
                            best = p;
                        } else if v > second {
                            second = v;
                        }
                    }
                    if self.pool > 1 {
                        let gap = best_v - second;
                        min_gap = Some(min_gap.map_or(gap, |g| g.min(gap)));
                    }
                    let idx = (b * out_len + o) * f + fi;
                    y[idx] = best_v;
                    arg[idx] = (b * l + best) * f + fi;
                }
            }
        }
        Ok((Tensor::new(vec![batch, out_len, f], y)?, arg, min_gap))
    }
}

impl Layer for MaxPool1d {
    fn name(&self) -> &'static str {
        "maxpool1d"
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.run(input)?.0)
    }

    fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let (y, arg, gap) = self.run(input)?;
        self.cache = Some((input.shape().to_vec(), arg));
        self.last_min_gap = gap;
        Ok(y)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let (in_shape, arg) = self.cache.as_ref().ok_or(Error::MissingCache { layer: "maxpool1d" })?;
        if grad_output.len() != arg.len() {
            return Err(Error::shape("maxpool backward", grad_output.shape(), in_shape));
        }
        let mut dx = Tensor::zeros(in_shape);
        let d = dx.data_mut();
        for (&src, &g) in arg.iter().zip(grad_output.data()) {
            d[src] += g;
        }
        Ok(dx)
    }
}

pub struct Relu {
    cache: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Self {
        Relu { cache: None }
    }
}

impl Default for Relu {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        Ok(input.map(|v| v.max(0.0)))
    }

    fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let y = self.forward(input)?;
        self.cache = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let y = self.cache.as_ref().ok_or(Error::MissingCache { layer: "relu" })?;
        if grad_output.shape() != y.shape() {
            return Err(Error::shape("relu backward", grad_output.shape(), y.shape()));
        }
        let mut g = grad_output.clone();
        for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
            if yv <= 0.0 {
                *gv = 0.0;
            }
        }
        Ok(g)
    }
}

/// `[B, d1, d2, ...]` → `[B, d1·d2·...]`.
pub struct Flatten {
    in_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Flatten { in_shape: None }
    }
}

impl Default for Flatten {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Flatten {
    fn name(&self) -> &'static str {
        "flatten"
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let b = input.shape()[0];
        input.clone().reshape(&[b, input.len() / b])
    }

    fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        self.in_shape = Some(input.shape().to_vec());
        self.forward(input)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let shape = self.in_shape.as_ref().ok_or(Error::MissingCache { layer: "flatten" })?;
        grad_output.clone().reshape(shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank(filters: Vec<f64>, f: usize, k: usize, c: usize, bias: Vec<f64>) -> ConvFilterBank {
        ConvFilterBank::new(Tensor::new(vec![f, k, c], filters).unwrap(), Tensor::vector(bias)).unwrap()
    }

    #[test]
    fn output_length_is_t_minus_k_plus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = ConvFilterBank::random(20, 10, 3, &mut rng);
        let y = conv1d_forward(&Tensor::zeros(&[50, 3]), &b).unwrap();
        assert_eq!(y.shape(), &[41, 20]);
    }

    #[test]
    fn difference_filter_on_ramp() {
        let x = Tensor::matrix(5, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let y = conv1d_forward(&x, &bank(vec![1.0, 0.0, -1.0], 1, 3, 1, vec![0.0])).unwrap();
        assert_eq!(y.data(), &[-2.0, -2.0, -2.0]);
    }

    #[test]
    fn zero_filters_give_constant_bias() {
        let x = Tensor::filled(&[7, 2], 3.5);
        let y = conv1d_forward(&x, &bank(vec![0.0; 2 * 3 * 2], 2, 3, 2, vec![0.25, -1.0])).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, &[0.25, -1.0]);
        }
    }

    #[test]
    fn too_short_input_is_rejected() {
        let x = Tensor::zeros(&[4, 1]);
        assert!(conv1d_forward(&x, &bank(vec![0.0; 5], 1, 5, 1, vec![0.0])).is_err());
    }

    #[test]
    fn maxpool_cases() {
        let y = Tensor::matrix(4, 1, vec![1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!(maxpool1d(&y, 2).unwrap().data(), &[3.0, 5.0]);
        assert_eq!(maxpool1d(&y, 1).unwrap(), y);
        let long = Tensor::zeros(&[41, 3]);
        assert_eq!(maxpool1d(&long, 2).unwrap().shape(), &[20, 3]);
        assert!(maxpool1d(&Tensor::zeros(&[1, 1]), 2).is_err());
        assert!(MaxPool1d::new(0).is_err());
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut pool = MaxPool1d::new(2).unwrap();
        let x = Tensor::new(vec![1, 4, 1], vec![1.0, 3.0, 5.0, 2.0]).unwrap();
        pool.forward_train(&x).unwrap();
        assert_eq!(pool.last_min_gap(), Some(2.0));
        let dx = pool.backward(&Tensor::new(vec![1, 2, 1], vec![10.0, 20.0]).unwrap()).unwrap();
        assert_eq!(dx.data(), &[0.0, 10.0, 20.0, 0.0]);
    }

    proptest! {
        #[test]
        fn conv_is_linear_in_input(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut bank = ConvFilterBank::random(4, 3, 2, &mut rng);
            bank.biases = Tensor::zeros(&[4]);
            let x1 = crate::nn::glorot_uniform(&mut rng, &[9, 2], 1, 1);
            let x2 = crate::nn::glorot_uniform(&mut rng, &[9, 2], 1, 1);
            let combo = x1.scale(a).add(&x2.scale(b)).unwrap();
            let lhs = conv1d_forward(&combo, &bank).unwrap();
            let rhs = conv1d_forward(&x1, &bank).unwrap().scale(a)
                .add(&conv1d_forward(&x2, &bank).unwrap().scale(b)).unwrap();
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() <= 1e-10);
            }
        }
    }
}
