//! Random cases shared by the integration tests.

use rand::Rng;
use skigear::nn::{ConvFilterBank, LstmVariant, LstmWeights};
use skigear::Tensor;

use super::oracle::ScalarLstm;

fn uniform_vec(rng: &mut impl Rng, n: usize, r: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-r..r)).collect()
}

fn uniform_mat(rng: &mut impl Rng, rows: usize, cols: usize, r: f64) -> Vec<Vec<f64>> {
    (0..rows).map(|_| uniform_vec(rng, cols, r)).collect()
}

pub fn random_scalar_lstm(rng: &mut impl Rng, inputs: usize, hidden: usize, peephole: bool, sigmoid_candidate: bool) -> ScalarLstm {
    ScalarLstm {
        wx: std::array::from_fn(|_| uniform_mat(rng, hidden, inputs, 1.0)),
        wh: std::array::from_fn(|_| uniform_mat(rng, hidden, hidden, 1.0)),
        b: std::array::from_fn(|_| uniform_vec(rng, hidden, 0.5)),
        peep: peephole.then(|| std::array::from_fn(|_| uniform_vec(rng, hidden, 1.0))),
        sigmoid_candidate,
    }
}

fn mat(rows: &[Vec<f64>]) -> Tensor {
    let cols = rows[0].len();
    Tensor::matrix(rows.len(), cols, rows.concat()).unwrap()
}

/// Copies scalar-oracle weights into the library layout.
pub fn to_weights(s: &ScalarLstm) -> LstmWeights {
    let hidden = s.b[0].len();
    let inputs = s.wx[0][0].len();
    let variant = if s.peep.is_some() {
        LstmVariant::Peephole
    } else {
        LstmVariant::Standard
    };
    let mut w = LstmWeights::zeros(inputs, hidden, variant);
    w.w_xi = mat(&s.wx[0]);
    w.w_xf = mat(&s.wx[1]);
    w.w_xo = mat(&s.wx[2]);
    w.w_xc = mat(&s.wx[3]);
    w.w_hi = mat(&s.wh[0]);
    w.w_hf = mat(&s.wh[1]);
    w.w_ho = mat(&s.wh[2]);
    w.w_hc = mat(&s.wh[3]);
    w.b_i = Tensor::vector(s.b[0].clone());
    w.b_f = Tensor::vector(s.b[1].clone());
    w.b_o = Tensor::vector(s.b[2].clone());
    w.b_c = Tensor::vector(s.b[3].clone());
    if let (Some(p), Some(dst)) = (&s.peep, w.peephole.as_mut()) {
        dst.p_i = Tensor::vector(p[0].clone());
        dst.p_f = Tensor::vector(p[1].clone());
        dst.p_o = Tensor::vector(p[2].clone());
    }
    w
}

pub fn random_sequence(rng: &mut impl Rng, steps: usize, inputs: usize) -> Vec<Vec<f64>> {
    uniform_mat(rng, steps, inputs, 2.0)
}

pub fn sequence_tensor(xs: &[Vec<f64>]) -> Tensor {
    mat(xs)
}

pub struct ConvCase {
    pub x: Vec<Vec<f64>>,
    pub filters: Vec<Vec<Vec<f64>>>,
    pub bias: Vec<f64>,
}

impl ConvCase {
    pub fn random(rng: &mut impl Rng, max_t: usize, max_c: usize, max_f: usize, max_k: usize) -> Self {
        let c = rng.random_range(1..=max_c);
        let f = rng.random_range(1..=max_f);
        let k = rng.random_range(1..=max_k);
        let t = rng.random_range(k..=max_t.max(k));
        ConvCase {
            x: uniform_mat(rng, t, c, 2.0),
            filters: (0..f).map(|_| uniform_mat(rng, k, c, 1.0)).collect(),
            bias: uniform_vec(rng, f, 0.5),
        }
    }

    pub fn input(&self) -> Tensor {
        mat(&self.x)
    }

    pub fn bank(&self) -> ConvFilterBank {
        let (f, k, c) = (self.filters.len(), self.filters[0].len(), self.x[0].len());
        let flat: Vec<f64> = self.filters.iter().flat_map(|m| m.concat()).collect();
        ConvFilterBank::new(Tensor::new(vec![f, k, c], flat).unwrap(), Tensor::vector(self.bias.clone())).unwrap()
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
