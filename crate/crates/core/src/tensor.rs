//! Dense row-major `f64` arrays and the handful of kernels the layers need.
//!
//! Every operation allocates a fresh output and leaves its inputs untouched.
//! Summation order is fixed, so identical inputs give bit-identical outputs.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and a row-major buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!("tensor dimensions must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} values, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    /// Rank-1 tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    /// Matrix product of two rank-2 tensors. Each output element accumulates
    /// its k products left to right starting from zero.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, &self.data, &other.data, &mut out);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::invalid(format!("transpose needs a matrix, got {:?}", self.shape)));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh)
    }

    /// Softmax of a rank-1 tensor with at least two entries.
    pub fn softmax(&self) -> Result<Tensor> {
        if self.rank() != 1 || self.len() < 2 {
            return Err(Error::invalid(format!(
                "softmax needs a vector of length >= 2, got {:?}",
                self.shape
            )));
        }
        let mut out = self.data.clone();
        softmax_in_place(&mut out);
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }
}

/// Logistic function, evaluated on the branch that cannot overflow.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

// Slice kernels. `c` is always accumulated into, never overwritten.

/// `c[m×n] += a[m×k] · b[k×n]`, k accumulated left to right per element.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_strided(m, k, n, a, (k, 1), b, c);
}

const MR: usize = 4;
const NR: usize = 4;

/// `c[m×n] += A · b[k×n]` where `A[i][p] = a[i·rs + p·cs]`. Blocks of
/// `MR × NR` outputs stay in registers; every element still sums over `p`
/// in increasing order, so blocking never changes a result.
fn gemm_strided(m: usize, k: usize, n: usize, a: &[f64], (rs, cs): (usize, usize), b: &[f64], c: &mut [f64]) {
    let n_main = n - n % NR;
    let m_main = m - m % MR;
    // column panels outermost so each slice of `b` is reused by every row block
    for j in (0..n_main).step_by(NR) {
        for i in (0..m_main).step_by(MR) {
            let mut acc = [[0.0f64; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
            }
            for p in 0..k {
                let bv: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().expect("NR columns");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * rs + p * cs];
                    for q in 0..NR {
                        row[q] += av * bv[q];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
        }
    }
    for r in 0..m {
        let from = if r < m_main { n_main } else { 0 };
        gemm_row_tail(r, k, n, from, a, (rs, cs), b, c);
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_row_tail(i: usize, k: usize, n: usize, from: usize, a: &[f64], (rs, cs): (usize, usize), b: &[f64], c: &mut [f64]) {
    if from == n {
        return;
    }
    let c_row = &mut c[i * n + from..(i + 1) * n];
    for p in 0..k {
        let av = a[i * rs + p * cs];
        for (cv, &bv) in c_row.iter_mut().zip(&b[p * n + from..(p + 1) * n]) {
            *cv += av * bv;
        }
    }
}

/// Row-major transpose of a `[rows, cols]` buffer.
pub(crate) fn transposed(rows: usize, cols: usize, src: &[f64]) -> Vec<f64> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_strided(m, k, n, a, (1, m), b, c);
}

/// Dot product with four interleaved partial sums, combined in a fixed order.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let split = a.len() - a.len() % 4;
    let mut acc = [0.0f64; 4];
    for (x, y) in a[..split].chunks_exact(4).zip(b[..split].chunks_exact(4)) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in a[split..].iter().zip(&b[split..]) {
        s += x * y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[cfg(test)]
#[allow(clippy::excessive_precision, clippy::approx_constant)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
        let data = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(m, n, data).unwrap()
    }

    // Plain i-j-k triple loop, kept independent of the kernels above.
    fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let b = Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&b).unwrap(), b);
    }

    #[test]
    fn matmul_row_by_column() {
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 4, 5);
        let b = random_matrix(&mut rng, 5, 3);
        let got = a.matmul(&b).unwrap();
        assert_eq!(got.shape(), &[4, 3]);
        for (g, e) in got.data().iter().zip(triple_loop(&a, &b)) {
            assert!((g - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_dimension_mismatch_names_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn blocked_kernels_match_the_triple_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (m, k, n) in [(6, 7, 9), (4, 3, 8), (13, 17, 19), (1, 5, 2), (9, 1, 33)] {
            let a = random_matrix(&mut rng, m, k);
            let b = random_matrix(&mut rng, k, n);
            let expect = triple_loop(&a, &b);

            let mut c = vec![0.0; m * n];
            gemm_nn(m, k, n, a.data(), b.data(), &mut c);
            assert_eq!(c, expect, "nn {m}x{k}x{n}");

            let at = a.transpose().unwrap();
            let mut c = vec![0.0; m * n];
            gemm_tn(m, k, n, at.data(), b.data(), &mut c);
            assert_eq!(c, expect, "tn {m}x{k}x{n}");
        }
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(50.0) - 1.0).abs() <= 1e-15);
        // 1 / (1 + e^1.5), e^1.5 = 4.4816890703380648226...
        let oracle = 1.0 / (1.0 + 4.481_689_070_338_064_822_6_f64);
        assert!((sigmoid(-1.5) - oracle).abs() <= 1e-14);
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0).is_finite());
    }

    #[test]
    fn tanh_values() {
        let t = Tensor::vector(vec![0.0, 0.5]).tanh();
        assert_eq!(t.data()[0], 0.0);
        // tanh(0.5) = 0.46211715726000975850...
        assert!((t.data()[1] - 0.462_117_157_260_009_758_5).abs() <= 1e-14);
    }

    #[test]
    fn hadamard_cases() {
        let a = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let z = Tensor::vector(vec![0.0; 3]);
        assert_eq!(a.hadamard(&z).unwrap().data(), &[0.0, 0.0, 0.0]);
        let p = Tensor::vector(vec![1.0, 2.0])
            .hadamard(&Tensor::vector(vec![3.0, 4.0]))
            .unwrap();
        assert_eq!(p.data(), &[3.0, 8.0]);
        assert!(a.hadamard(&Tensor::vector(vec![1.0])).is_err());
    }

    #[test]
    fn softmax_cases() {
        let s = Tensor::vector(vec![0.0, 0.0]).softmax().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = Tensor::vector(vec![1000.0, 1000.0]).softmax().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        // exp(1)+exp(2)+exp(3) = 30.19287485057736...; evaluated in a fixed scalar form
        let e1 = 2.718_281_828_459_045_235_4_f64;
        let e2 = 7.389_056_098_930_650_227_2_f64;
        let e3 = 20.085_536_923_187_667_741_f64;
        let z = e1 + e2 + e3;
        let s = Tensor::vector(vec![1.0, 2.0, 3.0]).softmax().unwrap();
        for (g, e) in s.data().iter().zip([e1 / z, e2 / z, e3 / z]) {
            assert!((g - e).abs() <= 1e-12, "{g} vs {e}");
        }
        assert!(Tensor::vector(vec![1.0]).softmax().is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn new_rejects_inconsistent_buffers() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    fn finite_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, n)
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, l in 1usize..5, n in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, m, k);
            let b = random_matrix(&mut rng, k, l);
            let c = random_matrix(&mut rng, l, n);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                let scale = x.abs().max(y.abs()).max(1.0);
                prop_assert!((x - y).abs() / scale <= 1e-9);
            }
        }

        #[test]
        fn softmax_shift_invariant(v in finite_vec(4), k in -100.0f64..100.0) {
            let a = Tensor::vector(v.clone()).softmax().unwrap();
            let b = Tensor::vector(v.iter().map(|x| x + k).collect()).softmax().unwrap();
            let sum: f64 = a.data().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!(*x > 0.0);
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn sigmoid_symmetry_and_range(x in -30.0f64..30.0) {
            prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() <= 1e-14);
            prop_assert!(sigmoid(x) > 0.0 && sigmoid(x) < 1.0);
        }

        #[test]
        fn tanh_is_odd(x in -20.0f64..20.0) {
            let t = Tensor::vector(vec![x, -x]).tanh();
            prop_assert_eq!(t.data()[1], -t.data()[0]);
            prop_assert!(t.data()[0].abs() <= 1.0);
        }

        #[test]
        fn hadamard_commutes(a in finite_vec(5), b in finite_vec(5)) {
            let (ta, tb) = (Tensor::vector(a), Tensor::vector(b));
            prop_assert_eq!(ta.hadamard(&tb).unwrap(), tb.hadamard(&ta).unwrap());
        }

        #[test]
        fn ops_leave_inputs_untouched(a in finite_vec(6)) {
            let t = Tensor::matrix(2, 3, a).unwrap();
            let before = t.clone();
            let _ = t.sigmoid();
            let _ = t.tanh();
            let _ = t.hadamard(&t).unwrap();
            let _ = t.matmul(&t.transpose().unwrap()).unwrap();
            prop_assert_eq!(t, before);
        }
    }
}
