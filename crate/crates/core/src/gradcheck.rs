//! Central finite differences as an independent check on every analytic
//! gradient in [`crate::nn`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    Activation, BiLstm, CandidateActivation, Conv1d, CrossEntropyHead, Dense, Flatten, Layer, Lstm, LstmVariant,
    MaxPool1d, Relu, Sequential,
};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Names accepted by [`run_builtin`].
pub const BUILTIN_CHECKS: &[&str] = &[
    "dense",
    "conv1d",
    "maxpool",
    "lstm",
    "lstm-peephole",
    "lstm-sigmoid",
    "blstm",
    "xent",
    "cnn-chain",
];

#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub parameter: String,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub layer: String,
    pub tolerance: f64,
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn max_relative_error(&self) -> f64 {
        self.entries.iter().map(|e| e.relative_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }

    pub fn passed(&self) -> bool {
        self.max_relative_error() <= self.tolerance
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradEntry> {
        self.entries.iter().filter(|e| e.relative_error > self.tolerance)
    }
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Seed of the random projection that turns the layer output into a scalar.
    pub seed: u64,
    /// Also check the gradient wrt the layer input.
    pub include_input: bool,
    /// Test hook: adds 1.0 to the first analytic gradient before comparing.
    pub corrupt: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            epsilon: DEFAULT_EPSILON,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            include_input: false,
            corrupt: false,
        }
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `(f(θ + ε·e_k) − f(θ − ε·e_k)) / 2ε` for every scalar `k` of `at`.
pub fn central_difference(mut f: impl FnMut(&Tensor) -> f64, at: &Tensor, epsilon: f64) -> Result<Tensor> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut probe = at.clone();
    let mut out = Tensor::zeros(at.shape());
    for k in 0..at.len() {
        let orig = at.data()[k];
        probe.data_mut()[k] = orig + epsilon;
        let plus = f(&probe);
        probe.data_mut()[k] = orig - epsilon;
        let minus = f(&probe);
        probe.data_mut()[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss while perturbing parameter index {k}")));
        }
        out.data_mut()[k] = (plus - minus) / (2.0 * epsilon);
    }
    Ok(out)
}

/// Compares analytic and numeric gradients of `Σ r ⊙ layer(input)` for a fixed
/// random `r`, over every trainable scalar (and the input when requested).
pub fn check_layer(layer: &mut dyn Layer, input: &Tensor, options: &CheckOptions) -> Result<GradReport> {
    let out = layer.forward_train(input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x9e37_79b9_7f4a_7c15);
    let projection = Tensor::new(
        out.shape().to_vec(),
        (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let loss_of = |y: Result<Tensor>| -> f64 {
        match y {
            Ok(y) => y.data().iter().zip(projection.data()).map(|(a, b)| a * b).sum(),
            Err(_) => f64::NAN,
        }
    };

    layer.zero_grad();
    let d_input = layer.backward(&projection)?;
    if d_input.shape() != input.shape() {
        return Err(Error::shape("input gradient", d_input.shape(), input.shape()));
    }

    let analytic: Vec<(String, Tensor, Tensor)> = layer
        .params_mut()
        .into_iter()
        .map(|p| (p.name, p.value.clone(), p.grad.clone()))
        .collect();

    let mut entries = Vec::new();
    for (index, (name, value, grad)) in analytic.iter().enumerate() {
        if grad.shape() != value.shape() {
            return Err(Error::shape("parameter gradient", grad.shape(), value.shape()));
        }
        let numeric = central_difference(
            |theta| {
                set_param(layer, index, theta);
                loss_of(layer.forward(input))
            },
            value,
            options.epsilon,
        )
        .map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("{name}: {msg}")),
            other => other,
        })?;
        set_param(layer, index, value);
        push_entries(&mut entries, name, grad, &numeric);
    }

    if options.include_input {
        let numeric = central_difference(|x| loss_of(layer.forward(x)), input, options.epsilon)?;
        push_entries(&mut entries, "input", &d_input, &numeric);
    }

    if options.corrupt {
        if let Some(e) = entries.first_mut() {
            e.analytic += 1.0;
            e.relative_error = relative_error(e.analytic, e.numeric);
        }
    }

    Ok(GradReport {
        layer: layer.name().to_string(),
        tolerance: options.tolerance,
        entries,
    })
}

fn push_entries(entries: &mut Vec<GradEntry>, name: &str, analytic: &Tensor, numeric: &Tensor) {
    for (k, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        entries.push(GradEntry {
            parameter: format!("{name}[{k}]"),
            analytic: a,
            numeric: n,
            relative_error: relative_error(a, n),
        });
    }
}

fn set_param(layer: &mut dyn Layer, index: usize, value: &Tensor) {
    let mut params = layer.params_mut();
    params[index].value.data_mut().copy_from_slice(value.data());
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("valid shape")
}

/// Smallest winner/runner-up gap over pooling windows of `[B, L, F]` whose
/// winner is positive. Windows capped at zero are skipped: a ReLU in front
/// makes their ties harmless.
fn positive_pool_gap(x: &Tensor, pool: usize) -> f64 {
    let (batch, l, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut gap = f64::INFINITY;
    for b in 0..batch {
        for o in 0..l / pool {
            for fi in 0..f {
                let mut vals: Vec<f64> = (0..pool).map(|p| x.data()[(b * l + o * pool + p) * f + fi]).collect();
                vals.sort_by(|a, b| b.total_cmp(a));
                if vals[0] > 0.0 {
                    gap = gap.min(vals[0] - vals[1].max(0.0));
                }
            }
        }
    }
    gap
}

const MIN_POOL_GAP: f64 = 1e-3;

/// Builds the named layer from `seed`, then checks parameters and input.
/// Cases containing max pooling are resampled until every window has a clear
/// winner, since ties are not differentiable.
pub fn run_builtin(name: &str, seed: u64, tolerance: f64, corrupt: bool) -> Result<GradReport> {
    let options = CheckOptions {
        tolerance,
        seed,
        include_input: true,
        corrupt,
        ..CheckOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = match name {
        "dense" => {
            let mut layer = Dense::new(4, 3, Activation::Identity, &mut rng);
            let x = uniform(&mut rng, &[2, 4], 1.0);
            check_layer(&mut layer, &x, &options)?
        }
        "conv1d" => {
            let mut layer = Conv1d::new(3, 4, 2, &mut rng);
            let x = uniform(&mut rng, &[2, 9, 2], 1.0);
            check_layer(&mut layer, &x, &options)?
        }
        "maxpool" => loop {
            let x = uniform(&mut rng, &[2, 8, 3], 1.0);
            let shifted = x.map(|v| v + 10.0);
            if positive_pool_gap(&shifted, 2) < MIN_POOL_GAP {
                continue;
            }
            let mut layer = MaxPool1d::new(2)?;
            break check_layer(&mut layer, &x, &options)?;
        },
        "lstm" | "lstm-peephole" | "lstm-sigmoid" => {
            let variant = if name == "lstm-peephole" {
                LstmVariant::Peephole
            } else {
                LstmVariant::Standard
            };
            let cand = if name == "lstm-sigmoid" {
                CandidateActivation::Sigmoid
            } else {
                CandidateActivation::Tanh
            };
            let mut layer = Lstm::new(2, 3, variant, cand, &mut rng);
            randomize_params(&mut layer, &mut rng, 0.5);
            let x = uniform(&mut rng, &[2, 4, 2], 1.0);
            check_layer(&mut layer, &x, &options)?
        }
        "blstm" => {
            let mut layer = BiLstm::new(2, 5, LstmVariant::Standard, CandidateActivation::Tanh, &mut rng)?;
            randomize_params(&mut layer, &mut rng, 0.5);
            let x = uniform(&mut rng, &[2, 4, 2], 1.0);
            check_layer(&mut layer, &x, &options)?
        }
        "xent" => {
            let labels = (0..3).map(|_| rng.random_range(0..3usize)).collect();
            let mut layer = CrossEntropyHead::new(labels);
            let x = uniform(&mut rng, &[3, 3], 2.0);
            check_layer(&mut layer, &x, &options)?
        }
        "cnn-chain" => loop {
            let conv = Conv1d::new(3, 3, 2, &mut rng);
            let x = uniform(&mut rng, &[2, 10, 2], 1.0);
            let pre_pool = Relu::new().forward(&conv.forward(&x)?)?;
            if positive_pool_gap(&pre_pool, 2) < MIN_POOL_GAP {
                continue;
            }
            // conv output 8 → pooled 4 → 4·3 features
            let dense = Dense::new(12, 2, Activation::Identity, &mut rng);
            let mut chain = Sequential::new();
            chain.push(conv);
            chain.push(Relu::new());
            chain.push(MaxPool1d::new(2)?);
            chain.push(Flatten::new());
            chain.push(dense);
            break check_layer(&mut chain, &x, &options)?;
        },
        other => {
            return Err(Error::invalid(format!(
                "unknown layer '{other}', expected one of: all, {}",
                BUILTIN_CHECKS.join(", ")
            )))
        }
    };
    report.layer = name.to_string();
    Ok(report)
}

/// Replaces every parameter with uniform(−scale, scale) noise so that biases
/// and peepholes are exercised away from their initial values.
fn randomize_params(layer: &mut dyn Layer, rng: &mut ChaCha8Rng, scale: f64) {
    for p in layer.params_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;

    #[test]
    fn quadratic_derivative() {
        let g = central_difference(|t| t.data()[0] * t.data()[0], &Tensor::vector(vec![3.0]), 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() <= 1e-9);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let g = central_difference(|t| sigmoid(t.data()[0]), &Tensor::vector(vec![0.0]), 1e-5).unwrap();
        assert!((g.data()[0] - 0.25).abs() <= 1e-9);
    }

    #[test]
    fn non_finite_loss_names_index() {
        let err = central_difference(
            |t| if t.data()[1] > 1.0 { f64::INFINITY } else { 0.0 },
            &Tensor::vector(vec![0.0, 1.0]),
            1e-5,
        )
        .unwrap_err();
        assert!(err.to_string().contains("index 1"), "{err}");
        assert!(central_difference(|_| 0.0, &Tensor::vector(vec![0.0]), 0.0).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn maxpool_has_empty_parameter_report() {
        let mut layer = MaxPool1d::new(2).unwrap();
        let x = Tensor::new(vec![1, 4, 1], vec![0.0, 1.0, 3.0, 2.0]).unwrap();
        let report = check_layer(&mut layer, &x, &CheckOptions::default()).unwrap();
        assert!(report.entries.is_empty());
        assert!(report.passed());
    }

    #[test]
    fn every_builtin_passes_on_a_few_seeds() {
        for name in BUILTIN_CHECKS {
            for seed in 0..3 {
                let r = run_builtin(name, seed, DEFAULT_TOLERANCE, false).unwrap();
                assert!(!r.entries.is_empty(), "{name}");
                assert!(r.passed(), "{name} seed {seed}: {:?}", r.worst());
            }
        }
    }

    #[test]
    fn corruption_is_caught_and_named() {
        let r = run_builtin("dense", 0, DEFAULT_TOLERANCE, true).unwrap();
        assert!(!r.passed());
        assert_eq!(r.failures().next().unwrap().parameter, "weight[0]");
    }

    #[test]
    fn halving_epsilon_shrinks_truncation_error() {
        // Large steps so truncation, not roundoff, dominates.
        let errors: Vec<f64> = [1e-2, 5e-3]
            .iter()
            .map(|&eps| {
                let mut rng = ChaCha8Rng::seed_from_u64(21);
                let mut layer = Lstm::new(2, 2, LstmVariant::Standard, CandidateActivation::Tanh, &mut rng);
                randomize_params(&mut layer, &mut rng, 0.8);
                let x = uniform(&mut rng, &[1, 3, 2], 1.0);
                let opts = CheckOptions {
                    epsilon: eps,
                    ..CheckOptions::default()
                };
                let r = check_layer(&mut layer, &x, &opts).unwrap();
                r.entries.iter().map(|e| (e.analytic - e.numeric).abs()).fold(0.0, f64::max)
            })
            .collect();
        assert!(errors[1] < errors[0], "{errors:?}");
    }

    #[test]
    fn unknown_layer_name() {
        assert!(run_builtin("gru", 0, 1e-4, false).is_err());
    }
}
