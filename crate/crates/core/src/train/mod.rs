//! Mini-batch training with best-on-validation checkpointing, evaluation and
//! the multi-run grid experiment.

pub mod experiment;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Window, WindowedDataset};
use crate::error::{Error, Result};
use crate::model::{stack_windows, Classifier};
use crate::nn::{CrossEntropyHead, Layer};
use crate::tensor::Tensor;

pub use experiment::{run_experiment, CellFailure, ExperimentReport, ExperimentRow, REPORT_HEADER};
pub use optim::{clip_global_norm, Optimizer, OptimizerKind};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_iterations: usize,
    pub batch_size: usize,
    pub runs: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Iterations between validation checkpoints.
    pub validation_period: usize,
    pub seed: u64,
    /// Global gradient norm limit for recurrent models.
    pub clip_norm: Option<f64>,
    /// Stop once a checkpoint reaches zero validation error. The returned
    /// weights are the same either way.
    pub stop_at_zero_validation: bool,
    /// Stop after this many consecutive checkpoints without a new best.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iterations: 3000,
            batch_size: 100,
            runs: 5,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            validation_period: 10,
            seed: 0,
            clip_norm: Some(5.0),
            stop_at_zero_validation: true,
            patience: Some(50),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("max-iterations", self.max_iterations),
            ("batch-size", self.batch_size),
            ("runs", self.runs),
            ("validation-period", self.validation_period),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.validation_period > self.max_iterations {
            return Err(Error::invalid(format!(
                "validation-period {} exceeds max-iterations {}",
                self.validation_period, self.max_iterations
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.patience == Some(0) {
            return Err(Error::invalid("patience must be at least one checkpoint"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("max_iterations".into(), self.max_iterations.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("runs".into(), self.runs.to_string()),
            ("optimizer".into(), self.optimizer.to_string()),
            ("learning_rate".into(), self.learning_rate.to_string()),
            ("validation_period".into(), self.validation_period.to_string()),
            ("seed".into(), self.seed.to_string()),
            (
                "clip_norm".into(),
                self.clip_norm.map_or_else(|| "none".into(), |c| c.to_string()),
            ),
            ("stop_at_zero_validation".into(), self.stop_at_zero_validation.to_string()),
            (
                "patience".into(),
                self.patience.map_or_else(|| "none".into(), |p| p.to_string()),
            ),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    pub validation_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    /// Mean cross-entropy of each mini-batch, before its update.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
    pub best_iteration: usize,
    pub best_validation_error: f64,
    /// Validation error of the weights after the last iteration run.
    pub final_validation_error: f64,
}

impl TrainHistory {
    pub fn iterations_run(&self) -> usize {
        self.losses.len()
    }
}

/// Fraction of windows whose predicted class differs from the label.
pub fn evaluate(model: &Classifier, windows: &[Window]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty window list"));
    }
    let predicted = model.predict_batch(windows)?;
    let wrong = predicted.iter().zip(windows).filter(|(p, w)| **p != w.label).count();
    Ok(wrong as f64 / windows.len() as f64)
}

/// Trains `model` in place and leaves it holding the checkpoint with the
/// lowest validation error (earliest on ties). The dataset's normalization
/// statistics are attached to the model.
pub fn train(model: &mut Classifier, ds: &WindowedDataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    for (name, part) in [("train", &ds.train), ("validation", &ds.validation)] {
        if part.is_empty() {
            return Err(Error::invalid(format!("{name} partition is empty")));
        }
    }
    let n = ds.train.len();
    if cfg.batch_size > n {
        return Err(Error::invalid(format!(
            "batch size {} exceeds the {n} training windows",
            cfg.batch_size
        )));
    }
    model.set_norm(ds.stats.clone());

    let clip = if model.config().family().is_recurrent() {
        cfg.clip_norm
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut head = CrossEntropyHead::new(Vec::new());
    let mut history = TrainHistory {
        best_validation_error: f64::INFINITY,
        ..TrainHistory::default()
    };
    let mut best: Option<Vec<Tensor>> = None;
    let mut stale = 0;

    for iteration in 1..=cfg.max_iterations {
        if cursor + cfg.batch_size > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch_idx = &order[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;
        let x = stack_windows(batch_idx.iter().map(|&i| &ds.train[i].samples))?;
        head.set_labels(batch_idx.iter().map(|&i| ds.train[i].label).collect());

        let net = model.net_mut();
        net.zero_grad();
        let logits = net.forward_train(&x)?;
        let loss = head.forward_train(&logits)?.data()[0];
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration,
                learning_rate: cfg.learning_rate,
                loss,
            });
        }
        let grad = head.backward(&Tensor::vector(vec![1.0]))?;
        net.backward(&grad)?;
        let mut params = net.params_mut();
        if let Some(max_norm) = clip {
            clip_global_norm(&mut params, max_norm);
        }
        optimizer.step(&mut params);
        history.losses.push(loss);

        if iteration % cfg.validation_period == 0 {
            let err = evaluate(model, &ds.validation)?;
            history.checkpoints.push(Checkpoint {
                iteration,
                validation_error: err,
            });
            if err < history.best_validation_error {
                history.best_validation_error = err;
                history.best_iteration = iteration;
                best = Some(model.snapshot());
                stale = 0;
            } else {
                stale += 1;
            }
            if err == 0.0 && cfg.stop_at_zero_validation {
                break;
            }
            if cfg.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }

    history.final_validation_error = match history.checkpoints.last() {
        Some(c) if c.iteration == history.iterations_run() => c.validation_error,
        _ => evaluate(model, &ds.validation)?,
    };
    if let Some(snapshot) = best {
        model.restore(&snapshot)?;
    }
    Ok(history)
}
