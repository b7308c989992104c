use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;

use super::{evaluate, train, TrainConfig};
use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::model::{build_model, Family, ModelConfig};

pub const REPORT_HEADER: &str = "family,config_id,run,seed,test_error,best_val_error,best_iteration";

/// Published results for the original, proprietary recordings. They are
/// printed next to synthetic results for context only.
pub const REFERENCE_RESULTS: [(&str, &str); 3] = [
    ("LSTM-F", "1.6% minimum test error"),
    ("CNN (20 filters)", "2.4% test error"),
    ("BLSTM (25 units)", "14% test error, the worst reported"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRow {
    pub family: Family,
    pub config_id: String,
    pub run: usize,
    pub seed: u64,
    pub test_error: f64,
    pub best_val_error: f64,
    pub best_iteration: usize,
    /// Validation error of the weights after the last iteration. Not written
    /// to the report CSV.
    pub final_val_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellFailure {
    pub config_id: String,
    pub run: usize,
    pub seed: u64,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigSummary {
    pub config: ModelConfig,
    pub mean_test_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentReport {
    pub runs: usize,
    /// Rows in grid order, runs ascending.
    pub rows: Vec<ExperimentRow>,
    pub failures: Vec<CellFailure>,
    grid: Vec<ModelConfig>,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

impl ExperimentReport {
    /// Mean test error of every config whose runs all completed.
    pub fn summaries(&self) -> Vec<ConfigSummary> {
        self.grid
            .iter()
            .filter_map(|cfg| {
                let id = cfg.id();
                let errs: Vec<f64> = self.rows.iter().filter(|r| r.config_id == id).map(|r| r.test_error).collect();
                (errs.len() == self.runs).then(|| ConfigSummary {
                    config: *cfg,
                    mean_test_error: mean(&errs),
                })
            })
            .collect()
    }

    /// Families ordered by their best config mean, lowest first.
    pub fn family_ranking(&self) -> Vec<(Family, ConfigSummary)> {
        let mut best: Vec<(Family, ConfigSummary)> = Vec::new();
        for s in self.summaries() {
            let family = s.config.family();
            match best.iter_mut().find(|(f, _)| *f == family) {
                Some((_, b)) if s.mean_test_error < b.mean_test_error => *b = s,
                Some(_) => {}
                None => best.push((family, s)),
            }
        }
        best.sort_by(|a, b| a.1.mean_test_error.total_cmp(&b.1.mean_test_error).then(a.0.cmp(&b.0)));
        best
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{REPORT_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.family, r.config_id, r.run, r.seed, r.test_error, r.best_val_error, r.best_iteration
            )?;
        }
        out.flush()?;
        Ok(())
    }

    /// `(grid value, mean test error)` rows for one family.
    pub fn plot_csv(&self, family: Family) -> Option<String> {
        let summaries: Vec<ConfigSummary> = self
            .summaries()
            .into_iter()
            .filter(|s| s.config.family() == family)
            .collect();
        if summaries.is_empty() {
            return None;
        }
        let (param, with_layers) = match family {
            Family::Cnn => ("filters", Some("conv_layers")),
            Family::Mlp => ("hidden_neurons", Some("full_layers")),
            _ => ("lstm_units", None),
        };
        let mut s = String::new();
        match with_layers {
            Some(layers) => writeln!(s, "{layers},{param},mean_test_error"),
            None => writeln!(s, "{param},mean_test_error"),
        }
        .expect("writing to a String");
        for sum in summaries {
            let layers = match sum.config.arch {
                crate::model::Architecture::Cnn { conv_layers, .. } => Some(conv_layers),
                crate::model::Architecture::Mlp { layers, .. } => Some(layers),
                _ => None,
            };
            match layers {
                Some(l) => writeln!(s, "{l},{},{}", sum.config.plot_value(), sum.mean_test_error),
                None => writeln!(s, "{},{}", sum.config.plot_value(), sum.mean_test_error),
            }
            .expect("writing to a String");
        }
        Some(s)
    }

    /// Human-readable summary: per-config means, family ranking, failures and
    /// the reference results.
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        writeln!(w, "mean test error over {} run(s)", self.runs).ok();
        for sum in self.summaries() {
            writeln!(w, "  {:<8} {:<14} {:.4}", sum.config.family(), sum.config.id(), sum.mean_test_error).ok();
        }
        writeln!(w, "family ranking (best config mean)").ok();
        for (i, (family, sum)) in self.family_ranking().iter().enumerate() {
            writeln!(w, "  {}. {:<8} {:.4} ({})", i + 1, family, sum.mean_test_error, sum.config.id()).ok();
        }
        if !self.failures.is_empty() {
            writeln!(w, "failed cells").ok();
            for f in &self.failures {
                writeln!(w, "  {} run {} seed {}: {}", f.config_id, f.run, f.seed, f.message).ok();
            }
        }
        writeln!(
            w,
            "reference results on the original proprietary recordings (not reproducible with synthetic data)"
        )
        .ok();
        for (model, result) in REFERENCE_RESULTS {
            writeln!(w, "  {model}: {result}").ok();
        }
        s
    }
}

type CellOutcome = std::result::Result<ExperimentRow, CellFailure>;

fn run_cell(cfg: &ModelConfig, ds: &WindowedDataset, tc: &TrainConfig, run: usize) -> CellOutcome {
    let seed = tc.seed.wrapping_add(run as u64);
    let attempt = || -> Result<ExperimentRow> {
        let mut model = build_model(cfg, seed)?;
        let cell_cfg = TrainConfig {
            seed,
            batch_size: cfg.batch_size,
            ..tc.clone()
        };
        let history = train(&mut model, ds, &cell_cfg)?;
        Ok(ExperimentRow {
            family: cfg.family(),
            config_id: cfg.id(),
            run,
            seed,
            test_error: evaluate(&model, &ds.test)?,
            best_val_error: history.best_validation_error,
            best_iteration: history.best_iteration,
            final_val_error: history.final_validation_error,
        })
    };
    attempt().map_err(|e| CellFailure {
        config_id: cfg.id(),
        run,
        seed,
        message: e.to_string(),
    })
}

/// Trains and tests every config `tc.runs` times, run `r` seeded with
/// `tc.seed + r`. Cells run on up to `jobs` threads; results do not depend on
/// the thread count. A failing cell is recorded without stopping the others.
/// The model's batch size takes precedence over `tc.batch_size`.
pub fn run_experiment(
    grid: &[ModelConfig],
    ds: &WindowedDataset,
    tc: &TrainConfig,
    jobs: usize,
    progress: &(dyn Fn(&CellOutcome) + Sync),
) -> Result<ExperimentReport> {
    if grid.is_empty() {
        return Err(Error::invalid("experiment grid is empty"));
    }
    if jobs == 0 {
        return Err(Error::invalid("jobs must be at least 1"));
    }
    tc.validate()?;
    for cfg in grid {
        cfg.validate()?;
    }
    let cells: Vec<(usize, usize)> = (0..grid.len()).flat_map(|c| (0..tc.runs).map(move |r| (c, r))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<CellOutcome> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(c, r)| {
                let out = run_cell(&grid[c], ds, tc, r);
                progress(&out);
                out
            })
            .collect()
    });
    let mut report = ExperimentReport {
        runs: tc.runs,
        grid: grid.to_vec(),
        ..ExperimentReport::default()
    };
    for o in outcomes {
        match o {
            Ok(row) => report.rows.push(row),
            Err(f) => report.failures.push(f),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, RecurrentCell};

    fn row(cfg: &ModelConfig, run: usize, err: f64) -> ExperimentRow {
        ExperimentRow {
            family: cfg.family(),
            config_id: cfg.id(),
            run,
            seed: run as u64,
            test_error: err,
            best_val_error: 0.0,
            best_iteration: 10,
            final_val_error: 0.0,
        }
    }

    #[test]
    fn means_and_ranking() {
        let lstm = ModelConfig::recurrent(RecurrentCell::Standard, 50);
        let mlp = ModelConfig::mlp(1, 30);
        let errs = [0.01, 0.02, 0.02, 0.01, 0.04];
        let mut rows: Vec<ExperimentRow> = errs.iter().enumerate().map(|(i, &e)| row(&lstm, i, e)).collect();
        rows.extend((0..5).map(|i| row(&mlp, i, 0.1)));
        let report = ExperimentReport {
            runs: 5,
            rows,
            failures: Vec::new(),
            grid: vec![mlp, lstm],
        };
        let s = report.summaries();
        assert!((s[1].mean_test_error - 0.02).abs() < 1e-15);
        let ranking: Vec<Family> = report.family_ranking().into_iter().map(|r| r.0).collect();
        assert_eq!(ranking, vec![Family::LstmF, Family::Mlp]);
        assert!(report.plot_csv(Family::Cnn).is_none());
        assert_eq!(report.plot_csv(Family::Mlp).unwrap(), "full_layers,hidden_neurons,mean_test_error\n1,30,0.1\n");
        let text = report.summary_text();
        assert!(text.contains("not reproducible"));
    }

    #[test]
    fn incomplete_configs_get_no_mean() {
        let mlp = ModelConfig::mlp(1, 30);
        let report = ExperimentReport {
            runs: 2,
            rows: vec![row(&mlp, 0, 0.1)],
            failures: vec![CellFailure {
                config_id: mlp.id(),
                run: 1,
                seed: 1,
                message: "diverged".into(),
            }],
            grid: vec![mlp],
        };
        assert!(report.summaries().is_empty());
        assert!(report.summary_text().contains("diverged"));
    }

    #[test]
    fn csv_layout() {
        let cfg = ModelConfig::cnn(1, 20);
        let report = ExperimentReport {
            runs: 1,
            rows: vec![row(&cfg, 0, 0.025)],
            failures: Vec::new(),
            grid: vec![cfg],
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "family,config_id,run,seed,test_error,best_val_error,best_iteration\nCNN,cnn-c1-f20,0,0,0.025,0,10\n"
        );
        assert!(matches!(cfg.arch, Architecture::Cnn { .. }));
    }
}
