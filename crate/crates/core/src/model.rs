//! The five model families and their hyperparameter grid, assembled into
//! two-class classifiers over `[50, 3]` windows.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{NormStats, Window, CHANNELS, WINDOW};
use crate::error::{Error, Result};
use crate::kv::{format_kv, parse_kv, require, require_parsed};
use crate::nn::container::{read_records, record_text, text_record, write_records};
use crate::nn::{
    Activation, BiLstm, CandidateActivation, Conv1d, Dense, Flatten, Layer, Lstm, LstmVariant, MaxPool1d, Relu,
    Sequential,
};
use crate::tensor::{argmax, Tensor};

pub const CLASSES: usize = 2;
pub const POOL: usize = 2;

pub const GRID_CONV_LAYERS: [usize; 2] = [1, 2];
pub const GRID_FILTERS: [usize; 3] = [20, 40, 50];
pub const GRID_FILTER_SIZE: usize = 10;
pub const GRID_CNN_HIDDEN: usize = 1000;
pub const GRID_LSTM_UNITS: [usize; 3] = [25, 35, 50];
pub const GRID_MLP_LAYERS: [usize; 2] = [1, 2];
pub const GRID_MLP_NEURONS: [usize; 3] = [30, 50, 100];
pub const GRID_BATCH_SIZE: usize = 100;

const CONFIG_RECORD: &str = "__config__";
const NORM_MEAN_RECORD: &str = "__norm_mean__";
const NORM_STD_RECORD: &str = "__norm_std__";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Cnn,
    LstmF,
    LstmP,
    Blstm,
    Mlp,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Cnn, Family::LstmF, Family::LstmP, Family::Blstm, Family::Mlp];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Cnn => "CNN",
            Family::LstmF => "LSTM-F",
            Family::LstmP => "LSTM-P",
            Family::Blstm => "BLSTM",
            Family::Mlp => "MLP",
        }
    }

    /// Lower-case form used on the command line and in config ids.
    pub fn slug(self) -> &'static str {
        match self {
            Family::Cnn => "cnn",
            Family::LstmF => "lstm-f",
            Family::LstmP => "lstm-p",
            Family::Blstm => "blstm",
            Family::Mlp => "mlp",
        }
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, Family::LstmF | Family::LstmP | Family::Blstm)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.slug().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown model family '{s}' (expected cnn, lstm-f, lstm-p, blstm or mlp)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecurrentCell {
    Standard,
    Peephole,
    Bidirectional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    Cnn {
        conv_layers: usize,
        filters: usize,
        filter_size: usize,
        hidden_neurons: usize,
    },
    Recurrent {
        cell: RecurrentCell,
        units: usize,
        candidate: CandidateActivation,
    },
    Mlp {
        layers: usize,
        neurons: usize,
    },
}

/// One cell of the hyperparameter grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub batch_size: usize,
    /// Accept values outside the grid.
    pub off_grid: bool,
}

impl ModelConfig {
    pub fn cnn(conv_layers: usize, filters: usize) -> Self {
        Self::from_arch(Architecture::Cnn {
            conv_layers,
            filters,
            filter_size: GRID_FILTER_SIZE,
            hidden_neurons: GRID_CNN_HIDDEN,
        })
    }

    pub fn recurrent(cell: RecurrentCell, units: usize) -> Self {
        Self::from_arch(Architecture::Recurrent {
            cell,
            units,
            candidate: CandidateActivation::default(),
        })
    }

    pub fn mlp(layers: usize, neurons: usize) -> Self {
        Self::from_arch(Architecture::Mlp { layers, neurons })
    }

    fn from_arch(arch: Architecture) -> Self {
        ModelConfig {
            arch,
            batch_size: GRID_BATCH_SIZE,
            off_grid: false,
        }
    }

    pub fn family(&self) -> Family {
        match self.arch {
            Architecture::Cnn { .. } => Family::Cnn,
            Architecture::Recurrent { cell, .. } => match cell {
                RecurrentCell::Standard => Family::LstmF,
                RecurrentCell::Peephole => Family::LstmP,
                RecurrentCell::Bidirectional => Family::Blstm,
            },
            Architecture::Mlp { .. } => Family::Mlp,
        }
    }

    /// The grid parameter plotted for this family: filters, units or neurons.
    pub fn plot_value(&self) -> usize {
        match self.arch {
            Architecture::Cnn { filters, .. } => filters,
            Architecture::Recurrent { units, .. } => units,
            Architecture::Mlp { neurons, .. } => neurons,
        }
    }

    /// Short stable identifier such as `cnn-c1-f20` or `blstm-u50`.
    pub fn id(&self) -> String {
        let mut id = match self.arch {
            Architecture::Cnn {
                conv_layers,
                filters,
                filter_size,
                hidden_neurons,
            } => {
                let mut s = format!("cnn-c{conv_layers}-f{filters}");
                if filter_size != GRID_FILTER_SIZE {
                    s += &format!("-k{filter_size}");
                }
                if hidden_neurons != GRID_CNN_HIDDEN {
                    s += &format!("-h{hidden_neurons}");
                }
                s
            }
            Architecture::Recurrent { units, candidate, .. } => {
                let mut s = format!("{}-u{units}", self.family().slug());
                if candidate != CandidateActivation::Tanh {
                    s += &format!("-{}", candidate.as_str());
                }
                s
            }
            Architecture::Mlp { layers, neurons } => format!("mlp-l{layers}-n{neurons}"),
        };
        if self.batch_size != GRID_BATCH_SIZE {
            id += &format!("-b{}", self.batch_size);
        }
        id
    }

    /// Sequence lengths after each conv and pool stage, or an error when the
    /// window is too short for the stack.
    pub fn conv_lengths(conv_layers: usize, filter_size: usize) -> Result<Vec<(usize, usize)>> {
        let mut len = WINDOW;
        let mut out = Vec::with_capacity(conv_layers);
        for layer in 0..conv_layers {
            if len < filter_size {
                return Err(Error::invalid(format!(
                    "window too short for stacked convolutions: conv layer {} sees length {len} < filter size {filter_size}",
                    layer + 1
                )));
            }
            let conv = len - filter_size + 1;
            let pooled = conv / POOL;
            if pooled == 0 {
                return Err(Error::invalid(format!(
                    "window too short for stacked convolutions: conv layer {} output {conv} vanishes after pooling",
                    layer + 1
                )));
            }
            out.push((conv, pooled));
            len = pooled;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::invalid(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        let on_grid = |name: &str, v: usize, grid: &[usize]| {
            if self.off_grid || grid.contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "{name} = {v} is not in the grid {grid:?} (set the override flag to allow it)"
                )))
            }
        };
        positive("batch size", self.batch_size)?;
        on_grid("batch size", self.batch_size, &[GRID_BATCH_SIZE])?;
        match self.arch {
            Architecture::Cnn {
                conv_layers,
                filters,
                filter_size,
                hidden_neurons,
            } => {
                positive("conv layers", conv_layers)?;
                positive("filters", filters)?;
                positive("filter size", filter_size)?;
                positive("hidden neurons", hidden_neurons)?;
                on_grid("conv layers", conv_layers, &GRID_CONV_LAYERS)?;
                on_grid("filters", filters, &GRID_FILTERS)?;
                on_grid("filter size", filter_size, &[GRID_FILTER_SIZE])?;
                on_grid("hidden neurons", hidden_neurons, &[GRID_CNN_HIDDEN])?;
                Self::conv_lengths(conv_layers, filter_size)?;
            }
            Architecture::Recurrent { cell, units, .. } => {
                positive("lstm units", units)?;
                if cell == RecurrentCell::Bidirectional && units < 2 {
                    return Err(Error::invalid("a bidirectional model needs at least 2 units"));
                }
                on_grid("lstm units", units, &GRID_LSTM_UNITS)?;
            }
            Architecture::Mlp { layers, neurons } => {
                positive("full layers", layers)?;
                positive("hidden neurons", neurons)?;
                on_grid("full layers", layers, &GRID_MLP_LAYERS)?;
                on_grid("hidden neurons", neurons, &GRID_MLP_NEURONS)?;
            }
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut p: Vec<(&str, String)> = vec![("family", self.family().as_str().into())];
        match self.arch {
            Architecture::Cnn {
                conv_layers,
                filters,
                filter_size,
                hidden_neurons,
            } => {
                p.push(("conv_layers", conv_layers.to_string()));
                p.push(("filters", filters.to_string()));
                p.push(("filter_size", filter_size.to_string()));
                p.push(("full_layers", "1".into()));
                p.push(("hidden_neurons", hidden_neurons.to_string()));
            }
            Architecture::Recurrent { units, candidate, .. } => {
                p.push(("lstm_units", units.to_string()));
                p.push(("candidate_activation", candidate.as_str().into()));
            }
            Architecture::Mlp { layers, neurons } => {
                p.push(("full_layers", layers.to_string()));
                p.push(("hidden_neurons", neurons.to_string()));
            }
        }
        p.push(("batch_size", self.batch_size.to_string()));
        p.push(("off_grid", self.off_grid.to_string()));
        p.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_metadata(&self) -> String {
        format_kv(self.to_pairs())
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let family: Family = require(pairs, "family")?
            .parse()
            .or_else(|_| {
                let name = require(pairs, "family")?;
                Family::ALL
                    .into_iter()
                    .find(|f| f.as_str() == name)
                    .ok_or_else(|| Error::Format(format!("unknown family '{name}'")))
            })?;
        let arch = match family {
            Family::Cnn => Architecture::Cnn {
                conv_layers: require_parsed(pairs, "conv_layers")?,
                filters: require_parsed(pairs, "filters")?,
                filter_size: require_parsed(pairs, "filter_size")?,
                hidden_neurons: require_parsed(pairs, "hidden_neurons")?,
            },
            Family::LstmF | Family::LstmP | Family::Blstm => Architecture::Recurrent {
                cell: match family {
                    Family::LstmF => RecurrentCell::Standard,
                    Family::LstmP => RecurrentCell::Peephole,
                    _ => RecurrentCell::Bidirectional,
                },
                units: require_parsed(pairs, "lstm_units")?,
                candidate: require_parsed(pairs, "candidate_activation")?,
            },
            Family::Mlp => Architecture::Mlp {
                layers: require_parsed(pairs, "full_layers")?,
                neurons: require_parsed(pairs, "hidden_neurons")?,
            },
        };
        let cfg = ModelConfig {
            arch,
            batch_size: require_parsed(pairs, "batch_size")?,
            off_grid: require_parsed(pairs, "off_grid")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_metadata(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_kv(text, Path::new(CONFIG_RECORD))?)
    }
}

/// Every grid configuration, family by family.
pub fn enumerate_grid() -> Vec<ModelConfig> {
    let mut grid = Vec::with_capacity(21);
    for family in Family::ALL {
        grid.extend(family_grid(family));
    }
    grid
}

pub fn family_grid(family: Family) -> Vec<ModelConfig> {
    match family {
        Family::Cnn => GRID_CONV_LAYERS
            .iter()
            .flat_map(|&c| GRID_FILTERS.iter().map(move |&f| ModelConfig::cnn(c, f)))
            .collect(),
        Family::LstmF | Family::LstmP | Family::Blstm => {
            let cell = match family {
                Family::LstmF => RecurrentCell::Standard,
                Family::LstmP => RecurrentCell::Peephole,
                _ => RecurrentCell::Bidirectional,
            };
            GRID_LSTM_UNITS.iter().map(|&u| ModelConfig::recurrent(cell, u)).collect()
        }
        Family::Mlp => GRID_MLP_LAYERS
            .iter()
            .flat_map(|&l| GRID_MLP_NEURONS.iter().map(move |&n| ModelConfig::mlp(l, n)))
            .collect(),
    }
}

/// A network together with its configuration and, once trained, the input
/// normalization it expects.
pub struct Classifier {
    config: ModelConfig,
    net: Sequential,
    norm: Option<NormStats>,
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Classifier> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Sequential::new();
    match config.arch {
        Architecture::Cnn {
            conv_layers,
            filters,
            filter_size,
            hidden_neurons,
        } => {
            let lengths = ModelConfig::conv_lengths(conv_layers, filter_size)?;
            let mut channels = CHANNELS;
            for _ in 0..conv_layers {
                net.push(Conv1d::new(filters, filter_size, channels, &mut rng));
                net.push(Relu::new());
                net.push(MaxPool1d::new(POOL)?);
                channels = filters;
            }
            let pooled = lengths.last().map_or(WINDOW, |l| l.1);
            net.push(Flatten::new());
            net.push(Dense::new(pooled * filters, hidden_neurons, Activation::Relu, &mut rng));
            net.push(Dense::new(hidden_neurons, CLASSES, Activation::Identity, &mut rng));
        }
        Architecture::Recurrent { cell, units, candidate } => {
            match cell {
                RecurrentCell::Standard => net.push(Lstm::new(CHANNELS, units, LstmVariant::Standard, candidate, &mut rng)),
                RecurrentCell::Peephole => net.push(Lstm::new(CHANNELS, units, LstmVariant::Peephole, candidate, &mut rng)),
                RecurrentCell::Bidirectional => {
                    net.push(BiLstm::new(CHANNELS, units, LstmVariant::Standard, candidate, &mut rng)?)
                }
            }
            net.push(Dense::new(units, CLASSES, Activation::Identity, &mut rng));
        }
        Architecture::Mlp { layers, neurons } => {
            net.push(Flatten::new());
            let mut width = WINDOW * CHANNELS;
            for _ in 0..layers {
                net.push(Dense::new(width, neurons, Activation::Relu, &mut rng));
                width = neurons;
            }
            net.push(Dense::new(width, CLASSES, Activation::Identity, &mut rng));
        }
    }
    Ok(Classifier {
        config: *config,
        net,
        norm: None,
    })
}

/// Stacks windows into a `[B, 50, 3]` batch.
pub fn stack_windows<'a>(windows: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut count = 0;
    for w in windows {
        check_window(w)?;
        data.extend_from_slice(w.data());
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("empty batch"));
    }
    Tensor::new(vec![count, WINDOW, CHANNELS], data)
}

fn check_window(w: &Tensor) -> Result<()> {
    if w.shape() != [WINDOW, CHANNELS] {
        return Err(Error::shape("predict", w.shape(), &[WINDOW, CHANNELS]));
    }
    Ok(())
}

/// Argmax with ties resolved toward the lower class index.
pub fn class_of(logits: &[f64]) -> usize {
    argmax(logits)
}

const PREDICT_CHUNK: usize = 256;

impl Classifier {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn net(&self) -> &Sequential {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Sequential {
        &mut self.net
    }

    pub fn norm(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    pub fn set_norm(&mut self, norm: Option<NormStats>) {
        self.norm = norm;
    }

    pub fn parameter_count(&self) -> usize {
        self.net.parameter_count()
    }

    /// Output shape after every layer for a single window.
    pub fn trace_shapes(&self) -> Result<Vec<(&'static str, Vec<usize>)>> {
        self.net.trace_shapes(&Tensor::zeros(&[1, WINDOW, CHANNELS]))
    }

    /// Logits `[2]` for one `[50, 3]` window.
    pub fn logits(&self, window: &Tensor) -> Result<Tensor> {
        check_window(window)?;
        let batch = window.clone().reshape(&[1, WINDOW, CHANNELS])?;
        self.net.forward(&batch)?.reshape(&[CLASSES])
    }

    pub fn predict(&self, window: &Tensor) -> Result<usize> {
        Ok(class_of(self.logits(window)?.data()))
    }

    pub fn predict_batch(&self, windows: &[Window]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(PREDICT_CHUNK) {
            let batch = stack_windows(chunk.iter().map(|w| &w.samples))?;
            let logits = self.net.forward(&batch)?;
            out.extend(logits.data().chunks_exact(CLASSES).map(class_of));
        }
        Ok(out)
    }

    /// Parameter snapshot in `params()` order.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.net.params().into_iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) -> Result<()> {
        let mut params = self.net.params_mut();
        if params.len() != snapshot.len() {
            return Err(Error::invalid(format!(
                "snapshot holds {} tensors, model has {}",
                snapshot.len(),
                params.len()
            )));
        }
        for (p, s) in params.iter_mut().zip(snapshot) {
            if p.value.shape() != s.shape() {
                return Err(Error::shape("restore", p.value.shape(), s.shape()));
            }
            p.value.data_mut().copy_from_slice(s.data());
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let meta = text_record(&self.config.to_metadata());
        let norm = self
            .norm
            .as_ref()
            .map(|n| (Tensor::vector(n.mean.clone()), Tensor::vector(n.std.clone())));
        let params = self.net.params();
        let mut records: Vec<(&str, &Tensor)> = vec![(CONFIG_RECORD, &meta)];
        if let Some((mean, std)) = &norm {
            records.push((NORM_MEAN_RECORD, mean));
            records.push((NORM_STD_RECORD, std));
        }
        records.extend(params.iter().map(|p| (p.name.as_str(), p.value)));
        write_records(out, records)
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut records = read_records(input)?.into_iter();
        let (name, meta) = records
            .next()
            .ok_or_else(|| Error::Format("no records".into()))?;
        if name != CONFIG_RECORD {
            return Err(Error::Format(format!("first record is '{name}', expected {CONFIG_RECORD}")));
        }
        let config = ModelConfig::from_metadata(&record_text(&meta)?)?;
        let mut model = build_model(&config, 0)?;
        let mut mean = None;
        let mut std = None;
        let mut weights = std::collections::HashMap::new();
        for (name, t) in records {
            match name.as_str() {
                NORM_MEAN_RECORD => mean = Some(t.into_data()),
                NORM_STD_RECORD => std = Some(t.into_data()),
                _ => {
                    if weights.insert(name.clone(), t).is_some() {
                        return Err(Error::Format(format!("duplicate record '{name}'")));
                    }
                }
            }
        }
        model.norm = match (mean, std) {
            (Some(mean), Some(std)) if mean.len() == CHANNELS && std.len() == CHANNELS => Some(NormStats { mean, std }),
            (None, None) => None,
            _ => return Err(Error::Format("incomplete normalization records".into())),
        };
        for p in model.net.params_mut() {
            let t = weights
                .remove(&p.name)
                .ok_or_else(|| Error::Format(format!("missing parameter '{}'", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value.data_mut().copy_from_slice(t.data());
        }
        if let Some(extra) = weights.keys().min() {
            return Err(Error::Format(format!("unexpected record '{extra}'")));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path: PathBuf = path.as_ref().to_path_buf();
        let file = File::open(&path)?;
        Self::read_from(BufReader::new(file)).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
