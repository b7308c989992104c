//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;

use crate::data::{self, Gear, SplitRatios, SynthSpec, WindowedDataset};
use crate::error::{Error, Result};
use crate::gradcheck::{run_builtin, BUILTIN_CHECKS, DEFAULT_TOLERANCE};
use crate::kv::{format_kv, parse_kv};
use crate::model::{build_model, family_grid, enumerate_grid, Architecture, Classifier, Family, ModelConfig, RecurrentCell};
use crate::nn::CandidateActivation;
use crate::train::{evaluate, run_experiment, train, OptimizerKind, TrainConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "skigear", version, about = "Gear classification from accelerometer windows")]
pub struct Cli {
    /// key=value file of default flag values; flags on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic two-gear dataset.
    Synth(SynthArgs),
    /// Train one model and keep the best checkpoint on validation.
    Train(TrainArgs),
    /// Train and test a grid of models several times each.
    Experiment(ExperimentArgs),
    /// Finite-difference gradient checks of the built-in layers.
    Gradcheck(GradcheckArgs),
    /// Classification error of a saved model on a dataset.
    Eval(EvalArgs),
}

fn non_negative(text: &str) -> std::result::Result<f64, String> {
    match text.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        Ok(v) => Err(format!("must be a finite value >= 0, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Cycles per gear per skier.
    #[arg(long, default_value_t = SynthSpec::default().cycles_per_gear)]
    pub cycles: usize,
    #[arg(long, default_value_t = SynthSpec::default().skiers)]
    pub skiers: usize,
    #[arg(long, default_value_t = SynthSpec::default().noise_std, allow_hyphen_values = true, value_parser = non_negative)]
    pub noise_std: f64,
    #[arg(long, default_value_t = SynthSpec::default().intensity_range.0)]
    pub intensity_min: f64,
    #[arg(long, default_value_t = SynthSpec::default().intensity_range.1)]
    pub intensity_max: f64,
    #[arg(long, default_value_t = SynthSpec::default().frequency_range.0)]
    pub frequency_min: f64,
    #[arg(long, default_value_t = SynthSpec::default().frequency_range.1)]
    pub frequency_max: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CandidateArg {
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Args, Debug, Clone)]
pub struct TrainingFlags {
    #[arg(long, default_value_t = TrainConfig::default().max_iterations)]
    pub iterations: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate, allow_hyphen_values = true)]
    pub lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().validation_period)]
    pub validation_period: usize,
    /// Global gradient norm limit for recurrent models; 0 disables clipping.
    #[arg(long, default_value_t = 5.0)]
    pub clip_norm: f64,
    /// Checkpoints without a new best before stopping; 0 disables.
    #[arg(long, default_value_t = 50)]
    pub patience: usize,
    /// Run every iteration: no stop at zero validation error and no patience.
    #[arg(long)]
    pub no_early_stop: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl TrainingFlags {
    fn to_config(&self, batch_size: usize, runs: usize) -> TrainConfig {
        TrainConfig {
            max_iterations: self.iterations,
            batch_size,
            runs,
            optimizer: match self.optimizer {
                OptimizerArg::Sgd => OptimizerKind::Sgd,
                OptimizerArg::Momentum => OptimizerKind::Momentum,
                OptimizerArg::Adam => OptimizerKind::Adam,
            },
            learning_rate: self.lr,
            validation_period: self.validation_period,
            seed: self.seed,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            stop_at_zero_validation: !self.no_early_stop,
            patience: (!self.no_early_stop && self.patience > 0).then_some(self.patience),
        }
    }
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    /// Dataset CSV (t,ax,ay,az,gear).
    #[arg(long)]
    pub data: PathBuf,
    /// cnn, lstm-f, lstm-p, blstm or mlp.
    #[arg(long)]
    pub model: String,
    /// LSTM units (total for blstm).
    #[arg(long, default_value_t = 50)]
    pub units: usize,
    #[arg(long, default_value_t = 20)]
    pub filters: usize,
    #[arg(long, default_value_t = 1)]
    pub conv_layers: usize,
    #[arg(long, default_value_t = crate::model::GRID_FILTER_SIZE)]
    pub filter_size: usize,
    /// Hidden neurons per dense layer (MLP), or of the dense layer after the convolutions (CNN).
    #[arg(long)]
    pub neurons: Option<usize>,
    /// Hidden dense layers of the MLP.
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, value_enum, default_value_t = CandidateArg::Tanh)]
    pub candidate: CandidateArg,
    #[arg(long, default_value_t = crate::model::GRID_BATCH_SIZE)]
    pub batch_size: usize,
    /// Allow hyperparameters outside the grid.
    #[arg(long)]
    pub off_grid: bool,
    #[command(flatten)]
    pub training: TrainingFlags,
    /// Model file to write; the history goes to `<out>.history.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

impl TrainArgs {
    fn model_config(&self) -> Result<ModelConfig> {
        let family: Family = self.model.parse()?;
        let candidate = match self.candidate {
            CandidateArg::Tanh => CandidateActivation::Tanh,
            CandidateArg::Sigmoid => CandidateActivation::Sigmoid,
        };
        let arch = match family {
            Family::Cnn => Architecture::Cnn {
                conv_layers: self.conv_layers,
                filters: self.filters,
                filter_size: self.filter_size,
                hidden_neurons: self.neurons.unwrap_or(crate::model::GRID_CNN_HIDDEN),
            },
            Family::LstmF | Family::LstmP | Family::Blstm => Architecture::Recurrent {
                cell: match family {
                    Family::LstmF => RecurrentCell::Standard,
                    Family::LstmP => RecurrentCell::Peephole,
                    _ => RecurrentCell::Bidirectional,
                },
                units: self.units,
                candidate,
            },
            Family::Mlp => Architecture::Mlp {
                layers: self.layers,
                neurons: self.neurons.unwrap_or(30),
            },
        };
        let cfg = ModelConfig {
            arch,
            batch_size: self.batch_size,
            off_grid: self.off_grid,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `full` or a family name.
    #[arg(long, default_value = "full")]
    pub grid: String,
    #[arg(long, default_value_t = TrainConfig::default().runs)]
    pub runs: usize,
    /// Worker threads for grid cells.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub training: TrainingFlags,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct GradcheckArgs {
    /// `all` or one of the built-in checks.
    #[arg(long, default_value = "all")]
    pub layer: String,
    /// Random cases per layer.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Perturb the first analytic gradient entry to exercise the failure path.
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Partition {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Partition::Test)]
    pub partition: Partition,
    /// Window length used to segment the data.
    #[arg(long, default_value_t = data::WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = data::STEP)]
    pub step: usize,
}

/// Parses arguments (after merging any `--config` file) and runs the command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match merge_config_file(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => EXIT_IO,
        _ => EXIT_VALIDATION,
    }
}

/// Removes `--config FILE` and splices the file's pairs in as flags right
/// after the subcommand, so flags given explicitly come later and win.
fn merge_config_file(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut path = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = Some(PathBuf::from(
                it.next().ok_or_else(|| Error::invalid("--config needs a file"))?,
            ));
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else {
        return Ok(rest);
    };
    let text = fs::read_to_string(&path)?;
    let mut injected = Vec::new();
    for (k, v) in parse_kv(&text, &path)? {
        let flag = format!("--{}", k.replace('_', "-"));
        match v.as_str() {
            "true" => injected.push(OsString::from(flag)),
            "false" => {}
            _ => {
                injected.push(OsString::from(flag));
                injected.push(OsString::from(v));
            }
        }
    }
    let at = rest.len().min(2);
    rest.splice(at..at, injected);
    Ok(rest)
}

fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Experiment(a) => cmd_experiment(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

/// An artifact written to a temporary file beside its destination.
struct Staged {
    file: NamedTempFile,
    dest: PathBuf,
    sha256: String,
}

fn stage(dest: &Path, bytes: &[u8]) -> Result<Staged> {
    let dir = match dest.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut file = NamedTempFile::new_in(dir)?;
    file.write_all(bytes)?;
    file.as_file().sync_all()?;
    Ok(Staged {
        file,
        dest: dest.to_path_buf(),
        sha256: hex::encode(Sha256::digest(bytes)),
    })
}

/// Moves staged artifacts into place, then writes the manifest the same way.
fn commit(staged: Vec<Staged>, manifest_path: &Path, mut manifest: Vec<(String, String)>, started: Instant) -> Result<()> {
    for s in &staged {
        manifest.push((format!("sha256:{}", s.dest.display()), s.sha256.clone()));
    }
    manifest.push(("duration_seconds".into(), format!("{:.3}", started.elapsed().as_secs_f64())));
    let manifest = stage(manifest_path, format_kv(manifest).as_bytes())?;
    for s in staged {
        s.file.persist(&s.dest).map_err(|e| Error::Io(e.error))?;
    }
    manifest
        .file
        .persist(&manifest.dest)
        .map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn pairs(items: &[(&str, String)]) -> Vec<(String, String)> {
    items.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Loads a CSV and produces the normalized split used for training.
pub fn prepare_dataset(path: &Path) -> Result<WindowedDataset> {
    let records = data::load_csv(path)?;
    let windows = data::segment(&records, data::WINDOW, data::STEP)?;
    data::normalize(data::split(windows, SplitRatios::default())?)
}

fn cmd_synth(a: &SynthArgs) -> Result<u8> {
    let started = Instant::now();
    let spec = SynthSpec {
        cycles_per_gear: a.cycles,
        skiers: a.skiers,
        intensity_range: (a.intensity_min, a.intensity_max),
        frequency_range: (a.frequency_min, a.frequency_max),
        noise_std: a.noise_std,
    };
    spec.validate()?;
    let records = data::synth_generate(&spec, a.seed)?;
    let mut csv = Vec::new();
    data::write_csv(&mut csv, &records)?;

    let twos = records.iter().filter(|r| r.gear == Gear::Two).count();
    let threes = records.len() - twos;
    let pct = |k: usize| 100.0 * k as f64 / records.len() as f64;

    let ratios = SplitRatios::default();
    let windows = data::segment(&records, data::WINDOW, data::STEP)?;
    let window_total = windows.len();
    let counts = match data::split(windows, ratios) {
        Ok(ds) => {
            let [tr, va, te] = ds.counts();
            format!("{tr},{va},{te}")
        }
        Err(e) => format!("unavailable ({e})"),
    };

    let mut manifest = pairs(&[
        ("command", "synth".into()),
        ("seed", a.seed.to_string()),
        ("output", a.out.display().to_string()),
        ("records", records.len().to_string()),
        ("gear2_records", twos.to_string()),
        ("gear3_records", threes.to_string()),
        ("window", data::WINDOW.to_string()),
        ("step", data::STEP.to_string()),
        ("split_ratios", format!("{},{},{}", ratios.train, ratios.validation, ratios.test)),
        ("windows", window_total.to_string()),
        ("partition_windows", counts),
    ]);
    manifest.extend(spec.to_pairs());
    let staged = vec![stage(&a.out, &csv)?];
    commit(staged, &sidecar(&a.out, ".manifest"), manifest, started)?;
    println!(
        "wrote {} records to {}; gear 2: {twos} ({:.2}%), gear 3: {threes} ({:.2}%)",
        records.len(),
        a.out.display(),
        pct(twos),
        pct(threes)
    );
    Ok(EXIT_OK)
}

fn cmd_train(a: &TrainArgs) -> Result<u8> {
    let started = Instant::now();
    let cfg = a.model_config()?;
    let tc = a.training.to_config(cfg.batch_size, 1);
    tc.validate()?;
    let ds = prepare_dataset(&a.data)?;
    let mut model = build_model(&cfg, tc.seed)?;
    let history = train(&mut model, &ds, &tc)?;
    let test_error = evaluate(&model, &ds.test)?;

    let mut bytes = Vec::new();
    model.write_to(&mut bytes)?;
    let mut hist = String::from("iteration,train_loss,validation_error\n");
    for c in &history.checkpoints {
        hist += &format!("{},{},{}\n", c.iteration, history.losses[c.iteration - 1], c.validation_error);
    }
    let history_path = sidecar(&a.out, ".history.csv");

    let mut manifest = pairs(&[
        ("command", "train".into()),
        ("data", a.data.display().to_string()),
        ("output", a.out.display().to_string()),
        ("history", history_path.display().to_string()),
        ("config_id", cfg.id()),
        ("iterations_run", history.iterations_run().to_string()),
        ("best_iteration", history.best_iteration.to_string()),
        ("best_validation_error", history.best_validation_error.to_string()),
        ("test_error", test_error.to_string()),
    ]);
    manifest.extend(cfg.to_pairs());
    manifest.extend(tc.to_pairs());
    let staged = vec![stage(&a.out, &bytes)?, stage(&history_path, hist.as_bytes())?];
    commit(staged, &sidecar(&a.out, ".manifest"), manifest, started)?;
    println!(
        "{}: best validation error {} at iteration {} of {}; test error {test_error}",
        cfg.id(),
        history.best_validation_error,
        history.best_iteration,
        history.iterations_run()
    );
    Ok(EXIT_OK)
}

fn parse_grid(name: &str) -> Result<Vec<ModelConfig>> {
    if name.eq_ignore_ascii_case("full") {
        Ok(enumerate_grid())
    } else {
        Ok(family_grid(name.parse()?))
    }
}

fn cmd_experiment(a: &ExperimentArgs) -> Result<u8> {
    let started = Instant::now();
    let grid = parse_grid(&a.grid)?;
    let tc = a.training.to_config(crate::model::GRID_BATCH_SIZE, a.runs);
    tc.validate()?;
    let ds = prepare_dataset(&a.data)?;
    let report = run_experiment(&grid, &ds, &tc, a.jobs, &|outcome| match outcome {
        Ok(r) => eprintln!("{} run {}: test error {}", r.config_id, r.run, r.test_error),
        Err(f) => eprintln!("{} run {}: failed: {}", f.config_id, f.run, f.message),
    })?;

    fs::create_dir_all(&a.out)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    let summary = report.summary_text();
    let mut staged = vec![
        stage(&a.out.join("report.csv"), &csv)?,
        stage(&a.out.join("summary.txt"), summary.as_bytes())?,
    ];
    for family in Family::ALL {
        if let Some(plot) = report.plot_csv(family) {
            staged.push(stage(&a.out.join(format!("plot-{}.csv", family.slug())), plot.as_bytes())?);
        }
    }
    let mut manifest = pairs(&[
        ("command", "experiment".into()),
        ("data", a.data.display().to_string()),
        ("output", a.out.display().to_string()),
        ("grid", a.grid.clone()),
        ("jobs", a.jobs.to_string()),
        ("rows", report.rows.len().to_string()),
        ("failed_cells", report.failures.len().to_string()),
    ]);
    manifest.extend(tc.to_pairs());
    commit(staged, &a.out.join("manifest.txt"), manifest, started)?;
    print!("{summary}");
    Ok(if report.failures.is_empty() { EXIT_OK } else { EXIT_VALIDATION })
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<u8> {
    if a.seeds == 0 {
        return Err(Error::invalid("--seeds must be at least 1"));
    }
    let layers: Vec<&str> = if a.layer == "all" {
        BUILTIN_CHECKS.to_vec()
    } else if let Some(&name) = BUILTIN_CHECKS.iter().find(|&&n| n == a.layer) {
        vec![name]
    } else {
        return Err(Error::invalid(format!(
            "unknown layer '{}' (expected all or one of {})",
            a.layer,
            BUILTIN_CHECKS.join(", ")
        )));
    };
    println!("{:<14} {:>5} {:>12}  {:<6} worst parameter", "layer", "seed", "max rel err", "result");
    let mut failed = false;
    for layer in layers {
        for seed in 0..a.seeds {
            let report = run_builtin(layer, seed, a.tolerance, a.corrupt)?;
            let verdict = if report.passed() { "pass" } else { "FAIL" };
            let worst = report.worst().map_or("-".to_string(), |w| w.parameter.clone());
            println!(
                "{layer:<14} {seed:>5} {:>12.3e}  {verdict:<6} {worst}",
                report.max_relative_error()
            );
            for f in report.failures() {
                println!(
                    "    {}: analytic {:e} numeric {:e} relative error {:e}",
                    f.parameter, f.analytic, f.numeric, f.relative_error
                );
            }
            failed |= !report.passed();
        }
    }
    Ok(if failed { EXIT_VALIDATION } else { EXIT_OK })
}

fn cmd_eval(a: &EvalArgs) -> Result<u8> {
    let model = Classifier::load(&a.model)?;
    let records = data::load_csv(&a.data)?;
    let windows = data::segment(&records, a.window, a.step)?;
    let windows = match a.partition {
        Partition::All => windows,
        p => {
            let ds = data::split(windows, SplitRatios::default())?;
            match p {
                Partition::Train => ds.train,
                Partition::Validation => ds.validation,
                _ => ds.test,
            }
        }
    };
    let windows = match model.norm() {
        Some(stats) => windows.iter().map(|w| stats.apply(w)).collect::<Result<Vec<_>>>()?,
        None => windows,
    };
    let error = evaluate(&model, &windows)?;
    println!("classification error {error} on {} windows", windows.len());
    Ok(EXIT_OK)
}
