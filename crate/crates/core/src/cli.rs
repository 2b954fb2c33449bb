//! Command-line driver: configuration layering, the end-to-end training
//! pipeline and the `scinet` subcommands.
//!
//! Run settings come from a flat `key=value` file (with `#` comments) and
//! `--key value` overrides. The seed falls back to `SCINET_SEED` and then 42.
//! Failures map to exit code 2 for invalid input or configuration and 1 for
//! anything that goes wrong at runtime.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};

use crate::data::{load_csv, make_windows, split, synthetic_frame, NormStats, Segments, SplitSpec, TimeSeriesFrame, WindowDataset};
use crate::error::{Error, Result};
use crate::eval::{pe_report, permutation_entropy, repeat_last_baseline, MetricReport, PeConfig};
use crate::scinet::{Ablation, ModelConfig, Scinet};
use crate::train::{
    evaluate, fit, load_checkpoint, save_checkpoint, CheckpointMeta, DataSettings, EpochRecord,
    FitOutcome, Manifest, TrainConfig,
};

pub const SEED_ENV: &str = "SCINET_SEED";
pub const DEFAULT_SEED: u64 = 42;

/// Everything one training run needs, merged from defaults, the
/// environment, a config file and overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub timestamp_column: Option<String>,
    pub split: SplitSpec,
    /// `variates` is filled in from the data when the run starts.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub output: PathBuf,
    pub original_scale: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            timestamp_column: None,
            split: SplitSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            output: PathBuf::from("checkpoint"),
            original_scale: false,
            seed: DEFAULT_SEED,
        }
    }
}

pub const CONFIG_KEYS: [&str; 25] = [
    "data",
    "timestamp_column",
    "split",
    "lookback",
    "horizon",
    "levels",
    "stacks",
    "kernel_size",
    "hidden_ratio",
    "dropout",
    "sign",
    "identity_init",
    "no_interlearn",
    "weight_share",
    "no_residual",
    "no_decoder",
    "epochs",
    "batch_size",
    "lr",
    "lr_decay",
    "patience",
    "grad_clip",
    "seed",
    "output",
    "original_scale",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{value}'"))),
    }
}

impl RunConfig {
    /// Sets one key. Hyphens in `key` are read as underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let k = key.as_str();
        match k {
            "data" => self.data = Some(PathBuf::from(value)),
            "timestamp_column" => {
                self.timestamp_column = (!value.is_empty()).then(|| value.to_string())
            }
            "split" => self.split = value.parse()?,
            "lookback" => self.model.lookback = parse(k, value)?,
            "horizon" => self.model.horizon = parse(k, value)?,
            "levels" => self.model.levels = parse(k, value)?,
            "stacks" => self.model.stacks = parse(k, value)?,
            "kernel_size" => self.model.kernel_size = parse(k, value)?,
            "hidden_ratio" => self.model.hidden_ratio = parse(k, value)?,
            "dropout" => self.model.dropout = parse(k, value)?,
            "sign" => self.model.sign = value.parse()?,
            "identity_init" => self.model.identity_init = parse_bool(k, value)?,
            "no_interlearn" => self.model.ablation.no_interlearn = parse_bool(k, value)?,
            "weight_share" => self.model.ablation.weight_share = parse_bool(k, value)?,
            "no_residual" => self.model.ablation.no_residual = parse_bool(k, value)?,
            "no_decoder" => self.model.ablation.no_decoder = parse_bool(k, value)?,
            "epochs" => self.train.epochs = parse(k, value)?,
            "batch_size" => self.train.batch_size = parse(k, value)?,
            "lr" => self.train.lr = parse(k, value)?,
            "lr_decay" => self.train.lr_decay = parse(k, value)?,
            "patience" => self.train.patience = parse(k, value)?,
            "grad_clip" => {
                self.train.grad_clip = match value {
                    "none" | "off" | "0" => None,
                    v => Some(parse(k, v)?),
                }
            }
            "seed" => self.seed = parse(k, value)?,
            "output" => self.output = PathBuf::from(value),
            "original_scale" => self.original_scale = parse_bool(k, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key '{key}' (known keys: {})",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key=value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{origin}:{}: expected key=value, got '{line}'", n + 1))
            })?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {}", n + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    /// Layers defaults < `SCINET_SEED` < config file < overrides.
    pub fn resolve(
        config: Option<&Path>,
        overrides: &[(String, String)],
        env_seed: Option<&str>,
    ) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(s) = env_seed {
            cfg.seed = s.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV}='{s}' is not an unsigned integer"))
            })?;
        }
        if let Some(path) = config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.model.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    /// Checks every setting that does not depend on the data itself.
    pub fn validate(&self) -> Result<()> {
        if self.data.is_none() {
            return Err(Error::Config("no data path given (set data=PATH)".into()));
        }
        let mut probe = self.model.clone();
        probe.variates = 1;
        probe.validate()?;
        self.train.validate()
    }

    pub fn data_settings(&self) -> Result<DataSettings> {
        let path = self
            .data
            .as_ref()
            .ok_or_else(|| Error::Config("no data path given (set data=PATH)".into()))?;
        Ok(DataSettings {
            path: path.display().to_string(),
            timestamp_column: self.timestamp_column.clone(),
            split: self.split,
        })
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Turns `--key value` / `--key=value` tokens into pairs. A key followed by
/// another `--key` or by nothing is read as `true`.
pub fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let tok = &tokens[i];
        let key = tok.strip_prefix("--").ok_or_else(|| {
            Error::Usage(format!("expected --key value, got '{tok}'"))
        })?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            i += 1;
        } else {
            match tokens.get(i + 1) {
                Some(v) if !v.starts_with("--") => {
                    out.push((key.to_string(), v.clone()));
                    i += 2;
                }
                _ => {
                    out.push((key.to_string(), "true".to_string()));
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

/// A frame cut into segments, normalized with training statistics, and
/// windowed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub raw: TimeSeriesFrame,
    pub normalized: TimeSeriesFrame,
    pub stats: NormStats,
    pub segments: Segments,
    pub train: WindowDataset,
    pub val: WindowDataset,
    pub test: WindowDataset,
}

impl Prepared {
    /// Fits the normalizer on the training segment unless `stats` is given.
    pub fn new(
        raw: TimeSeriesFrame,
        spec: &SplitSpec,
        lookback: usize,
        horizon: usize,
        stats: Option<NormStats>,
    ) -> Result<Self> {
        let segments = split(&raw, spec, lookback + horizon)?;
        let stats = match stats {
            Some(s) => s,
            None => NormStats::fit(&raw, segments.train.clone())?,
        };
        let normalized = stats.normalized(&raw)?;
        let window = |r: &std::ops::Range<usize>| make_windows(&normalized, r.clone(), lookback, horizon);
        Ok(Self {
            train: window(&segments.train)?,
            val: window(&segments.val)?,
            test: window(&segments.test)?,
            raw,
            normalized,
            stats,
            segments,
        })
    }

    pub fn segment(&self, which: Segment) -> &WindowDataset {
        match which {
            Segment::Train => &self.train,
            Segment::Val => &self.val,
            Segment::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Segment {
    Train,
    Val,
    Test,
}

/// Outcome of [`train_on_frame`].
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: Scinet,
    pub outcome: FitOutcome,
    pub prepared: Prepared,
    pub val: MetricReport,
    pub test: MetricReport,
}

impl TrainRun {
    pub fn checkpoint_meta(&self, cfg: &RunConfig) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            train: Some(cfg.train.clone()),
            data: Some(cfg.data_settings()?),
            norm: Some(self.prepared.stats.clone()),
            history: self.outcome.history.clone(),
            best_epoch: Some(self.outcome.best_epoch),
        })
    }
}

/// Split, normalize, window, build and train a model on `frame`.
pub fn train_on_frame(
    frame: TimeSeriesFrame,
    cfg: &RunConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainRun> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.variates = frame.variates();
    model_cfg.seed = cfg.seed;
    model_cfg.validate()?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    train_cfg.validate()?;
    let prepared = Prepared::new(frame, &cfg.split, model_cfg.lookback, model_cfg.horizon, None)?;
    let mut model = Scinet::new(model_cfg)?;
    let outcome = fit(&mut model, &prepared.train, &prepared.val, &train_cfg, on_epoch)?;
    let scale = cfg.original_scale.then_some(&prepared.stats);
    let val = evaluate(&model, &prepared.val, train_cfg.batch_size, scale)?;
    let test = evaluate(&model, &prepared.test, train_cfg.batch_size, scale)?;
    Ok(TrainRun {
        model,
        outcome,
        prepared,
        val,
        test,
    })
}

pub fn load_frame(cfg: &RunConfig) -> Result<TimeSeriesFrame> {
    let settings = cfg.data_settings()?;
    load_csv(Path::new(&settings.path), settings.timestamp_column.as_deref())
}

#[derive(Debug, Parser)]
#[command(name = "scinet", version, about = "SCINet time series forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write its best checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Settings as `--key value`, overriding the config file.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Report forecast metrics of a checkpoint on one data segment.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the data the checkpoint was trained on.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        segment: Segment,
        #[arg(long)]
        original_scale: bool,
        /// Where to write the key=value report; defaults to
        /// `<checkpoint>/metrics.<segment>.txt`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write per-step forecasts and targets as CSV.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        emit: PathBuf,
        /// A named segment, or `all` to window the whole file.
        #[arg(long, default_value = "test")]
        segment: String,
        #[arg(long)]
        original_scale: bool,
    },
    /// Permutation entropy of the input and, with a checkpoint, of the
    /// learned representation.
    Pe {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        m: usize,
        #[arg(long, default_value_t = 1)]
        lag: usize,
        /// Segment to analyse; without a checkpoint `all` uses every row.
        #[arg(long)]
        segment: Option<String>,
        #[arg(long)]
        timestamp_column: Option<String>,
    },
    /// Train the full model and ablated variants on identical data and seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// One of no_interlearn, weight_share, no_residual, no_decoder, or all.
        #[arg(long, default_value = "all")]
        variant: String,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Train every combination of tree depth and stack count.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
        levels: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        stacks: Vec<usize>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Write a seeded noiseless sinusoid-plus-trend CSV.
    Synth {
        #[arg(long, default_value_t = 2000)]
        rows: usize,
        #[arg(long, default_value_t = 3)]
        variates: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command,
/// printing the cause of any failure as one line on stderr.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match execute(cli.command, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        2
    } else {
        1
    }
}

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

/// Separates a `--config` that ended up among the trailing overrides.
fn resolve_run(config: Option<PathBuf>, tokens: &[String]) -> Result<RunConfig> {
    let mut pairs = parse_overrides(tokens)?;
    let mut config = config;
    if let Some(pos) = pairs.iter().position(|(k, _)| k == "config") {
        let (_, path) = pairs.remove(pos);
        if config.replace(PathBuf::from(path)).is_some() {
            return Err(Error::Usage("--config given twice".into()));
        }
    }
    let cfg = RunConfig::resolve(config.as_deref(), &pairs, env_seed().as_deref())?;
    cfg.validate()?;
    Ok(cfg)
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Train { config, overrides } => {
            let cfg = resolve_run(config, &overrides)?;
            cmd_train(&cfg, out)
        }
        Command::Eval {
            checkpoint,
            data,
            segment,
            original_scale,
            output,
        } => {
            let report = cmd_eval(&checkpoint, data.as_deref(), segment, original_scale)?;
            let path = output.unwrap_or_else(|| {
                checkpoint.join(format!("metrics.{}.txt", segment_name(segment)))
            });
            std::fs::write(&path, format!("{report}\n")).map_err(|e| Error::io(&path, e))?;
            writeln!(out, "{report}").map_err(io_err)?;
            writeln!(out, "report={}", path.display()).map_err(io_err)
        }
        Command::Predict {
            checkpoint,
            data,
            emit,
            segment,
            original_scale,
        } => {
            let rows = cmd_predict(&checkpoint, data.as_deref(), &emit, &segment, original_scale)?;
            writeln!(out, "rows={rows}\nforecast={}", emit.display()).map_err(io_err)
        }
        Command::Pe {
            data,
            checkpoint,
            m,
            lag,
            segment,
            timestamp_column,
        } => {
            let report = cmd_pe(
                data.as_deref(),
                checkpoint.as_deref(),
                PeConfig { m, lag },
                segment.as_deref(),
                timestamp_column.as_deref(),
            )?;
            writeln!(out, "{report}").map_err(io_err)
        }
        Command::Ablate {
            config,
            variant,
            overrides,
        } => {
            let cfg = resolve_run(config, &overrides)?;
            let variants: Vec<&str> = if variant == "all" {
                Ablation::VARIANTS.to_vec()
            } else {
                Ablation::variant(&variant)?;
                vec![variant.as_str()]
            };
            let results = cmd_ablate(&cfg, &variants)?;
            for r in &results {
                writeln!(out, "{}", r.line()).map_err(io_err)?;
            }
            Ok(())
        }
        Command::Sweep {
            config,
            levels,
            stacks,
            overrides,
        } => {
            let cfg = resolve_run(config, &overrides)?;
            cmd_sweep(&cfg, &levels, &stacks, out)
        }
        Command::Synth {
            rows,
            variates,
            seed,
            output,
        } => {
            synthetic_frame(rows, variates, seed)?.write_csv(&output)?;
            writeln!(out, "rows={rows}\nvariates={variates}\ndata={}", output.display())
                .map_err(io_err)
        }
    }
}

fn segment_name(s: Segment) -> &'static str {
    match s {
        Segment::Train => "train",
        Segment::Val => "val",
        Segment::Test => "test",
    }
}

fn write_report(out: &mut dyn Write, prefix: &str, r: &MetricReport) -> Result<()> {
    for line in r.to_string().lines() {
        writeln!(out, "{prefix}.{line}").map_err(io_err)?;
    }
    Ok(())
}

/// Loads data, trains, prints per-epoch losses and writes the checkpoint.
pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let frame = load_frame(cfg)?;
    writeln!(
        out,
        "data={} rows={} variates={} rejected_rows={}",
        cfg.data_settings()?.path,
        frame.len(),
        frame.variates(),
        frame.rejected_rows()
    )
    .map_err(io_err)?;
    let mut write_err = None;
    let run = train_on_frame(frame, cfg, |r| {
        let mut line = format!("epoch={} lr={:e} train_total={:.6}", r.epoch, r.lr, r.train.total);
        for (k, c) in r.train.components.iter().enumerate() {
            line += &format!(" train_stack{k}={c:.6}");
        }
        line += &format!(" val_total={:.6}", r.val.total);
        for (k, c) in r.val.components.iter().enumerate() {
            line += &format!(" val_stack{k}={c:.6}");
        }
        if let Err(e) = writeln!(out, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(e));
    }
    let s = &run.prepared.segments;
    writeln!(
        out,
        "split train={:?} val={:?} test={:?}\nbest_epoch={} stopped_early={}",
        s.train, s.val, s.test, run.outcome.best_epoch, run.outcome.stopped_early
    )
    .map_err(io_err)?;
    write_report(out, "val", &run.val)?;
    write_report(out, "test", &run.test)?;
    let baseline = repeat_last_baseline(&run.prepared.test, cfg.train.batch_size)?;
    writeln!(out, "baseline.test.mse={:?}", baseline.mse).map_err(io_err)?;
    save_checkpoint(&cfg.output, &run.model, &run.checkpoint_meta(cfg)?)?;
    writeln!(out, "checkpoint={}", cfg.output.display()).map_err(io_err)
}

/// Loads a checkpoint and rebuilds its data pipeline, reusing the stored
/// normalization statistics.
pub fn restore(checkpoint: &Path, data: Option<&Path>) -> Result<(Scinet, Manifest, Prepared)> {
    let (model, manifest) = load_checkpoint(checkpoint)?;
    let settings = manifest.data.clone().ok_or_else(|| {
        Error::Checkpoint("manifest has no data settings; pass --data".into())
    })?;
    let path = data.map_or_else(|| PathBuf::from(&settings.path), Path::to_path_buf);
    let frame = load_csv(&path, settings.timestamp_column.as_deref())?;
    check_variates(&model, &frame)?;
    let cfg = model.config();
    let prepared = Prepared::new(
        frame,
        &settings.split,
        cfg.lookback,
        cfg.horizon,
        manifest.norm.clone(),
    )?;
    Ok((model, manifest, prepared))
}

fn check_variates(model: &Scinet, frame: &TimeSeriesFrame) -> Result<()> {
    if frame.variates() != model.config().variates {
        return Err(Error::Data(format!(
            "checkpoint expects {} variates, data has {}",
            model.config().variates,
            frame.variates()
        )));
    }
    Ok(())
}

pub fn cmd_eval(
    checkpoint: &Path,
    data: Option<&Path>,
    segment: Segment,
    original_scale: bool,
) -> Result<MetricReport> {
    let (model, _, prepared) = restore(checkpoint, data)?;
    let scale = original_scale.then_some(&prepared.stats);
    evaluate(&model, prepared.segment(segment), 64, scale)
}

/// Writes `window_id,step,variate,truth,prediction` rows and returns how
/// many were written. Steps count from 1.
pub fn cmd_predict(
    checkpoint: &Path,
    data: Option<&Path>,
    emit: &Path,
    segment: &str,
    original_scale: bool,
) -> Result<usize> {
    let (model, manifest) = load_checkpoint(checkpoint)?;
    let settings = manifest
        .data
        .clone()
        .ok_or_else(|| Error::Checkpoint("manifest has no data settings; pass --data".into()))?;
    let stats = manifest
        .norm
        .clone()
        .ok_or_else(|| Error::Checkpoint("manifest has no normalization statistics".into()))?;
    let path = data.map_or_else(|| PathBuf::from(&settings.path), Path::to_path_buf);
    let raw = load_csv(&path, settings.timestamp_column.as_deref())?;
    check_variates(&model, &raw)?;
    let (t, h) = (model.config().lookback, model.config().horizon);
    let range = match segment {
        "all" => 0..raw.len(),
        name => {
            let segs = split(&raw, &settings.split, t + h)?;
            match name {
                "train" => segs.train,
                "val" => segs.val,
                "test" => segs.test,
                other => {
                    return Err(Error::Usage(format!(
                        "segment must be train, val, test or all, got '{other}'"
                    )))
                }
            }
        }
    };
    let normalized = stats.normalized(&raw)?;
    let dataset = make_windows(&normalized, range, t, h)?;
    let truth_frame = if original_scale { &raw } else { &normalized };

    let file = std::fs::File::create(emit).map_err(|e| Error::io(emit, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut rows = 0;
    let d = dataset.variates();
    let write = |w: &mut std::io::BufWriter<std::fs::File>, line: String| {
        writeln!(w, "{line}").map_err(|e| Error::io(emit, e))
    };
    write(&mut w, "window_id,step,variate,truth,prediction".into())?;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(64) {
        let (x, _) = dataset.batch(chunk)?;
        let mut pred = model.predict(&x)?;
        if original_scale {
            stats.invert_tensor(&mut pred)?;
        }
        let p = pred.data();
        for (b, &window) in chunk.iter().enumerate() {
            let start = dataset.y_start(window);
            for step in 0..h {
                let truth_row = truth_frame.row(start + step);
                for j in 0..d {
                    let value = p[(b * d + j) * h + step];
                    write(
                        &mut w,
                        format!("{window},{},{j},{:?},{value:?}", step + 1, truth_row[j]),
                    )?;
                    rows += 1;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(emit, e))?;
    Ok(rows)
}

/// Permutation entropy report. Without a checkpoint, each column of the
/// chosen rows is measured directly.
pub fn cmd_pe(
    data: Option<&Path>,
    checkpoint: Option<&Path>,
    pe: PeConfig,
    segment: Option<&str>,
    timestamp_column: Option<&str>,
) -> Result<String> {
    pe.validate()?;
    match checkpoint {
        Some(ckpt) => {
            let (model, _, prepared) = restore(ckpt, data)?;
            let which = match segment.unwrap_or("test") {
                "train" => Segment::Train,
                "val" => Segment::Val,
                "test" => Segment::Test,
                other => {
                    return Err(Error::Usage(format!(
                        "segment must be train, val or test with a checkpoint, got '{other}'"
                    )))
                }
            };
            Ok(pe_report(Some(&model), prepared.segment(which), &pe)?.to_string())
        }
        None => {
            let path = data.ok_or_else(|| Error::Usage("pe needs --data or --checkpoint".into()))?;
            let frame = load_csv(path, timestamp_column)?;
            let range = match segment.unwrap_or("all") {
                "all" => 0..frame.len(),
                name => {
                    let segs = split(&frame, &SplitSpec::default(), 1)?;
                    match name {
                        "train" => segs.train,
                        "val" => segs.val,
                        "test" => segs.test,
                        other => {
                            return Err(Error::Usage(format!(
                                "segment must be train, val, test or all, got '{other}'"
                            )))
                        }
                    }
                }
            };
            let mut lines = vec![format!("pe_m={}", pe.m), format!("pe_lag={}", pe.lag)];
            let mut sum = 0.0;
            for j in 0..frame.variates() {
                let v = permutation_entropy(&frame.column(j)[range.clone()], &pe)?;
                sum += v;
                lines.push(format!("pe_original.{j}={v:?}"));
            }
            lines.push(format!("pe_original_mean={:?}", sum / frame.variates() as f64));
            Ok(lines.join("\n"))
        }
    }
}

/// Validation and test metrics of one configuration in a comparison.
#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: String,
    pub val: MetricReport,
    pub test: MetricReport,
}

impl VariantResult {
    pub fn line(&self) -> String {
        format!(
            "variant={} val.mse={:.6} val.mae={:.6} test.mse={:.6} test.mae={:.6}",
            self.variant, self.val.mse, self.val.mae, self.test.mse, self.test.mae
        )
    }
}

/// Trains the configured model and each named variant with the same data
/// and seed. The first result is the full model.
pub fn cmd_ablate(cfg: &RunConfig, variants: &[&str]) -> Result<Vec<VariantResult>> {
    let frame = load_frame(cfg)?;
    ablate_on_frame(&frame, cfg, variants)
}

pub fn ablate_on_frame(
    frame: &TimeSeriesFrame,
    cfg: &RunConfig,
    variants: &[&str],
) -> Result<Vec<VariantResult>> {
    let mut results = Vec::with_capacity(variants.len() + 1);
    let base = train_on_frame(frame.clone(), cfg, |_| {})?;
    results.push(VariantResult {
        variant: "full".into(),
        val: base.val,
        test: base.test,
    });
    for &name in variants {
        let mut vcfg = cfg.clone();
        vcfg.model.ablation = Ablation::variant(name)?;
        let run = train_on_frame(frame.clone(), &vcfg, |_| {})?;
        results.push(VariantResult {
            variant: name.into(),
            val: run.val,
            test: run.test,
        });
    }
    Ok(results)
}

/// Trains every `(levels, stacks)` pair. Combinations the configuration
/// cannot support are reported and skipped.
pub fn cmd_sweep(cfg: &RunConfig, levels: &[usize], stacks: &[usize], out: &mut dyn Write) -> Result<()> {
    let frame = load_frame(cfg)?;
    for &l in levels {
        for &k in stacks {
            let mut c = cfg.clone();
            c.model.levels = l;
            c.model.stacks = k;
            let mut probe = c.model.clone();
            probe.variates = frame.variates();
            if let Err(e) = probe.validate() {
                writeln!(out, "levels={l} stacks={k} skipped=\"{e}\"").map_err(io_err)?;
                continue;
            }
            let run = train_on_frame(frame.clone(), &c, |_| {})?;
            writeln!(
                out,
                "levels={l} stacks={k} params={} val.mse={:.6} test.mse={:.6} test.mae={:.6}",
                run.model.params().num_scalars(),
                run.val.mse,
                run.test.mse,
                run.test.mae
            )
            .map_err(io_err)?;
        }
    }
    Ok(())
}
