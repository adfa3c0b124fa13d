//! Command-line driver: data generation, training, evaluation, prediction
//! and the ablation grid.

pub mod config;
pub mod pgm;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use stpl::autograd::ParamStore;
use stpl::data::{generate_dataset, load_mnist_idx, read_dataset, write_glyph_fixture, Dataset, DigitPool};
use stpl::metrics::MetricReport;
use stpl::model::{Ablation, TauModel};
use stpl::train::{
    evaluate, latest_checkpoint, predict_horizon, split_indices, Checkpoint, EpochRecord, Trainer, BEST_CHECKPOINT,
};
use stpl::Tensor;
use thiserror::Error;

pub use config::RunConfig;
use pgm::Gray;

pub const MNIST_TRAIN: &str = "train-images-idx3-ubyte";
pub const MNIST_TEST: &str = "t10k-images-idx3-ubyte";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<stpl::Error> for CliError {
    fn from(e: stpl::Error) -> Self {
        use stpl::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::Tensor(_) | E::Checkpoint(_) | E::DdrInapplicable { .. } => CliError::Config(msg),
            E::Data(_) | E::Io(_) => CliError::Data(msg),
            E::NonFinite(_) | E::NonFiniteLoss { .. } => CliError::Numeric(msg),
            E::Autograd(_) => CliError::Other(msg),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "stpl", version, about = "Temporal-attention video prediction on moving digits")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.lr=0.005`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Sets both `train.seed` and `data.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory; overrides `paths.run_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    /// The held-out validation share of the training file.
    Val,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the train and test sequence files from MNIST digits.
    GenerateData,
    /// Write rendered stand-in digits in MNIST IDX format to `paths.mnist_dir`.
    SynthDigits {
        #[arg(long, default_value_t = 2000)]
        count: usize,
    },
    /// Train a model; checkpoints and the run log go to the run directory.
    Train {
        /// Continue from the newest epoch checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Compute MSE, MAE, SSIM and PSNR on a split.
    Evaluate {
        #[command(flatten)]
        source: ModelSource,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Frames to predict; longer than `model.frames_out` rolls out recursively.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Write predicted frames and difference strips as PGM images.
    Predict {
        #[command(flatten)]
        source: ModelSource,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        horizon: Option<usize>,
        /// Number of sequences to render.
        #[arg(long, default_value_t = 4)]
        sequences: usize,
    },
    /// Train the ablation variants and tabulate their validation MSE.
    Ablate,
}

#[derive(Debug, Clone, clap::Args)]
pub struct ModelSource {
    /// Checkpoint to load; defaults to the newest epoch checkpoint.
    #[arg(long, value_name = "PATH", conflicts_with = "untrained")]
    pub checkpoint: Option<PathBuf>,
    /// Use freshly initialized parameters.
    #[arg(long)]
    pub untrained: bool,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenerateData => "generate-data",
            Command::SynthDigits { .. } => "synth-digits",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Predict { .. } => "predict",
            Command::Ablate => "ablate",
        }
    }
}

/// Resolve the configuration, echo it to the run directory and dispatch.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.set, cli.seed, cli.out.as_deref())?;
    let dir = &cfg.paths.run_dir;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let echo = dir.join(format!("effective-{}.toml", cli.command.name()));
    fs::write(&echo, cfg.to_toml()).map_err(|e| io_err(&echo, e))?;
    match &cli.command {
        Command::GenerateData => cmd_generate_data(&cfg),
        Command::SynthDigits { count } => cmd_synth_digits(&cfg, *count),
        Command::Train { resume } => cmd_train(&cfg, *resume).map(|_| ()),
        Command::Evaluate { source, split, horizon } => cmd_evaluate(&cfg, source, *split, *horizon).map(|_| ()),
        Command::Predict {
            source,
            split,
            horizon,
            sequences,
        } => cmd_predict(&cfg, source, *split, *horizon, *sequences),
        Command::Ablate => cmd_ablate(&cfg).map(|_| ()),
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).map_err(|e| io_err(p, e))?;
    }
    Ok(())
}

pub fn cmd_synth_digits(cfg: &RunConfig, count: usize) -> Result<(), CliError> {
    let dir = &cfg.paths.mnist_dir;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_glyph_fixture(dir.join(MNIST_TRAIN), count, cfg.data.seed)?;
    write_glyph_fixture(dir.join(MNIST_TEST), count, cfg.data.seed.wrapping_add(1))?;
    println!("wrote {count} rendered digits to {} and {}", MNIST_TRAIN, MNIST_TEST);
    Ok(())
}

fn digit_pool(path: &Path, size: usize) -> Result<DigitPool, CliError> {
    let imgs = load_mnist_idx(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(DigitPool::from_idx(&imgs, size)?)
}

pub fn cmd_generate_data(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = &cfg.paths.mnist_dir;
    let missing: Vec<&str> = [MNIST_TRAIN, MNIST_TEST]
        .into_iter()
        .filter(|f| !dir.join(f).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Data(format!(
            "missing MNIST image file(s) {} in {}. Expected the uncompressed IDX files `{MNIST_TRAIN}` and \
             `{MNIST_TEST}`; decompress the MNIST archives there, point `paths.mnist_dir` at them, or run \
             `stpl synth-digits` to write rendered stand-ins",
            missing.join(", "),
            dir.display()
        )));
    }
    let d = &cfg.data;
    let spec = d.moving_spec();
    for (name, file, spec, count, path) in [
        ("train", MNIST_TRAIN, spec.clone(), d.train_sequences, &cfg.paths.train_data),
        ("test", MNIST_TEST, spec.test_split(), d.test_sequences, &cfg.paths.test_data),
    ] {
        let pool = digit_pool(&dir.join(file), d.digit_size)?;
        ensure_parent(path)?;
        let h = generate_dataset(&spec, &pool, count, path)?;
        println!(
            "{name}: {} sequences, shape {:?}, {} bytes, seed {} -> {}",
            h.sequences(),
            h.shape,
            h.file_bytes(),
            spec.seed,
            path.display()
        );
    }
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset, CliError> {
    read_dataset(path).map_err(|e| match e {
        stpl::Error::Io(io) => CliError::Data(format!(
            "{}: {io}; run `stpl generate-data` with the same configuration first",
            path.display()
        )),
        other => CliError::Data(format!("{}: {other}", path.display())),
    })
}

fn has_epoch_checkpoints(dir: &Path) -> Result<bool, CliError> {
    Ok(dir.is_dir() && latest_checkpoint(dir)?.is_some())
}

/// Train with `cfg`, returning the epoch records of this invocation.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<Vec<EpochRecord>, CliError> {
    let data = load_data(&cfg.paths.train_data)?;
    let model = TauModel::new(cfg.model.clone())?;
    let run_dir = &cfg.paths.run_dir;
    let ckpt_dir = run_dir.join("checkpoints");
    let mut trainer = if resume {
        let path = latest_checkpoint(&ckpt_dir)
            .ok()
            .flatten()
            .ok_or_else(|| CliError::Config(format!("--resume: no epoch checkpoint in {}", ckpt_dir.display())))?;
        let ck = Checkpoint::load(&path)?;
        let mut stored = ck.config.clone();
        stored.train.epochs = cfg.train.epochs;
        if stored.train != cfg.train || stored.loss != cfg.loss {
            return Err(CliError::Config(format!(
                "--resume: {} was trained with a different [train] or [loss] configuration",
                path.display()
            )));
        }
        log::info!("resuming from {} (epoch {})", path.display(), ck.epoch);
        Trainer::resume(&model, ck, Some(cfg.train.epochs))?
    } else {
        if has_epoch_checkpoints(&ckpt_dir)? {
            return Err(CliError::Config(format!(
                "{} already holds checkpoints; pass --resume or choose another --out",
                ckpt_dir.display()
            )));
        }
        Trainer::new(&model, cfg.train.clone(), cfg.loss.clone())?
    };
    log::info!(
        "training {} parameters on {} sequences of shape {:?}",
        model.num_parameters(),
        data.len(),
        data.shape()
    );
    let records = trainer.run(&data, Some(run_dir))?;
    if let Some(last) = records.last() {
        println!(
            "epoch {}: train loss {}, val mse {}, val ssim {}",
            last.epoch, last.train_loss, last.val_mse, last.val_ssim
        );
    }
    Ok(records)
}

fn load_params(cfg: &RunConfig, model: &TauModel, source: &ModelSource) -> Result<ParamStore, CliError> {
    if source.untrained {
        return Ok(model.init_params(cfg.train.seed));
    }
    let path = match &source.checkpoint {
        Some(p) => p.clone(),
        None => {
            let dir = cfg.paths.run_dir.join("checkpoints");
            latest_checkpoint(&dir).ok().flatten().ok_or_else(|| {
                CliError::Config(format!(
                    "no checkpoint in {}; train first, pass --checkpoint, or use --untrained",
                    dir.display()
                ))
            })?
        }
    };
    let ck = Checkpoint::load(&path)?;
    if &ck.config.model != model.config() {
        return Err(CliError::Config(format!(
            "{} holds a model with a different [model] configuration",
            path.display()
        )));
    }
    model.check_params(&ck.params)?;
    Ok(ck.params)
}

fn split_data(cfg: &RunConfig, split: SplitArg) -> Result<(Dataset, Vec<usize>), CliError> {
    match split {
        SplitArg::Test => {
            let d = load_data(&cfg.paths.test_data)?;
            let idx = (0..d.len()).collect();
            Ok((d, idx))
        }
        SplitArg::Val => {
            let d = load_data(&cfg.paths.train_data)?;
            let s = split_indices(d.len(), cfg.train.val_fraction, cfg.train.seed)?;
            Ok((d, s.val))
        }
    }
}

fn split_name(s: SplitArg) -> &'static str {
    match s {
        SplitArg::Val => "val",
        SplitArg::Test => "test",
    }
}

pub fn cmd_evaluate(
    cfg: &RunConfig,
    source: &ModelSource,
    split: SplitArg,
    horizon: Option<usize>,
) -> Result<MetricReport, CliError> {
    let model = TauModel::new(cfg.model.clone())?;
    let params = load_params(cfg, &model, source)?;
    let (data, idx) = split_data(cfg, split)?;
    let horizon = horizon.unwrap_or(cfg.model.frames_out);
    let report = evaluate(&model, &params, &data, &idx, cfg.train.batch_size, horizon)?;
    let stem = format!("eval-{}", split_name(split));
    report.write(&cfg.paths.run_dir, &stem)?;
    print!("{}", report.to_kv());
    Ok(report)
}

/// Mean over channels of frame `f` of sequence `s` in a `[B, T, C, H, W]` tensor.
fn frame_image(t: &Tensor, s: usize, f: usize) -> Gray {
    let [_, frames, c, h, w] = t.dims5("frame").expect("rank-5 video");
    let plane = h * w;
    let base = (s * frames + f) * c * plane;
    let mut px = vec![0f32; plane];
    for ch in 0..c {
        for (p, v) in px.iter_mut().zip(&t.data()[base + ch * plane..base + (ch + 1) * plane]) {
            *p += v / c as f32;
        }
    }
    Gray {
        width: w,
        height: h,
        pixels: px,
    }
}

const GAP: usize = 2;

/// Rows: input frames, ground truth, prediction, |ground truth − prediction|.
/// Cells without ground truth stay black.
fn difference_strip(input: &Tensor, truth: Option<&Tensor>, pred: &Tensor, s: usize) -> Gray {
    let [_, t_in, _, h, w] = input.dims5("strip").expect("rank-5 video");
    let horizon = pred.shape()[1];
    let cols = t_in.max(horizon);
    let known = truth.map_or(0, |t| t.shape()[1]);
    let mut img = Gray::filled(cols * (w + GAP) - GAP, 4 * (h + GAP) - GAP, 0.5);
    let cell = |col: usize, row: usize| (col * (w + GAP), row * (h + GAP));
    for f in 0..cols {
        if f < t_in {
            let (x, y) = cell(f, 0);
            img.blit(&frame_image(input, s, f), x, y);
        }
        if f < horizon {
            let p = frame_image(pred, s, f);
            let (x, y) = cell(f, 2);
            img.blit(&p, x, y);
            let (gt, diff) = match truth.filter(|_| f < known) {
                Some(t) => {
                    let g = frame_image(t, s, f);
                    let d = Gray {
                        pixels: g.pixels.iter().zip(&p.pixels).map(|(a, b)| (a - b).abs()).collect(),
                        ..g.clone()
                    };
                    (g, d)
                }
                None => (Gray::filled(w, h, 0.0), Gray::filled(w, h, 0.0)),
            };
            let (x, y) = cell(f, 1);
            img.blit(&gt, x, y);
            let (x, y) = cell(f, 3);
            img.blit(&diff, x, y);
        }
    }
    img
}

pub fn cmd_predict(
    cfg: &RunConfig,
    source: &ModelSource,
    split: SplitArg,
    horizon: Option<usize>,
    sequences: usize,
) -> Result<(), CliError> {
    let model = TauModel::new(cfg.model.clone())?;
    let params = load_params(cfg, &model, source)?;
    let (data, idx) = split_data(cfg, split)?;
    let horizon = horizon.unwrap_or(cfg.model.frames_out);
    let (t_in, c) = (cfg.model.frames_in, cfg.model.in_channels);
    data.check_compatible(t_in, 0, c).map_err(stpl::Error::from)?;
    let chosen: Vec<usize> = idx.into_iter().take(sequences.max(1)).collect();
    let seq_len = data.shape()[1];
    let known = horizon.min(seq_len - t_in);
    let batch = data.batch(&chosen, t_in, known)?;
    let truth = (known > 0).then_some(&batch.target);
    let (pred, calls) = predict_horizon(&model, &params, &batch.input, horizon)?;

    let out = cfg.paths.run_dir.join("predict");
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    for (s, &seq) in chosen.iter().enumerate() {
        let dir = out.join(format!("seq-{seq:04}"));
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        for f in 0..horizon {
            let p = dir.join(format!("frame-{f:04}.pgm"));
            frame_image(&pred, s, f).save(&p).map_err(|e| io_err(&p, e))?;
        }
        let p = out.join(format!("seq-{seq:04}-strip.pgm"));
        difference_strip(&batch.input, truth, &pred, s)
            .save(&p)
            .map_err(|e| io_err(&p, e))?;
    }
    println!(
        "predicted {horizon} frames for {} sequences in {calls} forward call(s) -> {}",
        chosen.len(),
        out.display()
    );
    Ok(())
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub config: RunConfig,
    pub records: Vec<EpochRecord>,
}

impl AblationRow {
    pub fn final_val_mse(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.val_mse)
    }
}

pub const ABLATION_HEADER: &str =
    "variant,ablation,ddr_enabled,config_hash,final_val_mse,best_val_mse,final_val_ssim,final_train_loss";

/// Variant name, temporal module and whether the DDR term is on.
pub const ABLATION_VARIANTS: [(&str, Ablation, bool); 5] = [
    ("full", Ablation::Full, true),
    ("no_sa", Ablation::NoSa, true),
    ("no_da", Ablation::NoDa, true),
    ("no_ddr", Ablation::Full, false),
    ("conv_baseline", Ablation::ConvBaseline, true),
];

pub fn ablation_config(base: &RunConfig, variant: &str, ablation: Ablation, ddr: bool) -> RunConfig {
    let mut c = base.clone();
    c.model.ablation = ablation;
    c.loss.ddr_enabled = ddr;
    c.paths.run_dir = base.paths.run_dir.join("ablate").join(variant);
    c
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>, CliError> {
    let mut rows = Vec::new();
    let mut csv = format!("{ABLATION_HEADER}\n");
    for (variant, ablation, ddr) in ABLATION_VARIANTS {
        let c = ablation_config(cfg, variant, ablation, ddr);
        let dir = &c.paths.run_dir;
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        fs::write(dir.join("effective-train.toml"), c.to_toml()).map_err(|e| io_err(dir, e))?;
        log::info!("ablation variant {variant}");
        let records = cmd_train(&c, false)?;
        let best = records.iter().map(|r| r.val_mse).fold(f64::INFINITY, f64::min);
        let last = records.last().expect("at least one epoch");
        csv.push_str(&format!(
            "{variant},{},{ddr},{},{},{best},{},{}\n",
            ablation.name(),
            c.experiment_hash(),
            last.val_mse,
            last.val_ssim,
            last.train_loss
        ));
        rows.push(AblationRow {
            variant,
            config: c,
            records,
        });
    }
    let path = cfg.paths.run_dir.join("ablation.csv");
    fs::write(&path, &csv).map_err(|e| io_err(&path, e))?;
    print!("{csv}");
    Ok(rows)
}

/// Path of the best-by-validation checkpoint in a run directory.
pub fn best_checkpoint(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints").join(BEST_CHECKPOINT)
}
