//! Command-line driver: data export, training, plate evaluation, ablation,
//! gradient checking and parameter reports.

pub mod config;
pub mod export;

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use sdanet_core::data::{build_dataset, AugmentConfig, DataConfig};
use sdanet_core::eval::{evaluate_plates, run_ablation, ABLATION_TSV_HEADER, REPORT_TSV_HEADER};
use sdanet_core::kernel::{grad_check, GradCheckOptions, GradCheckReport, Precision};
use sdanet_core::loss::total_loss;
use sdanet_core::model::{count_parameters, ModelConfig, ParamReport, SdaNet};
use sdanet_core::train::{Checkpoint, Preset, Trainer, METRICS_HEADER};
use sdanet_core::{Scalar, Tensor};

pub use config::{Overrides, RunConfig};

/// Gradient-check threshold on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub const REPORT_LOCATION: &str = "Synthetic Benchmark";
pub const REPORT_ENVIRONMENT: &str = "Synthetic";

#[derive(Parser, Debug)]
#[command(name = "sdanet", about = "Train and evaluate the SDA-Net character classifier on synthetic glyphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Baseline,
    Ssa,
    Edge,
    Dce,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `key = value` config file, or `default` for built-in values
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
}

impl Common {
    fn resolve(&self, variant: Option<VariantArg>) -> Result<RunConfig> {
        let flags = Overrides {
            seed: self.seed,
            preset: self.preset.map(|p| match p {
                PresetArg::Paper => Preset::Paper,
                PresetArg::Desk => Preset::Desk,
            }),
            variant: variant.map(|v| {
                match v {
                    VariantArg::Baseline => "baseline",
                    VariantArg::Ssa => "ssa",
                    VariantArg::Edge => "edge",
                    VariantArg::Dce => "dce",
                }
                .to_string()
            }),
        };
        RunConfig::load(self.config.as_deref(), &flags)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the train/val/plate splits as PPM files with index.tsv
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR", default_value = "data")]
        out: PathBuf,
    },
    /// Train a model; writes metrics.tsv, config.txt and checkpoint.sdaw
    Train {
        #[command(flatten)]
        common: Common,
        /// output directory (defaults to train.checkpoint_dir)
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// resume from this checkpoint
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
    /// Score a checkpoint on the synthetic plate benchmark
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// also write report.tsv here
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train the four cumulative variants and tabulate plate accuracy
    Ablate {
        #[command(flatten)]
        common: Common,
        /// also write ablation.tsv here
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Compare backpropagated gradients with central finite differences
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// use the 16 px model with stages [8,16,32] and 4 classes
        #[arg(long)]
        tiny: bool,
        /// check at most this many coordinates per tensor (default: all for --tiny, 4 otherwise)
        #[arg(long, value_name = "N")]
        coords: Option<usize>,
    },
    /// Print per-layer parameter and multiply-accumulate counts
    Params {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
}

/// Parses `args` (including the program name) and runs the command.
/// Returns 0 on success, 1 on usage errors and 2 on runtime failures.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let rendered = e.render().ansi().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{rendered}");
                1
            } else {
                let _ = write!(out, "{rendered}");
                0
            };
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            2
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::GenData { common, out: dir } => gen_data(&common.resolve(None)?, &dir, out),
        Command::Train { common, out: dir, checkpoint, variant } => {
            let cfg = common.resolve(variant)?;
            let dir = dir.unwrap_or_else(|| PathBuf::from(&cfg.train.checkpoint_dir));
            match cfg.train.precision {
                Precision::F32 => train::<f32>(&cfg, &dir, checkpoint.as_deref(), out, err),
                Precision::F64 => train::<f64>(&cfg, &dir, checkpoint.as_deref(), out, err),
            }
        }
        Command::Eval { common, checkpoint, out: dir } => {
            eval(&common.resolve(None)?, &checkpoint, dir.as_deref(), out)
        }
        Command::Ablate { common, out: dir } => {
            let cfg = common.resolve(None)?;
            match cfg.train.precision {
                Precision::F32 => ablate::<f32>(&cfg, dir.as_deref(), out, err),
                Precision::F64 => ablate::<f64>(&cfg, dir.as_deref(), out, err),
            }
        }
        Command::Gradcheck { common, tiny, coords } => {
            let cfg = common.resolve(None)?;
            let report = gradcheck(&cfg, tiny, coords)?;
            writeln!(out, "max_relative_error\t{:e}", report.max_relative_error)?;
            writeln!(out, "checked\t{}", report.checked)?;
            writeln!(out, "flagged\t{}", report.flagged)?;
            if let Some(w) = report.worst {
                writeln!(
                    out,
                    "worst\tparam {} coord {} analytic {:e} numeric {:e}",
                    w.param, w.coord, w.analytic, w.numeric
                )?;
            }
            if report.max_relative_error < GRADCHECK_TOLERANCE {
                writeln!(out, "PASS")?;
                Ok(())
            } else {
                writeln!(out, "FAIL")?;
                bail!("max relative error {:e} is not below {GRADCHECK_TOLERANCE:e}", report.max_relative_error)
            }
        }
        Command::Params { common, variant } => {
            let cfg = common.resolve(variant)?;
            write!(out, "{}", params_table(&count_parameters(&cfg.model)?))?;
            Ok(())
        }
    }
}

fn gen_data(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let splits = cfg.data.build(cfg.image_size(), cfg.seed)?;
    export::export_samples(&dir.join("train"), &splits.train)?;
    export::export_samples(&dir.join("val"), &splits.val)?;
    let plate_samples: Vec<_> = splits.plates.iter().flat_map(|p| p.samples.iter().cloned()).collect();
    export::export_samples(&dir.join("plates"), &plate_samples)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    writeln!(out, "train\t{}", splits.train.len())?;
    writeln!(out, "val\t{}", splits.val.len())?;
    writeln!(out, "plates\t{}\t{}", splits.plates.len(), plate_samples.len())?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn train<T: Scalar>(
    cfg: &RunConfig,
    dir: &Path,
    resume: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut trainer = match resume {
        None => Trainer::new(SdaNet::<T>::new(cfg.model.clone(), cfg.seed)?, cfg.train.clone())?,
        Some(path) => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let ckpt = Checkpoint::<T>::decode(&bytes).with_context(|| format!("loading {}", path.display()))?;
            if ckpt.config.num_classes != cfg.data.num_classes || ckpt.config.input_size != cfg.image_size() {
                bail!("checkpoint model does not match the configured data (classes or input size)");
            }
            Trainer::from_checkpoint(ckpt, cfg.train.clone())?
        }
    };
    let size = trainer.model().config().input_size;
    let train_set = cfg.data.build_train(size, cfg.seed)?;
    let val_set = build_dataset(
        cfg.data.num_classes,
        cfg.data.val_per_class,
        size,
        DataConfig::split_seed(cfg.seed, "val"),
        &AugmentConfig::disabled(),
    )?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let metrics_path = dir.join("metrics.tsv");
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    writeln!(out, "{METRICS_HEADER}")?;
    while (trainer.epoch() as usize) < cfg.train.epochs {
        let m = trainer.train_epoch(&train_set)?;
        writeln!(log, "{}", m.tsv_line())?;
        writeln!(out, "{}", m.tsv_line())?;
        let every = cfg.train.eval_every;
        if every > 0 && (m.epoch as usize).is_multiple_of(every) {
            let (acc, _) = trainer.validate(&val_set)?;
            writeln!(err, "val\t{}\t{acc}", m.epoch)?;
        }
    }
    let (acc, _) = trainer.validate(&val_set)?;
    let bytes = trainer.checkpoint().encode();
    let ckpt_path = dir.join("checkpoint.sdaw");
    fs::write(&ckpt_path, &bytes).with_context(|| format!("writing {}", ckpt_path.display()))?;
    writeln!(out, "val_accuracy\t{acc}")?;
    writeln!(out, "checkpoint\t{}\t{}", ckpt_path.display(), sha256_hex(&bytes))?;
    Ok(())
}

fn eval_with<T: Scalar>(ckpt: Checkpoint<T>, cfg: &RunConfig) -> Result<sdanet_core::eval::EvalReport> {
    let model = ckpt.model()?;
    let mut data = cfg.data.clone();
    data.num_classes = model.config().num_classes;
    let plates = data.build_plates(model.config().input_size, cfg.seed)?;
    Ok(evaluate_plates(&model, &plates, cfg.train.batch_size)?)
}

fn eval(cfg: &RunConfig, path: &Path, dir: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let report = match Checkpoint::<f32>::decode(&bytes) {
        Ok(c) => eval_with(c, cfg)?,
        Err(sdanet_core::Error::Precision(_)) => eval_with(Checkpoint::<f64>::decode(&bytes)?, cfg)?,
        Err(e) => return Err(e).with_context(|| format!("loading {}", path.display())),
    };
    write!(out, "{}", report.table(REPORT_LOCATION, REPORT_ENVIRONMENT))?;
    let tsv = format!("{REPORT_TSV_HEADER}\n{}\n", report.tsv_row(REPORT_LOCATION, REPORT_ENVIRONMENT));
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.tsv"), &tsv)?;
    }
    write!(out, "{tsv}")?;
    Ok(())
}

fn ablate<T: Scalar>(cfg: &RunConfig, dir: Option<&Path>, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let train_set = cfg.data.build_train(cfg.image_size(), cfg.seed)?;
    let plates = cfg.data.build_plates(cfg.image_size(), cfg.seed)?;
    let mut progress = |name: &str, m: &sdanet_core::train::EpochMetrics| {
        let _ = writeln!(err, "{name}\t{}", m.tsv_line());
    };
    let rows = run_ablation::<T>(&train_set, &plates, &cfg.model, &cfg.train, &mut progress)?;
    let mut tsv = format!("{ABLATION_TSV_HEADER}\n");
    for r in &rows {
        tsv += &r.tsv_row();
        tsv.push('\n');
    }
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ablation.tsv"), &tsv)?;
    }
    write!(out, "{tsv}")?;
    Ok(())
}

/// Finite-difference check of the full objective on a batch of two glyphs.
pub fn gradcheck(cfg: &RunConfig, tiny: bool, coords: Option<usize>) -> Result<GradCheckReport> {
    let model_cfg = if tiny { ModelConfig::tiny() } else { cfg.model.clone() };
    let net = SdaNet::<f64>::new(model_cfg.clone(), cfg.seed)?;
    let samples = build_dataset(model_cfg.num_classes, 1, model_cfg.input_size, cfg.seed, &AugmentConfig::disabled())?;
    let batch: Vec<_> = samples.iter().take(2).collect();
    let x: Tensor<f64> = sdanet_core::data::batch_images(&batch)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let weights = cfg.train.weights;
    let opts = GradCheckOptions {
        max_coords_per_param: coords.or(if tiny { None } else { Some(4) }),
        seed: cfg.seed,
        ..GradCheckOptions::default()
    };
    let report = grad_check(
        &net.params().tensors,
        |g, vars| {
            let p = net.bind_vars(vars)?;
            let xv = g.constant(x.clone());
            let t = net.forward(g, &p, xv)?;
            Ok(total_loss(g, &t, &labels, &weights, model_cfg.variants)?.total)
        },
        opts,
    )?;
    Ok(report)
}

pub fn params_table(r: &ParamReport) -> String {
    let mut s = String::from("layer\tshape\tparams\tmacs\n");
    for l in &r.layers {
        let shape: Vec<String> = l.shape.iter().map(|d| d.to_string()).collect();
        s += &format!("{}\t{}\t{}\t{}\n", l.name, shape.join("x"), l.params, l.macs);
    }
    s += &format!("total\t-\t{}\t{}\n", r.total_params, r.total_macs);
    s
}
