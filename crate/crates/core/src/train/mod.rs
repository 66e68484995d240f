//! Mini-batch AdamW training with the consistency objective.

mod checkpoint;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};

use crate::data::{batch_images, Sample};
use crate::error::{Error, Result};
use crate::eval::argmax;
use crate::kernel::{adamw_step, AdamWConfig, AdamWState, Graph, Precision, Scalar};
use crate::kv::KvMap;
use crate::loss::{total_loss, LossBreakdown, LossWeights, NormReduction};
use crate::model::SdaNet;
use crate::rng::{Rng, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// batch 128, 100 epochs
    Paper,
    /// batch 32, 30 epochs
    Desk,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset {s:?} (paper|desk)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub precision: Precision,
    pub checkpoint_dir: String,
    /// Validate every this many epochs (0 disables).
    pub eval_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Paper)
    }
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let opt = AdamWConfig::default();
        let (batch_size, epochs, learning_rate) = match preset {
            Preset::Paper => (128, 100, opt.lr),
            Preset::Desk => (32, 30, DESK_LEARNING_RATE),
        };
        Self {
            learning_rate,
            batch_size,
            epochs,
            weights: LossWeights::default(),
            seed: 0,
            precision: Precision::F32,
            checkpoint_dir: "checkpoints".into(),
            eval_every: 1,
            beta1: opt.beta1,
            beta2: opt.beta2,
            adam_eps: opt.eps,
            weight_decay: opt.weight_decay,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("train.batch_size and train.epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "train.learning_rate {} must be a finite non-negative number",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("AdamW betas must lie in [0,1) and eps must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train.weight_decay must be non-negative".into()));
        }
        self.weights.validate()
    }

    pub fn to_kv(&self, out: &mut KvMap) {
        out.set("train.learning_rate", self.learning_rate);
        out.set("train.batch_size", self.batch_size);
        out.set("train.epochs", self.epochs);
        out.set("train.precision", if self.precision == Precision::F64 { "f64" } else { "f32" });
        out.set("train.checkpoint_dir", &self.checkpoint_dir);
        out.set("train.eval_every", self.eval_every);
        out.set("train.beta1", self.beta1);
        out.set("train.beta2", self.beta2);
        out.set("train.eps", self.adam_eps);
        out.set("train.weight_decay", self.weight_decay);
        out.set("loss.lambda_att", self.weights.lambda_att);
        out.set("loss.lambda_ctx", self.weights.lambda_ctx);
        out.set("loss.lambda_fea", self.weights.lambda_fea);
        out.set("loss.norm", if self.weights.norm == NormReduction::Mean { "mean" } else { "sum" });
    }

    /// Reads `train.*` and `loss.*` keys. The seed is handled by the caller.
    pub fn apply_kv(&mut self, map: &mut KvMap) -> Result<()> {
        macro_rules! field {
            ($key:literal, $dst:expr) => {
                if let Some(v) = map.take($key)? {
                    $dst = v;
                }
            };
        }
        field!("train.learning_rate", self.learning_rate);
        field!("train.batch_size", self.batch_size);
        field!("train.epochs", self.epochs);
        field!("train.checkpoint_dir", self.checkpoint_dir);
        field!("train.eval_every", self.eval_every);
        field!("train.beta1", self.beta1);
        field!("train.beta2", self.beta2);
        field!("train.eps", self.adam_eps);
        field!("train.weight_decay", self.weight_decay);
        field!("loss.lambda_att", self.weights.lambda_att);
        field!("loss.lambda_ctx", self.weights.lambda_ctx);
        field!("loss.lambda_fea", self.weights.lambda_fea);
        if let Some(p) = map.take::<String>("train.precision")? {
            self.precision = match p.as_str() {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                _ => return Err(Error::Config(format!("train.precision {p:?} (f32|f64)"))),
            };
        }
        if let Some(n) = map.take::<String>("loss.norm")? {
            self.weights.norm = match n.as_str() {
                "sum" => NormReduction::Sum,
                "mean" => NormReduction::Mean,
                _ => return Err(Error::Config(format!("loss.norm {n:?} (sum|mean)"))),
            };
        }
        self.validate()
    }
}

/// Learning rate of the desk preset. The `paper` preset's 5e-5 is still
/// near chance after a few desk-sized epochs; this reaches 95% in about four.
pub const DESK_LEARNING_RATE: f64 = 1e-3;

/// Per-epoch means, weighted by sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub loss: LossBreakdown,
    pub char_accuracy: f64,
}

impl EpochMetrics {
    /// `epoch l_total l_att l_ctx l_fea l_ce char_accuracy`, tab separated.
    pub fn tsv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch, l.l_total, l.l_att, l.l_ctx, l.l_fea, l.l_ce, self.char_accuracy
        )
    }
}

pub const METRICS_HEADER: &str = "epoch\tl_total\tl_att\tl_ctx\tl_fea\tl_ce\tchar_accuracy";

#[derive(Default)]
struct Running {
    sums: [f64; 5],
    correct: usize,
    seen: usize,
}

impl Running {
    fn add(&mut self, b: &LossBreakdown, n: usize, correct: usize) {
        let parts = [b.l_total, b.l_att, b.l_ctx, b.l_fea, b.l_ce];
        for (s, p) in self.sums.iter_mut().zip(parts) {
            *s += p * n as f64;
        }
        self.correct += correct;
        self.seen += n;
    }

    fn finish(&self) -> (LossBreakdown, f64) {
        let n = self.seen.max(1) as f64;
        let [l_total, l_att, l_ctx, l_fea, l_ce] = self.sums.map(|s| s / n);
        (LossBreakdown { l_total, l_att, l_ctx, l_fea, l_ce }, self.correct as f64 / n)
    }
}

fn count_correct<T: Scalar>(g: &Graph<T>, logits: crate::Var, labels: &[usize]) -> usize {
    let t = g.value(logits);
    let n = t.shape()[1];
    let row: Vec<f64> = t.data().iter().map(|v| v.as_f64()).collect();
    row.chunks_exact(n).zip(labels).filter(|(r, &l)| argmax(r) == l).count()
}

/// A model together with its optimizer state and shuffle stream.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    model: SdaNet<T>,
    optimizer: AdamWState<T>,
    config: TrainConfig,
    epoch: u64,
    rng: Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: SdaNet<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamWState::new(&model.params().tensors);
        let rng = Rng::new(config.seed).split_str("shuffle");
        Ok(Self { model, optimizer, config, epoch: 0, rng })
    }

    /// Resumes from a checkpoint; hyperparameters come from `config`.
    pub fn from_checkpoint(ckpt: Checkpoint<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = ckpt.model()?;
        Ok(Self { model, optimizer: ckpt.optimizer, config, epoch: ckpt.epoch, rng: Rng::from_state(ckpt.rng) })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.model.config().clone(),
            names: self.model.params().names.clone(),
            params: self.model.params().tensors.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            rng: self.rng_state(),
        }
    }

    pub fn model(&self) -> &SdaNet<T> {
        &self.model
    }

    pub fn into_model(self) -> SdaNet<T> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn rng_state(&self) -> RngState {
        self.rng.state()
    }

    /// One pass over `data` in an order drawn from the epoch's substream.
    /// The last batch may be smaller than the batch size.
    pub fn train_epoch(&mut self, data: &[Sample]) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(crate::error::arg_err("train_epoch", "empty dataset"));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        self.rng.split(self.epoch).shuffle(&mut order);
        let flags = self.model.config().variants;
        let opt = self.config.optimizer();
        let mut run = Running::default();
        for (bi, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let mut g = Graph::new();
            let p = self.model.bind(&mut g, true);
            let x = g.constant(batch_images::<T>(&batch)?);
            let trace = self.model.forward(&mut g, &p, x)?;
            let terms = total_loss(&mut g, &trace, &labels, &self.config.weights, flags)?;
            let b = terms.breakdown(&g);
            if let Some(component) = b.first_non_finite() {
                return Err(Error::NonFinite(format!("epoch {} batch {bi}: {component} is not finite", self.epoch)));
            }
            run.add(&b, batch.len(), count_correct(&g, trace.logits, &labels));
            g.backward(terms.total)?;
            let zeros: Vec<Vec<T>> = self
                .model
                .params()
                .tensors
                .iter()
                .zip(p.vars())
                .map(|(t, &v)| if g.grad(v).is_some() { Vec::new() } else { vec![T::zero(); t.numel()] })
                .collect();
            let grads: Vec<&[T]> = p.vars().iter().zip(&zeros).map(|(&v, z)| g.grad(v).unwrap_or(z)).collect();
            let store = self.model.params_mut();
            adamw_step(&mut store.tensors, &grads, &store.decay, &mut self.optimizer, &opt)
                .map_err(|e| annotate(e, self.epoch, bi))?;
        }
        self.epoch += 1;
        let (loss, char_accuracy) = run.finish();
        Ok(EpochMetrics { epoch: self.epoch, loss, char_accuracy })
    }

    /// Accuracy and mean losses on `data`; parameters are not touched.
    pub fn validate(&self, data: &[Sample]) -> Result<(f64, LossBreakdown)> {
        validate_model(&self.model, data, &self.config.weights, self.config.batch_size)
    }
}

fn annotate(e: Error, epoch: u64, batch: usize) -> Error {
    match e {
        Error::NonFinite(d) => Error::NonFinite(format!("epoch {epoch} batch {batch}: {d}")),
        other => other,
    }
}

/// Character accuracy and sample-weighted mean losses over `data`.
pub fn validate_model<T: Scalar>(
    model: &SdaNet<T>,
    data: &[Sample],
    weights: &LossWeights,
    batch_size: usize,
) -> Result<(f64, LossBreakdown)> {
    let flags = model.config().variants;
    let mut run = Running::default();
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        let x = g.constant(batch_images::<T>(&batch)?);
        let trace = model.forward(&mut g, &p, x)?;
        let terms = total_loss(&mut g, &trace, &labels, weights, flags)?;
        run.add(&terms.breakdown(&g), batch.len(), count_correct(&g, trace.logits, &labels));
    }
    let (loss, acc) = run.finish();
    Ok((acc, loss))
}

/// Parses a metrics line back into its seven fields.
pub fn parse_metrics_line(line: &str) -> Result<EpochMetrics> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 7 {
        return Err(Error::Config(format!("metrics line has {} fields, expected 7", f.len())));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Config(format!("bad number {s:?}")));
    Ok(EpochMetrics {
        epoch: f[0].parse().map_err(|_| Error::Config(format!("bad epoch {:?}", f[0])))?,
        loss: LossBreakdown {
            l_total: num(f[1])?,
            l_att: num(f[2])?,
            l_ctx: num(f[3])?,
            l_fea: num(f[4])?,
            l_ce: num(f[5])?,
        },
        char_accuracy: num(f[6])?,
    })
}

impl core::fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(&self.tsv_line())
    }
}
