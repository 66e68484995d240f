//! Strict plate-level scoring and the cumulative ablation harness.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{batch_images, PlateSequence, Sample};
use crate::error::{arg_err, Error, Result};
use crate::kernel::Scalar;
use crate::model::{count_parameters, ModelConfig, SdaNet, VariantFlags};
use crate::train::{EpochMetrics, TrainConfig, Trainer};

/// Index of the largest entry; the lowest index wins ties. NaN never wins.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] || row[best].is_nan() && !v.is_nan() {
            best = i;
        }
    }
    best
}

/// Anything that maps character images to class logits.
pub trait Classifier {
    fn num_classes(&self) -> usize;
    /// One logit row per sample.
    fn logits(&self, samples: &[&Sample]) -> Result<Vec<Vec<f64>>>;
}

impl<T: Scalar> Classifier for SdaNet<T> {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn logits(&self, samples: &[&Sample]) -> Result<Vec<Vec<f64>>> {
        let out = SdaNet::logits(self, batch_images::<T>(samples)?)?;
        let n = out.shape()[1];
        Ok(out.data().chunks_exact(n).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect())
    }
}

/// Predicted classes for `samples`, scored in chunks of `batch_size`.
pub fn predict<C: Classifier + ?Sized>(clf: &C, samples: &[&Sample], batch_size: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let rows = clf.logits(chunk)?;
        if rows.len() != chunk.len() || rows.iter().any(|r| r.len() != clf.num_classes()) {
            return Err(Error::Contract("classifier returned logits of the wrong shape".into()));
        }
        out.extend(rows.iter().map(|r| argmax(r)));
    }
    Ok(out)
}

pub fn char_accuracy<C: Classifier + ?Sized>(clf: &C, samples: &[Sample], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(arg_err("char_accuracy", "no samples"));
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let pred = predict(clf, &refs, batch_size)?;
    let correct = pred.iter().zip(samples).filter(|(p, s)| **p == s.label).count();
    Ok(correct as f64 / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub total_plates: usize,
    pub recognized_plates: usize,
    /// Percent of plates with every character correct.
    pub recognition_rate: f64,
    pub chars_correct: usize,
    pub chars_total: usize,
    /// Fraction of characters classified correctly.
    pub char_accuracy: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub const REPORT_TSV_HEADER: &str = "location\tenvironment\ttotal\trecognized\trecognition_rate\tchar_accuracy";

impl EvalReport {
    /// Scores predictions already grouped per plate.
    pub fn from_predictions(truth: &[Vec<usize>], predicted: &[Vec<usize>], num_classes: usize) -> Result<Self> {
        if truth.is_empty() {
            return Err(arg_err("evaluate_plates", "no plates"));
        }
        let mut confusion = vec![vec![0; num_classes]; num_classes];
        let (mut recognized, mut correct, mut total) = (0, 0, 0);
        for (t, p) in truth.iter().zip(predicted) {
            if t.len() != p.len() {
                return Err(arg_err("evaluate_plates", "prediction count differs from plate length"));
            }
            let mut all = true;
            for (&tc, &pc) in t.iter().zip(p) {
                if tc >= num_classes || pc >= num_classes {
                    return Err(arg_err("evaluate_plates", format!("class outside 0..{num_classes}")));
                }
                confusion[tc][pc] += 1;
                total += 1;
                if tc == pc {
                    correct += 1;
                } else {
                    all = false;
                }
            }
            recognized += all as usize;
        }
        Ok(Self {
            total_plates: truth.len(),
            recognized_plates: recognized,
            recognition_rate: 100.0 * recognized as f64 / truth.len() as f64,
            chars_correct: correct,
            chars_total: total,
            char_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            confusion,
        })
    }

    /// Fixed-width table: location, environment, totals, rate, then
    /// character accuracy.
    pub fn table(&self, location: &str, environment: &str) -> String {
        let header = [
            "Location",
            "Environment",
            "Total Vehicles",
            "Recognized Vehicles",
            "Recognition Rate (%)",
            "Char Accuracy (%)",
        ];
        let row = [
            String::from(location),
            String::from(environment),
            format!("{}", self.total_plates),
            format!("{}", self.recognized_plates),
            format!("{:.2}", self.recognition_rate),
            format!("{:.2}", 100.0 * self.char_accuracy),
        ];
        let widths: Vec<usize> = header.iter().zip(&row).map(|(h, r)| h.len().max(r.chars().count())).collect();
        let line = |cells: &[&str]| {
            let mut s = String::from("|");
            for (c, w) in cells.iter().zip(&widths) {
                s += &format!(" {c:<w$} |");
            }
            s
        };
        let rule: String = widths.iter().fold(String::from("+"), |acc, w| acc + &"-".repeat(w + 2) + "+");
        let row_refs: Vec<&str> = row.iter().map(String::as_str).collect();
        format!("{rule}\n{}\n{rule}\n{}\n{rule}\n", line(&header), line(&row_refs))
    }

    pub fn tsv_row(&self, location: &str, environment: &str) -> String {
        format!(
            "{location}\t{environment}\t{}\t{}\t{}\t{}",
            self.total_plates, self.recognized_plates, self.recognition_rate, self.char_accuracy
        )
    }
}

/// Classifies every character of every plate; a plate is recognized only
/// if all of its characters are.
pub fn evaluate_plates<C: Classifier + ?Sized>(
    clf: &C,
    plates: &[PlateSequence],
    batch_size: usize,
) -> Result<EvalReport> {
    if plates.is_empty() {
        return Err(arg_err("evaluate_plates", "no plates"));
    }
    let refs: Vec<&Sample> = plates.iter().flat_map(|p| &p.samples).collect();
    let flat = predict(clf, &refs, batch_size)?;
    let mut predicted = Vec::with_capacity(plates.len());
    let mut at = 0;
    for p in plates {
        predicted.push(flat[at..at + p.samples.len()].to_vec());
        at += p.samples.len();
    }
    let truth: Vec<Vec<usize>> = plates.iter().map(|p| p.truth.clone()).collect();
    EvalReport::from_predictions(&truth, &predicted, clf.num_classes())
}

/// The cumulative variants, in table order.
pub const ABLATION_VARIANTS: [(&str, &str); 4] = [
    ("baseline", "Baseline ResNet (No Attention)"),
    ("ssa", "+ Stroke-Sensitive Attention (SSA)"),
    ("edge", "+ Edge-Aware Attention"),
    ("dce", "+ Dynamic Context Encoding (DCE)"),
];

/// Flags of a named cumulative variant. `dce` is the full model, fusion included.
pub fn variant_flags(name: &str) -> Result<VariantFlags> {
    let mut f = VariantFlags::BASELINE;
    match name {
        "baseline" => {}
        "ssa" => f.use_channel_attention = true,
        "edge" => {
            f.use_channel_attention = true;
            f.use_edge_attention = true;
        }
        "dce" => f = VariantFlags::FULL,
        _ => return Err(Error::Config(format!("unknown variant {name:?} (baseline|ssa|edge|dce)"))),
    }
    Ok(f)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub label: String,
    pub flags: VariantFlags,
    /// Strict plate recognition rate, percent.
    pub accuracy: f64,
    pub params: usize,
}

pub const ABLATION_TSV_HEADER: &str = "variant\tflags\taccuracy\tparams";

impl AblationRow {
    pub fn tsv_row(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.variant, self.flags.code(), self.accuracy, self.params)
    }
}

/// Trains each cumulative variant from scratch with the same seed and data
/// order, then scores it on `plates`. `on_epoch` sees every epoch's metrics.
pub fn run_ablation<T: Scalar>(
    train: &[Sample],
    plates: &[PlateSequence],
    base: &ModelConfig,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&str, &EpochMetrics),
) -> Result<Vec<AblationRow>> {
    ABLATION_VARIANTS
        .iter()
        .map(|&(name, label)| {
            let wrap = |e: Error| Error::Contract(format!("variant {name}: {e}"));
            let flags = variant_flags(name)?;
            let cfg = base.clone().with_variants(flags);
            let params = count_parameters(&cfg)?.total_params;
            let model = SdaNet::<T>::new(cfg, config.seed).map_err(wrap)?;
            let mut trainer = Trainer::new(model, config.clone()).map_err(wrap)?;
            for _ in 0..config.epochs {
                let m = trainer.train_epoch(train).map_err(wrap)?;
                on_epoch(name, &m);
            }
            let report = evaluate_plates(trainer.model(), plates, config.batch_size).map_err(wrap)?;
            Ok(AblationRow {
                variant: name.into(),
                label: label.into(),
                flags,
                accuracy: report.recognition_rate,
                params,
            })
        })
        .collect()
}
