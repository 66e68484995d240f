//! Procedurally rendered character images and plate sequences.

mod augment;
mod glyph;

use alloc::format;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

pub use augment::{
    adjust_contrast, blur, brightness, contrast, gaussian_kernel, rotate, Augment, AugmentConfig, BRIGHTNESS_RANGE,
    CONTRAST_RANGE, MAX_BLUR_SIGMA, MAX_ROTATION_DEG,
};
pub use glyph::{render_glyph, GlyphSpec, Stroke, CLASS_CHARS, MAX_CLASSES};

use crate::error::{arg_err, Error, Result};
use crate::kernel::{Scalar, Tensor};
use crate::kv::KvMap;
use crate::rng::{label_hash, Rng};

/// One labelled character image `[3,H,W]` in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: usize,
    pub plate_id: Option<usize>,
    pub position: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlateSequence {
    pub plate_id: usize,
    pub samples: Vec<Sample>,
    pub truth: Vec<usize>,
}

impl PlateSequence {
    /// Ground truth rendered with the class alphabet.
    pub fn text(&self) -> alloc::string::String {
        self.truth.iter().map(|&c| CLASS_CHARS[c] as char).collect()
    }
}

fn check_classes(num_classes: usize) -> Result<()> {
    if num_classes == 0 || num_classes > MAX_CLASSES {
        return Err(arg_err("dataset", format!("num_classes {num_classes} outside 1..={MAX_CLASSES}")));
    }
    Ok(())
}

fn render_sample(class: usize, size: usize, aug: &AugmentConfig, rng: &mut Rng) -> Result<Tensor<f32>> {
    let img = render_glyph(&GlyphSpec::for_class(class)?, size, rng)?;
    aug.apply(&img, rng)
}

/// `per_class` samples of every class, interleaved by class. Sample `i`
/// draws everything from substream `i` of `seed`.
pub fn build_dataset(
    num_classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
    aug: &AugmentConfig,
) -> Result<Vec<Sample>> {
    check_classes(num_classes)?;
    if per_class == 0 {
        return Err(arg_err("build_dataset", "per_class must be at least 1"));
    }
    let root = Rng::new(seed);
    (0..num_classes * per_class)
        .map(|i| {
            let label = i % num_classes;
            let image = render_sample(label, size, aug, &mut root.split(i as u64))?;
            Ok(Sample { image, label, plate_id: None, position: 0 })
        })
        .collect()
}

/// Plates of uniformly drawn characters; plate `p` uses substream `p`.
pub fn build_plate_set(
    num_plates: usize,
    chars_per_plate: usize,
    num_classes: usize,
    size: usize,
    seed: u64,
    aug: &AugmentConfig,
) -> Result<Vec<PlateSequence>> {
    check_classes(num_classes)?;
    if chars_per_plate == 0 {
        return Err(arg_err("build_plate_set", "chars_per_plate must be at least 1"));
    }
    let root = Rng::new(seed);
    (0..num_plates)
        .map(|p| {
            let mut prng = root.split(p as u64);
            let truth: Vec<usize> = (0..chars_per_plate).map(|_| prng.below(num_classes as u64) as usize).collect();
            let samples = truth
                .iter()
                .enumerate()
                .map(|(pos, &label)| {
                    let image = render_sample(label, size, aug, &mut prng.split(pos as u64))?;
                    Ok(Sample { image, label, plate_id: Some(p), position: pos })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PlateSequence { plate_id: p, samples, truth })
        })
        .collect()
}

/// Floor under the per-image variance so flat images don't blow up.
pub const STANDARDIZE_EPS: f32 = 1e-4;

/// Shifts and scales one image to zero mean, unit variance over all
/// channels. Glyphs are mostly flat background, and without this the
/// network sees nearly identical inputs for every class.
pub fn standardize(pixels: &mut [f32]) {
    if pixels.is_empty() {
        return;
    }
    let n = pixels.len() as f32;
    let mean = pixels.iter().sum::<f32>() / n;
    let var = pixels.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n;
    let scale = 1.0 / Float::sqrt(var + STANDARDIZE_EPS);
    for x in pixels.iter_mut() {
        *x = (*x - mean) * scale;
    }
}

/// Network input for a batch: stacked `[B,3,H,W]`, each image
/// standardized, cast to the requested precision.
pub fn batch_images<T: Scalar>(samples: &[&Sample]) -> Result<Tensor<T>> {
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    let mut t: Tensor<f32> = Tensor::stack(&images)?;
    let per = t.data().len() / samples.len().max(1);
    if per > 0 {
        t.data_mut().chunks_mut(per).for_each(standardize);
    }
    Ok(t.cast())
}

/// FNV-1a over labels and pixel bits, for cheap dataset identity checks.
pub fn dataset_hash(samples: &[Sample]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for s in samples {
        eat(&(s.label as u64).to_le_bytes());
        for v in s.image.data() {
            eat(&v.to_bits().to_le_bytes());
        }
    }
    h
}

pub fn class_histogram(samples: &[Sample], num_classes: usize) -> Vec<usize> {
    let mut h = alloc::vec![0; num_classes];
    for s in samples {
        h[s.label] += 1;
    }
    h
}

/// Sizes of the generated splits and the augmentation policy.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub plates: usize,
    pub chars_per_plate: usize,
    pub augment: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_per_class: 200,
            val_per_class: 40,
            plates: 391,
            chars_per_plate: 7,
            augment: AugmentConfig::default(),
        }
    }
}

/// Training, validation and plate benchmark sets from one seed.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub plates: Vec<PlateSequence>,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > MAX_CLASSES {
            return Err(Error::Config(format!("data.num_classes must be in 1..={MAX_CLASSES}")));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 || self.chars_per_plate == 0 {
            return Err(Error::Config("data.* sample counts must be positive".into()));
        }
        self.augment.validate()
    }

    /// Seed of a named split, independent of the other splits.
    pub fn split_seed(seed: u64, split: &str) -> u64 {
        seed ^ label_hash(split).rotate_left(17)
    }

    /// Training data is augmented; validation and plates are rendered
    /// with glyph jitter only.
    pub fn build(&self, size: usize, seed: u64) -> Result<Splits> {
        self.validate()?;
        let plain = AugmentConfig::disabled();
        Ok(Splits {
            train: self.build_train(size, seed)?,
            val: build_dataset(self.num_classes, self.val_per_class, size, Self::split_seed(seed, "val"), &plain)?,
            plates: self.build_plates(size, seed)?,
        })
    }

    pub fn build_train(&self, size: usize, seed: u64) -> Result<Vec<Sample>> {
        build_dataset(self.num_classes, self.train_per_class, size, Self::split_seed(seed, "train"), &self.augment)
    }

    pub fn build_plates(&self, size: usize, seed: u64) -> Result<Vec<PlateSequence>> {
        let plain = AugmentConfig::disabled();
        build_plate_set(
            self.plates,
            self.chars_per_plate,
            self.num_classes,
            size,
            Self::split_seed(seed, "plates"),
            &plain,
        )
    }

    pub fn to_kv(&self, out: &mut KvMap) {
        out.set("data.num_classes", self.num_classes);
        out.set("data.train_per_class", self.train_per_class);
        out.set("data.val_per_class", self.val_per_class);
        out.set("data.plates", self.plates);
        out.set("data.chars_per_plate", self.chars_per_plate);
        self.augment.to_kv(out);
    }

    pub fn apply_kv(&mut self, map: &mut KvMap) -> Result<()> {
        if let Some(v) = map.take("data.num_classes")? {
            self.num_classes = v;
        }
        if let Some(v) = map.take("data.train_per_class")? {
            self.train_per_class = v;
        }
        if let Some(v) = map.take("data.val_per_class")? {
            self.val_per_class = v;
        }
        if let Some(v) = map.take("data.plates")? {
            self.plates = v;
        }
        if let Some(v) = map.take("data.chars_per_plate")? {
            self.chars_per_plate = v;
        }
        self.augment.apply_kv(map)?;
        self.validate()
    }
}
