//! The four photometric/geometric training augmentations. Images are
//! `[3,H,W]` with values in `[0,1]`; every operation clamps its output.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{arg_err, Error, Result};
use crate::kernel::Tensor;
use crate::kv::KvMap;
use crate::rng::Rng;

pub const MAX_ROTATION_DEG: f64 = 5.0;
pub const BRIGHTNESS_RANGE: (f64, f64) = (0.9, 1.1);
pub const CONTRAST_RANGE: (f64, f64) = (0.8, 1.2);
pub const MAX_BLUR_SIGMA: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augment {
    Rotate,
    Brightness,
    Blur,
    Contrast,
}

impl Augment {
    pub fn name(self) -> &'static str {
        match self {
            Augment::Rotate => "rotate",
            Augment::Brightness => "brightness",
            Augment::Blur => "blur",
            Augment::Contrast => "contrast",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "rotate" => Augment::Rotate,
            "brightness" => Augment::Brightness,
            "blur" => Augment::Blur,
            "contrast" => Augment::Contrast,
            _ => return Err(Error::Config(format!("unknown augmentation {s:?}"))),
        })
    }
}

fn planes(image: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(arg_err("augment", format!("expected [C,H,W], got {:?}", image.shape()))),
    }
}

fn check_range(op: &'static str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if v >= lo && v <= hi {
        Ok(())
    } else {
        Err(arg_err(op, format!("{v} outside [{lo}, {hi}]")))
    }
}

/// Rotation about the image centre with bilinear resampling; samples that
/// fall outside the image take the nearest border value.
pub fn rotate(image: &Tensor<f32>, angle_deg: f64) -> Result<Tensor<f32>> {
    check_range("augment_rotate", angle_deg, -MAX_ROTATION_DEG, MAX_ROTATION_DEG)?;
    let (c, h, w) = planes(image)?;
    if angle_deg == 0.0 {
        return Ok(image.clone());
    }
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let src = image.data();
    let mut out = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            // inverse map: rotate the output position back by -angle
            let sx = (cos * dx + sin * dy + cx - 0.5).clamp(0.0, (w - 1) as f64);
            let sy = (-sin * dx + cos * dy + cy - 0.5).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                let p = &src[ch * h * w..(ch + 1) * h * w];
                let at = |yy: usize, xx: usize| p[yy * w + xx] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[ch * h * w + y * w + x] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::new(image.shape(), out)
}

pub fn brightness(image: &Tensor<f32>, factor: f64) -> Result<Tensor<f32>> {
    check_range("augment_brightness", factor, BRIGHTNESS_RANGE.0, BRIGHTNESS_RANGE.1)?;
    planes(image)?;
    let data = image.data().iter().map(|&v| (v as f64 * factor).clamp(0.0, 1.0) as f32).collect();
    Tensor::new(image.shape(), data)
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma <= MAX_BLUR_SIGMA) {
        return Err(arg_err("augment_blur", format!("sigma {sigma} outside (0, {MAX_BLUR_SIGMA}]")));
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    Ok(k)
}

/// Separable Gaussian blur with edge-replicate padding.
pub fn blur(image: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    let k = gaussian_kernel(sigma)?;
    let (c, h, w) = planes(image)?;
    let r = (k.len() / 2) as isize;
    let src = image.data();
    let mut tmp = vec![0f64; src.len()];
    let mut out = vec![0f32; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * src[base + y * w + xx] as f64;
                }
                tmp[base + y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[base + yy * w + x];
                }
                out[base + y * w + x] = acc.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::new(image.shape(), out)
}

/// `mean + factor·(x − mean)` about the whole-image mean, then clamped.
/// Any non-negative factor is accepted here; the sampled augmentation
/// restricts it to the contrast range.
pub fn adjust_contrast(image: &Tensor<f32>, factor: f64) -> Result<Tensor<f32>> {
    if !(factor >= 0.0) {
        return Err(arg_err("augment_contrast", format!("factor {factor} must be non-negative")));
    }
    planes(image)?;
    let n = image.numel() as f64;
    let mean = image.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let data = image.data().iter().map(|&v| (mean + factor * (v as f64 - mean)).clamp(0.0, 1.0) as f32).collect();
    Tensor::new(image.shape(), data)
}

pub fn contrast(image: &Tensor<f32>, factor: f64) -> Result<Tensor<f32>> {
    check_range("augment_contrast", factor, CONTRAST_RANGE.0, CONTRAST_RANGE.1)?;
    adjust_contrast(image, factor)
}

/// Sampling ranges and order of the augmentation chain.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub order: Vec<Augment>,
    pub max_rotation_deg: f64,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub blur_sigma: (f64, f64),
    /// Blur is applied to this fraction of samples.
    pub blur_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            order: vec![Augment::Rotate, Augment::Brightness, Augment::Blur, Augment::Contrast],
            max_rotation_deg: MAX_ROTATION_DEG,
            brightness: BRIGHTNESS_RANGE,
            contrast: CONTRAST_RANGE,
            blur_sigma: (0.3, 1.0),
            blur_probability: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("augment.{what} out of range")));
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg <= MAX_ROTATION_DEG) {
            return bad("max_rotation");
        }
        let within = |(lo, hi): (f64, f64), (a, b): (f64, f64)| lo <= hi && lo >= a && hi <= b;
        if !within(self.brightness, BRIGHTNESS_RANGE) {
            return bad("brightness");
        }
        if !within(self.contrast, CONTRAST_RANGE) {
            return bad("contrast");
        }
        if !(self.blur_sigma.0 > 0.0 && within(self.blur_sigma, (0.0, MAX_BLUR_SIGMA))) {
            return bad("blur_sigma");
        }
        if !(0.0..=1.0).contains(&self.blur_probability) {
            return bad("blur_probability");
        }
        Ok(())
    }

    /// Applies the chain in `order`, drawing every parameter from `rng`.
    pub fn apply(&self, image: &Tensor<f32>, rng: &mut Rng) -> Result<Tensor<f32>> {
        let mut img = image.clone();
        if !self.enabled {
            return Ok(img);
        }
        for aug in &self.order {
            img = match aug {
                Augment::Rotate => {
                    let m = self.max_rotation_deg;
                    rotate(&img, rng.uniform_range(-m, m))?
                }
                Augment::Brightness => brightness(&img, rng.uniform_range(self.brightness.0, self.brightness.1))?,
                Augment::Blur => {
                    let sigma = rng.uniform_range(self.blur_sigma.0, self.blur_sigma.1);
                    if rng.bernoulli(self.blur_probability) {
                        blur(&img, sigma)?
                    } else {
                        img
                    }
                }
                Augment::Contrast => contrast(&img, rng.uniform_range(self.contrast.0, self.contrast.1))?,
            };
        }
        Ok(img)
    }

    pub fn to_kv(&self, out: &mut KvMap) {
        out.set("augment.enabled", self.enabled);
        let order: Vec<&str> = self.order.iter().map(|a| a.name()).collect();
        out.set("augment.order", order.join(","));
        out.set("augment.max_rotation", self.max_rotation_deg);
        out.set("augment.brightness", format!("{},{}", self.brightness.0, self.brightness.1));
        out.set("augment.contrast", format!("{},{}", self.contrast.0, self.contrast.1));
        out.set("augment.blur_sigma", format!("{},{}", self.blur_sigma.0, self.blur_sigma.1));
        out.set("augment.blur_probability", self.blur_probability);
    }

    pub fn apply_kv(&mut self, map: &mut KvMap) -> Result<()> {
        let pair = |map: &mut KvMap, key: &str| -> Result<Option<(f64, f64)>> {
            match map.take_list::<f64>(key)? {
                None => Ok(None),
                Some(v) if v.len() == 2 => Ok(Some((v[0], v[1]))),
                Some(_) => Err(Error::Config(format!("{key} expects two comma-separated numbers"))),
            }
        };
        if let Some(v) = map.take("augment.enabled")? {
            self.enabled = v;
        }
        if let Some(v) = map.take_list::<String>("augment.order")? {
            self.order = v.iter().map(|s| Augment::parse(s.trim())).collect::<Result<_>>()?;
        }
        if let Some(v) = map.take("augment.max_rotation")? {
            self.max_rotation_deg = v;
        }
        if let Some(v) = pair(map, "augment.brightness")? {
            self.brightness = v;
        }
        if let Some(v) = pair(map, "augment.contrast")? {
            self.contrast = v;
        }
        if let Some(v) = pair(map, "augment.blur_sigma")? {
            self.blur_sigma = v;
        }
        if let Some(v) = map.take("augment.blur_probability")? {
            self.blur_probability = v;
        }
        self.validate()
    }
}
