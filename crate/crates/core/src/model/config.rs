use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kv::{join, KvMap};

/// Which optional stages are present. All false is the plain residual
/// backbone with a classification head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariantFlags {
    pub use_channel_attention: bool,
    pub use_edge_attention: bool,
    pub use_dce: bool,
    pub use_fusion: bool,
}

impl VariantFlags {
    pub const FULL: Self =
        Self { use_channel_attention: true, use_edge_attention: true, use_dce: true, use_fusion: true };
    pub const BASELINE: Self =
        Self { use_channel_attention: false, use_edge_attention: false, use_dce: false, use_fusion: false };

    pub fn any_attention(&self) -> bool {
        self.use_channel_attention || self.use_edge_attention
    }

    /// Compact `c/e/d/f` rendering, `-` for a disabled flag.
    pub fn code(&self) -> String {
        let bit = |on: bool, c: char| if on { c } else { '-' };
        [
            bit(self.use_channel_attention, 'c'),
            bit(self.use_edge_attention, 'e'),
            bit(self.use_dce, 'd'),
            bit(self.use_fusion, 'f'),
        ]
        .iter()
        .collect()
    }
}

impl Default for VariantFlags {
    fn default() -> Self {
        Self::FULL
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub stage_strides: Vec<usize>,
    /// Channel-attention MLP hidden width is `C / reduction_ratio`.
    pub reduction_ratio: usize,
    /// Hidden width of the edge-attention branch; `None` means `C / reduction_ratio`.
    pub edge_hidden_channels: Option<usize>,
    /// Width of the first context-encoding transform; `None` means `C`.
    pub dce_channels: Option<usize>,
    /// Zero-based index of the backbone stage whose output is fused back in.
    pub skip_source: usize,
    pub num_classes: usize,
    pub leaky_slope: f64,
    pub variants: VariantFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            input_channels: 3,
            stem_channels: 32,
            stage_channels: vec![32, 64, 128],
            blocks_per_stage: 2,
            stage_strides: vec![1, 2, 2],
            reduction_ratio: 8,
            edge_hidden_channels: None,
            dce_channels: None,
            skip_source: 1,
            num_classes: 10,
            leaky_slope: 0.01,
            variants: VariantFlags::FULL,
        }
    }
}

fn cfg_err(msg: String) -> Error {
    Error::Config(msg)
}

impl ModelConfig {
    /// 16 px input, stages `[8, 16, 32]`, four classes: small enough for
    /// exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self { input_size: 16, stem_channels: 8, stage_channels: vec![8, 16, 32], num_classes: 4, ..Self::default() }
    }

    pub fn with_variants(mut self, variants: VariantFlags) -> Self {
        self.variants = variants;
        self
    }

    /// Channel count `C` of the backbone output.
    pub fn feature_channels(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&self.stem_channels)
    }

    pub fn mlp_hidden(&self) -> usize {
        self.feature_channels() / self.reduction_ratio
    }

    pub fn edge_hidden(&self) -> usize {
        self.edge_hidden_channels.unwrap_or_else(|| self.mlp_hidden())
    }

    pub fn dce_hidden(&self) -> usize {
        self.dce_channels.unwrap_or_else(|| self.feature_channels())
    }

    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product()
    }

    /// Spatial extent after each stage for a square input of `size`.
    pub fn stage_sizes(&self, size: usize) -> Vec<usize> {
        let mut s = size;
        self.stage_strides
            .iter()
            .map(|&st| {
                s = (s - 1) / st + 1;
                s
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if n == 0 {
            return Err(cfg_err("stage_channels must not be empty".into()));
        }
        if self.stage_strides.len() != n {
            return Err(cfg_err(format!("{} stage strides for {n} stages", self.stage_strides.len())));
        }
        let positive = [
            ("input_size", self.input_size),
            ("input_channels", self.input_channels),
            ("stem_channels", self.stem_channels),
            ("blocks_per_stage", self.blocks_per_stage),
            ("reduction_ratio", self.reduction_ratio),
            ("num_classes", self.num_classes),
            ("edge_hidden_channels", self.edge_hidden()),
            ("dce_channels", self.dce_hidden()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(cfg_err(format!("{name} must be positive")));
            }
        }
        if self.stage_channels.iter().chain(&self.stage_strides).any(|&v| v == 0) {
            return Err(cfg_err("stage channels and strides must be positive".into()));
        }
        if !self.feature_channels().is_multiple_of(self.reduction_ratio) {
            return Err(cfg_err(format!(
                "reduction_ratio {} does not divide final channel count {}",
                self.reduction_ratio,
                self.feature_channels()
            )));
        }
        if self.skip_source >= n {
            return Err(cfg_err(format!("skip_source {} >= number of stages {n}", self.skip_source)));
        }
        if !(self.leaky_slope.is_finite()) {
            return Err(cfg_err("leaky_slope must be finite".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self, out: &mut KvMap) {
        let opt = |v: Option<usize>| v.map_or_else(|| String::from("auto"), |x| format!("{x}"));
        out.set("model.input_size", self.input_size);
        out.set("model.input_channels", self.input_channels);
        out.set("model.stem_channels", self.stem_channels);
        out.set("model.stage_channels", join(&self.stage_channels));
        out.set("model.blocks_per_stage", self.blocks_per_stage);
        out.set("model.stage_strides", join(&self.stage_strides));
        out.set("model.reduction_ratio", self.reduction_ratio);
        out.set("model.edge_hidden_channels", opt(self.edge_hidden_channels));
        out.set("model.dce_channels", opt(self.dce_channels));
        out.set("model.skip_source", self.skip_source);
        out.set("model.num_classes", self.num_classes);
        out.set("model.leaky_slope", self.leaky_slope);
        out.set("model.use_channel_attention", self.variants.use_channel_attention);
        out.set("model.use_edge_attention", self.variants.use_edge_attention);
        out.set("model.use_dce", self.variants.use_dce);
        out.set("model.use_fusion", self.variants.use_fusion);
    }

    /// Overrides the fields of `self` that are present in `map`, consuming them.
    pub fn apply_kv(&mut self, map: &mut KvMap) -> Result<()> {
        fn opt(map: &mut KvMap, key: &str, slot: &mut Option<usize>) -> Result<()> {
            if let Some(v) = map.take::<String>(key)? {
                *slot = if v == "auto" {
                    None
                } else {
                    Some(v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))?)
                };
            }
            Ok(())
        }
        macro_rules! field {
            ($key:literal, $slot:expr) => {
                if let Some(v) = map.take($key)? {
                    $slot = v;
                }
            };
        }
        field!("model.input_size", self.input_size);
        field!("model.input_channels", self.input_channels);
        field!("model.stem_channels", self.stem_channels);
        if let Some(v) = map.take_list("model.stage_channels")? {
            self.stage_channels = v;
        }
        field!("model.blocks_per_stage", self.blocks_per_stage);
        if let Some(v) = map.take_list("model.stage_strides")? {
            self.stage_strides = v;
        }
        field!("model.reduction_ratio", self.reduction_ratio);
        opt(map, "model.edge_hidden_channels", &mut self.edge_hidden_channels)?;
        opt(map, "model.dce_channels", &mut self.dce_channels)?;
        field!("model.skip_source", self.skip_source);
        field!("model.num_classes", self.num_classes);
        field!("model.leaky_slope", self.leaky_slope);
        field!("model.use_channel_attention", self.variants.use_channel_attention);
        field!("model.use_edge_attention", self.variants.use_edge_attention);
        field!("model.use_dce", self.variants.use_dce);
        field!("model.use_fusion", self.variants.use_fusion);
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = KvMap::parse(text)?;
        let mut cfg = Self::default();
        cfg.apply_kv(&mut map)?;
        map.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut map = KvMap::new();
        self.to_kv(&mut map);
        map.render()
    }
}
