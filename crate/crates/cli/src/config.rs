//! The merged run configuration: built-in defaults, then a `key = value`
//! file, then command-line flags.

use std::path::Path;

use anyhow::{Context, Result};
use sdanet_core::data::DataConfig;
use sdanet_core::eval::variant_flags;
use sdanet_core::kv::KvMap;
use sdanet_core::model::ModelConfig;
use sdanet_core::train::{Preset, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_preset(Preset::Desk)
    }
}

/// Values given on the command line; `None` means not given.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub preset: Option<Preset>,
    pub variant: Option<String>,
}

impl RunConfig {
    pub fn for_preset(preset: Preset) -> Self {
        let seed = 0;
        Self {
            preset,
            seed,
            model: ModelConfig::default(),
            train: TrainConfig { seed, ..TrainConfig::preset(preset) },
            data: DataConfig::default(),
        }
    }

    /// Builds the configuration from optional file text and overrides.
    /// The preset picks the training defaults, so it is resolved first.
    pub fn resolve(text: Option<&str>, flags: &Overrides) -> Result<Self> {
        let mut map = match text {
            Some(t) => KvMap::parse(t)?,
            None => KvMap::new(),
        };
        let file_preset = map.take::<String>("preset")?.map(|p| Preset::parse(&p)).transpose()?;
        let preset = flags.preset.or(file_preset).unwrap_or(Preset::Desk);
        let mut cfg = Self::for_preset(preset);
        if let Some(seed) = map.take("seed")? {
            cfg.seed = seed;
        }
        let file_variant = map.take::<String>("variant")?;
        cfg.model.apply_kv(&mut map)?;
        cfg.train.apply_kv(&mut map)?;
        cfg.data.apply_kv(&mut map)?;
        map.finish()?;

        if let Some(seed) = flags.seed {
            cfg.seed = seed;
        }
        cfg.train.seed = cfg.seed;
        if let Some(v) = flags.variant.as_deref().or(file_variant.as_deref()) {
            cfg.model.variants = variant_flags(v)?;
        }
        cfg.model.num_classes = cfg.data.num_classes;
        cfg.model.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; the literal `default` means no file.
    pub fn load(path: Option<&Path>, flags: &Overrides) -> Result<Self> {
        match path {
            None => Self::resolve(None, flags),
            Some(p) if p == Path::new("default") => Self::resolve(None, flags),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::resolve(Some(&text), flags).with_context(|| format!("in config {}", p.display()))
            }
        }
    }

    pub fn to_text(&self) -> String {
        let mut map = KvMap::new();
        map.set("preset", self.preset.name());
        map.set("seed", self.seed);
        self.model.to_kv(&mut map);
        self.train.to_kv(&mut map);
        self.data.to_kv(&mut map);
        map.render()
    }

    pub fn image_size(&self) -> usize {
        self.model.input_size
    }
}
