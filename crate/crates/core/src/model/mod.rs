//! The SDA-Net classifier and its stage-by-stage forward pass.

mod config;
mod layout;
mod net;

pub use config::{ModelConfig, VariantFlags};
pub use layout::{Init, LayerReport, ParamReport, ParamSpec};
pub use net::{count_parameters, Bound, ForwardTrace, ParamStore, SdaNet};
