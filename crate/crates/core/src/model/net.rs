use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use super::config::ModelConfig;
use super::layout::{Affine, Conv, Init, Layout, ParamId, ParamReport, ParamSpec};
use crate::error::{shape_err, Error, Result};
use crate::kernel::{Graph, PoolKind, Scalar, Tensor, Var};
use crate::rng::Rng;

/// Named parameter tensors in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
    pub decay: Vec<bool>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Graph handles for every parameter of one model, in layout order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn at(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Every intermediate activation of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardTrace {
    /// backbone output `[B,C,H',W']`
    pub f: Var,
    /// output of the skip-source stage
    pub f_skip: Var,
    /// channel gate `[B,C,1,1]`, absent when that branch is disabled
    pub a_chan: Option<Var>,
    /// edge map `[B,1,H',W']`, absent when that branch is disabled
    pub a_spat: Option<Var>,
    pub f_dual: Var,
    /// zeros when context encoding is disabled
    pub z_tilde: Var,
    /// ones when context encoding is disabled
    pub gate: Var,
    pub f_encoded: Var,
    pub f_fused: Var,
    /// raw class scores `[B,N]`
    pub logits: Var,
}

/// The SDA-Net classifier: residual backbone, dual attention, gated context
/// encoding, skip fusion and a linear head.
#[derive(Clone, Debug)]
pub struct SdaNet<T> {
    config: ModelConfig,
    layout: Layout,
    params: ParamStore<T>,
}

fn missing(stage: &str) -> Error {
    Error::Contract(format!("{stage} is disabled in this model's variant flags"))
}

impl<T: Scalar> SdaNet<T> {
    /// Builds a model with seeded initialization. Each tensor draws from a
    /// substream keyed by its name, so variants share the tensors they have
    /// in common.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let root = Rng::new(seed);
        let tensors = layout
            .specs
            .iter()
            .map(|s| match s.init {
                Init::FanIn(fan) => Tensor::uniform(&s.shape, 1.0 / (fan as f64).sqrt(), &mut root.split_str(&s.name)),
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::ones(&s.shape),
            })
            .collect();
        let params = ParamStore {
            names: layout.specs.iter().map(|s| s.name.clone()).collect(),
            decay: layout.specs.iter().map(|s| s.decay).collect(),
            tensors,
        };
        Ok(Self { config, layout, params })
    }

    /// Adopts externally supplied tensors, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_params(config: ModelConfig, names: &[String], tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if names.len() != layout.specs.len() || tensors.len() != layout.specs.len() {
            return Err(Error::Compat(format!(
                "config expects {} parameter tensors, got {}",
                layout.specs.len(),
                tensors.len()
            )));
        }
        for ((spec, name), t) in layout.specs.iter().zip(names).zip(&tensors) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(Error::Compat(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        let params =
            ParamStore { names: names.to_vec(), decay: layout.specs.iter().map(|s| s.decay).collect(), tensors };
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.layout.specs
    }

    pub fn report(&self) -> &ParamReport {
        &self.layout.report
    }

    /// Records every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound { vars: self.params.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect() }
    }

    /// Binds caller-provided leaves (in layout order) instead of the stored tensors.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.params.len() {
            return Err(shape_err("bind", format!("{} vars for {} parameters", vars.len(), self.params.len())));
        }
        Ok(Bound { vars: vars.to_vec() })
    }

    fn conv(&self, g: &mut Graph<T>, p: &Bound, c: &Conv, x: Var) -> Result<Var> {
        g.conv2d(x, p.at(c.weight), c.bias.map(|b| p.at(b)), c.stride, c.padding)
    }

    fn affine(&self, g: &mut Graph<T>, p: &Bound, a: &Affine, x: Var) -> Result<Var> {
        g.linear(x, p.at(a.weight), Some(p.at(a.bias)))
    }

    /// Residual backbone. Returns the final features `F` and the output of
    /// the configured skip-source stage.
    pub fn backbone_forward(&self, g: &mut Graph<T>, p: &Bound, input: Var) -> Result<(Var, Var)> {
        const OP: &str = "backbone_forward";
        let shape = g.shape(input);
        let [_, c, h, w] = *shape else {
            return Err(shape_err(OP, format!("input must be [B,C,H,W], got {shape:?}")));
        };
        if c != self.config.input_channels {
            return Err(shape_err(OP, format!("input has {c} channels, expected {}", self.config.input_channels)));
        }
        let min = self.config.total_stride().max(8);
        if h < min || w < min {
            return Err(crate::error::arg_err(OP, format!("input {h}x{w} smaller than {min}x{min}")));
        }
        let x = self.conv(g, p, &self.layout.stem, input)?;
        let mut x = g.relu(x);
        let mut skip = None;
        for (s, blocks) in self.layout.stages.iter().enumerate() {
            for blk in blocks {
                let y = self.conv(g, p, &blk.conv1, x)?;
                let y = g.relu(y);
                let y = self.conv(g, p, &blk.conv2, y)?;
                let short = match &blk.proj {
                    Some(pr) => self.conv(g, p, pr, x)?,
                    None => x,
                };
                let y = g.add(y, short)?;
                x = g.relu(y);
            }
            if s == self.config.skip_source {
                skip = Some(x);
            }
        }
        Ok((x, skip.expect("validated skip_source")))
    }

    /// `A_chan = σ(W_c(MLP(avg F) + MLP(max F)))`, `F_chan = F ⊙ A_chan`.
    pub fn channel_attention(&self, g: &mut Graph<T>, p: &Bound, f: Var) -> Result<(Var, Var)> {
        let ca = self.layout.channel.as_ref().ok_or_else(|| missing("channel attention"))?;
        let [b, c, _, _] = *g.shape(f) else {
            return Err(shape_err("channel_attention", "features must be rank 4"));
        };
        let branch = |g: &mut Graph<T>, kind: PoolKind| -> Result<Var> {
            let pooled = g.global_pool(f, kind)?;
            let flat = g.reshape(pooled, &[b, c])?;
            let h = self.affine(g, p, &ca.mlp1, flat)?;
            let h = g.relu(h);
            self.affine(g, p, &ca.mlp2, h)
        };
        let avg = branch(g, PoolKind::Avg)?;
        let max = branch(g, PoolKind::Max)?;
        let sum = g.add(avg, max)?;
        let pre = g.channel_affine(sum, p.at(ca.gate_scale), p.at(ca.gate_shift))?;
        let gate = g.sigmoid(pre);
        let a_chan = g.reshape(gate, &[b, c, 1, 1])?;
        let f_chan = g.mul(f, a_chan)?;
        Ok((f_chan, a_chan))
    }

    /// `A_spat = σ(W_s * ReLU(W_e * F + b_e))`, `F_spat = F ⊙ A_spat`.
    pub fn edge_attention(&self, g: &mut Graph<T>, p: &Bound, f: Var) -> Result<(Var, Var)> {
        let ea = self.layout.edge.as_ref().ok_or_else(|| missing("edge attention"))?;
        let e = self.conv(g, p, &ea.conv_e, f)?;
        let e = g.relu(e);
        let s = self.conv(g, p, &ea.conv_s, e)?;
        let a_spat = g.sigmoid(s);
        let f_spat = g.mul(f, a_spat)?;
        Ok((f_spat, a_spat))
    }

    /// Sum of the enabled attention branches; `F` itself when both are off.
    pub fn dual_attention(&self, g: &mut Graph<T>, p: &Bound, f: Var) -> Result<(Var, Option<Var>, Option<Var>)> {
        let chan = match self.layout.channel {
            Some(_) => Some(self.channel_attention(g, p, f)?),
            None => None,
        };
        let spat = match self.layout.edge {
            Some(_) => Some(self.edge_attention(g, p, f)?),
            None => None,
        };
        let f_dual = match (chan, spat) {
            (Some((fc, _)), Some((fs, _))) => g.add(fc, fs)?,
            (Some((fc, _)), None) => fc,
            (None, Some((fs, _))) => fs,
            (None, None) => f,
        };
        Ok((f_dual, chan.map(|c| c.1), spat.map(|s| s.1)))
    }

    /// Returns `(F_encoded, Z̃, G)` with `F_encoded = (F_dual + Z̃) ⊙ σ(Z̃)`.
    pub fn dynamic_context_encoding(&self, g: &mut Graph<T>, p: &Bound, f_dual: Var) -> Result<(Var, Var, Var)> {
        let Some(dce) = self.layout.dce.as_ref() else {
            let shape = g.shape(f_dual).to_vec();
            let z = g.constant(Tensor::zeros(&shape));
            let one = g.constant(Tensor::ones(&shape));
            return Ok((f_dual, z, one));
        };
        let z = self.conv(g, p, &dce.conv1, f_dual)?;
        let z = g.leaky_relu(z, self.config.leaky_slope);
        let z_tilde = self.conv(g, p, &dce.conv2, z)?;
        let gate = g.sigmoid(z_tilde);
        let sum = g.add(f_dual, z_tilde)?;
        let f_encoded = g.mul(sum, gate)?;
        Ok((f_encoded, z_tilde, gate))
    }

    /// `W_fusion * concat(resize(F_skip), F_encoded) + F_encoded`.
    pub fn feature_fusion(&self, g: &mut Graph<T>, p: &Bound, f_skip: Var, f_encoded: Var) -> Result<Var> {
        let Some(fusion) = self.layout.fusion.as_ref() else {
            return Ok(f_encoded);
        };
        let [_, _, h, w] = *g.shape(f_encoded) else {
            return Err(shape_err("feature_fusion", "features must be rank 4"));
        };
        let resized = g.interpolate_bilinear(f_skip, h, w)?;
        let cat = g.concat(&[resized, f_encoded], 1)?;
        let expected = g.value(p.at(fusion.weight)).shape()[1];
        if g.shape(cat)[1] != expected {
            return Err(crate::error::arg_err(
                "feature_fusion",
                format!("concatenated channels {} != fusion input channels {expected}", g.shape(cat)[1]),
            ));
        }
        let proj = self.conv(g, p, fusion, cat)?;
        g.add(proj, f_encoded)
    }

    /// Global average pool, flatten, affine head.
    pub fn predict(&self, g: &mut Graph<T>, p: &Bound, f_fused: Var) -> Result<Var> {
        let pooled = g.global_pool(f_fused, PoolKind::Avg)?;
        let [b, c, _, _] = *g.shape(pooled) else { unreachable!() };
        let flat = g.reshape(pooled, &[b, c])?;
        self.affine(g, p, &self.layout.head, flat)
    }

    /// The composed pipeline.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, input: Var) -> Result<ForwardTrace> {
        let size = self.config.input_size;
        let shape = g.shape(input);
        if shape.len() != 4 || shape[2] != size || shape[3] != size {
            return Err(shape_err("forward", format!("input {shape:?} does not match configured size {size}")));
        }
        let (f, f_skip) = self.backbone_forward(g, p, input)?;
        let (f_dual, a_chan, a_spat) = self.dual_attention(g, p, f)?;
        let (f_encoded, z_tilde, gate) = self.dynamic_context_encoding(g, p, f_dual)?;
        let f_fused = self.feature_fusion(g, p, f_skip, f_encoded)?;
        let logits = self.predict(g, p, f_fused)?;
        Ok(ForwardTrace { f, f_skip, a_chan, a_spat, f_dual, z_tilde, gate, f_encoded, f_fused, logits })
    }

    /// Inference-only logits for a `[B,3,H,W]` batch.
    pub fn logits(&self, images: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(images);
        let trace = self.forward(&mut g, &p, x)?;
        Ok(g.value(trace.logits).clone())
    }
}

/// Closed-form per-layer parameter and multiply-accumulate counts.
pub fn count_parameters(config: &ModelConfig) -> Result<ParamReport> {
    config.validate()?;
    Ok(Layout::new(config).report)
}
