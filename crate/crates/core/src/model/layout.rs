//! Parameter layout of a configured network and its static cost report.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::config::ModelConfig;

/// Index of a parameter tensor in the model's parameter list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// uniform in `±1/sqrt(fan_in)`
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Whether the optimizer applies weight decay.
    pub decay: bool,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub proj: Option<Conv>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ChannelAttention {
    pub mlp1: Affine,
    pub mlp2: Affine,
    pub gate_scale: ParamId,
    pub gate_shift: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EdgeAttention {
    pub conv_e: Conv,
    pub conv_s: Conv,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ContextEncoding {
    pub conv1: Conv,
    pub conv2: Conv,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub specs: Vec<ParamSpec>,
    pub stem: Conv,
    pub stages: Vec<Vec<ResBlock>>,
    pub channel: Option<ChannelAttention>,
    pub edge: Option<EdgeAttention>,
    pub dce: Option<ContextEncoding>,
    pub fusion: Option<Conv>,
    pub head: Affine,
    pub report: ParamReport,
}

/// One weight-bearing layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub name: String,
    /// Shape of the layer's main weight tensor.
    pub shape: Vec<usize>,
    pub params: usize,
    /// Multiply-accumulates for one sample at the configured input size.
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamReport {
    pub layers: Vec<LayerReport>,
    pub total_params: usize,
    pub total_macs: u64,
}

struct Builder {
    specs: Vec<ParamSpec>,
    report: ParamReport,
}

impl Builder {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init, decay: bool) -> ParamId {
        self.specs.push(ParamSpec { name, shape, init, decay });
        ParamId(self.specs.len() - 1)
    }

    fn record(&mut self, name: &str, shape: Vec<usize>, params: usize, macs: u64) {
        self.report.total_params += params;
        self.report.total_macs += macs;
        self.report.layers.push(LayerReport { name: name.into(), shape, params, macs });
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        cout: usize,
        cin: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        out_hw: usize,
    ) -> Conv {
        let shape = vec![cout, cin, k, k];
        let weight = self.param(format!("{name}.weight"), shape.clone(), Init::FanIn(cin * k * k), true);
        let bias = bias.then(|| self.param(format!("{name}.bias"), vec![cout], Init::Zeros, false));
        let count = cout * cin * k * k + if bias.is_some() { cout } else { 0 };
        self.record(name, shape, count, (out_hw * cout * cin * k * k) as u64);
        Conv { weight, bias, stride, padding }
    }

    fn affine(&mut self, name: &str, n: usize, d: usize) -> Affine {
        let weight = self.param(format!("{name}.weight"), vec![n, d], Init::FanIn(d), true);
        let bias = self.param(format!("{name}.bias"), vec![n], Init::Zeros, false);
        self.record(name, vec![n, d], n * d + n, (n * d) as u64);
        Affine { weight, bias }
    }
}

impl Layout {
    /// `config` must already be validated.
    pub fn new(config: &ModelConfig) -> Self {
        let mut b = Builder { specs: Vec::new(), report: ParamReport::default() };
        let size = config.input_size;
        let flags = config.variants;

        let stem = b.conv("stem", config.stem_channels, config.input_channels, 3, 1, 1, true, size * size);
        let sizes = config.stage_sizes(size);
        let mut cin = config.stem_channels;
        let mut stages = Vec::new();
        for (s, (&c, &stride)) in config.stage_channels.iter().zip(&config.stage_strides).enumerate() {
            let hw = sizes[s] * sizes[s];
            let mut blocks = Vec::new();
            for i in 0..config.blocks_per_stage {
                let (bin, bstride) = if i == 0 { (cin, stride) } else { (c, 1) };
                let name = format!("stage{s}.block{i}");
                let conv1 = b.conv(&format!("{name}.conv1"), c, bin, 3, bstride, 1, true, hw);
                let conv2 = b.conv(&format!("{name}.conv2"), c, c, 3, 1, 1, true, hw);
                let proj = (bin != c || bstride != 1)
                    .then(|| b.conv(&format!("{name}.proj"), c, bin, 1, bstride, 0, true, hw));
                blocks.push(ResBlock { conv1, conv2, proj });
            }
            stages.push(blocks);
            cin = c;
        }

        let c = config.feature_channels();
        let fs = *sizes.last().expect("validated config has stages");
        let fhw = fs * fs;
        let channel = flags.use_channel_attention.then(|| {
            let hid = config.mlp_hidden();
            let mlp1 = b.affine("chan.mlp1", hid, c);
            let mlp2 = b.affine("chan.mlp2", c, hid);
            let gate_scale = b.param("chan.gate.scale".into(), vec![c], Init::Ones, true);
            let gate_shift = b.param("chan.gate.shift".into(), vec![c], Init::Zeros, false);
            b.record("chan.gate", vec![c], 2 * c, c as u64);
            ChannelAttention { mlp1, mlp2, gate_scale, gate_shift }
        });
        let edge = flags.use_edge_attention.then(|| {
            let hid = config.edge_hidden();
            let conv_e = b.conv("edge.conv_e", hid, c, 3, 1, 1, true, fhw);
            let conv_s = b.conv("edge.conv_s", 1, hid, 3, 1, 1, false, fhw);
            EdgeAttention { conv_e, conv_s }
        });
        let dce = flags.use_dce.then(|| {
            let d = config.dce_hidden();
            let conv1 = b.conv("dce.conv1", d, c, 1, 1, 0, true, fhw);
            let conv2 = b.conv("dce.conv2", c, d, 1, 1, 0, true, fhw);
            ContextEncoding { conv1, conv2 }
        });
        let fusion = flags.use_fusion.then(|| {
            let skip_c = config.stage_channels[config.skip_source];
            b.conv("fusion", c, skip_c + c, 1, 1, 0, true, fhw)
        });
        let head = b.affine("head", config.num_classes, c);

        let Builder { specs, report } = b;
        Layout { specs, stem, stages, channel, edge, dce, fusion, head, report }
    }
}
