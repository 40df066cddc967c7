//! EfficientNet-style feature extractors built from a declarative stage
//! table of MBConv / Fused-MBConv blocks with optional squeeze-and-excitation.
//!
//! Layout of every block (same padding throughout, SiLU activations):
//!
//! * MBConv: `1x1 expand -> BN -> SiLU` (skipped when the expansion is 1),
//!   `kxk depthwise (stride s) -> BN -> SiLU`, SE, `1x1 project -> BN`.
//! * Fused-MBConv: `kxk conv (stride s) -> BN -> SiLU`, SE, `1x1 project ->
//!   BN`. With expansion 1 the single kxk conv maps straight to the output
//!   width and there is no projection.
//!
//! A residual skip is added when the stride is 1 and the block keeps its
//! channel count. The SE bottleneck width is `floor(block_in * se_ratio)`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::config::{self, Entry};
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::layers::{check_positive, BatchNorm, Init, Linear, ParamId, Session};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    MbConv,
    FusedMbConv,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::MbConv => "mbconv",
            BlockKind::FusedMbConv => "fused_mbconv",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub kind: BlockKind,
    pub expansion: f64,
    pub out_channels: usize,
    pub repeats: usize,
    pub stride: usize,
    pub kernel: usize,
    pub se_ratio: f64,
}

impl StageSpec {
    fn validate(&self, index: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("stage {index}: {m}")));
        if !(self.expansion.is_finite() && self.expansion > 0.0) {
            return bad(format!("expansion {} must be positive", self.expansion));
        }
        if self.out_channels == 0 || self.repeats == 0 {
            return bad("out_channels and repeats must be positive".into());
        }
        if !matches!(self.stride, 1 | 2) {
            return bad(format!("stride {} must be 1 or 2", self.stride));
        }
        if !matches!(self.kernel, 3 | 5) {
            return bad(format!("kernel {} must be 3 or 5", self.kernel));
        }
        if !(0.0..=1.0).contains(&self.se_ratio) {
            return bad(format!("se ratio {} outside [0, 1]", self.se_ratio));
        }
        Ok(())
    }
}

impl FromStr for StageSpec {
    type Err = Error;

    /// `mbconv e=6 c=24 r=2 s=2 k=3 se=0.25`
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let kind = match parts.next() {
            Some("mbconv") => BlockKind::MbConv,
            Some("fused_mbconv") => BlockKind::FusedMbConv,
            other => return Err(Error::Config(format!("unknown block kind {other:?}"))),
        };
        let (mut e, mut c, mut r, mut st, mut k, mut se) = (None, None, None, None, None, None);
        for field in parts {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("stage field `{field}` is not key=value")))?;
            match key {
                "e" => e = Some(config::parse_value::<f64>("e", value)?),
                "c" => c = Some(config::parse_value::<usize>("c", value)?),
                "r" => r = Some(config::parse_value::<usize>("r", value)?),
                "s" => st = Some(config::parse_value::<usize>("s", value)?),
                "k" => k = Some(config::parse_value::<usize>("k", value)?),
                "se" => se = Some(config::parse_value::<f64>("se", value)?),
                _ => return Err(Error::Config(format!("unknown stage field `{key}`"))),
            }
        }
        let need = |v: Option<usize>, name: &str| v.ok_or_else(|| Error::Config(format!("stage missing `{name}=`")));
        Ok(Self {
            kind,
            expansion: e.unwrap_or(1.0),
            out_channels: need(c, "c")?,
            repeats: r.unwrap_or(1),
            stride: st.unwrap_or(1),
            kernel: k.unwrap_or(3),
            se_ratio: se.unwrap_or(0.0),
        })
    }
}

impl fmt::Display for StageSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} e={} c={} r={} s={} k={} se={}",
            self.kind, self.expansion, self.out_channels, self.repeats, self.stride, self.kernel, self.se_ratio
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub name: String,
    pub in_channels: usize,
    pub input_resolution: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    pub head_channels: usize,
}

const MICRO: &str = include_str!("../configs/micro.cfg");
const B0: &str = include_str!("../configs/b0.cfg");
const V2B0: &str = include_str!("../configs/v2b0.cfg");

pub const PRESETS: [&str; 3] = ["micro", "b0", "v2b0"];

impl BackboneConfig {
    pub fn micro() -> Self {
        Self::parse(MICRO).expect("bundled micro config is valid")
    }

    pub fn b0() -> Self {
        Self::parse(B0).expect("bundled b0 config is valid")
    }

    pub fn v2b0() -> Self {
        Self::parse(V2B0).expect("bundled v2b0 config is valid")
    }

    /// A bundled preset by name, or otherwise a config file path.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match name_or_path {
            "micro" => Ok(Self::micro()),
            "b0" => Ok(Self::b0()),
            "v2b0" => Ok(Self::v2b0()),
            path => Self::from_entries(&config::parse_file(Path::new(path))?),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_entries(&config::parse(text)?)
    }

    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        const KEYS: [&str; 6] = ["name", "in_channels", "input_resolution", "stem_channels", "stage", "head_channels"];
        let mut cfg = Self {
            name: "custom".into(),
            in_channels: 3,
            input_resolution: 224,
            stem_channels: 32,
            stages: Vec::new(),
            head_channels: 1280,
        };
        for e in entries {
            let v = e.value.as_str();
            match e.key.as_str() {
                "name" => cfg.name = v.to_string(),
                "in_channels" => cfg.in_channels = config::parse_value(&e.key, v)?,
                "input_resolution" => cfg.input_resolution = config::parse_value(&e.key, v)?,
                "stem_channels" => cfg.stem_channels = config::parse_value(&e.key, v)?,
                "head_channels" => cfg.head_channels = config::parse_value(&e.key, v)?,
                "stage" => cfg.stages.push(
                    v.parse()
                        .map_err(|err| Error::Config(format!("line {}: {err}", e.line)))?,
                ),
                other => return Err(config::unknown_key(other, &KEYS)),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "name = {}\nin_channels = {}\ninput_resolution = {}\nstem_channels = {}\n",
            self.name, self.in_channels, self.input_resolution, self.stem_channels
        );
        for st in &self.stages {
            s.push_str(&format!("stage = {st}\n"));
        }
        s.push_str(&format!("head_channels = {}\n", self.head_channels));
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        check_positive("in_channels", self.in_channels)?;
        check_positive("stem_channels", self.stem_channels)?;
        check_positive("input_resolution", self.input_resolution)?;
        let mut c_in = self.stem_channels;
        for (i, st) in self.stages.iter().enumerate() {
            st.validate(i)?;
            if st.se_ratio > 0.0 {
                for block_in in [c_in, st.out_channels] {
                    if (block_in as f64 * st.se_ratio).floor() < 1.0 {
                        return Err(Error::Config(format!(
                            "stage {i}: se ratio {} leaves no bottleneck channels for width {block_in}",
                            st.se_ratio
                        )));
                    }
                }
            }
            c_in = st.out_channels;
        }
        if self.head_channels < c_in {
            return Err(Error::Config(format!(
                "head_channels {} smaller than last stage width {c_in}",
                self.head_channels
            )));
        }
        if self.input_resolution % self.total_stride() != 0 {
            return Err(Error::Config(format!(
                "input resolution {} not divisible by total stride {}",
                self.input_resolution,
                self.total_stride()
            )));
        }
        Ok(())
    }

    /// Stem stride times every stage stride.
    pub fn total_stride(&self) -> usize {
        2 * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    pub fn feature_resolution(&self) -> usize {
        self.input_resolution / self.total_stride()
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBn {
    pub w: ParamId,
    pub bn: BatchNorm,
    pub stride: usize,
    pub depthwise: bool,
}

impl ConvBn {
    fn new<T: Element>(
        init: &mut Init<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        depthwise: bool,
        zero_gamma: bool,
    ) -> Self {
        let (shape, fan_out) = if depthwise {
            ([c_out, 1, kernel, kernel], kernel * kernel)
        } else {
            ([c_out, c_in, kernel, kernel], c_out * kernel * kernel)
        };
        let w = init.conv(&format!("{name}.conv"), shape, fan_out);
        let bn = init.batchnorm(&format!("{name}.bn"), c_out, zero_gamma);
        Self { w, bn, stride, depthwise }
    }

    fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.bn.gamma, self.bn.beta]
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: NodeId, act: bool) -> Result<NodeId> {
        let y = s.conv(self.w, x, self.stride, self.depthwise)?;
        let y = s.batchnorm(&self.bn, y)?;
        Ok(if act { s.graph.silu(y) } else { y })
    }
}

/// Channel gating: `x * sigmoid(W2 silu(W1 GAP(x) + b1) + b2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SqueezeExcite {
    pub reduce: Linear,
    pub expand: Linear,
}

impl SqueezeExcite {
    pub fn new<T: Element>(init: &mut Init<'_, T>, name: &str, channels: usize, reduced: usize) -> Result<Self> {
        if reduced == 0 {
            return Err(Error::Config(format!("{name}: squeeze width must be at least 1")));
        }
        let reduce = init.linear(&format!("{name}.reduce"), channels, reduced);
        let expand = init.linear(&format!("{name}.expand"), reduced, channels);
        Ok(Self { reduce, expand })
    }

    /// Bottleneck width for `channels * ratio`.
    pub fn reduced_width(channels: usize, ratio: f64) -> usize {
        (channels as f64 * ratio).floor() as usize
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.reduce.params(), self.expand.params()].concat()
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: NodeId) -> Result<NodeId> {
        let pooled = s.graph.global_avg_pool(x)?;
        let h = self.reduce.forward(s, pooled)?;
        let h = s.graph.silu(h);
        let e = self.expand.forward(s, h)?;
        let gate = s.graph.sigmoid(e);
        s.graph.channel_scale(x, gate)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub inner_channels: usize,
    pub stride: usize,
    /// Convolutions followed by SiLU, in order (expand / depthwise or the
    /// fused conv).
    pub activated: Vec<ConvBn>,
    pub se: Option<SqueezeExcite>,
    pub project: Option<ConvBn>,
    pub residual: bool,
}

/// Intermediate activations of one block, for shape tracing.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub activations: Vec<NodeId>,
    pub output: NodeId,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        init: &mut Init<'_, T>,
        name: &str,
        kind: BlockKind,
        c_in: usize,
        c_out: usize,
        expansion: f64,
        kernel: usize,
        stride: usize,
        se_ratio: f64,
        zero_init_residual: bool,
    ) -> Result<Self> {
        let residual = stride == 1 && c_in == c_out;
        let expanded = expansion != 1.0;
        let inner = ((c_in as f64 * expansion).round() as usize).max(1);
        let zero_last = residual && zero_init_residual;
        let mut activated = Vec::new();
        match kind {
            BlockKind::MbConv => {
                if expanded {
                    activated.push(ConvBn::new(init, &format!("{name}.expand"), c_in, inner, 1, 1, false, false));
                }
                activated.push(ConvBn::new(init, &format!("{name}.depthwise"), inner, inner, kernel, stride, true, false));
            }
            BlockKind::FusedMbConv => {
                let width = if expanded { inner } else { c_out };
                let zero = !expanded && zero_last;
                activated.push(ConvBn::new(init, &format!("{name}.fused"), c_in, width, kernel, stride, false, zero));
            }
        }
        let has_project = kind == BlockKind::MbConv || expanded;
        let gated = if has_project { inner } else { c_out };
        let se = if se_ratio > 0.0 {
            let reduced = SqueezeExcite::reduced_width(c_in, se_ratio);
            Some(SqueezeExcite::new(init, &format!("{name}.se"), gated, reduced)?)
        } else {
            None
        };
        let project = has_project
            .then(|| ConvBn::new(init, &format!("{name}.project"), inner, c_out, 1, 1, false, zero_last));
        Ok(Self {
            kind,
            in_channels: c_in,
            out_channels: c_out,
            inner_channels: if has_project { inner } else { c_out },
            stride,
            activated,
            se,
            project,
            residual,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.activated.iter().flat_map(|c| c.params()).collect();
        if let Some(se) = &self.se {
            p.extend(se.params());
        }
        if let Some(pr) = &self.project {
            p.extend(pr.params());
        }
        p
    }

    pub fn forward_traced<T: Element>(&self, s: &mut Session<'_, T>, x: NodeId) -> Result<BlockTrace> {
        let mut h = x;
        let mut activations = Vec::new();
        for conv in &self.activated {
            h = conv.forward(s, h, true)?;
            activations.push(h);
        }
        if let Some(se) = &self.se {
            h = se.forward(s, h)?;
        }
        if let Some(pr) = &self.project {
            h = pr.forward(s, h, false)?;
        }
        if self.residual {
            h = s.graph.add(h, x)?;
        }
        Ok(BlockTrace { activations, output: h })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: NodeId) -> Result<NodeId> {
        Ok(self.forward_traced(s, x)?.output)
    }
}

/// Instantiated backbone: parameter handles into a [`crate::layers::ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: ConvBn,
    pub blocks: Vec<Block>,
    pub head: ConvBn,
}

impl Backbone {
    /// Registers and initialises every backbone parameter under `backbone.*`.
    pub fn build<T: Element>(config: &BackboneConfig, init: &mut Init<'_, T>, zero_init_residual: bool) -> Result<Self> {
        config.validate()?;
        let stem = ConvBn::new(init, "stem", config.in_channels, config.stem_channels, 3, 2, false, false);
        let mut blocks = Vec::new();
        let mut c = config.stem_channels;
        for (si, st) in config.stages.iter().enumerate() {
            for r in 0..st.repeats {
                let stride = if r == 0 { st.stride } else { 1 };
                let name = format!("stage{si}.block{r}");
                blocks.push(Block::new(
                    init,
                    &name,
                    st.kind,
                    c,
                    st.out_channels,
                    st.expansion,
                    st.kernel,
                    stride,
                    st.se_ratio,
                    zero_init_residual,
                )?);
                c = st.out_channels;
            }
        }
        let head = ConvBn::new(init, "head", c, config.head_channels, 1, 1, false, false);
        Ok(Self {
            config: config.clone(),
            stem,
            blocks,
            head,
        })
    }

    /// Parameter groups in network order: stem, each block, head. The
    /// `freeze_prefix` option counts units of this list.
    pub fn units(&self) -> Vec<Vec<ParamId>> {
        let mut u = vec![self.stem.params()];
        u.extend(self.blocks.iter().map(Block::params));
        u.push(self.head.params());
        u
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.units().concat()
    }

    /// Final convolutional feature map `[B, head_channels, H/s, W/s]`,
    /// before any pooling.
    pub fn forward_features<T: Element>(&self, s: &mut Session<'_, T>, x: NodeId) -> Result<NodeId> {
        let shape = s.graph.shape(x).to_vec();
        let [_, c, h, w] = shape[..] else {
            return Err(Error::shape("forward_features", "[B, C, H, W]", format!("{shape:?}")));
        };
        if c != self.config.in_channels {
            return Err(Error::shape(
                "forward_features",
                format!("{} input channels", self.config.in_channels),
                c.to_string(),
            ));
        }
        let stride = self.config.total_stride();
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::invalid(format!(
                "input {h}x{w} not divisible by total stride {stride}"
            )));
        }
        let mut h = self.stem.forward(s, x, true)?;
        for b in &self.blocks {
            h = b.forward(s, h)?;
        }
        self.head.forward(s, h, true)
    }
}
