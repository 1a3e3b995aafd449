//! Declarative block and network descriptions.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Basic,
    Bottleneck,
    InvertedBottleneck,
}

impl Topology {
    /// Ratio of a stage's output channels to `base_channels * widening_factor`.
    pub fn expansion(self) -> usize {
        match self {
            Topology::Bottleneck => 4,
            Topology::Basic | Topology::InvertedBottleneck => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationOrder {
    Post,
    Pre,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Group,
    Instance,
    Layer,
}

/// Default group count for group normalization.
pub const GROUP_NORM_GROUPS: usize = 32;

impl NormKind {
    /// Number of per-sample groups, or `None` for batch statistics.
    pub fn groups(self, channels: usize) -> Option<usize> {
        match self {
            NormKind::Batch => None,
            NormKind::Group => Some(GROUP_NORM_GROUPS.min(channels)),
            NormKind::Instance => Some(channels),
            NormKind::Layer => Some(1),
        }
    }
}

/// Where the squeeze-and-excitation gate sits inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeVariant {
    None,
    /// Gate on the transform output.
    Standard,
    /// Gate on the transform input.
    Pre,
    /// Gate on the shortcut.
    Identity,
    /// Gate right after the spatial convolution.
    Conv3x3,
    /// `h + g * h` on the transform output.
    Residual,
}

/// One residual block.
///
/// When used as a stage template, `in_channels`, `out_channels` and `stride`
/// are filled in per block and may be left at zero.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockSpec {
    pub topology: Topology,
    pub activation_order: ActivationOrder,
    pub activation: Activation,
    pub norm: NormKind,
    pub kernel_size: usize,
    pub cardinality: usize,
    pub scales: usize,
    pub se_variant: SeVariant,
    pub se_reduction: usize,
    #[serde(default)]
    pub in_channels: usize,
    #[serde(default)]
    pub out_channels: usize,
    #[serde(default)]
    pub stride: usize,
}

/// Channel counts of a block's transform path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockWidths {
    /// Output of the first convolution.
    pub reduce: usize,
    /// Width of the spatial (k x k) convolution that carries the arrangement.
    pub spatial: usize,
    pub out: usize,
}

impl BlockSpec {
    pub fn widths(&self) -> BlockWidths {
        let out = self.out_channels;
        match self.topology {
            Topology::Basic => BlockWidths { reduce: out, spatial: out, out },
            Topology::Bottleneck => BlockWidths { reduce: out / 2, spatial: out / 2, out },
            Topology::InvertedBottleneck => BlockWidths { reduce: 4 * out, spatial: 4 * out, out },
        }
    }

    pub fn has_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.stride != 1
    }

    /// Hidden width of an SE gate over `channels`.
    pub fn se_hidden(&self, channels: usize) -> usize {
        (channels / self.se_reduction.max(1)).max(1)
    }

    /// Channel count the SE gate acts on, if any.
    pub fn se_channels(&self) -> Option<usize> {
        match self.se_variant {
            SeVariant::None => None,
            SeVariant::Pre => Some(self.in_channels),
            SeVariant::Conv3x3 => Some(self.widths().spatial),
            SeVariant::Standard | SeVariant::Identity | SeVariant::Residual => Some(self.out_channels),
        }
    }

    /// Collects every invariant violation, prefixed by `at`.
    pub fn check(&self, at: &str, errors: &mut Vec<String>) {
        if ![3, 5, 7, 9].contains(&self.kernel_size) {
            errors.push(format!("{at}: kernel_size {} not in {{3,5,7,9}}", self.kernel_size));
        }
        if self.cardinality == 0 {
            errors.push(format!("{at}: cardinality must be >= 1"));
        }
        if self.scales == 0 {
            errors.push(format!("{at}: scales must be >= 1"));
        }
        if self.se_reduction == 0 {
            errors.push(format!("{at}: se_reduction must be >= 1"));
        }
        if self.stride != 1 && self.stride != 2 {
            errors.push(format!("{at}: stride {} not in {{1,2}}", self.stride));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            errors.push(format!("{at}: channel counts must be positive"));
            return;
        }
        if self.topology == Topology::Bottleneck && self.out_channels % 2 != 0 {
            errors.push(format!("{at}: bottleneck output width {} is odd", self.out_channels));
        }
        if let Err(e) = self.check_arrangement() {
            errors.push(format!("{at}: {e}"));
        }
        let w = self.widths();
        for (name, c) in [("input", self.in_channels), ("reduce", w.reduce), ("spatial", w.spatial), ("output", w.out)] {
            if let Some(g) = self.norm.groups(c) {
                if c % g != 0 {
                    errors.push(format!("{at}: {name} width {c} not divisible into {g} norm groups"));
                }
            }
        }
    }

    /// Divisibility of the spatial width by scales and cardinality.
    pub fn check_arrangement(&self) -> Result<()> {
        let spatial = self.widths().spatial;
        if self.scales > 1 && spatial % self.scales != 0 {
            return Err(Error::Divisibility { dimension: "spatial width by scales", width: spatial, divisor: self.scales });
        }
        let per_group = spatial / self.scales.max(1);
        if self.cardinality > 0 && per_group % self.cardinality != 0 {
            let dimension = if self.scales > 1 { "hierarchical split width by cardinality" } else { "spatial width by cardinality" };
            return Err(Error::Divisibility { dimension, width: per_group, divisor: self.cardinality });
        }
        Ok(())
    }
}

/// Per-stage multiplier context for block construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WideningContext {
    pub base_channels: usize,
    pub widening_factor: usize,
}

/// Default base widths of the three stages.
pub const BASE_CHANNELS: [usize; 3] = [16, 32, 64];

fn check_channels(in_channels: usize, out_channels: usize, stride: usize) -> Result<()> {
    if in_channels == 0 || out_channels == 0 {
        return Err(Error::InvalidSpec(alloc::vec![String::from("channel counts must be positive")]));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::InvalidSpec(alloc::vec![format!("stride {stride} not in {{1,2}}")]));
    }
    Ok(())
}

/// Pre-activation bottleneck with hierarchical aggregated convolution and residual SE.
pub fn make_robust_resblock(in_channels: usize, ctx: WideningContext, stride: usize) -> Result<BlockSpec> {
    let out_channels = ctx.base_channels * ctx.widening_factor * Topology::Bottleneck.expansion();
    check_channels(in_channels, out_channels, stride)?;
    let b = BlockSpec {
        topology: Topology::Bottleneck,
        activation_order: ActivationOrder::Pre,
        activation: Activation::Relu,
        norm: NormKind::Batch,
        kernel_size: 3,
        cardinality: 4,
        scales: 8,
        se_variant: SeVariant::Residual,
        se_reduction: 64,
        in_channels,
        out_channels,
        stride,
    };
    b.check_arrangement()?;
    Ok(b)
}

/// Wide-ResNet basic block: two 3x3 convolutions, no SE.
pub fn make_wrn_basic_block(
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    activation_order: ActivationOrder,
) -> Result<BlockSpec> {
    check_channels(in_channels, out_channels, stride)?;
    Ok(BlockSpec {
        topology: Topology::Basic,
        activation_order,
        activation: Activation::Relu,
        norm: NormKind::Batch,
        kernel_size: 3,
        cardinality: 1,
        scales: 1,
        se_variant: SeVariant::None,
        se_reduction: 64,
        in_channels,
        out_channels,
        stride,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StageSpec {
    pub depth: usize,
    pub widening_factor: usize,
    pub base_channels: usize,
    pub block_template: BlockSpec,
}

impl StageSpec {
    pub fn out_channels(&self) -> usize {
        self.base_channels * self.widening_factor * self.block_template.topology.expansion()
    }
}

fn default_stem() -> usize {
    16
}

fn default_resolution() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkSpec {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_stem")]
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
    #[serde(default = "default_resolution")]
    pub input_resolution: usize,
}

/// One concrete block of an expanded network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlacedBlock {
    pub stage: usize,
    pub index: usize,
    pub spec: BlockSpec,
}

impl NetworkSpec {
    /// Builds a spec from a block template and per-stage depth and width.
    pub fn from_template(
        name: impl Into<String>,
        template: BlockSpec,
        depths: [usize; 3],
        widths: [usize; 3],
        num_classes: usize,
        input_resolution: usize,
    ) -> Self {
        let stages = (0..3)
            .map(|i| StageSpec {
                depth: depths[i],
                widening_factor: widths[i],
                base_channels: BASE_CHANNELS[i],
                block_template: template.clone(),
            })
            .collect();
        Self { name: name.into(), stem_channels: 16, stages, num_classes, input_resolution }
    }

    pub fn depths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.depth).collect()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.widening_factor).collect()
    }

    pub fn activation_order(&self) -> ActivationOrder {
        self.stages.first().map_or(ActivationOrder::Pre, |s| s.block_template.activation_order)
    }

    /// Normalization used by the stem (post-activation) or head (pre-activation).
    pub fn outer_norm(&self) -> NormKind {
        self.stages.first().map_or(NormKind::Batch, |s| s.block_template.norm)
    }

    pub fn outer_activation(&self) -> Activation {
        self.stages.first().map_or(Activation::Relu, |s| s.block_template.activation)
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, StageSpec::out_channels)
    }

    /// Concrete blocks in execution order, with channels and strides filled in.
    pub fn blocks(&self) -> Vec<PlacedBlock> {
        let mut out = Vec::new();
        let mut cin = self.stem_channels;
        for (si, stage) in self.stages.iter().enumerate() {
            let cout = stage.out_channels();
            for bi in 0..stage.depth {
                let mut spec = stage.block_template.clone();
                spec.in_channels = cin;
                spec.out_channels = cout;
                spec.stride = if bi == 0 && si > 0 { 2 } else { 1 };
                out.push(PlacedBlock { stage: si, index: bi, spec });
                cin = cout;
            }
        }
        out
    }

    /// Spatial size after the stem and after each block.
    pub fn block_resolutions(&self) -> Vec<usize> {
        let mut r = self.input_resolution;
        self.blocks()
            .iter()
            .map(|b| {
                r = (r - 1) / b.spec.stride + 1;
                r
            })
            .collect()
    }

    /// Checks every invariant and reports all failures together.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.stages.len() != 3 {
            errors.push(format!("expected exactly 3 stages, got {}", self.stages.len()));
        }
        if self.stem_channels == 0 {
            errors.push(String::from("stem_channels must be positive"));
        }
        if self.num_classes == 0 {
            errors.push(String::from("num_classes must be positive"));
        }
        if self.input_resolution < 4 {
            errors.push(format!("input_resolution {} below 4", self.input_resolution));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.depth == 0 {
                errors.push(format!("stage {}: depth must be positive", i + 1));
            }
            if s.widening_factor == 0 {
                errors.push(format!("stage {}: widening_factor must be positive", i + 1));
            }
            if s.base_channels == 0 {
                errors.push(format!("stage {}: base_channels must be positive", i + 1));
            }
            let t = &s.block_template;
            if t.activation_order != self.activation_order() {
                errors.push(format!("stage {}: mixed activation orders", i + 1));
            }
        }
        {
            // Blocks sharing a template fail identically; report the first two of each stage.
            let blocks = self.blocks();
            for stage in 0..self.stages.len() {
                for b in blocks.iter().filter(|b| b.stage == stage && b.index < 2) {
                    b.spec.check(&format!("stage {} block {}", stage + 1, b.index + 1), &mut errors);
                }
            }
            if let Some(g) = self.outer_norm().groups(self.final_channels()) {
                let c = self.final_channels();
                if c % g != 0 {
                    errors.push(format!("head norm: width {c} not divisible into {g} groups"));
                }
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(errors))
        }
    }
}

/// The four scaled robust networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    A1,
    A2,
    A3,
    A4,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::A1, Preset::A2, Preset::A3, Preset::A4];

    pub fn depths(self) -> [usize; 3] {
        match self {
            Preset::A1 => [14, 14, 7],
            Preset::A2 => [17, 17, 8],
            Preset::A3 => [22, 22, 11],
            Preset::A4 => [27, 28, 13],
        }
    }

    pub fn widths(self) -> [usize; 3] {
        match self {
            Preset::A1 => [5, 7, 3],
            Preset::A2 => [7, 9, 4],
            Preset::A3 => [8, 11, 5],
            Preset::A4 => [10, 14, 6],
        }
    }

    /// Nominal FLOPs budget in units of 1e9.
    pub fn budget_gflops(self) -> u64 {
        match self {
            Preset::A1 => 5,
            Preset::A2 => 10,
            Preset::A3 => 20,
            Preset::A4 => 40,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::A1 => "RobustResNet-A1",
            Preset::A2 => "RobustResNet-A2",
            Preset::A3 => "RobustResNet-A3",
            Preset::A4 => "RobustResNet-A4",
        }
    }
}

impl core::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let t = t.strip_prefix("robustresnet-").unwrap_or(&t);
        match t {
            "a1" => Ok(Preset::A1),
            "a2" => Ok(Preset::A2),
            "a3" => Ok(Preset::A3),
            "a4" => Ok(Preset::A4),
            _ => Err(Error::Domain(format!("unknown preset {s:?}"))),
        }
    }
}

/// Stage-1 template of a robust network.
pub fn robust_template() -> BlockSpec {
    let mut b = make_robust_resblock(16, WideningContext { base_channels: 16, widening_factor: 1 }, 1)
        .expect("default robust block is valid");
    b.in_channels = 0;
    b.out_channels = 0;
    b.stride = 0;
    b
}

/// Stage template of a pre-activation WRN.
pub fn wrn_template(order: ActivationOrder) -> BlockSpec {
    let mut b = make_wrn_basic_block(16, 16, 1, order).expect("default basic block is valid");
    b.in_channels = 0;
    b.out_channels = 0;
    b.stride = 0;
    b
}

pub fn robust_resnet(depths: [usize; 3], widths: [usize; 3], num_classes: usize, input_resolution: usize) -> NetworkSpec {
    let name = format!("robust-D{}-{}-{}-W{}-{}-{}", depths[0], depths[1], depths[2], widths[0], widths[1], widths[2]);
    NetworkSpec::from_template(name, robust_template(), depths, widths, num_classes, input_resolution)
}

pub fn robust_preset(preset: Preset, num_classes: usize) -> NetworkSpec {
    let mut s = robust_resnet(preset.depths(), preset.widths(), num_classes, 32);
    s.name = String::from(preset.name());
    s
}

/// WRN-`depth`-`k`; `depth` must be `6n + 4`.
pub fn wrn(depth: usize, k: usize, num_classes: usize) -> Result<NetworkSpec> {
    if depth < 10 || (depth - 4) % 6 != 0 {
        return Err(Error::Domain(format!("WRN depth {depth} is not of the form 6n+4")));
    }
    let n = (depth - 4) / 6;
    Ok(NetworkSpec::from_template(
        format!("WRN-{depth}-{k}"),
        wrn_template(ActivationOrder::Pre),
        [n; 3],
        [k; 3],
        num_classes,
        32,
    ))
}

/// Per-stage `(1x1, kxk, 1x1)` widths of a preset as buildable, or as
/// originally tabulated when `verbatim` is set.
///
/// The only difference is the stage-1 spatial width of A1, tabulated as 80. 80 does not split into 8 groups of cardinality 4, so the
/// verbatim row is for auditing only.
pub fn table_widths(preset: Preset, verbatim: bool) -> [(usize, usize, usize); 3] {
    let mut out = [(0, 0, 0); 3];
    for (i, w) in preset.widths().iter().enumerate() {
        let c = BASE_CHANNELS[i] * w * 4;
        out[i] = (c / 2, c / 2, c);
    }
    if verbatim && preset == Preset::A1 {
        out[0].1 = 80;
    }
    out
}
