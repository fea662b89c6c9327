//! Generator layer registry, layer-selection policies and analytical
//! parameter accounting for hypernetwork configurations.
//!
//! The [`GeneratorSpec`] table is the single source of truth for which
//! kernels exist, which of them a hypernetwork refines, and how large the
//! refinement heads are. The counting in [`count_hypernet_params`] walks the
//! same layout descriptions that [`crate::hypernet`] instantiates, so a
//! realised network and its analytical count can be compared directly.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerGroup {
    Coarse,
    Medium,
    Fine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "conv")]
    Conv,
    #[serde(rename = "toRGB")]
    ToRgb,
}

/// One generator layer: a `kernel x kernel x c_in x c_out` weight tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub index: usize,
    pub name: String,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub group: LayerGroup,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.kernel, self.kernel, self.c_in, self.c_out]
    }

    pub fn weight_len(&self) -> usize {
        self.kernel * self.kernel * self.c_in * self.c_out
    }

    pub fn is_conv(&self) -> bool {
        self.kind == LayerKind::Conv
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub name: String,
    pub latent_dim: usize,
    pub layers: Vec<LayerSpec>,
}

/// One resolution level of a synthesis network: its convolutions (the first
/// of which upsamples, except at 4x4) and the toRGB layer that closes it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthesisBlock {
    pub resolution: usize,
    pub convs: Vec<usize>,
    pub to_rgb: usize,
}

impl GeneratorSpec {
    /// Checks the per-layer invariants: consecutive 1-based indices, sane
    /// dimensions, toRGB layers being `1x1xC_inx3`.
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Spec("latent_dim must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Spec("spec has no layers".into()));
        }
        for (pos, layer) in self.layers.iter().enumerate() {
            if layer.index != pos + 1 {
                return Err(Error::Spec(format!(
                    "layer indices must be consecutive from 1; position {} has index {}",
                    pos + 1,
                    layer.index
                )));
            }
            if layer.kernel == 0 || layer.c_in == 0 || layer.c_out == 0 {
                return Err(Error::Spec(format!("layer {} has a zero dimension", layer.index)));
            }
            if layer.kind == LayerKind::ToRgb && (layer.kernel != 1 || layer.c_out != 3) {
                return Err(Error::Spec(format!(
                    "toRGB layer {} must be 1x1xC_inx3, got {}x{}x{}x{}",
                    layer.index, layer.kernel, layer.kernel, layer.c_in, layer.c_out
                )));
            }
        }
        Ok(())
    }

    pub fn layer(&self, index: usize) -> Option<&LayerSpec> {
        index.checked_sub(1).and_then(|i| self.layers.get(i))
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.is_conv())
    }

    /// Largest channel count among conv layers; square layers of this width
    /// are the ones served by the shared refinement pair.
    pub fn max_conv_channels(&self) -> usize {
        self.conv_layers()
            .map(|l| l.c_in.max(l.c_out))
            .max()
            .unwrap_or(0)
    }

    /// Splits the table into synthesis blocks. Requires the alternating
    /// pattern `conv, toRGB, (conv, conv, toRGB)*` with chained channels.
    pub fn synthesis_blocks(&self) -> Result<Vec<SynthesisBlock>> {
        self.validate()?;
        let mut blocks = Vec::new();
        let mut pending: Vec<usize> = Vec::new();
        let mut prev_out: Option<usize> = None;
        let mut resolution = 4;
        for layer in &self.layers {
            match layer.kind {
                LayerKind::Conv => {
                    if let Some(c) = prev_out {
                        if layer.c_in != c {
                            return Err(Error::Spec(format!(
                                "layer {} expects {} input channels but the previous conv produces {c}",
                                layer.index, layer.c_in
                            )));
                        }
                    }
                    if layer.kernel % 2 == 0 {
                        return Err(Error::Spec(format!("layer {} has an even kernel", layer.index)));
                    }
                    prev_out = Some(layer.c_out);
                    pending.push(layer.index);
                }
                LayerKind::ToRgb => {
                    let expected = if blocks.is_empty() { 1 } else { 2 };
                    if pending.len() != expected {
                        return Err(Error::Spec(format!(
                            "toRGB layer {} closes a block with {} convs, expected {expected}",
                            layer.index,
                            pending.len()
                        )));
                    }
                    if Some(layer.c_in) != prev_out {
                        return Err(Error::Spec(format!(
                            "toRGB layer {} input channels do not match the preceding conv",
                            layer.index
                        )));
                    }
                    blocks.push(SynthesisBlock {
                        resolution,
                        convs: std::mem::take(&mut pending),
                        to_rgb: layer.index,
                    });
                    resolution *= 2;
                }
            }
        }
        if !pending.is_empty() || blocks.is_empty() {
            return Err(Error::Spec("spec must end with a toRGB layer".into()));
        }
        Ok(blocks)
    }

    /// Output image side length.
    pub fn resolution(&self) -> Result<usize> {
        Ok(self.synthesis_blocks()?.last().expect("non-empty").resolution)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(Error::json("<spec>"))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let spec: Self = serde_json::from_str(&text).map_err(Error::json(path))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(Error::io(path))
    }
}

/// The 26-layer StyleGAN2 1024x1024 synthesis table.
pub fn full_stylegan2_spec() -> GeneratorSpec {
    use LayerGroup::*;
    use LayerKind::*;
    #[rustfmt::skip]
    let rows: [(&str, usize, usize, usize, LayerGroup, LayerKind); 26] = [
        ("Conv 1", 3, 512, 512, Coarse, Conv),
        ("toRGB 1", 1, 512, 3, Coarse, ToRgb),
        ("Conv 2", 3, 512, 512, Coarse, Conv),
        ("Conv 3", 3, 512, 512, Coarse, Conv),
        ("toRGB 2", 1, 512, 3, Coarse, ToRgb),
        ("Conv 4", 3, 512, 512, Medium, Conv),
        ("Conv 5", 3, 512, 512, Medium, Conv),
        ("toRGB 3", 1, 512, 3, Medium, ToRgb),
        ("Conv 6", 3, 512, 512, Medium, Conv),
        ("Conv 7", 3, 512, 512, Medium, Conv),
        ("toRGB 4", 1, 512, 3, Medium, ToRgb),
        ("Conv 8", 3, 512, 512, Fine, Conv),
        ("Conv 9", 3, 512, 512, Fine, Conv),
        ("toRGB 5", 1, 512, 3, Fine, ToRgb),
        ("Conv 10", 3, 512, 256, Fine, Conv),
        ("Conv 11", 3, 256, 256, Fine, Conv),
        ("toRGB 6", 1, 256, 3, Fine, ToRgb),
        ("Conv 12", 3, 256, 128, Fine, Conv),
        ("Conv 13", 3, 128, 128, Fine, Conv),
        ("toRGB 7", 1, 128, 3, Fine, ToRgb),
        ("Conv 14", 3, 128, 64, Fine, Conv),
        ("Conv 15", 3, 64, 64, Fine, Conv),
        ("toRGB 8", 1, 64, 3, Fine, ToRgb),
        ("Conv 16", 3, 64, 32, Fine, Conv),
        ("Conv 17", 3, 32, 32, Fine, Conv),
        ("toRGB 9", 1, 32, 3, Fine, ToRgb),
    ];
    GeneratorSpec {
        name: "stylegan2-1024".into(),
        latent_dim: 512,
        layers: rows
            .iter()
            .enumerate()
            .map(|(i, &(name, kernel, c_in, c_out, group, kind))| LayerSpec {
                index: i + 1,
                name: name.into(),
                kernel,
                c_in,
                c_out,
                group,
                kind,
            })
            .collect(),
    }
}

/// Scaled-down spec with the same block pattern and grouping as the full
/// table. Resolutions run 4, 8, ..., `max_resolution`; every block has
/// `base_channels` except the last, which halves them. Blocks are split
/// into coarse/medium/fine in the 2:2:5 proportion of the full network
/// (at least one block each); with only two blocks the second block's
/// upsampling conv is medium and the rest fine. `latent_dim = base_channels`.
pub fn toy_spec(max_resolution: usize, base_channels: usize) -> Result<GeneratorSpec> {
    if max_resolution < 8 || !max_resolution.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "max_resolution must be a power of two >= 8, got {max_resolution}"
        )));
    }
    if base_channels < 4 {
        return Err(Error::InvalidArgument(format!(
            "base_channels must be >= 4, got {base_channels}"
        )));
    }
    let n_blocks = max_resolution.trailing_zeros() as usize - 1;
    let share = ((2 * n_blocks) as f64 / 9.0).round().max(1.0) as usize;
    let block_group = |b: usize| {
        if b < share {
            LayerGroup::Coarse
        } else if b < 2 * share && n_blocks > 2 {
            LayerGroup::Medium
        } else {
            LayerGroup::Fine
        }
    };
    let channels = |b: usize| {
        if b + 1 == n_blocks {
            base_channels / 2
        } else {
            base_channels
        }
    };

    let mut layers = Vec::new();
    let mut push = |name: String, kernel, c_in, c_out, group, kind| {
        let index = layers.len() + 1;
        layers.push(LayerSpec {
            index,
            name,
            kernel,
            c_in,
            c_out,
            group,
            kind,
        });
    };
    let (mut conv_no, mut rgb_no) = (0, 0);
    for b in 0..n_blocks {
        let c = channels(b);
        let group = block_group(b);
        let two_block_split = n_blocks == 2 && b == 1;
        if b == 0 {
            conv_no += 1;
            push(format!("Conv {conv_no}"), 3, c, c, group, LayerKind::Conv);
        } else {
            let c_prev = channels(b - 1);
            let up_group = if two_block_split { LayerGroup::Medium } else { group };
            conv_no += 1;
            push(format!("Conv {conv_no}"), 3, c_prev, c, up_group, LayerKind::Conv);
            conv_no += 1;
            push(format!("Conv {conv_no}"), 3, c, c, group, LayerKind::Conv);
        }
        rgb_no += 1;
        push(format!("toRGB {rgb_no}"), 1, c, 3, group, LayerKind::ToRgb);
    }
    let spec = GeneratorSpec {
        name: format!("toy-{max_resolution}-{base_channels}"),
        latent_dim: base_channels,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

/// Which generator layers receive offsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerPolicy {
    /// Non-toRGB convolutions of the medium and fine groups.
    MediumFineConv,
    AllConv,
    AllIncludingTorgb,
    /// Nothing is refined (backbone-only accounting).
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    /// Refinement block predicting a `1x1xC_inxC_out` offset.
    PerChannelStandard,
    /// As above, but square max-width conv layers use slim convolutions and
    /// a fully-connected pair shared by all such heads.
    PerChannelSharedMix,
    /// Rank-1 offsets per kernel tap: `k x k x C_in` and `k x k x C_out` factors.
    Separable,
    /// A full `k x k x C_in x C_out` offset per layer.
    PerParameterNaive,
}

macro_rules! serde_from_str {
    ($ty:ty) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                serde_json::from_value(serde_json::Value::String(s.to_string()))
                    .map_err(|_| Error::Config(format!("unknown {} `{s}`", stringify!($ty))))
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                match serde_json::to_value(self) {
                    Ok(serde_json::Value::String(s)) => f.write_str(&s),
                    _ => unreachable!("unit enum serialises to a string"),
                }
            }
        }
    };
}

serde_from_str!(LayerPolicy);
serde_from_str!(HeadVariant);

/// Residual backbone shape: a stem convolution followed by four stages of
/// basic residual blocks (two 3x3 convs each). Stage strides are 1, 2, 2, 2.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub widths: [usize; 4],
    pub blocks: [usize; 4],
}

impl BackboneConfig {
    /// ResNet34 with a 6-channel stem and no max-pool or classifier.
    pub fn resnet34(in_channels: usize) -> Self {
        Self {
            in_channels,
            stem_kernel: 7,
            stem_stride: 2,
            widths: [64, 128, 256, 512],
            blocks: [3, 4, 6, 3],
        }
    }

    /// ResNet34 block pattern with widths `[w, 2w, 4w, 8w]` and a stride-1 3x3 stem.
    pub fn toy(in_channels: usize, base_width: usize) -> Self {
        Self {
            in_channels,
            stem_kernel: 3,
            stem_stride: 1,
            widths: [base_width, 2 * base_width, 4 * base_width, 8 * base_width],
            blocks: [3, 4, 6, 3],
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.widths[3]
    }

    pub fn total_stride(&self) -> usize {
        self.stem_stride * 8
    }

    /// Spatial size of the output feature map for a square input.
    pub fn feature_size(&self, input: usize) -> usize {
        let mut s = conv_out(input, self.stem_kernel, self.stem_stride);
        for _ in 0..3 {
            s = conv_out(s, 3, 2);
        }
        s
    }
}

fn conv_out(size: usize, k: usize, stride: usize) -> usize {
    (size + 2 * (k / 2) - k) / stride + 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperNetConfig {
    pub head_variant: HeadVariant,
    pub layer_policy: LayerPolicy,
    pub refinement_steps: usize,
    /// `(height, width, channels)` of the backbone output.
    pub backbone_feature_shape: (usize, usize, usize),
    /// Width of the shared fully-connected pair (512 at full scale).
    pub shared_fc_dim: usize,
    pub backbone: BackboneConfig,
}

impl HyperNetConfig {
    /// Full-scale configuration: per-channel offsets, shared refinement
    /// blocks, medium+fine non-toRGB layers, five refinement steps.
    pub fn paper_final() -> Self {
        Self {
            head_variant: HeadVariant::PerChannelSharedMix,
            layer_policy: LayerPolicy::MediumFineConv,
            refinement_steps: 5,
            backbone_feature_shape: (16, 16, 512),
            shared_fc_dim: 512,
            backbone: BackboneConfig::resnet34(6),
        }
    }

    /// Toy configuration for a spec at `resolution`, backbone base width `base_width`.
    pub fn toy(spec: &GeneratorSpec, resolution: usize, base_width: usize) -> Self {
        let backbone = BackboneConfig::toy(6, base_width);
        let s = backbone.feature_size(resolution);
        Self {
            head_variant: HeadVariant::PerChannelSharedMix,
            layer_policy: LayerPolicy::MediumFineConv,
            refinement_steps: 5,
            backbone_feature_shape: (s, s, backbone.feature_channels()),
            shared_fc_dim: spec.max_conv_channels(),
            backbone,
        }
    }

    pub fn with_variant(mut self, variant: HeadVariant) -> Self {
        self.head_variant = variant;
        self
    }

    pub fn with_policy(mut self, policy: LayerPolicy) -> Self {
        self.layer_policy = policy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.refinement_steps == 0 {
            return Err(Error::Config("refinement_steps must be >= 1".into()));
        }
        if self.backbone.in_channels != 6 {
            return Err(Error::Config(format!(
                "hypernetwork backbone takes the 6-channel (target, reconstruction) pair, got {} channels",
                self.backbone.in_channels
            )));
        }
        if self.backbone_feature_shape.2 != self.backbone.feature_channels() {
            return Err(Error::Config(format!(
                "backbone_feature_shape has {} channels but the backbone produces {}",
                self.backbone_feature_shape.2,
                self.backbone.feature_channels()
            )));
        }
        if self.shared_fc_dim == 0 || self.backbone.widths.contains(&0) {
            return Err(Error::Config("zero width in hypernetwork config".into()));
        }
        Ok(())
    }
}

/// Layers refined under `policy`, ascending.
pub fn select_refined_layers(spec: &GeneratorSpec, policy: LayerPolicy) -> Vec<usize> {
    spec.layers
        .iter()
        .filter(|l| match policy {
            LayerPolicy::MediumFineConv => l.is_conv() && l.group != LayerGroup::Coarse,
            LayerPolicy::AllConv => l.is_conv(),
            LayerPolicy::AllIncludingTorgb => true,
            LayerPolicy::None => false,
        })
        .map(|l| l.index)
        .collect()
}

/// A convolution in a hypernetwork layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDesc {
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub bias: bool,
}

impl ConvDesc {
    pub fn params(&self) -> u64 {
        (self.k * self.k * self.c_in * self.c_out + if self.bias { self.c_out } else { 0 }) as u64
    }
}

/// One residual block: two 3x3 convs, each followed by a per-channel affine,
/// plus an optional 1x1 projection shortcut with its own affine.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResBlockDesc {
    pub conv1: ConvDesc,
    pub conv2: ConvDesc,
    pub shortcut: Option<ConvDesc>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneLayout {
    pub stem: ConvDesc,
    pub blocks: Vec<ResBlockDesc>,
}

impl BackboneLayout {
    pub fn new(cfg: &BackboneConfig) -> Self {
        let stem = ConvDesc {
            k: cfg.stem_kernel,
            c_in: cfg.in_channels,
            c_out: cfg.widths[0],
            stride: cfg.stem_stride,
            bias: false,
        };
        let mut blocks = Vec::new();
        let mut c_in = cfg.widths[0];
        for (stage, (&width, &count)) in cfg.widths.iter().zip(&cfg.blocks).enumerate() {
            for b in 0..count {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let conv = |c_in, stride| ConvDesc {
                    k: 3,
                    c_in,
                    c_out: width,
                    stride,
                    bias: false,
                };
                let shortcut = (stride != 1 || c_in != width).then_some(ConvDesc {
                    k: 1,
                    c_in,
                    c_out: width,
                    stride,
                    bias: false,
                });
                blocks.push(ResBlockDesc {
                    conv1: conv(c_in, stride),
                    conv2: conv(width, 1),
                    shortcut,
                });
                c_in = width;
            }
        }
        Self { stem, blocks }
    }

    /// Convolution weights plus two affine parameters per output channel of
    /// every convolution.
    pub fn params(&self) -> u64 {
        let with_affine = |c: &ConvDesc| c.params() + 2 * c.c_out as u64;
        with_affine(&self.stem)
            + self
                .blocks
                .iter()
                .map(|b| {
                    with_affine(&b.conv1)
                        + with_affine(&b.conv2)
                        + b.shortcut.as_ref().map_or(0, with_affine)
                })
                .sum::<u64>()
    }
}

/// What a head's final fully-connected layer produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadOutput {
    /// `C_in * C_out` values, one per (input channel, filter) pair.
    PerChannel,
    /// `k^2 * C_in * C_out` values.
    PerParameter,
    /// `k^2 * C_in + k^2 * C_out` factor values.
    Separable,
    /// `shared_fc_dim` values, fed to the shared pair.
    SharedCode,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub layer: usize,
    pub convs: Vec<ConvDesc>,
    pub fc_in: usize,
    pub fc_out: usize,
    pub output: HeadOutput,
}

impl HeadLayout {
    pub fn fc_params(&self) -> u64 {
        (self.fc_in * self.fc_out + self.fc_out) as u64
    }

    pub fn params(&self) -> u64 {
        self.convs.iter().map(ConvDesc::params).sum::<u64>() + self.fc_params()
    }
}

/// The shared fully-connected pair: `D -> C*D` then a per-row `D -> C`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SharedPairLayout {
    pub channels: usize,
    pub dim: usize,
}

impl SharedPairLayout {
    pub fn params(&self) -> u64 {
        let (c, d) = (self.channels as u64, self.dim as u64);
        (d * c * d + c * d) + (d * c + c)
    }
}

fn shared_candidate(spec: &GeneratorSpec, layer: &LayerSpec, config: &HyperNetConfig) -> bool {
    let c = spec.max_conv_channels();
    config.head_variant == HeadVariant::PerChannelSharedMix
        && layer.is_conv()
        && layer.c_in == c
        && layer.c_out == c
}

/// True when `layer` is served by the shared pair under `config`. Square
/// max-width conv layers share the pair only if that makes the network
/// smaller than giving each of them a standard head.
pub fn uses_shared_pair(spec: &GeneratorSpec, layer: &LayerSpec, config: &HyperNetConfig) -> bool {
    if !shared_candidate(spec, layer, config) {
        return false;
    }
    let candidates: Vec<&LayerSpec> = select_refined_layers(spec, config.layer_policy)
        .into_iter()
        .filter_map(|i| spec.layer(i))
        .filter(|l| shared_candidate(spec, l, config))
        .collect();
    if !candidates.iter().any(|l| l.index == layer.index) {
        return false;
    }
    let standard = config.clone().with_variant(HeadVariant::PerChannelStandard);
    let f = config.backbone.feature_channels();
    let slim_head = slim_head_layout(layer.index, f, config.shared_fc_dim).params();
    let pair = SharedPairLayout {
        channels: spec.max_conv_channels(),
        dim: config.shared_fc_dim,
    }
    .params();
    let without: u64 = candidates.iter().map(|l| head_layout(spec, l, &standard).params()).sum();
    let with = candidates.len() as u64 * slim_head + pair;
    with <= without
}

fn head_conv(c_in: usize, c_out: usize, stride: usize) -> ConvDesc {
    ConvDesc {
        k: 3,
        c_in,
        c_out,
        stride,
        bias: true,
    }
}

fn slim_head_layout(layer: usize, f: usize, dim: usize) -> HeadLayout {
    let slim = (f / 4).max(1);
    HeadLayout {
        layer,
        convs: vec![
            head_conv(f, slim, 1),
            head_conv(slim, slim, 2),
            head_conv(slim, slim, 2),
            head_conv(slim, slim, 2),
            head_conv(slim, f, 2),
        ],
        fc_in: f,
        fc_out: dim,
        output: HeadOutput::SharedCode,
    }
}

pub fn head_layout(spec: &GeneratorSpec, layer: &LayerSpec, config: &HyperNetConfig) -> HeadLayout {
    let f = config.backbone.feature_channels();
    if uses_shared_pair(spec, layer, config) {
        return slim_head_layout(layer.index, f, config.shared_fc_dim);
    }
    let half = (f / 2).max(1);
    let k2 = layer.kernel * layer.kernel;
    let (fc_out, output) = match config.head_variant {
        HeadVariant::PerChannelStandard | HeadVariant::PerChannelSharedMix => {
            (layer.c_in * layer.c_out, HeadOutput::PerChannel)
        }
        HeadVariant::PerParameterNaive => (k2 * layer.c_in * layer.c_out, HeadOutput::PerParameter),
        HeadVariant::Separable => (k2 * layer.c_in + k2 * layer.c_out, HeadOutput::Separable),
    };
    HeadLayout {
        layer: layer.index,
        convs: vec![head_conv(f, half, 2), head_conv(half, half, 2), head_conv(half, f, 2)],
        fc_in: f,
        fc_out,
        output,
    }
}

/// Shared pair for `config` on `spec`, if any head uses it.
pub fn shared_pair_layout(spec: &GeneratorSpec, config: &HyperNetConfig) -> Option<SharedPairLayout> {
    let any = select_refined_layers(spec, config.layer_policy)
        .into_iter()
        .filter_map(|i| spec.layer(i))
        .any(|l| uses_shared_pair(spec, l, config));
    any.then(|| SharedPairLayout {
        channels: spec.max_conv_channels(),
        dim: config.shared_fc_dim,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub backbone_params: u64,
    pub per_head_params: BTreeMap<usize, u64>,
    /// Final fully-connected layer of each head (weights + bias).
    pub final_fc_params: BTreeMap<usize, u64>,
    pub shared_params: u64,
    pub total: u64,
}

impl ParamReport {
    /// Aligned plain-text table.
    pub fn to_table(&self, spec: &GeneratorSpec, config: &HyperNetConfig) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "spec: {}  heads: {}  layers: {}\n",
            spec.name, config.head_variant, config.layer_policy
        ));
        let mut rows: Vec<(String, String, u64)> = vec![("backbone".into(), String::new(), self.backbone_params)];
        for (&idx, &n) in &self.per_head_params {
            let l = spec.layer(idx).expect("report layer in spec");
            rows.push((
                format!("head {idx} ({})", l.name),
                format!("{}x{}x{}x{}", l.kernel, l.kernel, l.c_in, l.c_out),
                n,
            ));
        }
        if self.shared_params > 0 {
            rows.push(("shared pair".into(), String::new(), self.shared_params));
        }
        rows.push(("total".into(), String::new(), self.total));
        let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let w1 = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
        let w2 = rows.iter().map(|r| group_thousands(r.2).len()).max().unwrap_or(0);
        for (a, b, n) in rows {
            out.push_str(&format!("{a:<w0$}  {b:<w1$}  {:>w2$}\n", group_thousands(n)));
        }
        out
    }
}

fn group_thousands(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Analytical parameter count of a hypernetwork for `spec`.
pub fn count_hypernet_params(spec: &GeneratorSpec, config: &HyperNetConfig) -> Result<ParamReport> {
    spec.validate()?;
    let backbone_params = BackboneLayout::new(&config.backbone).params();
    let mut per_head_params = BTreeMap::new();
    let mut final_fc_params = BTreeMap::new();
    for index in select_refined_layers(spec, config.layer_policy) {
        let layer = spec
            .layer(index)
            .ok_or_else(|| Error::Spec(format!("refined layer {index} not in spec")))?;
        let head = head_layout(spec, layer, config);
        per_head_params.insert(index, head.params());
        final_fc_params.insert(index, head.fc_params());
    }
    let shared_params = shared_pair_layout(spec, config).map_or(0, |s| s.params());
    let total = backbone_params + shared_params + per_head_params.values().sum::<u64>();
    Ok(ParamReport {
        backbone_params,
        per_head_params,
        final_fc_params,
        shared_params,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_spec_rows() {
        let spec = full_stylegan2_spec();
        assert_eq!(spec.layers.len(), 26);
        assert_eq!(spec.conv_layers().count(), 17);
        let l6 = spec.layer(6).unwrap();
        assert_eq!((l6.name.as_str(), l6.weight_shape(), l6.group, l6.kind), ("Conv 4", [3, 3, 512, 512], LayerGroup::Medium, LayerKind::Conv));
        let l26 = spec.layer(26).unwrap();
        assert_eq!((l26.name.as_str(), l26.weight_shape(), l26.group, l26.kind), ("toRGB 9", [1, 1, 32, 3], LayerGroup::Fine, LayerKind::ToRgb));
        assert_eq!(spec.layer(15).unwrap().weight_shape(), [3, 3, 512, 256]);
        assert_eq!(spec.layer(25).unwrap().weight_shape(), [3, 3, 32, 32]);
        assert_eq!(spec.latent_dim, 512);
        let groups: Vec<_> = spec.layers.iter().map(|l| l.group).collect();
        assert!(groups[..5].iter().all(|&g| g == LayerGroup::Coarse));
        assert!(groups[5..11].iter().all(|&g| g == LayerGroup::Medium));
        assert!(groups[11..].iter().all(|&g| g == LayerGroup::Fine));
        assert_eq!(spec.resolution().unwrap(), 1024);
    }

    #[test]
    fn medium_fine_selection_on_full_spec() {
        let spec = full_stylegan2_spec();
        assert_eq!(
            select_refined_layers(&spec, LayerPolicy::MediumFineConv),
            vec![6, 7, 9, 10, 12, 13, 15, 16, 18, 19, 21, 22, 24, 25]
        );
        assert_eq!(select_refined_layers(&spec, LayerPolicy::AllIncludingTorgb), (1..=26).collect::<Vec<_>>());
        let all_conv = select_refined_layers(&spec, LayerPolicy::AllConv);
        assert_eq!(all_conv.len(), 17);
        assert!(all_conv.iter().all(|&i| spec.layer(i).unwrap().is_conv()));
        assert!(select_refined_layers(&spec, LayerPolicy::None).is_empty());
    }

    #[test]
    fn toy_spec_structure() {
        let spec = toy_spec(32, 32).unwrap();
        assert!(spec.layers.iter().filter(|l| !l.is_conv()).all(|l| l.c_out == 3 && l.kernel == 1));
        assert!(spec.conv_layers().all(|l| l.kernel == 3));
        // 4 -> 8 -> 16 -> 32: one conv at 4x4, two at each later resolution
        let by_hand = 1 + 2 + 2 + 2;
        assert_eq!(spec.conv_layers().count(), by_hand);
        assert_eq!(spec.resolution().unwrap(), 32);

        let small = toy_spec(8, 8).unwrap();
        for g in [LayerGroup::Coarse, LayerGroup::Medium, LayerGroup::Fine] {
            assert!(small.layers.iter().any(|l| l.group == g), "{g:?} missing");
        }
        assert_eq!(small.resolution().unwrap(), 8);
    }

    #[test]
    fn toy_spec_rejects_bad_arguments() {
        assert!(toy_spec(24, 8).is_err());
        assert!(toy_spec(4, 8).is_err());
        assert!(toy_spec(16, 3).is_err());
    }

    #[test]
    fn json_roundtrip_and_field_names() {
        let spec = toy_spec(16, 8).unwrap();
        let text = spec.to_json();
        assert!(text.contains("\"toRGB\"") && text.contains("\"medium\""));
        assert_eq!(GeneratorSpec::from_json(&text).unwrap(), spec);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let keys: Vec<_> = v["layers"][0].as_object().unwrap().keys().cloned().collect();
        for k in ["index", "name", "kernel", "c_in", "c_out", "group", "kind"] {
            assert!(keys.contains(&k.to_string()));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = toy_spec(16, 8).unwrap();
        spec.layers[1].c_out = 4;
        assert!(spec.validate().is_err());
        let mut spec = toy_spec(16, 8).unwrap();
        spec.layers[2].index = 7;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn backbone_resnet34_count() {
        // stem 7x7x6x64, then 16 basic blocks, plus 3 projection shortcuts
        let convs: u64 = 7 * 7 * 6 * 64
            + 6 * 9 * 64 * 64
            + (9 * 64 * 128 + 7 * 9 * 128 * 128 + 64 * 128)
            + (9 * 128 * 256 + 11 * 9 * 256 * 256 + 128 * 256)
            + (9 * 256 * 512 + 5 * 9 * 512 * 512 + 256 * 512);
        let affine: u64 = 2 * (64 + 6 * 64 + 9 * 128 + 13 * 256 + 7 * 512);
        assert_eq!(BackboneLayout::new(&BackboneConfig::resnet34(6)).params(), convs + affine);
    }

    #[test]
    fn empty_refined_set_counts_backbone_only() {
        let spec = full_stylegan2_spec();
        let cfg = HyperNetConfig::paper_final().with_policy(LayerPolicy::None);
        let r = count_hypernet_params(&spec, &cfg).unwrap();
        assert_eq!(r.total, r.backbone_params);
        assert_eq!(r.shared_params, 0);
    }

    #[test]
    fn enum_strings() {
        assert_eq!("per_channel_shared_mix".parse::<HeadVariant>().unwrap(), HeadVariant::PerChannelSharedMix);
        assert_eq!(LayerPolicy::AllIncludingTorgb.to_string(), "all_including_torgb");
        assert!("bogus".parse::<LayerPolicy>().is_err());
    }

    #[test]
    fn table_is_aligned() {
        let spec = toy_spec(16, 8).unwrap();
        let cfg = HyperNetConfig::toy(&spec, 16, 4);
        let r = count_hypernet_params(&spec, &cfg).unwrap();
        let table = r.to_table(&spec, &cfg);
        let widths: Vec<usize> = table.lines().skip(1).map(str::len).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "{table}");
    }
}
