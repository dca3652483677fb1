//! Network description and composition: stage patterns over bottleneck
//! families, token networks, the exhaustive replacement enumerator, and a
//! versioned text serialization.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::fnv1a;

/// Trainable-or-free spatial operator placed in the middle of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpatialOp {
    Conv3x3,
    Conv1x1,
    DwConv3x3,
    MaxPool3,
    AvgPool3,
    Shift,
    DeformMax,
    DeformAvg,
    Attention,
}

impl SpatialOp {
    pub fn as_str(&self) -> &'static str {
        match self {
            SpatialOp::Conv3x3 => "conv3x3",
            SpatialOp::Conv1x1 => "conv1x1",
            SpatialOp::DwConv3x3 => "dwconv3x3",
            SpatialOp::MaxPool3 => "maxpool3",
            SpatialOp::AvgPool3 => "avgpool3",
            SpatialOp::Shift => "shift",
            SpatialOp::DeformMax => "deform_max",
            SpatialOp::DeformAvg => "deform_avg",
            SpatialOp::Attention => "attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "conv3x3" => SpatialOp::Conv3x3,
            "conv1x1" => SpatialOp::Conv1x1,
            "dwconv3x3" => SpatialOp::DwConv3x3,
            "maxpool3" => SpatialOp::MaxPool3,
            "avgpool3" => SpatialOp::AvgPool3,
            "shift" => SpatialOp::Shift,
            "deform_max" => SpatialOp::DeformMax,
            "deform_avg" => SpatialOp::DeformAvg,
            "attention" => SpatialOp::Attention,
            other => return Err(Error::Config(format!("unknown spatial op '{other}'"))),
        })
    }

    /// True for operators with no trainable weights of their own.
    /// The deformable variants carry weights only in their offset predictor.
    pub fn is_parameter_free(&self) -> bool {
        matches!(
            self,
            SpatialOp::MaxPool3 | SpatialOp::AvgPool3 | SpatialOp::Shift
        )
    }

    /// The block template this operator belongs in.
    pub fn block_kind(&self) -> BlockKind {
        match self {
            SpatialOp::Conv3x3 | SpatialOp::Conv1x1 => BlockKind::RegularBottleneck,
            SpatialOp::DwConv3x3 => BlockKind::InvertedBottleneck,
            SpatialOp::MaxPool3 | SpatialOp::AvgPool3 | SpatialOp::DeformMax | SpatialOp::DeformAvg => {
                BlockKind::EfficientBottleneck
            }
            SpatialOp::Shift => BlockKind::ShiftBlock,
            SpatialOp::Attention => BlockKind::Transformer,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    RegularBottleneck,
    InvertedBottleneck,
    EfficientBottleneck,
    ShiftBlock,
    Transformer,
    EfficientTransformer,
    /// Token-grid 2x downsampling (stride-2 depthwise conv on the grid,
    /// then a width-doubling linear); the pit_like approximation.
    TokenDownsample,
}

impl BlockKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BlockKind::RegularBottleneck => "regular_bottleneck",
            BlockKind::InvertedBottleneck => "inverted_bottleneck",
            BlockKind::EfficientBottleneck => "efficient_bottleneck",
            BlockKind::ShiftBlock => "shift_block",
            BlockKind::Transformer => "transformer",
            BlockKind::EfficientTransformer => "efficient_transformer",
            BlockKind::TokenDownsample => "token_downsample",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "regular_bottleneck" => BlockKind::RegularBottleneck,
            "inverted_bottleneck" => BlockKind::InvertedBottleneck,
            "efficient_bottleneck" => BlockKind::EfficientBottleneck,
            "shift_block" => BlockKind::ShiftBlock,
            "transformer" => BlockKind::Transformer,
            "efficient_transformer" => BlockKind::EfficientTransformer,
            "token_downsample" => BlockKind::TokenDownsample,
            other => return Err(Error::Config(format!("unknown block kind '{other}'"))),
        })
    }

    pub fn is_token(&self) -> bool {
        matches!(
            self,
            BlockKind::Transformer | BlockKind::EfficientTransformer | BlockKind::TokenDownsample
        )
    }
}

/// Declarative description of one building block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channel expansion ratio rho as a rational; the inner width is
    /// in_channels * num / den and must be a positive integer.
    /// Transformer kinds use it as the MLP ratio.
    pub rho_num: usize,
    pub rho_den: usize,
    pub stride: usize,
    pub spatial: SpatialOp,
    pub use_se: bool,
    /// Hybrid downsampling: insert avg-pool k2/s2 before the spatial conv
    /// and run that conv at stride 1.
    pub pre_pool: bool,
    /// Attention heads; 0 for CNN blocks.
    pub heads: usize,
}

impl BlockSpec {
    pub fn bottleneck(
        spatial: SpatialOp,
        in_channels: usize,
        out_channels: usize,
        rho: (usize, usize),
        stride: usize,
    ) -> Self {
        BlockSpec {
            kind: spatial.block_kind(),
            in_channels,
            out_channels,
            rho_num: rho.0,
            rho_den: rho.1,
            stride,
            spatial,
            use_se: false,
            pre_pool: false,
            heads: 0,
        }
    }

    pub fn transformer(dim: usize, heads: usize, efficient: bool) -> Self {
        BlockSpec {
            kind: if efficient {
                BlockKind::EfficientTransformer
            } else {
                BlockKind::Transformer
            },
            in_channels: dim,
            out_channels: dim,
            rho_num: 4,
            rho_den: 1,
            stride: 1,
            spatial: if efficient {
                SpatialOp::MaxPool3
            } else {
                SpatialOp::Attention
            },
            use_se: false,
            pre_pool: false,
            heads,
        }
    }

    /// Inner width rho * in_channels.
    pub fn inner(&self) -> Result<usize> {
        if self.rho_den == 0 || self.in_channels * self.rho_num % self.rho_den != 0 {
            return Err(Error::Config(format!(
                "expansion {}/{} of {} channels is not an integer",
                self.rho_num, self.rho_den, self.in_channels
            )));
        }
        let inner = self.in_channels * self.rho_num / self.rho_den;
        if inner == 0 {
            return Err(Error::Config("zero inner width".into()));
        }
        Ok(inner)
    }

    pub fn validate(&self) -> Result<()> {
        self.inner()?;
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::Config(format!("stride {} not in {{1,2}}", self.stride)));
        }
        let compatible = match self.kind {
            BlockKind::RegularBottleneck => {
                matches!(self.spatial, SpatialOp::Conv3x3 | SpatialOp::Conv1x1)
            }
            BlockKind::InvertedBottleneck => self.spatial == SpatialOp::DwConv3x3,
            BlockKind::EfficientBottleneck => matches!(
                self.spatial,
                SpatialOp::MaxPool3 | SpatialOp::AvgPool3 | SpatialOp::DeformMax | SpatialOp::DeformAvg
            ),
            BlockKind::ShiftBlock => self.spatial == SpatialOp::Shift,
            BlockKind::Transformer => self.spatial == SpatialOp::Attention,
            BlockKind::EfficientTransformer => {
                matches!(self.spatial, SpatialOp::MaxPool3 | SpatialOp::AvgPool3)
            }
            BlockKind::TokenDownsample => self.spatial == SpatialOp::DwConv3x3,
        };
        if !compatible {
            return Err(Error::Config(format!(
                "spatial op {} incompatible with block kind {}",
                self.spatial.as_str(),
                self.kind.as_str()
            )));
        }
        if self.kind.is_token() && self.kind != BlockKind::TokenDownsample && self.heads == 0 {
            return Err(Error::Config("transformer block with zero heads".into()));
        }
        Ok(())
    }

    /// Same block with a different spatial operator (and the block kind it
    /// implies); used by the replacement enumerator.
    pub fn with_spatial(&self, op: SpatialOp) -> Self {
        let mut b = self.clone();
        b.spatial = op;
        b.kind = op.block_kind();
        b
    }

    /// True when the residual branch cannot be summed with the input
    /// directly, so a projection shortcut is required.
    pub fn needs_projection(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: Vec<BlockSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StemSpec {
    /// 7x7/2 conv + BN + ReLU + 3x3/2 max-pool.
    ResNet { out: usize },
    /// 3x3/1 conv + BN + ReLU for 32x32 inputs.
    Cifar { out: usize },
    /// Non-overlapping patch projection to tokens plus learned position
    /// embeddings; implies a final layer norm before the head.
    PatchEmbed { patch: usize, dim: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HeadSpec {
    /// Global average pool over spatial/token positions, then a linear
    /// classifier. No class token anywhere in this crate.
    GapLinear { classes: usize },
}

/// Full network description: the unit the composer, cost model, harness and
/// trainer all consume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub name: String,
    /// Input geometry (channels, height, width); batch size is free.
    pub input: (usize, usize, usize),
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub head: HeadSpec,
}

impl ArchSpec {
    pub fn blocks(&self) -> impl Iterator<Item = &BlockSpec> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }

    pub fn block_count(&self) -> usize {
        self.stages.iter().map(|s| s.blocks.len()).sum()
    }

    pub fn classes(&self) -> usize {
        match self.head {
            HeadSpec::GapLinear { classes } => classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.iter().any(|s| s.blocks.is_empty()) {
            return Err(Error::Config("empty stage in architecture".into()));
        }
        let mut width = match &self.stem {
            StemSpec::ResNet { out } | StemSpec::Cifar { out } => *out,
            StemSpec::PatchEmbed { patch, dim } => {
                let (_, h, w) = self.input;
                if h % patch != 0 || w % patch != 0 {
                    return Err(Error::Config(format!(
                        "input {h}x{w} not divisible by patch {patch}"
                    )));
                }
                *dim
            }
        };
        for (si, stage) in self.stages.iter().enumerate() {
            let mut downsampling = 0usize;
            for (bi, b) in stage.blocks.iter().enumerate() {
                b.validate()?;
                if b.in_channels != width {
                    return Err(Error::Config(format!(
                        "stage {si} block {bi} expects {} input channels, chain provides {width}",
                        b.in_channels
                    )));
                }
                if b.kind.is_token() != matches!(self.stem, StemSpec::PatchEmbed { .. }) {
                    return Err(Error::Config(format!(
                        "stage {si} block {bi}: {} body does not match stem",
                        b.kind.as_str()
                    )));
                }
                if b.stride == 2 || b.kind == BlockKind::TokenDownsample {
                    downsampling += 1;
                }
                width = b.out_channels;
            }
            if downsampling > 1 {
                return Err(Error::Config(format!(
                    "stage {si} has {downsampling} downsampling blocks, at most one allowed"
                )));
            }
        }
        Ok(())
    }

    /// Fingerprint of the serialized form, reported in run manifests.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }
}

// ── stage patterns ───────────────────────────────────────────────────

/// Which block family each position receives: per-stage letters over
/// {B, E}, block-wise alternation, or the hybrid rule (efficient blocks
/// everywhere except the spatial-downsampling positions, which stay
/// regular with an avg-pool inserted before their spatial conv).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StagePattern {
    PerStage(Vec<char>),
    Alternate,
    Hybrid,
}

impl StagePattern {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(StagePattern::Hybrid),
            "E/B" | "e/b" => Ok(StagePattern::Alternate),
            letters => {
                let chars: Vec<char> = letters.chars().collect();
                if chars.is_empty() || chars.iter().any(|c| !matches!(c, 'B' | 'E')) {
                    return Err(Error::Config(format!(
                        "pattern '{letters}' is not 'hybrid', 'E/B' or a string over {{B,E}}"
                    )));
                }
                Ok(StagePattern::PerStage(chars))
            }
        }
    }
}

impl fmt::Display for StagePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StagePattern::PerStage(v) => write!(f, "{}", v.iter().collect::<String>()),
            StagePattern::Alternate => write!(f, "E/B"),
            StagePattern::Hybrid => write!(f, "hybrid"),
        }
    }
}

// ── ResNet-family builder ────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResnetDepth {
    R26,
    R50,
    R101,
    Wrn50x2,
    Wrn101x2,
}

impl ResnetDepth {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "r26" => ResnetDepth::R26,
            "r50" => ResnetDepth::R50,
            "r101" => ResnetDepth::R101,
            "wrn50_2" => ResnetDepth::Wrn50x2,
            "wrn101_2" => ResnetDepth::Wrn101x2,
            other => return Err(Error::Config(format!("unknown depth config '{other}'"))),
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ResnetDepth::R26 => "r26",
            ResnetDepth::R50 => "r50",
            ResnetDepth::R101 => "r101",
            ResnetDepth::Wrn50x2 => "wrn50_2",
            ResnetDepth::Wrn101x2 => "wrn101_2",
        }
    }

    fn blocks_per_stage(&self) -> [usize; 4] {
        match self {
            ResnetDepth::R26 => [2, 2, 2, 2],
            ResnetDepth::R50 | ResnetDepth::Wrn50x2 => [3, 4, 6, 3],
            ResnetDepth::R101 | ResnetDepth::Wrn101x2 => [3, 4, 23, 3],
        }
    }

    fn inner_multiplier(&self) -> usize {
        match self {
            ResnetDepth::Wrn50x2 | ResnetDepth::Wrn101x2 => 2,
            _ => 1,
        }
    }

    /// The r26 study runs at CIFAR scale: 32x32 inputs, a 3x3 stride-1
    /// stem and the ImageNet widths divided by 4.
    fn is_cifar_scale(&self) -> bool {
        matches!(self, ResnetDepth::R26)
    }
}

/// Knobs beyond the pattern: which op substituted (E) blocks use and which
/// op regular (B) blocks use.
#[derive(Clone, Copy, Debug)]
pub struct ResnetOptions {
    pub e_op: SpatialOp,
    pub b_op: SpatialOp,
    pub use_se: bool,
    pub classes: usize,
}

impl Default for ResnetOptions {
    fn default() -> Self {
        ResnetOptions {
            e_op: SpatialOp::MaxPool3,
            b_op: SpatialOp::Conv3x3,
            use_se: false,
            classes: 1000,
        }
    }
}

pub fn build_resnet(
    depth: ResnetDepth,
    pattern: &StagePattern,
    opts: &ResnetOptions,
) -> Result<ArchSpec> {
    if !matches!(
        opts.e_op,
        SpatialOp::MaxPool3 | SpatialOp::AvgPool3 | SpatialOp::DeformMax | SpatialOp::DeformAvg | SpatialOp::Shift
    ) {
        return Err(Error::Config(format!(
            "'{}' cannot serve as the substituted-block operator",
            opts.e_op.as_str()
        )));
    }
    if !matches!(
        opts.b_op,
        SpatialOp::Conv3x3 | SpatialOp::Conv1x1 | SpatialOp::DwConv3x3
    ) {
        return Err(Error::Config(format!(
            "'{}' cannot serve as the regular-block operator",
            opts.b_op.as_str()
        )));
    }
    let counts = depth.blocks_per_stage();
    if let StagePattern::PerStage(letters) = pattern {
        if letters.len() != counts.len() {
            return Err(Error::Config(format!(
                "pattern length {} does not match {} stages",
                letters.len(),
                counts.len()
            )));
        }
    }
    let cifar = depth.is_cifar_scale();
    let div = if cifar { 4 } else { 1 };
    let widths = [256 / div, 512 / div, 1024 / div, 2048 / div];
    let mult = depth.inner_multiplier();
    let stem_out = 64 / div;
    let (input, stem) = if cifar {
        ((3, 32, 32), StemSpec::Cifar { out: stem_out })
    } else {
        ((3, 224, 224), StemSpec::ResNet { out: stem_out })
    };

    let mut stages = Vec::new();
    let mut in_ch = stem_out;
    let mut global = 0usize;
    for (si, &count) in counts.iter().enumerate() {
        let out_ch = widths[si];
        // Inner width: rho = 1/4 of the output width, doubled for WRN.
        let inner = out_ch / 4 * mult;
        let mut blocks = Vec::new();
        for bi in 0..count {
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            let efficient = match pattern {
                StagePattern::PerStage(letters) => letters[si] == 'E',
                StagePattern::Alternate => global % 2 == 0,
                StagePattern::Hybrid => stride == 1,
            };
            let op = if efficient { opts.e_op } else { opts.b_op };
            let mut b = BlockSpec::bottleneck(op, in_ch, out_ch, (inner, in_ch), stride);
            b.use_se = opts.use_se;
            if matches!(pattern, StagePattern::Hybrid) && !efficient {
                b.pre_pool = true;
            }
            blocks.push(b);
            in_ch = out_ch;
            global += 1;
        }
        stages.push(StageSpec { blocks });
    }
    let spec = ArchSpec {
        name: format!("{}-{}-{}", depth.as_str(), pattern, opts.e_op.as_str()),
        input,
        stem,
        stages,
        head: HeadSpec::GapLinear {
            classes: opts.classes,
        },
    };
    spec.validate()?;
    Ok(spec)
}

/// A single bottleneck block between a small stem and the classifier, the
/// unit of the expansion-ratio/operator grid study. `rho` is (num, den).
pub fn build_single_bottleneck(
    width: usize,
    rho: (usize, usize),
    op: SpatialOp,
    classes: usize,
) -> Result<ArchSpec> {
    let block = BlockSpec::bottleneck(op, width, width, rho, 1);
    let spec = ArchSpec {
        name: format!(
            "single-w{width}-rho{}_{}-{}",
            rho.0,
            rho.1,
            op.as_str()
        ),
        input: (3, 32, 32),
        stem: StemSpec::Cifar { out: width },
        stages: vec![StageSpec {
            blocks: vec![block],
        }],
        head: HeadSpec::GapLinear { classes },
    };
    spec.validate()?;
    Ok(spec)
}

// ── ViT-family builder ───────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct VitConfig {
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub classes: usize,
    pub input_side: usize,
}

impl VitConfig {
    /// ViT-S-like reconstruction: patch 16, dim 384, depth 12, heads 6.
    pub fn vit_s_like() -> Self {
        VitConfig {
            patch: 16,
            dim: 384,
            depth: 12,
            heads: 6,
            classes: 1000,
            input_side: 224,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EffLayout {
    /// All standard transformer blocks.
    None,
    /// Standard and efficient blocks used alternately, standard first.
    Alternate,
    /// Every block efficient; the forward pass contains no attention.
    All,
}

impl EffLayout {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => EffLayout::None,
            "alternate" => EffLayout::Alternate,
            "all" => EffLayout::All,
            other => return Err(Error::Config(format!("unknown layout '{other}'"))),
        })
    }

    fn efficient_at(&self, index: usize) -> bool {
        match self {
            EffLayout::None => false,
            EffLayout::Alternate => index % 2 == 1,
            EffLayout::All => true,
        }
    }
}

pub fn build_vit(cfg: &VitConfig, layout: EffLayout) -> Result<ArchSpec> {
    if cfg.input_side % cfg.patch != 0 {
        return Err(Error::Config(format!(
            "input side {} not divisible by patch {}",
            cfg.input_side, cfg.patch
        )));
    }
    let blocks = (0..cfg.depth)
        .map(|i| BlockSpec::transformer(cfg.dim, cfg.heads, layout.efficient_at(i)))
        .collect();
    let spec = ArchSpec {
        name: format!("vit_s_like-{:?}", layout).to_lowercase(),
        input: (3, cfg.input_side, cfg.input_side),
        stem: StemSpec::PatchEmbed {
            patch: cfg.patch,
            dim: cfg.dim,
        },
        stages: vec![StageSpec { blocks }],
        head: HeadSpec::GapLinear {
            classes: cfg.classes,
        },
    };
    spec.validate()?;
    Ok(spec)
}

/// pit_like: a token-pyramid approximation, not a reproduction. One 2x
/// token-grid downsampling (stride-2 depthwise conv, width doubled) after
/// depths 2 and 6; dims 192/384/768, heads dim/64.
pub fn build_pit_like(layout: EffLayout, classes: usize) -> Result<ArchSpec> {
    let dims = [192usize, 384, 768];
    let depths = [2usize, 4, 6];
    let mut stages = Vec::new();
    let mut global = 0usize;
    for (si, (&dim, &depth)) in dims.iter().zip(&depths).enumerate() {
        let mut blocks = Vec::new();
        if si > 0 {
            let mut down = BlockSpec::bottleneck(SpatialOp::DwConv3x3, dims[si - 1], dim, (1, 1), 2);
            down.kind = BlockKind::TokenDownsample;
            blocks.push(down);
        }
        for _ in 0..depth {
            blocks.push(BlockSpec::transformer(
                dim,
                dim / 64,
                layout.efficient_at(global),
            ));
            global += 1;
        }
        stages.push(StageSpec { blocks });
    }
    let spec = ArchSpec {
        name: format!("pit_like-{:?}", layout).to_lowercase(),
        input: (3, 224, 224),
        stem: StemSpec::PatchEmbed { patch: 16, dim: dims[0] },
        stages,
        head: HeadSpec::GapLinear { classes },
    };
    spec.validate()?;
    Ok(spec)
}

// ── replacement enumeration ──────────────────────────────────────────

/// Lazily yields every assignment of `ops` to the base's blocks:
/// ops.len() ^ block_count specs, each differing from the base only in the
/// per-block spatial operator (and the block kind it implies).
pub fn enumerate_replacements(
    base: &ArchSpec,
    ops: &[SpatialOp],
) -> impl Iterator<Item = ArchSpec> {
    let base = base.clone();
    let ops = ops.to_vec();
    let blocks = base.block_count();
    let mut odometer = vec![0usize; blocks];
    let mut done = ops.is_empty();
    std::iter::from_fn(move || {
        if done {
            return None;
        }
        let mut spec = base.clone();
        let mut i = 0;
        for stage in &mut spec.stages {
            for b in &mut stage.blocks {
                *b = b.with_spatial(ops[odometer[i]]);
                i += 1;
            }
        }
        spec.name = format!(
            "{}-perm{}",
            base.name,
            odometer
                .iter()
                .map(|d| d.to_string())
                .collect::<String>()
        );
        // Advance the odometer; stop after the last combination.
        done = true;
        for d in odometer.iter_mut().rev() {
            *d += 1;
            if *d < ops.len() {
                done = false;
                break;
            }
            *d = 0;
        }
        Some(spec)
    })
}

// ── text serialization ───────────────────────────────────────────────

const SCHEMA: &str = "pfnet-arch v1";

impl ArchSpec {
    /// Nested key/value text document, schema versioned.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(SCHEMA);
        s.push('\n');
        s.push_str(&format!("name {}\n", self.name));
        s.push_str(&format!(
            "input {} {} {}\n",
            self.input.0, self.input.1, self.input.2
        ));
        match &self.stem {
            StemSpec::ResNet { out } => s.push_str(&format!("stem resnet {out}\n")),
            StemSpec::Cifar { out } => s.push_str(&format!("stem cifar {out}\n")),
            StemSpec::PatchEmbed { patch, dim } => {
                s.push_str(&format!("stem patch_embed {patch} {dim}\n"))
            }
        }
        for stage in &self.stages {
            s.push_str("stage\n");
            for b in &stage.blocks {
                s.push_str(&format!(
                    "  block kind={} in={} out={} rho={}/{} stride={} spatial={} se={} prepool={} heads={}\n",
                    b.kind.as_str(),
                    b.in_channels,
                    b.out_channels,
                    b.rho_num,
                    b.rho_den,
                    b.stride,
                    b.spatial.as_str(),
                    b.use_se,
                    b.pre_pool,
                    b.heads
                ));
            }
            s.push_str("end\n");
        }
        match &self.head {
            HeadSpec::GapLinear { classes } => s.push_str(&format!("head gap_linear {classes}\n")),
        }
        s
    }

    pub fn from_text(text: &str) -> Result<ArchSpec> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines.next().unwrap_or_default();
        if header != SCHEMA {
            return Err(Error::Format(format!(
                "expected header '{SCHEMA}', found '{header}'"
            )));
        }
        let mut name = String::new();
        let mut input = None;
        let mut stem = None;
        let mut head = None;
        let mut stages: Vec<StageSpec> = Vec::new();
        let mut current: Option<Vec<BlockSpec>> = None;

        for line in lines {
            let mut parts = line.split_whitespace();
            match parts.next().unwrap_or_default() {
                "name" => name = parts.collect::<Vec<_>>().join(" "),
                "input" => {
                    let v: Vec<usize> = parse_ints(parts, 3, "input")?;
                    input = Some((v[0], v[1], v[2]));
                }
                "stem" => {
                    stem = Some(match parts.next() {
                        Some("resnet") => StemSpec::ResNet {
                            out: parse_int(parts.next(), "stem out")?,
                        },
                        Some("cifar") => StemSpec::Cifar {
                            out: parse_int(parts.next(), "stem out")?,
                        },
                        Some("patch_embed") => StemSpec::PatchEmbed {
                            patch: parse_int(parts.next(), "patch")?,
                            dim: parse_int(parts.next(), "dim")?,
                        },
                        other => {
                            return Err(Error::Format(format!("unknown stem {other:?}")))
                        }
                    });
                }
                "stage" => {
                    if current.is_some() {
                        return Err(Error::Format("nested stage".into()));
                    }
                    current = Some(Vec::new());
                }
                "end" => {
                    let blocks = current
                        .take()
                        .ok_or_else(|| Error::Format("'end' outside stage".into()))?;
                    stages.push(StageSpec { blocks });
                }
                "block" => {
                    let blocks = current
                        .as_mut()
                        .ok_or_else(|| Error::Format("'block' outside stage".into()))?;
                    blocks.push(parse_block(parts)?);
                }
                "head" => {
                    head = Some(match parts.next() {
                        Some("gap_linear") => HeadSpec::GapLinear {
                            classes: parse_int(parts.next(), "classes")?,
                        },
                        other => {
                            return Err(Error::Format(format!("unknown head {other:?}")))
                        }
                    });
                }
                other => return Err(Error::Format(format!("unknown directive '{other}'"))),
            }
        }
        if current.is_some() {
            return Err(Error::Format("unterminated stage".into()));
        }
        let spec = ArchSpec {
            name,
            input: input.ok_or_else(|| Error::Format("missing input".into()))?,
            stem: stem.ok_or_else(|| Error::Format("missing stem".into()))?,
            stages,
            head: head.ok_or_else(|| Error::Format("missing head".into()))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_int(s: Option<&str>, what: &str) -> Result<usize> {
    s.and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad or missing {what}")))
}

fn parse_ints<'a>(
    parts: impl Iterator<Item = &'a str>,
    want: usize,
    what: &str,
) -> Result<Vec<usize>> {
    let v: Vec<usize> = parts.filter_map(|p| p.parse().ok()).collect();
    if v.len() != want {
        return Err(Error::Format(format!("{what} expects {want} integers")));
    }
    Ok(v)
}

fn parse_block<'a>(parts: impl Iterator<Item = &'a str>) -> Result<BlockSpec> {
    let mut b = BlockSpec::bottleneck(SpatialOp::Conv3x3, 1, 1, (1, 1), 1);
    for kv in parts {
        let (key, val) = kv
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("expected key=value, got '{kv}'")))?;
        match key {
            "kind" => b.kind = BlockKind::parse(val)?,
            "in" => b.in_channels = parse_int(Some(val), "in")?,
            "out" => b.out_channels = parse_int(Some(val), "out")?,
            "rho" => {
                let (n, d) = val
                    .split_once('/')
                    .ok_or_else(|| Error::Format(format!("rho '{val}' is not num/den")))?;
                b.rho_num = parse_int(Some(n), "rho num")?;
                b.rho_den = parse_int(Some(d), "rho den")?;
            }
            "stride" => b.stride = parse_int(Some(val), "stride")?,
            "spatial" => b.spatial = SpatialOp::parse(val)?,
            "se" => b.use_se = val == "true",
            "prepool" => b.pre_pool = val == "true",
            "heads" => b.heads = parse_int(Some(val), "heads")?,
            other => return Err(Error::Format(format!("unknown block field '{other}'"))),
        }
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r50_baseline_structure() {
        let spec = build_resnet(
            ResnetDepth::R50,
            &StagePattern::parse("BBBB").unwrap(),
            &ResnetOptions::default(),
        )
        .unwrap();
        assert_eq!(spec.block_count(), 16);
        assert!(spec
            .blocks()
            .all(|b| b.kind == BlockKind::RegularBottleneck));
        let strides: Vec<usize> = spec.blocks().map(|b| b.stride).collect();
        assert_eq!(strides.iter().filter(|&&s| s == 2).count(), 3);
    }

    #[test]
    fn hybrid_keeps_regular_only_at_downsampling() {
        let spec = build_resnet(
            ResnetDepth::R50,
            &StagePattern::Hybrid,
            &ResnetOptions::default(),
        )
        .unwrap();
        let b: Vec<&BlockSpec> = spec
            .blocks()
            .filter(|b| b.kind == BlockKind::RegularBottleneck)
            .collect();
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|b| b.stride == 2 && b.pre_pool));
        assert_eq!(
            spec.blocks()
                .filter(|b| b.kind == BlockKind::EfficientBottleneck)
                .count(),
            13
        );
    }

    #[test]
    fn alternate_pattern_starts_with_efficient() {
        let spec = build_resnet(
            ResnetDepth::R50,
            &StagePattern::Alternate,
            &ResnetOptions::default(),
        )
        .unwrap();
        let kinds: Vec<BlockKind> = spec.blocks().map(|b| b.kind).collect();
        assert_eq!(kinds[0], BlockKind::EfficientBottleneck);
        assert_eq!(kinds[1], BlockKind::RegularBottleneck);
        assert_eq!(
            kinds
                .iter()
                .filter(|k| **k == BlockKind::EfficientBottleneck)
                .count(),
            8
        );
    }

    #[test]
    fn pattern_length_mismatch_rejected() {
        assert!(build_resnet(
            ResnetDepth::R50,
            &StagePattern::parse("BBB").unwrap(),
            &ResnetOptions::default(),
        )
        .is_err());
    }

    #[test]
    fn r26_is_cifar_scale_with_eight_blocks() {
        let spec = build_resnet(
            ResnetDepth::R26,
            &StagePattern::parse("BBBB").unwrap(),
            &ResnetOptions {
                classes: 10,
                ..ResnetOptions::default()
            },
        )
        .unwrap();
        assert_eq!(spec.block_count(), 8);
        assert_eq!(spec.input, (3, 32, 32));
        assert_eq!(spec.stem, StemSpec::Cifar { out: 16 });
    }

    #[test]
    fn vit_alternate_counts() {
        let cfg = VitConfig::vit_s_like();
        let spec = build_vit(&cfg, EffLayout::Alternate).unwrap();
        let std = spec
            .blocks()
            .filter(|b| b.kind == BlockKind::Transformer)
            .count();
        let eff = spec
            .blocks()
            .filter(|b| b.kind == BlockKind::EfficientTransformer)
            .count();
        assert_eq!((std, eff), (6, 6));
        // 224/16 = 14x14 token grid.
        assert_eq!(cfg.input_side / cfg.patch, 14);
    }

    #[test]
    fn enumeration_sizes() {
        let base = build_resnet(
            ResnetDepth::R26,
            &StagePattern::parse("BBBB").unwrap(),
            &ResnetOptions::default(),
        )
        .unwrap();
        let two = enumerate_replacements(&base, &[SpatialOp::Conv3x3, SpatialOp::MaxPool3]);
        assert_eq!(two.count(), 256);
        let one: Vec<ArchSpec> = enumerate_replacements(&base, &[SpatialOp::Conv3x3]).collect();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].stages, base.stages);
    }

    #[test]
    fn enumeration_only_touches_spatial_ops() {
        let base = build_resnet(
            ResnetDepth::R26,
            &StagePattern::parse("BBBB").unwrap(),
            &ResnetOptions::default(),
        )
        .unwrap();
        for spec in enumerate_replacements(&base, &[SpatialOp::Conv3x3, SpatialOp::MaxPool3]).take(32)
        {
            for (a, b) in spec.blocks().zip(base.blocks()) {
                assert_eq!(a.in_channels, b.in_channels);
                assert_eq!(a.out_channels, b.out_channels);
                assert_eq!(a.stride, b.stride);
                assert_eq!((a.rho_num, a.rho_den), (b.rho_num, b.rho_den));
                assert_eq!(a.kind, a.spatial.block_kind());
            }
        }
    }

    #[test]
    fn text_round_trip() {
        for spec in [
            build_resnet(
                ResnetDepth::R50,
                &StagePattern::Hybrid,
                &ResnetOptions::default(),
            )
            .unwrap(),
            build_vit(&VitConfig::vit_s_like(), EffLayout::Alternate).unwrap(),
            build_pit_like(EffLayout::Alternate, 1000).unwrap(),
        ] {
            let text = spec.to_text();
            let back = ArchSpec::from_text(&text).unwrap();
            assert_eq!(spec, back);
        }
    }

    #[test]
    fn malformed_text_rejected() {
        assert!(matches!(
            ArchSpec::from_text("bogus"),
            Err(Error::Format(_))
        ));
        let spec = build_resnet(
            ResnetDepth::R50,
            &StagePattern::Hybrid,
            &ResnetOptions::default(),
        )
        .unwrap();
        let broken = spec.to_text().replace("head gap_linear 1000", "");
        assert!(ArchSpec::from_text(&broken).is_err());
    }

    #[test]
    fn empty_stage_rejected_at_build() {
        let spec = ArchSpec {
            name: "empty".into(),
            input: (3, 32, 32),
            stem: StemSpec::Cifar { out: 16 },
            stages: vec![StageSpec { blocks: vec![] }],
            head: HeadSpec::GapLinear { classes: 10 },
        };
        assert!(spec.validate().is_err());
    }
}
