//! Analytic parameter and multiply-add counting over an [`ArchSpec`].
//!
//! Conventions: conv MACs are out * (in/groups) * k^2 * Hout * Wout, linear
//! MACs are in * out * tokens, attention adds the two T^2 * D matmuls, and
//! pooling, shift, activations and normalization count zero MACs (BN and LN
//! still count their 2C affine parameters). Deformable pooling counts its
//! predictor convolution plus 4 multiplies per sampled tap per channel.
//! MACs are reported for a single image.

use crate::arch::{ArchSpec, BlockKind, BlockSpec, HeadSpec, SpatialOp, StemSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LayerRow {
    /// Grouping key: "stem", "stageS.blockB" or "head".
    pub unit: String,
    pub name: String,
    pub kind: String,
    pub params: u64,
    pub macs: u64,
    /// Output geometry (channels, height, width); token layers report
    /// (dim, grid_h, grid_w).
    pub out: (usize, usize, usize),
}

#[derive(Clone, Debug)]
pub struct CostReport {
    pub arch: String,
    pub input: (usize, usize, usize),
    pub rows: Vec<LayerRow>,
    pub params: u64,
    pub macs: u64,
}

impl CostReport {
    pub fn params_m(&self) -> f64 {
        (self.params as f64 / 1e6 * 10.0).round() / 10.0
    }

    pub fn macs_g(&self) -> f64 {
        (self.macs as f64 / 1e9 * 10.0).round() / 10.0
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("unit,layer,kind,params,macs,out_c,out_h,out_w\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.unit, r.name, r.kind, r.params, r.macs, r.out.0, r.out.1, r.out.2
            ));
        }
        s.push_str(&format!("total,,,{},{},,,\n", self.params, self.macs));
        s
    }

    pub fn to_json(&self) -> String {
        let mut s = String::from("{\n");
        s.push_str(&format!("  \"arch\": \"{}\",\n", self.arch));
        s.push_str(&format!(
            "  \"input\": [{}, {}, {}],\n",
            self.input.0, self.input.1, self.input.2
        ));
        s.push_str(&format!("  \"params\": {},\n", self.params));
        s.push_str(&format!("  \"macs\": {},\n", self.macs));
        s.push_str("  \"layers\": [\n");
        for (i, r) in self.rows.iter().enumerate() {
            s.push_str(&format!(
                "    {{\"unit\": \"{}\", \"name\": \"{}\", \"kind\": \"{}\", \"params\": {}, \"macs\": {}, \"out\": [{}, {}, {}]}}{}\n",
                r.unit,
                r.name,
                r.kind,
                r.params,
                r.macs,
                r.out.0,
                r.out.1,
                r.out.2,
                if i + 1 == self.rows.len() { "" } else { "," }
            ));
        }
        s.push_str("  ]\n}\n");
        s
    }
}

struct Walk {
    rows: Vec<LayerRow>,
}

impl Walk {
    fn row(&mut self, unit: &str, name: &str, kind: &str, params: u64, macs: u64, out: (usize, usize, usize)) {
        self.rows.push(LayerRow {
            unit: unit.to_string(),
            name: name.to_string(),
            kind: kind.to_string(),
            params,
            macs,
            out,
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        unit: &str,
        name: &str,
        kind: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        groups: usize,
        bias: bool,
        out: (usize, usize),
    ) {
        let params = (out_ch * (in_ch / groups) * k * k + if bias { out_ch } else { 0 }) as u64;
        let macs = (out_ch * (in_ch / groups) * k * k) as u64 * (out.0 * out.1) as u64;
        self.row(unit, name, kind, params, macs, (out_ch, out.0, out.1));
    }

    fn bn(&mut self, unit: &str, name: &str, c: usize, out: (usize, usize)) {
        self.row(unit, name, "bn", 2 * c as u64, 0, (c, out.0, out.1));
    }

    fn ln(&mut self, unit: &str, name: &str, d: usize, tokens: (usize, usize)) {
        self.row(unit, name, "ln", 2 * d as u64, 0, (d, tokens.0, tokens.1));
    }

    fn linear(&mut self, unit: &str, name: &str, inputs: usize, outputs: usize, tokens: usize, grid: (usize, usize)) {
        let params = (inputs * outputs + outputs) as u64;
        let macs = (inputs * outputs * tokens) as u64;
        self.row(unit, name, "linear", params, macs, (outputs, grid.0, grid.1));
    }
}

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Counts parameters and multiply-adds for the spec at the given input
/// side (square), defaulting to the spec's own geometry.
pub fn count(spec: &ArchSpec, input_side: Option<usize>) -> Result<CostReport> {
    spec.validate()?;
    let (c_in, mut h, mut w) = spec.input;
    if let Some(side) = input_side {
        h = side;
        w = side;
    }
    let input = (c_in, h, w);
    let mut walk = Walk { rows: Vec::new() };

    // Stem.
    let mut ch;
    let token_body = matches!(spec.stem, StemSpec::PatchEmbed { .. });
    match &spec.stem {
        StemSpec::ResNet { out } => {
            h = conv_out(h, 7, 2, 3);
            w = conv_out(w, 7, 2, 3);
            walk.conv("stem", "stem.conv", "conv7x7", c_in, *out, 7, 1, false, (h, w));
            walk.bn("stem", "stem.bn", *out, (h, w));
            h = conv_out(h, 3, 2, 1);
            w = conv_out(w, 3, 2, 1);
            walk.row("stem", "stem.pool", "maxpool3", 0, 0, (*out, h, w));
            ch = *out;
        }
        StemSpec::Cifar { out } => {
            h = conv_out(h, 3, 1, 1);
            w = conv_out(w, 3, 1, 1);
            walk.conv("stem", "stem.conv", "conv3x3", c_in, *out, 3, 1, false, (h, w));
            walk.bn("stem", "stem.bn", *out, (h, w));
            ch = *out;
        }
        StemSpec::PatchEmbed { patch, dim } => {
            if h % patch != 0 || w % patch != 0 {
                return Err(Error::Config(format!(
                    "input {h}x{w} not divisible by patch {patch}"
                )));
            }
            h /= patch;
            w /= patch;
            walk.conv("stem", "stem.patch", "patch_embed", c_in, *dim, *patch, 1, true, (h, w));
            walk.row(
                "stem",
                "stem.pos_embed",
                "pos_embed",
                (h * w * dim) as u64,
                0,
                (*dim, h, w),
            );
            ch = *dim;
        }
    }

    // Stages.
    for (si, stage) in spec.stages.iter().enumerate() {
        for (bi, b) in stage.blocks.iter().enumerate() {
            let unit = format!("stage{}.block{}", si + 1, bi + 1);
            let (nh, nw) = count_block(&mut walk, &unit, b, (h, w))?;
            h = nh;
            w = nw;
            ch = b.out_channels;
        }
    }

    // Head.
    if token_body {
        walk.ln("head", "head.norm", ch, (h, w));
    }
    walk.row("head", "head.gap", "gap", 0, 0, (ch, 1, 1));
    let classes = match spec.head {
        HeadSpec::GapLinear { classes } => classes,
    };
    walk.linear("head", "head.fc", ch, classes, 1, (1, 1));

    let params = walk.rows.iter().map(|r| r.params).sum();
    let macs = walk.rows.iter().map(|r| r.macs).sum();
    Ok(CostReport {
        arch: spec.name.clone(),
        input,
        rows: walk.rows,
        params,
        macs,
    })
}

fn count_block(walk: &mut Walk, unit: &str, b: &BlockSpec, (h, w): (usize, usize)) -> Result<(usize, usize)> {
    match b.kind {
        BlockKind::Transformer => {
            let d = b.in_channels;
            let t = h * w;
            let hidden = d * b.rho_num / b.rho_den;
            walk.ln(unit, &format!("{unit}.ln1"), d, (h, w));
            // qkv projection with query and value biases (no key bias: a
            // shared key offset cancels in the softmax).
            walk.row(
                unit,
                &format!("{unit}.attn.qkv"),
                "linear",
                (d * 3 * d + 2 * d) as u64,
                (d * 3 * d * t) as u64,
                (3 * d, h, w),
            );
            // QK^T and AV: T^2 * D each.
            walk.row(
                unit,
                &format!("{unit}.attn.scores"),
                "attention",
                0,
                2 * (t * t * d) as u64,
                (d, h, w),
            );
            walk.linear(unit, &format!("{unit}.attn.proj"), d, d, t, (h, w));
            walk.ln(unit, &format!("{unit}.ln2"), d, (h, w));
            walk.linear(unit, &format!("{unit}.mlp.fc1"), d, hidden, t, (h, w));
            walk.linear(unit, &format!("{unit}.mlp.fc2"), hidden, d, t, (h, w));
            Ok((h, w))
        }
        BlockKind::EfficientTransformer => {
            let d = b.in_channels;
            let t = h * w;
            let hidden = d * b.rho_num / b.rho_den;
            walk.ln(unit, &format!("{unit}.ln1"), d, (h, w));
            walk.linear(unit, &format!("{unit}.eff.lin_in"), d, 3 * d, t, (h, w));
            walk.row(
                unit,
                &format!("{unit}.eff.pool"),
                b.spatial.as_str(),
                0,
                0,
                (3 * d, h, w),
            );
            walk.linear(unit, &format!("{unit}.eff.lin_out"), 3 * d, d, t, (h, w));
            walk.ln(unit, &format!("{unit}.ln2"), d, (h, w));
            walk.linear(unit, &format!("{unit}.mlp.fc1"), d, hidden, t, (h, w));
            walk.linear(unit, &format!("{unit}.mlp.fc2"), hidden, d, t, (h, w));
            Ok((h, w))
        }
        BlockKind::TokenDownsample => {
            let (nh, nw) = (conv_out(h, 3, 2, 1), conv_out(w, 3, 2, 1));
            walk.conv(
                unit,
                &format!("{unit}.dwconv"),
                "dwconv3x3",
                b.in_channels,
                b.in_channels,
                3,
                b.in_channels,
                true,
                (nh, nw),
            );
            walk.linear(
                unit,
                &format!("{unit}.proj"),
                b.in_channels,
                b.out_channels,
                nh * nw,
                (nh, nw),
            );
            Ok((nh, nw))
        }
        _ => count_bottleneck(walk, unit, b, (h, w)),
    }
}

fn count_bottleneck(
    walk: &mut Walk,
    unit: &str,
    b: &BlockSpec,
    (h, w): (usize, usize),
) -> Result<(usize, usize)> {
    let inner = b.inner()?;
    walk.conv(
        unit,
        &format!("{unit}.conv1"),
        "conv1x1",
        b.in_channels,
        inner,
        1,
        1,
        false,
        (h, w),
    );
    walk.bn(unit, &format!("{unit}.bn1"), inner, (h, w));

    let (mut mh, mut mw) = (h, w);
    let op_stride = if b.pre_pool { 1 } else { b.stride };
    if b.pre_pool {
        mh = conv_out(mh, 2, 2, 0);
        mw = conv_out(mw, 2, 2, 0);
        walk.row(unit, &format!("{unit}.prepool"), "avgpool2", 0, 0, (inner, mh, mw));
    }
    match b.spatial {
        SpatialOp::Conv3x3 => {
            mh = conv_out(mh, 3, op_stride, 1);
            mw = conv_out(mw, 3, op_stride, 1);
            walk.conv(unit, &format!("{unit}.conv2"), "conv3x3", inner, inner, 3, 1, false, (mh, mw));
            walk.bn(unit, &format!("{unit}.bn2"), inner, (mh, mw));
        }
        SpatialOp::Conv1x1 => {
            mh = conv_out(mh, 1, op_stride, 0);
            mw = conv_out(mw, 1, op_stride, 0);
            walk.conv(unit, &format!("{unit}.conv2"), "conv1x1", inner, inner, 1, 1, false, (mh, mw));
            walk.bn(unit, &format!("{unit}.bn2"), inner, (mh, mw));
        }
        SpatialOp::DwConv3x3 => {
            mh = conv_out(mh, 3, op_stride, 1);
            mw = conv_out(mw, 3, op_stride, 1);
            walk.conv(
                unit,
                &format!("{unit}.conv2"),
                "dwconv3x3",
                inner,
                inner,
                3,
                inner,
                false,
                (mh, mw),
            );
            walk.bn(unit, &format!("{unit}.bn2"), inner, (mh, mw));
        }
        SpatialOp::MaxPool3 | SpatialOp::AvgPool3 | SpatialOp::Shift => {
            mh = conv_out(mh, 3, op_stride, 1);
            mw = conv_out(mw, 3, op_stride, 1);
            walk.row(
                unit,
                &format!("{unit}.spatial"),
                b.spatial.as_str(),
                0,
                0,
                (inner, mh, mw),
            );
        }
        SpatialOp::DeformMax | SpatialOp::DeformAvg => {
            let k = 3usize;
            mh = conv_out(mh, k, op_stride, 1);
            mw = conv_out(mw, k, op_stride, 1);
            walk.conv(
                unit,
                &format!("{unit}.offset_pred"),
                "conv3x3",
                inner,
                2 * k * k,
                k,
                1,
                true,
                (mh, mw),
            );
            // 4 multiplies per bilinear sample, k*k taps per output cell.
            let sampling = 4 * k * k * inner * mh * mw;
            walk.row(
                unit,
                &format!("{unit}.spatial"),
                b.spatial.as_str(),
                0,
                sampling as u64,
                (inner, mh, mw),
            );
        }
        SpatialOp::Attention => {
            return Err(Error::Config("attention inside a bottleneck".into()));
        }
    }

    walk.conv(
        unit,
        &format!("{unit}.conv3"),
        "conv1x1",
        inner,
        b.out_channels,
        1,
        1,
        false,
        (mh, mw),
    );
    walk.bn(unit, &format!("{unit}.bn3"), b.out_channels, (mh, mw));

    if b.use_se {
        let squeeze = (b.out_channels / 16).max(1);
        walk.linear(unit, &format!("{unit}.se.fc1"), b.out_channels, squeeze, 1, (1, 1));
        walk.linear(unit, &format!("{unit}.se.fc2"), squeeze, b.out_channels, 1, (1, 1));
    }

    if b.needs_projection() && b.kind != BlockKind::InvertedBottleneck {
        let (sh, sw) = (conv_out(h, 1, b.stride, 0), conv_out(w, 1, b.stride, 0));
        walk.conv(
            unit,
            &format!("{unit}.shortcut.conv"),
            "conv1x1",
            b.in_channels,
            b.out_channels,
            1,
            1,
            false,
            (sh, sw),
        );
        walk.bn(unit, &format!("{unit}.shortcut.bn"), b.out_channels, (sh, sw));
    }
    Ok((mh, mw))
}

// ── diffing ──────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct DiffRow {
    pub unit: String,
    pub params_a: u64,
    pub params_b: u64,
    pub macs_a: u64,
    pub macs_b: u64,
}

#[derive(Clone, Debug)]
pub struct DiffReport {
    pub rows: Vec<DiffRow>,
    pub a: CostReport,
    pub b: CostReport,
}

impl DiffReport {
    /// Percentage reduction of parameters from a to b (positive = smaller).
    pub fn params_reduction_pct(&self) -> f64 {
        100.0 * (self.a.params as f64 - self.b.params as f64) / self.a.params as f64
    }

    pub fn macs_reduction_pct(&self) -> f64 {
        100.0 * (self.a.macs as f64 - self.b.macs as f64) / self.a.macs as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("unit,params_a,params_b,params_delta,macs_a,macs_b,macs_delta\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.unit,
                r.params_a,
                r.params_b,
                r.params_b as i64 - r.params_a as i64,
                r.macs_a,
                r.macs_b,
                r.macs_b as i64 - r.macs_a as i64
            ));
        }
        s
    }
}

fn unit_totals(report: &CostReport) -> Vec<(String, u64, u64)> {
    let mut units: Vec<(String, u64, u64)> = Vec::new();
    for r in &report.rows {
        match units.last_mut() {
            Some((u, p, m)) if *u == r.unit => {
                *p += r.params;
                *m += r.macs;
            }
            _ => units.push((r.unit.clone(), r.params, r.macs)),
        }
    }
    units
}

/// Per-unit cost deltas between two architectures sharing stage structure.
pub fn count_diff(a: &ArchSpec, b: &ArchSpec, input_side: Option<usize>) -> Result<DiffReport> {
    let stages_a: Vec<usize> = a.stages.iter().map(|s| s.blocks.len()).collect();
    let stages_b: Vec<usize> = b.stages.iter().map(|s| s.blocks.len()).collect();
    if stages_a != stages_b {
        return Err(Error::Usage(format!(
            "stage structures differ: {stages_a:?} vs {stages_b:?}"
        )));
    }
    let ra = count(a, input_side)?;
    let rb = count(b, input_side)?;
    let ua = unit_totals(&ra);
    let ub = unit_totals(&rb);
    if ua.len() != ub.len() {
        return Err(Error::Usage("unit structures differ".into()));
    }
    let rows = ua
        .into_iter()
        .zip(ub)
        .map(|((unit, pa, ma), (_, pb, mb))| DiffRow {
            unit,
            params_a: pa,
            params_b: pb,
            macs_a: ma,
            macs_b: mb,
        })
        .collect();
    Ok(DiffReport { rows, a: ra, b: rb })
}

// ── describe ─────────────────────────────────────────────────────────

/// Human-readable layer table: one row per unit (stem, each block, head)
/// with shapes, op kind and parameter counts.
pub fn describe(spec: &ArchSpec, input_side: Option<usize>) -> Result<String> {
    let report = count(spec, input_side)?;
    let units = unit_totals(&report);
    let mut kind_of: Vec<(String, String, (usize, usize, usize))> = Vec::new();
    // Kind label per unit: the block's spatial op, or the stem/head role.
    let mut blocks = spec.blocks();
    for (unit, _, _) in &units {
        if unit == "stem" {
            let kind = match spec.stem {
                StemSpec::ResNet { .. } => "resnet_stem",
                StemSpec::Cifar { .. } => "cifar_stem",
                StemSpec::PatchEmbed { .. } => "patch_embed",
            };
            let out = report
                .rows
                .iter()
                .rev()
                .find(|r| r.unit == "stem")
                .map(|r| r.out)
                .unwrap_or((0, 0, 0));
            kind_of.push((unit.clone(), kind.to_string(), out));
        } else if unit == "head" {
            let out = (spec.classes(), 1, 1);
            kind_of.push((unit.clone(), "gap_linear".to_string(), out));
        } else {
            let b = blocks.next().expect("unit count matches block count");
            let label = format!(
                "{} [{}{}]",
                b.kind.as_str(),
                b.spatial.as_str(),
                if b.pre_pool { " prepool" } else { "" }
            );
            let out = report
                .rows
                .iter()
                .rev()
                .find(|r| r.unit == *unit)
                .map(|r| r.out)
                .unwrap_or((0, 0, 0));
            kind_of.push((unit.clone(), label, out));
        }
    }
    let mut s = String::new();
    s.push_str(&format!(
        "{} @ {}x{} | params {} ({:.1}M) | macs {} ({:.1}G)\n",
        report.arch,
        report.input.1,
        report.input.2,
        report.params,
        report.params as f64 / 1e6,
        report.macs,
        report.macs as f64 / 1e9
    ));
    s.push_str(&format!(
        "{:<4} {:<16} {:<44} {:<16} {:>12} {:>14}\n",
        "idx", "unit", "kind", "out (C,H,W)", "params", "macs"
    ));
    for (i, ((unit, params, macs), (_, kind, out))) in
        units.iter().zip(kind_of.iter()).enumerate()
    {
        s.push_str(&format!(
            "{:<4} {:<16} {:<44} {:<16} {:>12} {:>14}\n",
            i,
            unit,
            kind,
            format!("({},{},{})", out.0, out.1, out.2),
            params,
            macs
        ));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{
        build_resnet, build_vit, EffLayout, ResnetDepth, ResnetOptions, StagePattern, VitConfig,
    };

    fn r50(pattern: &str) -> ArchSpec {
        build_resnet(
            ResnetDepth::R50,
            &StagePattern::parse(pattern).unwrap(),
            &ResnetOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn resnet50_baseline_exact() {
        let report = count(&r50("BBBB"), Some(224)).unwrap();
        assert_eq!(report.params, 25_557_032);
        assert_eq!(report.macs, 4_089_184_256);
        assert_eq!(report.params_m(), 25.6);
        assert_eq!(report.macs_g(), 4.1);
    }

    #[test]
    fn eeee_matches_published_figures() {
        let report = count(&r50("EEEE"), Some(224)).unwrap();
        assert_eq!(report.params_m(), 14.2);
        assert_eq!(report.macs_g(), 2.2);
    }

    #[test]
    fn hybrid_matches_published_figures() {
        let spec = build_resnet(
            ResnetDepth::R50,
            &StagePattern::Hybrid,
            &ResnetOptions::default(),
        )
        .unwrap();
        let report = count(&spec, Some(224)).unwrap();
        assert_eq!(report.params_m(), 17.3);
        assert_eq!(report.macs_g(), 2.6);
    }

    #[test]
    fn diff_identity_is_zero() {
        let a = r50("BBBB");
        let d = count_diff(&a, &a, Some(224)).unwrap();
        assert!(d.rows.iter().all(|r| r.params_a == r.params_b && r.macs_a == r.macs_b));
        assert_eq!(d.params_reduction_pct(), 0.0);
    }

    #[test]
    fn diff_structure_mismatch_rejected() {
        let a = r50("BBBB");
        let b = build_resnet(
            ResnetDepth::R101,
            &StagePattern::parse("BBBB").unwrap(),
            &ResnetOptions::default(),
        )
        .unwrap();
        assert!(matches!(
            count_diff(&a, &b, Some(224)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn describe_has_one_row_per_block() {
        let text = describe(&r50("BBBB"), Some(224)).unwrap();
        // header + summary + stem + 16 blocks + head
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2 + 1 + 16 + 1);
        let spec = build_resnet(
            ResnetDepth::R50,
            &StagePattern::Hybrid,
            &ResnetOptions::default(),
        )
        .unwrap();
        let text = describe(&spec, Some(224)).unwrap();
        assert_eq!(
            text.matches("regular_bottleneck").count(),
            3,
            "hybrid keeps the three downsampling blocks regular"
        );
        assert_eq!(text.matches("efficient_bottleneck").count(), 13);
    }

    #[test]
    fn vit_alternate_param_delta_per_swap() {
        let cfg = VitConfig::vit_s_like();
        let base = count(&build_vit(&cfg, EffLayout::None).unwrap(), None).unwrap();
        let alt = count(&build_vit(&cfg, EffLayout::Alternate).unwrap(), None).unwrap();
        // Each replaced attention drops Wqkv + q/v biases + Wo + bias
        // (4D^2 + 3D) and gains two D<->3D linears (6D^2 + 4D):
        // net +2D^2 + D per swap, 6 swaps in the alternate layout.
        let d = cfg.dim as i64;
        let expected = 6 * (2 * d * d + d);
        assert_eq!(alt.params as i64 - base.params as i64, expected);
    }

    #[test]
    fn csv_and_json_are_well_formed() {
        let report = count(&r50("EEEE"), Some(224)).unwrap();
        let csv = report.to_csv();
        assert!(csv.starts_with("unit,layer,kind,params,macs"));
        assert!(csv.lines().count() > 16);
        let json = report.to_json();
        assert!(json.contains("\"params\": 14232232"));
    }
}
