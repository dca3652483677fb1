//! The building blocks as composite forward graphs: bottleneck families,
//! transformer blocks, deformable pooling, stems and heads.
//!
//! Each piece is materialized once (parameters allocated and initialized
//! into a [`ParamSet`]) and then drives two forwards: the recorded f32 tape
//! forward used by training and inference, and an f64 reference forward
//! composed from [`crate::reference`] kernels used by the oracle and
//! gradient suites.

use crate::arch::{BlockKind, BlockSpec, SpatialOp};
use crate::error::{Error, Result};
use crate::ops::{ConvSpec, DeformGeom, PoolKind, PoolSpec, ShiftAssignment, BN_EPS, BN_MOMENTUM, LN_EPS};
use crate::params::ParamSet;
use crate::reference::{self, RTensor};
use crate::rng::{fnv1a, rng_init, InitScheme, Rng};
use crate::tape::{BnState, Tape, ValueId};
use crate::tensor::{Shape, Tensor};

/// Forward-pass context: the tape, the tape ids of every parameter, the
/// batch-norm running states and the train/eval switch.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub pids: &'a [ValueId],
    pub states: &'a mut [BnState],
    pub training: bool,
}

/// Allocates parameters and batch-norm states while pieces are built.
pub struct Materializer<'a> {
    pub ps: &'a mut ParamSet,
    pub states: &'a mut Vec<BnState>,
    pub seed: u64,
}

impl<'a> Materializer<'a> {
    pub fn new(ps: &'a mut ParamSet, states: &'a mut Vec<BnState>, seed: u64) -> Self {
        Materializer { ps, states, seed }
    }

    fn param_seed(&self, name: &str) -> u64 {
        self.seed ^ fnv1a(name.as_bytes())
    }

    fn add(&mut self, name: String, shape: Shape, scheme: InitScheme) -> Result<usize> {
        let seed = self.param_seed(&name);
        self.ps.insert(name, rng_init(shape, scheme, seed))
    }

    fn conv(&mut self, name: &str, spec: ConvSpec, bias: bool, zero_init: bool) -> Result<ConvPiece> {
        let scheme = if zero_init {
            InitScheme::Zeros
        } else {
            InitScheme::KaimingFanOut
        };
        let w = self.add(format!("{name}.weight"), spec.weight_shape(), scheme)?;
        let b = if bias {
            Some(self.add(
                format!("{name}.bias"),
                Shape::new(spec.out_channels, 1, 1, 1),
                InitScheme::Zeros,
            )?)
        } else {
            None
        };
        Ok(ConvPiece { w, b, spec })
    }

    fn bn(&mut self, name: &str, channels: usize) -> Result<BnPiece> {
        let gamma = self.add(
            format!("{name}.gamma"),
            Shape::new(channels, 1, 1, 1),
            InitScheme::Ones,
        )?;
        let beta = self.add(
            format!("{name}.beta"),
            Shape::new(channels, 1, 1, 1),
            InitScheme::Zeros,
        )?;
        let state = self.states.len();
        self.states.push(BnState::new(channels));
        Ok(BnPiece { gamma, beta, state })
    }

    fn linear(&mut self, name: &str, inputs: usize, outputs: usize) -> Result<LinearPiece> {
        let bound = 1.0 / (inputs as f32).sqrt();
        let w = self.add(
            format!("{name}.weight"),
            Shape::new(outputs, inputs, 1, 1),
            InitScheme::Uniform(-bound, bound),
        )?;
        let b = self.add(
            format!("{name}.bias"),
            Shape::new(outputs, 1, 1, 1),
            InitScheme::Zeros,
        )?;
        Ok(LinearPiece { w, b: Some(b) })
    }

    fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LnPiece> {
        let gamma = self.add(
            format!("{name}.gamma"),
            Shape::new(dim, 1, 1, 1),
            InitScheme::Ones,
        )?;
        let beta = self.add(
            format!("{name}.beta"),
            Shape::new(dim, 1, 1, 1),
            InitScheme::Zeros,
        )?;
        Ok(LnPiece { gamma, beta })
    }
}

#[derive(Clone, Debug)]
pub struct ConvPiece {
    pub w: usize,
    pub b: Option<usize>,
    pub spec: ConvSpec,
}

impl ConvPiece {
    fn forward(&self, fw: &mut Fwd, x: ValueId) -> Result<ValueId> {
        fw.tape
            .conv2d(x, fw.pids[self.w], self.b.map(|b| fw.pids[b]), self.spec)
    }

    fn reference(&self, rp: &[RTensor], x: &RTensor) -> RTensor {
        reference::conv2d(x, &rp[self.w], self.b.map(|b| &rp[b]), &self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BnPiece {
    pub gamma: usize,
    pub beta: usize,
    pub state: usize,
}

impl BnPiece {
    fn forward(&self, fw: &mut Fwd, x: ValueId) -> Result<ValueId> {
        fw.tape.batch_norm(
            x,
            fw.pids[self.gamma],
            fw.pids[self.beta],
            &mut fw.states[self.state],
            fw.training,
            BN_EPS,
            BN_MOMENTUM,
        )
    }

    fn reference(&self, rp: &[RTensor], states: &[BnState], x: &RTensor, training: bool) -> RTensor {
        let gamma = &rp[self.gamma].data;
        let beta = &rp[self.beta].data;
        if training {
            reference::batch_norm_train(x, gamma, beta, BN_EPS as f64)
        } else {
            let st = &states[self.state];
            let mean: Vec<f64> = st.running_mean.iter().map(|&v| v as f64).collect();
            let var: Vec<f64> = st.running_var.iter().map(|&v| v as f64).collect();
            reference::batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS as f64)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LinearPiece {
    pub w: usize,
    pub b: Option<usize>,
}

impl LinearPiece {
    fn forward(&self, fw: &mut Fwd, x: ValueId) -> Result<ValueId> {
        fw.tape
            .linear(x, fw.pids[self.w], self.b.map(|b| fw.pids[b]))
    }

    fn reference(&self, rp: &[RTensor], x: &RTensor) -> RTensor {
        reference::linear(x, &rp[self.w], self.b.map(|b| &rp[b]))
    }
}

#[derive(Clone, Debug)]
pub struct LnPiece {
    pub gamma: usize,
    pub beta: usize,
}

impl LnPiece {
    fn forward(&self, fw: &mut Fwd, x: ValueId) -> Result<ValueId> {
        fw.tape
            .layer_norm(x, fw.pids[self.gamma], fw.pids[self.beta], LN_EPS)
    }

    fn reference(&self, rp: &[RTensor], x: &RTensor) -> RTensor {
        reference::layer_norm(x, &rp[self.gamma].data, &rp[self.beta].data, LN_EPS as f64)
    }
}

/// The operator in the middle of a bottleneck. Trainable variants carry
/// their BN; parameter-free variants are bare, with no BN or ReLU after
/// them (max of a ReLU output is already non-negative, so a trailing ReLU
/// would be the identity).
#[derive(Clone, Debug)]
pub enum SpatialPiece {
    /// conv3x3 / conv1x1 / dwconv3x3 followed by BN + ReLU.
    Conv { conv: ConvPiece, bn: BnPiece },
    MaxPool(PoolSpec),
    AvgPool(PoolSpec),
    Shift { assign: ShiftAssignment, stride: usize },
    Deform { predictor: ConvPiece, geom: DeformGeom },
}

impl SpatialPiece {
    fn forward(&self, fw: &mut Fwd, x: ValueId) -> Result<ValueId> {
        match self {
            SpatialPiece::Conv { conv, bn } => {
                let y = conv.forward(fw, x)?;
                let y = bn.forward(fw, y)?;
                Ok(fw.tape.relu(y))
            }
            SpatialPiece::MaxPool(spec) => fw.tape.max_pool2d(x, *spec),
            SpatialPiece::AvgPool(spec) => fw.tape.avg_pool2d(x, *spec),
            SpatialPiece::Shift { assign, stride } => fw.tape.shift(x, assign.clone(), *stride),
            SpatialPiece::Deform { predictor, geom } => {
                let offsets = predictor.forward(fw, x)?;
                fw.tape.deform_pool(x, offsets, *geom)
            }
        }
    }

    fn reference(
        &self,
        rp: &[RTensor],
        states: &[BnState],
        x: &RTensor,
        training: bool,
    ) -> RTensor {
        match self {
            SpatialPiece::Conv { conv, bn } => {
                let y = conv.reference(rp, x);
                let y = bn.reference(rp, states, &y, training);
                reference::relu(&y)
            }
            SpatialPiece::MaxPool(spec) => reference::max_pool2d(x, spec),
            SpatialPiece::AvgPool(spec) => reference::avg_pool2d(x, spec),
            SpatialPiece::Shift { assign, stride } => reference::shift(x, assign, *stride),
            SpatialPiece::Deform { predictor, geom } => {
                let offsets = predictor.reference(rp, x);
                reference::deform_pool(x, &offsets, geom)
            }
        }
    }
}

/// Squeeze-and-excitation: GAP -> C/16 -> ReLU -> C -> sigmoid -> scale.
#[derive(Clone, Debug)]
pub struct SePiece {
    pub fc1: LinearPiece,
    pub fc2: LinearPiece,
}

impl SePiece {
    fn forward(&self, fw: &mut Fwd, x: ValueId) -> Result<ValueId> {
        let c = fw.tape.value(x).shape().c;
        let n = fw.tape.value(x).shape().n;
        let pooled = fw.tape.global_avg_pool(x);
        let t = fw.tape.reshape(pooled, [n, 1, c, 1])?;
        let t = self.fc1.forward(fw, t)?;
        let t = fw.tape.relu(t);
        let t = self.fc2.forward(fw, t)?;
        let t = fw.tape.sigmoid(t);
        let s = fw.tape.reshape(t, [n, c, 1, 1])?;
        fw.tape.channel_scale(x, s)
    }

    fn reference(&self, rp: &[RTensor], x: &RTensor) -> RTensor {
        let [n, c, h, w] = x.dims;
        let pooled = reference::global_avg_pool(x); // (n,c,1,1)
        let tok = RTensor {
            dims: [n, 1, c, 1],
            data: pooled.data,
        };
        let t = self.fc1.reference(rp, &tok);
        let t = reference::relu(&t);
        let t = self.fc2.reference(rp, &t);
        let s = reference::sigmoid(&t); // (n,1,c,1)
        let mut out = RTensor::zeros([n, c, h, w]);
        for b in 0..n {
            for ch in 0..c {
                let sv = s.data[b * c + ch];
                for i in 0..h {
                    for j in 0..w {
                        let id = out.idx(b, ch, i, j);
                        out.data[id] = x.at(b, ch, i, j) * sv;
                    }
                }
            }
        }
        out
    }
}

/// Bottleneck template shared by the regular, inverted, efficient and
/// shift variants: 1x1 reduce (BN, ReLU) -> spatial operator -> 1x1 expand
/// (BN) -> shortcut add -> ReLU.
#[derive(Clone, Debug)]
pub struct BottleneckPiece {
    pub name: String,
    pub spec: BlockSpec,
    pub conv1: ConvPiece,
    pub bn1: BnPiece,
    /// Hybrid downsampling: avg-pool k2/s2 between the reduce conv and the
    /// spatial conv, which then runs at stride 1.
    pub pre_pool: bool,
    pub spatial: SpatialPiece,
    pub conv3: ConvPiece,
    pub bn3: BnPiece,
    pub shortcut: Option<(ConvPiece, BnPiece)>,
    pub se: Option<SePiece>,
}

impl BottleneckPiece {
    pub fn forward(&self, fw: &mut Fwd, x: ValueId) -> Result<ValueId> {
        let mut main = self.conv1.forward(fw, x)?;
        main = self.bn1.forward(fw, main)?;
        main = fw.tape.relu(main);
        if self.pre_pool {
            main = fw
                .tape
                .avg_pool2d(main, PoolSpec::new(PoolKind::Avg, 2, 2, 0))?;
        }
        main = self.spatial.forward(fw, main)?;
        main = self.conv3.forward(fw, main)?;
        main = self.bn3.forward(fw, main)?;
        if let Some(se) = &self.se {
            main = se.forward(fw, main)?;
        }
        let out = match (&self.shortcut, self.spec.needs_projection()) {
            (Some((conv, bn)), _) => {
                let sc = conv.forward(fw, x)?;
                let sc = bn.forward(fw, sc)?;
                fw.tape.add(main, sc)?
            }
            (None, false) => fw.tape.add(main, x)?,
            // Inverted bottleneck with incompatible geometry: no shortcut.
            (None, true) => main,
        };
        Ok(fw.tape.relu(out))
    }

    pub fn reference(
        &self,
        rp: &[RTensor],
        states: &[BnState],
        x: &RTensor,
        training: bool,
    ) -> RTensor {
        let mut main = self.conv1.reference(rp, x);
        main = self.bn1.reference(rp, states, &main, training);
        main = reference::relu(&main);
        if self.pre_pool {
            main = reference::avg_pool2d(&main, &PoolSpec::new(PoolKind::Avg, 2, 2, 0));
        }
        main = self.spatial.reference(rp, states, &main, training);
        main = self.conv3.reference(rp, &main);
        main = self.bn3.reference(rp, states, &main, training);
        if let Some(se) = &self.se {
            main = se.reference(rp, &main);
        }
        let out = match (&self.shortcut, self.spec.needs_projection()) {
            (Some((conv, bn)), _) => {
                let sc = conv.reference(rp, x);
                let sc = bn.reference(rp, states, &sc, training);
                add_ref(&main, &sc)
            }
            (None, false) => add_ref(&main, x),
            (None, true) => main,
        };
        reference::relu(&out)
    }
}

fn add_ref(a: &RTensor, b: &RTensor) -> RTensor {
    RTensor {
        dims: a.dims,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    }
}

/// Pre-norm transformer block: LN -> attention -> residual, LN -> MLP
/// (4x expand, GELU) -> residual.
#[derive(Clone, Debug)]
pub struct TransformerPiece {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
    pub ln1: LnPiece,
    pub wqkv: usize,
    pub bq: usize,
    pub bv: usize,
    pub proj: LinearPiece,
    pub ln2: LnPiece,
    pub fc1: LinearPiece,
    pub fc2: LinearPiece,
}

impl TransformerPiece {
    pub fn forward(&self, fw: &mut Fwd, x: ValueId) -> Result<ValueId> {
        let t = self.ln1.forward(fw, x)?;
        let t = fw.tape.multi_head_attention(
            t,
            fw.pids[self.wqkv],
            Some((fw.pids[self.bq], fw.pids[self.bv])),
            fw.pids[self.proj.w],
            self.proj.b.map(|b| fw.pids[b]),
            self.heads,
        )?;
        let h = fw.tape.add(x, t)?;
        let t = self.ln2.forward(fw, h)?;
        let t = self.fc1.forward(fw, t)?;
        let t = fw.tape.gelu(t);
        let t = self.fc2.forward(fw, t)?;
        fw.tape.add(h, t)
    }

    pub fn reference(&self, rp: &[RTensor], x: &RTensor) -> RTensor {
        let t = self.ln1.reference(rp, x);
        let t = reference::multi_head_attention(
            &t,
            &rp[self.wqkv],
            Some((&rp[self.bq], &rp[self.bv])),
            &rp[self.proj.w],
            self.proj.b.map(|b| &rp[b]),
            self.heads,
        );
        let h = add_ref(x, &t);
        let t = self.ln2.reference(rp, &h);
        let t = self.fc1.reference(rp, &t);
        let t = reference::gelu(&t);
        let t = self.fc2.reference(rp, &t);
        add_ref(&h, &t)
    }
}

/// Efficient transformer block: the attention sub-block is replaced by
/// LN -> linear D->3D -> reshape to the token grid -> max-pool 3x3/1 ->
/// ReLU -> reshape back -> linear 3D->D -> ReLU -> residual. The MLP
/// sub-block is untouched.
#[derive(Clone, Debug)]
pub struct EffTransformerPiece {
    pub name: String,
    pub dim: usize,
    pub grid: (usize, usize),
    pub pool_kind: PoolKind,
    pub ln1: LnPiece,
    pub lin_in: LinearPiece,
    pub lin_out: LinearPiece,
    pub ln2: LnPiece,
    pub fc1: LinearPiece,
    pub fc2: LinearPiece,
}

impl EffTransformerPiece {
    pub fn forward(&self, fw: &mut Fwd, x: ValueId) -> Result<ValueId> {
        let (hg, wg) = self.grid;
        let t = self.ln1.forward(fw, x)?;
        let t = self.lin_in.forward(fw, t)?;
        let g = fw.tape.tokens_to_grid(t, hg, wg)?;
        let g = match self.pool_kind {
            PoolKind::Max => fw.tape.max_pool2d(g, PoolSpec::max3(1))?,
            PoolKind::Avg => fw.tape.avg_pool2d(g, PoolSpec::avg3(1))?,
        };
        let g = fw.tape.relu(g);
        let t = fw.tape.grid_to_tokens(g);
        let t = self.lin_out.forward(fw, t)?;
        let t = fw.tape.relu(t);
        let h = fw.tape.add(x, t)?;
        let t = self.ln2.forward(fw, h)?;
        let t = self.fc1.forward(fw, t)?;
        let t = fw.tape.gelu(t);
        let t = self.fc2.forward(fw, t)?;
        fw.tape.add(h, t)
    }

    pub fn reference(&self, rp: &[RTensor], x: &RTensor) -> RTensor {
        let (hg, wg) = self.grid;
        let [n, tcount, _, _] = x.dims;
        let d3 = 3 * self.dim;
        let t = self.ln1.reference(rp, x);
        let t = self.lin_in.reference(rp, &t);
        // tokens (n, t, 3d, 1) -> grid (n, 3d, hg, wg)
        let mut grid = RTensor::zeros([n, d3, hg, wg]);
        for b in 0..n {
            for ti in 0..tcount {
                for di in 0..d3 {
                    let id = grid.idx(b, di, ti / wg, ti % wg);
                    grid.data[id] = t.data[(b * tcount + ti) * d3 + di];
                }
            }
        }
        let pooled = match self.pool_kind {
            PoolKind::Max => reference::max_pool2d(&grid, &PoolSpec::max3(1)),
            PoolKind::Avg => reference::avg_pool2d(&grid, &PoolSpec::avg3(1)),
        };
        let pooled = reference::relu(&pooled);
        let mut tok = RTensor::zeros([n, tcount, d3, 1]);
        for b in 0..n {
            for ti in 0..tcount {
                for di in 0..d3 {
                    tok.data[(b * tcount + ti) * d3 + di] =
                        pooled.at(b, di, ti / wg, ti % wg);
                }
            }
        }
        let t = self.lin_out.reference(rp, &tok);
        let t = reference::relu(&t);
        let h = add_ref(x, &t);
        let t = self.ln2.reference(rp, &h);
        let t = self.fc1.reference(rp, &t);
        let t = reference::gelu(&t);
        let t = self.fc2.reference(rp, &t);
        add_ref(&h, &t)
    }
}

/// Token-grid 2x downsampling: stride-2 depthwise conv on the grid, then a
/// width-changing linear. The pit_like stand-in.
#[derive(Clone, Debug)]
pub struct TokenDownPiece {
    pub name: String,
    pub grid: (usize, usize),
    pub conv: ConvPiece,
    pub lin: LinearPiece,
}

impl TokenDownPiece {
    pub fn forward(&self, fw: &mut Fwd, x: ValueId) -> Result<ValueId> {
        let (hg, wg) = self.grid;
        let g = fw.tape.tokens_to_grid(x, hg, wg)?;
        let g = self.conv.forward(fw, g)?;
        let t = fw.tape.grid_to_tokens(g);
        self.lin.forward(fw, t)
    }
}

#[derive(Clone, Debug)]
pub enum BlockPiece {
    Bottleneck(BottleneckPiece),
    Transformer(TransformerPiece),
    EffTransformer(EffTransformerPiece),
    TokenDown(TokenDownPiece),
}

impl BlockPiece {
    pub fn forward(&self, fw: &mut Fwd, x: ValueId) -> Result<ValueId> {
        match self {
            BlockPiece::Bottleneck(b) => b.forward(fw, x),
            BlockPiece::Transformer(b) => b.forward(fw, x),
            BlockPiece::EffTransformer(b) => b.forward(fw, x),
            BlockPiece::TokenDown(b) => b.forward(fw, x),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            BlockPiece::Bottleneck(b) => &b.name,
            BlockPiece::Transformer(b) => &b.name,
            BlockPiece::EffTransformer(b) => &b.name,
            BlockPiece::TokenDown(b) => &b.name,
        }
    }

    /// f64 reference forward composed from the oracle kernels.
    pub fn reference(
        &self,
        rp: &[RTensor],
        states: &[BnState],
        x: &RTensor,
        training: bool,
    ) -> Result<RTensor> {
        match self {
            BlockPiece::Bottleneck(b) => Ok(b.reference(rp, states, x, training)),
            BlockPiece::Transformer(b) => Ok(b.reference(rp, x)),
            BlockPiece::EffTransformer(b) => Ok(b.reference(rp, x)),
            BlockPiece::TokenDown(_) => Err(Error::Usage(
                "no reference path for token downsampling".into(),
            )),
        }
    }
}

/// Builds one block's parameters and structure. `grid` must be given for
/// token blocks (current token grid geometry).
pub fn materialize_block(
    m: &mut Materializer,
    name: &str,
    spec: &BlockSpec,
    grid: Option<(usize, usize)>,
) -> Result<BlockPiece> {
    spec.validate()?;
    match spec.kind {
        BlockKind::Transformer => {
            let dim = spec.in_channels;
            let hidden = dim * spec.rho_num / spec.rho_den;
            let bound = 1.0 / (dim as f32).sqrt();
            let wqkv = m.add(
                format!("{name}.attn.qkv.weight"),
                Shape::new(3 * dim, dim, 1, 1),
                InitScheme::Uniform(-bound, bound),
            )?;
            let bq = m.add(
                format!("{name}.attn.q_bias"),
                Shape::new(dim, 1, 1, 1),
                InitScheme::Zeros,
            )?;
            let bv = m.add(
                format!("{name}.attn.v_bias"),
                Shape::new(dim, 1, 1, 1),
                InitScheme::Zeros,
            )?;
            Ok(BlockPiece::Transformer(TransformerPiece {
                name: name.to_string(),
                dim,
                heads: spec.heads,
                ln1: m.layer_norm(&format!("{name}.ln1"), dim)?,
                wqkv,
                bq,
                bv,
                proj: m.linear(&format!("{name}.attn.proj"), dim, dim)?,
                ln2: m.layer_norm(&format!("{name}.ln2"), dim)?,
                fc1: m.linear(&format!("{name}.mlp.fc1"), dim, hidden)?,
                fc2: m.linear(&format!("{name}.mlp.fc2"), hidden, dim)?,
            }))
        }
        BlockKind::EfficientTransformer => {
            let dim = spec.in_channels;
            let hidden = dim * spec.rho_num / spec.rho_den;
            let grid = grid.ok_or_else(|| {
                Error::Config(format!("block {name}: token grid required"))
            })?;
            let pool_kind = match spec.spatial {
                SpatialOp::AvgPool3 => PoolKind::Avg,
                _ => PoolKind::Max,
            };
            Ok(BlockPiece::EffTransformer(EffTransformerPiece {
                name: name.to_string(),
                dim,
                grid,
                pool_kind,
                ln1: m.layer_norm(&format!("{name}.ln1"), dim)?,
                lin_in: m.linear(&format!("{name}.eff.lin_in"), dim, 3 * dim)?,
                lin_out: m.linear(&format!("{name}.eff.lin_out"), 3 * dim, dim)?,
                ln2: m.layer_norm(&format!("{name}.ln2"), dim)?,
                fc1: m.linear(&format!("{name}.mlp.fc1"), dim, hidden)?,
                fc2: m.linear(&format!("{name}.mlp.fc2"), hidden, dim)?,
            }))
        }
        BlockKind::TokenDownsample => {
            let grid = grid.ok_or_else(|| {
                Error::Config(format!("block {name}: token grid required"))
            })?;
            let conv = m.conv(
                &format!("{name}.dwconv"),
                ConvSpec::depthwise(spec.in_channels, 3, 2),
                true,
                false,
            )?;
            let lin = m.linear(&format!("{name}.proj"), spec.in_channels, spec.out_channels)?;
            Ok(BlockPiece::TokenDown(TokenDownPiece {
                name: name.to_string(),
                grid,
                conv,
                lin,
            }))
        }
        _ => materialize_bottleneck(m, name, spec),
    }
}

fn materialize_bottleneck(
    m: &mut Materializer,
    name: &str,
    spec: &BlockSpec,
) -> Result<BlockPiece> {
    let inner = spec.inner()?;
    let conv1 = m.conv(
        &format!("{name}.conv1"),
        ConvSpec::new(spec.in_channels, inner, 1, 1),
        false,
        false,
    )?;
    let bn1 = m.bn(&format!("{name}.bn1"), inner)?;

    // The stride moves onto the avg-pool when pre_pool is set.
    let op_stride = if spec.pre_pool { 1 } else { spec.stride };
    let spatial = match spec.spatial {
        SpatialOp::Conv3x3 => SpatialPiece::Conv {
            conv: m.conv(
                &format!("{name}.conv2"),
                ConvSpec::new(inner, inner, 3, op_stride),
                false,
                false,
            )?,
            bn: m.bn(&format!("{name}.bn2"), inner)?,
        },
        SpatialOp::Conv1x1 => SpatialPiece::Conv {
            conv: m.conv(
                &format!("{name}.conv2"),
                ConvSpec::new(inner, inner, 1, op_stride),
                false,
                false,
            )?,
            bn: m.bn(&format!("{name}.bn2"), inner)?,
        },
        SpatialOp::DwConv3x3 => SpatialPiece::Conv {
            conv: m.conv(
                &format!("{name}.conv2"),
                ConvSpec::depthwise(inner, 3, op_stride),
                false,
                false,
            )?,
            bn: m.bn(&format!("{name}.bn2"), inner)?,
        },
        SpatialOp::MaxPool3 => SpatialPiece::MaxPool(PoolSpec::max3(op_stride)),
        SpatialOp::AvgPool3 => SpatialPiece::AvgPool(PoolSpec::avg3(op_stride)),
        SpatialOp::Shift => SpatialPiece::Shift {
            assign: ShiftAssignment::round_robin(inner, 3),
            stride: op_stride,
        },
        SpatialOp::DeformMax | SpatialOp::DeformAvg => {
            let kind = if spec.spatial == SpatialOp::DeformMax {
                PoolKind::Max
            } else {
                PoolKind::Avg
            };
            let geom = DeformGeom::new(kind, op_stride);
            // Offset predictor reads the inner feature, emits 2*k*k offset
            // channels and starts at zero: the plain-pooling operating point.
            let predictor = m.conv(
                &format!("{name}.offset_pred"),
                ConvSpec::new(inner, geom.offset_channels(), 3, op_stride),
                true,
                true,
            )?;
            SpatialPiece::Deform { predictor, geom }
        }
        SpatialOp::Attention => {
            return Err(Error::Config(format!(
                "block {name}: attention is not a bottleneck spatial op"
            )))
        }
    };

    let conv3 = m.conv(
        &format!("{name}.conv3"),
        ConvSpec::new(inner, spec.out_channels, 1, 1),
        false,
        false,
    )?;
    let bn3 = m.bn(&format!("{name}.bn3"), spec.out_channels)?;

    // Inverted bottlenecks follow the usual convention: identity shortcut
    // when geometry permits, none otherwise. The other families project.
    let shortcut = if spec.needs_projection() {
        if spec.kind == BlockKind::InvertedBottleneck {
            None
        } else {
            Some((
                m.conv(
                    &format!("{name}.shortcut.conv"),
                    ConvSpec::new(spec.in_channels, spec.out_channels, 1, spec.stride)
                        .with_padding(0),
                    false,
                    false,
                )?,
                m.bn(&format!("{name}.shortcut.bn"), spec.out_channels)?,
            ))
        }
    } else {
        None
    };

    let se = if spec.use_se {
        let squeeze = (spec.out_channels / 16).max(1);
        Some(SePiece {
            fc1: m.linear(&format!("{name}.se.fc1"), spec.out_channels, squeeze)?,
            fc2: m.linear(&format!("{name}.se.fc2"), squeeze, spec.out_channels)?,
        })
    } else {
        None
    };

    Ok(BlockPiece::Bottleneck(BottleneckPiece {
        name: name.to_string(),
        spec: spec.clone(),
        conv1,
        bn1,
        pre_pool: spec.pre_pool,
        spatial,
        conv3,
        bn3,
        shortcut,
        se,
    }))
}

// ── stems and heads ──────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub enum StemPiece {
    ResNet {
        conv: ConvPiece,
        bn: BnPiece,
    },
    Cifar {
        conv: ConvPiece,
        bn: BnPiece,
    },
    PatchEmbed {
        conv: ConvPiece,
        pos: usize,
        grid: (usize, usize),
    },
}

impl StemPiece {
    pub fn forward(&self, fw: &mut Fwd, x: ValueId) -> Result<ValueId> {
        match self {
            StemPiece::ResNet { conv, bn } => {
                let y = conv.forward(fw, x)?;
                let y = bn.forward(fw, y)?;
                let y = fw.tape.relu(y);
                fw.tape
                    .max_pool2d(y, PoolSpec::new(PoolKind::Max, 3, 2, 1))
            }
            StemPiece::Cifar { conv, bn } => {
                let y = conv.forward(fw, x)?;
                let y = bn.forward(fw, y)?;
                Ok(fw.tape.relu(y))
            }
            StemPiece::PatchEmbed { conv, pos, .. } => {
                let y = conv.forward(fw, x)?;
                let t = fw.tape.grid_to_tokens(y);
                fw.tape.add_broadcast_n(t, fw.pids[*pos])
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadPiece {
    /// Final layer norm for token bodies.
    pub norm: Option<LnPiece>,
    pub fc: LinearPiece,
    pub token_body: bool,
}

impl HeadPiece {
    pub fn forward(&self, fw: &mut Fwd, x: ValueId) -> Result<ValueId> {
        let mut t = x;
        if let Some(norm) = &self.norm {
            t = norm.forward(fw, t)?;
        }
        let pooled = if self.token_body {
            // (N,T,D,1) -> (N,D,T,1) -> GAP over tokens.
            let s = fw.tape.value(t).shape();
            let g = fw.tape.tokens_to_grid(t, s.c, 1)?;
            fw.tape.global_avg_pool(g)
        } else {
            fw.tape.global_avg_pool(t)
        };
        let s = fw.tape.value(pooled).shape();
        let row = fw.tape.reshape(pooled, [s.n, 1, s.c, 1])?;
        let logits = self.fc.forward(fw, row)?;
        let classes = fw.tape.value(logits).shape().h;
        fw.tape.reshape(logits, [s.n, classes, 1, 1])
    }
}

pub fn materialize_stem(
    m: &mut Materializer,
    stem: &crate::arch::StemSpec,
    input: (usize, usize, usize),
) -> Result<StemPiece> {
    match stem {
        crate::arch::StemSpec::ResNet { out } => Ok(StemPiece::ResNet {
            conv: m.conv("stem.conv", ConvSpec::new(input.0, *out, 7, 2), false, false)?,
            bn: m.bn("stem.bn", *out)?,
        }),
        crate::arch::StemSpec::Cifar { out } => Ok(StemPiece::Cifar {
            conv: m.conv("stem.conv", ConvSpec::new(input.0, *out, 3, 1), false, false)?,
            bn: m.bn("stem.bn", *out)?,
        }),
        crate::arch::StemSpec::PatchEmbed { patch, dim } => {
            let grid = (input.1 / patch, input.2 / patch);
            let tokens = grid.0 * grid.1;
            let conv = m.conv(
                "stem.patch",
                ConvSpec::new(input.0, *dim, *patch, *patch).with_padding(0),
                true,
                false,
            )?;
            let pos = m.add(
                "stem.pos_embed".into(),
                Shape::new(1, tokens, *dim, 1),
                InitScheme::Uniform(-0.02, 0.02),
            )?;
            Ok(StemPiece::PatchEmbed { conv, pos, grid })
        }
    }
}

pub fn materialize_head(
    m: &mut Materializer,
    head: &crate::arch::HeadSpec,
    features: usize,
    token_body: bool,
) -> Result<HeadPiece> {
    let crate::arch::HeadSpec::GapLinear { classes } = head;
    let norm = if token_body {
        Some(m.layer_norm("head.norm", features)?)
    } else {
        None
    };
    Ok(HeadPiece {
        norm,
        fc: m.linear("head.fc", features, *classes)?,
        token_body,
    })
}

/// Deterministic random block input for tests and sweeps.
pub fn random_input(shape: Shape, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let data = (0..shape.numel()).map(|_| rng.normal()).collect();
    Tensor::new(shape, data).expect("length by construction")
}
