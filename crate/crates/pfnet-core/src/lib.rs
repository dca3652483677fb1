//! Parameter-free spatial operations as first-class network building
//! blocks: a self-contained tensor engine with reverse-mode autodiff, the
//! block catalog (bottleneck families, transformers, deformable pooling),
//! network composition, an analytic cost model, and a latency/training
//! harness.

pub mod arch;
pub mod blocks;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod network;
pub mod ops;
pub mod params;
pub mod reference;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use arch::{
    build_pit_like, build_resnet, build_vit, enumerate_replacements, ArchSpec, BlockKind,
    BlockSpec, EffLayout, HeadSpec, ResnetDepth, ResnetOptions, SpatialOp, StagePattern,
    StageSpec, StemSpec, VitConfig,
};
pub use cost::{count, count_diff, describe, CostReport, DiffReport};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, gradcheck_suite, SuiteEntry, DEFAULT_EPS};
pub use network::Network;
pub use params::{load_checkpoint, save_checkpoint, ParamSet, Parameter};
pub use rng::{fnv1a, rng_init, InitScheme, Rng};
pub use tape::{BnState, GradMap, Tape, ValueId};
pub use tensor::{Shape, Tensor};
