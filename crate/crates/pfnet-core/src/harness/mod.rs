//! Measurement and training harness: latency micro-benchmarks, dataset
//! ingestion, the toy-scale trainer and the replacement-sweep runner.

pub mod bench;
pub mod data;
pub mod sweep;
pub mod train;

pub use bench::{bench, BenchConfig, BenchResult, ThreadMode};
pub use data::{load_cifar10, synth, Dataset, SynthKind};
pub use sweep::{single_bottleneck_grid, sweep, GridResult, SweepConfig, SweepMode, SweepRow};
pub use train::{train, LrSchedule, TrainConfig, TrainReport};
