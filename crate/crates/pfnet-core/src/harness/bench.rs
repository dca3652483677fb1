//! Latency micro-benchmarking of inference forwards.

use std::time::Instant;

use crate::arch::ArchSpec;
use crate::blocks::random_input;
use crate::cost;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Shape;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThreadMode {
    /// One worker; required for comparable latency numbers.
    Single,
    /// Batch split across n workers.
    Multi(usize),
}

impl ThreadMode {
    pub fn workers(&self) -> usize {
        match self {
            ThreadMode::Single => 1,
            ThreadMode::Multi(n) => (*n).max(1),
        }
    }

    pub fn label(&self) -> String {
        match self {
            ThreadMode::Single => "single".to_string(),
            ThreadMode::Multi(n) => format!("multi{n}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub batch: usize,
    pub reps: usize,
    pub warmup: usize,
    pub threads: ThreadMode,
    pub seed: u64,
    /// Square input side override; defaults to the spec geometry.
    pub input_side: Option<usize>,
    /// Activation memory guard in bytes.
    pub memory_cap: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batch: 1,
            reps: 50,
            warmup: 5,
            threads: ThreadMode::Single,
            seed: 0,
            input_side: None,
            memory_cap: 8 << 30,
        }
    }
}

/// Latency statistics for one architecture/batch-size pair.
#[derive(Clone, Debug)]
pub struct BenchResult {
    pub arch: String,
    pub spec_hash: u64,
    pub batch: usize,
    pub reps: usize,
    pub warmup: usize,
    pub thread_mode: String,
    /// Wall time per forward in milliseconds, in measurement order.
    pub latencies_ms: Vec<f64>,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
}

impl BenchResult {
    pub const CSV_HEADER: &'static str =
        "arch,spec_hash,batch,reps,warmup,threads,median_ms,p10_ms,p90_ms";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{:016x},{},{},{},{},{:.4},{:.4},{:.4}",
            self.arch,
            self.spec_hash,
            self.batch,
            self.reps,
            self.warmup,
            self.thread_mode,
            self.median_ms,
            self.p10_ms,
            self.p90_ms
        )
    }
}

pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Estimated peak activation footprint: the sum of layer outputs for one
/// forward at the given batch, which bounds what the tape retains.
fn activation_bytes(spec: &ArchSpec, batch: usize, input_side: Option<usize>) -> Result<u64> {
    let report = cost::count(spec, input_side)?;
    let per_image: u64 = report
        .rows
        .iter()
        .map(|r| (r.out.0 * r.out.1 * r.out.2) as u64 * 4)
        .sum();
    Ok(per_image * batch as u64 * 2)
}

/// Runs `warmup` untimed then `reps` timed inference forwards on a fixed
/// random input and reports latency statistics.
pub fn bench(spec: &ArchSpec, cfg: &BenchConfig) -> Result<BenchResult> {
    if cfg.reps < 20 {
        return Err(Error::Usage(format!(
            "{} repetitions; at least 20 required for a reported result",
            cfg.reps
        )));
    }
    if cfg.warmup < 5 {
        return Err(Error::Usage("at least 5 warmup runs required".into()));
    }
    let estimated = activation_bytes(spec, cfg.batch, cfg.input_side)?;
    if estimated > cfg.memory_cap {
        return Err(Error::Resource(format!(
            "batch {} needs ~{} MiB of activations, over the {} MiB cap",
            cfg.batch,
            estimated >> 20,
            cfg.memory_cap >> 20
        )));
    }

    let mut spec = spec.clone();
    if let Some(side) = cfg.input_side {
        spec.input = (spec.input.0, side, side);
    }
    let net = Network::build(&spec, cfg.seed)?;
    let (c, h, w) = spec.input;
    let x = random_input(Shape::new(cfg.batch, c, h, w), cfg.seed ^ 0xbeef);
    let workers = cfg.threads.workers();

    let run = |x: crate::tensor::Tensor| -> Result<()> {
        if workers > 1 {
            net.forward_eval_threaded(x, workers)?;
        } else {
            net.forward_eval(x)?;
        }
        Ok(())
    };

    for _ in 0..cfg.warmup {
        run(x.clone())?;
    }
    let mut latencies = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        let t0 = Instant::now();
        run(x.clone())?;
        latencies.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = latencies.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(BenchResult {
        arch: spec.name.clone(),
        spec_hash: spec.hash(),
        batch: cfg.batch,
        reps: cfg.reps,
        warmup: cfg.warmup,
        thread_mode: cfg.threads.label(),
        median_ms: median(&sorted),
        p10_ms: percentile(&sorted, 0.10),
        p90_ms: percentile(&sorted, 0.90),
        latencies_ms: latencies,
    })
}

/// Reproducibility manifest emitted next to every run artifact.
pub fn run_manifest(
    arch: &str,
    spec_hash: u64,
    seed: u64,
    threads: &ThreadMode,
    extra: &[(&str, String)],
) -> String {
    let mut s = String::new();
    s.push_str(&format!("arch={arch}\n"));
    s.push_str(&format!("spec_hash={spec_hash:016x}\n"));
    s.push_str(&format!("seed={seed}\n"));
    s.push_str(&format!("threads={}\n", threads.label()));
    s.push_str(&format!("os={}\n", std::env::consts::OS));
    s.push_str(&format!("cpu_arch={}\n", std::env::consts::ARCH));
    s.push_str(&format!(
        "cpus={}\n",
        std::thread::available_parallelism().map_or(0, |n| n.get())
    ));
    s.push_str(&format!("engine_version={}\n", env!("CARGO_PKG_VERSION")));
    for (k, v) in extra {
        s.push_str(&format!("{k}={v}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_resnet, ResnetDepth, ResnetOptions, StagePattern};

    #[test]
    fn stats_ordering_invariant() {
        let spec = build_resnet(
            ResnetDepth::R26,
            &StagePattern::parse("EEEE").unwrap(),
            &ResnetOptions {
                classes: 10,
                ..ResnetOptions::default()
            },
        )
        .unwrap();
        let cfg = BenchConfig {
            reps: 20,
            warmup: 5,
            ..BenchConfig::default()
        };
        let r = bench(&spec, &cfg).unwrap();
        assert_eq!(r.latencies_ms.len(), 20);
        assert!(r.p10_ms <= r.median_ms && r.median_ms <= r.p90_ms);
        assert!(r.median_ms > 0.0);
    }

    #[test]
    fn too_few_reps_rejected() {
        let spec = build_resnet(
            ResnetDepth::R26,
            &StagePattern::parse("EEEE").unwrap(),
            &ResnetOptions {
                classes: 10,
                ..ResnetOptions::default()
            },
        )
        .unwrap();
        let cfg = BenchConfig {
            reps: 5,
            ..BenchConfig::default()
        };
        assert!(matches!(bench(&spec, &cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn oversized_batch_is_resource_error() {
        let spec = build_resnet(
            ResnetDepth::R26,
            &StagePattern::parse("BBBB").unwrap(),
            &ResnetOptions {
                classes: 10,
                ..ResnetOptions::default()
            },
        )
        .unwrap();
        let cfg = BenchConfig {
            batch: 4096,
            memory_cap: 1 << 20,
            ..BenchConfig::default()
        };
        match bench(&spec, &cfg) {
            Err(Error::Resource(msg)) => assert!(msg.contains("4096")),
            other => panic!("expected resource error, got {other:?}"),
        }
    }
}
