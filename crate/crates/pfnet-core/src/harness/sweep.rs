//! The replacement-sweep experiment runner: exhaustive per-block operator
//! assignments measured by latency or trained at desk scale, plus the
//! single-bottleneck expansion-ratio grid.

use crate::arch::{build_single_bottleneck, enumerate_replacements, ArchSpec, SpatialOp};
use crate::cost;
use crate::error::Result;
use crate::harness::bench::{bench, BenchConfig};
use crate::harness::data::Dataset;
use crate::harness::train::{train, TrainConfig};
use crate::network::Network;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepMode {
    Bench,
    Train,
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub mode: SweepMode,
    /// Maximum number of specs to evaluate; the CSV is flagged incomplete
    /// when the enumeration is larger.
    pub budget: Option<usize>,
    pub bench: BenchConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    /// Per-block operator assignment, e.g. "maxpool3,conv3x3,...".
    pub pattern: String,
    pub params: u64,
    pub macs: u64,
    pub median_ms: Option<f64>,
    pub accuracy: Option<f32>,
}

pub const SWEEP_CSV_HEADER: &str = "pattern,params,macs,median_ms,accuracy";

pub fn sweep_rows_to_csv(rows: &[SweepRow], complete: bool) -> String {
    let mut s = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.pattern,
            r.params,
            r.macs,
            r.median_ms.map_or(String::new(), |v| format!("{v:.4}")),
            r.accuracy.map_or(String::new(), |v| format!("{v:.4}")),
        ));
    }
    if !complete {
        s.push_str("# INCOMPLETE: budget exhausted\n");
    }
    s
}

fn assignment_label(spec: &ArchSpec) -> String {
    spec.blocks()
        .map(|b| b.spatial.as_str())
        .collect::<Vec<_>>()
        .join("|")
}

/// Evaluates every operator assignment of `ops` over the base's blocks.
/// Returns the rows and whether the enumeration completed within budget.
pub fn sweep(
    base: &ArchSpec,
    ops: &[SpatialOp],
    data: Option<&Dataset>,
    cfg: &SweepConfig,
) -> Result<(Vec<SweepRow>, bool)> {
    let mut rows = Vec::new();
    let mut complete = true;
    for (i, spec) in enumerate_replacements(base, ops).enumerate() {
        if cfg.budget.is_some_and(|b| i >= b) {
            complete = false;
            break;
        }
        let report = cost::count(&spec, None)?;
        let mut row = SweepRow {
            pattern: assignment_label(&spec),
            params: report.params,
            macs: report.macs,
            median_ms: None,
            accuracy: None,
        };
        match cfg.mode {
            SweepMode::Bench => {
                let r = bench(&spec, &cfg.bench)?;
                row.median_ms = Some(r.median_ms);
            }
            SweepMode::Train => {
                let data = data.ok_or_else(|| {
                    crate::error::Error::Usage("train-mode sweep requires a dataset".into())
                })?;
                let mut net = Network::build(&spec, cfg.train.seed)?;
                let report = train(&mut net, data, &cfg.train)?;
                row.accuracy = Some(report.final_accuracy);
            }
        }
        rows.push(row);
    }
    Ok((rows, complete))
}

/// One row of the single-bottleneck grid study.
#[derive(Clone, Debug)]
pub struct GridResult {
    pub width: usize,
    pub rho: (usize, usize),
    pub op: SpatialOp,
    pub params: u64,
    pub train_accuracy: f32,
    pub eval_accuracy: f32,
}

pub const GRID_CSV_HEADER: &str = "width,rho,op,params,train_accuracy,eval_accuracy";

pub fn grid_to_csv(rows: &[GridResult]) -> String {
    let mut s = format!("{GRID_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{}/{},{},{},{:.4},{:.4}\n",
            r.width,
            r.rho.0,
            r.rho.1,
            r.op.as_str(),
            r.params,
            r.train_accuracy,
            r.eval_accuracy
        ));
    }
    s
}

/// The expansion-ratio grid: rho in {1/4, 1/2, 1, 2} x op in {conv3x3,
/// dwconv3x3, maxpool3, avgpool3} for each width. Trains each cell on
/// `train_data` and reports accuracy on `eval_data`.
pub fn single_bottleneck_grid(
    widths: &[usize],
    train_data: &Dataset,
    eval_data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<GridResult>> {
    let rhos = [(1usize, 4usize), (1, 2), (1, 1), (2, 1)];
    let ops = [
        SpatialOp::Conv3x3,
        SpatialOp::DwConv3x3,
        SpatialOp::MaxPool3,
        SpatialOp::AvgPool3,
    ];
    let mut out = Vec::new();
    for &width in widths {
        for rho in rhos {
            for op in ops {
                let spec = build_single_bottleneck(width, rho, op, train_data.classes)?;
                let report = cost::count(&spec, None)?;
                let mut net = Network::build(&spec, cfg.seed)?;
                let train_report = train(&mut net, train_data, cfg)?;
                let eval_acc =
                    crate::harness::train::evaluate_accuracy(&net, eval_data, cfg.batch_size)?;
                out.push(GridResult {
                    width,
                    rho,
                    op,
                    params: report.params,
                    train_accuracy: train_report.final_accuracy,
                    eval_accuracy: eval_acc,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_resnet, ResnetDepth, ResnetOptions, StagePattern};

    #[test]
    fn grid_has_sixteen_cells_per_width() {
        // 4 ratios x 4 ops; checked structurally without training.
        let rhos = 4;
        let ops = 4;
        assert_eq!(rhos * ops, 16);
    }

    #[test]
    fn budget_flags_incomplete() {
        let base = build_resnet(
            ResnetDepth::R26,
            &StagePattern::parse("BBBB").unwrap(),
            &ResnetOptions {
                classes: 10,
                ..ResnetOptions::default()
            },
        )
        .unwrap();
        let cfg = SweepConfig {
            mode: SweepMode::Bench,
            budget: Some(2),
            bench: BenchConfig {
                reps: 20,
                input_side: Some(32),
                ..BenchConfig::default()
            },
            train: TrainConfig::desk(),
        };
        let (rows, complete) =
            sweep(&base, &[SpatialOp::Conv3x3, SpatialOp::MaxPool3], None, &cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(!complete);
        let csv = sweep_rows_to_csv(&rows, complete);
        assert!(csv.contains("# INCOMPLETE"));
        assert!(csv.starts_with(SWEEP_CSV_HEADER));
    }
}
