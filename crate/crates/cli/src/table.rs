//! Per-layer error table over repeated runs: one row per block, deepest
//! first, grouped into layers, then a row for the shallow stage.

use std::fmt::Write as _;

use peel_core::metrics::MeanStd;
use peel_core::model::{Block, Skip};
use peel_core::{NetworkSpec, PeelRun};
use serde::{Deserialize, Serialize};

/// Relative error above which a reconstruction counts as failed.
pub const FAILURE_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorMetric {
    /// `‖x̂ − x‖/‖x‖` against the true trace.
    Relative,
    /// Data residual over feature norm; the only option without ground truth.
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub layer: String,
    /// 1-based block index; `None` for the shallow row.
    pub block: Option<usize>,
    pub error: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub metric: ErrorMetric,
    pub rows: Vec<TableRow>,
}

/// Layer number (1-based) of every block. A layer starts at the first block
/// and at every block whose skip is a projection or that has no skip.
pub fn layer_of_blocks(net: &NetworkSpec) -> Vec<usize> {
    let mut layer = 0;
    net.blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let starts = i == 0
                || match b {
                    Block::Residual(r) => matches!(r.skip, Skip::Conv(_)),
                    Block::Plain(_) => true,
                };
            if starts {
                layer += 1;
            }
            layer
        })
        .collect()
}

fn block_error(run: &PeelRun, block: usize, metric: ErrorMetric) -> f64 {
    let stage = run
        .blocks
        .iter()
        .find(|s| s.block == block)
        .expect("every run covers every block");
    match metric {
        ErrorMetric::Relative => stage.report.oracle_relative_error.unwrap_or(f64::NAN),
        ErrorMetric::Residual => {
            let r = &stage.report;
            r.data_residual / r.feature_sqnorm.sqrt().max(f64::MIN_POSITIVE)
        }
    }
}

fn shallow_error(run: &PeelRun, metric: ErrorMetric) -> Option<f64> {
    match metric {
        ErrorMetric::Relative => run.image_relative_error,
        ErrorMetric::Residual => run.shallow.as_ref().map(|s| s.final_parts.fidelity.sqrt()),
    }
}

impl ErrorTable {
    /// Uses true errors when every run has them, data residuals otherwise.
    pub fn from_runs(net: &NetworkSpec, runs: &[PeelRun]) -> Self {
        let metric = if !runs.is_empty() && runs.iter().all(|r| r.image_relative_error.is_some()) {
            ErrorMetric::Relative
        } else {
            ErrorMetric::Residual
        };
        let layers = layer_of_blocks(net);
        let mut rows: Vec<TableRow> = (1..=net.num_blocks())
            .rev()
            .map(|b| {
                let errs: Vec<f64> = runs.iter().map(|r| block_error(r, b, metric)).collect();
                TableRow {
                    layer: format!("Layer {}", layers[b - 1]),
                    block: Some(b),
                    error: MeanStd::of(&errs),
                }
            })
            .collect();
        let shallow: Vec<f64> = runs
            .iter()
            .filter_map(|r| shallow_error(r, metric))
            .collect();
        if !shallow.is_empty() {
            rows.push(TableRow {
                layer: "Shallow Layer".into(),
                block: None,
                error: MeanStd::of(&shallow),
            });
        }
        Self { metric, rows }
    }

    pub fn block_rows(&self) -> impl Iterator<Item = &TableRow> {
        self.rows.iter().filter(|r| r.block.is_some())
    }

    pub fn shallow_row(&self) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.block.is_none())
    }

    pub fn to_markdown(&self) -> String {
        let header = match self.metric {
            ErrorMetric::Relative => "Relative error (mean ± std)",
            ErrorMetric::Residual => "Relative data residual (mean ± std)",
        };
        let n = self.rows.first().map_or(0, |r| r.error.n);
        let mut s = format!("| Layer | Block | {header} |\n|---|---|---|\n");
        for r in &self.rows {
            let block = r
                .block
                .map_or_else(|| "stem".to_string(), |b| b.to_string());
            writeln!(s, "| {} | {block} | {} |", r.layer, r.error).unwrap();
        }
        writeln!(s, "\n{n} run(s).").unwrap();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use peel_core::model::{build_arch, ArchName, ArchOptions};

    #[test]
    fn resnet18_layers() {
        let net = build_arch(
            &ArchName::Resnet18,
            &ArchOptions {
                width: 4,
                input_dims: [3, 16, 16],
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(layer_of_blocks(&net), vec![1, 1, 2, 2, 3, 3, 4, 4]);
    }
}
