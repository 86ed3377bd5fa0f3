//! Backward, block-by-block reconstruction: invert the deepest block first,
//! feed each estimate to the block before it, then invert the stem.

use serde::{Deserialize, Serialize};

use crate::blockinv::{InversionReport, InversionState, PenaltyConfig, SplitProblem};
use crate::error::{PeelError, Result};
use crate::forward::TapTrace;
use crate::model::{Block, NetworkSpec, PlainLayer};
use crate::shallowinv::{invert_shallow, ShallowConfig, ShallowReport};
use crate::tensor::Tensor;

/// Inversion of `y = act(Wx)` with the same penalty machinery; the data term
/// constrains only `p − a·n`, so `x` is pinned down by the split alone.
pub fn invert_nonresidual(
    y: &Tensor,
    layer: &PlainLayer,
    cfg: &PenaltyConfig,
) -> Result<(Tensor, InversionReport)> {
    let problem = SplitProblem::for_plain(
        y,
        layer.input_dims,
        &layer.conv,
        layer.activation.negative_slope(),
    )?;
    let state = InversionState::random(
        &problem.input_dims(),
        &problem.hidden_dims(),
        cfg.init_scale,
        cfg.seed,
    );
    let (state, report) = problem.solve(state, cfg)?;
    Ok((state.x, report))
}

/// Inverts one block of either kind.
pub fn invert_any_block(
    y: &Tensor,
    block: &Block,
    cfg: &PenaltyConfig,
) -> Result<(Tensor, InversionReport)> {
    match block {
        Block::Residual(b) => crate::blockinv::invert_block(y, b, cfg),
        Block::Plain(l) => invert_nonresidual(y, l, cfg),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStage {
    /// 1-based block index.
    pub block: usize,
    /// Estimate of the block input.
    pub estimate: Tensor,
    pub report: InversionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeelRun {
    /// Ordered from the deepest block to the first.
    pub blocks: Vec<BlockStage>,
    /// Reconstructed stem output `Φ̃₀`.
    pub stem_estimate: Tensor,
    /// Absent when the stem is empty.
    pub shallow: Option<ShallowReport>,
    pub image: Tensor,
    /// `‖x̂ − x‖/‖x‖` for the final image in test mode.
    pub image_relative_error: Option<f64>,
}

impl PeelRun {
    /// Largest per-block error against the true trace, in test mode.
    pub fn max_block_error(&self) -> Option<f64> {
        self.blocks
            .iter()
            .map(|b| b.report.oracle_relative_error)
            .try_fold(0.0f64, |acc, e| e.map(|e| acc.max(e)))
    }
}

/// Ground truth for test-mode runs.
#[derive(Debug, Clone, Copy)]
pub struct Truth<'a> {
    pub image: &'a Tensor,
    pub trace: &'a TapTrace,
}

fn relative_error(estimate: &Tensor, truth: &Tensor) -> f64 {
    let denom = truth.norm();
    let diff = estimate.sub(truth).map(|d| d.norm()).unwrap_or(f64::NAN);
    if denom > 0.0 {
        diff / denom
    } else {
        diff
    }
}

/// Attack-mode reconstruction from the last block output only.
pub fn peel(
    y_last: &Tensor,
    net: &NetworkSpec,
    block_cfg: &PenaltyConfig,
    shallow_cfg: &ShallowConfig,
) -> Result<PeelRun> {
    peel_with_truth(y_last, net, block_cfg, shallow_cfg, None)
}

/// [`peel`] that also scores every stage against a known trace.
pub fn peel_with_truth(
    y_last: &Tensor,
    net: &NetworkSpec,
    block_cfg: &PenaltyConfig,
    shallow_cfg: &ShallowConfig,
    truth: Option<Truth<'_>>,
) -> Result<PeelRun> {
    net.validate()?;
    let out_dims = net.output_dims()?;
    if y_last.dims() != out_dims {
        return Err(PeelError::shape(format!(
            "features have dims {:?}, network outputs {out_dims:?}",
            y_last.dims()
        )));
    }
    let mut y = y_last.clone();
    let mut blocks = Vec::with_capacity(net.blocks.len());
    for (l, block) in net.blocks.iter().enumerate().rev() {
        let (x, mut report) =
            invert_any_block(&y, block, block_cfg).map_err(|e| PeelError::AtBlock {
                block: l + 1,
                source: Box::new(e),
            })?;
        if let Some(t) = truth {
            report.oracle_relative_error = Some(relative_error(&x, t.trace.block_input(l)));
        }
        log::info!(
            "block {}: objective {:.3e} in {:.1}s",
            l + 1,
            report.final_objective,
            report.wall_clock_secs
        );
        blocks.push(BlockStage {
            block: l + 1,
            estimate: x.clone(),
            report,
        });
        y = x;
    }
    let stem_estimate = y;
    let (image, shallow) = if net.stem.is_empty() {
        (stem_estimate.clone(), None)
    } else {
        let (img, mut report) =
            invert_shallow(&stem_estimate, &net.stem, net.input_dims, shallow_cfg)
                .map_err(|e| PeelError::AtStem(Box::new(e)))?;
        if let Some(t) = truth {
            report.oracle_relative_error = Some(relative_error(&img, t.image));
        }
        (img, Some(report))
    };
    let image_relative_error = truth.map(|t| relative_error(&image, t.image));
    Ok(PeelRun {
        blocks,
        stem_estimate,
        shallow,
        image,
        image_relative_error,
    })
}
