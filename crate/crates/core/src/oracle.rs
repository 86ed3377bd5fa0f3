//! Exact inversion of tiny blocks by enumerating activation patterns.
//!
//! For a fixed pattern `S` the block is affine in `x`:
//! `y = (W_s + W₂ D_S W₁) x + W₂ D_S b₁ + b₂ + b_s`, with `D_S` the diagonal of
//! slopes (1 on `S`, the negative slope elsewhere). Each pattern gives a linear
//! least-squares problem; the best sign-consistent solution is the global
//! optimum of the constrained problem.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::blockinv::SplitProblem;
use crate::error::{PeelError, Result};
use crate::model::{ConvLayer, ResBlockSpec, Skip};
use crate::tensor::Tensor;

/// Relative singular-value cutoff for the rank test.
pub const RANK_TOL: f64 = 1e-10;
/// Absolute slack on preactivation signs.
pub const FEAS_EPS: f64 = 1e-9;
pub const DEFAULT_MAX_HIDDEN: usize = 14;

/// `argmin ‖Ax − b‖` and the residual norm, for `A` of full column rank.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    if a.nrows() != b.len() {
        return Err(PeelError::shape(format!(
            "lstsq: A is {}×{}, b has {} entries",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let cols = a.ncols();
    if cols == 0 {
        return Ok((DVector::zeros(0), b.norm()));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = RANK_TOL * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    if rank < cols || !(smax > 0.0) {
        return Err(PeelError::RankDeficient { rank, cols });
    }
    let x = svd
        .solve(b, cutoff)
        .map_err(|e| PeelError::Oracle(format!("lstsq: {e}")))?;
    let residual = (a * &x - b).norm();
    Ok((x, residual))
}

/// Dense matrix of a convolution's linear part, one basis vector per column.
pub fn conv_matrix(conv: &ConvLayer, in_dims: &[usize; 3]) -> Result<DMatrix<f64>> {
    let n = in_dims.iter().product::<usize>();
    let out_dims = conv.output_dims(in_dims)?;
    let m = out_dims.iter().product::<usize>();
    let mut mat = DMatrix::zeros(m, n);
    let mut e = Tensor::zeros(in_dims);
    for j in 0..n {
        e.data_mut()[j] = 1.0;
        let col = conv.apply_linear(&e)?;
        mat.column_mut(j).copy_from_slice(col.data());
        e.data_mut()[j] = 0.0;
    }
    Ok(mat)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub x: Tensor,
    /// `‖y − W_s x* − W₂ act(W₁x*)‖²`.
    pub objective: f64,
    /// Activation pattern of `x*`; `true` means the unit is on the identity branch.
    pub pattern: Vec<bool>,
    /// Whether the pattern-restricted map has full column rank.
    pub injective: bool,
    pub feasible_patterns: usize,
    pub rank_deficient_patterns: usize,
}

/// Minimum-norm least-squares solution for rank-deficient systems.
fn min_norm_solution(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let cutoff = RANK_TOL * svd.singular_values.max();
    svd.solve(b, cutoff).ok()
}

fn vec_of(t: &Tensor) -> DVector<f64> {
    DVector::from_column_slice(t.data())
}

/// Global minimizer of the block-inversion problem by pattern enumeration.
pub fn oracle_invert_block(
    y: &Tensor,
    block: &ResBlockSpec,
    max_hidden: usize,
) -> Result<OracleSolution> {
    // shares the bias bookkeeping and validation with the penalty solver
    let problem = SplitProblem::for_block(y, block)?;
    let in_dims = block.input_dims;
    let hidden_dims = block.hidden_dims()?;
    let m: usize = hidden_dims.iter().product();
    if m > max_hidden || m >= usize::BITS as usize {
        return Err(PeelError::Oracle(format!(
            "hidden dimension {m} exceeds the enumeration limit {max_hidden}"
        )));
    }
    let n: usize = in_dims.iter().product();
    let w1 = conv_matrix(&block.w1, &in_dims)?;
    let w2 = conv_matrix(&block.w2, &hidden_dims)?;
    let ws = match &block.skip {
        Skip::Identity => DMatrix::identity(n, n),
        Skip::Conv(c) => conv_matrix(c, &in_dims)?,
    };
    let b1 = match block.w1.bias_tensor(&hidden_dims)? {
        Some(b) => vec_of(&b),
        None => DVector::zeros(m),
    };
    let target = vec_of(problem.target());
    let slope = block.activation.negative_slope();

    let mut best: Option<(f64, usize, DVector<f64>, bool)> = None;
    let mut feasible = 0;
    let mut deficient = 0;
    let mut d = DVector::zeros(m);
    for mask in 0usize..(1 << m) {
        for i in 0..m {
            d[i] = if mask >> i & 1 == 1 { 1.0 } else { slope };
        }
        let w2d = w2.map_with_location(|_, c, v| v * d[c]);
        let a = &ws + &w2d * &w1;
        let b = &target - &w2d * &b1;
        let (x, injective) = match lstsq(&a, &b) {
            Ok((x, _)) => (x, true),
            Err(PeelError::RankDeficient { .. }) => {
                deficient += 1;
                match min_norm_solution(&a, &b) {
                    Some(x) => (x, false),
                    None => continue,
                }
            }
            Err(e) => return Err(e),
        };
        let z = &w1 * &x + &b1;
        let consistent = (0..m).all(|i| {
            if mask >> i & 1 == 1 {
                z[i] >= -FEAS_EPS
            } else {
                z[i] <= FEAS_EPS
            }
        });
        if !consistent {
            continue;
        }
        feasible += 1;
        // objective with the activation recomputed at x itself
        let act = z.map(|v| if v >= 0.0 { v } else { slope * v });
        let resid = &target - &ws * &x - &w2 * &act;
        let obj = resid.norm_squared();
        let better = match &best {
            None => true,
            Some((bo, bm, _, _)) => obj < *bo || (obj == *bo && mask < *bm),
        };
        if better {
            best = Some((obj, mask, x, injective));
        }
    }
    let Some((objective, mask, x, injective)) = best else {
        return Err(PeelError::Oracle(
            "no sign-consistent pattern; the features are not realizable by this block".into(),
        ));
    };
    Ok(OracleSolution {
        x: Tensor::new(in_dims.to_vec(), x.as_slice().to_vec())?,
        objective,
        pattern: (0..m).map(|i| mask >> i & 1 == 1).collect(),
        injective,
        feasible_patterns: feasible,
        rank_deficient_patterns: deficient,
    })
}
