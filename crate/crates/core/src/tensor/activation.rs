use super::Tensor;
use crate::error::Result;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// PReLU with negative-side slope `a`.
pub fn prelu(x: &Tensor, a: f64) -> Tensor {
    x.map(|v| if v >= 0.0 { v } else { a * v })
}

/// Splits `x` into `p = max(x, 0)` and `n = max(-x, 0)`.
///
/// Both parts come from sign tests only, so `p - n == x` and `p ⊙ n == 0`
/// hold exactly.
pub fn relu_pair(x: &Tensor) -> (Tensor, Tensor) {
    let p = x.map(|v| if v > 0.0 { v } else { 0.0 });
    let n = x.map(|v| if v < 0.0 { -v } else { 0.0 });
    (p, n)
}

/// ReLU VJP; the subgradient at exactly zero is taken as 0.
pub fn relu_vjp(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    x.zip_map(g, |xv, gv| if xv > 0.0 { gv } else { 0.0 })
}

/// PReLU VJP; the derivative at exactly zero is taken as `a`.
pub fn prelu_vjp(x: &Tensor, g: &Tensor, a: f64) -> Result<Tensor> {
    x.zip_map(g, |xv, gv| if xv > 0.0 { gv } else { a * gv })
}
