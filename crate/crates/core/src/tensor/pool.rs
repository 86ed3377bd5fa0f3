use super::Tensor;
use crate::error::{PeelError, Result};

/// Flat input index of the maximum for every output element of a max-pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolArgmax {
    pub in_dims: [usize; 3],
    pub indices: Vec<usize>,
}

pub fn maxpool_output_dims(in_dims: &[usize], window: usize, stride: usize) -> Result<[usize; 3]> {
    let &[c, h, w] = in_dims else {
        return Err(PeelError::shape(format!(
            "maxpool input must be C×H×W, got {in_dims:?}"
        )));
    };
    if window == 0 || stride == 0 {
        return Err(PeelError::shape(
            "maxpool window and stride must be positive",
        ));
    }
    if window > h || window > w {
        return Err(PeelError::shape(format!(
            "maxpool window {window} larger than input {h}×{w}"
        )));
    }
    Ok([c, (h - window) / stride + 1, (w - window) / stride + 1])
}

/// Max-pooling without padding. Ties go to the first row-major index in the window.
pub fn maxpool(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, PoolArgmax)> {
    let [c, oh, ow] = maxpool_output_dims(x.dims(), window, stride)?;
    let (_, h, w) = x.chw()?;
    let xd = x.data();
    let mut y = Tensor::zeros(&[c, oh, ow]);
    let mut indices = vec![0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best_idx = (ch * h + i * stride) * w + j * stride;
                let mut best = xd[best_idx];
                for u in 0..window {
                    for v in 0..window {
                        let idx = (ch * h + i * stride + u) * w + j * stride + v;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                let out = (ch * oh + i) * ow + j;
                y.data_mut()[out] = best;
                indices[out] = best_idx;
            }
        }
    }
    Ok((
        y,
        PoolArgmax {
            in_dims: [c, h, w],
            indices,
        },
    ))
}

/// Routes each cotangent entry back to its recorded argmax, accumulating on overlap.
pub fn maxpool_vjp(argmax: &PoolArgmax, g: &Tensor) -> Result<Tensor> {
    if g.len() != argmax.indices.len() {
        return Err(PeelError::shape(format!(
            "maxpool cotangent has {} entries, pooling produced {}",
            g.len(),
            argmax.indices.len()
        )));
    }
    let mut out = Tensor::zeros(&argmax.in_dims);
    let od = out.data_mut();
    for (&idx, &gv) in argmax.indices.iter().zip(g.data()) {
        od[idx] += gv;
    }
    Ok(out)
}
