//! Honest inference with feature taps.

use serde::{Deserialize, Serialize};

use crate::error::{PeelError, Result};
use crate::model::{Block, NetworkSpec, PlainLayer, ResBlockSpec, StemLayer};
use crate::tensor::{maxpool, Tensor};

/// Stem output `Φ₀`, every block output `y¹…y^N`, and the final output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapTrace {
    pub stem_output: Tensor,
    pub block_outputs: Vec<Tensor>,
    pub output: Tensor,
}

impl TapTrace {
    /// Input of block `l` (0-based): the stem output for the first block.
    pub fn block_input(&self, l: usize) -> &Tensor {
        if l == 0 {
            &self.stem_output
        } else {
            &self.block_outputs[l - 1]
        }
    }
}

fn check_input(x: &Tensor, dims: &[usize; 3], what: &str) -> Result<()> {
    if x.dims() != dims {
        return Err(PeelError::shape(format!(
            "{what}: input dims {:?}, expected {dims:?}",
            x.dims()
        )));
    }
    x.validate_finite(what)
}

/// `y = W_s x + W₂ act(W₁ x)`.
pub fn resblock_forward(x: &Tensor, block: &ResBlockSpec) -> Result<Tensor> {
    check_input(x, &block.input_dims, "residual block")?;
    let hidden = block.activation.apply(&block.w1.apply(x)?);
    let main = block.w2.apply(&hidden)?;
    let skip = block.skip.apply(x)?;
    skip.add(&main)
}

/// `y = act(W x)`.
pub fn plain_forward(x: &Tensor, layer: &PlainLayer) -> Result<Tensor> {
    check_input(x, &layer.input_dims, "plain layer")?;
    Ok(layer.activation.apply(&layer.conv.apply(x)?))
}

pub fn block_forward(x: &Tensor, block: &Block) -> Result<Tensor> {
    match block {
        Block::Residual(b) => resblock_forward(x, b),
        Block::Plain(l) => plain_forward(x, l),
    }
}

pub fn stem_layer_forward(x: &Tensor, layer: &StemLayer) -> Result<Tensor> {
    match layer {
        StemLayer::Scale { factor } => Ok(x.scale(*factor)),
        StemLayer::Conv(c) => c.apply(x),
        StemLayer::Activation(a) => Ok(a.apply(x)),
        StemLayer::MaxPool { window, stride } => Ok(maxpool(x, *window, *stride)?.0),
        StemLayer::BatchNorm(bn) => bn.apply(x),
    }
}

/// `Φ(x)`: the stem applied to an image.
pub fn stem_forward(x: &Tensor, stem: &[StemLayer]) -> Result<Tensor> {
    let mut h = x.clone();
    for layer in stem {
        h = stem_layer_forward(&h, layer)?;
    }
    Ok(h)
}

/// Runs the whole network, recording `Φ₀` and each block output.
pub fn network_forward(x: &Tensor, net: &NetworkSpec) -> Result<TapTrace> {
    check_input(x, &net.input_dims, "network")?;
    let stem_output = stem_forward(x, &net.stem)?;
    let mut block_outputs = Vec::with_capacity(net.blocks.len());
    let mut h = stem_output.clone();
    for (i, block) in net.blocks.iter().enumerate() {
        h = block_forward(&h, block).map_err(|e| PeelError::AtBlock {
            block: i + 1,
            source: Box::new(e),
        })?;
        block_outputs.push(h.clone());
    }
    Ok(TapTrace {
        stem_output,
        output: h,
        block_outputs,
    })
}
