//! Network descriptions: a stem of plain layers followed by a chain of
//! residual blocks `y = W_s x + W₂ act(W₁ x)`.

mod arch;
mod bn;
mod init;
mod store;

pub use arch::{
    basic_block, build_arch, ArchManifest, ArchName, ArchOptions, BlockEntry, StemEntry,
    PIXEL_SCALE,
};
pub use bn::fold_batchnorm;
pub use init::{random_init, InitScheme};
pub use store::{load_model, save_model, MODEL_FILE, WEIGHTS_FILE};

use serde::{Deserialize, Serialize};

use crate::error::{PeelError, Result};
use crate::tensor::{
    conv2d_adjoint, conv_output_dims, maxpool_output_dims, prelu, prelu_vjp, relu, relu_vjp,
    ConvGeometry, Tensor,
};

/// Elementwise nonlinearity of a block or stem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Prelu { a: f64 },
}

impl Activation {
    /// Slope on the negative side (0 for ReLU).
    pub fn negative_slope(&self) -> f64 {
        match *self {
            Activation::Relu => 0.0,
            Activation::Prelu { a } => a,
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        match *self {
            Activation::Relu => relu(x),
            Activation::Prelu { a } => prelu(x, a),
        }
    }

    pub fn vjp(&self, x: &Tensor, g: &Tensor) -> Result<Tensor> {
        match *self {
            Activation::Relu => relu_vjp(x, g),
            Activation::Prelu { a } => prelu_vjp(x, g, a),
        }
    }
}

/// Inference-mode batch normalization statistics, one entry per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, channels: usize) -> Result<()> {
        let ok = [&self.beta, &self.mean, &self.var]
            .iter()
            .all(|v| v.len() == self.gamma.len());
        if !ok || self.gamma.len() != channels {
            return Err(PeelError::shape(format!(
                "batch norm over {} channels applied to {channels}",
                self.gamma.len()
            )));
        }
        if self.eps < 0.0 || self.var.iter().any(|&v| v + self.eps <= 0.0) {
            return Err(PeelError::invalid(
                "batch norm variance + eps must be positive",
            ));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` with `bn(z) = scale·z + shift`.
    pub fn affine(&self) -> Vec<(f64, f64)> {
        (0..self.channels())
            .map(|c| {
                let scale = self.gamma[c] / (self.var[c] + self.eps).sqrt();
                (scale, self.beta[c] - scale * self.mean[c])
            })
            .collect()
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = x.chw()?;
        self.check(c)?;
        let mut out = x.clone();
        for (ch, (scale, shift)) in self.affine().into_iter().enumerate() {
            for v in &mut out.data_mut()[ch * h * w..(ch + 1) * h * w] {
                *v = scale * *v + shift;
            }
        }
        Ok(out)
    }
}

/// Convolution with optional per-channel bias and optional trailing batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub geom: ConvGeometry,
    pub bias: Option<Vec<f64>>,
    pub bn: Option<BatchNorm>,
}

impl ConvLayer {
    pub fn new(kernel: Tensor, geom: ConvGeometry) -> Self {
        Self {
            kernel,
            geom,
            bias: None,
            bn: None,
        }
    }

    /// O×C×k×k kernel of zeros.
    pub fn zeros(out_c: usize, in_c: usize, k: usize, geom: ConvGeometry) -> Self {
        Self::new(Tensor::zeros(&[out_c, in_c, k, k]), geom)
    }

    /// 1×1 kernel with ones on the channel diagonal.
    pub fn identity(channels: usize) -> Self {
        let mut kernel = Tensor::zeros(&[channels, channels, 1, 1]);
        for c in 0..channels {
            kernel.data_mut()[c * channels + c] = 1.0;
        }
        Self::new(kernel, ConvGeometry::unit())
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dims()[0]
    }

    pub fn output_dims(&self, in_dims: &[usize]) -> Result<[usize; 3]> {
        let out = conv_output_dims(in_dims, self.kernel.dims(), &self.geom)?;
        if let Some(b) = &self.bias {
            if b.len() != out[0] {
                return Err(PeelError::shape(format!(
                    "bias has {} entries for {} output channels",
                    b.len(),
                    out[0]
                )));
            }
        }
        if let Some(bn) = &self.bn {
            bn.check(out[0])?;
        }
        Ok(out)
    }

    /// Linear part only: `kernel ⋆ x`.
    pub fn apply_linear(&self, x: &Tensor) -> Result<Tensor> {
        crate::tensor::conv2d(x, &self.kernel, &self.geom)
    }

    /// Transpose of [`ConvLayer::apply_linear`].
    pub fn adjoint(&self, g: &Tensor, in_dims: &[usize]) -> Result<Tensor> {
        conv2d_adjoint(g, &self.kernel, &self.geom, in_dims)
    }

    /// Adds the bias (if any) in place.
    pub fn add_bias(&self, y: &mut Tensor) -> Result<()> {
        if let Some(b) = &self.bias {
            let (c, h, w) = y.chw()?;
            if b.len() != c {
                return Err(PeelError::shape("bias length mismatch"));
            }
            for (ch, &bv) in b.iter().enumerate() {
                for v in &mut y.data_mut()[ch * h * w..(ch + 1) * h * w] {
                    *v += bv;
                }
            }
        }
        Ok(())
    }

    /// Bias broadcast to a full output tensor, if present.
    pub fn bias_tensor(&self, out_dims: &[usize]) -> Result<Option<Tensor>> {
        if self.bias.is_none() {
            return Ok(None);
        }
        let mut t = Tensor::zeros(out_dims);
        self.add_bias(&mut t)?;
        Ok(Some(t))
    }

    /// Full layer: batch norm (if present) of `kernel ⋆ x + bias`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.apply_linear(x)?;
        self.add_bias(&mut y)?;
        match &self.bn {
            Some(bn) => bn.apply(&y),
            None => Ok(y),
        }
    }

    /// Whether this layer is an affine map without batch norm.
    pub fn is_folded(&self) -> bool {
        self.bn.is_none()
    }
}

/// Skip path `W_s` of a residual block.
#[derive(Debug, Clone, PartialEq)]
pub enum Skip {
    Identity,
    Conv(ConvLayer),
}

impl Skip {
    pub fn output_dims(&self, in_dims: &[usize]) -> Result<[usize; 3]> {
        match self {
            Skip::Identity => match *in_dims {
                [c, h, w] => Ok([c, h, w]),
                _ => Err(PeelError::shape("skip input must be C×H×W")),
            },
            Skip::Conv(layer) => layer.output_dims(in_dims),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Skip::Identity => Ok(x.clone()),
            Skip::Conv(layer) => layer.apply(x),
        }
    }
}

/// One preactivation residual block `y = W_s x + W₂ act(W₁ x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlockSpec {
    pub input_dims: [usize; 3],
    pub w1: ConvLayer,
    pub w2: ConvLayer,
    pub skip: Skip,
    pub activation: Activation,
}

impl ResBlockSpec {
    /// Dims of `W₁x` (the split variables p and n).
    pub fn hidden_dims(&self) -> Result<[usize; 3]> {
        self.w1.output_dims(&self.input_dims)
    }

    pub fn output_dims(&self) -> Result<[usize; 3]> {
        let hidden = self.hidden_dims()?;
        let main = self.w2.output_dims(&hidden)?;
        let skip = self.skip.output_dims(&self.input_dims)?;
        if main != skip {
            return Err(PeelError::shape(format!(
                "skip path yields {skip:?} but residual path yields {main:?}"
            )));
        }
        Ok(main)
    }
}

/// Non-residual layer `y = act(W x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainLayer {
    pub input_dims: [usize; 3],
    pub conv: ConvLayer,
    pub activation: Activation,
}

impl PlainLayer {
    pub fn output_dims(&self) -> Result<[usize; 3]> {
        self.conv.output_dims(&self.input_dims)
    }
}

/// Element of the inverted chain.
#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Residual(ResBlockSpec),
    Plain(PlainLayer),
}

impl Block {
    pub fn input_dims(&self) -> [usize; 3] {
        match self {
            Block::Residual(b) => b.input_dims,
            Block::Plain(l) => l.input_dims,
        }
    }

    pub fn output_dims(&self) -> Result<[usize; 3]> {
        match self {
            Block::Residual(b) => b.output_dims(),
            Block::Plain(l) => l.output_dims(),
        }
    }

    pub fn as_residual(&self) -> Option<&ResBlockSpec> {
        match self {
            Block::Residual(b) => Some(b),
            Block::Plain(_) => None,
        }
    }

    pub(crate) fn convs_mut(&mut self) -> Vec<&mut ConvLayer> {
        match self {
            Block::Residual(b) => {
                let mut v = vec![&mut b.w1, &mut b.w2];
                if let Skip::Conv(s) = &mut b.skip {
                    v.push(s);
                }
                v
            }
            Block::Plain(l) => vec![&mut l.conv],
        }
    }
}

/// Layers in front of the first block.
#[derive(Debug, Clone, PartialEq)]
pub enum StemLayer {
    /// Fixed input normalization `x ↦ factor·x`.
    Scale {
        factor: f64,
    },
    Conv(ConvLayer),
    Activation(Activation),
    MaxPool {
        window: usize,
        stride: usize,
    },
    BatchNorm(BatchNorm),
}

impl StemLayer {
    pub fn output_dims(&self, in_dims: &[usize]) -> Result<[usize; 3]> {
        match self {
            StemLayer::Conv(c) => c.output_dims(in_dims),
            StemLayer::Scale { factor } => {
                if !(factor.is_finite() && *factor != 0.0) {
                    return Err(PeelError::invalid(format!(
                        "scale factor {factor} must be finite and nonzero"
                    )));
                }
                match *in_dims {
                    [c, h, w] => Ok([c, h, w]),
                    _ => Err(PeelError::shape("scale input must be C×H×W")),
                }
            }
            StemLayer::Activation(_) => match *in_dims {
                [c, h, w] => Ok([c, h, w]),
                _ => Err(PeelError::shape("activation input must be C×H×W")),
            },
            StemLayer::MaxPool { window, stride } => maxpool_output_dims(in_dims, *window, *stride),
            StemLayer::BatchNorm(bn) => match *in_dims {
                [c, h, w] => {
                    bn.check(c)?;
                    Ok([c, h, w])
                }
                _ => Err(PeelError::shape("batch norm input must be C×H×W")),
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            StemLayer::Scale { .. } => "scale",
            StemLayer::Conv(_) => "conv",
            StemLayer::Activation(Activation::Relu) => "relu",
            StemLayer::Activation(Activation::Prelu { .. }) => "prelu",
            StemLayer::MaxPool { .. } => "maxpool",
            StemLayer::BatchNorm(_) => "batchnorm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_dims: [usize; 3],
    pub stem: Vec<StemLayer>,
    pub blocks: Vec<Block>,
}

impl NetworkSpec {
    /// Checks that dims chain end to end. Errors name the offending layer.
    pub fn validate(&self) -> Result<()> {
        if self.input_dims.contains(&0) {
            return Err(PeelError::invalid(format!(
                "input dims {:?} must be positive",
                self.input_dims
            )));
        }
        if self.blocks.is_empty() {
            return Err(PeelError::invalid("network needs at least one block"));
        }
        let mut dims = self.input_dims;
        for (i, layer) in self.stem.iter().enumerate() {
            dims = layer.output_dims(&dims).map_err(|e| {
                PeelError::invalid(format!("stem layer {i} ({}): {e}", layer.kind()))
            })?;
        }
        for (i, block) in self.blocks.iter().enumerate() {
            if block.input_dims() != dims {
                return Err(PeelError::invalid(format!(
                    "block {i}: declared input {:?} but previous layer yields {dims:?}",
                    block.input_dims()
                )));
            }
            dims = block
                .output_dims()
                .map_err(|e| PeelError::invalid(format!("block {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn stem_output_dims(&self) -> Result<[usize; 3]> {
        let mut dims = self.input_dims;
        for layer in &self.stem {
            dims = layer.output_dims(&dims)?;
        }
        Ok(dims)
    }

    pub fn output_dims(&self) -> Result<[usize; 3]> {
        self.blocks
            .last()
            .ok_or_else(|| PeelError::invalid("network has no blocks"))?
            .output_dims()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_residual(&self) -> bool {
        self.blocks.iter().all(|b| matches!(b, Block::Residual(_)))
    }

    pub(crate) fn convs_mut(&mut self) -> Vec<&mut ConvLayer> {
        let mut v: Vec<&mut ConvLayer> = self
            .stem
            .iter_mut()
            .filter_map(|l| match l {
                StemLayer::Conv(c) => Some(c),
                _ => None,
            })
            .collect();
        for b in &mut self.blocks {
            v.extend(b.convs_mut());
        }
        v
    }
}
