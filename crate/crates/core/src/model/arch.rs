use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Activation, Block, ConvLayer, NetworkSpec, PlainLayer, ResBlockSpec, Skip, StemLayer};
use crate::error::{PeelError, Result};
use crate::tensor::ConvGeometry;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchName {
    Resnet18,
    Resnet34,
    /// ResNet-50 depth built from basic (two 3×3) blocks.
    Resnet50a,
    /// ResNet-152 depth built from basic blocks.
    Resnet152a,
    Custom(PathBuf),
}

impl ArchName {
    /// Blocks per stage for the built-in families.
    pub fn stage_blocks(&self) -> Option<[usize; 4]> {
        match self {
            ArchName::Resnet18 => Some([2, 2, 2, 2]),
            ArchName::Resnet34 => Some([3, 4, 6, 3]),
            ArchName::Resnet50a => Some([6, 8, 12, 6]),
            ArchName::Resnet152a => Some([3, 8, 36, 3]),
            ArchName::Custom(_) => None,
        }
    }
}

impl FromStr for ArchName {
    type Err = PeelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet18" => Ok(ArchName::Resnet18),
            "resnet34" => Ok(ArchName::Resnet34),
            "resnet50a" => Ok(ArchName::Resnet50a),
            "resnet152a" => Ok(ArchName::Resnet152a),
            other if other.ends_with(".json") || Path::new(other).exists() => {
                Ok(ArchName::Custom(PathBuf::from(other)))
            }
            other => Err(PeelError::invalid(format!(
                "unknown architecture '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchOptions {
    pub input_dims: [usize; 3],
    /// Include the 3×3/2 max-pool after the stem convolution.
    pub pooling: bool,
    /// Channels of the first stage; later stages double it.
    pub width: usize,
    pub activation: Activation,
    /// Input normalization applied before the stem convolution; 1 disables it.
    pub input_scale: f64,
}

/// Maps 0–255 pixels onto [0, 1].
pub const PIXEL_SCALE: f64 = 1.0 / 255.0;

impl Default for ArchOptions {
    fn default() -> Self {
        Self {
            input_dims: [3, 64, 64],
            pooling: false,
            width: 64,
            activation: Activation::Relu,
            input_scale: PIXEL_SCALE,
        }
    }
}

/// Weight-free architecture description for custom networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchManifest {
    pub input_dims: [usize; 3],
    #[serde(default)]
    pub stem: Vec<StemEntry>,
    pub blocks: Vec<BlockEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum StemEntry {
    Scale {
        factor: f64,
    },
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    Prelu {
        a: f64,
    },
    Maxpool {
        window: usize,
        stride: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum BlockEntry {
    Residual {
        hidden_channels: usize,
        out_channels: usize,
        #[serde(default = "three")]
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "relu")]
        activation: Activation,
    },
    Plain {
        out_channels: usize,
        #[serde(default = "three")]
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: Option<usize>,
        #[serde(default = "relu")]
        activation: Activation,
    },
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

fn relu() -> Activation {
    Activation::Relu
}

/// Residual block with `k×k` convolutions, "same" padding and a 1×1 projection
/// skip whenever the stride or channel count changes.
pub fn basic_block(
    input_dims: [usize; 3],
    hidden: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    activation: Activation,
) -> ResBlockSpec {
    let in_c = input_dims[0];
    let pad = kernel / 2;
    let skip = if stride == 1 && in_c == out_channels {
        Skip::Identity
    } else {
        Skip::Conv(ConvLayer::zeros(
            out_channels,
            in_c,
            1,
            ConvGeometry::new(stride, 0),
        ))
    };
    ResBlockSpec {
        input_dims,
        w1: ConvLayer::zeros(hidden, in_c, kernel, ConvGeometry::new(stride, pad)),
        w2: ConvLayer::zeros(out_channels, hidden, kernel, ConvGeometry::new(1, pad)),
        skip,
        activation,
    }
}

impl ArchManifest {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PeelError::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| PeelError::Manifest {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Zero-weight network with the described shapes.
    pub fn to_network(&self) -> Result<NetworkSpec> {
        let mut dims = self.input_dims;
        let mut stem = Vec::new();
        for (i, entry) in self.stem.iter().enumerate() {
            let layer = match *entry {
                StemEntry::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => StemLayer::Conv(ConvLayer::zeros(
                    out_channels,
                    dims[0],
                    kernel,
                    ConvGeometry::new(stride, padding),
                )),
                StemEntry::Scale { factor } => StemLayer::Scale { factor },
                StemEntry::Relu => StemLayer::Activation(Activation::Relu),
                StemEntry::Prelu { a } => StemLayer::Activation(Activation::Prelu { a }),
                StemEntry::Maxpool { window, stride } => StemLayer::MaxPool { window, stride },
            };
            dims = layer
                .output_dims(&dims)
                .map_err(|e| PeelError::invalid(format!("stem layer {i}: {e}")))?;
            stem.push(layer);
        }
        let mut blocks = Vec::new();
        for (i, entry) in self.blocks.iter().enumerate() {
            let block = match *entry {
                BlockEntry::Residual {
                    hidden_channels,
                    out_channels,
                    kernel,
                    stride,
                    activation,
                } => Block::Residual(basic_block(
                    dims,
                    hidden_channels,
                    out_channels,
                    kernel,
                    stride,
                    activation,
                )),
                BlockEntry::Plain {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    activation,
                } => Block::Plain(PlainLayer {
                    input_dims: dims,
                    conv: ConvLayer::zeros(
                        out_channels,
                        dims[0],
                        kernel,
                        ConvGeometry::new(stride, padding.unwrap_or(kernel / 2)),
                    ),
                    activation,
                }),
            };
            dims = block
                .output_dims()
                .map_err(|e| PeelError::invalid(format!("block {i}: {e}")))?;
            blocks.push(block);
        }
        let net = NetworkSpec {
            input_dims: self.input_dims,
            stem,
            blocks,
        };
        net.validate()?;
        Ok(net)
    }
}

/// Zero-weight network for a named family or a custom manifest.
///
/// Built-in families use a 7×7/2 stem convolution, optional 3×3/2 max-pool,
/// and four stages of basic blocks with widths `w, 2w, 4w, 8w`; every stage
/// after the first opens with a stride-2 block.
pub fn build_arch(name: &ArchName, opts: &ArchOptions) -> Result<NetworkSpec> {
    let Some(stages) = name.stage_blocks() else {
        let ArchName::Custom(path) = name else {
            unreachable!()
        };
        return ArchManifest::from_path(path)?.to_network();
    };
    if opts.width == 0 {
        return Err(PeelError::invalid("width must be positive"));
    }
    let act = opts.activation;
    let mut stem = Vec::new();
    if opts.input_scale != 1.0 {
        stem.push(StemLayer::Scale {
            factor: opts.input_scale,
        });
    }
    stem.push(StemLayer::Conv(ConvLayer::zeros(
        opts.width,
        opts.input_dims[0],
        7,
        ConvGeometry::new(2, 3),
    )));
    stem.push(StemLayer::Activation(act));
    if opts.pooling {
        stem.push(StemLayer::MaxPool {
            window: 3,
            stride: 2,
        });
    }
    let mut dims = opts.input_dims;
    for layer in &stem {
        dims = layer.output_dims(&dims)?;
    }
    let mut blocks = Vec::new();
    for (stage, &count) in stages.iter().enumerate() {
        let channels = opts.width << stage;
        for i in 0..count {
            let stride = if stage > 0 && i == 0 { 2 } else { 1 };
            let block = basic_block(dims, channels, channels, 3, stride, act);
            dims = block.output_dims()?;
            blocks.push(Block::Residual(block));
        }
    }
    let net = NetworkSpec {
        input_dims: opts.input_dims,
        stem,
        blocks,
    };
    net.validate()?;
    Ok(net)
}
