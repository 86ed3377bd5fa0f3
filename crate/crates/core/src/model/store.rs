//! `model.json` (layer records with blob offsets) + `weights.bin` (f32 LE,
//! concatenated row-major arrays). Offsets and lengths count f32 elements.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    Activation, BatchNorm, Block, ConvLayer, NetworkSpec, PlainLayer, ResBlockSpec, Skip, StemLayer,
};
use crate::error::{PeelError, Result};
use crate::tensor::{ConvGeometry, Tensor};

pub const MODEL_FILE: &str = "model.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT: &str = "peel-model/1";

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct Blob {
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BnRecord {
    gamma: Blob,
    beta: Blob,
    mean: Blob,
    var: Blob,
    eps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConvRecord {
    dims: Vec<usize>,
    stride: [usize; 2],
    padding: [usize; 2],
    weights: Blob,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<Blob>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bn: Option<BnRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum StemRecord {
    Scale { factor: f64 },
    Conv { conv: ConvRecord },
    Relu,
    Prelu { a: f64 },
    Maxpool { window: usize, stride: usize },
    Batchnorm { bn: BnRecord },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum SkipRecord {
    Identity,
    Conv { conv: ConvRecord },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum BlockRecord {
    Residual {
        input_dims: [usize; 3],
        w1: ConvRecord,
        w2: ConvRecord,
        skip: SkipRecord,
        activation: Activation,
    },
    Plain {
        input_dims: [usize; 3],
        conv: ConvRecord,
        activation: Activation,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelRecord {
    format: String,
    input_dims: [usize; 3],
    stem: Vec<StemRecord>,
    blocks: Vec<BlockRecord>,
    weights_len: usize,
}

#[derive(Default)]
struct BlobWriter {
    values: Vec<f32>,
}

impl BlobWriter {
    fn push(&mut self, v: &[f64]) -> Blob {
        let offset = self.values.len();
        self.values.extend(v.iter().map(|&x| x as f32));
        Blob {
            offset,
            len: v.len(),
        }
    }

    fn bn(&mut self, bn: &BatchNorm) -> BnRecord {
        BnRecord {
            gamma: self.push(&bn.gamma),
            beta: self.push(&bn.beta),
            mean: self.push(&bn.mean),
            var: self.push(&bn.var),
            eps: bn.eps,
        }
    }

    fn conv(&mut self, c: &ConvLayer) -> ConvRecord {
        ConvRecord {
            dims: c.kernel.dims().to_vec(),
            stride: c.geom.stride,
            padding: c.geom.padding,
            weights: self.push(c.kernel.data()),
            bias: c.bias.as_ref().map(|b| self.push(b)),
            bn: c.bn.as_ref().map(|bn| self.bn(bn)),
        }
    }
}

struct BlobReader<'a> {
    values: &'a [f32],
    /// Layer label used in diagnostics.
    at: String,
}

impl BlobReader<'_> {
    fn take(&self, blob: Blob) -> Result<Vec<f64>> {
        let end = blob.offset.checked_add(blob.len);
        match end {
            Some(end) if end <= self.values.len() => Ok(self.values[blob.offset..end]
                .iter()
                .map(|&v| v as f64)
                .collect()),
            _ => Err(PeelError::invalid(format!(
                "{}: blob [{}, +{}) overruns weights of length {}",
                self.at,
                blob.offset,
                blob.len,
                self.values.len()
            ))),
        }
    }

    fn bn(&self, r: &BnRecord) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: self.take(r.gamma)?,
            beta: self.take(r.beta)?,
            mean: self.take(r.mean)?,
            var: self.take(r.var)?,
            eps: r.eps,
        })
    }

    fn conv(&self, r: &ConvRecord) -> Result<ConvLayer> {
        if r.dims.len() != 4 {
            return Err(PeelError::invalid(format!(
                "{}: kernel dims {:?} are not O×C×kH×kW",
                self.at, r.dims
            )));
        }
        let data = self.take(r.weights)?;
        let kernel = Tensor::new(r.dims.clone(), data)
            .map_err(|e| PeelError::invalid(format!("{}: {e}", self.at)))?;
        Ok(ConvLayer {
            kernel,
            geom: ConvGeometry {
                stride: r.stride,
                padding: r.padding,
            },
            bias: r.bias.map(|b| self.take(b)).transpose()?,
            bn: r.bn.as_ref().map(|b| self.bn(b)).transpose()?,
        })
    }
}

fn to_record(spec: &NetworkSpec) -> (ModelRecord, Vec<f32>) {
    let mut w = BlobWriter::default();
    let stem = spec
        .stem
        .iter()
        .map(|l| match l {
            StemLayer::Scale { factor } => StemRecord::Scale { factor: *factor },
            StemLayer::Conv(c) => StemRecord::Conv { conv: w.conv(c) },
            StemLayer::Activation(Activation::Relu) => StemRecord::Relu,
            StemLayer::Activation(Activation::Prelu { a }) => StemRecord::Prelu { a: *a },
            StemLayer::MaxPool { window, stride } => StemRecord::Maxpool {
                window: *window,
                stride: *stride,
            },
            StemLayer::BatchNorm(bn) => StemRecord::Batchnorm { bn: w.bn(bn) },
        })
        .collect();
    let blocks = spec
        .blocks
        .iter()
        .map(|b| match b {
            Block::Residual(b) => BlockRecord::Residual {
                input_dims: b.input_dims,
                w1: w.conv(&b.w1),
                w2: w.conv(&b.w2),
                skip: match &b.skip {
                    Skip::Identity => SkipRecord::Identity,
                    Skip::Conv(c) => SkipRecord::Conv { conv: w.conv(c) },
                },
                activation: b.activation,
            },
            Block::Plain(l) => BlockRecord::Plain {
                input_dims: l.input_dims,
                conv: w.conv(&l.conv),
                activation: l.activation,
            },
        })
        .collect();
    let record = ModelRecord {
        format: FORMAT.to_string(),
        input_dims: spec.input_dims,
        stem,
        blocks,
        weights_len: w.values.len(),
    };
    (record, w.values)
}

fn from_record(record: &ModelRecord, values: &[f32]) -> Result<NetworkSpec> {
    if record.format != FORMAT {
        return Err(PeelError::invalid(format!(
            "unsupported model format '{}'",
            record.format
        )));
    }
    if record.weights_len != values.len() {
        return Err(PeelError::invalid(format!(
            "manifest declares {} weights, blob holds {}",
            record.weights_len,
            values.len()
        )));
    }
    let mut reader = BlobReader {
        values,
        at: String::new(),
    };
    let mut stem = Vec::new();
    for (i, r) in record.stem.iter().enumerate() {
        reader.at = format!("stem layer {i}");
        stem.push(match r {
            StemRecord::Scale { factor } => StemLayer::Scale { factor: *factor },
            StemRecord::Conv { conv } => StemLayer::Conv(reader.conv(conv)?),
            StemRecord::Relu => StemLayer::Activation(Activation::Relu),
            StemRecord::Prelu { a } => StemLayer::Activation(Activation::Prelu { a: *a }),
            StemRecord::Maxpool { window, stride } => StemLayer::MaxPool {
                window: *window,
                stride: *stride,
            },
            StemRecord::Batchnorm { bn } => StemLayer::BatchNorm(reader.bn(bn)?),
        });
    }
    let mut blocks = Vec::new();
    for (i, r) in record.blocks.iter().enumerate() {
        reader.at = format!("block {i}");
        blocks.push(match r {
            BlockRecord::Residual {
                input_dims,
                w1,
                w2,
                skip,
                activation,
            } => Block::Residual(ResBlockSpec {
                input_dims: *input_dims,
                w1: reader.conv(w1)?,
                w2: reader.conv(w2)?,
                skip: match skip {
                    SkipRecord::Identity => Skip::Identity,
                    SkipRecord::Conv { conv } => Skip::Conv(reader.conv(conv)?),
                },
                activation: *activation,
            }),
            BlockRecord::Plain {
                input_dims,
                conv,
                activation,
            } => Block::Plain(PlainLayer {
                input_dims: *input_dims,
                conv: reader.conv(conv)?,
                activation: *activation,
            }),
        });
    }
    let net = NetworkSpec {
        input_dims: record.input_dims,
        stem,
        blocks,
    };
    net.validate()?;
    Ok(net)
}

/// Writes `model.json` and `weights.bin` into `dir`, creating it if needed.
/// Weights are stored as f32.
pub fn save_model(spec: &NetworkSpec, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| PeelError::io(dir, e))?;
    let (record, values) = to_record(spec);
    let json = serde_json::to_string_pretty(&record).expect("model record serializes");
    let manifest = dir.join(MODEL_FILE);
    fs::write(&manifest, json + "\n").map_err(|e| PeelError::io(&manifest, e))?;
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let weights = dir.join(WEIGHTS_FILE);
    fs::write(&weights, bytes).map_err(|e| PeelError::io(&weights, e))
}

/// Reads a model directory and validates its dimension chain.
pub fn load_model(dir: impl AsRef<Path>) -> Result<NetworkSpec> {
    let dir = dir.as_ref();
    let manifest = dir.join(MODEL_FILE);
    let text = fs::read_to_string(&manifest).map_err(|e| PeelError::io(&manifest, e))?;
    let record: ModelRecord =
        serde_json::from_str(&text).map_err(|source| PeelError::Manifest {
            path: manifest.clone(),
            source,
        })?;
    let weights = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&weights).map_err(|e| PeelError::io(&weights, e))?;
    if bytes.len() % 4 != 0 {
        return Err(PeelError::invalid(format!(
            "{} has {} bytes, not a whole number of f32 values",
            weights.display(),
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    from_record(&record, &values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_arch, random_init, ArchName, ArchOptions, InitScheme};

    fn net() -> NetworkSpec {
        let spec = build_arch(
            &ArchName::Resnet18,
            &ArchOptions {
                width: 4,
                input_dims: [3, 16, 16],
                pooling: true,
                ..ArchOptions::default()
            },
        )
        .unwrap();
        random_init(&spec, &InitScheme::fan_in(7)).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = net();
        save_model(&spec, a.path()).unwrap();
        let loaded = load_model(a.path()).unwrap();
        assert_eq!(loaded, spec);
        save_model(&loaded, b.path()).unwrap();
        for f in [MODEL_FILE, WEIGHTS_FILE] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn overrunning_offsets_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&net(), dir.path()).unwrap();
        let weights = dir.path().join(WEIGHTS_FILE);
        let mut bytes = fs::read(&weights).unwrap();
        bytes.truncate(bytes.len() - 40);
        fs::write(&weights, &bytes).unwrap();
        // keep the declared length consistent so the offset check is what fires
        let manifest = dir.path().join(MODEL_FILE);
        let mut record: ModelRecord =
            serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
        record.weights_len -= 10;
        fs::write(&manifest, serde_json::to_string(&record).unwrap()).unwrap();
        let err = load_model(dir.path()).unwrap_err().to_string();
        assert!(err.contains("overruns"), "{err}");
        assert!(err.contains("block 7"), "{err}");
    }

    #[test]
    fn missing_files_and_bad_chain() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_model(dir.path()), Err(PeelError::Io { .. })));

        save_model(&net(), dir.path()).unwrap();
        let manifest = dir.path().join(MODEL_FILE);
        let mut record: ModelRecord =
            serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
        if let BlockRecord::Residual { input_dims, .. } = &mut record.blocks[3] {
            input_dims[1] += 1;
        }
        fs::write(&manifest, serde_json::to_string(&record).unwrap()).unwrap();
        let err = load_model(dir.path()).unwrap_err().to_string();
        assert!(err.contains("block 3"), "{err}");
    }
}
