use super::{BatchNorm, Block, ConvLayer, NetworkSpec, Skip, StemLayer};
use crate::error::{PeelError, Result};

fn fold_into(conv: &mut ConvLayer, bn: &BatchNorm) -> Result<()> {
    let out_c = conv.out_channels();
    if bn.channels() != out_c {
        return Err(PeelError::shape(format!(
            "batch norm over {} channels follows a conv with {out_c} outputs",
            bn.channels()
        )));
    }
    let per_out = conv.kernel.len() / out_c;
    let mut bias = conv.bias.take().unwrap_or_else(|| vec![0.0; out_c]);
    for (o, (scale, shift)) in bn.affine().into_iter().enumerate() {
        for k in &mut conv.kernel.data_mut()[o * per_out..(o + 1) * per_out] {
            *k *= scale;
        }
        bias[o] = scale * bias[o] + shift;
    }
    conv.bias = Some(bias);
    Ok(())
}

fn fold_conv(conv: &mut ConvLayer) -> Result<()> {
    if let Some(bn) = conv.bn.take() {
        fold_into(conv, &bn)?;
    }
    Ok(())
}

/// Absorbs every inference-mode batch norm into the convolution in front of
/// it, producing an equivalent network of biased convolutions.
pub fn fold_batchnorm(spec: &NetworkSpec) -> Result<NetworkSpec> {
    let mut net = spec.clone();
    let mut stem: Vec<StemLayer> = Vec::with_capacity(net.stem.len());
    for (i, layer) in net.stem.drain(..).enumerate() {
        match layer {
            StemLayer::BatchNorm(bn) => match stem.last_mut() {
                Some(StemLayer::Conv(conv)) if conv.bn.is_none() => fold_into(conv, &bn)?,
                prev => {
                    return Err(PeelError::Unsupported(format!(
                        "stem layer {i}: batch norm follows {}, not a convolution",
                        prev.map_or("the input", |l| l.kind())
                    )))
                }
            },
            StemLayer::Conv(mut conv) => {
                fold_conv(&mut conv)?;
                stem.push(StemLayer::Conv(conv));
            }
            other => stem.push(other),
        }
    }
    net.stem = stem;
    for block in &mut net.blocks {
        match block {
            Block::Residual(b) => {
                fold_conv(&mut b.w1)?;
                fold_conv(&mut b.w2)?;
                if let Skip::Conv(s) = &mut b.skip {
                    fold_conv(s)?;
                }
            }
            Block::Plain(l) => fold_conv(&mut l.conv)?,
        }
    }
    net.validate()?;
    Ok(net)
}
