use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{PeelError, Result};

/// Stride and zero-padding per spatial axis (rows, columns).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride: [stride, stride],
            padding: [padding, padding],
        }
    }

    pub const fn unit() -> Self {
        Self::new(1, 0)
    }

    fn check(&self) -> Result<()> {
        if self.stride.contains(&0) {
            return Err(PeelError::shape(format!(
                "stride must be positive, got {:?}",
                self.stride
            )));
        }
        Ok(())
    }
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self::unit()
    }
}

fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Output C×H×W of a convolution, validating channel agreement and extents.
pub fn conv_output_dims(
    in_dims: &[usize],
    kernel_dims: &[usize],
    geom: &ConvGeometry,
) -> Result<[usize; 3]> {
    geom.check()?;
    let &[c, h, w] = in_dims else {
        return Err(PeelError::shape(format!(
            "conv input must be C×H×W, got {in_dims:?}"
        )));
    };
    let &[o, kc, kh, kw] = kernel_dims else {
        return Err(PeelError::shape(format!(
            "conv kernel must be O×C×kH×kW, got {kernel_dims:?}"
        )));
    };
    if kc != c {
        return Err(PeelError::shape(format!(
            "kernel expects {kc} input channels, input has {c}"
        )));
    }
    let oh = out_extent(h, kh, geom.stride[0], geom.padding[0]);
    let ow = out_extent(w, kw, geom.stride[1], geom.padding[1]);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok([o, oh, ow]),
        _ => Err(PeelError::shape(format!(
            "kernel {kh}×{kw} does not fit input {h}×{w} with padding {:?}",
            geom.padding
        ))),
    }
}

/// Range of output positions `i` for which `i*stride + offset - pad` lies in `[0, n)`.
#[inline]
fn valid_range(out: usize, n: usize, stride: usize, offset: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    let top = n + pad;
    let hi = if top > offset {
        ((top - offset - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// 2-D cross-correlation with zero padding:
/// `y[o,i,j] = Σ_{c,u,v} k[o,c,u,v] · x_pad[c, i·s+u, j·s+v]`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let out_dims = conv_output_dims(x.dims(), kernel.dims(), geom)?;
    x.validate_finite("conv2d input")?;
    kernel.validate_finite("conv2d kernel")?;
    let mut out = Tensor::zeros(&out_dims);
    conv_forward_raw(x.data(), x.dims(), kernel, geom, out_dims, out.data_mut());
    Ok(out)
}

/// Unchecked forward kernel; callers guarantee dims were validated.
///
/// Lowered to a GEMM: `out[O×P] = K[O×CkHkW] · cols[CkHkW×P]`.
pub(crate) fn conv_forward_raw(
    x: &[f64],
    in_dims: &[usize],
    kernel: &Tensor,
    geom: &ConvGeometry,
    out_dims: [usize; 3],
    out: &mut [f64],
) {
    let lowered = Lowering::new(in_dims, kernel.dims(), geom, out_dims);
    let owned;
    let cols: &[f64] = if lowered.is_pointwise() {
        x
    } else {
        owned = lowered.im2col(x);
        &owned
    };
    let (m, k, n) = (out_dims[0], lowered.rows(), lowered.plane());
    gemm(m, k, n, kernel.data(), [k, 1], cols, [n, 1], out);
}

/// Exact adjoint of [`conv2d`] with respect to its input:
/// `⟨conv2d(x), g⟩ = ⟨x, conv2d_adjoint(g)⟩`.
pub fn conv2d_adjoint(
    g: &Tensor,
    kernel: &Tensor,
    geom: &ConvGeometry,
    in_dims: &[usize],
) -> Result<Tensor> {
    let out_dims = conv_output_dims(in_dims, kernel.dims(), geom)?;
    if g.dims() != out_dims {
        return Err(PeelError::shape(format!(
            "adjoint cotangent has dims {:?}, conv output is {out_dims:?}",
            g.dims()
        )));
    }
    let mut out = Tensor::zeros(in_dims);
    conv_adjoint_raw(g.data(), out_dims, kernel, geom, in_dims, out.data_mut());
    Ok(out)
}

pub(crate) fn conv_adjoint_raw(
    g: &[f64],
    out_dims: [usize; 3],
    kernel: &Tensor,
    geom: &ConvGeometry,
    in_dims: &[usize],
    out: &mut [f64],
) {
    let lowered = Lowering::new(in_dims, kernel.dims(), geom, out_dims);
    let (m, k, n) = (lowered.rows(), out_dims[0], lowered.plane());
    if lowered.is_pointwise() {
        gemm(m, k, n, kernel.data(), [1, m], g, [n, 1], out);
        return;
    }
    let mut cols = vec![0.0; m * n];
    gemm(m, k, n, kernel.data(), [1, m], g, [n, 1], &mut cols);
    lowered.col2im(&cols, out);
}

/// `c[m×n] = a[m×k] · b[k×n]` with explicit (row, column) strides for `a`, `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: [usize; 2],
    b: &[f64],
    b_strides: [usize; 2],
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() == m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    // SAFETY: the asserts above bound every index the strided reads and writes can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides[0] as isize,
            a_strides[1] as isize,
            b.as_ptr(),
            b_strides[0] as isize,
            b_strides[1] as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Index bookkeeping for the im2col lowering of one convolution.
struct Lowering {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeometry,
}

impl Lowering {
    fn new(
        in_dims: &[usize],
        kernel_dims: &[usize],
        geom: &ConvGeometry,
        out_dims: [usize; 3],
    ) -> Self {
        Self {
            c_in: in_dims[0],
            h: in_dims[1],
            w: in_dims[2],
            kh: kernel_dims[2],
            kw: kernel_dims[3],
            oh: out_dims[1],
            ow: out_dims[2],
            geom: *geom,
        }
    }

    fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1, stride 1, no padding: the input already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom == ConvGeometry::unit()
    }

    /// Calls `f(col_row, c, u, v, i_range, j_range)` for every kernel tap with
    /// a nonempty in-bounds output window.
    fn for_each_tap(
        &self,
        mut f: impl FnMut(usize, usize, usize, usize, (usize, usize), (usize, usize)),
    ) {
        let [sh, sw] = self.geom.stride;
        let [ph, pw] = self.geom.padding;
        for c in 0..self.c_in {
            for u in 0..self.kh {
                let ir = valid_range(self.oh, self.h, sh, u, ph);
                for v in 0..self.kw {
                    let jr = valid_range(self.ow, self.w, sw, v, pw);
                    f((c * self.kh + u) * self.kw + v, c, u, v, ir, jr);
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let plane = self.plane();
        let mut cols = vec![0.0; self.rows() * plane];
        let [sh, sw] = self.geom.stride;
        let [ph, pw] = self.geom.padding;
        let (h, w, ow) = (self.h, self.w, self.ow);
        self.for_each_tap(|r, c, u, v, (i_lo, i_hi), (j_lo, j_hi)| {
            let xc = &x[c * h * w..(c + 1) * h * w];
            let dst = &mut cols[r * plane..(r + 1) * plane];
            for i in i_lo..i_hi {
                let row = (i * sh + u - ph) * w;
                let drow = &mut dst[i * ow..(i + 1) * ow];
                if sw == 1 {
                    let start = row + j_lo + v - pw;
                    drow[j_lo..j_hi].copy_from_slice(&xc[start..start + (j_hi - j_lo)]);
                } else {
                    for j in j_lo..j_hi {
                        drow[j] = xc[row + j * sw + v - pw];
                    }
                }
            }
        });
        cols
    }

    fn col2im(&self, cols: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let plane = self.plane();
        let [sh, sw] = self.geom.stride;
        let [ph, pw] = self.geom.padding;
        let (h, w, ow) = (self.h, self.w, self.ow);
        self.for_each_tap(|r, c, u, v, (i_lo, i_hi), (j_lo, j_hi)| {
            let xg = &mut out[c * h * w..(c + 1) * h * w];
            let src = &cols[r * plane..(r + 1) * plane];
            for i in i_lo..i_hi {
                let row = (i * sh + u - ph) * w;
                let srow = &src[i * ow..(i + 1) * ow];
                if sw == 1 {
                    let start = row + j_lo + v - pw;
                    for (xv, &gv) in xg[start..start + (j_hi - j_lo)]
                        .iter_mut()
                        .zip(&srow[j_lo..j_hi])
                    {
                        *xv += gv;
                    }
                } else {
                    for j in j_lo..j_hi {
                        xg[row + j * sw + v - pw] += srow[j];
                    }
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Six nested loops straight from the definition.
    fn reference_conv(x: &Tensor, k: &Tensor, geom: &ConvGeometry) -> Tensor {
        let (c_in, h, w) = x.chw().unwrap();
        let kd = k.dims();
        let (c_out, kh, kw) = (kd[0], kd[2], kd[3]);
        let oh = (h + 2 * geom.padding[0] - kh) / geom.stride[0] + 1;
        let ow = (w + 2 * geom.padding[1] - kw) / geom.stride[1] + 1;
        let mut y = Tensor::zeros(&[c_out, oh, ow]);
        for o in 0..c_out {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..c_in {
                        for u in 0..kh {
                            for v in 0..kw {
                                let r =
                                    (i * geom.stride[0] + u) as isize - geom.padding[0] as isize;
                                let s =
                                    (j * geom.stride[1] + v) as isize - geom.padding[1] as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= w as isize {
                                    continue;
                                }
                                acc += k.data()[((o * c_in + c) * kh + u) * kw + v]
                                    * x.data()[(c * h + r as usize) * w + s as usize];
                            }
                        }
                    }
                    y.data_mut()[(o * oh + i) * ow + j] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[1, 5, 7], 1.0, &mut rng);
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &k, &ConvGeometry::unit()).unwrap(), x);
        let g = Tensor::randn(&[1, 5, 7], 1.0, &mut rng);
        assert_eq!(
            conv2d_adjoint(&g, &k, &ConvGeometry::unit(), &[1, 5, 7]).unwrap(),
            g
        );
    }

    #[test]
    fn all_ones_sums_nine() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, &ConvGeometry::unit()).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn strided_padded_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 5, 5], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let geom = ConvGeometry::new(2, 1);
        let y = conv2d(&x, &k, &geom).unwrap();
        let r = reference_conv(&x, &k, &geom);
        assert_eq!(y.dims(), &[3, 3, 3]);
        for (a, b) in y.data().iter().zip(r.data()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn random_geometries_match_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let c = rng.gen_range(1..4);
            let o = rng.gen_range(1..4);
            let kh = rng.gen_range(1..5);
            let kw = rng.gen_range(1..5);
            let geom = ConvGeometry {
                stride: [rng.gen_range(1..4), rng.gen_range(1..4)],
                padding: [rng.gen_range(0..3), rng.gen_range(0..3)],
            };
            let h = rng.gen_range(kh.max(1)..9);
            let w = rng.gen_range(kw.max(1)..9);
            let x = Tensor::randn(&[c, h, w], 1.0, &mut rng);
            let k = Tensor::randn(&[o, c, kh, kw], 1.0, &mut rng);
            let y = conv2d(&x, &k, &geom).unwrap();
            let r = reference_conv(&x, &k, &geom);
            assert_eq!(y.dims(), r.dims());
            for (a, b) in y.data().iter().zip(r.data()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn adjoint_scatters_kernel_footprint() {
        // Explicit conv matrix for a 1×4×4 input and an all-ones 3×3 kernel,
        // stride 1, no padding: 4 outputs × 16 inputs. Its transpose applied
        // to a one-hot g is the corresponding matrix row.
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let geom = ConvGeometry::unit();
        let mut matrix = vec![vec![0.0; 16]; 4];
        for col in 0..16 {
            let mut e = Tensor::zeros(&[1, 4, 4]);
            e.data_mut()[col] = 1.0;
            let y = conv2d(&e, &k, &geom).unwrap();
            for (row, v) in matrix.iter_mut().zip(y.data()) {
                row[col] = *v;
            }
        }
        for (hot, row) in matrix.iter().enumerate() {
            let mut g = Tensor::zeros(&[1, 2, 2]);
            g.data_mut()[hot] = 1.0;
            let back = conv2d_adjoint(&g, &k, &geom, &[1, 4, 4]).unwrap();
            assert_eq!(back.data(), row.as_slice());
        }
        // Output (1,1) covers rows 1..4 and columns 1..4.
        let mut g = Tensor::zeros(&[1, 2, 2]);
        g.data_mut()[3] = 1.0;
        let back = conv2d_adjoint(&g, &k, &geom, &[1, 4, 4]).unwrap();
        #[rustfmt::skip]
        let expected = [
            0.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 1.0, 1.0,
            0.0, 1.0, 1.0, 1.0,
            0.0, 1.0, 1.0, 1.0,
        ];
        assert_eq!(back.data(), &expected);
    }

    #[test]
    fn rejects_mismatches() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &k, &ConvGeometry::unit()),
            Err(PeelError::Shape(_))
        ));
        let k = Tensor::zeros(&[1, 2, 5, 5]);
        assert!(conv2d(&x, &k, &ConvGeometry::unit()).is_err());
        let k = Tensor::zeros(&[1, 2, 3, 3]);
        let g = Tensor::zeros(&[1, 3, 3]);
        assert!(conv2d_adjoint(&g, &k, &ConvGeometry::unit(), &[2, 4, 4]).is_err());
        let bad = Tensor::new(vec![2, 4, 4], {
            let mut v = vec![0.0; 32];
            v[5] = f64::INFINITY;
            v
        })
        .unwrap();
        assert!(matches!(
            conv2d(&bad, &k, &ConvGeometry::unit()),
            Err(PeelError::Validation(_))
        ));
    }
}
