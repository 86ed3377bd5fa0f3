//! Reconstruction quality. Image metrics assume the 0–255 pixel scale.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{PeelError, Result};
use crate::tensor::Tensor;

pub const PIXEL_MAX: f64 = 255.0;

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.ensure_same_dims(b, "mse")?;
    if a.is_empty() {
        return Err(PeelError::shape("mse of empty tensors"));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10·log₁₀(max²/mse)`; infinite for `mse = 0`.
pub fn psnr(mse: f64, max_val: f64) -> Result<f64> {
    if !(mse >= 0.0) {
        return Err(PeelError::invalid(format!(
            "mse must be nonnegative, got {mse}"
        )));
    }
    if !(max_val > 0.0) {
        return Err(PeelError::invalid(format!(
            "max_val must be positive, got {max_val}"
        )));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// `‖x̂ − x‖ / ‖x‖`.
pub fn relative_error(estimate: &Tensor, reference: &Tensor) -> Result<f64> {
    estimate.ensure_same_dims(reference, "relative error")?;
    let denom = reference.norm();
    if !(denom > 0.0) {
        return Err(PeelError::invalid(
            "relative error against a zero reference",
        ));
    }
    Ok(estimate.sub(reference)?.norm() / denom)
}

/// Euclidean distance to the nearest reference feature (K = 1).
pub fn knn_distance(query: &Tensor, references: &[Tensor]) -> Result<f64> {
    if references.is_empty() {
        return Err(PeelError::invalid(
            "knn distance needs at least one reference",
        ));
    }
    let mut best = f64::INFINITY;
    for r in references {
        best = best.min(query.sub(r)?.norm());
    }
    Ok(best)
}

/// A real that serializes `±∞` as the strings `"inf"` / `"-inf"`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Db(pub f64);

impl Serialize for Db {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else if self.0 == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Db {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Db(v)),
            Raw::Text(t) if t == "inf" => Ok(Db(f64::INFINITY)),
            Raw::Text(t) if t == "-inf" => Ok(Db(f64::NEG_INFINITY)),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad dB value '{t}'"))),
        }
    }
}

impl std::fmt::Display for Db {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0.is_infinite() {
            f.write_str(if self.0 > 0.0 { "inf" } else { "-inf" })
        } else {
            write!(f, "{:.2}", self.0)
        }
    }
}

/// Image-quality scores for one reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub mse: f64,
    pub psnr: Db,
    pub relative_error: f64,
}

pub fn score(estimate: &Tensor, reference: &Tensor, max_val: f64) -> Result<ImageScore> {
    let m = mse(estimate, reference)?;
    Ok(ImageScore {
        mse: m,
        psnr: Db(psnr(m, max_val)?),
        relative_error: relative_error(estimate, reference)?,
    })
}

/// Mean and sample standard deviation (`n − 1` denominator; 0 for one value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2e} ± {:.2e}", self.mean, self.std)
    }
}

/// Both PSNR aggregations, since per-sample averaging and PSNR of the mean
/// MSE differ by a Jensen gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub mse: MeanStd,
    pub relative_error: MeanStd,
    pub mean_of_per_sample_psnr: Db,
    pub psnr_std: Db,
    pub psnr_of_mean_mse: Db,
}

pub fn summarize(scores: &[ImageScore], max_val: f64) -> Result<ScoreSummary> {
    if scores.is_empty() {
        return Err(PeelError::invalid("nothing to summarize"));
    }
    let mses: Vec<f64> = scores.iter().map(|s| s.mse).collect();
    let psnrs: Vec<f64> = scores.iter().map(|s| s.psnr.0).collect();
    let rels: Vec<f64> = scores.iter().map(|s| s.relative_error).collect();
    let mse = MeanStd::of(&mses);
    let p = MeanStd::of(&psnrs);
    Ok(ScoreSummary {
        mse,
        relative_error: MeanStd::of(&rels),
        mean_of_per_sample_psnr: Db(p.mean),
        psnr_std: Db(if p.std.is_nan() { f64::INFINITY } else { p.std }),
        psnr_of_mean_mse: Db(psnr(mse.mean, max_val)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse(&t(&[1.0, 2.0]), &t(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(mse(&t(&[0.0]), &t(&[10.0])).unwrap(), 100.0);
        assert!(mse(&t(&[0.0]), &t(&[1.0, 2.0])).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = Tensor::uniform(&[3, 4, 5], 0.0, 255.0, &mut rng);
            let b = Tensor::uniform(&[3, 4, 5], 0.0, 255.0, &mut rng);
            let mut acc = 0.0;
            for i in 0..a.len() {
                let d = a.data()[i] - b.data()[i];
                acc += d * d;
            }
            let got = mse(&a, &b).unwrap();
            assert!((got - acc / 60.0).abs() <= 1e-12 * got);
        }
    }

    #[test]
    fn psnr_cases() {
        assert_eq!(psnr(255.0 * 255.0, 255.0).unwrap(), 0.0);
        assert!((psnr(774.17, 255.0).unwrap() - 19.24).abs() < 5e-3);
        assert_eq!(psnr(0.0, 255.0).unwrap(), f64::INFINITY);
        assert!(psnr(-1.0, 255.0).is_err());
    }

    #[test]
    fn relative_error_cases() {
        let x = t(&[1.0, -2.0, 3.0]);
        assert_eq!(relative_error(&x, &x).unwrap(), 0.0);
        assert_eq!(relative_error(&x.scale(2.0), &x).unwrap(), 1.0);
        assert!(relative_error(&x, &t(&[0.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn knn_cases() {
        let refs = vec![t(&[0.0, 0.0]), t(&[3.0, 4.0])];
        assert_eq!(knn_distance(&t(&[0.0, 0.0]), &refs).unwrap(), 0.0);
        assert_eq!(knn_distance(&t(&[3.0, 0.0]), &refs).unwrap(), 3.0);
        assert!(knn_distance(&t(&[0.0, 0.0]), &[]).is_err());
        assert!(knn_distance(&t(&[0.0]), &refs).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let list: Vec<Tensor> = (0..7).map(|_| Tensor::randn(&[5], 1.0, &mut rng)).collect();
            let q = Tensor::randn(&[5], 1.0, &mut rng);
            let brute = list
                .iter()
                .map(|r| {
                    let mut s = 0.0;
                    for i in 0..5 {
                        s += (q.data()[i] - r.data()[i]).powi(2);
                    }
                    s.sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            assert!((knn_distance(&q, &list).unwrap() - brute).abs() <= 1e-12);
        }
    }

    #[test]
    fn infinity_renders_as_text() {
        let s = score(&t(&[4.0, 5.0]), &t(&[4.0, 5.0]), PIXEL_MAX).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"psnr\":\"inf\""), "{json}");
        let back: ImageScore = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert_eq!(Db(f64::INFINITY).to_string(), "inf");
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!((m.mean, m.std, m.n), (2.0, 1.0, 3));
        assert_eq!(MeanStd::of(&[5.0]).std, 0.0);
    }

    #[test]
    fn summary_reports_both_psnr_aggregates() {
        let a = ImageScore {
            mse: 100.0,
            psnr: Db(psnr(100.0, 255.0).unwrap()),
            relative_error: 0.1,
        };
        let b = ImageScore {
            mse: 400.0,
            psnr: Db(psnr(400.0, 255.0).unwrap()),
            relative_error: 0.2,
        };
        let s = summarize(&[a, b], 255.0).unwrap();
        assert!(s.mean_of_per_sample_psnr.0 > s.psnr_of_mean_mse.0);
        assert_eq!(s.psnr_of_mean_mse.0, psnr(250.0, 255.0).unwrap());
    }

    proptest! {
        #[test]
        fn mse_symmetric_nonnegative(v in proptest::collection::vec(-1e3f64..1e3, 1..20), shift in -5.0f64..5.0) {
            let a = t(&v);
            let b = a.map(|x| x + shift);
            let ab = mse(&a, &b).unwrap();
            prop_assert_eq!(ab, mse(&b, &a).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab == 0.0, shift == 0.0 || a == b);
        }

        #[test]
        fn psnr_decreasing(m1 in 1e-6f64..1e5, factor in 1.0001f64..100.0) {
            prop_assert!(psnr(m1, 255.0).unwrap() > psnr(m1 * factor, 255.0).unwrap());
        }

        #[test]
        fn relative_error_scale_covariant(v in proptest::collection::vec(0.5f64..10.0, 2..10), c in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0]) {
            let x = t(&v);
            let xh = x.map(|e| e * 1.1 + 0.2);
            let base = relative_error(&xh, &x).unwrap();
            let scaled = relative_error(&xh.scale(c), &x.scale(c)).unwrap();
            prop_assert!((base - scaled).abs() <= 1e-12 * base.max(1e-12));
        }
    }
}
