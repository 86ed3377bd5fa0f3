use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NetworkSpec;
use crate::error::{PeelError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitKind {
    /// N(0, σ²) for every kernel entry.
    Gaussian { sigma: f64 },
    /// N(0, 2/fan_in) with fan_in = C·kH·kW of each kernel.
    FanIn,
    /// U(−1/√fan_in, 1/√fan_in), the common framework default for conv layers.
    FanInUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitScheme {
    #[serde(flatten)]
    pub kind: InitKind,
    pub seed: u64,
}

impl InitScheme {
    pub fn fan_in(seed: u64) -> Self {
        Self {
            kind: InitKind::FanIn,
            seed,
        }
    }

    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        Self {
            kind: InitKind::Gaussian { sigma },
            seed,
        }
    }

    pub fn fan_in_uniform(seed: u64) -> Self {
        Self {
            kind: InitKind::FanInUniform,
            seed,
        }
    }

    fn draw<R: rand::Rng>(&self, dims: &[usize], rng: &mut R) -> Tensor {
        let fan_in = dims[1..].iter().product::<usize>() as f64;
        match self.kind {
            InitKind::Gaussian { sigma } => Tensor::randn(dims, sigma, rng),
            InitKind::FanIn => Tensor::randn(dims, (2.0 / fan_in).sqrt(), rng),
            InitKind::FanInUniform => {
                let bound = 1.0 / fan_in.sqrt();
                Tensor::uniform(dims, -bound, bound, rng)
            }
        }
    }
}

/// Fills every convolution kernel (stem, `W₁`, `W₂`, projection skips) with
/// seeded Gaussian draws, in network order. Identity skips stay identities
/// and biases are left as they are.
pub fn random_init(spec: &NetworkSpec, scheme: &InitScheme) -> Result<NetworkSpec> {
    if let InitKind::Gaussian { sigma } = scheme.kind {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(PeelError::invalid(format!(
                "gaussian init needs sigma > 0, got {sigma}"
            )));
        }
    }
    let mut net = spec.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(scheme.seed);
    for conv in net.convs_mut() {
        let dims = conv.kernel.dims().to_vec();
        // f32-representable so a saved model reloads bit-exactly
        conv.kernel = scheme.draw(&dims, &mut rng).map(|v| v as f32 as f64);
    }
    Ok(net)
}
