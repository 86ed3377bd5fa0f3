//! Stem inversion by regularized embedding inversion:
//!
//! ```text
//! Γ(x) = ‖Φ(x) − Φ̃₀‖² / ‖Φ̃₀‖² + λ_α R_α(x) + λ_Vβ R_Vβ(x)
//! ```
//!
//! minimized with Adam and clamping to the pixel box.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PeelError, Result};
use crate::model::{Activation, ConvLayer, StemLayer};
use crate::optim::{AdamConfig, AdamMoments};
use crate::tensor::{maxpool, maxpool_vjp, sqnorm, PoolArgmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShallowConfig {
    pub lambda_alpha: f64,
    pub lambda_vbeta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    /// Geometric decay target for the step size, as in the block solver.
    #[serde(default)]
    pub final_lr: Option<f64>,
    #[serde(default)]
    pub decay_start: f64,
    pub epochs: usize,
    pub seed: u64,
    pub pixel_box: [f64; 2],
    pub adam: AdamConfig,
}

impl Default for ShallowConfig {
    fn default() -> Self {
        Self {
            lambda_alpha: 1e-7,
            lambda_vbeta: 1e-6,
            alpha: 6.0,
            beta: 2.0,
            lr: 5.0,
            final_lr: Some(0.01),
            decay_start: 0.5,
            epochs: 2000,
            seed: 0,
            pixel_box: [0.0, 255.0],
            adam: AdamConfig::default(),
        }
    }
}

impl ShallowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_alpha >= 0.0 && self.lambda_vbeta >= 0.0) {
            return Err(PeelError::invalid(
                "regularizer weights must be nonnegative",
            ));
        }
        if !(self.alpha >= 1.0) {
            return Err(PeelError::invalid(format!(
                "alpha must be ≥ 1, got {}",
                self.alpha
            )));
        }
        if !(self.beta > 0.0) {
            return Err(PeelError::invalid(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.lr > 0.0) || self.epochs == 0 {
            return Err(PeelError::invalid(
                "learning rate and epoch count must be positive",
            ));
        }
        if self.final_lr.is_some_and(|f| !(f > 0.0 && f.is_finite())) {
            return Err(PeelError::invalid("final learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.decay_start) {
            return Err(PeelError::invalid("decay_start must lie in [0, 1)"));
        }
        let [lo, hi] = self.pixel_box;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(PeelError::invalid(format!(
                "pixel box [{lo}, {hi}] is not a closed interval"
            )));
        }
        self.adam.validate().map_err(PeelError::invalid)
    }

    /// Pixels are divided by this before `R_α` so the α-prior is scale-free.
    pub fn alpha_scale(&self) -> f64 {
        let s = self.pixel_box[0].abs().max(self.pixel_box[1].abs());
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    pub fn lr_at(&self, t: u64) -> f64 {
        match self.final_lr {
            Some(last) if self.epochs > 1 => {
                let pos = (t.saturating_sub(1)) as f64 / (self.epochs - 1) as f64;
                let frac = ((pos - self.decay_start) / (1.0 - self.decay_start)).clamp(0.0, 1.0);
                self.lr * (last / self.lr).powf(frac)
            }
            _ => self.lr,
        }
    }
}

/// `R_α(x) = Σ |xᵢ|^α` and its gradient `α·sign(xᵢ)·|xᵢ|^{α−1}`.
pub fn alpha_norm(x: &Tensor, alpha: f64) -> (f64, Tensor) {
    let value = x.data().iter().map(|v| v.abs().powf(alpha)).sum();
    let grad = x.map(|v| alpha * v.signum() * v.abs().powf(alpha - 1.0));
    let grad = if alpha == 1.0 {
        grad.map(|g| if g.is_nan() { 0.0 } else { g })
    } else {
        grad
    };
    (value, grad)
}

/// `R_Vβ(x) = Σ_{c,i,j} ((x_{i,j+1} − x_{i,j})² + (x_{i+1,j} − x_{i,j})²)^{β/2}`
/// per channel, with a missing forward neighbor contributing a zero difference.
pub fn tv_norm(x: &Tensor, beta: f64) -> Result<(f64, Tensor)> {
    let (c, h, w) = x.chw()?;
    if h < 2 || w < 2 {
        return Err(PeelError::shape(format!(
            "TV norm needs spatial dims ≥ 2, got {h}×{w}"
        )));
    }
    let d = x.data();
    let mut value = 0.0;
    let mut grad = Tensor::zeros(x.dims());
    let g = grad.data_mut();
    let half = beta / 2.0;
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..h {
            for j in 0..w {
                let at = base + i * w + j;
                let dx = if j + 1 < w { d[at + 1] - d[at] } else { 0.0 };
                let dy = if i + 1 < h { d[at + w] - d[at] } else { 0.0 };
                let s = dx * dx + dy * dy;
                if s == 0.0 {
                    continue;
                }
                value += s.powf(half);
                let ds = half * s.powf(half - 1.0);
                if j + 1 < w {
                    g[at + 1] += ds * 2.0 * dx;
                }
                if i + 1 < h {
                    g[at + w] += ds * 2.0 * dy;
                }
                g[at] -= ds * 2.0 * (dx + dy);
            }
        }
    }
    Ok((value, grad))
}

enum Tape<'a> {
    Scale(f64),
    Conv(&'a ConvLayer, [usize; 3]),
    Act(Activation, Tensor),
    Pool(PoolArgmax),
}

fn stem_forward_taped<'a>(x: &Tensor, stem: &'a [StemLayer]) -> Result<(Tensor, Vec<Tape<'a>>)> {
    let mut h = x.clone();
    let mut tape = Vec::with_capacity(stem.len());
    for (i, layer) in stem.iter().enumerate() {
        let at = |e: PeelError| PeelError::invalid(format!("stem layer {i}: {e}"));
        h = match layer {
            StemLayer::Scale { factor } => {
                tape.push(Tape::Scale(*factor));
                h.scale(*factor)
            }
            StemLayer::Conv(c) => {
                if !c.is_folded() {
                    return Err(PeelError::Unsupported(format!(
                        "stem layer {i}: conv carries batch norm; fold it before inverting"
                    )));
                }
                let dims = [h.dims()[0], h.dims()[1], h.dims()[2]];
                let y = c.apply(&h).map_err(at)?;
                tape.push(Tape::Conv(c, dims));
                y
            }
            StemLayer::Activation(a) => {
                let y = a.apply(&h);
                tape.push(Tape::Act(*a, h));
                y
            }
            StemLayer::MaxPool { window, stride } => {
                let (y, arg) = maxpool(&h, *window, *stride).map_err(at)?;
                tape.push(Tape::Pool(arg));
                y
            }
            StemLayer::BatchNorm(_) => {
                return Err(PeelError::Unsupported(format!(
                    "stem layer {i}: standalone batch norm; fold it before inverting"
                )))
            }
        };
    }
    Ok((h, tape))
}

fn stem_vjp(tape: &[Tape<'_>], mut g: Tensor) -> Result<Tensor> {
    for step in tape.iter().rev() {
        g = match step {
            Tape::Scale(f) => g.scale(*f),
            Tape::Conv(c, dims) => c.adjoint(&g, dims)?,
            Tape::Act(a, input) => a.vjp(input, &g)?,
            Tape::Pool(arg) => maxpool_vjp(arg, &g)?,
        };
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShallowParts {
    /// `‖Φ(x) − Φ̃₀‖² / ‖Φ̃₀‖²`
    pub fidelity: f64,
    /// `λ_α R_α(x / s)` with `s` the pixel-box scale.
    pub alpha_term: f64,
    pub tv_term: f64,
    pub total: f64,
}

/// `Γ(x)` and `∇Γ(x)`.
pub fn shallow_objective(
    x: &Tensor,
    target: &Tensor,
    stem: &[StemLayer],
    cfg: &ShallowConfig,
) -> Result<(ShallowParts, Tensor)> {
    let t2 = sqnorm(target);
    if !(t2 > 0.0) {
        return Err(PeelError::invalid("target features have zero norm"));
    }
    let (phi, tape) = stem_forward_taped(x, stem)?;
    if phi.dims() != target.dims() {
        return Err(PeelError::shape(format!(
            "stem outputs {:?}, target features are {:?}",
            phi.dims(),
            target.dims()
        )));
    }
    let r = phi.sub(target)?;
    let fidelity = sqnorm(&r) / t2;
    let mut grad = stem_vjp(&tape, r.scale(2.0 / t2))?;
    let mut parts = ShallowParts {
        fidelity,
        alpha_term: 0.0,
        tv_term: 0.0,
        total: fidelity,
    };
    if cfg.lambda_alpha != 0.0 {
        let s = cfg.alpha_scale();
        let (v, g) = alpha_norm(&x.scale(1.0 / s), cfg.alpha);
        parts.alpha_term = cfg.lambda_alpha * v;
        grad.add_scaled_assign(cfg.lambda_alpha / s, &g)?;
    }
    if cfg.lambda_vbeta != 0.0 {
        let (v, g) = tv_norm(x, cfg.beta)?;
        parts.tv_term = cfg.lambda_vbeta * v;
        grad.add_scaled_assign(cfg.lambda_vbeta, &g)?;
    }
    parts.total = parts.fidelity + parts.alpha_term + parts.tv_term;
    Ok((parts, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShallowReport {
    pub objective_trace: Vec<f64>,
    pub final_parts: ShallowParts,
    pub iterations: usize,
    /// Kept out of serialized reports so output files stay reproducible.
    #[serde(skip_serializing, default)]
    pub wall_clock_secs: f64,
    /// `‖x̂ − x‖/‖x‖` against a known image, when one is available.
    pub oracle_relative_error: Option<f64>,
}

fn clamp_box(x: &mut Tensor, [lo, hi]: [f64; 2]) {
    for v in x.data_mut() {
        *v = v.clamp(lo, hi);
    }
}

/// Image whose stem embedding best matches `target` under the priors.
pub fn invert_shallow(
    target: &Tensor,
    stem: &[StemLayer],
    input_dims: [usize; 3],
    cfg: &ShallowConfig,
) -> Result<(Tensor, ShallowReport)> {
    cfg.validate()?;
    target.validate_finite("target features")?;
    if !(sqnorm(target) > 0.0) {
        return Err(PeelError::invalid("target features have zero norm"));
    }
    let started = Instant::now();
    let [lo, hi] = cfg.pixel_box;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = Tensor::randn(&input_dims, 1.0, &mut rng).map(|v| v + 0.5 * (lo + hi));
    clamp_box(&mut x, cfg.pixel_box);
    let mut moments = AdamMoments::new(x.len());
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (parts, grad) = shallow_objective(&x, target, stem, cfg)?;
        if !parts.total.is_finite() {
            return Err(PeelError::Diverged {
                step: epoch,
                value: parts.total,
            });
        }
        trace.push(parts.total);
        let t = epoch as u64 + 1;
        moments.step(&cfg.adam, cfg.lr_at(t), t, x.data_mut(), grad.data());
        clamp_box(&mut x, cfg.pixel_box);
    }
    let (final_parts, _) = shallow_objective(&x, target, stem, cfg)?;
    if !final_parts.total.is_finite() {
        return Err(PeelError::Diverged {
            step: cfg.epochs,
            value: final_parts.total,
        });
    }
    Ok((
        x,
        ShallowReport {
            objective_trace: trace,
            final_parts,
            iterations: cfg.epochs,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            oracle_relative_error: None,
        },
    ))
}
