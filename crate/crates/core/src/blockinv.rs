//! Single-block inversion by a penalty method.
//!
//! The block relation `y = W_s x + W₂ act(W₁ x)` is relaxed by introducing
//! nonnegative `p`, `n` with `W₁x = p − n` and disjoint supports, so that
//! `act(W₁x) = p − a·n` (`a` is the negative slope, 0 for ReLU). The solver
//! minimizes
//!
//! ```text
//! ‖y − W_s x − W₂(p − a·n)‖² + λ₁·comp(p, n) + λ₂·‖W₁x − p + n‖²
//! ```
//!
//! with Adam steps on `(x, p, n)` followed by clamping `p` and `n` to the
//! nonnegative orthant.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PeelError, Result};
use crate::forward::resblock_forward;
use crate::model::{ConvLayer, ResBlockSpec, Skip};
use crate::optim::{AdamConfig, AdamMoments};
use crate::tensor::{relu_pair, sqnorm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComplementarityMode {
    /// `(Σᵢ pᵢnᵢ)²`
    Scalar,
    /// `Σᵢ (pᵢnᵢ)²`
    Elementwise,
}

impl std::str::FromStr for ComplementarityMode {
    type Err = PeelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(Self::Scalar),
            "elementwise" => Ok(Self::Elementwise),
            other => Err(PeelError::invalid(format!(
                "complementarity mode must be scalar or elementwise, got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// Complementarity weight.
    pub lambda1: f64,
    /// Splitting-constraint weight.
    pub lambda2: f64,
    pub lr: f64,
    /// Learning rate reached at the last epoch by geometric decay; `None` keeps `lr` fixed.
    #[serde(default)]
    pub final_lr: Option<f64>,
    /// Fraction of the epochs run at `lr` before the decay starts.
    #[serde(default)]
    pub decay_start: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Standard deviation of the random starting point.
    pub init_scale: f64,
    pub complementarity: ComplementarityMode,
    pub adam: AdamConfig,
    /// Stop once the objective drops below `tol·‖y‖²`.
    pub early_stop: Option<f64>,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            lambda1: 1000.0,
            lambda2: 1000.0,
            lr: 0.01,
            final_lr: None,
            decay_start: 0.0,
            epochs: 2000,
            seed: 0,
            init_scale: 0.01,
            complementarity: ComplementarityMode::Scalar,
            adam: AdamConfig::default(),
            early_stop: None,
        }
    }
}

impl PenaltyConfig {
    /// Step size for Adam step `t` (1-based).
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

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(PeelError::invalid("penalty weights must be nonnegative"));
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
        if !(self.init_scale >= 0.0) {
            return Err(PeelError::invalid("init_scale must be nonnegative"));
        }
        if let Some(tol) = self.early_stop {
            if !(tol > 0.0) {
                return Err(PeelError::invalid("early-stop tolerance must be positive"));
            }
        }
        self.adam.validate().map_err(PeelError::invalid)
    }
}

/// Optimization variables with their Adam moments and objective history.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionState {
    pub x: Tensor,
    pub p: Tensor,
    pub n: Tensor,
    pub moments: [AdamMoments; 3],
    pub step: u64,
    pub trace: Vec<f64>,
}

impl InversionState {
    pub fn new(x: Tensor, p: Tensor, n: Tensor) -> Self {
        let moments = [
            AdamMoments::new(x.len()),
            AdamMoments::new(p.len()),
            AdamMoments::new(n.len()),
        ];
        Self {
            x,
            p,
            n,
            moments,
            step: 0,
            trace: Vec::new(),
        }
    }

    /// Seeded `N(0, scale²)` start, projected onto the cone.
    pub fn random(input_dims: &[usize], hidden_dims: &[usize], scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(input_dims, scale, &mut rng);
        let p = Tensor::randn(hidden_dims, scale, &mut rng);
        let n = Tensor::randn(hidden_dims, scale, &mut rng);
        project_cone(Self::new(x, p, n))
    }
}

/// Projection onto `ℝ × ℝ₊ × ℝ₊`: clamps `p` and `n` at zero, leaves `x`.
pub fn project_cone(mut state: InversionState) -> InversionState {
    clamp_nonneg(&mut state.p);
    clamp_nonneg(&mut state.n);
    state
}

fn clamp_nonneg(t: &mut Tensor) {
    for v in t.data_mut() {
        // also maps -0.0 to +0.0
        if !(*v > 0.0) {
            *v = 0.0;
        }
    }
}

/// Objective value split into its three terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParts {
    pub data: f64,
    pub complementarity: f64,
    pub splitting: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyGradients {
    pub x: Tensor,
    pub p: Tensor,
    pub n: Tensor,
}

/// The linear structure of one inversion problem.
///
/// Data term: `y − skip(x) − out(p − a·n)`; constraint: `inner(x) = p − n`.
/// Residual blocks use `skip = W_s`, `out = W₂`; a plain layer has no skip and
/// `out = I`.
#[derive(Debug, Clone)]
pub(crate) struct SplitProblem<'a> {
    /// `y` minus every bias on the output side.
    target: Tensor,
    y_sqnorm: f64,
    input_dims: [usize; 3],
    hidden_dims: [usize; 3],
    inner: &'a ConvLayer,
    inner_bias: Option<Tensor>,
    out: Option<&'a ConvLayer>,
    skip: Option<&'a Skip>,
    slope: f64,
}

fn require_folded(conv: &ConvLayer, what: &str) -> Result<()> {
    if conv.is_folded() {
        Ok(())
    } else {
        Err(PeelError::Unsupported(format!(
            "{what} carries batch norm; fold it before inverting"
        )))
    }
}

impl<'a> SplitProblem<'a> {
    pub(crate) fn for_block(y: &Tensor, block: &'a ResBlockSpec) -> Result<Self> {
        let out_dims = block.output_dims()?;
        if y.dims() != out_dims {
            return Err(PeelError::shape(format!(
                "features have dims {:?}, block outputs {out_dims:?}",
                y.dims()
            )));
        }
        y.validate_finite("block features")?;
        require_folded(&block.w1, "W₁")?;
        require_folded(&block.w2, "W₂")?;
        let mut target = y.clone();
        if let Some(b) = block.w2.bias_tensor(&out_dims)? {
            target = target.sub(&b)?;
        }
        if let Skip::Conv(s) = &block.skip {
            require_folded(s, "W_s")?;
            if let Some(b) = s.bias_tensor(&out_dims)? {
                target = target.sub(&b)?;
            }
        }
        let hidden_dims = block.hidden_dims()?;
        Ok(Self {
            y_sqnorm: sqnorm(y),
            target,
            input_dims: block.input_dims,
            hidden_dims,
            inner: &block.w1,
            inner_bias: block.w1.bias_tensor(&hidden_dims)?,
            out: Some(&block.w2),
            skip: Some(&block.skip),
            slope: block.activation.negative_slope(),
        })
    }

    pub(crate) fn for_plain(
        y: &Tensor,
        input_dims: [usize; 3],
        conv: &'a ConvLayer,
        slope: f64,
    ) -> Result<Self> {
        require_folded(conv, "W")?;
        let hidden_dims = conv.output_dims(&input_dims)?;
        if y.dims() != hidden_dims {
            return Err(PeelError::shape(format!(
                "features have dims {:?}, layer outputs {hidden_dims:?}",
                y.dims()
            )));
        }
        y.validate_finite("layer features")?;
        Ok(Self {
            y_sqnorm: sqnorm(y),
            target: y.clone(),
            input_dims,
            hidden_dims,
            inner: conv,
            inner_bias: conv.bias_tensor(&hidden_dims)?,
            out: None,
            skip: None,
            slope,
        })
    }

    /// Features with the output-side biases removed.
    pub(crate) fn target(&self) -> &Tensor {
        &self.target
    }

    pub(crate) fn input_dims(&self) -> [usize; 3] {
        self.input_dims
    }

    pub(crate) fn hidden_dims(&self) -> [usize; 3] {
        self.hidden_dims
    }

    /// `W₁x + b₁`.
    fn preactivation(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = self.inner.apply_linear(x)?;
        if let Some(b) = &self.inner_bias {
            z.add_scaled_assign(1.0, b)?;
        }
        Ok(z)
    }

    /// `y − skip(x) − out(p − a·n)` with output-side biases removed.
    fn data_residual(&self, x: &Tensor, p: &Tensor, n: &Tensor) -> Result<Tensor> {
        let act = if self.slope == 0.0 {
            p.clone()
        } else {
            crate::tensor::axpy(-self.slope, n, p)?
        };
        let mut r = self.target.clone();
        match self.out {
            Some(w2) => r.add_scaled_assign(-1.0, &w2.apply_linear(&act)?)?,
            None => r.add_scaled_assign(-1.0, &act)?,
        }
        match self.skip {
            Some(Skip::Identity) => r.add_scaled_assign(-1.0, x)?,
            Some(Skip::Conv(s)) => r.add_scaled_assign(-1.0, &s.apply_linear(x)?)?,
            None => {}
        }
        Ok(r)
    }

    fn comp(&self, mode: ComplementarityMode, p: &Tensor, n: &Tensor) -> f64 {
        match mode {
            ComplementarityMode::Scalar => {
                let s = crate::tensor::dot(p.data(), n.data());
                s * s
            }
            ComplementarityMode::Elementwise => p
                .data()
                .iter()
                .zip(n.data())
                .map(|(a, b)| (a * b) * (a * b))
                .sum(),
        }
    }

    pub(crate) fn objective(
        &self,
        state: &InversionState,
        cfg: &PenaltyConfig,
    ) -> Result<(ObjectiveParts, PenaltyGradients)> {
        let (x, p, n) = (&state.x, &state.p, &state.n);
        let r = self.data_residual(x, p, n)?;
        let mut s = self.preactivation(x)?;
        s.add_scaled_assign(-1.0, p)?;
        s.add_scaled_assign(1.0, n)?;

        let data = sqnorm(&r);
        let comp = self.comp(cfg.complementarity, p, n);
        let split = sqnorm(&s);
        let parts = ObjectiveParts {
            data,
            complementarity: comp,
            splitting: split,
            total: data + cfg.lambda1 * comp + cfg.lambda2 * split,
        };

        // ∂/∂x = −2 skipᵀ r + 2λ₂ W₁ᵀ s
        let mut gx = self
            .inner
            .adjoint(&s, &self.input_dims)?
            .scale(2.0 * cfg.lambda2);
        match self.skip {
            Some(Skip::Identity) => gx.add_scaled_assign(-2.0, &r)?,
            Some(Skip::Conv(w)) => gx.add_scaled_assign(-2.0, &w.adjoint(&r, &self.input_dims)?)?,
            None => {}
        }

        // outᵀ r feeds both p (−2) and n (+2a)
        let out_t_r = match self.out {
            Some(w2) => w2.adjoint(&r, &self.hidden_dims)?,
            None => r,
        };
        let mut gp = out_t_r.scale(-2.0);
        gp.add_scaled_assign(-2.0 * cfg.lambda2, &s)?;
        let mut gn = s.scale(2.0 * cfg.lambda2);
        if self.slope != 0.0 {
            gn.add_scaled_assign(2.0 * self.slope, &out_t_r)?;
        }
        if cfg.lambda1 != 0.0 {
            match cfg.complementarity {
                ComplementarityMode::Scalar => {
                    let pn = crate::tensor::dot(p.data(), n.data());
                    gp.add_scaled_assign(2.0 * cfg.lambda1 * pn, n)?;
                    gn.add_scaled_assign(2.0 * cfg.lambda1 * pn, p)?;
                }
                ComplementarityMode::Elementwise => {
                    let l1 = cfg.lambda1;
                    for ((g, &pv), &nv) in gp.data_mut().iter_mut().zip(p.data()).zip(n.data()) {
                        *g += 2.0 * l1 * pv * nv * nv;
                    }
                    for ((g, &pv), &nv) in gn.data_mut().iter_mut().zip(p.data()).zip(n.data()) {
                        *g += 2.0 * l1 * pv * pv * nv;
                    }
                }
            }
        }
        Ok((
            parts,
            PenaltyGradients {
                x: gx,
                p: gp,
                n: gn,
            },
        ))
    }

    /// Exact-constraint data residual: `p, n` snapped to the split of `W₁x`.
    pub(crate) fn snapped_data_residual(&self, x: &Tensor) -> Result<f64> {
        let (p, n) = relu_pair(&self.preactivation(x)?);
        Ok(sqnorm(&self.data_residual(x, &p, &n)?))
    }

    pub(crate) fn report(
        &self,
        state: &InversionState,
        cfg: &PenaltyConfig,
        started: Instant,
    ) -> Result<InversionReport> {
        let (parts, _) = self.objective(state, cfg)?;
        Ok(InversionReport {
            objective_trace: state.trace.clone(),
            final_objective: parts.total,
            data_residual: parts.data.sqrt(),
            split_violation: parts.splitting.sqrt(),
            complementarity: parts.complementarity,
            snapped_objective: self.snapped_data_residual(&state.x)?,
            feature_sqnorm: self.y_sqnorm,
            iterations: state.step as usize,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            oracle_relative_error: None,
        })
    }

    /// Runs the projected Adam iteration from `state`.
    pub(crate) fn solve(
        &self,
        state: InversionState,
        cfg: &PenaltyConfig,
    ) -> Result<(InversionState, InversionReport)> {
        self.solve_observed(state, cfg, &mut |_| {})
    }

    /// [`Self::solve`] that hands every projected iterate to `observe`.
    pub(crate) fn solve_observed(
        &self,
        mut state: InversionState,
        cfg: &PenaltyConfig,
        observe: &mut dyn FnMut(&InversionState),
    ) -> Result<(InversionState, InversionReport)> {
        cfg.validate()?;
        let started = Instant::now();
        let stop_below = cfg.early_stop.map(|tol| tol * self.y_sqnorm);
        state.trace.reserve(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let (parts, grads) = self.objective(&state, cfg)?;
            if !parts.total.is_finite() {
                return Err(PeelError::Diverged {
                    step: epoch,
                    value: parts.total,
                });
            }
            state.trace.push(parts.total);
            if stop_below.is_some_and(|limit| parts.total < limit) {
                break;
            }
            state.step += 1;
            let t = state.step;
            let lr = cfg.lr_at(t);
            let [mx, mp, mn] = &mut state.moments;
            mx.step(&cfg.adam, lr, t, state.x.data_mut(), grads.x.data());
            mp.step(&cfg.adam, lr, t, state.p.data_mut(), grads.p.data());
            mn.step(&cfg.adam, lr, t, state.n.data_mut(), grads.n.data());
            state = project_cone(state);
            observe(&state);
        }
        let report = self.report(&state, cfg, started)?;
        if !report.final_objective.is_finite() {
            return Err(PeelError::Diverged {
                step: cfg.epochs,
                value: report.final_objective,
            });
        }
        Ok((state, report))
    }
}

/// Outcome of one block solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionReport {
    pub objective_trace: Vec<f64>,
    /// Penalty objective at the returned iterate.
    pub final_objective: f64,
    /// `‖y − W_s x̂ − W₂ act(p̂, n̂)‖`.
    pub data_residual: f64,
    /// `‖W₁x̂ − p̂ + n̂‖`.
    pub split_violation: f64,
    /// `comp(p̂, n̂)` in the configured mode.
    pub complementarity: f64,
    /// Constrained objective `‖y − W_s x̂ − W₂ act(W₁x̂)‖²`.
    pub snapped_objective: f64,
    /// `‖y‖²`, for scale-free comparisons.
    pub feature_sqnorm: f64,
    pub iterations: usize,
    /// Kept out of serialized reports so output files stay reproducible.
    #[serde(skip_serializing, default)]
    pub wall_clock_secs: f64,
    /// `‖x̂ − x‖/‖x‖` against a known input, when one is available.
    pub oracle_relative_error: Option<f64>,
}

/// Objective value and analytic gradients at `state`.
pub fn penalty_objective(
    state: &InversionState,
    y: &Tensor,
    block: &ResBlockSpec,
    cfg: &PenaltyConfig,
) -> Result<(ObjectiveParts, PenaltyGradients)> {
    let problem = SplitProblem::for_block(y, block)?;
    let hidden = problem.hidden_dims();
    if state.x.dims() != problem.input_dims()
        || state.p.dims() != hidden
        || state.n.dims() != hidden
    {
        return Err(PeelError::shape(format!(
            "state dims x {:?}, p {:?}, n {:?} do not fit block ({:?} → {hidden:?})",
            state.x.dims(),
            state.p.dims(),
            state.n.dims(),
            problem.input_dims()
        )));
    }
    problem.objective(state, cfg)
}

/// Recovers the input of `block` from its output `y`.
pub fn invert_block(
    y: &Tensor,
    block: &ResBlockSpec,
    cfg: &PenaltyConfig,
) -> Result<(Tensor, InversionReport)> {
    let problem = SplitProblem::for_block(y, block)?;
    let state = InversionState::random(
        &problem.input_dims(),
        &problem.hidden_dims(),
        cfg.init_scale,
        cfg.seed,
    );
    let (state, report) = problem.solve(state, cfg)?;
    Ok((state.x, report))
}

/// [`invert_block`] that shows every projected iterate to `observe`.
pub fn invert_block_observed(
    y: &Tensor,
    block: &ResBlockSpec,
    cfg: &PenaltyConfig,
    mut observe: impl FnMut(&InversionState),
) -> Result<(Tensor, InversionReport)> {
    let problem = SplitProblem::for_block(y, block)?;
    let state = InversionState::random(
        &problem.input_dims(),
        &problem.hidden_dims(),
        cfg.init_scale,
        cfg.seed,
    );
    let (state, report) = problem.solve_observed(state, cfg, &mut observe)?;
    Ok((state.x, report))
}

/// Ground-truth triple `(x, relu(W₁x), relu(−W₁x))` and the block output.
pub fn feasible_point(x: &Tensor, block: &ResBlockSpec) -> Result<(InversionState, Tensor)> {
    let mut z = block.w1.apply_linear(x)?;
    block.w1.add_bias(&mut z)?;
    let (p, n) = relu_pair(&z);
    let y = resblock_forward(x, block)?;
    Ok((InversionState::new(x.clone(), p, n), y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;
    use crate::tensor::{inner, ConvGeometry};
    use proptest::prelude::*;

    fn random_block(seed: u64, c: usize, hidden: usize, hw: usize) -> ResBlockSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std1 = (2.0 / (9 * c) as f64).sqrt();
        let std2 = (1.0 / (9 * hidden) as f64).sqrt();
        ResBlockSpec {
            input_dims: [c, hw, hw],
            w1: ConvLayer::new(
                Tensor::randn(&[hidden, c, 3, 3], std1, &mut rng),
                ConvGeometry::new(1, 1),
            ),
            w2: ConvLayer::new(
                Tensor::randn(&[c, hidden, 3, 3], std2, &mut rng),
                ConvGeometry::new(1, 1),
            ),
            skip: Skip::Identity,
            activation: Activation::Relu,
        }
    }

    #[test]
    fn ground_truth_is_a_stationary_zero() {
        for mode in [
            ComplementarityMode::Scalar,
            ComplementarityMode::Elementwise,
        ] {
            let block = random_block(1, 3, 4, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let x = Tensor::randn(&[3, 5, 5], 1.0, &mut rng);
            let (state, y) = feasible_point(&x, &block).unwrap();
            let cfg = PenaltyConfig {
                complementarity: mode,
                ..PenaltyConfig::default()
            };
            let (parts, g) = penalty_objective(&state, &y, &block, &cfg).unwrap();
            assert!(parts.total <= 1e-20, "{parts:?}");
            for t in [&g.x, &g.p, &g.n] {
                assert!(t.max_abs() <= 1e-9, "gradient {}", t.max_abs());
            }
        }
    }

    #[test]
    fn linear_least_squares_reduction() {
        let mut block = random_block(3, 2, 3, 4);
        block.w2.kernel = Tensor::zeros(block.w2.kernel.dims());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        block.skip = Skip::Conv(ConvLayer::new(
            Tensor::randn(&[2, 2, 1, 1], 1.0, &mut rng),
            ConvGeometry::unit(),
        ));
        let y = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let state = InversionState::random(&[2, 4, 4], &[3, 4, 4], 1.0, 9);
        let cfg = PenaltyConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..PenaltyConfig::default()
        };
        let (parts, g) = penalty_objective(&state, &y, &block, &cfg).unwrap();
        let Skip::Conv(ws) = &block.skip else {
            unreachable!()
        };
        let r = y.sub(&ws.apply(&state.x).unwrap()).unwrap();
        assert!((parts.total - sqnorm(&r)).abs() <= 1e-12 * parts.total);
        let expected = ws.adjoint(&r, &[2, 4, 4]).unwrap().scale(-2.0);
        assert!(g.x.sub(&expected).unwrap().max_abs() <= 1e-12);
    }

    fn finite_difference_check(mode: ComplementarityMode, slope: f64, seed: u64) {
        let mut block = random_block(seed, 2, 3, 4);
        if slope != 0.0 {
            block.activation = Activation::Prelu { a: slope };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let y = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let mut state = InversionState::random(&[2, 4, 4], &[3, 4, 4], 0.5, seed);
        // keep p, n strictly inside the orthant
        for v in state.p.data_mut().iter_mut().chain(state.n.data_mut()) {
            *v += 0.1;
        }
        let cfg = PenaltyConfig {
            lambda1: 3.0,
            lambda2: 5.0,
            complementarity: mode,
            ..PenaltyConfig::default()
        };
        let f = |s: &InversionState| penalty_objective(s, &y, &block, &cfg).unwrap().0.total;
        let (_, g) = penalty_objective(&state, &y, &block, &cfg).unwrap();
        let h = 1e-6;
        for var in 0..3 {
            let len = [state.x.len(), state.p.len(), state.n.len()][var];
            for i in (0..len).step_by(3) {
                let bump = |s: &mut InversionState, d: f64| {
                    let t = [&mut s.x, &mut s.p, &mut s.n];
                    let t = t.into_iter().nth(var).unwrap();
                    t.data_mut()[i] += d;
                };
                let mut sp = state.clone();
                bump(&mut sp, h);
                let mut sm = state.clone();
                bump(&mut sm, -h);
                let fd = (f(&sp) - f(&sm)) / (2.0 * h);
                let an = [&g.x, &g.p, &g.n][var].data()[i];
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-8);
                assert!(rel <= 1e-5, "var {var} index {i}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        finite_difference_check(ComplementarityMode::Scalar, 0.0, 5);
        finite_difference_check(ComplementarityMode::Elementwise, 0.0, 6);
        finite_difference_check(ComplementarityMode::Scalar, 0.2, 7);
    }

    #[test]
    fn cone_projection() {
        let p = Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap();
        let n = Tensor::new(vec![2], vec![0.5, -3.0]).unwrap();
        let x = Tensor::new(vec![1], vec![-4.0]).unwrap();
        let s = project_cone(InversionState::new(x.clone(), p, n));
        assert_eq!(s.p.data(), &[0.0, 2.0]);
        assert_eq!(s.n.data(), &[0.5, 0.0]);
        assert_eq!(s.x, x);
        let again = project_cone(s.clone());
        assert_eq!(again, s);
    }

    proptest! {
        #[test]
        fn projection_is_nonexpansive(
            a in prop::collection::vec(-5.0f64..5.0, 12),
            b in prop::collection::vec(-5.0f64..5.0, 12),
        ) {
            let mk = |v: &[f64]| {
                let p = Tensor::new(vec![6], v[..6].to_vec()).unwrap();
                let n = Tensor::new(vec![6], v[6..].to_vec()).unwrap();
                InversionState::new(Tensor::zeros(&[1]), p, n)
            };
            let (s, t) = (mk(&a), mk(&b));
            let (ps, pt) = (project_cone(s.clone()), project_cone(t.clone()));
            for (u, v, pu, pv) in [(&s.p, &t.p, &ps.p, &pt.p), (&s.n, &t.n, &ps.n, &pt.n)] {
                let before = u.sub(v).unwrap().norm();
                let after = pu.sub(pv).unwrap().norm();
                prop_assert!(after <= before + 1e-15);
            }
            prop_assert_eq!(project_cone(ps.clone()), ps);
        }
    }

    #[test]
    fn skip_only_block_recovers_y() {
        let mut block = random_block(8, 2, 3, 4);
        block.w1.kernel = Tensor::zeros(block.w1.kernel.dims());
        block.w2.kernel = Tensor::zeros(block.w2.kernel.dims());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
        let (x, report) = invert_block(&y, &block, &PenaltyConfig::default()).unwrap();
        let rel = x.sub(&y).unwrap().norm() / y.norm();
        assert!(rel <= 1e-8, "relative error {rel}");
        assert!(report.data_residual <= 1e-8 * y.norm());
    }

    #[test]
    fn iterates_stay_feasible_and_runs_are_deterministic() {
        let block = random_block(10, 2, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let (_, y) = feasible_point(&x, &block).unwrap();
        let problem = SplitProblem::for_block(&y, &block).unwrap();
        let cfg = PenaltyConfig {
            epochs: 1,
            ..PenaltyConfig::default()
        };
        let mut state = InversionState::random(&[2, 4, 4], &[3, 4, 4], 0.01, 0);
        for _ in 0..300 {
            state = problem.solve(state, &cfg).unwrap().0;
            assert!(state
                .p
                .data()
                .iter()
                .chain(state.n.data())
                .all(|&v| v >= 0.0));
        }
        let full = PenaltyConfig {
            epochs: 300,
            ..PenaltyConfig::default()
        };
        let (a, _) = invert_block(&y, &block, &full).unwrap();
        let (b, _) = invert_block(&y, &block, &full).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, state.x);
    }

    #[test]
    fn divergence_is_reported() {
        let block = random_block(12, 2, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let y = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let cfg = PenaltyConfig {
            lambda1: f64::INFINITY,
            init_scale: 1.0,
            ..PenaltyConfig::default()
        };
        let err = invert_block(&y, &block, &cfg).unwrap_err();
        assert!(matches!(err, PeelError::Diverged { step: 0, .. }), "{err}");
    }

    #[test]
    fn shape_mismatch_and_bad_config() {
        let block = random_block(14, 2, 3, 4);
        assert!(invert_block(
            &Tensor::zeros(&[3, 4, 4]),
            &block,
            &PenaltyConfig::default()
        )
        .is_err());
        let y = Tensor::zeros(&[2, 4, 4]);
        let cfg = PenaltyConfig {
            lambda1: -1.0,
            ..PenaltyConfig::default()
        };
        assert!(matches!(
            invert_block(&y, &block, &cfg),
            Err(PeelError::Validation(_))
        ));
    }

    #[test]
    fn complementarity_modes_differ() {
        let p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let n = Tensor::new(vec![2], vec![3.0, 1.0]).unwrap();
        let block = random_block(15, 1, 1, 2);
        let y = Tensor::zeros(&[1, 2, 2]);
        let problem = SplitProblem::for_block(&y, &block).unwrap();
        assert_eq!(problem.comp(ComplementarityMode::Scalar, &p, &n), 25.0);
        assert_eq!(problem.comp(ComplementarityMode::Elementwise, &p, &n), 13.0);
        assert_eq!(inner(&p, &n).unwrap(), 5.0);
    }
}
