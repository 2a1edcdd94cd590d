//! Forward/reverse diffusion over motion sequences.
//!
//! The denoiser predicts the clean sample `x̂₀` directly. Reverse steps use the
//! two-coefficient posterior mean of `x̂₀` and `x_k` with fixed variance
//! `1 − α_k`. Step indices are 1-based (`k = 1..=K`) and `ᾱ_0 = 1`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guidance::{GuidanceController, GuidanceError, GuidanceTrace};
use crate::motion::{MotionError, MotionSequence};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("schedule needs at least one step")]
    NoSteps,
    #[error("unknown schedule kind '{0}'")]
    UnknownKind(String),
    #[error("alpha_{index} = {value} is outside (0, 1)")]
    AlphaRange { index: usize, value: f64 },
    #[error("step {k} is outside 1..={steps}")]
    StepOutOfRange { k: usize, steps: usize },
    #[error("prior variance must be non-negative, got {0}")]
    NegativeVariance(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("denoiser failed: {0}")]
    Denoiser(String),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Linear β, rescaled by `1000 / K` so short chains still reach noise.
    Linear,
    /// Squared-cosine ᾱ with β capped at 0.999.
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = DiffusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(DiffusionError::UnknownKind(other.to_string())),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        })
    }
}

const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;
const MAX_BETA: f64 = 0.999;

/// `α_k` and `ᾱ_k = ∏_{s≤k} α_s` for `k = 1..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self, DiffusionError> {
        if alphas.is_empty() {
            return Err(DiffusionError::NoSteps);
        }
        for (i, a) in alphas.iter().enumerate() {
            if !(*a > 0.0 && *a < 1.0) {
                return Err(DiffusionError::AlphaRange {
                    index: i + 1,
                    value: *a,
                });
            }
        }
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |prod, a| {
                *prod *= a;
                Some(*prod)
            })
            .collect();
        Ok(Self { alphas, alpha_bars })
    }

    pub fn build(steps: usize, kind: ScheduleKind) -> Result<Self, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::NoSteps);
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                let scale = 1000.0 / steps as f64;
                let (lo, hi) = (scale * BETA_START, scale * BETA_END);
                (0..steps)
                    .map(|i| {
                        let t = if steps == 1 {
                            0.0
                        } else {
                            i as f64 / (steps - 1) as f64
                        };
                        (lo + (hi - lo) * t).min(MAX_BETA)
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    ((t + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2)
                        .cos()
                        .powi(2)
                };
                (0..steps)
                    .map(|i| {
                        let t1 = i as f64 / steps as f64;
                        let t2 = (i + 1) as f64 / steps as f64;
                        (1.0 - f(t2) / f(t1)).clamp(1e-8, MAX_BETA)
                    })
                    .collect()
            }
        };
        Self::from_alphas(betas.into_iter().map(|b| 1.0 - b).collect())
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    fn check(&self, k: usize) -> Result<(), DiffusionError> {
        if k == 0 || k > self.steps() {
            return Err(DiffusionError::StepOutOfRange {
                k,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    /// `α_k`, 1-based. Panics outside `1..=K`.
    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    /// `ᾱ_k`, with `ᾱ_0 = 1`. Panics for `k > K`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bars[k - 1]
        }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Coefficients `(c_x0, c_xk)` of the posterior mean at step `k`.
    pub fn posterior_coefficients(&self, k: usize) -> Result<(f64, f64), DiffusionError> {
        self.check(k)?;
        let a = self.alpha(k);
        let ab = self.alpha_bar(k);
        let ab_prev = self.alpha_bar(k - 1);
        let denom = 1.0 - ab;
        Ok((
            ab_prev.sqrt() * (1.0 - a) / denom,
            a.sqrt() * (1.0 - ab_prev) / denom,
        ))
    }
}

/// String-keyed constructor, e.g. `build_schedule(1000, "linear")`.
pub fn build_schedule(steps: usize, kind: &str) -> Result<NoiseSchedule, DiffusionError> {
    NoiseSchedule::build(steps, kind.parse()?)
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<(), DiffusionError> {
    if a.dim() != b.dim() {
        return Err(DiffusionError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Closed-form marginal `x_k = √ᾱ_k·x₀ + √(1−ᾱ_k)·ε`.
pub fn forward_diffuse(
    x0: &MotionSequence,
    k: usize,
    sched: &NoiseSchedule,
    noise: &Array2<f64>,
) -> Result<MotionSequence, DiffusionError> {
    sched.check(k)?;
    same_shape(x0.data(), noise, "noise")?;
    let ab = sched.alpha_bar(k);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let out = Zip::from(x0.data())
        .and(noise)
        .map_collect(|x, e| a * x + b * e);
    Ok(MotionSequence::new(out, x0.fps())?)
}

pub fn posterior_mean(
    x0_hat: &MotionSequence,
    x_k: &MotionSequence,
    k: usize,
    sched: &NoiseSchedule,
) -> Result<MotionSequence, DiffusionError> {
    same_shape(x0_hat.data(), x_k.data(), "posterior mean inputs")?;
    let (c0, ck) = sched.posterior_coefficients(k)?;
    let out = Zip::from(x0_hat.data())
        .and(x_k.data())
        .map_collect(|x0, xk| c0 * x0 + ck * xk);
    Ok(MotionSequence::from_parts(out, x_k.fps()))
}

/// A clean-sample predictor `f(x_k, k, t) -> x̂₀`.
pub trait Denoiser: Send + Sync {
    fn predict(
        &self,
        x_k: &MotionSequence,
        k: usize,
        sched: &NoiseSchedule,
        prompt: &str,
    ) -> Result<MotionSequence, DiffusionError>;

    /// `(∂x̂₀/∂x_k)ᵀ · cotangent`, if the denoiser can provide it.
    fn vjp(
        &self,
        _x_k: &MotionSequence,
        _k: usize,
        _sched: &NoiseSchedule,
        _prompt: &str,
        _cotangent: &Array2<f64>,
    ) -> Option<Result<Array2<f64>, DiffusionError>> {
        None
    }

    fn supports_vjp(&self) -> bool {
        false
    }
}

/// Shrinkage coefficient of the Gaussian posterior mean; also the diagonal of
/// its Jacobian with respect to `x_k`.
pub fn gaussian_shrinkage(alpha_bar: f64, sigma0_sq: f64) -> f64 {
    if sigma0_sq == 0.0 {
        return 0.0;
    }
    alpha_bar.sqrt() * sigma0_sq / (alpha_bar * sigma0_sq + 1.0 - alpha_bar)
}

/// `E[x₀ | x_k]` for `x₀ ~ N(μ₀, σ₀²)` coordinate-wise.
pub fn gaussian_denoiser_predict(
    x_k: &Array2<f64>,
    alpha_bar: f64,
    mu0: &Array2<f64>,
    sigma0_sq: &Array2<f64>,
) -> Result<Array2<f64>, DiffusionError> {
    same_shape(x_k, mu0, "prior mean")?;
    same_shape(x_k, sigma0_sq, "prior variance")?;
    if let Some(v) = sigma0_sq.iter().find(|v| !(**v >= 0.0)) {
        return Err(DiffusionError::NegativeVariance(*v));
    }
    let sab = alpha_bar.sqrt();
    Ok(Zip::from(x_k)
        .and(mu0)
        .and(sigma0_sq)
        .map_collect(|x, m, v| m + gaussian_shrinkage(alpha_bar, *v) * (x - sab * m)))
}

/// Exact posterior-mean denoiser for an independent Gaussian prior over every
/// motion coordinate. Serves as a ground-truth model: unguided sampling with it
/// reproduces the prior.
#[derive(Debug, Clone)]
pub struct GaussianReferenceDenoiser {
    mu0: Array2<f64>,
    sigma0_sq: Array2<f64>,
}

impl GaussianReferenceDenoiser {
    pub fn new(mu0: Array2<f64>, sigma0_sq: Array2<f64>) -> Result<Self, DiffusionError> {
        same_shape(&mu0, &sigma0_sq, "prior")?;
        if let Some(v) = sigma0_sq.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(DiffusionError::NegativeVariance(*v));
        }
        Ok(Self { mu0, sigma0_sq })
    }

    pub fn isotropic(mu0: Array2<f64>, sigma0_sq: f64) -> Result<Self, DiffusionError> {
        let var = Array2::from_elem(mu0.dim(), sigma0_sq);
        Self::new(mu0, var)
    }

    pub fn mu0(&self) -> &Array2<f64> {
        &self.mu0
    }

    pub fn sigma0_sq(&self) -> &Array2<f64> {
        &self.sigma0_sq
    }

    /// Jacobian diagonal at step `k`.
    pub fn jacobian_diagonal(&self, alpha_bar: f64) -> Array2<f64> {
        self.sigma0_sq.mapv(|v| gaussian_shrinkage(alpha_bar, v))
    }
}

impl Denoiser for GaussianReferenceDenoiser {
    fn predict(
        &self,
        x_k: &MotionSequence,
        k: usize,
        sched: &NoiseSchedule,
        _prompt: &str,
    ) -> Result<MotionSequence, DiffusionError> {
        sched.check(k)?;
        let out =
            gaussian_denoiser_predict(x_k.data(), sched.alpha_bar(k), &self.mu0, &self.sigma0_sq)?;
        Ok(MotionSequence::from_parts(out, x_k.fps()))
    }

    fn vjp(
        &self,
        x_k: &MotionSequence,
        k: usize,
        sched: &NoiseSchedule,
        _prompt: &str,
        cotangent: &Array2<f64>,
    ) -> Option<Result<Array2<f64>, DiffusionError>> {
        Some((|| {
            sched.check(k)?;
            same_shape(x_k.data(), cotangent, "cotangent")?;
            let ab = sched.alpha_bar(k);
            Ok(Zip::from(cotangent)
                .and(&self.sigma0_sq)
                .map_collect(|c, v| gaussian_shrinkage(ab, *v) * c))
        })())
    }

    fn supports_vjp(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    /// Skip the variance term at `k = 1` so the chain returns the mean.
    pub noiseless_final_step: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            noiseless_final_step: true,
        }
    }
}

/// Everything one reverse step produced. Handed to sampling observers.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub k: usize,
    pub x_k: MotionSequence,
    pub x0_hat: MotionSequence,
    pub mean: MotionSequence,
    pub x_prev: MotionSequence,
    pub aligned: bool,
}

/// One step `x_k → x_{k−1}`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step(
    x_k: &MotionSequence,
    k: usize,
    prompt: &str,
    sched: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    guidance: Option<&mut GuidanceController>,
    noise: &Array2<f64>,
    opts: &SamplerOptions,
) -> Result<StepRecord, DiffusionError> {
    sched.check(k)?;
    same_shape(x_k.data(), noise, "step noise")?;
    let x0_hat = denoiser.predict(x_k, k, sched, prompt)?;
    if x0_hat.data().dim() != x_k.data().dim() {
        return Err(DiffusionError::Denoiser(format!(
            "prediction shape {:?} differs from input {:?}",
            x0_hat.data().dim(),
            x_k.data().dim()
        )));
    }

    let (decision, mut guidance) = match guidance {
        None => (None, None),
        Some(g) => (
            Some(g.before_mean(x_k, &x0_hat, k, sched, denoiser, prompt)?),
            Some(g),
        ),
    };

    let mean = match decision.as_ref().and_then(|d| d.aligned_x0.as_ref()) {
        Some(x0_tilde) => posterior_mean(x0_tilde, x_k, k, sched)?,
        None => posterior_mean(&x0_hat, x_k, k, sched)?,
    };

    let add_noise = !(k == 1 && opts.noiseless_final_step);
    let mut x_prev = if add_noise {
        let sigma = (1.0 - sched.alpha(k)).sqrt();
        let out = Zip::from(mean.data())
            .and(noise)
            .map_collect(|m, e| m + sigma * e);
        MotionSequence::from_parts(out, x_k.fps())
    } else {
        mean.clone()
    };

    let aligned = decision.as_ref().is_some_and(|d| d.aligned);
    if let (Some(g), Some(d)) = (guidance.as_mut(), decision.as_ref()) {
        if d.align_output {
            x_prev = g.align_output(&x_prev)?;
        }
    }
    if !x_prev.is_finite() {
        return Err(DiffusionError::Denoiser(format!(
            "non-finite sample at step {k}"
        )));
    }

    Ok(StepRecord {
        k,
        x_k: x_k.clone(),
        x0_hat,
        mean,
        x_prev,
        aligned,
    })
}

/// Shape of the sampled motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionShape {
    pub n_frames: usize,
    pub width: usize,
    pub fps: f64,
}

fn standard_normal(rng: &mut ChaCha8Rng, dim: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(dim, || StandardNormal.sample(rng))
}

/// Full reverse chain from `x_K ~ N(0, I)` down to `x₀`.
pub fn sample(
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    prompt: &str,
    guidance: Option<GuidanceController>,
    seed: u64,
    shape: MotionShape,
    opts: &SamplerOptions,
) -> Result<(MotionSequence, GuidanceTrace), DiffusionError> {
    sample_with_observer(denoiser, sched, prompt, guidance, seed, shape, opts, |_| {})
}

/// [`sample`] with a callback invoked after every step.
#[allow(clippy::too_many_arguments)]
pub fn sample_with_observer<F: FnMut(&StepRecord)>(
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    prompt: &str,
    mut guidance: Option<GuidanceController>,
    seed: u64,
    shape: MotionShape,
    opts: &SamplerOptions,
    mut observe: F,
) -> Result<(MotionSequence, GuidanceTrace), DiffusionError> {
    let dim = (shape.n_frames, shape.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = MotionSequence::new(standard_normal(&mut rng, dim), shape.fps)?;
    let zeros = Array2::zeros(dim);
    for k in (1..=sched.steps()).rev() {
        let noise = if k == 1 && opts.noiseless_final_step {
            zeros.clone()
        } else {
            standard_normal(&mut rng, dim)
        };
        let rec = reverse_step(
            &x,
            k,
            prompt,
            sched,
            denoiser,
            guidance.as_mut(),
            &noise,
            opts,
        )?;
        observe(&rec);
        x = rec.x_prev;
    }
    let trace = guidance.map(|g| g.into_trace()).unwrap_or_default();
    Ok((x, trace))
}
