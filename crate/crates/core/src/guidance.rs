//! Plan-following guidance for the reverse chain.
//!
//! At each step the gap between the planned joints and the projection of the
//! clean prediction is measured. While the gap is still a sizeable fraction of
//! its first-step value, the clean prediction is pushed down the gap gradient
//! before the posterior mean is formed. Once it drops to the threshold the
//! step is left untouched.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{Denoiser, DiffusionError, NoiseSchedule};
use crate::motion::{
    ActivationMask, MotionError, MotionSequence, SkeletonProjection, SkeletonSequence,
};

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("lambda must be finite and non-negative, got {0}")]
    Lambda(f64),
    #[error("xi must lie in [0, 1), got {0}")]
    Xi(f64),
    #[error("unknown ablation variant '{0}'")]
    UnknownAblation(String),
    #[error("unknown gradient mode '{0}'")]
    UnknownGradientMode(String),
    #[error("exact gradients need a denoiser with Jacobian support")]
    ExactUnsupported,
    #[error("plan has {plan} joints but layout '{layout}' has {expected}")]
    Joints {
        layout: String,
        expected: usize,
        plan: usize,
    },
    #[error("plan covers {plan} frames but the motion has {motion}")]
    Frames { plan: usize, motion: usize },
    #[error("first guided step must be k = {expected}, got {got}")]
    StepOrder { expected: usize, got: usize },
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error("denoiser failed during guidance: {0}")]
    Denoiser(String),
}

impl From<DiffusionError> for GuidanceError {
    fn from(e: DiffusionError) -> Self {
        match e {
            DiffusionError::Guidance(g) => g,
            DiffusionError::Motion(m) => GuidanceError::Motion(m),
            other => GuidanceError::Denoiser(other.to_string()),
        }
    }
}

/// Planned joints `s` and the mask `m_s` marking which of them are meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialSkeletonPlan {
    skeleton: SkeletonSequence,
    mask: ActivationMask,
}

impl PartialSkeletonPlan {
    /// Inactive coordinates are zeroed.
    pub fn new(skeleton: SkeletonSequence, mask: ActivationMask) -> Result<Self, MotionError> {
        let (n, j) = mask.dim();
        if (n, j) != (skeleton.n_frames(), skeleton.n_joints()) {
            return Err(MotionError::Shape {
                expected: format!("{}x{}", skeleton.n_frames(), skeleton.n_joints()),
                got: format!("{n}x{j}"),
            });
        }
        if mask.is_empty() {
            return Err(MotionError::EmptyMask);
        }
        let fps = skeleton.fps();
        let mut data = skeleton.into_data();
        for ((f, jj, _), v) in data.indexed_iter_mut() {
            if !mask.get(f, jj) {
                *v = 0.0;
            }
        }
        Ok(Self {
            skeleton: SkeletonSequence::new(data, fps)?,
            mask,
        })
    }

    pub fn skeleton(&self) -> &SkeletonSequence {
        &self.skeleton
    }

    pub fn mask(&self) -> &ActivationMask {
        &self.mask
    }

    pub fn n_frames(&self) -> usize {
        self.skeleton.n_frames()
    }

    pub fn n_joints(&self) -> usize {
        self.skeleton.n_joints()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// Exact when the denoiser has Jacobian support, surrogate otherwise.
    #[default]
    Auto,
    Exact,
    Surrogate,
    FiniteDifference,
}

impl FromStr for GradientMode {
    type Err = GuidanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(Self::Auto),
            "exact" => Ok(Self::Exact),
            "surrogate" => Ok(Self::Surrogate),
            "finite-difference" => Ok(Self::FiniteDifference),
            other => Err(GuidanceError::UnknownGradientMode(other.to_string())),
        }
    }
}

impl fmt::Display for GradientMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Auto => "auto",
            Self::Exact => "exact",
            Self::Surrogate => "surrogate",
            Self::FiniteDifference => "finite-difference",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Align `x̂₀`, deactivate by threshold.
    #[default]
    Full,
    /// Align `x_{k−1}` directly, deactivate by threshold.
    NoMod1,
    /// Align `x̂₀` on every step.
    NoMod2,
    /// Align `x_{k−1}` directly on every step.
    NoBoth,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Self::Full, Self::NoMod1, Self::NoMod2, Self::NoBoth];

    fn aligns_output(self) -> bool {
        matches!(self, Self::NoMod1 | Self::NoBoth)
    }

    fn deactivates(self) -> bool {
        matches!(self, Self::Full | Self::NoMod1)
    }
}

impl FromStr for Ablation {
    type Err = GuidanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Self::Full),
            "no-mod1" => Ok(Self::NoMod1),
            "no-mod2" => Ok(Self::NoMod2),
            "no-both" => Ok(Self::NoBoth),
            other => Err(GuidanceError::UnknownAblation(other.to_string())),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::NoMod1 => "no-mod1",
            Self::NoMod2 => "no-mod2",
            Self::NoBoth => "no-both",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub lambda: f64,
    pub xi: f64,
    pub gradient_mode: GradientMode,
    pub ablation: Ablation,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda: 3.0,
            xi: 0.2,
            gradient_mode: GradientMode::Auto,
            ablation: Ablation::Full,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(GuidanceError::Lambda(self.lambda));
        }
        if !(self.xi >= 0.0 && self.xi < 1.0) {
            return Err(GuidanceError::Xi(self.xi));
        }
        Ok(())
    }
}

/// One reverse step as seen by the controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub k: usize,
    /// Gap measured on the unaligned clean prediction.
    pub gap: f64,
    /// `gap / g_K`, absent when `g_K = 0`.
    pub ratio: Option<f64>,
    pub aligned: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GuidanceTrace {
    pub initial_gap: Option<f64>,
    pub steps: Vec<TraceStep>,
}

impl GuidanceTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Gap recorded at `k = 1`.
    pub fn last_gap(&self) -> Option<f64> {
        self.steps.last().map(|s| s.gap)
    }

    pub fn aligned_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.aligned).count()
    }
}

fn check_plan_layout(
    plan_skeleton: &SkeletonSequence,
    layout: &dyn SkeletonProjection,
    motion: &MotionSequence,
) -> Result<(), GuidanceError> {
    if plan_skeleton.n_joints() != layout.n_joints() {
        return Err(GuidanceError::Joints {
            layout: layout.name().to_string(),
            expected: layout.n_joints(),
            plan: plan_skeleton.n_joints(),
        });
    }
    if plan_skeleton.n_frames() != motion.n_frames() {
        return Err(GuidanceError::Frames {
            plan: plan_skeleton.n_frames(),
            motion: motion.n_frames(),
        });
    }
    layout.check_width(motion)?;
    Ok(())
}

/// Masked residual `m ⊙ (s − P(x))` as an N×J×3 tensor.
fn masked_residual(
    s: &SkeletonSequence,
    mask: &ActivationMask,
    x: &MotionSequence,
    layout: &dyn SkeletonProjection,
) -> Result<Array3<f64>, GuidanceError> {
    if mask.is_empty() {
        return Err(MotionError::EmptyMask.into());
    }
    if mask.dim() != (s.n_frames(), s.n_joints()) {
        return Err(MotionError::Shape {
            expected: format!("{}x{}", s.n_frames(), s.n_joints()),
            got: format!("{}x{}", mask.dim().0, mask.dim().1),
        }
        .into());
    }
    check_plan_layout(s, layout, x)?;
    let projected = layout.project(x)?;
    let mut r = s.data() - projected.data();
    for ((f, j, _), v) in r.indexed_iter_mut() {
        if !mask.get(f, j) {
            *v = 0.0;
        }
    }
    Ok(r)
}

/// `‖s[m] − P(x̂₀)[m]‖₂`.
pub fn compute_gap(
    s: &SkeletonSequence,
    mask: &ActivationMask,
    x0_hat: &MotionSequence,
    layout: &dyn SkeletonProjection,
) -> Result<f64, GuidanceError> {
    let r = masked_residual(s, mask, x0_hat, layout)?;
    Ok(r.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Gap and its gradient with respect to the motion it is measured on.
/// The gradient is zero when the gap is.
pub fn gap_and_gradient(
    s: &SkeletonSequence,
    mask: &ActivationMask,
    x: &MotionSequence,
    layout: &dyn SkeletonProjection,
) -> Result<(f64, Array2<f64>), GuidanceError> {
    let r = masked_residual(s, mask, x, layout)?;
    let g = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if g == 0.0 {
        return Ok((0.0, Array2::zeros(x.data().dim())));
    }
    let cot = r.mapv(|v| -v / g);
    Ok((g, layout.pullback(x, &cot)?))
}

/// Deactivation test: align while `g_k / g_K > ξ`. Never aligns when `g_K = 0`.
pub fn should_align(g_k: f64, g_initial: f64, xi: f64) -> bool {
    g_initial > 0.0 && g_k / g_initial > xi
}

/// Per-variant alignment switch for a step with ratio test outcome `ratio_ok`.
pub fn ablation_aligns(ablation: Ablation, ratio_ok: bool) -> bool {
    !ablation.deactivates() || ratio_ok
}

/// Frames `n_start..=n_end` of the mask's active span.
pub fn clip_output(
    x0: &MotionSequence,
    mask: &ActivationMask,
) -> Result<MotionSequence, MotionError> {
    let (start, end) = mask.bounds()?;
    if mask.dim().0 != x0.n_frames() {
        return Err(MotionError::Shape {
            expected: format!("{} frames", x0.n_frames()),
            got: format!("{} mask frames", mask.dim().0),
        });
    }
    x0.frames(start, end)
}

fn subtract_scaled(x: &MotionSequence, lambda: f64, grad: &Array2<f64>) -> MotionSequence {
    let out = Zip::from(x.data())
        .and(grad)
        .map_collect(|a, g| a - lambda * g);
    MotionSequence::from_parts(out, x.fps())
}

/// Gradient of the gap on `f(x_k)` with respect to `x_k` under `mode`.
#[allow(clippy::too_many_arguments)]
pub fn gap_gradient_wrt_xk(
    plan: &PartialSkeletonPlan,
    layout: &dyn SkeletonProjection,
    x_k: &MotionSequence,
    x0_hat: &MotionSequence,
    k: usize,
    sched: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    prompt: &str,
    mode: GradientMode,
) -> Result<Array2<f64>, GuidanceError> {
    let mode = match mode {
        GradientMode::Auto if denoiser.supports_vjp() => GradientMode::Exact,
        GradientMode::Auto => GradientMode::Surrogate,
        m => m,
    };
    match mode {
        GradientMode::Surrogate => {
            Ok(gap_and_gradient(plan.skeleton(), plan.mask(), x0_hat, layout)?.1)
        }
        GradientMode::Exact => {
            let (_, g0) = gap_and_gradient(plan.skeleton(), plan.mask(), x0_hat, layout)?;
            match denoiser.vjp(x_k, k, sched, prompt, &g0) {
                Some(r) => Ok(r?),
                None => Err(GuidanceError::ExactUnsupported),
            }
        }
        GradientMode::FiniteDifference => {
            let base = x_k.data();
            let mut grad = Array2::zeros(base.dim());
            let mut probe = base.clone();
            for (idx, g) in grad.indexed_iter_mut() {
                let orig = base[idx];
                let h = 1e-5 * orig.abs().max(1.0);
                let mut eval = |v: f64| -> Result<f64, GuidanceError> {
                    probe[idx] = v;
                    let xk = MotionSequence::from_parts(probe.clone(), x_k.fps());
                    let pred = denoiser.predict(&xk, k, sched, prompt)?;
                    compute_gap(plan.skeleton(), plan.mask(), &pred, layout)
                };
                let hi = eval(orig + h)?;
                let lo = eval(orig - h)?;
                probe[idx] = orig;
                *g = (hi - lo) / (2.0 * h);
            }
            Ok(grad)
        }
        GradientMode::Auto => unreachable!(),
    }
}

/// `x̃₀ = x̂₀ − λ·∇_{x_k} g`.
#[allow(clippy::too_many_arguments)]
pub fn align_clean_prediction(
    x0_hat: &MotionSequence,
    x_k: &MotionSequence,
    plan: &PartialSkeletonPlan,
    layout: &dyn SkeletonProjection,
    config: &GuidanceConfig,
    denoiser: &dyn Denoiser,
    k: usize,
    sched: &NoiseSchedule,
    prompt: &str,
) -> Result<MotionSequence, GuidanceError> {
    config.validate()?;
    if config.lambda == 0.0 {
        return Ok(x0_hat.clone());
    }
    let grad = gap_gradient_wrt_xk(
        plan,
        layout,
        x_k,
        x0_hat,
        k,
        sched,
        denoiser,
        prompt,
        config.gradient_mode,
    )?;
    Ok(subtract_scaled(x0_hat, config.lambda, &grad))
}

/// What the sampler should do with the current step.
#[derive(Debug, Clone)]
pub struct StepDecision {
    /// Replacement for `x̂₀` in the posterior mean.
    pub aligned_x0: Option<MotionSequence>,
    /// Pull `x_{k−1}` toward the plan after sampling.
    pub align_output: bool,
    pub aligned: bool,
}

/// Per-run guidance state: holds `g_K` and the trace.
#[derive(Debug)]
pub struct GuidanceController {
    plan: PartialSkeletonPlan,
    config: GuidanceConfig,
    layout: Arc<dyn SkeletonProjection>,
    initial_gap: Option<f64>,
    trace: GuidanceTrace,
}

impl GuidanceController {
    pub fn new(
        plan: PartialSkeletonPlan,
        config: GuidanceConfig,
        layout: Arc<dyn SkeletonProjection>,
    ) -> Result<Self, GuidanceError> {
        config.validate()?;
        if plan.n_joints() != layout.n_joints() {
            return Err(GuidanceError::Joints {
                layout: layout.name().to_string(),
                expected: layout.n_joints(),
                plan: plan.n_joints(),
            });
        }
        Ok(Self {
            plan,
            config,
            layout,
            initial_gap: None,
            trace: GuidanceTrace::default(),
        })
    }

    pub fn plan(&self) -> &PartialSkeletonPlan {
        &self.plan
    }

    pub fn config(&self) -> &GuidanceConfig {
        &self.config
    }

    pub fn layout(&self) -> &dyn SkeletonProjection {
        self.layout.as_ref()
    }

    pub fn initial_gap(&self) -> Option<f64> {
        self.initial_gap
    }

    pub fn trace(&self) -> &GuidanceTrace {
        &self.trace
    }

    pub fn into_trace(self) -> GuidanceTrace {
        self.trace
    }

    /// Measure the gap on `x̂₀`, record it, and decide this step's alignment.
    /// The first call must be the chain's first step and fixes `g_K`.
    pub fn before_mean(
        &mut self,
        x_k: &MotionSequence,
        x0_hat: &MotionSequence,
        k: usize,
        sched: &NoiseSchedule,
        denoiser: &dyn Denoiser,
        prompt: &str,
    ) -> Result<StepDecision, GuidanceError> {
        let gap = compute_gap(
            self.plan.skeleton(),
            self.plan.mask(),
            x0_hat,
            self.layout.as_ref(),
        )?;
        let g_initial = match self.initial_gap {
            Some(g) => g,
            None => {
                if k != sched.steps() {
                    return Err(GuidanceError::StepOrder {
                        expected: sched.steps(),
                        got: k,
                    });
                }
                self.initial_gap = Some(gap);
                self.trace.initial_gap = Some(gap);
                gap
            }
        };
        let ratio = (g_initial > 0.0).then(|| gap / g_initial);
        let aligned = ablation_aligns(
            self.config.ablation,
            should_align(gap, g_initial, self.config.xi),
        );
        self.trace.steps.push(TraceStep {
            k,
            gap,
            ratio,
            aligned,
        });

        let mut decision = StepDecision {
            aligned_x0: None,
            align_output: false,
            aligned,
        };
        if aligned && self.config.lambda > 0.0 {
            if self.config.ablation.aligns_output() {
                decision.align_output = true;
            } else {
                decision.aligned_x0 = Some(align_clean_prediction(
                    x0_hat,
                    x_k,
                    &self.plan,
                    self.layout.as_ref(),
                    &self.config,
                    denoiser,
                    k,
                    sched,
                    prompt,
                )?);
            }
        }
        Ok(decision)
    }

    /// `x_{k−1} − λ·∇ g(x_{k−1})`, the gap measured directly on the sample.
    pub fn align_output(&self, x_prev: &MotionSequence) -> Result<MotionSequence, GuidanceError> {
        let (_, grad) = gap_and_gradient(
            self.plan.skeleton(),
            self.plan.mask(),
            x_prev,
            self.layout.as_ref(),
        )?;
        Ok(subtract_scaled(x_prev, self.config.lambda, &grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, GaussianReferenceDenoiser};
    use crate::motion::{IdentityLayout, RootOffsetLayout};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn plan_at(n: usize, j: usize, entries: &[(usize, usize, [f64; 3])]) -> PartialSkeletonPlan {
        let mut data = Array3::zeros((n, j, 3));
        let mut mask = ActivationMask::zeros(n, j);
        for &(f, jj, p) in entries {
            for c in 0..3 {
                data[[f, jj, c]] = p[c];
            }
            mask.set(f, jj, true);
        }
        PartialSkeletonPlan::new(SkeletonSequence::new(data, 20.0).unwrap(), mask).unwrap()
    }

    fn zero_motion(n: usize, d: usize) -> MotionSequence {
        MotionSequence::zeros(n, d, 20.0).unwrap()
    }

    #[test]
    fn gap_examples() {
        let layout = IdentityLayout::new(2);
        let plan = plan_at(3, 2, &[(1, 0, [3.0, 4.0, 0.0])]);
        let g = compute_gap(plan.skeleton(), plan.mask(), &zero_motion(3, 6), &layout).unwrap();
        assert_relative_eq!(g, 5.0, epsilon = 1e-12);

        let plan = plan_at(3, 2, &[(0, 0, [1.0, 0.0, 0.0]), (2, 1, [0.0, 0.0, -1.0])]);
        let g = compute_gap(plan.skeleton(), plan.mask(), &zero_motion(3, 6), &layout).unwrap();
        assert_relative_eq!(g, 2f64.sqrt(), epsilon = 1e-12);

        let x = layout.lift(plan.skeleton()).unwrap().unwrap();
        assert_eq!(
            compute_gap(plan.skeleton(), plan.mask(), &x, &layout).unwrap(),
            0.0
        );
    }

    #[test]
    fn gap_rejects_empty_mask() {
        let layout = IdentityLayout::new(2);
        let s = SkeletonSequence::zeros(3, 2, 20.0).unwrap();
        let m = ActivationMask::zeros(3, 2);
        assert!(matches!(
            compute_gap(&s, &m, &zero_motion(3, 6), &layout),
            Err(GuidanceError::Motion(MotionError::EmptyMask))
        ));
        assert!(PartialSkeletonPlan::new(s, m).is_err());
    }

    #[test]
    fn plan_zero_fills_inactive() {
        let data = Array3::from_elem((2, 2, 3), 7.0);
        let mut mask = ActivationMask::zeros(2, 2);
        mask.set(1, 0, true);
        let p = PartialSkeletonPlan::new(SkeletonSequence::new(data, 20.0).unwrap(), mask).unwrap();
        assert_eq!(p.skeleton().joint(1, 0), [7.0; 3]);
        assert_eq!(p.skeleton().joint(0, 0), [0.0; 3]);
    }

    #[test]
    fn should_align_examples() {
        assert!(should_align(0.3, 1.0, 0.2));
        assert!(!should_align(0.2, 1.0, 0.2));
        assert!(!should_align(0.0, 0.0, 0.2));
        assert!(!should_align(1.0, 0.0, 0.0));
        assert!(should_align(1e-9, 1.0, 0.0));
        assert!(ablation_aligns(Ablation::NoMod2, false));
        assert!(ablation_aligns(Ablation::NoBoth, false));
        assert!(!ablation_aligns(Ablation::Full, false));
        assert!(!ablation_aligns(Ablation::NoMod1, false));
    }

    #[test]
    fn config_validation_and_parsing() {
        assert!(GuidanceConfig::default().validate().is_ok());
        for (lambda, xi) in [(-1.0, 0.2), (f64::NAN, 0.2), (3.0, 1.0), (3.0, -0.1)] {
            let c = GuidanceConfig {
                lambda,
                xi,
                ..Default::default()
            };
            assert!(c.validate().is_err());
        }
        for a in Ablation::ALL {
            assert_eq!(a.to_string().parse::<Ablation>().unwrap(), a);
        }
        assert!(matches!(
            "no-mod3".parse::<Ablation>(),
            Err(GuidanceError::UnknownAblation(_))
        ));
        for m in ["auto", "exact", "surrogate", "finite-difference"] {
            assert_eq!(m.parse::<GradientMode>().unwrap().to_string(), m);
        }
        let c: GuidanceConfig = toml::from_str("lambda = 1.5\nablation = \"no-both\"").unwrap();
        assert_eq!(c.lambda, 1.5);
        assert_eq!(c.xi, 0.2);
        assert_eq!(c.ablation, Ablation::NoBoth);
    }

    #[test]
    fn clip_examples() {
        let x =
            MotionSequence::new(Array2::from_shape_fn((196, 3), |(i, _)| i as f64), 20.0).unwrap();
        assert_eq!(
            clip_output(&x, &ActivationMask::ones(196, 2))
                .unwrap()
                .n_frames(),
            196
        );

        let mut m = ActivationMask::zeros(196, 2);
        m.set(10, 0, true);
        m.set(50, 1, true);
        let c = clip_output(&x, &m).unwrap();
        assert_eq!(c.n_frames(), 41);
        assert_eq!(c.data()[[0, 0]], 10.0);
        assert_eq!(c.data()[[40, 0]], 50.0);

        let mut m = ActivationMask::zeros(196, 2);
        m.set(7, 1, true);
        assert_eq!(clip_output(&x, &m).unwrap().n_frames(), 1);

        assert!(clip_output(&x, &ActivationMask::zeros(196, 2)).is_err());
        assert!(clip_output(&x, &ActivationMask::ones(10, 2)).is_err());
    }

    #[test]
    fn lambda_zero_and_zero_gap_leave_prediction_unchanged() {
        let sched = build_schedule(10, "linear").unwrap();
        let layout = IdentityLayout::new(1);
        let d = GaussianReferenceDenoiser::isotropic(Array2::zeros((2, 3)), 1.0).unwrap();
        let plan = plan_at(2, 1, &[(0, 0, [1.0, 2.0, 3.0])]);
        let xk = MotionSequence::new(Array2::from_elem((2, 3), 0.4), 20.0).unwrap();
        let x0 = d.predict(&xk, 5, &sched, "").unwrap();

        let cfg0 = GuidanceConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let out =
            align_clean_prediction(&x0, &xk, &plan, &layout, &cfg0, &d, 5, &sched, "").unwrap();
        assert_eq!(out, x0);

        let exact = layout.lift(plan.skeleton()).unwrap().unwrap();
        let cfg = GuidanceConfig {
            gradient_mode: GradientMode::Surrogate,
            ..Default::default()
        };
        let out =
            align_clean_prediction(&exact, &xk, &plan, &layout, &cfg, &d, 5, &sched, "").unwrap();
        assert_eq!(out, exact);
    }

    #[derive(Debug)]
    struct NoJacobian(GaussianReferenceDenoiser);

    impl Denoiser for NoJacobian {
        fn predict(
            &self,
            x: &MotionSequence,
            k: usize,
            s: &NoiseSchedule,
            p: &str,
        ) -> Result<MotionSequence, DiffusionError> {
            self.0.predict(x, k, s, p)
        }
    }

    #[test]
    fn exact_mode_requires_jacobian() {
        let sched = build_schedule(10, "linear").unwrap();
        let layout = IdentityLayout::new(1);
        let d =
            NoJacobian(GaussianReferenceDenoiser::isotropic(Array2::zeros((2, 3)), 1.0).unwrap());
        let plan = plan_at(2, 1, &[(0, 0, [1.0, 2.0, 3.0])]);
        let xk = zero_motion(2, 3);
        let x0 = d.predict(&xk, 3, &sched, "").unwrap();
        let cfg = GuidanceConfig {
            gradient_mode: GradientMode::Exact,
            ..Default::default()
        };
        assert!(matches!(
            align_clean_prediction(&x0, &xk, &plan, &layout, &cfg, &d, 3, &sched, ""),
            Err(GuidanceError::ExactUnsupported)
        ));
        // Auto falls back to the surrogate gradient.
        let auto = GuidanceConfig::default();
        let a = align_clean_prediction(&x0, &xk, &plan, &layout, &auto, &d, 3, &sched, "").unwrap();
        let surrogate = GuidanceConfig {
            gradient_mode: GradientMode::Surrogate,
            ..Default::default()
        };
        let b = align_clean_prediction(&x0, &xk, &plan, &layout, &surrogate, &d, 3, &sched, "")
            .unwrap();
        assert_eq!(a, b);
    }

    fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let num = (a - b).iter().map(|v| v * v).sum::<f64>().sqrt();
        let den = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        num / den
    }

    #[test]
    fn exact_gradient_matches_finite_difference() {
        let sched = build_schedule(50, "linear").unwrap();
        for layout in [
            Arc::new(IdentityLayout::new(3)) as Arc<dyn SkeletonProjection>,
            Arc::new(RootOffsetLayout::new(3)),
        ] {
            let mu = Array2::from_shape_fn((4, 9), |(i, j)| 0.1 * i as f64 - 0.05 * j as f64);
            let var = Array2::from_shape_fn((4, 9), |(i, j)| 0.2 + 0.1 * ((i + j) % 4) as f64);
            let d = GaussianReferenceDenoiser::new(mu, var).unwrap();
            let plan = plan_at(
                4,
                3,
                &[
                    (0, 0, [1.0, -0.5, 0.9]),
                    (3, 2, [0.2, 0.3, 1.4]),
                    (2, 1, [-1.0, 0.0, 0.5]),
                ],
            );
            let xk = MotionSequence::new(
                Array2::from_shape_fn((4, 9), |(i, j)| ((i * 9 + j) as f64 * 0.37).sin()),
                20.0,
            )
            .unwrap();
            for k in [1, 10, 25, 50] {
                let x0 = d.predict(&xk, k, &sched, "").unwrap();
                let grad = |mode| {
                    gap_gradient_wrt_xk(&plan, layout.as_ref(), &xk, &x0, k, &sched, &d, "", mode)
                        .unwrap()
                };
                let exact = grad(GradientMode::Exact);
                let fd = grad(GradientMode::FiniteDifference);
                assert!(
                    rel_err(&exact, &fd) < 1e-4,
                    "k {k}: {}",
                    rel_err(&exact, &fd)
                );
            }
        }
    }

    #[test]
    fn exact_is_scaled_surrogate_for_isotropic_prior() {
        let sched = build_schedule(100, "linear").unwrap();
        let layout = IdentityLayout::new(2);
        let d = GaussianReferenceDenoiser::isotropic(Array2::zeros((3, 6)), 0.7).unwrap();
        let plan = plan_at(3, 2, &[(0, 1, [0.5, 0.5, 0.5]), (2, 0, [-1.0, 2.0, 0.0])]);
        let xk = MotionSequence::new(
            Array2::from_shape_fn((3, 6), |(i, j)| (i as f64 - j as f64) * 0.3),
            20.0,
        )
        .unwrap();
        for k in [1, 40, 100] {
            let x0 = d.predict(&xk, k, &sched, "").unwrap();
            let exact = gap_gradient_wrt_xk(
                &plan,
                &layout,
                &xk,
                &x0,
                k,
                &sched,
                &d,
                "",
                GradientMode::Exact,
            )
            .unwrap();
            let sur = gap_gradient_wrt_xk(
                &plan,
                &layout,
                &xk,
                &x0,
                k,
                &sched,
                &d,
                "",
                GradientMode::Surrogate,
            )
            .unwrap();
            let c = d.jacobian_diagonal(sched.alpha_bar(k))[[0, 0]];
            assert!(rel_err(&exact, &sur.mapv(|v| c * v)) < 1e-6);
        }
    }

    #[test]
    fn controller_records_initial_gap_once() {
        let sched = build_schedule(5, "linear").unwrap();
        let layout: Arc<dyn SkeletonProjection> = Arc::new(IdentityLayout::new(1));
        let d = GaussianReferenceDenoiser::isotropic(Array2::zeros((2, 3)), 1.0).unwrap();
        let plan = plan_at(2, 1, &[(1, 0, [0.0, 0.0, 1.0])]);
        let mut c = GuidanceController::new(plan, GuidanceConfig::default(), layout).unwrap();
        let xk = zero_motion(2, 3);
        let x0 = d.predict(&xk, 4, &sched, "").unwrap();
        assert!(matches!(
            c.before_mean(&xk, &x0, 4, &sched, &d, ""),
            Err(GuidanceError::StepOrder {
                expected: 5,
                got: 4
            })
        ));
        c.before_mean(&xk, &x0, 5, &sched, &d, "").unwrap();
        assert_eq!(c.initial_gap(), Some(1.0));
        let closer = MotionSequence::new(
            Array2::from_shape_fn((2, 3), |(i, j)| if (i, j) == (1, 2) { 0.9 } else { 0.0 }),
            20.0,
        )
        .unwrap();
        let dec = c.before_mean(&xk, &closer, 4, &sched, &d, "").unwrap();
        assert_eq!(c.initial_gap(), Some(1.0));
        assert!(!dec.aligned);
        assert!(dec.aligned_x0.is_none());
        let t = c.trace();
        assert_eq!(t.len(), 2);
        assert!(t.steps[0].aligned);
        assert_relative_eq!(t.steps[1].ratio.unwrap(), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn controller_rejects_joint_mismatch() {
        let plan = plan_at(2, 2, &[(0, 0, [0.0; 3])]);
        let layout: Arc<dyn SkeletonProjection> = Arc::new(IdentityLayout::new(3));
        assert!(matches!(
            GuidanceController::new(plan, GuidanceConfig::default(), layout),
            Err(GuidanceError::Joints { .. })
        ));
    }

    #[test]
    fn output_alignment_moves_sample_toward_plan() {
        let layout: Arc<dyn SkeletonProjection> = Arc::new(IdentityLayout::new(1));
        let plan = plan_at(2, 1, &[(0, 0, [3.0, 4.0, 0.0])]);
        let cfg = GuidanceConfig {
            lambda: 1.0,
            ..Default::default()
        };
        let c = GuidanceController::new(plan, cfg, layout).unwrap();
        let out = c.align_output(&zero_motion(2, 3)).unwrap();
        assert_relative_eq!(out.data()[[0, 0]], 0.6, epsilon = 1e-12);
        assert_relative_eq!(out.data()[[0, 1]], 0.8, epsilon = 1e-12);
        assert_eq!(out.data()[[1, 0]], 0.0);
    }

    proptest! {
        #[test]
        fn gap_ignores_inactive_entries(
            vals in proptest::collection::vec(-5.0f64..5.0, 18),
            noise in proptest::collection::vec(-5.0f64..5.0, 18),
            bits in proptest::collection::vec(any::<bool>(), 6),
        ) {
            prop_assume!(bits.iter().any(|b| *b));
            let layout = IdentityLayout::new(2);
            let s = SkeletonSequence::new(Array3::from_shape_vec((3, 2, 3), vals).unwrap(), 20.0).unwrap();
            let mask = ActivationMask::new(Array2::from_shape_vec((3, 2), bits).unwrap());
            let base = Array2::<f64>::zeros((3, 6));
            let mut perturbed = base.clone();
            for f in 0..3 {
                for j in 0..2 {
                    if !mask.get(f, j) {
                        for c in 0..3 {
                            perturbed[[f, 3 * j + c]] = noise[f * 6 + 3 * j + c];
                        }
                    }
                }
            }
            let a = compute_gap(&s, &mask, &MotionSequence::new(base, 20.0).unwrap(), &layout).unwrap();
            let b = compute_gap(&s, &mask, &MotionSequence::new(perturbed, 20.0).unwrap(), &layout).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn gap_gradient_matches_directional_derivative(
            vals in proptest::collection::vec(-2.0f64..2.0, 12),
            x in proptest::collection::vec(-2.0f64..2.0, 12),
            dir in proptest::collection::vec(-1.0f64..1.0, 12),
        ) {
            let layout = RootOffsetLayout::new(2);
            let s = SkeletonSequence::new(Array3::from_shape_vec((2, 2, 3), vals).unwrap(), 20.0).unwrap();
            let mut mask = ActivationMask::ones(2, 2);
            mask.set(1, 0, false);
            let xm = MotionSequence::new(Array2::from_shape_vec((2, 6), x.clone()).unwrap(), 20.0).unwrap();
            let (g, grad) = gap_and_gradient(&s, &mask, &xm, &layout).unwrap();
            prop_assume!(g > 1e-3);
            let h = 1e-6;
            let shift = |sign: f64| {
                let v: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + sign * h * d).collect();
                let m = MotionSequence::new(Array2::from_shape_vec((2, 6), v).unwrap(), 20.0).unwrap();
                compute_gap(&s, &mask, &m, &layout).unwrap()
            };
            let fd = (shift(1.0) - shift(-1.0)) / (2.0 * h);
            let an: f64 = grad.iter().zip(&dir).map(|(a, b)| a * b).sum();
            prop_assert!((fd - an).abs() < 1e-5 * (1.0 + an.abs()));
        }
    }
}
