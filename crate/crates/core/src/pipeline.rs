//! End-to-end runs: scene → plan → guided sampling → clip → metrics, with
//! per-seed artifacts, a replayable manifest, and parallel batches.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    sample, GaussianReferenceDenoiser, MotionShape, NoiseSchedule, SamplerOptions, ScheduleKind,
};
use crate::guidance::{
    clip_output, compute_gap, Ablation, GuidanceConfig, GuidanceController, GuidanceTrace,
    PartialSkeletonPlan,
};
use crate::metrics::{evaluate, MetricsReport, DEFAULT_CONTACT_DELTA};
use crate::motion::{
    LayoutRegistry, MotionSequence, SkeletonFile, SkeletonProjection, SkeletonSequence,
    DEFAULT_FPS, DEFAULT_FRAMES, DEFAULT_JOINTS, JOINT_NAMES, REST_OFFSETS,
};
use crate::planner::{
    parse_intent, plan_with_requery, render_plan, resolve_target, rule_based_plan,
    HttpPlannerClient, Intent, PlannerClient, PlannerRequest, RulePlannerConfig, ScriptedClient,
    DEFAULT_INSTRUCTION_BUDGET,
};
use crate::scene::{
    serialize_scene, LayoutProvider, Scene3D, SceneAsset, ScriptedLayoutProvider, DEFAULT_CAMERAS,
};

/// Failing stage of a run; each maps to its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Config,
    Scene,
    Planner,
    Sampling,
    Metrics,
    Io,
}

impl Stage {
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Scene => 3,
            Stage::Planner => 4,
            Stage::Sampling => 5,
            Stage::Metrics | Stage::Io => 6,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Scene => "scene",
            Stage::Planner => "planner",
            Stage::Sampling => "sampling",
            Stage::Metrics => "metrics",
            Stage::Io => "io",
        })
    }
}

/// Exit code when some runs of a batch failed.
pub const EXIT_PARTIAL_BATCH: i32 = 7;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{stage} stage failed: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: Stage, e: impl fmt::Display) -> Self {
        Self {
            stage,
            message: e.to_string(),
        }
    }
}

fn at<E: fmt::Display>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::new(stage, e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PlannerMode {
    /// Deterministic keyword planner.
    #[default]
    RuleBased,
    /// Recorded responses replayed in order.
    Replay,
    /// Live chat-completion endpoint configured through the environment.
    Llm,
}

/// Prior mean of the reference denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PriorSource {
    /// Rest pose starting at `pelvis` and translating at `velocity` (m/s),
    /// facing the direction of travel (or +y when still).
    Rest {
        pelvis: [f64; 3],
        #[serde(default)]
        velocity: [f64; 3],
    },
    /// Skeleton file whose frames give the prior mean.
    File { path: PathBuf },
}

impl Default for PriorSource {
    fn default() -> Self {
        PriorSource::Rest {
            pelvis: [0.0, 0.0, 0.9],
            velocity: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DenoiserKind {
    #[default]
    GaussianReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub kind: DenoiserKind,
    pub prior: PriorSource,
    /// Prior variance of features 0..3 (the root under the root-offset layout).
    pub root_variance: f64,
    /// Prior variance of every other feature.
    pub pose_variance: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            kind: DenoiserKind::GaussianReference,
            prior: PriorSource::default(),
            root_variance: 1.0,
            pose_variance: 4e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub scene: PathBuf,
    pub prompt: String,
    pub cameras: usize,
    pub planner: PlannerMode,
    pub replay_responses: Vec<PathBuf>,
    pub max_retries: usize,
    pub timeout_secs: u64,
    pub instruction_budget: usize,
    pub rule: RulePlannerConfig,
    pub guidance: GuidanceConfig,
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub noiseless_final_step: bool,
    pub denoiser: DenoiserConfig,
    pub layout: String,
    pub n_frames: usize,
    pub n_joints: usize,
    pub fps: f64,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub contact_delta: f64,
    /// Leave the target out of collision scoring for contact actions.
    pub exclude_target: bool,
    /// Worker threads for batches; all cores when absent.
    pub workers: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scene: PathBuf::new(),
            prompt: String::new(),
            cameras: DEFAULT_CAMERAS,
            planner: PlannerMode::RuleBased,
            replay_responses: Vec::new(),
            max_retries: 2,
            timeout_secs: 60,
            instruction_budget: DEFAULT_INSTRUCTION_BUDGET,
            rule: RulePlannerConfig::default(),
            guidance: GuidanceConfig::default(),
            steps: 1000,
            schedule: ScheduleKind::Linear,
            noiseless_final_step: true,
            denoiser: DenoiserConfig::default(),
            layout: "root-offset".into(),
            n_frames: DEFAULT_FRAMES,
            n_joints: DEFAULT_JOINTS,
            fps: DEFAULT_FPS,
            seeds: vec![0],
            output: PathBuf::from("out"),
            contact_delta: DEFAULT_CONTACT_DELTA,
            exclude_target: true,
            workers: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(at(Stage::Config))
    }

    /// Parse a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::new(Stage::Config, format!("{}: {e}", path.display())))?;
        let mut c = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        c.rebase(base);
        Ok(c)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.scene);
        self.replay_responses.iter_mut().for_each(fix);
        if let PriorSource::File { path } = &mut self.denoiser.prior {
            fix(path);
        }
        fix(&mut self.output);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::new(Stage::Config, m));
        if self.prompt.trim().is_empty() {
            return err("prompt is empty".into());
        }
        if self.n_frames == 0 || self.n_joints == 0 {
            return err("n_frames and n_joints must be positive".into());
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return err(format!("fps must be positive, got {}", self.fps));
        }
        if self.steps == 0 {
            return err("steps must be positive".into());
        }
        if self.cameras == 0 {
            return err("cameras must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return err("no seeds given".into());
        }
        if self.workers == Some(0) {
            return err("workers must be at least 1".into());
        }
        if !(self.contact_delta > 0.0) {
            return err(format!(
                "contact_delta must be positive, got {}",
                self.contact_delta
            ));
        }
        let d = &self.denoiser;
        if !(d.root_variance >= 0.0 && d.pose_variance >= 0.0) {
            return err("prior variances must be non-negative".into());
        }
        self.guidance.validate().map_err(at(Stage::Config))?;
        LayoutRegistry::default()
            .get(&self.layout, self.n_joints)
            .map_err(at(Stage::Config))?;
        Ok(())
    }
}

/// Everything a run reads from disk, captured so a manifest can replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInputs {
    pub config: PipelineConfig,
    pub scene_asset: SceneAsset,
    pub replay_responses: Vec<String>,
    pub prior: Option<SkeletonFile>,
}

impl RunInputs {
    pub fn load(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let scene_asset = SceneAsset::load(&config.scene).map_err(at(Stage::Scene))?;
        let replay_responses = if config.planner == PlannerMode::Replay {
            if config.replay_responses.is_empty() {
                return Err(PipelineError::new(
                    Stage::Config,
                    "replay mode needs at least one recorded response",
                ));
            }
            config
                .replay_responses
                .iter()
                .map(|p| {
                    fs::read_to_string(p).map_err(|e| {
                        PipelineError::new(Stage::Config, format!("{}: {e}", p.display()))
                    })
                })
                .collect::<Result<_, _>>()?
        } else {
            Vec::new()
        };
        let prior = match &config.denoiser.prior {
            PriorSource::File { path } => {
                let text = fs::read_to_string(path).map_err(|e| {
                    PipelineError::new(Stage::Config, format!("{}: {e}", path.display()))
                })?;
                Some(SkeletonFile::from_json(&text).map_err(at(Stage::Config))?)
            }
            PriorSource::Rest { .. } => None,
        };
        Ok(Self {
            config,
            scene_asset,
            replay_responses,
            prior,
        })
    }
}

/// Written once per run; enough to reproduce it without the original files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub template: String,
    pub inputs: RunInputs,
}

impl Manifest {
    pub fn new(inputs: RunInputs) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            template: crate::planner::TEMPLATE_VERSION.to_string(),
            inputs,
        }
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::new(Stage::Config, format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(at(Stage::Config))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Rest pose moving at constant velocity, facing its direction of travel.
pub fn moving_rest_sequence(
    n_frames: usize,
    pelvis: [f64; 3],
    velocity: [f64; 3],
    fps: f64,
) -> Result<SkeletonSequence, crate::motion::MotionError> {
    let speed = (velocity[0].powi(2) + velocity[1].powi(2)).sqrt();
    let fwd = if speed > 1e-12 {
        [velocity[0] / speed, velocity[1] / speed]
    } else {
        [0.0, 1.0]
    };
    let right = [fwd[1], -fwd[0]];
    let mut data = Array3::zeros((n_frames, DEFAULT_JOINTS, 3));
    for f in 0..n_frames {
        let t = f as f64 / fps;
        let p: [f64; 3] = std::array::from_fn(|c| pelvis[c] + velocity[c] * t);
        for (j, o) in REST_OFFSETS.iter().enumerate() {
            data[[f, j, 0]] = p[0] + o[0] * right[0] + o[1] * fwd[0];
            data[[f, j, 1]] = p[1] + o[0] * right[1] + o[1] * fwd[1];
            data[[f, j, 2]] = p[2] + o[2];
        }
    }
    SkeletonSequence::new(data, fps)
}

/// Reference denoiser built from the prior source and variances.
pub fn build_denoiser(
    inputs: &RunInputs,
    layout: &dyn SkeletonProjection,
) -> Result<GaussianReferenceDenoiser, PipelineError> {
    let c = &inputs.config;
    let skeleton = match (&c.denoiser.prior, &inputs.prior) {
        (_, Some(file)) => file.to_skeleton().map_err(at(Stage::Config))?.0,
        (PriorSource::Rest { pelvis, velocity }, None) => {
            if c.n_joints != DEFAULT_JOINTS {
                return Err(PipelineError::new(
                    Stage::Config,
                    format!("rest-pose prior needs {DEFAULT_JOINTS} joints"),
                ));
            }
            moving_rest_sequence(c.n_frames, *pelvis, *velocity, c.fps)
                .map_err(at(Stage::Config))?
        }
        (PriorSource::File { path }, None) => {
            return Err(PipelineError::new(
                Stage::Config,
                format!("prior file {} was not loaded", path.display()),
            ))
        }
    };
    if (skeleton.n_frames(), skeleton.n_joints()) != (c.n_frames, c.n_joints) {
        return Err(PipelineError::new(
            Stage::Config,
            format!(
                "prior is {}x{} but the run is {}x{}",
                skeleton.n_frames(),
                skeleton.n_joints(),
                c.n_frames,
                c.n_joints
            ),
        ));
    }
    let mu = layout
        .lift(&skeleton)
        .ok_or_else(|| {
            PipelineError::new(
                Stage::Config,
                format!("layout {} cannot lift a prior", layout.name()),
            )
        })?
        .map_err(at(Stage::Config))?;
    let width = layout.feature_width();
    let var = Array2::from_shape_fn((c.n_frames, width), |(_, d)| {
        if d < 3 {
            c.denoiser.root_variance
        } else {
            c.denoiser.pose_variance
        }
    });
    GaussianReferenceDenoiser::new(mu.into_data(), var).map_err(at(Stage::Config))
}

fn joint_names(n: usize) -> Vec<String> {
    if n == DEFAULT_JOINTS {
        JOINT_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..n).map(|i| format!("joint_{i}")).collect()
    }
}

/// Output of the planner stage.
#[derive(Debug, Clone)]
pub struct PlanStage {
    pub scene: Scene3D,
    pub scene_text: String,
    pub intent: Option<Intent>,
    pub plan: PartialSkeletonPlan,
    pub responses: Vec<String>,
    pub plan_json: String,
}

pub fn derive_scene(inputs: &RunInputs) -> Result<Scene3D, PipelineError> {
    ScriptedLayoutProvider
        .derive(&inputs.scene_asset, inputs.config.cameras)
        .map_err(at(Stage::Scene))
}

/// Scene understanding and planning, shared by every seed of a run.
pub fn run_planner(inputs: &RunInputs) -> Result<PlanStage, PipelineError> {
    let c = &inputs.config;
    let scene = derive_scene(inputs)?;
    let scene_text = serialize_scene(&scene);
    let names = joint_names(c.n_joints);
    let intent = parse_intent(&c.prompt).ok();
    let req = PlannerRequest {
        scene_text: scene_text.clone(),
        prompt: c.prompt.clone(),
        n_frames: c.n_frames,
        n_joints: c.n_joints,
        fps: c.fps,
        joint_names: names.clone(),
    };
    let planned = |client: &dyn PlannerClient| {
        plan_with_requery(client, &req, &scene, c.max_retries, c.instruction_budget)
            .map_err(at(Stage::Planner))
    };
    let (plan, responses) = match c.planner {
        PlannerMode::RuleBased => {
            if c.n_joints != DEFAULT_JOINTS {
                return Err(PipelineError::new(
                    Stage::Config,
                    format!("the rule-based planner needs {DEFAULT_JOINTS} joints"),
                ));
            }
            let intent = parse_intent(&c.prompt).map_err(at(Stage::Planner))?;
            let plan = rule_based_plan(&scene, &intent, c.n_frames, c.fps, &c.rule)
                .map_err(at(Stage::Planner))?;
            let text = render_plan(&plan, &names);
            (plan, vec![text])
        }
        PlannerMode::Replay => {
            if inputs.replay_responses.is_empty() {
                return Err(PipelineError::new(
                    Stage::Config,
                    "no recorded responses to replay",
                ));
            }
            let out = planned(&ScriptedClient::new(inputs.replay_responses.clone()))?;
            (out.plan, out.responses)
        }
        PlannerMode::Llm => {
            let client = HttpPlannerClient::from_env(Duration::from_secs(c.timeout_secs))
                .map_err(at(Stage::Config))?;
            let out = planned(&client)?;
            (out.plan, out.responses)
        }
    };
    let plan_json = render_plan(&plan, &names);
    Ok(PlanStage {
        scene,
        scene_text,
        intent,
        plan,
        responses,
        plan_json,
    })
}

/// Motion features with their projected joints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionFile {
    pub layout: String,
    pub fps: f64,
    pub n_frames: usize,
    pub features: Vec<Vec<f64>>,
    pub skeleton: SkeletonFile,
}

impl MotionFile {
    pub fn new(
        motion: &MotionSequence,
        layout: &dyn SkeletonProjection,
    ) -> Result<Self, crate::motion::MotionError> {
        let skeleton = layout.project(motion)?;
        Ok(Self {
            layout: layout.name().to_string(),
            fps: motion.fps(),
            n_frames: motion.n_frames(),
            features: motion
                .data()
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
            skeleton: SkeletonFile::from_skeleton(&skeleton, None),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("motion serializes")
    }
}

/// Per-seed outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub ablation: Ablation,
    pub metrics: MetricsReport,
    /// Gap between plan and final sample.
    pub final_gap: f64,
    pub initial_gap: Option<f64>,
    pub aligned_steps: usize,
    pub clip: (usize, usize),
}

/// In-memory artifacts of one seed.
#[derive(Debug, Clone)]
pub struct SeedArtifacts {
    pub result: SeedResult,
    pub full: MotionSequence,
    pub clipped: MotionSequence,
    pub trace: GuidanceTrace,
}

/// Guided sampling, clipping and scoring for one seed.
pub fn run_seed(
    inputs: &RunInputs,
    stage: &PlanStage,
    seed: u64,
) -> Result<SeedArtifacts, PipelineError> {
    let c = &inputs.config;
    let layout: Arc<dyn SkeletonProjection> = LayoutRegistry::default()
        .get(&c.layout, c.n_joints)
        .map_err(at(Stage::Config))?;
    let denoiser = build_denoiser(inputs, layout.as_ref())?;
    let sched = NoiseSchedule::build(c.steps, c.schedule).map_err(at(Stage::Config))?;
    let controller = GuidanceController::new(stage.plan.clone(), c.guidance, layout.clone())
        .map_err(at(Stage::Config))?;
    let shape = MotionShape {
        n_frames: c.n_frames,
        width: layout.feature_width(),
        fps: c.fps,
    };
    let opts = SamplerOptions {
        noiseless_final_step: c.noiseless_final_step,
    };
    let (full, trace) = sample(
        &denoiser,
        &sched,
        &c.prompt,
        Some(controller),
        seed,
        shape,
        &opts,
    )
    .map_err(at(Stage::Sampling))?;
    let clip = stage.plan.mask().bounds().map_err(at(Stage::Sampling))?;
    let clipped = clip_output(&full, stage.plan.mask()).map_err(at(Stage::Sampling))?;
    let final_gap = compute_gap(
        stage.plan.skeleton(),
        stage.plan.mask(),
        &full,
        layout.as_ref(),
    )
    .map_err(at(Stage::Metrics))?;

    let skeleton = layout.project(&clipped).map_err(at(Stage::Metrics))?;
    let target = stage
        .intent
        .as_ref()
        .and_then(|i| resolve_target(&stage.scene, i).ok());
    let exclude = c.exclude_target
        && stage
            .intent
            .as_ref()
            .is_some_and(|i| i.action.contacts_target());
    let metrics = evaluate(&skeleton, &stage.scene, target, exclude, c.contact_delta)
        .map_err(at(Stage::Metrics))?;
    Ok(SeedArtifacts {
        result: SeedResult {
            seed,
            ablation: c.guidance.ablation,
            metrics,
            final_gap,
            initial_gap: trace.initial_gap,
            aligned_steps: trace.aligned_steps(),
            clip,
        },
        full,
        clipped,
        trace,
    })
}

fn write(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text)
        .map_err(|e| PipelineError::new(Stage::Io, format!("{}: {e}", path.display())))
}

fn write_seed(
    dir: &Path,
    inputs: &RunInputs,
    stage: &PlanStage,
    a: &SeedArtifacts,
) -> Result<(), PipelineError> {
    let c = &inputs.config;
    let layout = LayoutRegistry::default()
        .get(&c.layout, c.n_joints)
        .map_err(at(Stage::Config))?;
    fs::create_dir_all(dir)
        .map_err(|e| PipelineError::new(Stage::Io, format!("{}: {e}", dir.display())))?;
    write(&dir.join("plan.json"), &stage.plan_json)?;
    let full = MotionFile::new(&a.full, layout.as_ref()).map_err(at(Stage::Io))?;
    let clipped = MotionFile::new(&a.clipped, layout.as_ref()).map_err(at(Stage::Io))?;
    write(&dir.join("motion_full.json"), &full.to_json())?;
    write(&dir.join("motion_clipped.json"), &clipped.to_json())?;
    write(&dir.join("trace.json"), &pretty(&a.trace))?;
    write(&dir.join("metrics.json"), &pretty(&a.result))?;
    Ok(())
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("artifact serializes")
}

/// Summary of one run across its seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub output: PathBuf,
    pub results: Vec<SeedResult>,
    pub plan_json: String,
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Plan once, then sample every configured seed and write artifacts under
/// the output directory.
pub fn run_generation(inputs: &RunInputs) -> Result<RunReport, PipelineError> {
    inputs.config.validate()?;
    let out = inputs.config.output.clone();
    let stage = run_planner(inputs)?;
    fs::create_dir_all(&out)
        .map_err(|e| PipelineError::new(Stage::Io, format!("{}: {e}", out.display())))?;
    let mut manifest_inputs = inputs.clone();
    if manifest_inputs.config.planner == PlannerMode::Llm {
        // Live runs are replayed from the responses they received.
        manifest_inputs.config.planner = PlannerMode::Replay;
        manifest_inputs.replay_responses = stage.responses.clone();
    }
    write(
        &out.join("manifest.json"),
        &Manifest::new(manifest_inputs).to_json(),
    )?;
    write(&out.join("scene.txt"), &stage.scene_text)?;
    let mut results = Vec::new();
    for &seed in &inputs.config.seeds {
        let a = run_seed(inputs, &stage, seed)?;
        write_seed(&seed_dir(&out, seed), inputs, &stage, &a)?;
        results.push(a.result);
    }
    Ok(RunReport {
        output: out,
        results,
        plan_json: stage.plan_json,
    })
}

/// Re-run from a manifest, optionally into a different directory.
pub fn run_from_manifest(
    manifest: &Manifest,
    output: Option<&Path>,
) -> Result<RunReport, PipelineError> {
    let mut inputs = manifest.inputs.clone();
    if let Some(o) = output {
        inputs.config.output = o.to_path_buf();
    }
    run_generation(&inputs)
}

/// One unit of batch work: a labeled config at one seed.
#[derive(Debug, Clone)]
pub struct BatchJob {
    pub label: String,
    pub config: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchRow {
    pub label: String,
    pub ablation: String,
    pub seed: String,
    pub status: String,
    pub body_to_goal: Option<f64>,
    pub non_collision: Option<f64>,
    pub contact: Option<f64>,
    pub final_gap: Option<f64>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub rows: Vec<BatchRow>,
    pub means: Vec<BatchRow>,
    pub failures: usize,
}

impl BatchReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in self.rows.iter().chain(&self.means) {
            w.serialize(r).expect("csv row");
        }
        String::from_utf8(w.into_inner().expect("csv buffer")).expect("utf-8 csv")
    }
}

fn mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Expand jobs over their seeds (and optional ablation variants), run them in
/// parallel, and aggregate. Failures are recorded, not fatal.
pub fn run_batch(
    jobs: &[BatchJob],
    ablations: Option<&[Ablation]>,
    workers: Option<usize>,
) -> Result<BatchReport, PipelineError> {
    struct Unit {
        label: String,
        config: PipelineConfig,
        seed: u64,
    }
    let mut units = Vec::new();
    for job in jobs {
        let variants: Vec<Ablation> = match ablations {
            Some(a) => a.to_vec(),
            None => vec![job.config.guidance.ablation],
        };
        for v in variants {
            for &seed in &job.config.seeds {
                let mut config = job.config.clone();
                config.guidance.ablation = v;
                config.seeds = vec![seed];
                let mut dir = job.config.output.join(&job.label);
                if ablations.is_some() {
                    dir = dir.join(v.to_string());
                }
                // One directory per unit so parallel runs never share a manifest.
                config.output = dir.join(format!("run_{seed}"));
                units.push(Unit {
                    label: job.label.clone(),
                    config,
                    seed,
                });
            }
        }
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        builder = builder.num_threads(w);
    }
    let pool = builder.build().map_err(at(Stage::Config))?;
    let rows: Vec<BatchRow> = pool.install(|| {
        units
            .par_iter()
            .map(|u| {
                let outcome = RunInputs::load(u.config.clone()).and_then(|i| run_generation(&i));
                let ablation = u.config.guidance.ablation.to_string();
                match outcome {
                    Ok(rep) => {
                        let r = &rep.results[0];
                        BatchRow {
                            label: u.label.clone(),
                            ablation,
                            seed: u.seed.to_string(),
                            status: "ok".into(),
                            body_to_goal: r.metrics.body_to_goal,
                            non_collision: Some(r.metrics.non_collision),
                            contact: Some(r.metrics.contact),
                            final_gap: Some(r.final_gap),
                            error: String::new(),
                        }
                    }
                    Err(e) => {
                        log::error!("{} seed {}: {e}", u.label, u.seed);
                        BatchRow {
                            label: u.label.clone(),
                            ablation,
                            seed: u.seed.to_string(),
                            status: format!("failed:{}", e.stage),
                            body_to_goal: None,
                            non_collision: None,
                            contact: None,
                            final_gap: None,
                            error: e.message,
                        }
                    }
                }
            })
            .collect()
    });
    let failures = rows.iter().filter(|r| r.status != "ok").count();
    let mut variants: Vec<String> = Vec::new();
    for r in &rows {
        if !variants.contains(&r.ablation) {
            variants.push(r.ablation.clone());
        }
    }
    let means = variants
        .into_iter()
        .map(|v| {
            let group: Vec<&BatchRow> = rows
                .iter()
                .filter(|r| r.ablation == v && r.status == "ok")
                .collect();
            BatchRow {
                label: "mean".into(),
                ablation: v,
                seed: format!("n={}", group.len()),
                status: "mean".into(),
                body_to_goal: mean(group.iter().map(|r| r.body_to_goal)),
                non_collision: mean(group.iter().map(|r| r.non_collision)),
                contact: mean(group.iter().map(|r| r.contact)),
                final_gap: mean(group.iter().map(|r| r.final_gap)),
                error: String::new(),
            }
        })
        .collect();
    Ok(BatchReport {
        rows,
        means,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::joint_index;
    use approx::assert_relative_eq;

    #[test]
    fn config_defaults_and_unknown_keys() {
        let c = PipelineConfig::from_toml("prompt = \"walk to the bed\"").unwrap();
        assert_eq!(c.cameras, 16);
        assert_eq!(c.guidance.lambda, 3.0);
        assert_eq!(c.guidance.xi, 0.2);
        assert_eq!(c.steps, 1000);
        assert_eq!(c.layout, "root-offset");
        let e = PipelineConfig::from_toml("prompt = \"x\"\nlamda = 2.0").unwrap_err();
        assert_eq!(e.stage, Stage::Config);
        let e = PipelineConfig::from_toml("[guidance]\nlambda = 1.0\nxj = 0.1").unwrap_err();
        assert_eq!(e.stage, Stage::Config);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let ok = PipelineConfig {
            prompt: "walk to the bed".into(),
            ..PipelineConfig::default()
        };
        ok.validate().unwrap();
        let bad = [
            PipelineConfig {
                prompt: " ".into(),
                ..ok.clone()
            },
            PipelineConfig {
                steps: 0,
                ..ok.clone()
            },
            PipelineConfig {
                cameras: 0,
                ..ok.clone()
            },
            PipelineConfig {
                seeds: vec![],
                ..ok.clone()
            },
            PipelineConfig {
                workers: Some(0),
                ..ok.clone()
            },
            PipelineConfig {
                contact_delta: 0.0,
                ..ok.clone()
            },
            PipelineConfig {
                layout: "quaternion".into(),
                ..ok.clone()
            },
            PipelineConfig {
                fps: f64::NAN,
                ..ok.clone()
            },
        ];
        for c in bad {
            assert_eq!(c.validate().unwrap_err().stage, Stage::Config);
        }
    }

    #[test]
    fn moving_rest_pose_faces_travel_direction() {
        let s = moving_rest_sequence(21, [1.0, 2.0, 0.9], [1.2, 0.0, 0.0], 20.0).unwrap();
        let pelvis = s.joint(20, 0);
        assert_relative_eq!(pelvis[0], 2.2, epsilon = 1e-12);
        assert_relative_eq!(pelvis[1], 2.0, epsilon = 1e-12);
        // Facing +x puts the left hip on the +y side.
        let l = s.joint(0, joint_index("left_hip").unwrap());
        let r = s.joint(0, joint_index("right_hip").unwrap());
        assert!(l[1] > r[1]);
        let still = moving_rest_sequence(2, [0.0, 0.0, 0.9], [0.0; 3], 20.0).unwrap();
        assert_eq!(still.joint(0, 0), still.joint(1, 0));
    }

    #[test]
    fn reference_denoiser_variance_split() {
        let config = PipelineConfig {
            prompt: "walk to the bed".into(),
            n_frames: 4,
            ..PipelineConfig::default()
        };
        let inputs = RunInputs {
            config,
            scene_asset: SceneAsset::from_json(r#"{"name":"s","floor_z":0.0,"objects":[]}"#)
                .unwrap(),
            replay_responses: vec![],
            prior: None,
        };
        let layout = LayoutRegistry::default()
            .get("root-offset", DEFAULT_JOINTS)
            .unwrap();
        let d = build_denoiser(&inputs, layout.as_ref()).unwrap();
        assert_eq!(d.mu0().dim(), (4, layout.feature_width()));
        let c = d.jacobian_diagonal(0.5);
        assert!(c[[0, 0]] > c[[0, 3]]);
        assert_eq!(c[[2, 1]], c[[0, 2]]);
    }

    #[test]
    fn stage_codes_are_distinct_per_failure_class() {
        let codes: Vec<i32> = [
            Stage::Config,
            Stage::Scene,
            Stage::Planner,
            Stage::Sampling,
            Stage::Metrics,
        ]
        .iter()
        .map(|s| s.exit_code())
        .collect();
        assert_eq!(codes, [2, 3, 4, 5, 6]);
        assert_eq!(Stage::Io.exit_code(), 6);
        assert_eq!(EXIT_PARTIAL_BATCH, 7);
        let e = PipelineError::new(Stage::Planner, "no plan");
        assert_eq!(e.to_string(), "planner stage failed: no plan");
    }
}
