//! Command-line front end: generate, batch, plan, score, serialize-scene.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use scenemotion::diffusion::ScheduleKind;
use scenemotion::guidance::{Ablation, GradientMode};
use scenemotion::metrics::{evaluate, DEFAULT_CONTACT_DELTA};
use scenemotion::motion::{SkeletonFile, SkeletonSequence};
use scenemotion::pipeline::{
    run_batch, run_from_manifest, run_generation, run_planner, BatchJob, Manifest, MotionFile,
    PipelineConfig, PipelineError, PlannerMode, RunInputs, RunReport, Stage, EXIT_PARTIAL_BATCH,
};
use scenemotion::planner::{parse_intent, resolve_target};
use scenemotion::scene::{scripted_layout_provider, serialize_scene, DEFAULT_CAMERAS};

#[derive(Parser)]
#[command(
    name = "scenemotion",
    version,
    about = "Scene-aware motion generation from text"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan and sample motions for every configured seed.
    Generate(GenerateArgs),
    /// Run several configs over their seeds in parallel and write a CSV.
    Batch(BatchArgs),
    /// Run only the planner and print the plan.
    Plan(PlanArgs),
    /// Score a motion or skeleton file against a scene.
    Score(ScoreArgs),
    /// Print the textual scene description the planner sees.
    SerializeScene(SceneArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PlannerArg {
    RuleBased,
    Replay,
    Llm,
}

impl From<PlannerArg> for PlannerMode {
    fn from(p: PlannerArg) -> Self {
        match p {
            PlannerArg::RuleBased => PlannerMode::RuleBased,
            PlannerArg::Replay => PlannerMode::Replay,
            PlannerArg::Llm => PlannerMode::Llm,
        }
    }
}

/// Run settings. Flags override the config file, which overrides defaults.
#[derive(Args)]
struct RunArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene asset (JSON).
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long, value_enum)]
    planner: Option<PlannerArg>,
    /// Recorded planner response, in order; repeat for re-queries.
    #[arg(long = "replay")]
    replay: Vec<PathBuf>,
    /// Number of camera views used for scene understanding.
    #[arg(long)]
    cameras: Option<usize>,
    /// Guidance step size.
    #[arg(long)]
    lambda: Option<f64>,
    /// Deactivation threshold on the gap ratio.
    #[arg(long)]
    xi: Option<f64>,
    /// auto, exact, surrogate or finite-difference.
    #[arg(long)]
    gradient_mode: Option<GradientMode>,
    /// full, no-mod1, no-mod2 or no-both.
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Diffusion steps.
    #[arg(long)]
    steps: Option<usize>,
    /// linear or cosine.
    #[arg(long)]
    schedule: Option<ScheduleKind>,
    /// Motion feature layout: identity or root-offset.
    #[arg(long)]
    layout: Option<String>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    fps: Option<f64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Rule-based planner start position as x,y.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    start: Option<Vec<f64>>,
    #[arg(long)]
    max_retries: Option<usize>,
    /// Planner request timeout in seconds.
    #[arg(long)]
    timeout: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<PipelineConfig, PipelineError> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = &self.scene {
            c.scene = v.clone();
        }
        if let Some(v) = &self.prompt {
            c.prompt = v.clone();
        }
        if let Some(v) = self.planner {
            c.planner = v.into();
        }
        if !self.replay.is_empty() {
            c.replay_responses = self.replay.clone();
        }
        if let Some(v) = self.cameras {
            c.cameras = v;
        }
        if let Some(v) = self.lambda {
            c.guidance.lambda = v;
        }
        if let Some(v) = self.xi {
            c.guidance.xi = v;
        }
        if let Some(v) = self.gradient_mode {
            c.guidance.gradient_mode = v;
        }
        if let Some(v) = self.ablation {
            c.guidance.ablation = v;
        }
        if let Some(v) = self.steps {
            c.steps = v;
        }
        if let Some(v) = self.schedule {
            c.schedule = v;
        }
        if let Some(v) = &self.layout {
            c.layout = v.clone();
        }
        if let Some(v) = self.frames {
            c.n_frames = v;
        }
        if let Some(v) = self.fps {
            c.fps = v;
        }
        if let Some(v) = &self.seeds {
            c.seeds = v.clone();
        }
        if let Some(v) = &self.output {
            c.output = v.clone();
        }
        if let Some(v) = &self.start {
            c.rule.start = Some([v[0], v[1]]);
        }
        if let Some(v) = self.max_retries {
            c.max_retries = v;
        }
        if let Some(v) = self.timeout {
            c.timeout_secs = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Re-run a previous run from its manifest.json; only --output applies.
    #[arg(long, conflicts_with = "config")]
    from_manifest: Option<PathBuf>,
}

#[derive(Args)]
struct BatchArgs {
    /// Config files; each becomes a job labeled by its file stem.
    #[arg(long = "config", required = true)]
    configs: Vec<PathBuf>,
    /// Run every ablation variant.
    #[arg(long, conflicts_with = "ablations")]
    all_ablations: bool,
    /// Comma-separated ablation variants to run.
    #[arg(long, value_delimiter = ',')]
    ablations: Option<Vec<Ablation>>,
    /// Comma-separated seeds, replacing each config's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    steps: Option<usize>,
    /// Worker threads; all cores by default.
    #[arg(long)]
    workers: Option<usize>,
    /// Root directory for all jobs, replacing each config's output.
    #[arg(long)]
    output: Option<PathBuf>,
    /// CSV path; defaults to batch.csv under the output root.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Write the plan here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Motion file (as written by generate) or skeleton file.
    #[arg(long)]
    motion: PathBuf,
    /// Scene asset (JSON).
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CAMERAS)]
    cameras: usize,
    /// Goal object label.
    #[arg(long, conflicts_with = "prompt")]
    target: Option<String>,
    /// Prompt from which to resolve the goal object.
    #[arg(long)]
    prompt: Option<String>,
    /// Leave the goal object out of collision scoring.
    #[arg(long)]
    exclude_target: bool,
    #[arg(long, default_value_t = DEFAULT_CONTACT_DELTA)]
    delta: f64,
}

#[derive(Args)]
struct SceneArgs {
    /// Scene asset (JSON).
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CAMERAS)]
    cameras: usize,
}

fn err(stage: Stage) -> impl Fn(String) -> PipelineError {
    move |m| PipelineError::new(stage, m)
}

fn print_report(report: &RunReport) {
    for r in &report.results {
        let b2g = r
            .metrics
            .body_to_goal
            .map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        println!(
            "seed {}: body_to_goal {b2g} non_collision {:.4} contact {:.4} final_gap {:.4} aligned_steps {}",
            r.seed, r.metrics.non_collision, r.metrics.contact, r.final_gap, r.aligned_steps
        );
    }
    info!("artifacts written to {}", report.output.display());
}

fn generate(args: &GenerateArgs) -> Result<i32, PipelineError> {
    let report = match &args.from_manifest {
        Some(path) => run_from_manifest(&Manifest::load(path)?, args.run.output.as_deref())?,
        None => run_generation(&RunInputs::load(args.run.resolve()?)?)?,
    };
    print_report(&report);
    Ok(0)
}

fn batch(args: &BatchArgs) -> Result<i32, PipelineError> {
    let mut jobs = Vec::new();
    for path in &args.configs {
        let mut config = PipelineConfig::load(path)?;
        if let Some(s) = &args.seeds {
            config.seeds = s.clone();
        }
        if let Some(s) = args.steps {
            config.steps = s;
        }
        if let Some(o) = &args.output {
            config.output = o.clone();
        }
        let stem = path
            .file_stem()
            .map_or("job".into(), |s| s.to_string_lossy().into_owned());
        let mut label = stem.clone();
        let mut n = 2;
        while jobs.iter().any(|j: &BatchJob| j.label == label) {
            label = format!("{stem}_{n}");
            n += 1;
        }
        jobs.push(BatchJob { label, config });
    }
    let variants = if args.all_ablations {
        Some(Ablation::ALL.to_vec())
    } else {
        args.ablations.clone()
    };
    let report = run_batch(&jobs, variants.as_deref(), args.workers)?;
    let csv_path = match &args.csv {
        Some(p) => p.clone(),
        None => args
            .output
            .clone()
            .unwrap_or_else(|| jobs[0].config.output.clone())
            .join("batch.csv"),
    };
    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| err(Stage::Io)(format!("{}: {e}", dir.display())))?;
    }
    fs::write(&csv_path, report.to_csv())
        .map_err(|e| err(Stage::Io)(format!("{}: {e}", csv_path.display())))?;
    for m in &report.means {
        let f = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        println!(
            "{} ({}): body_to_goal {} non_collision {} contact {} final_gap {}",
            m.ablation,
            m.seed,
            f(m.body_to_goal),
            f(m.non_collision),
            f(m.contact),
            f(m.final_gap)
        );
    }
    info!("wrote {}", csv_path.display());
    if report.failures > 0 {
        eprintln!("{} of {} runs failed", report.failures, report.rows.len());
        return Ok(EXIT_PARTIAL_BATCH);
    }
    Ok(0)
}

fn plan(args: &PlanArgs) -> Result<i32, PipelineError> {
    let stage = run_planner(&RunInputs::load(args.run.resolve()?)?)?;
    match &args.out {
        Some(p) => fs::write(p, &stage.plan_json)
            .map_err(|e| err(Stage::Io)(format!("{}: {e}", p.display())))?,
        None => println!("{}", stage.plan_json),
    }
    Ok(0)
}

fn load_skeleton(path: &Path) -> Result<SkeletonSequence, PipelineError> {
    let text = fs::read_to_string(path)
        .map_err(|e| err(Stage::Config)(format!("{}: {e}", path.display())))?;
    let file = match serde_json::from_str::<MotionFile>(&text) {
        Ok(m) => m.skeleton,
        Err(_) => SkeletonFile::from_json(&text)
            .map_err(|e| err(Stage::Config)(format!("{}: {e}", path.display())))?,
    };
    let (skeleton, _) = file
        .to_skeleton()
        .map_err(|e| err(Stage::Config)(e.to_string()))?;
    Ok(skeleton)
}

fn score(args: &ScoreArgs) -> Result<i32, PipelineError> {
    let skeleton = load_skeleton(&args.motion)?;
    let scene = scripted_layout_provider(&args.scene, args.cameras)
        .map_err(|e| err(Stage::Scene)(e.to_string()))?;
    let target = match (&args.target, &args.prompt) {
        (Some(label), _) => Some(
            scene
                .find(label)
                .ok_or_else(|| err(Stage::Metrics)(format!("no object labeled '{label}'")))?,
        ),
        (None, Some(prompt)) => {
            let intent = parse_intent(prompt).map_err(|e| err(Stage::Planner)(e.to_string()))?;
            Some(resolve_target(&scene, &intent).map_err(|e| err(Stage::Planner)(e.to_string()))?)
        }
        (None, None) => None,
    };
    let report = evaluate(&skeleton, &scene, target, args.exclude_target, args.delta)
        .map_err(|e| err(Stage::Metrics)(e.to_string()))?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    Ok(0)
}

fn serialize(args: &SceneArgs) -> Result<i32, PipelineError> {
    let scene = scripted_layout_provider(&args.scene, args.cameras)
        .map_err(|e| err(Stage::Scene)(e.to_string()))?;
    print!("{}", serialize_scene(&scene));
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Batch(a) => batch(a),
        Command::Plan(a) => plan(a),
        Command::Score(a) => score(a),
        Command::SerializeScene(a) => serialize(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.stage.exit_code() as u8)
        }
    }
}
