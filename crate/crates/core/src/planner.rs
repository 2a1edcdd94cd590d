//! Planner channel: instruction building, language-model clients, response
//! parsing, and a deterministic rule-based stand-in.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Duration;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use crate::guidance::PartialSkeletonPlan;
use crate::motion::{
    joint_index, ActivationMask, MotionError, SkeletonSequence, REST_OFFSETS,
    STANDING_PELVIS_HEIGHT,
};
use crate::scene::{Aabb, ObjectBox, Scene3D};

/// Versioned instruction template.
pub const INSTRUCTION_TEMPLATE: &str = include_str!("../templates/planner_instruction_v1.txt");
pub const TEMPLATE_VERSION: &str = "planner_instruction_v1";
/// Default upper bound on instruction size in bytes.
pub const DEFAULT_INSTRUCTION_BUDGET: usize = 16 * 1024;
/// Planned joints may sit at most this far outside the scene's bounding volume.
pub const PLAN_BOUNDS_MARGIN: f64 = 2.0;

pub const ENV_BASE_URL: &str = "PLANNER_BASE_URL";
pub const ENV_MODEL: &str = "PLANNER_MODEL";
pub const ENV_API_KEY: &str = "PLANNER_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("no JSON plan block found in response")]
    NoJsonBlock,
    #[error("plan schema violation: {0}")]
    Schema(String),
    #[error("frame {t} out of range (sequence has {n_frames} frames)")]
    FrameOutOfRange { t: i64, n_frames: usize },
    #[error("unknown joint '{0}'")]
    UnknownJoint(String),
    #[error("plan has no joint entries")]
    EmptyPlan,
    #[error("planned {joint} at frame {t} lies outside the scene volume")]
    OutOfBounds { t: usize, joint: String },
    #[error("planner request failed after {attempts} attempt(s): {last}")]
    Transport { attempts: usize, last: String },
    #[error("planner timed out on all {attempts} attempt(s)")]
    Timeout { attempts: usize },
    #[error("planner response unusable after {attempts} attempt(s): {last}")]
    Unparseable {
        attempts: usize,
        last: Box<PlannerError>,
    },
    #[error("instruction is {size} bytes, over the {budget}-byte budget")]
    Budget { size: usize, budget: usize },
    #[error("planner configuration: {0}")]
    Config(String),
    #[error("cannot read an action from prompt '{0}'")]
    UnknownAction(String),
    #[error("prompt '{0}' names no target object")]
    NoTarget(String),
    #[error("target '{0}' is not in the scene")]
    TargetAbsent(String),
    #[error("no free floor position found for {0}")]
    NoFreeSpace(&'static str),
    #[error(transparent)]
    Motion(#[from] MotionError),
}

/// Inputs to the planner instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerRequest {
    pub scene_text: String,
    pub prompt: String,
    pub n_frames: usize,
    pub n_joints: usize,
    pub fps: f64,
    pub joint_names: Vec<String>,
}

impl PlannerRequest {
    pub fn validate(&self) -> Result<(), PlannerError> {
        if self.n_frames == 0 || self.n_joints == 0 {
            return Err(PlannerError::Config(
                "n_frames and n_joints must be positive".into(),
            ));
        }
        if self.joint_names.len() != self.n_joints {
            return Err(PlannerError::Config(format!(
                "{} joint names for {} joints",
                self.joint_names.len(),
                self.n_joints
            )));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(PlannerError::Config(format!("fps {}", self.fps)));
        }
        Ok(())
    }
}

/// Fill the instruction template. Byte-deterministic.
pub fn build_instruction(req: &PlannerRequest) -> String {
    let body: String = INSTRUCTION_TEMPLATE
        .lines()
        .filter(|l| !l.starts_with("#!"))
        .map(|l| format!("{l}\n"))
        .collect();
    body.replace("{{scene}}", req.scene_text.trim_end())
        .replace("{{prompt}}", &req.prompt)
        .replace("{{n_frames}}", &req.n_frames.to_string())
        .replace("{{max_frame}}", &req.n_frames.saturating_sub(1).to_string())
        .replace("{{fps}}", &req.fps.to_string())
        .replace("{{n_joints}}", &req.n_joints.to_string())
        .replace("{{joint_names}}", &req.joint_names.join(", "))
}

/// [`build_instruction`] with a size check.
pub fn build_instruction_within(
    req: &PlannerRequest,
    budget: usize,
) -> Result<String, PlannerError> {
    let text = build_instruction(req);
    if text.len() > budget {
        return Err(PlannerError::Budget {
            size: text.len(),
            budget,
        });
    }
    Ok(text)
}

/// Appended to the instruction when a response could not be parsed.
pub fn correction_message(instruction: &str, error: &PlannerError) -> String {
    format!(
        "{instruction}\nYour previous reply could not be used ({error}). \
         Reply again with one ```json block in exactly the requested format.\n"
    )
}

fn fenced_blocks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
        let lang = after[..body_start].trim();
        let body = &after[body_start..];
        let Some(end) = body.find("```") else { break };
        if lang.is_empty() || lang.eq_ignore_ascii_case("json") {
            out.push(&body[..end]);
        }
        rest = &body[end + 3..];
    }
    out
}

/// Balanced `{…}` spans starting at every open brace, skipping braces inside
/// JSON strings.
fn brace_spans(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'{' {
            i += 1;
            continue;
        }
        let (mut depth, mut in_str, mut esc) = (0usize, false, false);
        let mut end = None;
        for (j, &b) in bytes.iter().enumerate().skip(i) {
            if in_str {
                match (esc, b) {
                    (true, _) => esc = false,
                    (false, b'\\') => esc = true,
                    (false, b'"') => in_str = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(j);
                        break;
                    }
                }
                _ => {}
            }
        }
        if let Some(j) = end {
            out.push(&text[i..=j]);
        }
        i += 1;
    }
    out
}

/// First JSON object in the text that carries a `frames` key: fenced blocks
/// are tried before bare brace spans.
fn extract_plan_json(text: &str) -> Option<Value> {
    let candidates = fenced_blocks(text)
        .into_iter()
        .flat_map(|b| std::iter::once(b).chain(brace_spans(b)))
        .chain(brace_spans(text));
    for c in candidates {
        if let Ok(v @ Value::Object(_)) = serde_json::from_str::<Value>(c.trim()) {
            if v.get("frames").is_some() {
                return Some(v);
            }
        }
    }
    None
}

/// Parse a planner response into a plan. Repeated (frame, joint) entries keep
/// the last value.
pub fn parse_plan(
    response: &str,
    n_frames: usize,
    joint_names: &[String],
    fps: f64,
) -> Result<PartialSkeletonPlan, PlannerError> {
    let v = extract_plan_json(response).ok_or(PlannerError::NoJsonBlock)?;
    let frames = v["frames"]
        .as_array()
        .ok_or_else(|| PlannerError::Schema("'frames' must be an array".into()))?;
    let j = joint_names.len();
    let mut data = Array3::zeros((n_frames, j, 3));
    let mut mask = ActivationMask::zeros(n_frames, j);
    for (i, fr) in frames.iter().enumerate() {
        let obj = fr
            .as_object()
            .ok_or_else(|| PlannerError::Schema(format!("frames[{i}] is not an object")))?;
        let t = obj
            .get("t")
            .and_then(|t| {
                t.as_i64()
                    .or_else(|| t.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64))
            })
            .ok_or_else(|| PlannerError::Schema(format!("frames[{i}].t must be an integer")))?;
        if t < 0 || t as usize >= n_frames {
            return Err(PlannerError::FrameOutOfRange { t, n_frames });
        }
        let joints = obj
            .get("joints")
            .and_then(Value::as_object)
            .ok_or_else(|| PlannerError::Schema(format!("frames[{i}].joints must be an object")))?;
        for (name, p) in joints {
            let jj = joint_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| PlannerError::UnknownJoint(name.clone()))?;
            let xyz: Vec<f64> = p
                .as_array()
                .filter(|a| a.len() == 3)
                .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
                .filter(|a| a.iter().all(|x| x.is_finite()))
                .ok_or_else(|| {
                    PlannerError::Schema(format!("frames[{i}].joints.{name} must be three numbers"))
                })?;
            for c in 0..3 {
                data[[t as usize, jj, c]] = xyz[c];
            }
            mask.set(t as usize, jj, true);
        }
    }
    if mask.is_empty() {
        return Err(PlannerError::EmptyPlan);
    }
    Ok(PartialSkeletonPlan::new(
        SkeletonSequence::new(data, fps)?,
        mask,
    )?)
}

#[derive(Serialize)]
struct PlanFrameOut<'a> {
    t: usize,
    joints: BTreeMap<&'a str, [f64; 3]>,
}

#[derive(Serialize)]
struct PlanOut<'a> {
    frames: Vec<PlanFrameOut<'a>>,
}

/// Canonical writer for the plan schema: frames ascending, joints by name.
pub fn render_plan(plan: &PartialSkeletonPlan, joint_names: &[String]) -> String {
    let mut frames = Vec::new();
    for f in 0..plan.n_frames() {
        let joints: BTreeMap<&str, [f64; 3]> = (0..plan.n_joints())
            .filter(|&j| plan.mask().get(f, j))
            .map(|j| (joint_names[j].as_str(), plan.skeleton().joint(f, j)))
            .collect();
        if !joints.is_empty() {
            frames.push(PlanFrameOut { t: f, joints });
        }
    }
    serde_json::to_string(&PlanOut { frames }).expect("plan serializes")
}

/// Reject plans that wander far outside the room.
pub fn check_plan_bounds(
    plan: &PartialSkeletonPlan,
    scene: &Scene3D,
    joint_names: &[String],
) -> Result<(), PlannerError> {
    let volume = scene.bounds().expanded(PLAN_BOUNDS_MARGIN);
    for (t, j) in plan.mask().active() {
        if !volume.contains(plan.skeleton().joint(t, j)) {
            return Err(PlannerError::OutOfBounds {
                t,
                joint: joint_names[j].clone(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("timed out")]
    Timeout,
}

/// A text-completion endpoint.
pub trait PlannerClient: Send + Sync {
    fn complete(&self, instruction: &str) -> Result<String, ClientError>;
}

/// Replays recorded responses in order, without any network traffic.
#[derive(Debug)]
pub struct ScriptedClient {
    responses: Vec<String>,
    next: Mutex<usize>,
}

impl ScriptedClient {
    pub fn new(responses: Vec<String>) -> Self {
        Self {
            responses,
            next: Mutex::new(0),
        }
    }

    pub fn responses(&self) -> &[String] {
        &self.responses
    }
}

impl PlannerClient for ScriptedClient {
    fn complete(&self, _instruction: &str) -> Result<String, ClientError> {
        let mut i = self.next.lock().expect("scripted client lock");
        let r = self
            .responses
            .get(*i)
            .cloned()
            .ok_or_else(|| ClientError::Transport("no recorded responses left".into()));
        *i += 1;
        r
    }
}

/// Chat-completion endpoint over HTTP. The API key is read from the
/// environment only.
#[derive(Debug, Clone)]
pub struct HttpPlannerClient {
    base_url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
}

impl HttpPlannerClient {
    pub fn new(
        base_url: &str,
        model: &str,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, PlannerError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| PlannerError::Config(e.to_string()))?;
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            client,
        })
    }

    /// Reads the base URL, model, and optional key from the environment.
    pub fn from_env(timeout: Duration) -> Result<Self, PlannerError> {
        let base = std::env::var(ENV_BASE_URL)
            .map_err(|_| PlannerError::Config(format!("{ENV_BASE_URL} is not set")))?;
        let model = std::env::var(ENV_MODEL)
            .map_err(|_| PlannerError::Config(format!("{ENV_MODEL} is not set")))?;
        let key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        Self::new(&base, &model, key, timeout)
    }
}

impl PlannerClient for HttpPlannerClient {
    fn complete(&self, instruction: &str) -> Result<String, ClientError> {
        let body = ChatRequest {
            model: &self.model,
            messages: vec![ChatMessage {
                role: "user",
                content: instruction,
            }],
            temperature: 0.0,
        };
        let mut req = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .json(&body);
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let classify = |e: reqwest::Error| {
            if e.is_timeout() {
                ClientError::Timeout
            } else {
                ClientError::Transport(e.to_string())
            }
        };
        let resp = req.send().map_err(classify)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ClientError::Transport(format!("HTTP {status}")));
        }
        let v: Value = resp.json().map_err(classify)?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| {
                ClientError::Transport("response lacks choices[0].message.content".into())
            })
    }
}

/// Up to `max_retries + 1` attempts; returns the first completion.
pub fn query_planner(
    client: &dyn PlannerClient,
    instruction: &str,
    max_retries: usize,
) -> Result<String, PlannerError> {
    let attempts = max_retries + 1;
    let mut all_timeouts = true;
    let mut last = String::new();
    for attempt in 1..=attempts {
        match client.complete(instruction) {
            Ok(r) => return Ok(r),
            Err(e) => {
                log::warn!("planner attempt {attempt}/{attempts} failed: {e}");
                all_timeouts &= e == ClientError::Timeout;
                last = e.to_string();
            }
        }
    }
    if all_timeouts {
        Err(PlannerError::Timeout { attempts })
    } else {
        Err(PlannerError::Transport { attempts, last })
    }
}

/// Outcome of a planning round trip.
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub plan: PartialSkeletonPlan,
    /// Every raw response received, in order.
    pub responses: Vec<String>,
}

/// Query, parse, and re-query with a correction message when the response is
/// unusable. At most `max_retries + 1` parse attempts.
pub fn plan_with_requery(
    client: &dyn PlannerClient,
    req: &PlannerRequest,
    scene: &Scene3D,
    max_retries: usize,
    budget: usize,
) -> Result<PlanOutcome, PlannerError> {
    req.validate()?;
    let base = build_instruction_within(req, budget)?;
    let mut instruction = base.clone();
    let mut responses = Vec::new();
    let mut last = PlannerError::NoJsonBlock;
    for _ in 0..=max_retries {
        let text = query_planner(client, &instruction, max_retries)?;
        responses.push(text.clone());
        let parsed = parse_plan(&text, req.n_frames, &req.joint_names, req.fps)
            .and_then(|p| check_plan_bounds(&p, scene, &req.joint_names).map(|_| p));
        match parsed {
            Ok(plan) => return Ok(PlanOutcome { plan, responses }),
            Err(e) => {
                log::warn!("planner response rejected: {e}");
                instruction = correction_message(&base, &e);
                last = e;
            }
        }
    }
    Err(PlannerError::Unparseable {
        attempts: max_retries + 1,
        last: Box::new(last),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    WalkTo,
    SitOn,
    StandUp,
    LieOn,
}

impl Action {
    /// Whether the person is meant to touch the target box.
    pub fn contacts_target(self) -> bool {
        !matches!(self, Action::WalkTo)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intent {
    pub action: Action,
    /// Words after the action phrase, articles removed.
    pub target: String,
}

const ACTION_PHRASES: &[(&str, Action)] = &[
    ("stand up", Action::StandUp),
    ("get up", Action::StandUp),
    ("sit down", Action::SitOn),
    ("sit", Action::SitOn),
    ("lie down", Action::LieOn),
    ("lie", Action::LieOn),
    ("lay", Action::LieOn),
    ("walk", Action::WalkTo),
    ("go", Action::WalkTo),
    ("move", Action::WalkTo),
    ("approach", Action::WalkTo),
];

const FILLER: &[&str] = &[
    "to", "towards", "toward", "on", "onto", "in", "into", "from", "off", "of", "the", "a", "an",
    "up", "down", "over", "and", "then", "at", "by", "near",
];

fn words(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric() && c != '_' && c != '-')
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Keyword intent parser over walk / sit / stand up / lie.
pub fn parse_intent(prompt: &str) -> Result<Intent, PlannerError> {
    let w = words(prompt);
    let mut found = None;
    'outer: for i in 0..w.len() {
        for (phrase, action) in ACTION_PHRASES {
            let p: Vec<&str> = phrase.split(' ').collect();
            let hit = w.len() >= i + p.len()
                && p.iter().zip(&w[i..]).all(|(a, b)| {
                    b.as_str() == *a
                        || (b.starts_with(*a)
                            && matches!(&b[a.len()..], "s" | "ing" | "ed" | "ks" | "ting"))
                });
            if hit {
                found = Some((i + p.len(), *action));
                break 'outer;
            }
        }
    }
    let (after, action) = found.ok_or_else(|| PlannerError::UnknownAction(prompt.to_string()))?;
    let target: Vec<&str> = w[after..]
        .iter()
        .map(String::as_str)
        .skip_while(|t| FILLER.contains(t))
        .collect();
    if target.is_empty() {
        return Err(PlannerError::NoTarget(prompt.to_string()));
    }
    Ok(Intent {
        action,
        target: target.join(" "),
    })
}

/// The scene object an intent refers to: the label whose words appear
/// earliest (longest on ties) in the target phrase.
pub fn resolve_target<'s>(
    scene: &'s Scene3D,
    intent: &Intent,
) -> Result<&'s ObjectBox, PlannerError> {
    let tw = words(&intent.target);
    let mut best: Option<(usize, usize, &ObjectBox)> = None;
    for o in &scene.objects {
        let lw = words(&o.label);
        if lw.is_empty() || lw.len() > tw.len() {
            continue;
        }
        if let Some(pos) = (0..=tw.len() - lw.len()).find(|&i| tw[i..i + lw.len()] == lw[..]) {
            let better = match best {
                None => true,
                Some((bp, bl, _)) => pos < bp || (pos == bp && lw.len() > bl),
            };
            if better {
                best = Some((pos, lw.len(), o));
            }
        }
    }
    best.map(|b| b.2)
        .ok_or_else(|| PlannerError::TargetAbsent(intent.target.clone()))
}

/// Tunables of the rule-based planner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RulePlannerConfig {
    /// Walking start on the floor; searched for when absent.
    pub start: Option<[f64; 2]>,
    pub speed: f64,
    /// Gap between the goal point and the target's footprint.
    pub goal_clearance: f64,
    /// Minimum horizontal distance from the body to any obstacle.
    pub body_radius: f64,
    /// Preferred start distance from the target when searching.
    pub start_distance: f64,
}

impl Default for RulePlannerConfig {
    fn default() -> Self {
        Self {
            start: None,
            speed: 1.2,
            goal_clearance: 0.25,
            body_radius: 0.2,
            start_distance: 3.0,
        }
    }
}

fn footprint_distance(b: &Aabb, p: [f64; 2]) -> f64 {
    let c = b.footprint_closest(p[0], p[1]);
    ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt()
}

/// Objects tall enough to block walking.
fn obstacles<'a>(
    scene: &'a Scene3D,
    skip: Option<&'a ObjectBox>,
) -> impl Iterator<Item = &'a Aabb> {
    scene
        .objects
        .iter()
        .filter(move |o| skip.is_none_or(|s| !std::ptr::eq(*o, s)))
        .filter(move |o| o.aabb.max[2] > scene.floor_z + 0.05)
        .map(|o| &o.aabb)
}

fn is_free(scene: &Scene3D, p: [f64; 2], radius: f64, skip: Option<&ObjectBox>) -> bool {
    obstacles(scene, skip).all(|b| footprint_distance(b, p) >= radius)
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Point next to the target: off the side facing `from`, else the free
/// perimeter point closest to `from`.
fn approach_point(
    scene: &Scene3D,
    target: &ObjectBox,
    from: [f64; 2],
    cfg: &RulePlannerConfig,
) -> Result<[f64; 2], PlannerError> {
    let b = &target.aabb;
    let c = b.footprint_closest(from[0], from[1]);
    let d = dist2(from, c);
    if d > 1e-9 {
        let g = [
            c[0] + cfg.goal_clearance * (from[0] - c[0]) / d,
            c[1] + cfg.goal_clearance * (from[1] - c[1]) / d,
        ];
        if is_free(scene, g, cfg.body_radius, Some(target)) {
            return Ok(g);
        }
    }
    let e = b.expanded(cfg.goal_clearance);
    let (w, h) = (e.max[0] - e.min[0], e.max[1] - e.min[1]);
    let steps = ((2.0 * (w + h)) / 0.05).ceil() as usize;
    (0..steps)
        .map(|i| {
            let mut s = i as f64 * 0.05;
            if s < w {
                return [e.min[0] + s, e.min[1]];
            }
            s -= w;
            if s < h {
                return [e.max[0], e.min[1] + s];
            }
            s -= h;
            if s < w {
                return [e.max[0] - s, e.max[1]];
            }
            [e.min[0], e.max[1] - (s - w)]
        })
        .filter(|p| is_free(scene, *p, cfg.body_radius, Some(target)))
        .min_by(|a, b| dist2(*a, from).total_cmp(&dist2(*b, from)))
        .ok_or(PlannerError::NoFreeSpace("the goal"))
}

fn search_start(
    scene: &Scene3D,
    target: &ObjectBox,
    cfg: &RulePlannerConfig,
) -> Result<[f64; 2], PlannerError> {
    let area = scene.bounds().expanded(0.5);
    let step = 0.1;
    let nx = ((area.max[0] - area.min[0]) / step).floor() as usize;
    let ny = ((area.max[1] - area.min[1]) / step).floor() as usize;
    let mut best: Option<([f64; 2], f64)> = None;
    for iy in 0..=ny {
        for ix in 0..=nx {
            let p = [
                area.min[0] + ix as f64 * step,
                area.min[1] + iy as f64 * step,
            ];
            if !is_free(scene, p, cfg.body_radius + 0.15, None) {
                continue;
            }
            let score = (footprint_distance(&target.aabb, p) - cfg.start_distance).abs();
            if best.is_none_or(|(_, s)| score < s - 1e-12) {
                best = Some((p, score));
            }
        }
    }
    best.map(|b| b.0)
        .ok_or(PlannerError::NoFreeSpace("the start"))
}

/// Rest-pose joint `j` placed relative to `pelvis`, turned to face `heading`.
fn posed_joint(j: usize, pelvis: [f64; 3], heading: [f64; 2]) -> [f64; 3] {
    let o = REST_OFFSETS[j];
    let right = [heading[1], -heading[0]];
    [
        pelvis[0] + o[0] * right[0] + o[1] * heading[0],
        pelvis[1] + o[0] * right[1] + o[1] * heading[1],
        pelvis[2] + o[2],
    ]
}

fn unit(v: [f64; 2]) -> Option<[f64; 2]> {
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    (n > 1e-9).then(|| [v[0] / n, v[1] / n])
}

struct PlanBuilder {
    data: Array3<f64>,
    mask: ActivationMask,
}

impl PlanBuilder {
    fn new(n: usize) -> Self {
        Self {
            data: Array3::zeros((n, crate::motion::DEFAULT_JOINTS, 3)),
            mask: ActivationMask::zeros(n, crate::motion::DEFAULT_JOINTS),
        }
    }

    fn set(&mut self, t: usize, joint: &str, p: [f64; 3]) {
        let j = joint_index(joint).expect("known joint");
        for (c, v) in p.into_iter().enumerate() {
            self.data[[t, j, c]] = v;
        }
        self.mask.set(t, j, true);
    }

    fn set_posed(&mut self, t: usize, joints: &[&str], pelvis: [f64; 3], heading: [f64; 2]) {
        for name in joints {
            let j = joint_index(name).expect("known joint");
            self.set(t, name, posed_joint(j, pelvis, heading));
        }
    }

    fn finish(self, fps: f64) -> Result<PartialSkeletonPlan, PlannerError> {
        Ok(PartialSkeletonPlan::new(
            SkeletonSequence::new(self.data, fps)?,
            self.mask,
        )?)
    }
}

/// Straight-line pelvis keyframes at walking speed, frames `first..first+count`.
fn walk(
    b: &mut PlanBuilder,
    first: usize,
    count: usize,
    from: [f64; 2],
    to: [f64; 2],
    height: f64,
) {
    for i in 0..count {
        let s = if count == 1 {
            1.0
        } else {
            i as f64 / (count - 1) as f64
        };
        let p = [
            from[0] + s * (to[0] - from[0]),
            from[1] + s * (to[1] - from[1]),
            height,
        ];
        b.set(first + i, "pelvis", p);
    }
}

/// Frames needed to cover `distance` at `speed`. Values within 1e-9 of an
/// integer are not rounded up.
pub fn walking_frames(distance: f64, speed: f64, fps: f64) -> usize {
    ((distance / speed * fps - 1e-9).ceil() as usize).max(1)
}

fn seat_pelvis(scene: &Scene3D, target: &ObjectBox) -> [f64; 3] {
    let c = target.aabb.center();
    let top = target.aabb.max[2].min(scene.floor_z + 0.5);
    [c[0], c[1], top + 0.1]
}

/// Deterministic stand-in for the language-model planner, working through
/// target lookup, trajectory, initial orientation, and frame count. Uses the
/// default 22-joint skeleton.
pub fn rule_based_plan(
    scene: &Scene3D,
    intent: &Intent,
    n_frames: usize,
    fps: f64,
    cfg: &RulePlannerConfig,
) -> Result<PartialSkeletonPlan, PlannerError> {
    if n_frames == 0 || !(fps > 0.0 && fps.is_finite()) {
        return Err(PlannerError::Config(
            "n_frames and fps must be positive".into(),
        ));
    }
    let target = resolve_target(scene, intent)?;
    let stand_z = scene.floor_z + STANDING_PELVIS_HEIGHT;
    let transition = (fps.round() as usize).max(1);
    let mut b = PlanBuilder::new(n_frames);

    match intent.action {
        Action::StandUp => {
            let c = target.aabb.center();
            let probe = [c[0], c[1] - 10.0];
            let goal = approach_point(scene, target, probe, cfg)?;
            let heading = unit([goal[0] - c[0], goal[1] - c[1]]).unwrap_or([0.0, 1.0]);
            let seat = seat_pelvis(scene, target);
            b.set_posed(0, &["pelvis", "left_hip", "right_hip"], seat, heading);
            let last = transition.min(n_frames - 1);
            b.set_posed(
                last,
                &["pelvis", "left_hip", "right_hip"],
                [goal[0], goal[1], stand_z],
                heading,
            );
        }
        action => {
            let start = match cfg.start {
                Some(s) => s,
                None => search_start(scene, target, cfg)?,
            };
            let goal = approach_point(scene, target, start, cfg)?;
            let heading = unit([goal[0] - start[0], goal[1] - start[1]]).unwrap_or_else(|| {
                let c = target.aabb.center();
                unit([c[0] - start[0], c[1] - start[1]]).unwrap_or([0.0, 1.0])
            });
            let budget = if action == Action::WalkTo {
                n_frames
            } else {
                n_frames.saturating_sub(transition).max(1)
            };
            let count = walking_frames(dist2(start, goal), cfg.speed, fps).min(budget);
            walk(&mut b, 0, count, start, goal, stand_z);
            b.set_posed(
                0,
                &["left_hip", "right_hip"],
                [start[0], start[1], stand_z],
                heading,
            );

            let end = (count - 1 + transition).min(n_frames - 1);
            if end > count - 1 {
                let c = target.aabb.center();
                let out = unit([goal[0] - c[0], goal[1] - c[1]]).unwrap_or(heading);
                match action {
                    Action::SitOn => {
                        let seat = seat_pelvis(scene, target);
                        b.set_posed(
                            end,
                            &["pelvis", "left_hip", "right_hip", "spine3"],
                            seat,
                            out,
                        );
                    }
                    Action::LieOn => {
                        let a = &target.aabb;
                        let along = if a.max[0] - a.min[0] >= a.max[1] - a.min[1] {
                            [1.0, 0.0]
                        } else {
                            [0.0, 1.0]
                        };
                        let pelvis = [c[0], c[1], a.max[2] + 0.1];
                        b.set(end, "pelvis", pelvis);
                        for (name, reach) in [("spine3", 0.3), ("head", 0.6)] {
                            b.set(
                                end,
                                name,
                                [
                                    pelvis[0] + reach * along[0],
                                    pelvis[1] + reach * along[1],
                                    pelvis[2],
                                ],
                            );
                        }
                    }
                    _ => {}
                }
            }
        }
    }
    b.finish(fps)
}
