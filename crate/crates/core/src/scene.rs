//! Labeled axis-aligned boxes, their text form, and layout providers.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Camera count used when none is configured.
pub const DEFAULT_CAMERAS: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("box '{label}': {axis}_min {min} exceeds {axis}_max {max}")]
    Inverted {
        label: String,
        axis: char,
        min: f64,
        max: f64,
    },
    #[error("box '{0}' has a non-finite coordinate")]
    NonFinite(String),
    #[error(
        "invalid label '{0}': labels must be non-empty, trimmed, single-line, without ':' or '#'"
    )]
    Label(String),
    #[error("invalid scene name '{0}'")]
    Name(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("camera count must be at least 1")]
    NoCameras,
    #[error("asset lists {available} views but {requested} cameras were requested")]
    TooFewViews { available: usize, requested: usize },
    #[error("scene asset: {0}")]
    Asset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 6]", into = "[f64; 6]")]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl TryFrom<[f64; 6]> for Aabb {
    type Error = SceneError;

    fn try_from(v: [f64; 6]) -> Result<Self, Self::Error> {
        Aabb::from_extents(v, "")
    }
}

impl From<Aabb> for [f64; 6] {
    fn from(b: Aabb) -> Self {
        b.extents()
    }
}

impl Aabb {
    /// From `[x_min, x_max, y_min, y_max, z_min, z_max]`.
    pub fn from_extents(v: [f64; 6], label: &str) -> Result<Self, SceneError> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(SceneError::NonFinite(label.to_string()));
        }
        for (i, axis) in ['x', 'y', 'z'].into_iter().enumerate() {
            let (min, max) = (v[2 * i], v[2 * i + 1]);
            if min > max {
                return Err(SceneError::Inverted {
                    label: label.to_string(),
                    axis,
                    min,
                    max,
                });
            }
        }
        Ok(Self {
            min: [v[0], v[2], v[4]],
            max: [v[1], v[3], v[5]],
        })
    }

    pub fn extents(&self) -> [f64; 6] {
        [
            self.min[0],
            self.max[0],
            self.min[1],
            self.max[1],
            self.min[2],
            self.max[2],
        ]
    }

    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|i| 0.5 * (self.min[i] + self.max[i]))
    }

    pub fn half_extents(&self) -> [f64; 3] {
        std::array::from_fn(|i| 0.5 * (self.max[i] - self.min[i]))
    }

    /// Negative inside, zero on the surface, Euclidean distance outside.
    pub fn signed_distance(&self, p: [f64; 3]) -> f64 {
        let c = self.center();
        let h = self.half_extents();
        let q: [f64; 3] = std::array::from_fn(|i| (p[i] - c[i]).abs() - h[i]);
        let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
        let inside = q[0].max(q[1]).max(q[2]).min(0.0);
        outside + inside
    }

    /// Closest point of the box's x-y footprint to `(x, y)`.
    pub fn footprint_closest(&self, x: f64, y: f64) -> [f64; 2] {
        [
            x.clamp(self.min[0], self.max[0]),
            y.clamp(self.min[1], self.max[1]),
        ]
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: std::array::from_fn(|i| self.min[i].min(other.min[i])),
            max: std::array::from_fn(|i| self.max[i].max(other.max[i])),
        }
    }

    pub fn expanded(&self, margin: f64) -> Aabb {
        Aabb {
            min: self.min.map(|v| v - margin),
            max: self.max.map(|v| v + margin),
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Signed distance from `point` to `bx`'s box.
pub fn signed_distance_to_box(point: [f64; 3], bx: &ObjectBox) -> f64 {
    bx.aabb.signed_distance(point)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectBox {
    pub label: String,
    pub aabb: Aabb,
}

fn valid_label(label: &str) -> bool {
    !label.is_empty() && label.trim() == label && !label.contains([':', '#', '\n', '\r'])
}

impl ObjectBox {
    pub fn new(label: &str, extents: [f64; 6]) -> Result<Self, SceneError> {
        if !valid_label(label) {
            return Err(SceneError::Label(label.to_string()));
        }
        Ok(Self {
            label: label.to_string(),
            aabb: Aabb::from_extents(extents, label)?,
        })
    }
}

/// Rounds to millimeters and folds `-0` into `0`.
pub fn quantize(v: f64) -> f64 {
    let q = (v * 1000.0).round() / 1000.0;
    if q == 0.0 {
        0.0
    } else {
        q
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene3D {
    pub name: String,
    pub objects: Vec<ObjectBox>,
    #[serde(default)]
    pub floor_z: f64,
}

impl Scene3D {
    pub fn new(name: &str, objects: Vec<ObjectBox>, floor_z: f64) -> Result<Self, SceneError> {
        let s = Self {
            name: name.to_string(),
            objects,
            floor_z,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.name.contains(['\n', '\r']) || self.name.contains(" | ") {
            return Err(SceneError::Name(self.name.clone()));
        }
        if !self.floor_z.is_finite() {
            return Err(SceneError::NonFinite("floor".into()));
        }
        for o in &self.objects {
            if !valid_label(&o.label) {
                return Err(SceneError::Label(o.label.clone()));
            }
            Aabb::from_extents(o.aabb.extents(), &o.label)?;
        }
        Ok(())
    }

    /// The scene as it survives serialization.
    pub fn quantized(&self) -> Scene3D {
        Scene3D {
            name: self.name.clone(),
            objects: self
                .objects
                .iter()
                .map(|o| ObjectBox {
                    label: o.label.clone(),
                    aabb: Aabb::from_extents(o.aabb.extents().map(quantize), &o.label)
                        .expect("rounding preserves ordering"),
                })
                .collect(),
            floor_z: quantize(self.floor_z),
        }
    }

    /// First object carrying `label`.
    pub fn find(&self, label: &str) -> Option<&ObjectBox> {
        self.objects.iter().find(|o| o.label == label)
    }

    /// Box enclosing every object and the floor point at the origin.
    pub fn bounds(&self) -> Aabb {
        let floor = Aabb {
            min: [0.0, 0.0, self.floor_z],
            max: [0.0, 0.0, self.floor_z],
        };
        self.objects.iter().fold(floor, |acc, o| acc.union(&o.aabb))
    }
}

const HEADER_PREFIX: &str = "# scene: ";
const HEADER_UNITS: &str = " | units: meters | floor_z: ";

fn fmt3(v: f64) -> String {
    format!("{:.3}", quantize(v))
}

/// Labels that occur more than once get ` #1`, ` #2`, … in list order.
fn display_labels(scene: &Scene3D) -> Vec<String> {
    let mut totals: HashMap<&str, usize> = HashMap::new();
    for o in &scene.objects {
        *totals.entry(&o.label).or_default() += 1;
    }
    let mut seen: HashMap<&str, usize> = HashMap::new();
    scene
        .objects
        .iter()
        .map(|o| {
            if totals[o.label.as_str()] > 1 {
                let i = seen.entry(&o.label).or_default();
                *i += 1;
                format!("{} #{}", o.label, i)
            } else {
                o.label.clone()
            }
        })
        .collect()
}

/// Header line, then `label: [x_min, x_max, y_min, y_max, z_min, z_max]`
/// per object with millimeter precision.
pub fn serialize_scene(scene: &Scene3D) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{HEADER_PREFIX}{}{HEADER_UNITS}{}",
        scene.name,
        fmt3(scene.floor_z)
    );
    for (label, o) in display_labels(scene).iter().zip(&scene.objects) {
        let v = o.aabb.extents().map(fmt3);
        let _ = writeln!(out, "{label}: [{}]", v.join(", "));
    }
    out
}

fn strip_instance_suffix(label: &str) -> &str {
    match label.rsplit_once(" #") {
        Some((base, n)) if !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()) => base,
        _ => label,
    }
}

pub fn parse_scene_description(text: &str) -> Result<Scene3D, SceneError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or(SceneError::Parse {
        line: 1,
        msg: "missing header".into(),
    })?;
    let rest = header
        .strip_prefix(HEADER_PREFIX)
        .ok_or(SceneError::Parse {
            line: 1,
            msg: format!("header must start with '{HEADER_PREFIX}'"),
        })?;
    let (name, floor) = rest.rsplit_once(HEADER_UNITS).ok_or(SceneError::Parse {
        line: 1,
        msg: "header lacks units and floor height".into(),
    })?;
    let floor_z: f64 = floor.trim().parse().map_err(|_| SceneError::Parse {
        line: 1,
        msg: format!("bad floor height '{floor}'"),
    })?;

    let mut objects = Vec::new();
    for (line, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        let err = |msg: String| SceneError::Parse { line, msg };
        let (label, values) = raw
            .split_once(':')
            .ok_or_else(|| err("expected 'label: [six values]'".into()))?;
        let label = strip_instance_suffix(label.trim());
        let inner = values
            .trim()
            .strip_prefix('[')
            .and_then(|v| v.strip_suffix(']'))
            .ok_or_else(|| err("values must be enclosed in brackets".into()))?;
        let nums = inner
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| err(format!("bad number: {e}")))?;
        let ext: [f64; 6] = nums
            .as_slice()
            .try_into()
            .map_err(|_| err(format!("expected 6 values, found {}", nums.len())))?;
        objects.push(ObjectBox::new(label, ext)?);
    }
    Scene3D::new(name, objects, floor_z)
}

/// Annotated scene file: ground-truth boxes plus the labels each camera sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneAsset {
    pub name: String,
    #[serde(default)]
    pub floor_z: f64,
    pub objects: Vec<ObjectBox>,
    /// Per-camera visible labels. Absent means every camera sees everything.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub views: Option<Vec<Vec<String>>>,
}

impl SceneAsset {
    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let a: SceneAsset =
            serde_json::from_str(text).map_err(|e| SceneError::Asset(e.to_string()))?;
        Scene3D::new(&a.name, a.objects.clone(), a.floor_z)?;
        Ok(a)
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SceneError::Asset(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("asset serializes")
    }
}

/// Turns a raw scene asset into labeled boxes as seen from `cameras` views.
pub trait LayoutProvider: Send + Sync {
    fn derive(&self, asset: &SceneAsset, cameras: usize) -> Result<Scene3D, SceneError>;
}

/// Stands in for recognition and segmentation: unions the annotated per-view
/// label sets of the first `cameras` views and copies the annotated boxes.
/// A view entry names either a label (all instances) or `label #i`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedLayoutProvider;

impl LayoutProvider for ScriptedLayoutProvider {
    fn derive(&self, asset: &SceneAsset, cameras: usize) -> Result<Scene3D, SceneError> {
        if cameras < 1 {
            return Err(SceneError::NoCameras);
        }
        let full = Scene3D::new(&asset.name, asset.objects.clone(), asset.floor_z)?;
        let Some(views) = &asset.views else {
            return Ok(full);
        };
        if views.len() < cameras {
            return Err(SceneError::TooFewViews {
                available: views.len(),
                requested: cameras,
            });
        }
        let seen: HashSet<&str> = views[..cameras]
            .iter()
            .flatten()
            .map(String::as_str)
            .collect();
        let numbered = display_labels(&full);
        let objects = full
            .objects
            .into_iter()
            .zip(numbered)
            .filter(|(o, n)| seen.contains(o.label.as_str()) || seen.contains(n.as_str()))
            .map(|(o, _)| o)
            .collect();
        Scene3D::new(&asset.name, objects, asset.floor_z)
    }
}

/// Load an asset file and run the scripted provider on it.
pub fn scripted_layout_provider(path: &Path, cameras: usize) -> Result<Scene3D, SceneError> {
    ScriptedLayoutProvider.derive(&SceneAsset::load(path)?, cameras)
}
