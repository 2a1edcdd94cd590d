//! Motion and skeleton sequences, activation masks, and the motion-to-skeleton
//! projection.
//!
//! Coordinates are meters with x right, y forward, z up. A [`MotionSequence`]
//! is whatever feature layout the denoiser works in; a registered
//! [`SkeletonProjection`] turns it into absolute joint positions.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of joints in the default skeleton.
pub const DEFAULT_JOINTS: usize = 22;
/// Default sequence length in frames.
pub const DEFAULT_FRAMES: usize = 196;
/// Default frame rate.
pub const DEFAULT_FPS: f64 = 20.0;

/// Joint order of the default 22-joint skeleton. Pelvis is always index 0.
pub const JOINT_NAMES: [&str; DEFAULT_JOINTS] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
];

/// Standing rest pose, pelvis-relative, facing +y.
pub const REST_OFFSETS: [[f64; 3]; DEFAULT_JOINTS] = [
    [0.0, 0.0, 0.0],
    [-0.09, 0.0, -0.09],
    [0.09, 0.0, -0.09],
    [0.0, -0.01, 0.11],
    [-0.10, 0.01, -0.47],
    [0.10, 0.01, -0.47],
    [0.0, -0.01, 0.24],
    [-0.10, -0.02, -0.86],
    [0.10, -0.02, -0.86],
    [0.0, -0.01, 0.30],
    [-0.11, 0.10, -0.90],
    [0.11, 0.10, -0.90],
    [0.0, 0.0, 0.52],
    [-0.08, 0.0, 0.42],
    [0.08, 0.0, 0.42],
    [0.0, 0.03, 0.62],
    [-0.18, 0.0, 0.44],
    [0.18, 0.0, 0.44],
    [-0.22, 0.0, 0.17],
    [0.22, 0.0, 0.17],
    [-0.24, 0.02, -0.08],
    [0.24, 0.02, -0.08],
];

/// Pelvis height above the floor in the rest pose.
pub const STANDING_PELVIS_HEIGHT: f64 = 0.9;

pub fn joint_index(name: &str) -> Option<usize> {
    JOINT_NAMES.iter().position(|n| *n == name)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MotionError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("non-finite coordinate at {0}")]
    NonFinite(String),
    #[error("fps must be positive and finite, got {0}")]
    Fps(f64),
    #[error("activation mask has no active entries")]
    EmptyMask,
    #[error("layout {layout} expects feature width {expected}, got {got}")]
    Layout {
        layout: String,
        expected: usize,
        got: usize,
    },
    #[error("unknown motion layout '{0}'")]
    UnknownLayout(String),
    #[error("invalid motion file: {0}")]
    File(String),
}

fn check_fps(fps: f64) -> Result<(), MotionError> {
    if fps.is_finite() && fps > 0.0 {
        Ok(())
    } else {
        Err(MotionError::Fps(fps))
    }
}

/// N×J×3 absolute joint positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    data: Array3<f64>,
    fps: f64,
}

impl SkeletonSequence {
    pub fn new(data: Array3<f64>, fps: f64) -> Result<Self, MotionError> {
        check_fps(fps)?;
        let (n, j, c) = data.dim();
        if n == 0 || j == 0 || c != 3 {
            return Err(MotionError::Shape {
                expected: "N×J×3 with N,J ≥ 1".into(),
                got: format!("{n}×{j}×{c}"),
            });
        }
        if let Some((idx, _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(MotionError::NonFinite(format!("{idx:?}")));
        }
        Ok(Self { data, fps })
    }

    pub fn zeros(n_frames: usize, n_joints: usize, fps: f64) -> Result<Self, MotionError> {
        Self::new(Array3::zeros((n_frames, n_joints, 3)), fps)
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn n_frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn n_joints(&self) -> usize {
        self.data.dim().1
    }

    pub fn joint(&self, frame: usize, joint: usize) -> [f64; 3] {
        [
            self.data[[frame, joint, 0]],
            self.data[[frame, joint, 1]],
            self.data[[frame, joint, 2]],
        ]
    }

    /// Frames `start..=end`.
    pub fn frames(&self, start: usize, end: usize) -> Result<Self, MotionError> {
        if start > end || end >= self.n_frames() {
            return Err(MotionError::Shape {
                expected: format!("frame range within 0..{}", self.n_frames()),
                got: format!("{start}..={end}"),
            });
        }
        Self::new(
            self.data.slice(s![start..=end, .., ..]).to_owned(),
            self.fps,
        )
    }

    /// Iterator over every joint position, frame-major.
    pub fn points(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data
            .lanes(Axis(2))
            .into_iter()
            .map(|l| [l[0], l[1], l[2]])
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }
}

/// N×J binary mask of planner-constrained joint-frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationMask {
    bits: Array2<bool>,
}

impl ActivationMask {
    pub fn new(bits: Array2<bool>) -> Self {
        Self { bits }
    }

    pub fn zeros(n_frames: usize, n_joints: usize) -> Self {
        Self::new(Array2::from_elem((n_frames, n_joints), false))
    }

    pub fn ones(n_frames: usize, n_joints: usize) -> Self {
        Self::new(Array2::from_elem((n_frames, n_joints), true))
    }

    pub fn bits(&self) -> &Array2<bool> {
        &self.bits
    }

    pub fn dim(&self) -> (usize, usize) {
        self.bits.dim()
    }

    pub fn get(&self, frame: usize, joint: usize) -> bool {
        self.bits[[frame, joint]]
    }

    pub fn set(&mut self, frame: usize, joint: usize, on: bool) {
        self.bits[[frame, joint]] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Active (frame, joint) pairs, frame-major.
    pub fn active(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .indexed_iter()
            .filter(|(_, b)| **b)
            .map(|(idx, _)| idx)
    }

    /// First and last frame that contain an active joint.
    pub fn bounds(&self) -> Result<(usize, usize), MotionError> {
        let frame_active = |row: ArrayView2<bool>, n: usize| row.row(n).iter().any(|b| *b);
        let n = self.bits.nrows();
        let start = (0..n)
            .find(|&f| frame_active(self.bits.view(), f))
            .ok_or(MotionError::EmptyMask)?;
        let end = (0..n)
            .rev()
            .find(|&f| frame_active(self.bits.view(), f))
            .ok_or(MotionError::EmptyMask)?;
        Ok((start, end))
    }
}

/// Free-function form of [`ActivationMask::bounds`].
pub fn mask_bounds(mask: &ActivationMask) -> Result<(usize, usize), MotionError> {
    mask.bounds()
}

/// Active coordinates of `s`, frame-major then joint then x,y,z.
pub fn masked_select(s: &SkeletonSequence, mask: &ActivationMask) -> Result<Vec<f64>, MotionError> {
    if mask.dim() != (s.n_frames(), s.n_joints()) {
        return Err(MotionError::Shape {
            expected: format!("mask {}×{}", s.n_frames(), s.n_joints()),
            got: format!("{}×{}", mask.dim().0, mask.dim().1),
        });
    }
    if mask.is_empty() {
        return Err(MotionError::EmptyMask);
    }
    let mut out = Vec::with_capacity(3 * mask.count());
    for (n, j) in mask.active() {
        out.extend_from_slice(&s.joint(n, j));
    }
    Ok(out)
}

/// N×D motion features in the denoiser's representation.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    data: Array2<f64>,
    fps: f64,
}

impl MotionSequence {
    pub fn new(data: Array2<f64>, fps: f64) -> Result<Self, MotionError> {
        check_fps(fps)?;
        let (n, d) = data.dim();
        if n == 0 || d == 0 {
            return Err(MotionError::Shape {
                expected: "N×D with N,D ≥ 1".into(),
                got: format!("{n}×{d}"),
            });
        }
        if let Some((idx, _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(MotionError::NonFinite(format!("{idx:?}")));
        }
        Ok(Self { data, fps })
    }

    /// Skips the finiteness scan. Callers guarantee the shape and fps are valid.
    pub(crate) fn from_parts(data: Array2<f64>, fps: f64) -> Self {
        debug_assert!(fps > 0.0 && data.nrows() > 0 && data.ncols() > 0);
        Self { data, fps }
    }

    pub fn zeros(n_frames: usize, width: usize, fps: f64) -> Result<Self, MotionError> {
        Self::new(Array2::zeros((n_frames, width)), fps)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn n_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn frames(&self, start: usize, end: usize) -> Result<Self, MotionError> {
        if start > end || end >= self.n_frames() {
            return Err(MotionError::Shape {
                expected: format!("frame range within 0..{}", self.n_frames()),
                got: format!("{start}..={end}"),
            });
        }
        Ok(Self::from_parts(
            self.data.slice(s![start..=end, ..]).to_owned(),
            self.fps,
        ))
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A motion representation that can be mapped to absolute joint positions.
///
/// `pullback` is the transpose of the projection's Jacobian applied to a
/// skeleton-shaped cotangent; guidance uses it to carry gap gradients back
/// into feature space.
pub trait SkeletonProjection: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &str;
    fn n_joints(&self) -> usize;
    fn feature_width(&self) -> usize;

    fn project(&self, motion: &MotionSequence) -> Result<SkeletonSequence, MotionError>;

    fn pullback(
        &self,
        motion: &MotionSequence,
        cotangent: &Array3<f64>,
    ) -> Result<Array2<f64>, MotionError>;

    /// Inverse map, when the layout is invertible.
    fn lift(&self, _skeleton: &SkeletonSequence) -> Option<Result<MotionSequence, MotionError>> {
        None
    }

    fn check_width(&self, motion: &MotionSequence) -> Result<(), MotionError> {
        if motion.width() != self.feature_width() {
            return Err(MotionError::Layout {
                layout: self.name().to_string(),
                expected: self.feature_width(),
                got: motion.width(),
            });
        }
        Ok(())
    }
}

/// Features are raw joint coordinates: `D = 3J`, projection is a reshape.
#[derive(Debug, Clone)]
pub struct IdentityLayout {
    joints: usize,
}

impl IdentityLayout {
    pub fn new(joints: usize) -> Self {
        Self { joints }
    }
}

impl SkeletonProjection for IdentityLayout {
    fn name(&self) -> &str {
        "identity"
    }

    fn n_joints(&self) -> usize {
        self.joints
    }

    fn feature_width(&self) -> usize {
        3 * self.joints
    }

    fn project(&self, motion: &MotionSequence) -> Result<SkeletonSequence, MotionError> {
        self.check_width(motion)?;
        let n = motion.n_frames();
        let data = motion
            .data()
            .to_owned()
            .into_shape((n, self.joints, 3))
            .expect("row-major reshape of N×3J");
        Ok(SkeletonSequence {
            data,
            fps: motion.fps(),
        })
    }

    fn pullback(
        &self,
        motion: &MotionSequence,
        cotangent: &Array3<f64>,
    ) -> Result<Array2<f64>, MotionError> {
        self.check_width(motion)?;
        check_cotangent(motion, self.joints, cotangent)?;
        let n = motion.n_frames();
        Ok(cotangent
            .as_standard_layout()
            .to_owned()
            .into_shape((n, 3 * self.joints))
            .expect("row-major reshape of N×J×3"))
    }

    fn lift(&self, skeleton: &SkeletonSequence) -> Option<Result<MotionSequence, MotionError>> {
        if skeleton.n_joints() != self.joints {
            return Some(Err(MotionError::Layout {
                layout: self.name().to_string(),
                expected: self.joints,
                got: skeleton.n_joints(),
            }));
        }
        let n = skeleton.n_frames();
        let data = skeleton
            .data()
            .as_standard_layout()
            .to_owned()
            .into_shape((n, 3 * self.joints))
            .expect("row-major reshape of N×J×3");
        Some(Ok(MotionSequence::from_parts(data, skeleton.fps())))
    }
}

/// Features are the root (joint 0) trajectory followed by root-relative
/// offsets of joints 1..J: `D = 3J`, `joint_j = root + offset_j`.
#[derive(Debug, Clone)]
pub struct RootOffsetLayout {
    joints: usize,
}

impl RootOffsetLayout {
    pub fn new(joints: usize) -> Self {
        Self { joints }
    }
}

impl SkeletonProjection for RootOffsetLayout {
    fn name(&self) -> &str {
        "root-offset"
    }

    fn n_joints(&self) -> usize {
        self.joints
    }

    fn feature_width(&self) -> usize {
        3 * self.joints
    }

    fn project(&self, motion: &MotionSequence) -> Result<SkeletonSequence, MotionError> {
        self.check_width(motion)?;
        let n = motion.n_frames();
        let x = motion.data();
        let mut out = Array3::zeros((n, self.joints, 3));
        for f in 0..n {
            for c in 0..3 {
                let root = x[[f, c]];
                out[[f, 0, c]] = root;
                for j in 1..self.joints {
                    out[[f, j, c]] = root + x[[f, 3 * j + c]];
                }
            }
        }
        Ok(SkeletonSequence {
            data: out,
            fps: motion.fps(),
        })
    }

    fn pullback(
        &self,
        motion: &MotionSequence,
        cotangent: &Array3<f64>,
    ) -> Result<Array2<f64>, MotionError> {
        self.check_width(motion)?;
        check_cotangent(motion, self.joints, cotangent)?;
        let n = motion.n_frames();
        let mut out = Array2::zeros((n, 3 * self.joints));
        for f in 0..n {
            for c in 0..3 {
                let mut root = 0.0;
                for j in 0..self.joints {
                    let v = cotangent[[f, j, c]];
                    root += v;
                    if j > 0 {
                        out[[f, 3 * j + c]] = v;
                    }
                }
                out[[f, c]] = root;
            }
        }
        Ok(out)
    }

    fn lift(&self, skeleton: &SkeletonSequence) -> Option<Result<MotionSequence, MotionError>> {
        if skeleton.n_joints() != self.joints {
            return Some(Err(MotionError::Layout {
                layout: self.name().to_string(),
                expected: self.joints,
                got: skeleton.n_joints(),
            }));
        }
        let n = skeleton.n_frames();
        let s = skeleton.data();
        let mut out = Array2::zeros((n, 3 * self.joints));
        for f in 0..n {
            for c in 0..3 {
                let root = s[[f, 0, c]];
                out[[f, c]] = root;
                for j in 1..self.joints {
                    out[[f, 3 * j + c]] = s[[f, j, c]] - root;
                }
            }
        }
        Some(Ok(MotionSequence::from_parts(out, skeleton.fps())))
    }
}

fn check_cotangent(
    motion: &MotionSequence,
    joints: usize,
    cotangent: &Array3<f64>,
) -> Result<(), MotionError> {
    let want = (motion.n_frames(), joints, 3);
    if cotangent.dim() != want {
        return Err(MotionError::Shape {
            expected: format!("{}×{}×{}", want.0, want.1, want.2),
            got: format!("{:?}", cotangent.dim()),
        });
    }
    Ok(())
}

type LayoutFactory = fn(usize) -> Arc<dyn SkeletonProjection>;

/// Name → constructor table for motion layouts.
#[derive(Clone)]
pub struct LayoutRegistry {
    factories: BTreeMap<String, LayoutFactory>,
}

impl Default for LayoutRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("identity", |j| Arc::new(IdentityLayout::new(j)));
        r.register("root-offset", |j| Arc::new(RootOffsetLayout::new(j)));
        r
    }
}

impl LayoutRegistry {
    pub fn register(&mut self, name: &str, factory: LayoutFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn get(
        &self,
        name: &str,
        joints: usize,
    ) -> Result<Arc<dyn SkeletonProjection>, MotionError> {
        self.factories
            .get(name)
            .map(|f| f(joints))
            .ok_or_else(|| MotionError::UnknownLayout(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }
}

/// Projection through a layout; free-function form used by guidance code.
pub fn project_motion_to_skeleton(
    layout: &dyn SkeletonProjection,
    motion: &MotionSequence,
) -> Result<SkeletonSequence, MotionError> {
    layout.project(motion)
}

/// On-disk skeleton document.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SkeletonFile {
    pub fps: f64,
    pub n_frames: usize,
    pub n_joints: usize,
    pub joint_names: Vec<String>,
    pub frames: Vec<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<Vec<u8>>>,
}

impl SkeletonFile {
    pub fn from_skeleton(s: &SkeletonSequence, mask: Option<&ActivationMask>) -> Self {
        let n = s.n_frames();
        let j = s.n_joints();
        let names = if j == DEFAULT_JOINTS {
            JOINT_NAMES.iter().map(|s| s.to_string()).collect()
        } else {
            (0..j).map(|i| format!("joint_{i}")).collect()
        };
        let frames = (0..n)
            .map(|f| (0..j).map(|jj| s.joint(f, jj)).collect())
            .collect();
        let mask = mask.map(|m| {
            m.bits()
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|b| u8::from(*b)).collect())
                .collect()
        });
        Self {
            fps: s.fps(),
            n_frames: n,
            n_joints: j,
            joint_names: names,
            frames,
            mask,
        }
    }

    pub fn to_skeleton(&self) -> Result<(SkeletonSequence, Option<ActivationMask>), MotionError> {
        if self.frames.len() != self.n_frames {
            return Err(MotionError::File(format!(
                "n_frames is {} but {} frames are listed",
                self.n_frames,
                self.frames.len()
            )));
        }
        if self.joint_names.len() != self.n_joints {
            return Err(MotionError::File(format!(
                "n_joints is {} but {} joint names are listed",
                self.n_joints,
                self.joint_names.len()
            )));
        }
        let mut data = Array3::zeros((self.n_frames, self.n_joints, 3));
        for (f, frame) in self.frames.iter().enumerate() {
            if frame.len() != self.n_joints {
                return Err(MotionError::File(format!(
                    "frame {f} has {} joints, expected {}",
                    frame.len(),
                    self.n_joints
                )));
            }
            for (j, p) in frame.iter().enumerate() {
                for c in 0..3 {
                    data[[f, j, c]] = p[c];
                }
            }
        }
        let skeleton = SkeletonSequence::new(data, self.fps)?;
        let mask = match &self.mask {
            None => None,
            Some(rows) => {
                if rows.len() != self.n_frames || rows.iter().any(|r| r.len() != self.n_joints) {
                    return Err(MotionError::File("mask shape does not match frames".into()));
                }
                let mut bits = Array2::from_elem((self.n_frames, self.n_joints), false);
                for (f, r) in rows.iter().enumerate() {
                    for (j, v) in r.iter().enumerate() {
                        bits[[f, j]] = match v {
                            0 => false,
                            1 => true,
                            other => {
                                return Err(MotionError::File(format!(
                                    "mask value {other} at [{f}][{j}] is not 0 or 1"
                                )))
                            }
                        };
                    }
                }
                Some(ActivationMask::new(bits))
            }
        };
        Ok((skeleton, mask))
    }

    pub fn from_json(text: &str) -> Result<Self, MotionError> {
        serde_json::from_str(text).map_err(|e| MotionError::File(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("skeleton file serializes")
    }
}

/// Rest pose placed with the pelvis at `pelvis`, repeated over `n_frames`.
pub fn rest_pose_sequence(
    n_frames: usize,
    pelvis: [f64; 3],
    fps: f64,
) -> Result<SkeletonSequence, MotionError> {
    let mut data = Array3::zeros((n_frames, DEFAULT_JOINTS, 3));
    for f in 0..n_frames {
        for (j, off) in REST_OFFSETS.iter().enumerate() {
            for c in 0..3 {
                data[[f, j, c]] = pelvis[c] + off[c];
            }
        }
    }
    SkeletonSequence::new(data, fps)
}
