//! Skeletons, motion clips, rotation helpers and forward kinematics.
//!
//! Conventions used throughout the crate:
//!
//! * Y is up; heights are the second coordinate.
//! * Quaternions are stored as `[w, x, y, z]`.
//! * Joints are topologically ordered: joint 0 is the root and every other
//!   joint's parent has a smaller index.

use nalgebra::{Quaternion, Unit, UnitQuaternion, Vector3};
use ndarray::{s, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Tolerance on quaternion norms accepted at construction time.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SkeletonRecord", into = "SkeletonRecord")]
pub struct Skeleton {
    joint_names: Vec<String>,
    parents: Vec<Option<usize>>,
    offsets: Vec<Vec3>,
    foot_joints: Vec<usize>,
}

/// On-disk form of a skeleton; the root's parent is written as `-1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkeletonRecord {
    pub joint_names: Vec<String>,
    pub parents: Vec<i64>,
    pub offsets: Vec<Vec3>,
    pub foot_joints: Vec<usize>,
}

impl TryFrom<SkeletonRecord> for Skeleton {
    type Error = Error;

    fn try_from(r: SkeletonRecord) -> Result<Self> {
        let parents = r
            .parents
            .iter()
            .map(|&p| if p < 0 { None } else { Some(p as usize) })
            .collect();
        Skeleton::new(r.joint_names, parents, r.offsets, r.foot_joints)
    }
}

impl From<Skeleton> for SkeletonRecord {
    fn from(s: Skeleton) -> Self {
        SkeletonRecord {
            parents: s
                .parents
                .iter()
                .map(|p| p.map_or(-1, |p| p as i64))
                .collect(),
            joint_names: s.joint_names,
            offsets: s.offsets,
            foot_joints: s.foot_joints,
        }
    }
}

impl Skeleton {
    pub fn new(
        joint_names: Vec<String>,
        parents: Vec<Option<usize>>,
        offsets: Vec<Vec3>,
        foot_joints: Vec<usize>,
    ) -> Result<Self> {
        let n = joint_names.len();
        if n == 0 {
            return Err(Error::Invariant("skeleton has no joints".into()));
        }
        if parents.len() != n || offsets.len() != n {
            return Err(Error::Shape(format!(
                "skeleton: {} names, {} parents, {} offsets",
                n,
                parents.len(),
                offsets.len()
            )));
        }
        if parents[0].is_some() {
            return Err(Error::Invariant("skeleton: joint 0 must be the root".into()));
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                None => {
                    return Err(Error::Invariant(format!(
                        "skeleton: joint {j} is a second root"
                    )))
                }
                Some(p) if *p >= j => {
                    return Err(Error::Invariant(format!(
                        "skeleton: joint {j} has parent {p}; parents must precede children"
                    )))
                }
                _ => {}
            }
            if norm(offsets[j]) == 0.0 {
                return Err(Error::Invariant(format!(
                    "skeleton: joint {j} has a zero offset"
                )));
            }
        }
        if let Some(&f) = foot_joints.iter().find(|&&f| f >= n) {
            return Err(Error::Invariant(format!(
                "skeleton: foot joint {f} out of range"
            )));
        }
        Ok(Skeleton {
            joint_names,
            parents,
            offsets,
            foot_joints,
        })
    }

    /// Bundled 8-joint biped: pelvis, spine, chest, head and two knee/foot
    /// legs. With identity rotations and the root at height 0.9 m the feet
    /// rest on the ground plane.
    pub fn biped() -> Self {
        let names = [
            "pelvis",
            "spine",
            "chest",
            "head",
            "left_knee",
            "left_foot",
            "right_knee",
            "right_foot",
        ];
        let parents = vec![None, Some(0), Some(1), Some(2), Some(0), Some(4), Some(0), Some(6)];
        let offsets = vec![
            [0.0, 0.0, 0.0],
            [0.0, 0.25, 0.0],
            [0.0, 0.25, 0.0],
            [0.0, 0.2, 0.0],
            [0.1, -0.45, 0.0],
            [0.0, -0.45, 0.0],
            [-0.1, -0.45, 0.0],
            [0.0, -0.45, 0.0],
        ];
        Skeleton::new(
            names.iter().map(|s| s.to_string()).collect(),
            parents,
            offsets,
            vec![5, 7],
        )
        .expect("bundled skeleton is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn offset(&self, joint: usize) -> Vec3 {
        self.offsets[joint]
    }

    pub fn foot_joints(&self) -> &[usize] {
        &self.foot_joints
    }

    /// Joints without children.
    pub fn leaves(&self) -> Vec<usize> {
        let mut has_child = vec![false; self.joint_count()];
        for p in self.parents.iter().flatten() {
            has_child[*p] = true;
        }
        (0..self.joint_count()).filter(|&j| !has_child[j]).collect()
    }
}

/// A fixed-rate sequence of root positions and per-joint local rotations.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    id: String,
    fps: f64,
    root_pos: Array2<f64>,
    rot: Array3<f64>,
}

impl MotionClip {
    /// `root_pos` is `frames × 3`, `rot` is `frames × joints × 4` in
    /// `[w, x, y, z]` order.
    pub fn new(id: impl Into<String>, fps: f64, root_pos: Array2<f64>, rot: Array3<f64>) -> Result<Self> {
        let id = id.into();
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Invariant(format!("clip {id}: fps must be positive")));
        }
        let frames = root_pos.nrows();
        if root_pos.ncols() != 3 || rot.dim().0 != frames || rot.dim().2 != 4 {
            return Err(Error::Shape(format!(
                "clip {id}: root {:?} and rotations {:?} disagree",
                root_pos.dim(),
                rot.dim()
            )));
        }
        if frames < 2 {
            return Err(Error::Invariant(format!("clip {id}: frame count < 2")));
        }
        if root_pos.iter().chain(rot.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Invariant(format!("clip {id}: non-finite value")));
        }
        let joints = rot.dim().1;
        for f in 0..frames {
            for j in 0..joints {
                let q = rot.slice(s![f, j, ..]);
                let n = q.dot(&q).sqrt();
                if (n - 1.0).abs() > UNIT_TOLERANCE {
                    return Err(Error::Invariant(format!(
                        "clip {id}: quaternion at frame {f}, joint {j} has norm {n}"
                    )));
                }
            }
        }
        Ok(MotionClip {
            id,
            fps,
            root_pos,
            rot,
        })
    }

    /// Builds a clip from axis-angle rotations (`frames × joints × 3`, radians).
    pub fn from_axis_angle(
        id: impl Into<String>,
        fps: f64,
        root_pos: Array2<f64>,
        axis_angle: &Array3<f64>,
    ) -> Result<Self> {
        let (frames, joints, c) = axis_angle.dim();
        if c != 3 {
            return Err(Error::Shape("axis-angle rotations need 3 components".into()));
        }
        let mut rot = Array3::zeros((frames, joints, 4));
        for f in 0..frames {
            for j in 0..joints {
                let v = axis_angle.slice(s![f, j, ..]);
                let q = quat_from_axis_angle([v[0], v[1], v[2]]);
                rot.slice_mut(s![f, j, ..]).assign(&ndarray::arr1(&q));
            }
        }
        MotionClip::new(id, fps, root_pos, rot)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frames(&self) -> usize {
        self.root_pos.nrows()
    }

    pub fn joints(&self) -> usize {
        self.rot.dim().1
    }

    pub fn root_positions(&self) -> ArrayView2<'_, f64> {
        self.root_pos.view()
    }

    pub fn rotations(&self) -> &Array3<f64> {
        &self.rot
    }

    pub fn root(&self, frame: usize) -> Vec3 {
        let r = self.root_pos.row(frame);
        [r[0], r[1], r[2]]
    }

    pub fn quat(&self, frame: usize, joint: usize) -> [f64; 4] {
        let q = self.rot.slice(s![frame, joint, ..]);
        [q[0], q[1], q[2], q[3]]
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Contiguous frame range `[start, start + len)` as a new clip.
    pub fn slice(&self, start: usize, len: usize, id: impl Into<String>) -> Result<Self> {
        if start + len > self.frames() {
            return Err(Error::Shape(format!(
                "clip {}: slice {start}+{len} exceeds {} frames",
                self.id,
                self.frames()
            )));
        }
        MotionClip::new(
            id,
            self.fps,
            self.root_pos.slice(s![start..start + len, ..]).to_owned(),
            self.rot.slice(s![start..start + len, .., ..]).to_owned(),
        )
    }

    /// Rigidly translates the root trajectory.
    pub fn translated(&self, delta: Vec3) -> Self {
        let mut out = self.clone();
        for mut r in out.root_pos.rows_mut() {
            for k in 0..3 {
                r[k] += delta[k];
            }
        }
        out
    }

    /// Assembles a clip from per-frame parts without re-validating norms;
    /// used by synthesis where every quaternion comes from a valid clip.
    pub(crate) fn from_frames(id: impl Into<String>, fps: f64, frames: &[Frame]) -> Result<Self> {
        let joints = frames.first().map_or(0, |f| f.rot.len());
        let mut root = Array2::zeros((frames.len(), 3));
        let mut rot = Array3::zeros((frames.len(), joints, 4));
        for (i, fr) in frames.iter().enumerate() {
            for k in 0..3 {
                root[[i, k]] = fr.root[k];
            }
            for (j, q) in fr.rot.iter().enumerate() {
                for k in 0..4 {
                    rot[[i, j, k]] = q[k];
                }
            }
        }
        MotionClip::new(id, fps, root, rot)
    }

    pub fn frame(&self, f: usize) -> Frame {
        Frame {
            root: self.root(f),
            rot: (0..self.joints()).map(|j| self.quat(f, j)).collect(),
        }
    }
}

/// One frame of a motion clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub root: Vec3,
    pub rot: Vec<[f64; 4]>,
}

/// World-space (or root-relative) joint positions, `frames × joints × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub joint_pos: Array3<f64>,
}

impl PoseSequence {
    pub fn frames(&self) -> usize {
        self.joint_pos.dim().0
    }

    pub fn joints(&self) -> usize {
        self.joint_pos.dim().1
    }

    pub fn position(&self, frame: usize, joint: usize) -> Vec3 {
        let p = self.joint_pos.slice(s![frame, joint, ..]);
        [p[0], p[1], p[2]]
    }
}

/// Which frame joint positions are expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionSpace {
    #[default]
    World,
    /// World positions minus the root position of the same frame.
    RootRelative,
}

pub fn forward_kinematics(skeleton: &Skeleton, clip: &MotionClip) -> Result<PoseSequence> {
    forward_kinematics_in(skeleton, clip, PositionSpace::World)
}

pub fn forward_kinematics_in(
    skeleton: &Skeleton,
    clip: &MotionClip,
    space: PositionSpace,
) -> Result<PoseSequence> {
    let joints = skeleton.joint_count();
    if clip.joints() != joints {
        return Err(Error::Shape(format!(
            "clip {} has {} joints, skeleton has {}",
            clip.id(),
            clip.joints(),
            joints
        )));
    }
    let frames = clip.frames();
    let mut out = Array3::zeros((frames, joints, 3));
    let mut pos = vec![[0.0; 3]; joints];
    for f in 0..frames {
        let root = match space {
            PositionSpace::World => clip.root(f),
            PositionSpace::RootRelative => [0.0; 3],
        };
        pose_into(skeleton, root, |j| clip.quat(f, j), &mut pos);
        for (j, p) in pos.iter().enumerate() {
            for k in 0..3 {
                out[[f, j, k]] = p[k];
            }
        }
    }
    Ok(PoseSequence { joint_pos: out })
}

fn pose_into(skeleton: &Skeleton, root: Vec3, quat: impl Fn(usize) -> [f64; 4], out: &mut [Vec3]) {
    let joints = skeleton.joint_count();
    let mut global: Vec<UnitQuaternion<f64>> = Vec::with_capacity(joints);
    global.push(to_unit(quat(0)));
    out[0] = root;
    for j in 1..joints {
        let p = skeleton.parents[j].expect("validated");
        let v = Vector3::from(out[p]) + global[p] * Vector3::from(skeleton.offsets[j]);
        out[j] = [v[0], v[1], v[2]];
        global.push(global[p] * to_unit(quat(j)));
    }
}

/// World joint positions of a single frame.
pub fn frame_positions(skeleton: &Skeleton, frame: &Frame) -> Result<Vec<Vec3>> {
    if frame.rot.len() != skeleton.joint_count() {
        return Err(Error::Shape(format!(
            "frame has {} joints, skeleton has {}",
            frame.rot.len(),
            skeleton.joint_count()
        )));
    }
    let mut out = vec![[0.0; 3]; frame.rot.len()];
    pose_into(skeleton, frame.root, |j| frame.rot[j], &mut out);
    Ok(out)
}

/// Forward differences scaled by `fps`; one fewer frame than the input.
pub fn velocities(seq: &PoseSequence, fps: f64) -> Result<Array3<f64>> {
    let frames = seq.frames();
    if frames < 2 {
        return Err(Error::Invariant(
            "velocities need at least 2 frames".into(),
        ));
    }
    let p = &seq.joint_pos;
    let diff = &p.slice(s![1.., .., ..]) - &p.slice(s![..frames - 1, .., ..]);
    Ok(diff * fps)
}

pub fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn distance(a: Vec3, b: Vec3) -> f64 {
    norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}

pub fn to_unit(q: [f64; 4]) -> UnitQuaternion<f64> {
    Unit::new_unchecked(Quaternion::new(q[0], q[1], q[2], q[3]))
}

pub fn to_wxyz(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

pub fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    to_wxyz(&UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])))
}

pub fn quat_from_axis_angle(v: Vec3) -> [f64; 4] {
    to_wxyz(&UnitQuaternion::from_scaled_axis(Vector3::from(v)))
}

/// Shortest-path spherical interpolation; exact at `t = 0` and `t = 1`.
pub fn slerp(a: [f64; 4], b: [f64; 4], t: f64) -> [f64; 4] {
    if t == 0.0 {
        return a;
    }
    if t == 1.0 {
        return b;
    }
    let (qa, qb) = (to_unit(a), to_unit(b));
    match qa.try_slerp(&qb, t, 1e-12) {
        Some(q) => to_wxyz(&q),
        // Only reachable for (numerically) identical rotations.
        None => a,
    }
}
