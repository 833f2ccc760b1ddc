//! Frame-major motion representation used by the denoiser: root position
//! (x and z relative to the window's first frame) followed by every joint's
//! quaternion, standardized per channel.

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::kinematics::{normalize_quat, MotionClip, PoseSequence, Skeleton};

/// Channels below this spread are left unscaled.
const MIN_STD: f64 = 1e-6;

pub fn repr_dim(joints: usize) -> usize {
    3 + 4 * joints
}

/// Raw `frames × (3 + 4J)` representation. Each joint's quaternions are
/// kept on one hemisphere across frames, starting with `w >= 0`.
pub fn to_repr(clip: &MotionClip) -> Array2<f64> {
    let (frames, joints) = (clip.frames(), clip.joints());
    let mut out = Array2::zeros((frames, repr_dim(joints)));
    let origin = clip.root(0);
    for f in 0..frames {
        let r = clip.root(f);
        out[[f, 0]] = r[0] - origin[0];
        out[[f, 1]] = r[1];
        out[[f, 2]] = r[2] - origin[2];
    }
    for j in 0..joints {
        let mut prev = [1.0, 0.0, 0.0, 0.0];
        for f in 0..frames {
            let mut q = clip.quat(f, j);
            let dot: f64 = q.iter().zip(&prev).map(|(a, b)| a * b).sum();
            if dot < 0.0 {
                q = q.map(|c| -c);
            }
            for k in 0..4 {
                out[[f, 3 + 4 * j + k]] = q[k];
            }
            prev = q;
        }
    }
    out
}

/// Inverse of [`to_repr`]: renormalizes quaternions and places the first
/// frame's root at `origin` (x and z).
pub fn from_repr(id: &str, fps: f64, x: &Array2<f64>, origin: [f64; 2]) -> Result<MotionClip> {
    let (frames, dim) = x.dim();
    if dim < 7 || (dim - 3) % 4 != 0 {
        return Err(Error::Shape(format!("representation width {dim} is not 3 + 4J")));
    }
    let joints = (dim - 3) / 4;
    let mut root = Array2::zeros((frames, 3));
    let mut rot = Array3::zeros((frames, joints, 4));
    for f in 0..frames {
        root[[f, 0]] = x[[f, 0]] + origin[0];
        root[[f, 1]] = x[[f, 1]];
        root[[f, 2]] = x[[f, 2]] + origin[1];
        for j in 0..joints {
            let q = [x[[f, 3 + 4 * j]], x[[f, 4 + 4 * j]], x[[f, 5 + 4 * j]], x[[f, 6 + 4 * j]]];
            if q.iter().map(|c| c * c).sum::<f64>() < 1e-12 || q.iter().any(|c| !c.is_finite()) {
                return Err(Error::Numeric(format!("degenerate quaternion at frame {f}, joint {j}")));
            }
            let q = normalize_quat(q);
            for k in 0..4 {
                rot[[f, j, k]] = q[k];
            }
        }
    }
    MotionClip::new(id, fps, root, rot)
}

/// Per-channel mean and standard deviation of the representation.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Statistics over every frame of every window.
    pub fn fit(windows: &[Array2<f64>]) -> Result<Self> {
        let Some(first) = windows.first() else {
            return Err(Error::Config("normalizer needs at least one window".into()));
        };
        let dim = first.ncols();
        if windows.iter().any(|w| w.ncols() != dim) {
            return Err(Error::Shape("windows differ in representation width".into()));
        }
        let views: Vec<_> = windows.iter().map(|w| w.view()).collect();
        let all = ndarray::concatenate(Axis(0), &views).expect("equal widths");
        let mean = all.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let std = all
            .std_axis(Axis(0), 0.0)
            .iter()
            .map(|&s| if s < MIN_STD { 1.0 } else { s })
            .collect();
        Ok(Normalizer { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn denormalize(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
        out
    }
}

/// Binary foot contact indicator, one row per frame transition
/// (`frames - 1`) and one column per skeleton foot joint.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactMask {
    pub foot_joints: Vec<usize>,
    pub values: Array2<bool>,
}

impl ContactMask {
    pub fn weights(&self) -> Array2<f64> {
        self.values.mapv(|b| if b { 1.0 } else { 0.0 })
    }
}

/// A foot is in contact at frame `i` when its height is below `h_thresh`
/// and its speed towards frame `i + 1` is below `v_thresh`.
pub fn detect_contacts(
    seq: &PoseSequence,
    skeleton: &Skeleton,
    fps: f64,
    h_thresh: f64,
    v_thresh: f64,
) -> Result<ContactMask> {
    if seq.joints() != skeleton.joint_count() {
        return Err(Error::Shape(format!(
            "pose sequence has {} joints, skeleton has {}",
            seq.joints(),
            skeleton.joint_count()
        )));
    }
    if seq.frames() < 2 {
        return Err(Error::Invariant("contacts need at least 2 frames".into()));
    }
    let feet = skeleton.foot_joints().to_vec();
    let values = Array2::from_shape_fn((seq.frames() - 1, feet.len()), |(f, k)| {
        let j = feet[k];
        let a = seq.position(f, j);
        let b = seq.position(f + 1, j);
        let speed = crate::kinematics::distance(a, b) * fps;
        a[1] < h_thresh && speed < v_thresh
    });
    Ok(ContactMask {
        foot_joints: feet,
        values,
    })
}
