use super::GenerationSink;
use crate::error::{Error, Result};
use crate::kinematics::{distance, frame_positions, slerp, Frame, MotionClip, Skeleton, Vec3};

/// `3u² − 2u³`: 0 at `u = 0`, 1 at `u = 1`, flat at both ends.
pub fn smoothstep(u: f64) -> f64 {
    u * u * (3.0 - 2.0 * u)
}

/// Weight of the incoming clip at overlap frame `k` of `w`.
fn weight(k: usize, w: usize) -> f64 {
    if w == 1 {
        0.5
    } else {
        smoothstep(k as f64 / (w - 1) as f64)
    }
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn shifted(f: &Frame, delta: Vec3) -> Frame {
    Frame {
        root: add(f.root, delta),
        rot: f.rot.clone(),
    }
}

fn max_joint_gap(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(p, q)| distance(*p, *q)).fold(0.0, f64::max)
}

/// Largest per-joint distance of `cur` from the constant-velocity
/// prediction `2 last - before`.
fn max_residual(before: &[Vec3], last: &[Vec3], cur: &[Vec3]) -> f64 {
    (0..cur.len())
        .map(|j| {
            let pred = [0, 1, 2].map(|k| 2.0 * last[j][k] - before[j][k]);
            distance(cur[j], pred)
        })
        .fold(0.0, f64::max)
}

/// Size of the move into a frame: the raw step from the previous frame and
/// the residual against the constant-velocity prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Step {
    pub step: f64,
    pub residual: f64,
}

impl Step {
    fn measure(before: Option<&[Vec3]>, last: Option<&[Vec3]>, cur: &[Vec3]) -> Step {
        match (before, last) {
            (Some(b), Some(l)) => Step {
                step: max_joint_gap(l, cur),
                residual: max_residual(b, l, cur),
            },
            (None, Some(l)) => {
                let d = max_joint_gap(l, cur);
                Step { step: d, residual: d }
            }
            _ => Step::default(),
        }
    }

    fn max(self, o: Step) -> Step {
        Step {
            step: self.step.max(o.step),
            residual: self.residual.max(o.residual),
        }
    }
}

/// Seam measurements of one transition, without and with blending.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SeamMeasure {
    pub first_frame: usize,
    pub pre: Step,
    pub post: Step,
}

/// Incremental crossfader. The last `w` frames of the latest clip are held
/// back until the next clip arrives, then mixed with that clip's first `w`
/// frames; everything else is forwarded to the sink immediately. At most
/// `limit` frames are emitted.
pub struct Blender {
    skeleton: Option<Skeleton>,
    w: usize,
    limit: usize,
    emitted: usize,
    pending: Vec<Frame>,
    last: Option<Frame>,
    before_last_root: Option<Vec3>,
    last_pos: Option<Vec<Vec3>>,
    before_last_pos: Option<Vec<Vec3>>,
}

impl Blender {
    pub fn new(skeleton: Skeleton, w: usize, limit: usize) -> Self {
        Blender {
            skeleton: Some(skeleton),
            ..Blender::unmeasured(w, limit)
        }
    }

    /// A blender that skips the world-space seam measurements.
    fn unmeasured(w: usize, limit: usize) -> Self {
        Blender {
            skeleton: None,
            w,
            limit,
            emitted: 0,
            pending: Vec::with_capacity(w),
            last: None,
            before_last_root: None,
            last_pos: None,
            before_last_pos: None,
        }
    }

    pub fn emitted(&self) -> usize {
        self.emitted
    }

    /// Whether emitted plus held-back frames reach the limit.
    pub fn covers_limit(&self) -> bool {
        self.emitted + self.pending.len() >= self.limit
    }

    /// Output index at which the next clip's first frame lands.
    pub fn pending_start(&self) -> usize {
        self.emitted
    }

    fn positions(&self, f: &Frame) -> Result<Option<Vec<Vec3>>> {
        self.skeleton.as_ref().map(|s| frame_positions(s, f)).transpose()
    }

    /// Emits one frame and measures the move into it.
    fn emit(&mut self, f: Frame, sink: &mut dyn GenerationSink) -> Result<Step> {
        if self.emitted >= self.limit {
            return Ok(Step::default());
        }
        sink.frame(&f)?;
        self.emitted += 1;
        let pos = self.positions(&f)?;
        let step = match &pos {
            Some(p) => Step::measure(self.before_last_pos.as_deref(), self.last_pos.as_deref(), p),
            None => Step::default(),
        };
        self.before_last_pos = std::mem::replace(&mut self.last_pos, pos);
        self.before_last_root = self.last.as_ref().map(|l| l.root);
        self.last = Some(f);
        Ok(step)
    }

    fn check_len(&self, clip: &MotionClip) -> Result<()> {
        if clip.frames() <= self.w {
            return Err(Error::Config(format!(
                "blend of {} frames needs clips longer than that; {} has {}",
                self.w,
                clip.id(),
                clip.frames()
            )));
        }
        Ok(())
    }

    /// Emits all but the last `w` frames of the first clip.
    pub fn start(&mut self, clip: &MotionClip, sink: &mut dyn GenerationSink) -> Result<()> {
        self.check_len(clip)?;
        let l = clip.frames();
        for f in 0..l - self.w {
            self.emit(clip.frame(f), sink)?;
        }
        self.pending = (l - self.w..l).map(|f| clip.frame(f)).collect();
        Ok(())
    }

    /// Rigid translation putting the clip's first root one step past `last`
    /// along the step from `before` to `last`.
    fn alignment(clip: &MotionClip, last: Vec3, before: Option<Vec3>) -> Vec3 {
        let step = before.map_or([0.0; 3], |b| sub(last, b));
        sub(add(last, step), clip.root(0))
    }

    /// Crossfades `clip` onto the held-back frames and measures the seam.
    pub fn append(&mut self, clip: &MotionClip, sink: &mut dyn GenerationSink) -> Result<SeamMeasure> {
        self.check_len(clip)?;
        if self.pending.len() != self.w {
            return Err(Error::Config(format!(
                "previous clip was shorter than twice the blend of {} frames",
                self.w
            )));
        }
        let last = self.last.as_ref().ok_or_else(|| Error::Invariant("append before start".into()))?;
        let delta = Self::alignment(clip, last.root, self.before_last_root);

        // The seam as it would be without blending: the previous clip's true
        // last frame followed by the incoming clip aligned to it.
        let n = self.pending.len();
        let (tail_root, tail_before_root) = match n {
            0 => (last.root, self.before_last_root),
            1 => (self.pending[0].root, Some(last.root)),
            _ => (self.pending[n - 1].root, Some(self.pending[n - 2].root)),
        };
        let raw = shifted(&clip.frame(0), Self::alignment(clip, tail_root, tail_before_root));
        let pre = match self.positions(&raw)? {
            Some(raw_pos) => {
                let (before, tail) = match n {
                    0 => (self.before_last_pos.clone(), self.last_pos.clone()),
                    1 => (self.last_pos.clone(), self.positions(&self.pending[0])?),
                    _ => (self.positions(&self.pending[n - 2])?, self.positions(&self.pending[n - 1])?),
                };
                Step::measure(before.as_deref(), tail.as_deref(), &raw_pos)
            }
            None => Step::default(),
        };

        let first_frame = self.emitted;
        let mut post = Step::default();
        let held = std::mem::take(&mut self.pending);
        for (k, a) in held.iter().enumerate() {
            let b = shifted(&clip.frame(k), delta);
            let t = weight(k, self.w);
            let root = [0, 1, 2].map(|i| a.root[i] + t * (b.root[i] - a.root[i]));
            let rot = a.rot.iter().zip(&b.rot).map(|(&qa, &qb)| slerp(qa, qb, t)).collect();
            post = post.max(self.emit(Frame { root, rot }, sink)?);
        }
        let l = clip.frames();
        let body_end = l.saturating_sub(self.w).max(self.w);
        for f in self.w..body_end {
            let step = self.emit(shifted(&clip.frame(f), delta), sink)?;
            if f == self.w {
                post = post.max(step);
            }
        }
        self.pending = (body_end..l).map(|f| shifted(&clip.frame(f), delta)).collect();
        Ok(SeamMeasure { first_frame, pre, post })
    }

    /// Emits the held-back frames, up to the limit.
    pub fn finish(&mut self, sink: &mut dyn GenerationSink) -> Result<()> {
        for f in std::mem::take(&mut self.pending) {
            self.emit(f, sink)?;
        }
        Ok(())
    }
}

struct Frames(Vec<Frame>);

impl GenerationSink for Frames {
    fn frame(&mut self, frame: &Frame) -> Result<()> {
        self.0.push(frame.clone());
        Ok(())
    }
}

/// `a` followed by `b`, overlapping by `w` frames.
///
/// `b` is first translated so that its first root lands one step (the last
/// root displacement of `a` without its final `w` frames) past that
/// shortened `a`. Over the overlap, rotations are slerped and roots lerped
/// from `a` towards `b` with smoothstep weights running from exactly 0 to
/// exactly 1. With `w = 0` this is plain concatenation after alignment.
pub fn blend_transition(a: &MotionClip, b: &MotionClip, w: usize) -> Result<MotionClip> {
    if a.fps() != b.fps() || a.joints() != b.joints() {
        return Err(Error::Shape("blended clips differ in fps or joint count".into()));
    }
    if w > b.frames() {
        return Err(Error::Config(format!(
            "blend of {w} frames exceeds {} ({} frames)",
            b.id(),
            b.frames()
        )));
    }
    let mut blender = Blender::unmeasured(w, usize::MAX);
    let mut out = Frames(Vec::with_capacity(a.frames() + b.frames()));
    blender.start(a, &mut out)?;
    blender.append(b, &mut out)?;
    blender.finish(&mut out)?;
    MotionClip::from_frames(format!("{}+{}", a.id(), b.id()), a.fps(), &out.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::synthesize_test_corpus;

    fn clips() -> (MotionClip, MotionClip) {
        let c = synthesize_test_corpus(3, 2);
        (c.clips[0].slice(0, 40, "a").unwrap(), c.clips[1].slice(10, 40, "b").unwrap())
    }

    #[test]
    fn smoothstep_endpoints() {
        assert_eq!(smoothstep(0.0), 0.0);
        assert_eq!(smoothstep(1.0), 1.0);
        assert_eq!(smoothstep(0.5), 0.5);
    }

    #[test]
    fn zero_blend_is_aligned_concatenation() {
        let (a, b) = clips();
        let out = blend_transition(&a, &b, 0).unwrap();
        assert_eq!(out.frames(), 80);
        for f in 0..40 {
            assert_eq!(out.frame(f), a.frame(f));
        }
        let step = sub(a.root(39), a.root(38));
        let expect = add(a.root(39), step);
        for (got, want) in out.root(40).iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(out.frame(41).rot, b.frame(1).rot);
    }

    #[test]
    fn weight_endpoints_hit_both_clips() {
        let (a, b) = clips();
        let w = 6;
        let out = blend_transition(&a, &b, w).unwrap();
        assert_eq!(out.frames(), 80 - w);
        let s = 40 - w;
        assert_eq!(out.frame(s), a.frame(s));
        let delta = sub(add(a.root(s - 1), sub(a.root(s - 1), a.root(s - 2))), b.root(0));
        let b_last = shifted(&b.frame(w - 1), delta);
        for j in 0..a.joints() {
            for k in 0..4 {
                assert!((out.quat(s + w - 1, j)[k] - b_last.rot[j][k]).abs() < 1e-12);
            }
        }
        for k in 0..3 {
            assert!((out.root(s + w - 1)[k] - b_last.root[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn overlapping_views_of_one_clip_blend_to_that_clip() {
        let (a, _) = clips();
        // Root moving at constant velocity, so alignment is exact too.
        let root = ndarray::Array2::from_shape_fn((a.frames(), 3), |(f, k)| 0.01 * f as f64 * (k as f64 + 1.0));
        let whole = MotionClip::new("s", a.fps(), root, a.rotations().clone()).unwrap();
        let w = 10;
        let head = whole.slice(0, 30, "h").unwrap();
        let tail = whole.slice(30 - w, 40 - (30 - w), "t").unwrap();
        let out = blend_transition(&head, &tail, w).unwrap();
        assert_eq!(out.frames(), 40);
        for f in 0..40 {
            for k in 0..3 {
                assert!((out.root(f)[k] - whole.root(f)[k]).abs() < 1e-12);
            }
            for j in 0..whole.joints() {
                let (p, q) = (out.quat(f, j), whole.quat(f, j));
                let dot: f64 = (0..4).map(|c| p[c] * q[c]).sum();
                assert!((dot.abs() - 1.0).abs() < 1e-12, "frame {f} joint {j}");
            }
        }
    }

    #[test]
    fn overlong_blend_is_rejected() {
        let (a, b) = clips();
        assert!(blend_transition(&a, &b, 41).is_err());
        assert!(blend_transition(&a, &b.slice(0, 3, "c").unwrap(), 4).is_err());
    }
}
