//! Corpus model, windowing and file formats.
//!
//! A corpus directory holds a `manifest.json` plus one file of each kind per
//! clip; see [`format`] for the byte-level layouts.

mod format;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kinematics::{MotionClip, Skeleton};

pub use format::{
    load_corpus, read_beats, read_features, read_motion, save_corpus, write_beats, write_features,
    write_motion, Manifest, ManifestClip, MotionStreamWriter, FeatDims,
};
pub use synth::{synthesize_corpus_with, synthesize_test_corpus, SynthOptions};

/// Segmentation of clips into fixed-length windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowingConfig {
    pub window_seconds: f64,
    pub stride_seconds: f64,
}

impl Default for WindowingConfig {
    fn default() -> Self {
        WindowingConfig {
            window_seconds: 2.0,
            stride_seconds: 1.0,
        }
    }
}

impl WindowingConfig {
    pub fn window_frames(&self, fps: f64) -> usize {
        (self.window_seconds * fps).round() as usize
    }

    pub fn stride_frames(&self, fps: f64) -> usize {
        ((self.stride_seconds * fps).round() as usize).max(1)
    }

    pub fn validate(&self, fps: f64) -> Result<()> {
        if !(self.window_seconds > 0.0 && self.stride_seconds > 0.0) {
            return Err(Error::Config("window and stride must be positive".into()));
        }
        if self.stride_seconds > self.window_seconds {
            return Err(Error::Config("stride must not exceed the window".into()));
        }
        if self.window_frames(fps) < 2 {
            return Err(Error::Config(format!(
                "window of {} s at {fps} fps is shorter than 2 frames",
                self.window_seconds
            )));
        }
        Ok(())
    }

    /// Number of windows a clip of `frames` frames yields.
    pub fn segment_count(&self, frames: usize, fps: f64) -> usize {
        let w = self.window_frames(fps);
        if frames < w {
            0
        } else {
            (frames - w) / self.stride_frames(fps) + 1
        }
    }
}

/// A validated motion corpus. Feature matrices are keyed by clip id and
/// have one row per window under [`Corpus::windowing`].
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub skeleton: Skeleton,
    pub fps: f64,
    pub windowing: WindowingConfig,
    pub feat_dims: FeatDims,
    pub clips: Vec<MotionClip>,
    pub beats: BTreeMap<String, Vec<f64>>,
    pub music_feats: BTreeMap<String, Array2<f32>>,
    pub motion_feats: BTreeMap<String, Array2<f32>>,
}

impl Corpus {
    /// Checks every corpus invariant, naming the offending record.
    pub fn validate(&self) -> Result<()> {
        self.windowing.validate(self.fps)?;
        let mut seen = BTreeSet::new();
        for clip in &self.clips {
            let id = clip.id();
            if !seen.insert(id.to_string()) {
                return Err(Error::format(id, "duplicate clip id"));
            }
            if clip.joints() != self.skeleton.joint_count() {
                return Err(Error::format(
                    id,
                    format!(
                        "{} joints but the skeleton has {}",
                        clip.joints(),
                        self.skeleton.joint_count()
                    ),
                ));
            }
            if clip.fps() != self.fps {
                return Err(Error::format(id, format!("fps {} differs from corpus fps {}", clip.fps(), self.fps)));
            }
            let beats = self
                .beats
                .get(id)
                .ok_or_else(|| Error::format(id, "missing beats"))?;
            let duration = clip.frames() as f64 / clip.fps();
            if beats.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::format(id, "beat timestamps not strictly increasing"));
            }
            if beats.iter().any(|&t| !(0.0..duration).contains(&t)) {
                return Err(Error::format(id, "beat timestamp outside clip duration"));
            }
            let segments = self.windowing.segment_count(clip.frames(), self.fps);
            for (kind, map, cols) in [
                ("music features", &self.music_feats, self.feat_dims.music),
                ("motion features", &self.motion_feats, self.feat_dims.motion),
            ] {
                let m = map
                    .get(id)
                    .ok_or_else(|| Error::format(id, format!("missing {kind}")))?;
                if m.dim() != (segments, cols) {
                    return Err(Error::format(
                        id,
                        format!("{kind} are {:?}, expected ({segments}, {cols})", m.dim()),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn clip(&self, id: &str) -> Option<&MotionClip> {
        self.clips.iter().find(|c| c.id() == id)
    }

    /// All paired (music, motion) feature rows, clip by clip.
    pub fn paired_features(&self) -> (Array2<f64>, Array2<f64>) {
        let stack = |map: &BTreeMap<String, Array2<f32>>, cols: usize| {
            let rows: Vec<_> = self
                .clips
                .iter()
                .flat_map(|c| map[c.id()].axis_iter(Axis(0)))
                .collect();
            let mut out = Array2::zeros((rows.len(), cols));
            for (i, r) in rows.iter().enumerate() {
                out.row_mut(i).assign(&r.mapv(f64::from));
            }
            out
        };
        (
            stack(&self.music_feats, self.feat_dims.music),
            stack(&self.motion_feats, self.feat_dims.motion),
        )
    }

    /// SHA-256 over every numeric field, in a fixed order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.skeleton).expect("skeleton serializes"));
        h.update(self.fps.to_le_bytes());
        h.update(self.windowing.window_seconds.to_le_bytes());
        h.update(self.windowing.stride_seconds.to_le_bytes());
        for clip in &self.clips {
            let id = clip.id();
            h.update(id.as_bytes());
            for v in clip.root_positions().iter().chain(clip.rotations().iter()) {
                h.update(v.to_le_bytes());
            }
            for t in &self.beats[id] {
                h.update(t.to_le_bytes());
            }
            for v in self.music_feats[id].iter().chain(self.motion_feats[id].iter()) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// One window cut from a source clip, with its paired feature rows.
#[derive(Debug, Clone)]
pub struct WindowRecord {
    pub clip: MotionClip,
    pub source: String,
    pub start: usize,
    pub segment: usize,
    pub music_feat: Vec<f64>,
    pub motion_feat: Vec<f64>,
}

/// Identifier of the window starting at `start` in clip `source`.
pub fn window_id(source: &str, start: usize) -> String {
    format!("{source}@{start}")
}

/// Splits a window id back into source id and start frame.
pub fn parse_window_id(id: &str) -> Option<(&str, usize)> {
    let (src, start) = id.rsplit_once('@')?;
    Some((src, start.parse().ok()?))
}

/// Cuts every clip into windows; clips shorter than one window yield none.
pub fn window_clips(corpus: &Corpus, cfg: &WindowingConfig) -> Result<Vec<MotionClip>> {
    Ok(window_records(corpus, cfg)?.into_iter().map(|w| w.clip).collect())
}

/// Like [`window_clips`] but keeps provenance and, when `cfg` matches the
/// corpus windowing, the paired feature rows (empty otherwise).
pub fn window_records(corpus: &Corpus, cfg: &WindowingConfig) -> Result<Vec<WindowRecord>> {
    cfg.validate(corpus.fps)?;
    let wf = cfg.window_frames(corpus.fps);
    let sf = cfg.stride_frames(corpus.fps);
    let with_feats = *cfg == corpus.windowing;
    let mut out = Vec::new();
    for clip in &corpus.clips {
        for seg in 0..cfg.segment_count(clip.frames(), corpus.fps) {
            let start = seg * sf;
            let row = |m: &BTreeMap<String, Array2<f32>>| -> Vec<f64> {
                if with_feats {
                    m[clip.id()].row(seg).iter().map(|&v| f64::from(v)).collect()
                } else {
                    Vec::new()
                }
            };
            out.push(WindowRecord {
                clip: clip.slice(start, wf, window_id(clip.id(), start))?,
                source: clip.id().to_string(),
                start,
                segment: seg,
                music_feat: row(&corpus.music_feats),
                motion_feat: row(&corpus.motion_feats),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_count_arithmetic() {
        let cfg = WindowingConfig {
            window_seconds: 2.0,
            stride_seconds: 2.0,
        };
        assert_eq!(cfg.segment_count(300, 30.0), 5);
        assert_eq!(cfg.segment_count(59, 30.0), 0);
        assert_eq!(cfg.segment_count(60, 30.0), 1);
        assert_eq!(WindowingConfig::default().segment_count(150, 30.0), 4);
    }

    #[test]
    fn windowing_config_validation() {
        let bad = WindowingConfig {
            window_seconds: 1.0,
            stride_seconds: 2.0,
        };
        assert!(bad.validate(30.0).is_err());
        let tiny = WindowingConfig {
            window_seconds: 0.01,
            stride_seconds: 0.01,
        };
        assert!(tiny.validate(30.0).is_err());
    }

    #[test]
    fn window_ids_round_trip() {
        assert_eq!(parse_window_id(&window_id("a@b", 30)), Some(("a@b", 30)));
        assert_eq!(parse_window_id("plain"), None);
    }
}
