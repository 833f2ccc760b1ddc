//! On-disk formats.
//!
//! * `manifest.json`: see [`Manifest`]. File names are relative to the
//!   corpus directory.
//! * Motion files are JSON: `{"id", "fps", "frames": [{"root_pos": [x, y, z],
//!   "quat": [[w, x, y, z], ...]}]}`. A frame may carry `"axis_angle": [[x, y,
//!   z], ...]` (radians) instead of `"quat"`. Floats are written in shortest
//!   round-trip form, so reading back is bit-exact.
//! * Beat files hold one ascending timestamp in seconds per line.
//! * Feature files are a `u32 rows, u32 cols` header followed by row-major
//!   `f32` values, all little-endian.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{Corpus, WindowingConfig};
use crate::artifact::write_atomic;
use crate::error::{Error, Result};
use crate::kinematics::{quat_from_axis_angle, Frame, MotionClip, Skeleton};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatDims {
    pub music: usize,
    pub motion: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default = "default_version")]
    pub version: u32,
    pub skeleton: Skeleton,
    pub fps: f64,
    #[serde(default)]
    pub windowing: WindowingConfig,
    pub feat_dims: FeatDims,
    pub clips: Vec<ManifestClip>,
}

fn default_version() -> u32 {
    MANIFEST_VERSION
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestClip {
    pub id: String,
    pub motion_file: String,
    pub beats_file: String,
    pub music_feat_file: String,
    pub motion_feat_file: String,
}

#[derive(Serialize, Deserialize)]
struct MotionFile {
    id: String,
    fps: f64,
    frames: Vec<FrameRecord>,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    root_pos: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quat: Option<Vec<[f64; 4]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    axis_angle: Option<Vec<[f64; 3]>>,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_motion(path: &Path) -> Result<MotionClip> {
    let rec = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let m: MotionFile = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::format(&rec, e.to_string()))?;
    let frames = m.frames.len();
    let joints = m
        .frames
        .first()
        .map(|f| match (&f.quat, &f.axis_angle) {
            (Some(q), _) => q.len(),
            (None, Some(a)) => a.len(),
            _ => 0,
        })
        .unwrap_or(0);
    let mut root = Array2::zeros((frames, 3));
    let mut rot = Array3::zeros((frames, joints, 4));
    for (f, fr) in m.frames.iter().enumerate() {
        let quats: Vec<[f64; 4]> = match (&fr.quat, &fr.axis_angle) {
            (Some(q), None) => q.clone(),
            (None, Some(a)) => a.iter().map(|&v| quat_from_axis_angle(v)).collect(),
            _ => {
                return Err(Error::format(
                    &rec,
                    format!("frame {f}: exactly one of quat/axis_angle required"),
                ))
            }
        };
        if quats.len() != joints {
            return Err(Error::format(&rec, format!("frame {f}: joint count changes")));
        }
        for k in 0..3 {
            root[[f, k]] = fr.root_pos[k];
        }
        for (j, q) in quats.iter().enumerate() {
            for k in 0..4 {
                rot[[f, j, k]] = q[k];
            }
        }
    }
    MotionClip::new(m.id, m.fps, root, rot).map_err(|e| Error::format(rec, e.to_string()))
}

/// Incremental writer for motion files; frames go straight to the sink so
/// arbitrarily long motions never sit in memory.
pub struct MotionStreamWriter<W: Write> {
    w: W,
    frames: usize,
}

fn json_err(e: serde_json::Error) -> Error {
    Error::format("motion writer", e.to_string())
}

fn io_err(e: std::io::Error) -> Error {
    Error::format("motion writer", e.to_string())
}

impl<W: Write> MotionStreamWriter<W> {
    pub fn new(mut w: W, id: &str, fps: f64) -> Result<Self> {
        write!(w, "{{\"id\":").map_err(io_err)?;
        serde_json::to_writer(&mut w, id).map_err(json_err)?;
        write!(w, ",\"fps\":").map_err(io_err)?;
        serde_json::to_writer(&mut w, &fps).map_err(json_err)?;
        write!(w, ",\"frames\":[").map_err(io_err)?;
        Ok(MotionStreamWriter { w, frames: 0 })
    }

    pub fn push(&mut self, frame: &Frame) -> Result<()> {
        if self.frames > 0 {
            self.w.write_all(b",").map_err(io_err)?;
        }
        self.w.write_all(b"\n").map_err(io_err)?;
        let rec = FrameRecord {
            root_pos: frame.root,
            quat: Some(frame.rot.clone()),
            axis_angle: None,
        };
        serde_json::to_writer(&mut self.w, &rec).map_err(json_err)?;
        self.frames += 1;
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn finish(mut self) -> Result<W> {
        self.w.write_all(b"\n]}\n").map_err(io_err)?;
        Ok(self.w)
    }
}

pub fn write_motion(path: &Path, clip: &MotionClip) -> Result<()> {
    write_atomic(path, |w| {
        let mut s = MotionStreamWriter::new(w, clip.id(), clip.fps())?;
        for f in 0..clip.frames() {
            s.push(&clip.frame(f))?;
        }
        s.finish()?;
        Ok(())
    })
}

/// Reads a beat file; timestamps must be finite and strictly increasing.
pub fn read_beats(path: &Path) -> Result<Vec<f64>> {
    let rec = path.display().to_string();
    let mut out: Vec<f64> = Vec::new();
    for (i, l) in read_to_string(path)?.lines().enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        let t = l
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::format(&rec, format!("line {}: {e}", i + 1)))?;
        if !t.is_finite() || out.last().is_some_and(|&p| t <= p) {
            return Err(Error::format(&rec, format!("line {}: beats must be finite and ascending", i + 1)));
        }
        out.push(t);
    }
    Ok(out)
}

pub fn write_beats(path: &Path, beats: &[f64]) -> Result<()> {
    let mut s = String::new();
    for t in beats {
        s.push_str(&format!("{t}\n"));
    }
    crate::artifact::write_bytes_atomic(path, s.as_bytes())
}

pub fn read_features(path: &Path) -> Result<Array2<f32>> {
    let rec = path.display().to_string();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = bytes.as_slice();
    let bad = |m: &str| Error::format(&rec, m.to_string());
    let rows = r.read_u32::<LE>().map_err(|_| bad("truncated header"))? as usize;
    let cols = r.read_u32::<LE>().map_err(|_| bad("truncated header"))? as usize;
    if r.len() != rows * cols * 4 {
        return Err(bad(&format!(
            "header says {rows}x{cols} but payload holds {} bytes",
            r.len()
        )));
    }
    let mut data = vec![0f32; rows * cols];
    r.read_f32_into::<LE>(&mut data)
        .map_err(|_| bad("truncated payload"))?;
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

pub fn write_features(path: &Path, m: &Array2<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + m.len() * 4);
    buf.write_u32::<LE>(m.nrows() as u32).expect("vec write");
    buf.write_u32::<LE>(m.ncols() as u32).expect("vec write");
    for &v in m.iter() {
        buf.write_f32::<LE>(v).expect("vec write");
    }
    crate::artifact::write_bytes_atomic(path, &buf)
}

/// Loads and validates a corpus directory.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(Error::format(dir.display().to_string(), "manifest missing"));
    }
    let manifest: Manifest = serde_json::from_str(&read_to_string(&manifest_path)?)
        .map_err(|e| Error::format("manifest.json", e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(
            "manifest.json",
            format!("unsupported version {}", manifest.version),
        ));
    }
    let mut clips = Vec::new();
    let mut beats = BTreeMap::new();
    let mut music = BTreeMap::new();
    let mut motion = BTreeMap::new();
    for c in &manifest.clips {
        let clip = read_motion(&dir.join(&c.motion_file)).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(&c.id, message),
            other => other,
        })?;
        if clip.id() != c.id {
            return Err(Error::format(
                &c.id,
                format!("motion file declares id {}", clip.id()),
            ));
        }
        clips.push(clip);
        beats.insert(c.id.clone(), read_beats(&dir.join(&c.beats_file))?);
        music.insert(c.id.clone(), read_features(&dir.join(&c.music_feat_file))?);
        motion.insert(c.id.clone(), read_features(&dir.join(&c.motion_feat_file))?);
    }
    let corpus = Corpus {
        skeleton: manifest.skeleton,
        fps: manifest.fps,
        windowing: manifest.windowing,
        feat_dims: manifest.feat_dims,
        clips,
        beats,
        music_feats: music,
        motion_feats: motion,
    };
    corpus.validate()?;
    Ok(corpus)
}

/// Writes a corpus directory (manifest last, so a crash never leaves a
/// manifest pointing at missing files).
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    corpus.validate()?;
    let mut entries = Vec::new();
    for clip in &corpus.clips {
        let id = clip.id();
        let entry = ManifestClip {
            id: id.to_string(),
            motion_file: format!("motion/{id}.json"),
            beats_file: format!("beats/{id}.beats"),
            music_feat_file: format!("music/{id}.f32"),
            motion_feat_file: format!("motion_feats/{id}.f32"),
        };
        write_motion(&dir.join(&entry.motion_file), clip)?;
        write_beats(&dir.join(&entry.beats_file), &corpus.beats[id])?;
        write_features(&dir.join(&entry.music_feat_file), &corpus.music_feats[id])?;
        write_features(&dir.join(&entry.motion_feat_file), &corpus.motion_feats[id])?;
        entries.push(entry);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        skeleton: corpus.skeleton.clone(),
        fps: corpus.fps,
        windowing: corpus.windowing,
        feat_dims: corpus.feat_dims,
        clips: entries,
    };
    let path = dir.join("manifest.json");
    write_atomic(&path, |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest)
            .map_err(|e| Error::format("manifest.json", e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))
    })
}
