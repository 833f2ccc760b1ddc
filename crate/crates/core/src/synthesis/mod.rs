//! Music-guided traversal of a pruned motion graph (`motion_mg`).
//!
//! Each music segment picks one node: the first by similarity over all
//! nodes, the rest among the current node's successors. Consecutive nodes
//! are crossfaded over `blend_frames` overlapping frames. Frames are pushed
//! to a [`GenerationSink`] as soon as they are final, so memory does not grow
//! with the requested length.

mod blend;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::contrastive::{embed, ContrastiveModel, Side};
use crate::error::{Error, Result};
use crate::graph::MotionGraph;
use crate::kinematics::{Frame, MotionClip};

pub use blend::{blend_transition, smoothstep, Blender, SeamMeasure, Step};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Strategy {
    Greedy,
    /// Plans the whole node sequence, keeping the `width` best partial walks
    /// by summed similarity.
    Beam { width: usize },
}

/// Which music segment drives the choice of each node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentBinding {
    /// Node `i` follows segment `i`, cycling through the segments.
    PerNode,
    /// Node `i` follows the segment containing the output frame where the
    /// node starts, with segments `segment_frames` apart.
    ByTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub blend_frames: usize,
    pub strategy: Strategy,
    pub binding: SegmentBinding,
    /// Segment spacing for [`SegmentBinding::ByTime`].
    pub segment_frames: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            blend_frames: 8,
            strategy: Strategy::Greedy,
            binding: SegmentBinding::PerNode,
            segment_frames: 30,
        }
    }
}

impl SynthesisConfig {
    fn validate(&self, g: &MotionGraph) -> Result<()> {
        if let Strategy::Beam { width: 0 } = self.strategy {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if self.binding == SegmentBinding::ByTime && self.segment_frames == 0 {
            return Err(Error::Config("segment_frames must be positive".into()));
        }
        let shortest = g.nodes().iter().map(|n| n.clip.frames()).min().unwrap_or(0);
        if 2 * self.blend_frames > shortest || self.blend_frames >= shortest {
            return Err(Error::Config(format!(
                "blend_frames {} too long for {shortest}-frame windows (at most half a window)",
                self.blend_frames
            )));
        }
        Ok(())
    }
}

/// One node-to-node transition of a generated motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub from: usize,
    pub to: usize,
    /// Output frame index of the first frame influenced by `to`.
    pub frame: usize,
    /// Seam discontinuity without blending: the largest per-joint distance
    /// of `to`'s aligned first frame from where `from`'s last two frames
    /// predict it at constant velocity.
    pub pre: f64,
    /// The same residual, maximized over every output frame from the first
    /// blended frame through the first unblended frame of `to`.
    pub post: f64,
    /// Largest raw per-joint inter-frame step at the unblended seam.
    pub pre_step: f64,
    /// Largest raw per-joint inter-frame step across the blended span.
    pub post_step: f64,
}

/// Receives generated output as it becomes final.
pub trait GenerationSink {
    fn frame(&mut self, frame: &Frame) -> Result<()>;

    fn node(&mut self, _node: usize) -> Result<()> {
        Ok(())
    }

    fn transition(&mut self, _t: &Transition) -> Result<()> {
        Ok(())
    }
}

/// Discards frames; useful for measuring traces alone.
pub struct NullSink;

impl GenerationSink for NullSink {
    fn frame(&mut self, _frame: &Frame) -> Result<()> {
        Ok(())
    }
}

#[derive(Default)]
struct Collect {
    frames: Vec<Frame>,
    nodes: Vec<usize>,
    transitions: Vec<Transition>,
}

impl GenerationSink for Collect {
    fn frame(&mut self, frame: &Frame) -> Result<()> {
        self.frames.push(frame.clone());
        Ok(())
    }

    fn node(&mut self, node: usize) -> Result<()> {
        self.nodes.push(node);
        Ok(())
    }

    fn transition(&mut self, t: &Transition) -> Result<()> {
        self.transitions.push(t.clone());
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GenerationTrace {
    pub nodes: Vec<usize>,
    pub transitions: Vec<Transition>,
    pub motion: MotionClip,
}

/// JSON form of a trace (node window ids alongside indices; motion omitted).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub frames: usize,
    pub blend_frames: usize,
    pub nodes: Vec<usize>,
    pub node_ids: Vec<String>,
    pub transitions: Vec<Transition>,
}

impl GenerationTrace {
    pub fn record(&self, g: &MotionGraph, blend_frames: usize) -> TraceRecord {
        TraceRecord {
            frames: self.motion.frames(),
            blend_frames,
            nodes: self.nodes.clone(),
            node_ids: self.nodes.iter().map(|&n| g.node(n).clip.id().to_string()).collect(),
            transitions: self.transitions.clone(),
        }
    }

    pub fn mean_post(&self) -> f64 {
        mean(self.transitions.iter().map(|t| t.post))
    }

    pub fn mean_pre(&self) -> f64 {
        mean(self.transitions.iter().map(|t| t.pre))
    }

    pub fn max_post_step(&self) -> f64 {
        self.transitions.iter().map(|t| t.post_step).fold(0.0, f64::max)
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Unit motion embeddings of every node, one row per node.
pub fn node_embeddings(g: &MotionGraph, model: &ContrastiveModel) -> Result<Array2<f64>> {
    let dim = g.nodes().first().map_or(0, |n| n.motion_feat.len());
    let mut feats = Array2::zeros((g.len(), dim));
    for (i, n) in g.nodes().iter().enumerate() {
        if n.motion_feat.len() != dim {
            return Err(Error::Shape(format!("node {i} has a different motion feature size")));
        }
        for (k, &v) in n.motion_feat.iter().enumerate() {
            feats[[i, k]] = v;
        }
    }
    embed(model, &feats.view(), Side::Motion)
}

fn require_pruned(g: &MotionGraph) -> Result<()> {
    if !g.is_pruned() || g.is_empty() {
        return Err(Error::Invariant("generation needs a pruned, non-empty graph".into()));
    }
    Ok(())
}

fn score(node_emb: &Array2<f64>, node: usize, music_emb: &[f64]) -> f64 {
    node_emb.row(node).iter().zip(music_emb).map(|(a, b)| a * b).sum()
}

/// Highest-scoring candidate, ties to the smallest node id.
fn best_of(candidates: impl Iterator<Item = usize>, node_emb: &Array2<f64>, music_emb: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for c in candidates {
        let s = score(node_emb, c, music_emb);
        best = match best {
            Some((b, bs)) if bs > s || (bs == s && b < c) => Some((b, bs)),
            _ => Some((c, s)),
        };
    }
    best.map(|(b, _)| b)
}

/// The successor of `current` whose motion embedding is most similar to
/// `music_seg_emb`; ties go to the smallest node id.
pub fn select_next(
    g: &MotionGraph,
    current: usize,
    music_seg_emb: &[f64],
    model: &ContrastiveModel,
) -> Result<usize> {
    require_pruned(g)?;
    if current >= g.len() {
        return Err(Error::Invariant(format!("node {current} not in graph")));
    }
    let emb = node_embeddings(g, model)?;
    select_next_with(g, current, music_seg_emb, &emb)
}

/// [`select_next`] with precomputed node embeddings.
pub fn select_next_with(g: &MotionGraph, current: usize, music_seg_emb: &[f64], node_emb: &Array2<f64>) -> Result<usize> {
    best_of(g.successors(current).iter().copied(), node_emb, music_seg_emb)
        .ok_or_else(|| Error::Invariant(format!("node {current} has no successors")))
}

/// Number of nodes a walk needs to cover `length` output frames.
fn nodes_needed(length: usize, window: usize, w: usize) -> usize {
    if length <= window {
        1
    } else {
        1 + (length - window).div_ceil(window - w)
    }
}

struct Walk<'a> {
    g: &'a MotionGraph,
    node_emb: Array2<f64>,
    music_emb: Array2<f64>,
    cfg: SynthesisConfig,
}

impl Walk<'_> {
    fn segment(&self, index: usize, start_frame: usize) -> usize {
        let s = self.music_emb.nrows();
        match self.cfg.binding {
            SegmentBinding::PerNode => index % s,
            SegmentBinding::ByTime => (start_frame / self.cfg.segment_frames) % s,
        }
    }

    fn music(&self, seg: usize) -> Vec<f64> {
        self.music_emb.row(seg).to_vec()
    }

    fn first(&self) -> usize {
        let m = self.music(self.segment(0, 0));
        best_of(0..self.g.len(), &self.node_emb, &m).expect("non-empty graph")
    }

    fn next(&self, current: usize, index: usize, start_frame: usize) -> Result<usize> {
        let m = self.music(self.segment(index, start_frame));
        select_next_with(self.g, current, &m, &self.node_emb)
    }

    /// Output frame where node `index` starts when every window has `window`
    /// frames.
    fn start_frame(&self, index: usize, window: usize) -> usize {
        index * (window - self.cfg.blend_frames)
    }

    fn beam(&self, count: usize, width: usize, window: usize) -> Vec<usize> {
        let seg0 = self.music(self.segment(0, 0));
        let mut starts: Vec<(usize, f64)> = (0..self.g.len())
            .map(|n| (n, score(&self.node_emb, n, &seg0)))
            .collect();
        starts.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut beams: Vec<(Vec<usize>, f64)> = starts
            .into_iter()
            .take(width)
            .map(|(n, s)| (vec![n], s))
            .collect();
        for index in 1..count {
            let m = self.music(self.segment(index, self.start_frame(index, window)));
            let mut grown: Vec<(Vec<usize>, f64)> = Vec::new();
            for (path, total) in &beams {
                let last = *path.last().expect("non-empty path");
                for &s in self.g.successors(last) {
                    let mut p = path.clone();
                    p.push(s);
                    grown.push((p, total + score(&self.node_emb, s, &m)));
                }
            }
            grown.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            grown.truncate(width);
            beams = grown;
        }
        beams.swap_remove(0).0
    }
}

/// Walks the graph and streams exactly `length_frames` frames into `sink`.
pub fn generate_into(
    g: &MotionGraph,
    music_feats: &ArrayView2<f64>,
    model: &ContrastiveModel,
    length_frames: usize,
    cfg: &SynthesisConfig,
    sink: &mut dyn GenerationSink,
) -> Result<()> {
    if length_frames == 0 {
        return Err(Error::Config("length_frames must be at least 1".into()));
    }
    if music_feats.nrows() == 0 {
        return Err(Error::Shape("no music segments".into()));
    }
    require_pruned(g)?;
    cfg.validate(g)?;
    let walk = Walk {
        g,
        node_emb: node_embeddings(g, model)?,
        music_emb: embed(model, music_feats, Side::Music)?,
        cfg: *cfg,
    };
    let mut blender = Blender::new(g.skeleton().clone(), cfg.blend_frames, length_frames);
    let plan = match cfg.strategy {
        Strategy::Greedy => None,
        Strategy::Beam { width } => {
            let window = g.nodes().iter().map(|n| n.clip.frames()).min().unwrap_or(0);
            Some(walk.beam(nodes_needed(length_frames, window, cfg.blend_frames), width, window))
        }
    };
    let mut current = match &plan {
        Some(p) => p[0],
        None => walk.first(),
    };
    sink.node(current)?;
    blender.start(&g.node(current).clip, sink)?;
    let mut index = 1;
    while !blender.covers_limit() {
        let next = match &plan {
            Some(p) if index < p.len() => p[index],
            _ => walk.next(current, index, blender.pending_start())?,
        };
        sink.node(next)?;
        let seam = blender.append(&g.node(next).clip, sink)?;
        sink.transition(&Transition {
            from: current,
            to: next,
            frame: seam.first_frame,
            pre: seam.pre.residual,
            post: seam.post.residual,
            pre_step: seam.pre.step,
            post_step: seam.post.step,
        })?;
        current = next;
        index += 1;
    }
    blender.finish(sink)
}

/// Generates `length_frames` frames of `motion_mg` in memory.
pub fn generate(
    g: &MotionGraph,
    music_feats: &ArrayView2<f64>,
    model: &ContrastiveModel,
    length_frames: usize,
    cfg: &SynthesisConfig,
) -> Result<GenerationTrace> {
    if length_frames == 1 {
        return Err(Error::Config(
            "an in-memory clip needs at least 2 frames; stream single frames with generate_into".into(),
        ));
    }
    let mut c = Collect::default();
    generate_into(g, music_feats, model, length_frames, cfg, &mut c)?;
    let motion = MotionClip::from_frames("motion_mg", g.fps(), &c.frames)?;
    Ok(GenerationTrace {
        nodes: c.nodes,
        transitions: c.transitions,
        motion,
    })
}
