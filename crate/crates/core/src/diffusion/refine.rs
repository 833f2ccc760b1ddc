use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::ConditionSet;
use super::repr::{from_repr, to_repr};
use super::sample::sample;
use super::train::{beat_vector, DiffusionModel};
use crate::contrastive::{embed_one, rank_scores, ContrastiveModel, Side};
use crate::error::{Error, Result};
use crate::graph::MotionGraph;
use crate::kinematics::{Frame, MotionClip};
use crate::synthesis::{node_embeddings, Blender, GenerationSink};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Reference motions per chunk: the chunk itself plus `top_k - 1`
    /// retrieved graph nodes.
    pub top_k: usize,
    /// Overlap crossfaded between consecutive refined chunks.
    pub blend_frames: usize,
    /// Frames covered by each music feature row.
    pub segment_frames: usize,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            top_k: 3,
            blend_frames: 8,
            segment_frames: 30,
            seed: 0,
        }
    }
}

/// Stage-1 output together with the music it was made for.
pub struct RefineInputs<'a> {
    pub motion: &'a MotionClip,
    /// One row per music segment.
    pub music: &'a Array2<f64>,
    /// Beat times in seconds.
    pub beats: &'a [f64],
    pub graph: &'a MotionGraph,
    pub contrastive: &'a ContrastiveModel,
}

struct Frames(Vec<Frame>);

impl GenerationSink for Frames {
    fn frame(&mut self, frame: &Frame) -> Result<()> {
        self.0.push(frame.clone());
        Ok(())
    }
}

fn chunk_seed(seed: u64, chunk: usize) -> u64 {
    seed ^ (chunk as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Re-synthesizes `motion` window by window from the diffusion model and
/// crossfades the windows back together. The output has the input's
/// length and starts at its first root position.
pub fn refine(model: &DiffusionModel, inputs: &RefineInputs, cfg: &RefineConfig) -> Result<MotionClip> {
    let dims = *model.denoiser.dims();
    let (frames, w) = (dims.frames, cfg.blend_frames);
    let motion = inputs.motion;
    let g = inputs.graph;
    if cfg.top_k == 0 || cfg.segment_frames == 0 {
        return Err(Error::Config("top_k and segment_frames must be positive".into()));
    }
    if 2 * w > frames {
        return Err(Error::Config(format!("blend of {w} frames needs windows of at least {}", 2 * w)));
    }
    if motion.frames() < frames {
        return Err(Error::Config(format!(
            "motion has {} frames, refinement windows need {frames}",
            motion.frames()
        )));
    }
    if motion.joints() != g.skeleton().joint_count() {
        return Err(Error::Shape("motion and graph skeletons differ".into()));
    }
    if inputs.music.nrows() == 0 || inputs.music.ncols() != dims.music {
        return Err(Error::Shape(format!(
            "music features {:?} do not match width {}",
            inputs.music.dim(),
            dims.music
        )));
    }
    let node_emb = node_embeddings(g, inputs.contrastive)?;
    let node_windows: Vec<Array2<f64>> = g.nodes().iter().map(|n| model.normalizer.normalize(&to_repr(&n.clip))).collect();
    let segments = inputs.music.nrows();
    let segment_of = |f: usize| (f / cfg.segment_frames) % segments;
    let stride = frames - w;
    let fps = motion.fps();
    let mut blender = Blender::new(g.skeleton().clone(), w, motion.frames());
    let mut sink = Frames(Vec::with_capacity(motion.frames()));
    let mut chunk = 0usize;
    while chunk == 0 || !blender.covers_limit() {
        let start = (chunk * stride).min(motion.frames() - frames);
        let source = motion.slice(start, frames, "chunk")?;
        let centre = segment_of(start + frames / 2);
        let query = inputs.music.row(centre).to_vec();
        let emb = embed_one(inputs.contrastive, &query, Side::Music)?;
        let scores = node_emb.dot(&emb).to_vec();
        let mut refs = vec![model.normalizer.normalize(&to_repr(&source))];
        refs.extend(
            rank_scores(&scores, (cfg.top_k - 1).min(g.len()))
                .into_iter()
                .map(|(i, _)| node_windows[i].clone()),
        );
        let c = ConditionSet {
            music: Array2::from_shape_fn((frames, dims.music), |(f, k)| inputs.music[[segment_of(start + f), k]]),
            beat: beat_vector(inputs.beats, fps, start, frames),
            topk_motions: refs,
            contrastive_emb: emb.to_vec(),
        };
        let x = sample(&model.denoiser, &c, &model.schedule, chunk_seed(cfg.seed, chunk))?;
        let root = motion.root(0);
        let clip = from_repr(&format!("refined{chunk}"), fps, &model.normalizer.denormalize(&x), [root[0], root[2]])?;
        if chunk == 0 {
            blender.start(&clip, &mut sink)?;
        } else {
            blender.append(&clip, &mut sink)?;
        }
        chunk += 1;
    }
    blender.finish(&mut sink)?;
    MotionClip::from_frames(format!("{}_refined", motion.id()), fps, &sink.0)
}
