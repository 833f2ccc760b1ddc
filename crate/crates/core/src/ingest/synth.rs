//! Procedural corpus used by tests, examples and the CLI `synth-corpus`.
//!
//! Each clip is an in-place sinusoidal dance gait on the bundled biped with
//! per-clip tempo, phase and amplitudes and a slow amplitude envelope, so
//! every window has distinct motion statistics. Beats fall on gait-cycle
//! extrema. Every eighth clip is danced two meters off the origin, which
//! leaves its windows outside the main strongly connected component of a
//! world-space motion graph. The paired features are fixed linear maps of
//! standardized per-window motion statistics plus seeded Gaussian noise.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{window_records, Corpus, FeatDims, WindowingConfig};
use crate::error::Result;
use crate::kinematics::{forward_kinematics, quat_from_axis_angle, velocities, MotionClip, Skeleton};

/// Seed of the fixed feature maps; independent of the corpus seed.
const FEATURE_MAP_SEED: u64 = 0x5eed_f00d;
const STATS_DIM: usize = 16;

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub fps: f64,
    pub clip_seconds: f64,
    pub windowing: WindowingConfig,
    /// Scales the spread of per-clip tempo and amplitude parameters.
    pub variation: f64,
    /// Width of the uniform range gait phases are drawn from (radians).
    pub phase_spread: f64,
    pub feature_noise: f64,
    pub feat_dims: FeatDims,
    /// Every clip whose index is congruent to `offset_every - 1` modulo
    /// `offset_every` is performed at `stage_offset` instead of the origin
    /// (0 disables). World-space edges rarely reach such clips.
    pub offset_every: usize,
    pub stage_offset: [f64; 3],
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            fps: 30.0,
            clip_seconds: 5.0,
            windowing: WindowingConfig::default(),
            variation: 1.0,
            phase_spread: TAU,
            feature_noise: 0.05,
            feat_dims: FeatDims {
                music: 16,
                motion: 12,
            },
            offset_every: 8,
            stage_offset: [2.0, 0.0, 0.0],
        }
    }
}

/// Deterministic corpus of `n_clips` five-second clips (four windows each
/// under the default windowing).
pub fn synthesize_test_corpus(seed: u64, n_clips: usize) -> Corpus {
    synthesize_corpus_with(seed, n_clips, &SynthOptions::default())
        .expect("default synthesis options are valid")
}

struct Gait {
    omega: f64,
    phase: f64,
    leg: f64,
    knee: f64,
    lean: f64,
    sway: f64,
    nod: f64,
    yaw: f64,
    root_sway: [f64; 2],
    bob: f64,
    env_period: f64,
    env_phase: f64,
}

impl Gait {
    fn draw(rng: &mut ChaCha8Rng, o: &SynthOptions) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let v = o.variation;
        Gait {
            omega: TAU * (1.0 + v * u(-0.3, 0.3)),
            phase: u(0.0, 1.0) * o.phase_spread,
            leg: 0.4 + v * u(-0.2, 0.2),
            knee: 0.5 + v * u(-0.2, 0.2),
            lean: 0.1 + v * u(-0.05, 0.05),
            sway: 0.12 + v * u(-0.06, 0.06),
            nod: 0.1 + v * u(-0.05, 0.05),
            yaw: 0.15 + v * u(-0.1, 0.1),
            root_sway: [0.05 + v * u(-0.03, 0.03), 0.05 + v * u(-0.03, 0.03)],
            bob: 0.03 + v * u(-0.015, 0.015),
            env_period: 3.0 + 3.0 * u(0.0, 1.0),
            env_phase: u(0.0, TAU),
        }
    }

    fn envelope(&self, t: f64) -> f64 {
        1.0 + 0.3 * (TAU * t / self.env_period + self.env_phase).sin()
    }

    fn clip(&self, id: String, fps: f64, frames: usize) -> Result<MotionClip> {
        let mut root = Array2::zeros((frames, 3));
        let mut rot = Array3::zeros((frames, 8, 4));
        for f in 0..frames {
            let t = f as f64 / fps;
            let th = self.omega * t + self.phase;
            let e = self.envelope(t);
            root[[f, 0]] = self.root_sway[0] * (th / 2.0).sin();
            root[[f, 1]] = 0.9 - self.bob * (1.0 - (2.0 * th).cos()) / 2.0;
            root[[f, 2]] = self.root_sway[1] * (th / 2.0 + 0.5).sin();
            let aa: [[f64; 3]; 8] = [
                [0.0, self.yaw * e * (th / 2.0).sin(), 0.0],
                [self.lean * e * th.sin(), 0.0, 0.0],
                [0.0, 0.0, self.sway * e * (th + 1.0).sin()],
                [self.nod * (2.0 * th).sin(), 0.0, 0.0],
                [self.leg * e * th.sin(), 0.0, 0.0],
                [-self.knee * e * (1.0 - th.cos()) / 2.0, 0.0, 0.0],
                [self.leg * e * (th + PI).sin(), 0.0, 0.0],
                [-self.knee * e * (1.0 - (th + PI).cos()) / 2.0, 0.0, 0.0],
            ];
            for (j, v) in aa.iter().enumerate() {
                let q = quat_from_axis_angle(*v);
                for k in 0..4 {
                    rot[[f, j, k]] = q[k];
                }
            }
        }
        MotionClip::new(id, fps, root, rot)
    }

    /// Times where the leg swing peaks (both directions).
    fn beats(&self, duration: f64) -> Vec<f64> {
        let mut out = Vec::new();
        let mut k = ((self.phase - PI / 2.0) / PI).floor() as i64;
        loop {
            let t = (PI / 2.0 + k as f64 * PI - self.phase) / self.omega;
            if t >= duration {
                break;
            }
            if t >= 0.0 {
                out.push(t);
            }
            k += 1;
        }
        out
    }
}

/// Per-window statistics: mean speed and vertical standard deviation of
/// every joint.
fn window_stats(skeleton: &Skeleton, clip: &MotionClip) -> Result<Array1<f64>> {
    let pose = forward_kinematics(skeleton, clip)?;
    let vel = velocities(&pose, clip.fps())?;
    let joints = skeleton.joint_count();
    let mut out = Array1::zeros(2 * joints);
    for j in 0..joints {
        let n = vel.dim().0 as f64;
        out[j] = (0..vel.dim().0)
            .map(|f| {
                let v = [vel[[f, j, 0]], vel[[f, j, 1]], vel[[f, j, 2]]];
                crate::kinematics::norm(v)
            })
            .sum::<f64>()
            / n;
        let ys: Vec<f64> = (0..pose.frames()).map(|f| pose.joint_pos[[f, j, 1]]).collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        out[joints + j] =
            (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64).sqrt();
    }
    Ok(out)
}

fn feature_map(rng: &mut ChaCha8Rng, rows: usize) -> Array2<f64> {
    let scale = 1.0 / (STATS_DIM as f64).sqrt();
    Array2::from_shape_fn((rows, STATS_DIM), |_| {
        scale * rng.sample::<f64, _>(StandardNormal)
    })
}

pub fn synthesize_corpus_with(seed: u64, n_clips: usize, o: &SynthOptions) -> Result<Corpus> {
    o.windowing.validate(o.fps)?;
    let skeleton = Skeleton::biped();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (o.clip_seconds * o.fps).round() as usize;
    let mut clips = Vec::with_capacity(n_clips);
    let mut beats = BTreeMap::new();
    for i in 0..n_clips {
        let gait = Gait::draw(&mut rng, o);
        let id = format!("clip_{i:03}");
        beats.insert(id.clone(), gait.beats(frames as f64 / o.fps));
        let clip = gait.clip(id, o.fps, frames)?;
        let displaced = o.offset_every > 0 && i % o.offset_every == o.offset_every - 1;
        clips.push(if displaced { clip.translated(o.stage_offset) } else { clip });
    }

    let mut corpus = Corpus {
        skeleton,
        fps: o.fps,
        windowing: o.windowing,
        feat_dims: o.feat_dims,
        clips,
        beats,
        music_feats: BTreeMap::new(),
        motion_feats: BTreeMap::new(),
    };
    // Window statistics need the windows, which need a corpus; features are
    // filled in afterwards.
    let mut stub = corpus.clone();
    for c in &stub.clips {
        let rows = o.windowing.segment_count(c.frames(), o.fps);
        stub.music_feats.insert(c.id().into(), Array2::zeros((rows, o.feat_dims.music)));
        stub.motion_feats.insert(c.id().into(), Array2::zeros((rows, o.feat_dims.motion)));
    }
    let windows = window_records(&stub, &o.windowing)?;
    let stats: Vec<Array1<f64>> = windows
        .iter()
        .map(|w| window_stats(&corpus.skeleton, &w.clip))
        .collect::<Result<_>>()?;

    let n = stats.len().max(1) as f64;
    let mut mean = Array1::<f64>::zeros(STATS_DIM);
    for s in &stats {
        mean += s;
    }
    mean /= n;
    let mut std = Array1::<f64>::zeros(STATS_DIM);
    for s in &stats {
        std += &(s - &mean).mapv(|x| x * x);
    }
    std.mapv_inplace(|v| {
        let s = (v / n).sqrt();
        if s < 1e-12 {
            1.0
        } else {
            s
        }
    });

    let mut map_rng = ChaCha8Rng::seed_from_u64(FEATURE_MAP_SEED);
    let music_map = feature_map(&mut map_rng, o.feat_dims.music);
    let motion_map = feature_map(&mut map_rng, o.feat_dims.motion);

    for c in &corpus.clips {
        let rows = o.windowing.segment_count(c.frames(), o.fps);
        corpus.music_feats.insert(c.id().into(), Array2::zeros((rows, o.feat_dims.music)));
        corpus.motion_feats.insert(c.id().into(), Array2::zeros((rows, o.feat_dims.motion)));
    }
    for (w, s) in windows.iter().zip(&stats) {
        let z = (s - &mean) / &std;
        let music = music_map.dot(&z);
        let motion = motion_map.dot(&z);
        let mrow = corpus.music_feats.get_mut(&w.source).expect("inserted");
        for (k, v) in music.iter().enumerate() {
            let noise: f64 = rng.sample(StandardNormal);
            mrow[[w.segment, k]] = (v + o.feature_noise * noise) as f32;
        }
        let drow = corpus.motion_feats.get_mut(&w.source).expect("inserted");
        for (k, v) in motion.iter().enumerate() {
            let noise: f64 = rng.sample(StandardNormal);
            drow[[w.segment, k]] = (v + o.feature_noise * noise) as f32;
        }
    }
    corpus.validate()?;
    Ok(corpus)
}
