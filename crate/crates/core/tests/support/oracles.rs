//! Slow, direct reimplementations used to cross-check the library.
#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

use motionrag_core::kinematics::{MotionClip, Skeleton};
use ndarray::ArrayView2;

pub type P3 = [f64; 3];

fn qmul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

fn rotate(q: [f64; 4], v: P3) -> P3 {
    let p = qmul(qmul(q, [0.0, v[0], v[1], v[2]]), [q[0], -q[1], -q[2], -q[3]]);
    [p[1], p[2], p[3]]
}

/// Joint positions per frame by walking parents with plain quaternion
/// products.
pub fn fk(skeleton: &Skeleton, clip: &MotionClip, world: bool) -> Vec<Vec<P3>> {
    let joints = skeleton.joint_count();
    (0..clip.frames())
        .map(|f| {
            let mut pos = vec![[0.0; 3]; joints];
            let mut rot = vec![[1.0, 0.0, 0.0, 0.0]; joints];
            for j in 0..joints {
                let q = clip.quat(f, j);
                match skeleton.parent(j) {
                    None => {
                        pos[j] = if world { clip.root(f) } else { [0.0; 3] };
                        rot[j] = q;
                    }
                    Some(p) => {
                        let o = rotate(rot[p], skeleton.offset(j));
                        pos[j] = [pos[p][0] + o[0], pos[p][1] + o[1], pos[p][2] + o[2]];
                        rot[j] = qmul(rot[p], q);
                    }
                }
            }
            pos
        })
        .collect()
}

pub fn dist(a: P3, b: P3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// `(p[f+1] - p[f]) * fps` for every frame pair.
pub fn fd_velocity(pos: &[Vec<P3>], fps: f64) -> Vec<Vec<P3>> {
    pos.windows(2)
        .map(|w| {
            w[0].iter()
                .zip(&w[1])
                .map(|(a, b)| [(b[0] - a[0]) * fps, (b[1] - a[1]) * fps, (b[2] - a[2]) * fps])
                .collect()
        })
        .collect()
}

/// Per joint: mean over all samples of the distance to the mean of the
/// last `n` samples.
fn thresholds(s: &[Vec<P3>], n: usize) -> Vec<f64> {
    let joints = s[0].len();
    let len = s.len();
    (0..joints)
        .map(|j| {
            let mut m = [0.0; 3];
            for row in &s[len - n..] {
                for k in 0..3 {
                    m[k] += row[j][k] / n as f64;
                }
            }
            s.iter().map(|row| dist(row[j], m)).sum::<f64>() / len as f64
        })
        .collect()
}

/// Every ordered pair `a != b` passing the transition rule, checked one
/// pair at a time.
pub fn alg1_edges(clips: &[MotionClip], skeleton: &Skeleton, n: usize, min_joints: usize, world: bool) -> BTreeSet<(usize, usize)> {
    let pos: Vec<_> = clips.iter().map(|c| fk(skeleton, c, world)).collect();
    let vel: Vec<_> = pos.iter().zip(clips).map(|(p, c)| fd_velocity(p, c.fps())).collect();
    let mut edges = BTreeSet::new();
    for a in 0..clips.len() {
        let tp = thresholds(&pos[a], n);
        let tv = thresholds(&vel[a], n);
        let last_p = pos[a].last().unwrap();
        let last_v = vel[a].last().unwrap();
        for b in 0..clips.len() {
            if a == b {
                continue;
            }
            let below = |d: f64, t: f64| {
                let z = |x: f64| if x < 1e-9 { 0.0 } else { x };
                z(d) < z(t)
            };
            let mut np = 0;
            let mut nv = 0;
            for j in 0..skeleton.joint_count() {
                if below(dist(last_p[j], pos[b][0][j]), tp[j]) {
                    np += 1;
                }
                if below(dist(last_v[j], vel[b][0][j]), tv[j]) {
                    nv += 1;
                }
            }
            if np >= min_joints && nv >= min_joints {
                edges.insert((a, b));
            }
        }
    }
    edges
}

/// `a -> b` when `b` is the window of the same source starting next after
/// `a`.
pub fn continuation_edges(windows: &[(String, usize)]) -> BTreeSet<(usize, usize)> {
    let mut edges = BTreeSet::new();
    for (a, (src, start)) in windows.iter().enumerate() {
        let next = windows
            .iter()
            .enumerate()
            .filter(|(_, (s, st))| s == src && st > start)
            .min_by_key(|(i, (_, st))| (*st, *i));
        if let Some((b, _)) = next {
            edges.insert((a, b));
        }
    }
    edges
}

pub fn reachable(adj: &[Vec<usize>], from: usize) -> Vec<bool> {
    let mut seen = vec![false; adj.len()];
    let mut queue = VecDeque::from([from]);
    seen[from] = true;
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    seen
}

/// Every node reaches every other node.
pub fn strongly_connected(adj: &[Vec<usize>]) -> bool {
    (0..adj.len()).all(|v| reachable(adj, v).iter().all(|&r| r))
}

/// Size of the largest set of mutually reachable nodes.
pub fn largest_mutual_set(adj: &[Vec<usize>]) -> usize {
    let reach: Vec<Vec<bool>> = (0..adj.len()).map(|v| reachable(adj, v)).collect();
    (0..adj.len())
        .map(|v| (0..adj.len()).filter(|&w| reach[v][w] && reach[w][v]).count())
        .max()
        .unwrap_or(0)
}

pub fn bas(music: &[f64], dance: &[f64], sigma: f64) -> f64 {
    let mut total = 0.0;
    for &m in music {
        let mut best = f64::INFINITY;
        for &d in dance {
            let sq = (m - d) * (m - d);
            if sq < best {
                best = sq;
            }
        }
        total += (-best / (2.0 * sigma * sigma)).exp();
    }
    total / music.len() as f64
}

pub fn diversity(rows: &ArrayView2<f64>) -> f64 {
    let n = rows.nrows();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i < j {
                let mut sq = 0.0;
                for c in 0..rows.ncols() {
                    sq += (rows[[i, c]] - rows[[j, c]]).powi(2);
                }
                sum += sq.sqrt();
                pairs += 1;
            }
        }
    }
    sum / pairs as f64
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|i| {
            buf[i] = x[i] + h;
            let up = f(&buf);
            buf[i] = x[i] - h;
            let dn = f(&buf);
            buf[i] = x[i];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error over paired entries.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y, floor)).fold(0.0, f64::max)
}

/// Corpus shape for the randomized graph checks: 1..=50 clips (at most 200
/// windows) with varied gait spread, tempo variation and clip length.
pub fn random_corpus(seed: u64) -> motionrag_core::ingest::Corpus {
    use motionrag_core::ingest::{synthesize_corpus_with, SynthOptions};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let opts = SynthOptions {
        clip_seconds: rng.random_range(2.0..=5.0),
        variation: rng.random_range(0.0..2.0),
        phase_spread: rng.random_range(0.0..std::f64::consts::TAU),
        offset_every: rng.random_range(0..6),
        ..SynthOptions::default()
    };
    let windows_per_clip = opts.windowing.segment_count((opts.clip_seconds * opts.fps).round() as usize, opts.fps);
    let max_clips = (200 / windows_per_clip.max(1)).min(50);
    synthesize_corpus_with(seed, rng.random_range(1..=max_clips), &opts).expect("valid options")
}

/// One biped gait window from a unimodal family: amplitude `1 + 0.1 z` and
/// phase `0.2 z` with standard normal `z`.
pub fn unimodal_window(rng: &mut rand_chacha::ChaCha8Rng, frames: usize) -> MotionClip {
    use rand_distr::{Distribution, StandardNormal};
    let z1: f64 = StandardNormal.sample(rng);
    let z2: f64 = StandardNormal.sample(rng);
    let (amp, phase) = (1.0 + 0.1 * z1, 0.2 * z2);
    let mut root = ndarray::Array2::zeros((frames, 3));
    let mut aa = ndarray::Array3::zeros((frames, 8, 3));
    for i in 0..frames {
        let t = i as f64 / 30.0;
        let w = std::f64::consts::TAU * t + phase;
        root[[i, 0]] = 0.3 * t;
        root[[i, 1]] = 0.9 + 0.02 * (2.0 * w).sin();
        aa[[i, 0, 1]] = 0.2 * amp * w.sin();
        aa[[i, 1, 0]] = 0.1 * amp * w.cos();
        aa[[i, 3, 2]] = 0.1 * amp * w.cos();
        aa[[i, 4, 0]] = 0.5 * amp * w.sin();
        aa[[i, 5, 0]] = -0.4 * amp * w.sin().max(0.0);
        aa[[i, 6, 0]] = -0.5 * amp * w.sin();
        aa[[i, 7, 0]] = -0.4 * amp * (-w.sin()).max(0.0);
    }
    MotionClip::from_axis_angle("gait", 30.0, root, &aa).expect("valid gait")
}
