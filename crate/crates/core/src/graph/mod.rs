//! Motion graph construction and pruning.
//!
//! Nodes are clip windows. A directed edge `a -> b` means `b` may follow `a`:
//! either the last frame of `a` is kinematically compatible with the first
//! frame of `b` (see [`check_edge`]) or `b` is the next window of the same
//! source clip. Pruning keeps the largest strongly connected component so a
//! walk can continue forever.

mod io;
mod scc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{parse_window_id, window_records, Corpus};
use crate::kinematics::{
    distance, forward_kinematics_in, velocities, MotionClip, PositionSpace, Skeleton, Vec3,
};

pub use io::{read_graph, write_graph};
pub use scc::strongly_connected_components_of;

/// Number of joints that must pass both gap tests, either absolute or as a
/// fraction of the joint count (rounded up).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointThreshold {
    Count(usize),
    Fraction(f64),
}

impl JointThreshold {
    pub fn resolve(&self, joints: usize) -> Result<usize> {
        let t = match *self {
            JointThreshold::Count(c) => c,
            JointThreshold::Fraction(f) => (f * joints as f64).ceil() as usize,
        };
        if t == 0 || t > joints {
            return Err(Error::Config(format!(
                "joint threshold {t} outside 1..={joints}"
            )));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphBuildConfig {
    /// Frames averaged for the adaptive thresholds.
    pub n_mean_frames: usize,
    pub joint_threshold: JointThreshold,
    pub use_world_positions: bool,
}

impl Default for GraphBuildConfig {
    fn default() -> Self {
        GraphBuildConfig {
            n_mean_frames: 4,
            joint_threshold: JointThreshold::Fraction(0.75),
            use_world_positions: true,
        }
    }
}

impl GraphBuildConfig {
    fn space(&self) -> PositionSpace {
        if self.use_world_positions {
            PositionSpace::World
        } else {
            PositionSpace::RootRelative
        }
    }
}

/// Gaps and thresholds below this are rounding noise and count as zero, so
/// a joint that never moves rejects every candidate.
pub const NOISE_FLOOR: f64 = 1e-9;

fn snap(x: f64) -> f64 {
    if x < NOISE_FLOOR {
        0.0
    } else {
        x
    }
}

/// Boundary kinematics of one clip: everything [`check_edge`] needs.
#[derive(Debug, Clone)]
pub struct SeamKinematics {
    first_pos: Vec<Vec3>,
    first_vel: Vec<Vec3>,
    last_pos: Vec<Vec3>,
    last_vel: Vec<Vec3>,
    /// Mean distance of every position in the clip from the mean of the
    /// last N positions, per joint.
    pos_threshold: Vec<f64>,
    /// Same for velocities.
    vel_threshold: Vec<f64>,
}

impl SeamKinematics {
    pub fn new(skeleton: &Skeleton, clip: &MotionClip, cfg: &GraphBuildConfig) -> Result<Self> {
        let n = cfg.n_mean_frames;
        if n == 0 {
            return Err(Error::Config("n_mean_frames must be at least 1".into()));
        }
        // N velocities need N + 1 frames.
        if n + 1 > clip.frames() {
            return Err(Error::Config(format!(
                "n_mean_frames {n} needs {} frames; clip {} has {}",
                n + 1,
                clip.id(),
                clip.frames()
            )));
        }
        let pose = forward_kinematics_in(skeleton, clip, cfg.space())?;
        let vel = velocities(&pose, clip.fps())?;
        let joints = skeleton.joint_count();
        let at = |a: &ndarray::Array3<f64>, f: usize, j: usize| [a[[f, j, 0]], a[[f, j, 1]], a[[f, j, 2]]];
        let tail_spread = |a: &ndarray::Array3<f64>, j: usize| {
            let frames = a.dim().0;
            let mut mean = [0.0; 3];
            for f in frames - n..frames {
                for k in 0..3 {
                    mean[k] += a[[f, j, k]] / n as f64;
                }
            }
            (0..frames).map(|f| distance(at(a, f, j), mean)).sum::<f64>() / frames as f64
        };
        let pf = pose.frames();
        let vf = vel.dim().0;
        Ok(SeamKinematics {
            first_pos: (0..joints).map(|j| at(&pose.joint_pos, 0, j)).collect(),
            first_vel: (0..joints).map(|j| at(&vel, 0, j)).collect(),
            last_pos: (0..joints).map(|j| at(&pose.joint_pos, pf - 1, j)).collect(),
            last_vel: (0..joints).map(|j| at(&vel, vf - 1, j)).collect(),
            pos_threshold: (0..joints).map(|j| tail_spread(&pose.joint_pos, j)).collect(),
            vel_threshold: (0..joints).map(|j| tail_spread(&vel, j)).collect(),
        })
    }

    /// The edge rule with the clip's own thresholds scaled by `scale`.
    pub fn compatible_scaled(&self, next: &SeamKinematics, min_joints: usize, scale: f64) -> bool {
        let joints = self.last_pos.len();
        let pass = |d: f64, t: f64| snap(d) < snap(scale * t);
        let pos_ok = (0..joints)
            .filter(|&j| pass(distance(self.last_pos[j], next.first_pos[j]), self.pos_threshold[j]))
            .count();
        let vel_ok = (0..joints)
            .filter(|&j| pass(distance(self.last_vel[j], next.first_vel[j]), self.vel_threshold[j]))
            .count();
        pos_ok >= min_joints && vel_ok >= min_joints
    }

    pub fn compatible(&self, next: &SeamKinematics, min_joints: usize) -> bool {
        self.compatible_scaled(next, min_joints, 1.0)
    }
}

/// Whether `next` may follow `current`.
///
/// Per joint, the gap between the last frame of `current` and the first frame
/// of `next` must be strictly below the mean distance of `current`'s samples
/// from the mean of its last `n_mean_frames` samples (values below
/// [`NOISE_FLOOR`] count as zero); this must hold
/// for at least the threshold number of joints, for positions and for
/// velocities alike.
pub fn check_edge(
    current: &MotionClip,
    next: &MotionClip,
    skeleton: &Skeleton,
    cfg: &GraphBuildConfig,
) -> Result<bool> {
    if current.fps() != next.fps() {
        return Err(Error::Shape(format!(
            "fps differ: {} vs {}",
            current.fps(),
            next.fps()
        )));
    }
    let t = cfg.joint_threshold.resolve(skeleton.joint_count())?;
    let a = SeamKinematics::new(skeleton, current, cfg)?;
    // The next clip only contributes its first two frames.
    let b_cfg = GraphBuildConfig {
        n_mean_frames: 1,
        ..*cfg
    };
    let b = SeamKinematics::new(skeleton, next, &b_cfg)?;
    Ok(a.compatible(&b, t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub clip: MotionClip,
    /// Source clip id and start frame of the window.
    pub source: String,
    pub start: usize,
    /// Raw motion feature row paired with the window; may be empty when the
    /// graph was built from bare clips.
    pub motion_feat: Vec<f64>,
}

impl GraphNode {
    pub fn from_clip(clip: MotionClip) -> Self {
        let (source, start) = match parse_window_id(clip.id()) {
            Some((s, f)) => (s.to_string(), f),
            None => (clip.id().to_string(), 0),
        };
        GraphNode {
            clip,
            source,
            start,
            motion_feat: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionGraph {
    skeleton: Skeleton,
    nodes: Vec<GraphNode>,
    /// Sorted successor lists.
    adjacency: Vec<Vec<usize>>,
    pruned: bool,
}

impl MotionGraph {
    /// Assembles a graph, checking every structural invariant.
    pub fn from_parts(
        skeleton: Skeleton,
        nodes: Vec<GraphNode>,
        mut adjacency: Vec<Vec<usize>>,
        pruned: bool,
    ) -> Result<Self> {
        let n = nodes.len();
        if adjacency.len() != n {
            return Err(Error::Shape(format!(
                "{} adjacency lists for {n} nodes",
                adjacency.len()
            )));
        }
        for (a, succ) in adjacency.iter_mut().enumerate() {
            succ.sort_unstable();
            succ.dedup();
            if let Some(&b) = succ.iter().find(|&&b| b >= n || b == a) {
                return Err(Error::Invariant(format!("invalid edge {a} -> {b}")));
            }
        }
        for node in &nodes {
            if node.clip.joints() != skeleton.joint_count() {
                return Err(Error::Shape(format!(
                    "node {} has {} joints, skeleton has {}",
                    node.clip.id(),
                    node.clip.joints(),
                    skeleton.joint_count()
                )));
            }
        }
        let g = MotionGraph {
            skeleton,
            nodes,
            adjacency,
            pruned,
        };
        if pruned && strongly_connected_components(&g).len() > 1 {
            return Err(Error::Invariant(
                "graph marked pruned is not strongly connected".into(),
            ));
        }
        Ok(g)
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &GraphNode {
        &self.nodes[i]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn successors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search(&b).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(a, s)| s.iter().map(move |&b| (a, b)))
    }

    pub fn is_pruned(&self) -> bool {
        self.pruned
    }

    /// Frame rate shared by all nodes.
    pub fn fps(&self) -> f64 {
        self.nodes.first().map_or(30.0, |n| n.clip.fps())
    }
}

/// Builds the graph over `windows`. Pairwise checks run in parallel; the
/// result does not depend on thread scheduling.
pub fn build_graph(
    windows: &[MotionClip],
    skeleton: &Skeleton,
    cfg: &GraphBuildConfig,
) -> Result<MotionGraph> {
    build_graph_from_nodes(
        windows.iter().cloned().map(GraphNode::from_clip).collect(),
        skeleton,
        cfg,
    )
}

/// Windows the corpus with its own windowing and builds the graph, keeping
/// each window's motion feature row on its node.
pub fn build_graph_from_corpus(corpus: &Corpus, cfg: &GraphBuildConfig) -> Result<MotionGraph> {
    let nodes = window_records(corpus, &corpus.windowing)?
        .into_iter()
        .map(|w| GraphNode {
            clip: w.clip,
            source: w.source,
            start: w.start,
            motion_feat: w.motion_feat,
        })
        .collect();
    build_graph_from_nodes(nodes, &corpus.skeleton, cfg)
}

pub fn build_graph_from_nodes(
    nodes: Vec<GraphNode>,
    skeleton: &Skeleton,
    cfg: &GraphBuildConfig,
) -> Result<MotionGraph> {
    if nodes.is_empty() {
        return Err(Error::Config("cannot build a graph from zero windows".into()));
    }
    let fps = nodes[0].clip.fps();
    if let Some(n) = nodes.iter().find(|n| n.clip.fps() != fps) {
        return Err(Error::Shape(format!("window {} has a different fps", n.clip.id())));
    }
    let t = cfg.joint_threshold.resolve(skeleton.joint_count())?;
    let seams: Vec<SeamKinematics> = nodes
        .par_iter()
        .map(|n| SeamKinematics::new(skeleton, &n.clip, cfg))
        .collect::<Result<_>>()?;
    let mut adjacency: Vec<Vec<usize>> = (0..nodes.len())
        .into_par_iter()
        .map(|a| {
            (0..nodes.len())
                .filter(|&b| b != a && seams[a].compatible(&seams[b], t))
                .collect()
        })
        .collect();
    for (a, b) in natural_continuations(&nodes) {
        adjacency[a].push(b);
    }
    MotionGraph::from_parts(skeleton.clone(), nodes, adjacency, false)
}

/// Pairs of consecutive windows cut from the same source clip.
pub fn natural_continuations(nodes: &[GraphNode]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by(|&a, &b| {
        (nodes[a].source.as_str(), nodes[a].start, a).cmp(&(nodes[b].source.as_str(), nodes[b].start, b))
    });
    order
        .windows(2)
        .filter(|w| {
            let (a, b) = (&nodes[w[0]], &nodes[w[1]]);
            a.source == b.source && a.start < b.start
        })
        .map(|w| (w[0], w[1]))
        .collect()
}

/// Maximal SCCs, each sorted ascending, ordered by smallest member.
pub fn strongly_connected_components(g: &MotionGraph) -> Vec<Vec<usize>> {
    strongly_connected_components_of(&g.adjacency)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub nodes_before: usize,
    pub nodes_after: usize,
    pub edges_before: usize,
    pub edges_after: usize,
    /// Fraction of nodes removed.
    pub removed_fraction: f64,
}

/// Keeps the subgraph induced by the largest SCC (ties: the SCC holding the
/// smallest node index).
pub fn prune(g: &MotionGraph) -> Result<MotionGraph> {
    prune_with_report(g).map(|(g, _)| g)
}

pub fn prune_with_report(g: &MotionGraph) -> Result<(MotionGraph, PruneReport)> {
    if g.pruned {
        return Err(Error::Invariant("graph already pruned".into()));
    }
    let comps = strongly_connected_components(g);
    let mut best: &[usize] = &[];
    for c in &comps {
        if c.len() > best.len() {
            best = c;
        }
    }
    if best.len() < 2 {
        return Err(Error::Invariant(
            "graph degenerate; no cyclic structure".into(),
        ));
    }
    let mut remap = vec![usize::MAX; g.len()];
    for (new, &old) in best.iter().enumerate() {
        remap[old] = new;
    }
    let nodes: Vec<GraphNode> = best.iter().map(|&i| g.nodes[i].clone()).collect();
    let adjacency: Vec<Vec<usize>> = best
        .iter()
        .map(|&i| {
            g.adjacency[i]
                .iter()
                .filter_map(|&b| (remap[b] != usize::MAX).then_some(remap[b]))
                .collect()
        })
        .collect();
    let out = MotionGraph::from_parts(g.skeleton.clone(), nodes, adjacency, true)?;
    let report = PruneReport {
        nodes_before: g.len(),
        nodes_after: out.len(),
        edges_before: g.edge_count(),
        edges_after: out.edge_count(),
        removed_fraction: 1.0 - out.len() as f64 / g.len() as f64,
    };
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    /// `out_degree_histogram[d]` = number of nodes with out-degree `d`.
    pub out_degree_histogram: Vec<usize>,
    pub scc_count: usize,
    pub largest_scc: usize,
    pub pruned: bool,
}

pub fn graph_stats(g: &MotionGraph) -> GraphStats {
    let max_deg = g.adjacency.iter().map(Vec::len).max().unwrap_or(0);
    let mut hist = vec![0; max_deg + 1];
    for s in &g.adjacency {
        hist[s.len()] += 1;
    }
    let comps = strongly_connected_components(g);
    GraphStats {
        nodes: g.len(),
        edges: g.edge_count(),
        out_degree_histogram: if g.is_empty() { Vec::new() } else { hist },
        scc_count: comps.len(),
        largest_scc: comps.iter().map(Vec::len).max().unwrap_or(0),
        pruned: g.pruned,
    }
}
