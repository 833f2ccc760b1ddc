//! Versioned binary graph files: a node table (skeleton, window motion and
//! motion features) followed by CSR adjacency. All integers are `u64` and all
//! reals `f64`, little-endian.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use super::{GraphNode, MotionGraph};
use crate::artifact::write_atomic;
use crate::binio::{BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::kinematics::{MotionClip, Skeleton};

const MAGIC: &[u8; 8] = b"MRAGGRPH";
const VERSION: u32 = 1;

pub fn write_graph(path: &Path, g: &MotionGraph) -> Result<()> {
    write_atomic(path, |w| encode(w, g))
}

fn encode(w: &mut dyn Write, g: &MotionGraph) -> Result<()> {
    let mut w = BinWriter::new(w);
    w.header(MAGIC, VERSION)?;
    w.u8(g.is_pruned() as u8)?;
    w.str(&serde_json::to_string(g.skeleton()).expect("skeleton serializes"))?;
    w.len(g.len())?;
    for n in g.nodes() {
        let c = &n.clip;
        w.str(c.id())?;
        w.str(&n.source)?;
        w.len(n.start)?;
        w.f64(c.fps())?;
        w.len(c.frames())?;
        w.len(c.joints())?;
        for &v in c.root_positions().iter().chain(c.rotations().iter()) {
            w.f64(v)?;
        }
        w.f64s(&n.motion_feat)?;
    }
    let mut offset = 0;
    w.len(offset)?;
    for s in g.adjacency() {
        offset += s.len();
        w.len(offset)?;
    }
    for s in g.adjacency() {
        for &b in s {
            w.len(b)?;
        }
    }
    Ok(())
}

pub fn read_graph(path: &Path) -> Result<MotionGraph> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BinReader::new(BufReader::new(f), path.display().to_string());
    r.header(MAGIC, VERSION)?;
    let pruned = r.u8()? != 0;
    let skeleton: Skeleton = serde_json::from_str(&r.str()?)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let n = r.len()?;
    let mut nodes = Vec::with_capacity(n);
    for _ in 0..n {
        let id = r.str()?;
        let source = r.str()?;
        let start = r.len()?;
        let fps = r.f64()?;
        let frames = r.len()?;
        let joints = r.len()?;
        let root: Vec<f64> = (0..frames * 3).map(|_| r.f64()).collect::<Result<_>>()?;
        let rot: Vec<f64> = (0..frames * joints * 4).map(|_| r.f64()).collect::<Result<_>>()?;
        let clip = MotionClip::new(
            id,
            fps,
            Array2::from_shape_vec((frames, 3), root).expect("sized"),
            Array3::from_shape_vec((frames, joints, 4), rot).expect("sized"),
        )?;
        nodes.push(GraphNode {
            clip,
            source,
            start,
            motion_feat: r.f64s()?,
        });
    }
    let offsets: Vec<usize> = (0..=n).map(|_| r.len()).collect::<Result<_>>()?;
    if offsets[0] != 0 || offsets.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::format(path.display().to_string(), "corrupt CSR offsets"));
    }
    let mut adjacency = Vec::with_capacity(n);
    for w in offsets.windows(2) {
        adjacency.push((w[0]..w[1]).map(|_| r.len()).collect::<Result<Vec<_>>>()?);
    }
    r.expect_end()?;
    MotionGraph::from_parts(skeleton, nodes, adjacency, pruned)
}
