//! Versioned binary checkpoints: both heads (dims then parameters) followed
//! by the log temperature.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use super::{ContrastiveModel, ProjectionHead};
use crate::artifact::write_atomic;
use crate::binio::{BinReader, BinWriter};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MRAGCTRS";
const VERSION: u32 = 1;

fn put_head<W: Write>(w: &mut BinWriter<W>, h: &ProjectionHead) -> Result<()> {
    w.len(h.input_dim())?;
    w.len(h.hidden_dim())?;
    w.len(h.output_dim())?;
    w.f64s(h.params())
}

fn get_head<R: Read>(r: &mut BinReader<R>) -> Result<ProjectionHead> {
    let (i, h, o) = (r.len()?, r.len()?, r.len()?);
    ProjectionHead::from_params(i, h, o, r.f64s()?)
}

pub fn write_model(path: &Path, m: &ContrastiveModel) -> Result<()> {
    write_atomic(path, |w| {
        let mut w = BinWriter::new(w);
        w.header(MAGIC, VERSION)?;
        put_head(&mut w, &m.music_head)?;
        put_head(&mut w, &m.motion_head)?;
        w.f64(m.log_tau())
    })
}

pub fn read_model(path: &Path) -> Result<ContrastiveModel> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let what = path.display().to_string();
    let mut r = BinReader::new(BufReader::new(f), what.clone());
    r.header(MAGIC, VERSION)?;
    let music = get_head(&mut r)?;
    let motion = get_head(&mut r)?;
    let log_tau = r.f64()?;
    r.expect_end()?;
    ContrastiveModel::from_heads(music, motion, log_tau)
        .map_err(|e| Error::format(what, e.to_string()))
}
