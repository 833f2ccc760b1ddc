//! Versioned binary checkpoints: schedule, model dimensions, fusion and
//! network tensors, then the normalization statistics.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::model::{Denoiser, ModelDims};
use super::repr::Normalizer;
use super::schedule::{DiffusionSchedule, ScheduleKind};
use super::train::DiffusionModel;
use crate::artifact::write_atomic;
use crate::binio::{BinReader, BinWriter};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MRAGDIFF";
const VERSION: u32 = 1;

fn put_tensors<W: Write>(w: &mut BinWriter<W>, ts: &[Array2<f64>]) -> Result<()> {
    w.len(ts.len())?;
    for t in ts {
        w.len(t.nrows())?;
        w.len(t.ncols())?;
        w.f64s(&t.iter().copied().collect::<Vec<_>>())?;
    }
    Ok(())
}

fn get_tensors<R: Read>(r: &mut BinReader<R>) -> Result<Vec<Array2<f64>>> {
    let n = r.len()?;
    (0..n)
        .map(|_| {
            let (rows, cols) = (r.len()?, r.len()?);
            let data = r.f64s()?;
            Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::format("diffusion checkpoint", e.to_string()))
        })
        .collect()
}

pub fn write_diffusion(path: &Path, m: &DiffusionModel) -> Result<()> {
    write_atomic(path, |w| {
        let mut w = BinWriter::new(w);
        w.header(MAGIC, VERSION)?;
        match m.schedule.kind() {
            ScheduleKind::Linear {
                beta_start,
                beta_end,
            } => {
                w.u8(0)?;
                w.f64(beta_start)?;
                w.f64(beta_end)?;
            }
            ScheduleKind::Cosine { s } => {
                w.u8(1)?;
                w.f64(s)?;
                w.f64(0.0)?;
            }
        }
        w.f64s(m.schedule.beta())?;
        let d = m.denoiser.dims();
        for v in [d.frames, d.repr, d.music, d.latent, d.hidden, d.tokens, d.layers] {
            w.len(v)?;
        }
        put_tensors(&mut w, m.denoiser.fusion_params())?;
        put_tensors(&mut w, m.denoiser.network_params())?;
        w.f64s(&m.normalizer.mean)?;
        w.f64s(&m.normalizer.std)
    })
}

pub fn read_diffusion(path: &Path) -> Result<DiffusionModel> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let what = path.display().to_string();
    let mut r = BinReader::new(BufReader::new(f), what.clone());
    r.header(MAGIC, VERSION)?;
    let tag = r.u8()?;
    let (a, b) = (r.f64()?, r.f64()?);
    let kind = match tag {
        0 => ScheduleKind::Linear {
            beta_start: a,
            beta_end: b,
        },
        1 => ScheduleKind::Cosine { s: a },
        t => return Err(Error::format(what, format!("unknown schedule kind {t}"))),
    };
    let schedule = DiffusionSchedule::from_betas_with(kind, r.f64s()?)?;
    let mut v = [0usize; 7];
    for x in v.iter_mut() {
        *x = r.len()?;
    }
    let dims = ModelDims {
        frames: v[0],
        repr: v[1],
        music: v[2],
        latent: v[3],
        hidden: v[4],
        tokens: v[5],
        layers: v[6],
    };
    let mut params = get_tensors(&mut r)?;
    params.extend(get_tensors(&mut r)?);
    let denoiser = Denoiser::from_params(dims, params)?;
    let normalizer = Normalizer {
        mean: r.f64s()?,
        std: r.f64s()?,
    };
    r.expect_end()?;
    if normalizer.dim() != dims.repr || normalizer.std.len() != dims.repr {
        return Err(Error::format(what, "normalizer width does not match the model"));
    }
    Ok(DiffusionModel {
        denoiser,
        schedule,
        normalizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::make_schedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> DiffusionModel {
        let dims = ModelDims {
            frames: 4,
            repr: 7,
            music: 2,
            latent: 3,
            hidden: 4,
            tokens: 2,
            layers: 1,
        };
        DiffusionModel {
            denoiser: Denoiser::new(dims, &mut ChaCha8Rng::seed_from_u64(5)).unwrap(),
            schedule: make_schedule(ScheduleKind::default(), 12).unwrap(),
            normalizer: Normalizer {
                mean: vec![0.5; 7],
                std: vec![2.0; 7],
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let m = model();
        write_diffusion(&p, &m).unwrap();
        assert_eq!(read_diffusion(&p).unwrap(), m);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        write_diffusion(&p, &model()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read_diffusion(&p), Err(Error::Format { .. })));
    }
}
