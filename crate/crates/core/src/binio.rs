//! Little-endian helpers shared by the versioned binary artifact formats.

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub(crate) struct BinWriter<W: Write> {
    inner: W,
}

fn werr(e: std::io::Error) -> Error {
    Error::format("binary writer", e.to_string())
}

impl<W: Write> BinWriter<W> {
    pub fn new(inner: W) -> Self {
        BinWriter { inner }
    }

    pub fn header(&mut self, magic: &[u8; 8], version: u32) -> Result<()> {
        self.inner.write_all(magic).map_err(werr)?;
        self.u32(version)
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.inner.write_u8(v).map_err(werr)
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.inner.write_u32::<LE>(v).map_err(werr)
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.inner.write_u64::<LE>(v).map_err(werr)
    }

    pub fn len(&mut self, v: usize) -> Result<()> {
        self.u64(v as u64)
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.inner.write_f64::<LE>(v).map_err(werr)
    }

    pub fn f64s(&mut self, v: &[f64]) -> Result<()> {
        self.len(v.len())?;
        v.iter().try_for_each(|&x| self.f64(x))
    }

    pub fn str(&mut self, s: &str) -> Result<()> {
        self.len(s.len())?;
        self.inner.write_all(s.as_bytes()).map_err(werr)
    }
}

pub(crate) struct BinReader<R: Read> {
    inner: R,
    what: String,
}

impl<R: Read> BinReader<R> {
    pub fn new(inner: R, what: impl Into<String>) -> Self {
        BinReader {
            inner,
            what: what.into(),
        }
    }

    fn err(&self, e: impl ToString) -> Error {
        Error::format(self.what.clone(), e.to_string())
    }

    pub fn header(&mut self, magic: &[u8; 8], version: u32) -> Result<()> {
        let mut m = [0u8; 8];
        self.inner.read_exact(&mut m).map_err(|e| self.err(e))?;
        if &m != magic {
            return Err(self.err("bad magic; not this kind of file"));
        }
        let v = self.u32()?;
        if v != version {
            return Err(self.err(format!("unsupported version {v} (expected {version})")));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        self.inner.read_u8().map_err(|e| self.err(e))
    }

    pub fn u32(&mut self) -> Result<u32> {
        self.inner.read_u32::<LE>().map_err(|e| self.err(e))
    }

    pub fn u64(&mut self) -> Result<u64> {
        self.inner.read_u64::<LE>().map_err(|e| self.err(e))
    }

    /// A length prefix, bounded to reject corrupt files before allocating.
    pub fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (1 << 32) {
            return Err(self.err(format!("implausible length {n}")));
        }
        Ok(n as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        self.inner.read_f64::<LE>().map_err(|e| self.err(e))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| self.err(e))?;
        String::from_utf8(buf).map_err(|e| self.err(e))
    }

    pub fn expect_end(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.err("trailing bytes")),
            Err(e) => Err(self.err(e)),
        }
    }
}
