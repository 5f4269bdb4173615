//! Little-endian binary readers/writers shared by the checkpoint and corpus
//! file formats. The reader tracks its byte offset so malformed files fail
//! with a precise position.

use crate::{Result, TridecError};
use std::io::{Read, Write};

pub struct BinWriter<W: Write> {
    w: W,
}

impl<W: Write> BinWriter<W> {
    pub fn new(w: W) -> Self {
        BinWriter { w }
    }

    pub fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        self.w.write_all(m)?;
        Ok(())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.w.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.w.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn f64_slice(&mut self, vs: &[f64]) -> Result<()> {
        for &v in vs {
            self.w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn str(&mut self, s: &str) -> Result<()> {
        self.u64(s.len() as u64)?;
        self.w.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.w
    }
}

pub struct BinReader<R: Read> {
    r: R,
    offset: u64,
}

impl<R: Read> BinReader<R> {
    pub fn new(r: R) -> Self {
        BinReader { r, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn err(&self, message: impl Into<String>) -> TridecError {
        TridecError::Parse {
            offset: self.offset,
            message: message.into(),
        }
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.r.read_exact(buf).map_err(|_| TridecError::Parse {
            offset: self.offset,
            message: format!("truncated file while reading {what}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let mut m = [0u8; 4];
        self.fill(&mut m, "magic")?;
        if &m != expect {
            return Err(TridecError::Parse {
                offset: 0,
                message: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&m),
                    String::from_utf8_lossy(expect)
                ),
            });
        }
        Ok(())
    }

    pub fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, "u64")?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn usize(&mut self, what: &str, limit: u64) -> Result<usize> {
        let v = self.u64()?;
        if v > limit {
            return Err(self.err(format!("{what} = {v} exceeds sanity limit {limit}")));
        }
        Ok(v as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, "f64")?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; n];
        let mut buf = vec![0u8; n * 8];
        self.fill(&mut buf, "f64 payload")?;
        for (i, chunk) in buf.chunks_exact(8).enumerate() {
            out[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(out)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.usize("string length", 1 << 20)?;
        let mut buf = vec![0u8; n];
        self.fill(&mut buf, "string")?;
        String::from_utf8(buf).map_err(|_| self.err("invalid utf-8 string"))
    }

    pub fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.r.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.err("trailing bytes after end of payload")),
            Err(e) => Err(e.into()),
        }
    }
}
