//! Little-endian binary container: `S2RD` magic, `u32` version, then
//! length-prefixed `f32` arrays. Used for frame records and checkpoints.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"S2RD";
pub const VERSION: u32 = 1;

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    /// Starts a buffer with magic and version.
    pub fn new() -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// `u32` count followed by the values.
    pub fn f32_array(&mut self, values: &[f32]) {
        self.u32(values.len() as u32);
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// `u32` byte length followed by UTF-8 bytes.
    pub fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over a container; errors carry the byte offset.
#[derive(Debug)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and version.
    pub fn new(buf: &'a [u8]) -> Result<Self> {
        let mut r = Self { buf, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format { offset: 0, msg: "bad magic, expected S2RD".into() });
        }
        let v = r.u32()?;
        if v != VERSION {
            return Err(Error::Format { offset: 4, msg: format!("unsupported version {v}") });
        }
        Ok(r)
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn error<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format { offset: self.pos as u64, msg: msg.into() })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.error(format!(
                "truncated: need {n} bytes, {} left",
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32_array(&mut self) -> Result<Vec<f32>> {
        let n = self.u32()? as usize;
        let bytes = self.take(n.checked_mul(4).ok_or(Error::Format {
            offset: self.pos as u64,
            msg: "array length overflow".into(),
        })?)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let start = self.pos;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format { offset: start as u64, msg: "name is not UTF-8".into() })
    }

    /// Fails unless every byte was consumed.
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return self.error(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}
