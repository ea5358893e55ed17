//! Little-endian primitives shared by the checkpoint and corpus containers.

use std::io::{ErrorKind, Read};

use crate::error::{Error, ParseErrorKind, Result};

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidTensor(format!("{what} {n} does not fit in 32 bits")))
}

/// Streaming reader that tracks its byte offset for error reports.
pub(crate) struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Reader { inner, offset: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.offset
    }

    pub(crate) fn error(&self, kind: ParseErrorKind) -> Error {
        Error::Parse {
            offset: self.offset,
            kind,
        }
    }

    /// Reads up to `n` bytes; fewer only at end of input.
    fn take(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(n.min(1 << 24));
        let got = (&mut self.inner)
            .take(n as u64)
            .read_to_end(&mut buf)
            .map_err(|e| self.error(ParseErrorKind::Invalid(format!("read failed: {e}"))))?;
        debug_assert_eq!(got, buf.len());
        Ok(buf)
    }

    pub(crate) fn exact(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let buf = self.take(n)?;
        if buf.len() < n {
            return Err(self.error(ParseErrorKind::Truncated(format!(
                "{what}: {n} bytes needed, {} available",
                buf.len()
            ))));
        }
        self.offset += n as u64;
        Ok(buf)
    }

    /// Like [`Reader::exact`] but reports `(needed, available)` on shortfall.
    pub(crate) fn payload(&mut self, n: usize) -> Result<std::result::Result<Vec<u8>, (u64, u64)>> {
        let buf = self.take(n)?;
        if buf.len() < n {
            return Ok(Err((n as u64, buf.len() as u64)));
        }
        self.offset += n as u64;
        Ok(Ok(buf))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.exact(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.exact(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.offset;
        let b = self.exact(n, what)?;
        String::from_utf8(b).map_err(|_| Error::Parse {
            offset: at,
            kind: ParseErrorKind::Invalid(format!("{what} is not UTF-8")),
        })
    }

    pub(crate) fn at_end(&mut self) -> Result<bool> {
        let mut one = [0u8; 1];
        loop {
            match self.inner.read(&mut one) {
                Ok(0) => return Ok(true),
                Ok(_) => return Ok(false),
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(self.error(ParseErrorKind::Invalid(format!("read failed: {e}")))),
            }
        }
    }
}

pub(crate) fn f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

pub(crate) fn f32s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect()
}

pub(crate) fn u32s(bytes: &[u8]) -> Vec<u32> {
    bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}
