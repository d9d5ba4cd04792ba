//! Little-endian binary helpers shared by the `FMC1`, `FMD1` and `FMM1` formats.

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

/// Decoding failure, always tagged with the byte offset where it was detected.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormatError {
    #[error("bad magic at offset {offset}: expected {expected:?}, found {found:?}")]
    Magic { offset: usize, expected: [u8; 4], found: Vec<u8> },
    #[error("truncated input at offset {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("invalid data at offset {offset}: {detail}")]
    Invalid { offset: usize, detail: String },
    #[error("{extra} trailing bytes at offset {offset}")]
    Trailing { offset: usize, extra: usize },
}

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4]) -> Self {
        Self { buf: magic.to_vec() }
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], magic: &[u8; 4]) -> Result<Self, FormatError> {
        if buf.len() < 4 || &buf[..4] != magic {
            return Err(FormatError::Magic {
                offset: 0,
                expected: *magic,
                found: buf[..buf.len().min(4)].to_vec(),
            });
        }
        Ok(Self { buf, pos: 4 })
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    /// Fails early when fewer than `n` bytes remain.
    pub fn require(&self, n: usize) -> Result<(), FormatError> {
        let left = self.buf.len() - self.pos;
        if left < n {
            Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - left,
            })
        } else {
            Ok(())
        }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        self.require(n)?;
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn finish(self) -> Result<(), FormatError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(FormatError::Trailing {
                offset: self.pos,
                extra: self.buf.len() - self.pos,
            })
        }
    }
}
