//! Little-endian cursor shared by the binary container formats.

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.remaining();
        if n > remaining {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {remaining} remain"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// `count` little-endian `f32`s.
    pub fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let n = count
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.pos as u64, format!("{what} size overflows")))?;
        let raw = self.take(n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Error unless every byte has been consumed.
    pub fn finish(&self, what: &str) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(
                self.pos as u64,
                format!("count mismatch: {} trailing bytes after {what}", self.remaining()),
            ));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for f in data {
        out.extend_from_slice(&f.to_le_bytes());
    }
}
