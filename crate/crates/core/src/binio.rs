//! Little-endian framing shared by the memory, index, model and dataset
//! files.
//!
//! Every file is `magic (8 bytes) | version u32 | body | crc32 u32`, where
//! the CRC covers everything before it. Readers validate the magic and
//! version before touching the body and check the CRC before decoding, so
//! a truncated or bit-flipped file is reported as corruption rather than
//! parsed into garbage.

use crate::error::{Error, Result};

pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new(magic: &[u8; 8], version: u32) -> Self {
        let mut buf = Vec::with_capacity(1 << 16);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        Self { buf }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.f32(*x);
        }
    }

    pub fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.f64(*x);
        }
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    /// Length-prefixed (u32) UTF-8 string.
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    body: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    /// Validate framing and return a reader positioned at the body.
    pub fn open(
        bytes: &'a [u8],
        magic: &[u8; 8],
        version: u32,
        what: &'static str,
    ) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != magic {
            return Err(Error::Format(format!("{what}: bad magic bytes")));
        }
        if bytes.len() < 12 {
            return Err(Error::Corruption(format!("{what}: truncated header")));
        }
        let found = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if found != version {
            return Err(Error::Format(format!(
                "{what}: unsupported version {found} (expected {version})"
            )));
        }
        if bytes.len() < 16 {
            return Err(Error::Corruption(format!("{what}: truncated file")));
        }
        let (payload, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        if crc32fast::hash(payload) != stored {
            return Err(Error::Corruption(format!("{what}: checksum mismatch")));
        }
        Ok(Self {
            body: payload,
            pos: 12,
            what,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.body.len())
            .ok_or_else(|| Error::Corruption(format!("{}: unexpected end of data", self.what)))?;
        let s = &self.body[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn remaining(&self) -> usize {
        self.body.len() - self.pos
    }

    /// Fail early if a declared element count cannot fit in what is left.
    pub fn expect_at_least(&self, count: u64, elem_size: u64) -> Result<()> {
        match count.checked_mul(elem_size) {
            Some(n) if n <= self.remaining() as u64 => Ok(()),
            _ => Err(Error::Corruption(format!(
                "{}: declared size exceeds file length",
                self.what
            ))),
        }
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        self.expect_at_least(n as u64, 4)?;
        (0..n).map(|_| self.f32()).collect()
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        self.expect_at_least(n as u64, 8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Corruption(format!("{}: invalid UTF-8 string", self.what)))
    }

    /// Count fields are stored as u64; reject anything that cannot index memory.
    pub fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .map_err(|_| Error::Corruption(format!("{}: length {v} out of range", self.what)))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.body.len() {
            return Err(Error::Corruption(format!(
                "{}: {} trailing bytes",
                self.what,
                self.body.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
