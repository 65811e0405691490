use crate::error::{FormatError, Result};

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    /// `u32` length followed by the bytes.
    pub fn blob(&mut self, b: &[u8]) -> Result<()> {
        self.u32(len32(b.len())?);
        self.bytes(b);
        Ok(())
    }
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) fn len32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| FormatError::Malformed(format!("length {n} does not fit in u32")).into())
}

/// Checks magic, then the trailing CRC, then the version, and returns a
/// reader over the body (after magic and version, before the CRC).
pub(crate) fn open<'a>(bytes: &'a [u8], magic: [u8; 4], supported: u32) -> Result<Reader<'a>> {
    if bytes.len() < 4 || bytes[..4] != magic {
        return Err(FormatError::BadMagic {
            expected: magic,
            found: bytes[..bytes.len().min(4)].to_vec(),
        }
        .into());
    }
    if bytes.len() < 12 {
        return Err(FormatError::Truncated(format!("{} bytes is shorter than any valid file", bytes.len())).into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::CrcMismatch { stored, computed }.into());
    }
    let found = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if found != supported {
        return Err(FormatError::UnsupportedVersion { found, supported }.into());
    }
    Ok(Reader { buf: body, pos: 8 })
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(FormatError::Truncated(format!("{what} runs past the end of the file")).into());
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    pub fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    pub fn blob(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u32(what)? as usize;
        self.take(n, what)
    }
    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    /// Errors unless every body byte was consumed.
    pub fn end(self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(FormatError::Malformed(format!("{} unexpected trailing bytes", self.remaining())).into());
        }
        Ok(())
    }
}
