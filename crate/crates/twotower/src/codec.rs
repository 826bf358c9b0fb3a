//! Little-endian byte helpers shared by the checkpoint and index formats.

use twotower_core::hash::Fnv1a;

pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer { buf: Vec::new() }
    }

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

    pub fn f32s(&mut self, v: &[f32]) {
        self.buf.reserve(v.len() * 4);
        for x in v {
            self.bytes(&x.to_le_bytes());
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    /// Appends the checksum of everything written so far.
    pub fn finish(mut self) -> Vec<u8> {
        let sum = checksum(&self.buf);
        self.u64(sum);
        self.buf
    }
}

pub(crate) fn checksum(bytes: &[u8]) -> u64 {
    Fnv1a::new().write(bytes).finish()
}

/// Splits off and verifies the trailing checksum.
pub(crate) fn verified_body(bytes: &[u8]) -> Option<&[u8]> {
    let split = bytes.len().checked_sub(8)?;
    let (body, tail) = bytes.split_at(split);
    (u64::from_le_bytes(tail.try_into().ok()?) == checksum(body)).then_some(body)
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Truncated;

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], Truncated> {
        if n > self.buf.len() {
            return Err(Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    pub fn u8(&mut self) -> Result<u8, Truncated> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, Truncated> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, Truncated> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>, Truncated> {
        let raw = self.take(n.checked_mul(4).ok_or(Truncated)?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn str(&mut self) -> Result<&'a str, Truncated> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| Truncated)
    }
}

pub(crate) fn hex(v: u64) -> String {
    format!("{v:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_checksum() {
        let mut w = Writer::new();
        w.u8(3);
        w.u32(7);
        w.u64(u64::MAX);
        w.f32s(&[1.5, -0.0, f32::MIN_POSITIVE]);
        w.str("héllo");
        let mut bytes = w.finish();
        let body = verified_body(&bytes).unwrap();
        let mut r = Reader::new(body);
        assert_eq!(r.u8(), Ok(3));
        assert_eq!(r.u32(), Ok(7));
        assert_eq!(r.u64(), Ok(u64::MAX));
        let f = r.f32s(3).unwrap();
        assert_eq!(f[1].to_bits(), (-0.0f32).to_bits());
        assert_eq!(r.str(), Ok("héllo"));
        assert_eq!(r.remaining(), 0);
        assert_eq!(r.u8(), Err(Truncated));
        bytes[2] ^= 1;
        assert!(verified_body(&bytes).is_none());
        assert!(verified_body(&[1, 2]).is_none());
    }
}
