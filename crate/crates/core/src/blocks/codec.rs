//! Canonical byte encoding primitives.
//!
//! Integers are fixed-width big-endian, strings and byte strings carry a
//! `u32` length prefix, optionals a one-byte presence flag (0 or 1 only),
//! lists a `u32` element count. The reader is strict: any encoding the
//! writer would not produce is rejected.

use crate::merkle::Digest;

#[derive(thiserror::Error, Debug, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unexpected end of input at offset {0}")]
    Truncated(usize),
    #[error("invalid {what} value {value:#04x} at offset {offset}")]
    InvalidTag { what: &'static str, value: u8, offset: usize },
    #[error("invalid UTF-8 string at offset {0}")]
    InvalidUtf8(usize),
    #[error("{0} trailing bytes after block")]
    TrailingBytes(usize),
    #[error("non-canonical encoding at offset {0}")]
    NonCanonical(usize),
}

impl DecodeError {
    /// Byte offset within the record where decoding failed.
    pub fn offset(&self) -> Option<usize> {
        match self {
            DecodeError::Truncated(o) | DecodeError::InvalidUtf8(o) | DecodeError::NonCanonical(o) => Some(*o),
            DecodeError::InvalidTag { offset, .. } => Some(*offset),
            DecodeError::TrailingBytes(_) => None,
        }
    }
}

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(u8::from(v))
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u32(len_u32(v.len()));
        self.buf.extend_from_slice(v);
        self
    }

    pub fn str(&mut self, v: &str) -> &mut Self {
        self.bytes(v.as_bytes())
    }

    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.buf.extend_from_slice(d.as_bytes());
        self
    }

    pub fn opt<T>(&mut self, v: Option<&T>, f: impl FnOnce(&mut Self, &T)) -> &mut Self {
        match v {
            None => {
                self.u8(0);
            }
            Some(x) => {
                self.u8(1);
                f(self, x);
            }
        }
        self
    }

    pub fn count(&mut self, n: usize) -> &mut Self {
        self.u32(len_u32(n))
    }
}

fn len_u32(n: usize) -> u32 {
    u32::try_from(n).expect("field longer than u32::MAX bytes")
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::Truncated(self.pos))?;
        if end > self.buf.len() {
            return Err(DecodeError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn tag(&mut self, what: &'static str, max: u8) -> Result<u8, DecodeError> {
        let offset = self.pos;
        let value = self.u8()?;
        if value > max {
            return Err(DecodeError::InvalidTag { what, value, offset });
        }
        Ok(value)
    }

    pub fn bool(&mut self) -> Result<bool, DecodeError> {
        Ok(self.tag("bool", 1)? == 1)
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, DecodeError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    pub fn string(&mut self) -> Result<String, DecodeError> {
        let offset = self.pos;
        let raw = self.bytes()?;
        String::from_utf8(raw).map_err(|_| DecodeError::InvalidUtf8(offset))
    }

    pub fn digest(&mut self) -> Result<Digest, DecodeError> {
        Ok(Digest::from_bytes(self.take(32)?.try_into().expect("32 bytes")))
    }

    pub fn opt<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T, DecodeError>) -> Result<Option<T>, DecodeError> {
        if self.tag("presence flag", 1)? == 1 {
            f(self).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Element count, sanity-bounded by the remaining input so corrupt counts
    /// fail fast instead of allocating.
    pub fn count(&mut self) -> Result<usize, DecodeError> {
        let offset = self.pos;
        let n = self.u32()? as usize;
        if n > self.buf.len() - self.pos {
            return Err(DecodeError::Truncated(offset));
        }
        Ok(n)
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(DecodeError::TrailingBytes(n)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strict_flags() {
        let mut r = Reader::new(&[2]);
        assert!(matches!(r.bool(), Err(DecodeError::InvalidTag { value: 2, .. })));
        let mut r = Reader::new(&[0, 0, 0, 5, b'a']);
        assert_eq!(r.string(), Err(DecodeError::Truncated(4)));
        let mut r = Reader::new(&[0, 0, 0, 1, 0xff]);
        assert_eq!(r.string(), Err(DecodeError::InvalidUtf8(0)));
    }

    #[test]
    fn writer_layout() {
        let mut w = Writer::new();
        w.u8(7).u32(1).str("ab").opt(Some(&3u64), |w, v| {
            w.u64(*v);
        });
        assert_eq!(w.into_bytes(), vec![7, 0, 0, 0, 1, 0, 0, 0, 2, b'a', b'b', 1, 0, 0, 0, 0, 0, 0, 0, 3]);
    }
}
