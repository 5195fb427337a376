//! Canonical little-endian binary encoding shared by environment states,
//! session snapshots, and log records.
//!
//! A document starts with a single version byte and is followed by a
//! sequence of fields. Every field is `[u8 tag][u32 length][bytes]`. Tags must
//! appear in strictly increasing order and each exactly once, so two equal
//! values always produce identical bytes and a decoder can reject anything a
//! conforming encoder would not have produced.

use thiserror::Error;

/// Failure while decoding. `offset` is the byte position at which the
/// problem was detected.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("codec error at byte {offset}: {reason}")]
pub struct CodecError {
    pub offset: usize,
    pub reason: String,
}

impl CodecError {
    pub fn new(offset: usize, reason: impl Into<String>) -> Self {
        Self {
            offset,
            reason: reason.into(),
        }
    }
}

/// Append-only byte writer.
#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_version(version: u8) -> Self {
        let mut enc = Self::new();
        enc.u8(version);
        enc
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(v as u8)
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn i64(&mut self, v: i64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    /// Floats are stored by bit pattern, so `-0.0` and `0.0` stay distinct.
    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.u64(v.to_bits())
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
        self
    }

    pub fn str(&mut self, v: &str) -> &mut Self {
        self.bytes(v.as_bytes())
    }

    pub fn opt_str(&mut self, v: Option<&str>) -> &mut Self {
        match v {
            Some(s) => self.u8(1).str(s),
            None => self.u8(0),
        }
    }

    /// Writes a tagged, length-prefixed field whose body is produced by `body`.
    pub fn field(&mut self, tag: u8, body: impl FnOnce(&mut Encoder)) -> &mut Self {
        let mut inner = Encoder::new();
        body(&mut inner);
        self.u8(tag);
        self.bytes(&inner.buf);
        self
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over an encoded buffer. Offsets reported in errors are relative to
/// the outermost buffer, including for nested field decoders.
#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
    last_tag: Option<u8>,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self {
            buf,
            pos: 0,
            base: 0,
            last_tag: None,
        }
    }

    /// Absolute offset of the cursor.
    pub fn offset(&self) -> usize {
        self.base + self.pos
    }

    pub fn error(&self, reason: impl Into<String>) -> CodecError {
        CodecError::new(self.offset(), reason)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() - self.pos < n {
            return Err(self.error(format!(
                "unexpected end of input: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn bool(&mut self) -> Result<bool, CodecError> {
        let at = self.offset();
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(CodecError::new(at, format!("invalid boolean byte {other}"))),
        }
    }

    pub fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64, CodecError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String, CodecError> {
        let at = self.offset();
        let raw = self.bytes()?;
        String::from_utf8(raw.to_vec()).map_err(|_| CodecError::new(at, "string is not UTF-8"))
    }

    pub fn opt_str(&mut self) -> Result<Option<String>, CodecError> {
        Ok(if self.bool()? {
            Some(self.str()?)
        } else {
            None
        })
    }

    pub fn version(&mut self, expected: u8) -> Result<(), CodecError> {
        let at = self.offset();
        let v = self.u8()?;
        if v != expected {
            return Err(CodecError::new(
                at,
                format!("unsupported version {v}, expected {expected}"),
            ));
        }
        Ok(())
    }

    /// Reads the next field, which must carry `tag`, and returns a decoder
    /// scoped to its body.
    pub fn field(&mut self, tag: u8) -> Result<Decoder<'a>, CodecError> {
        let at = self.offset();
        let found = self.u8()?;
        if found != tag {
            return Err(CodecError::new(
                at,
                format!("expected field tag {tag}, found {found}"),
            ));
        }
        if let Some(prev) = self.last_tag {
            if found <= prev {
                return Err(CodecError::new(at, "field tags out of order"));
            }
        }
        self.last_tag = Some(found);
        let body_start = self.offset() + 4;
        let body = self.bytes()?;
        Ok(Decoder {
            buf: body,
            pos: 0,
            base: body_start,
            last_tag: None,
        })
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Fails unless the whole buffer has been consumed.
    pub fn finish(&self) -> Result<(), CodecError> {
        if self.remaining() != 0 {
            return Err(self.error(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}
