// SPDX-License-Identifier: Apache-2.0

//! Canonical length-prefixed serialization used for every signed body.
//!
//! Each field is written as a 4-byte big-endian length followed by the raw
//! field bytes. Decoding is strict: a body must be consumed exactly, so
//! `encode(decode(b)) == b` for every accepted `b`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed canonical encoding: {0}")]
pub struct DecodeError(pub String);

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn field(&mut self, bytes: &[u8]) -> &mut Self {
        let len = u32::try_from(bytes.len()).expect("field longer than 4 GiB");
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf)
    }
}

/// Length-prefix a single field.
pub fn lp(bytes: &[u8]) -> Vec<u8> {
    Writer::new().field(bytes).finish()
}

pub struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    pub fn field(&mut self) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() < 4 {
            return Err(DecodeError("truncated length prefix".into()));
        }
        let len = u32::from_be_bytes([self.buf[0], self.buf[1], self.buf[2], self.buf[3]]) as usize;
        let rest = &self.buf[4..];
        if rest.len() < len {
            return Err(DecodeError(format!("field of {len} bytes but only {} left", rest.len())));
        }
        let (f, tail) = rest.split_at(len);
        self.buf = tail;
        Ok(f)
    }

    pub fn fixed<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let f = self.field()?;
        <[u8; N]>::try_from(f).map_err(|_| DecodeError(format!("expected {N} bytes, got {}", f.len())))
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(DecodeError(format!("{} trailing bytes", self.buf.len())))
        }
    }
}
