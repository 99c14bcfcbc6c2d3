//! Little-endian cursor helpers that report failures with byte offsets.

use crate::error::FormatError;

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn magic(&mut self, m: &[u8; 4], version: u16) {
        self.buf.extend_from_slice(m);
        self.u16(version);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, v: impl IntoIterator<Item = f32>) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    /// u32 length prefix followed by UTF-8 bytes.
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let left = self.buf.len() - self.pos;
        if left < n {
            return Err(FormatError::Truncated {
                offset: self.pos as u64,
                what,
                expected: n as u64,
                actual: left as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// Checks the 4-byte magic and a version no newer than `supported`.
    pub fn magic(&mut self, m: &[u8; 4], supported: u16) -> Result<u16, FormatError> {
        let found = self.take(4, "magic").map_err(|_| FormatError::BadMagic {
            expected: String::from_utf8_lossy(m).into_owned(),
            found: String::from_utf8_lossy(self.buf).into_owned(),
        })?;
        if found != m {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(m).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let offset = self.offset();
        let v = self.u16("version")?;
        if v == 0 || v > supported {
            return Err(FormatError::UnsupportedVersion {
                offset,
                found: v,
                supported,
            });
        }
        Ok(v)
    }

    pub fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &'static str) -> Result<u64, FormatError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>, FormatError> {
        let bytes = n.checked_mul(4).ok_or_else(|| self.invalid(what, "length overflow"))?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn str(&mut self, what: &'static str) -> Result<String, FormatError> {
        let n = self.u32(what)? as usize;
        let at = self.offset();
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|e| FormatError::Invalid {
            offset: at,
            what,
            detail: e.to_string(),
        })
    }

    pub fn invalid(&self, what: &'static str, detail: impl Into<String>) -> FormatError {
        FormatError::Invalid {
            offset: self.pos as u64,
            what,
            detail: detail.into(),
        }
    }

    pub fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(FormatError::TrailingBytes {
                offset: self.pos as u64,
                extra: (self.buf.len() - self.pos) as u64,
            });
        }
        Ok(())
    }
}
