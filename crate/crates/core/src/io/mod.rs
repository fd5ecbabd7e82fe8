//! On-disk formats: images, depth maps, flow, tensor containers and the
//! dataset directory layout.

pub mod checkpoint;
pub mod dataset;
pub mod flo5;
pub mod pfm;
pub mod ppm;
pub mod xtslice;

use std::path::Path;

use crate::error::{Error, Result};

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Byte cursor over a decoder input; every read is bounds-checked.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(format!(
                "{}: truncated at byte {} (wanted {n} more, {} left)",
                self.what,
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Header tokenizer shared by the netpbm-style formats: whitespace-separated
/// ASCII tokens with `#` comments running to end of line.
pub(crate) struct HeaderTokens<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
    comments: bool,
}

impl<'a> HeaderTokens<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str, comments: bool) -> Self {
        HeaderTokens {
            buf,
            pos: 0,
            what,
            comments,
        }
    }

    pub(crate) fn next_token(&mut self) -> Result<&'a str> {
        loop {
            match self.buf.get(self.pos) {
                Some(c) if c.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') if self.comments => {
                    while let Some(&c) = self.buf.get(self.pos) {
                        self.pos += 1;
                        if c == b'\n' || c == b'\r' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(Error::format(format!("{}: header ended early", self.what))),
            }
        }
        let start = self.pos;
        while let Some(c) = self.buf.get(self.pos) {
            if c.is_ascii_whitespace() || (self.comments && *c == b'#') {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos || self.pos - start > 32 {
            return Err(Error::format(format!("{}: malformed header token", self.what)));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .map_err(|_| Error::format(format!("{}: header is not ASCII", self.what)))
    }

    pub(crate) fn next_usize(&mut self, field: &str) -> Result<usize> {
        let t = self.next_token()?;
        t.parse::<usize>()
            .map_err(|_| Error::format(format!("{}: bad {field} {t:?}", self.what)))
    }

    /// Consumes the single whitespace byte that ends the header.
    pub(crate) fn end_header(&mut self) -> Result<usize> {
        match self.buf.get(self.pos) {
            Some(c) if c.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(Error::format(format!("{}: missing whitespace after header", self.what))),
        }
    }
}

/// Rejects images whose pixel count would not fit the remaining input.
pub(crate) fn check_extent(what: &str, h: usize, w: usize, bytes_per_px: usize, available: usize) -> Result<usize> {
    if h == 0 || w == 0 {
        return Err(Error::format(format!("{what}: zero image extent {w}x{h}")));
    }
    let n = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(bytes_per_px))
        .ok_or_else(|| Error::format(format!("{what}: image extent {w}x{h} overflows")))?;
    if n > available {
        return Err(Error::format(format!(
            "{what}: {w}x{h} image needs {n} payload bytes, {available} present"
        )));
    }
    Ok(h * w)
}
