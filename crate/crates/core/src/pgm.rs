//! Binary greymap (P5) images.

use crate::error::{Result, StabError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major samples.
    pub pixels: Vec<u16>,
}

fn bad(msg: &str) -> StabError {
    StabError::Io(format!("malformed PGM: {msg}"))
}

struct Header<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.data.len() {
            match self.data[self.pos] {
                b'#' => {
                    while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.data.len() && self.data[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(bad(&format!("missing {what}")));
        }
        std::str::from_utf8(&self.data[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(&format!("invalid {what}")))
    }
}

impl Pgm {
    pub fn parse(data: &[u8]) -> Result<Self> {
        if data.len() < 2 || &data[..2] != b"P5" {
            return Err(bad("missing P5 magic number"));
        }
        let mut h = Header { data, pos: 2 };
        let width = h.number("width")?;
        let height = h.number("height")?;
        let maxval = h.number("maxval")?;
        if width == 0 || height == 0 {
            return Err(bad("zero dimension"));
        }
        if maxval == 0 || maxval > 65535 {
            return Err(bad("maxval out of range"));
        }
        match data.get(h.pos) {
            Some(c) if c.is_ascii_whitespace() => h.pos += 1,
            _ => return Err(bad("missing whitespace after header")),
        }
        let bytes_per = if maxval < 256 { 1 } else { 2 };
        let n = width * height;
        let body = &data[h.pos..];
        if body.len() < n * bytes_per {
            return Err(bad("truncated pixel data"));
        }
        let pixels: Vec<u16> = if bytes_per == 1 {
            body[..n].iter().map(|&b| b as u16).collect()
        } else {
            body[..2 * n].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        };
        if pixels.iter().any(|&p| p as usize > maxval) {
            return Err(bad("sample exceeds maxval"));
        }
        Ok(Self {
            width,
            height,
            maxval: maxval as u16,
            pixels,
        })
    }

    /// 8-bit image from values in `[0, 1]` (clamped, rounded).
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Self {
        let pixels = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u16)
            .collect();
        Self {
            width,
            height,
            maxval: 255,
            pixels,
        }
    }

    pub fn to_unit(&self) -> Vec<f64> {
        let scale = 1.0 / self.maxval as f64;
        self.pixels.iter().map(|&p| p as f64 * scale).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.pixels.iter().map(|&p| p as u8));
        } else {
            for p in &self.pixels {
                out.extend(p.to_be_bytes());
            }
        }
        out
    }
}
