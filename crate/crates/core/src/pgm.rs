//! Portable graymap I/O (P2 ASCII and P5 binary, 8-bit).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmFormat {
    /// `P2`
    Ascii,
    /// `P5`
    Binary,
}

pub fn encode(img: &Image, format: PgmFormat) -> Vec<u8> {
    let bytes = img.to_bytes();
    match format {
        PgmFormat::Binary => {
            let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
            out.extend_from_slice(&bytes);
            out
        }
        PgmFormat::Ascii => {
            let mut out = format!("P2\n{} {}\n255\n", img.width(), img.height());
            for row in bytes.chunks(img.width()) {
                let line: Vec<String> = row.iter().map(|b| b.to_string()).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
            out.into_bytes()
        }
    }
}

struct Header<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_ws_and_comments(&mut self) {
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

    fn token(&mut self) -> Result<&'a str> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.data.len() && !self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format("unexpected end of PGM data".into()));
        }
        std::str::from_utf8(&self.data[start..self.pos])
            .map_err(|_| Error::Format("non-ASCII PGM header".into()))
    }

    fn number(&mut self) -> Result<usize> {
        let t = self.token()?;
        t.parse()
            .map_err(|_| Error::Format(format!("bad PGM number {t:?}")))
    }
}

pub fn decode(data: &[u8]) -> Result<Image> {
    let mut h = Header { data, pos: 0 };
    let magic = h.token()?;
    let binary = match magic {
        "P5" => true,
        "P2" => false,
        other => return Err(Error::Format(format!("unsupported PGM magic {other:?}"))),
    };
    let width = h.number()?;
    let height = h.number()?;
    let maxval = h.number()?;
    if maxval != 255 {
        return Err(Error::Format(format!("only maxval 255 is supported, got {maxval}")));
    }
    let count = width * height;
    let bytes = if binary {
        // exactly one whitespace byte separates the header from the raster
        let start = h.pos + 1;
        if data.len() < start + count {
            return Err(Error::Format(format!(
                "P5 raster truncated: need {count} bytes, have {}",
                data.len().saturating_sub(start)
            )));
        }
        data[start..start + count].to_vec()
    } else {
        let mut v = Vec::with_capacity(count);
        for _ in 0..count {
            let n = h.number()?;
            if n > 255 {
                return Err(Error::Format(format!("sample {n} exceeds maxval")));
            }
            v.push(n as u8);
        }
        v
    };
    Image::from_bytes(width, height, &bytes)
}

pub fn write(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    fs::write(path, encode(img, PgmFormat::Binary))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Image> {
    decode(&fs::read(path)?)
}
