//! Binary PPM (P6, 8-bit) reader and writer — the one required image codec.

use std::path::Path;

use crate::{CliError, Result};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn integer(&mut self) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(CliError::corrupt(self.path, "expected an integer in the header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CliError::corrupt(self.path, "unreadable integer in the header"))
    }
}

/// Decode a P6 file into `(width, height, rgb bytes)`.
pub fn read(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        let magic = bytes
            .get(..2)
            .map(|m| String::from_utf8_lossy(m).into_owned())
            .unwrap_or_default();
        return Err(CliError::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!("magic {:?}, only binary PPM (P6) is supported", magic),
        });
    }
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 2,
        path,
    };
    let width = cur.integer()?;
    let height = cur.integer()?;
    let maxval = cur.integer()?;
    if maxval != 255 {
        return Err(CliError::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!("maxval {}, only 8-bit (255) is supported", maxval),
        });
    }
    if width == 0 || height == 0 {
        return Err(CliError::corrupt(path, "zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the pixel data.
    match bytes.get(cur.pos) {
        Some(b' ' | b'\t' | b'\r' | b'\n') => cur.pos += 1,
        _ => return Err(CliError::corrupt(path, "missing separator after maxval")),
    }
    let want = width * height * 3;
    let pixels = &bytes[cur.pos..];
    if pixels.len() < want {
        return Err(CliError::corrupt(
            path,
            format!("pixel data truncated: want {} bytes, have {}", want, pixels.len()),
        ));
    }
    Ok((width, height, pixels[..want].to_vec()))
}

/// Encode `rgb` (length `width * height * 3`) as a P6 file.
pub fn write(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3, "rgb length mismatch");
    let mut out = format!("P6\n{} {}\n255\n", width, height).into_bytes();
    out.extend_from_slice(rgb);
    crate::atomic_write(path, &out)
}
