//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    /// Skips whitespace and `#` comments running to end of line.
    fn skip_blank(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_blank();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

/// Decodes a binary P6 or P5 file.
pub fn parse_ppm(bytes: &[u8]) -> Result<Image> {
    let mut h = Header { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(h.err("bad magic, expected P6 or P5")),
    };
    h.pos = 2;
    if !bytes
        .get(2)
        .is_some_and(|b| b.is_ascii_whitespace() || *b == b'#')
    {
        return Err(h.err("bad magic, expected P6 or P5"));
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = {
        h.skip_blank();
        h.pos
    };
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Parse {
            offset: maxval_at,
            msg: format!("unsupported maxval {maxval}, only 255"),
        });
    }
    if width == 0 || height == 0 {
        return Err(h.err("zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(h.err("expected whitespace after maxval"));
    }
    h.pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| h.err("image dimensions overflow"))?;
    let payload = &bytes[h.pos..];
    if payload.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!(
                "truncated payload: need {need} bytes from offset {}, have {}",
                h.pos,
                payload.len()
            ),
        });
    }
    Image::new(height, width, channels, payload[..need].to_vec())
}

/// Encodes with the canonical header `P6\n{w} {h}\n255\n`.
pub fn write_ppm(image: &Image) -> Vec<u8> {
    let magic = if image.channels() == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(image.data());
    out
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes)
}

pub fn write_ppm_file(path: &Path, image: &Image) -> Result<()> {
    std::fs::write(path, write_ppm(image)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn offset(e: Error) -> usize {
        match e {
            Error::Parse { offset, .. } => offset,
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn red_pixel() {
        let img = parse_ppm(b"P6\n1 1\n255\n\xff\x00\x00").unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (1, 1, 3));
        assert_eq!(img.data(), &[255, 0, 0]);
    }

    #[test]
    fn gray_ramp() {
        let img = parse_ppm(b"P5\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (1, 2, 1));
        assert_eq!(img.data(), &[0, 255]);
    }

    #[test]
    fn comments_are_skipped() {
        let img = parse_ppm(b"P5\n# made by hand\n2 # w\n1\n255\n\x01\x02").unwrap();
        assert_eq!(img.data(), &[1, 2]);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = b"P6\n2 1\n255\n\x01\x02\x03";
        let e = parse_ppm(bytes).unwrap_err();
        assert!(e.to_string().contains("need 6 bytes from offset 11"));
        assert_eq!(offset(e), bytes.len());
    }

    #[test]
    fn bad_magic_and_maxval() {
        assert_eq!(offset(parse_ppm(b"P3\n1 1\n255\n").unwrap_err()), 0);
        assert_eq!(offset(parse_ppm(b"P5\n1 1\n65535\n\0\0").unwrap_err()), 7);
        assert!(parse_ppm(b"P5\n1\n").is_err());
    }

    #[test]
    fn canonical_round_trip() {
        let bytes = b"P6\n2 1\n255\n\x01\x02\x03\x04\x05\x06".to_vec();
        assert_eq!(write_ppm(&parse_ppm(&bytes).unwrap()), bytes);
    }
}
