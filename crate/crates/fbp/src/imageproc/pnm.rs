//! Binary PPM (P6) and PGM (P5) with 8-bit samples.
//!
//! This is the repo's canonical on-disk image format: header tokens in
//! ASCII with `#` comments, a single whitespace byte after the maxval, then
//! the raw sample payload. Parse failures report the byte offset.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

#[derive(Debug)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved samples: RGB triples for P6, single bytes for P5.
    pub samples: Vec<u8>,
    pub channels: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), offset: self.pos, msg: msg.into() }
    }

    fn skip_space_and_comments(&mut self) {
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

    fn read_uint(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.fail(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.fail(format!("unreadable {what}")))
    }
}

pub fn read(path: &Path) -> Result<RawImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };

    if bytes.len() < 2 {
        return Err(cur.fail("file too short for a PNM magic"));
    }
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        _ => return Err(cur.fail("expected P6 or P5 magic")),
    };
    cur.pos = 2;

    let width = cur.read_uint("width")?;
    let height = cur.read_uint("height")?;
    let maxval = cur.read_uint("maxval")?;
    if width == 0 || height == 0 {
        return Err(cur.fail("zero image dimension"));
    }
    if maxval != 255 {
        return Err(cur.fail(format!("only 8-bit images supported, maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.fail("expected whitespace before payload"));
    }
    cur.pos += 1;

    let need = width * height * channels;
    let avail = bytes.len() - cur.pos;
    if avail < need {
        cur.pos = bytes.len();
        return Err(cur.fail(format!("payload truncated: need {need} bytes, found {avail}")));
    }
    let samples = bytes[cur.pos..cur.pos + need].to_vec();
    Ok(RawImage { width, height, samples, channels })
}

pub fn write(path: &Path, width: usize, height: usize, channels: usize, samples: &[u8]) -> Result<()> {
    assert_eq!(samples.len(), width * height * channels);
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        _ => unreachable!("channels must be 1 or 3"),
    };
    let mut out = Vec::with_capacity(samples.len() + 32);
    write!(out, "{magic}\n{width} {height}\n255\n").expect("vec write");
    out.extend_from_slice(samples);
    std::fs::write(path, &out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("fbp-pnm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_p6() {
        let p = tmp("rt.ppm");
        let samples = vec![255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30];
        write(&p, 2, 2, 3, &samples).unwrap();
        let img = read(&p).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 2, 3));
        assert_eq!(img.samples, samples);
    }

    #[test]
    fn header_comments_allowed() {
        let p = tmp("comment.ppm");
        std::fs::write(&p, b"P6\n# made by hand\n1 1\n255\n\xff\x80\x00").unwrap();
        let img = read(&p).unwrap();
        assert_eq!(img.samples, vec![0xff, 0x80, 0x00]);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let p = tmp("trunc.ppm");
        std::fs::write(&p, b"P6\n2 2\n255\n\x01\x02\x03").unwrap();
        match read(&p) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_missing_file() {
        let p = tmp("bad.ppm");
        std::fs::write(&p, b"P3\n1 1\n255\n1 2 3\n").unwrap();
        assert!(matches!(read(&p), Err(Error::Format { .. })));
        assert!(matches!(read(Path::new("/no/such/file.ppm")), Err(Error::Io { .. })));
    }
}
