//! Binary PGM (P5) and PPM (P6) with byte-exact headers.
//!
//! Written headers are exactly `P5\n<w> <h>\n255\n` (and P6 likewise);
//! the reader accepts standard PNM header whitespace and `#` comments.
//! All writes go through a temp file + rename so partial files never
//! appear under the target name.

use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let stem = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{stem}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn encode(magic: &str, w: usize, h: usize, payload: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(payload);
    out
}

pub fn write_pgm(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    assert_eq!(gray.len(), w * h, "pgm payload size");
    atomic_write(path, &encode("P5", w, h, gray))
}

pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), w * h * 3, "ppm payload size");
    atomic_write(path, &encode("P6", w, h, rgb))
}

struct HeaderScan<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderScan<'a> {
    fn skip_space_and_comments(&mut self) {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return;
            }
        }
    }

    fn token(&mut self) -> Option<&'a [u8]> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    fn int(&mut self) -> Option<u32> {
        let tok = self.token()?;
        std::str::from_utf8(tok).ok()?.parse().ok()
    }
}

fn read_pnm(path: &Path, want_magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let pstr = path.display().to_string();
    let bytes = fs::read(path)?;
    let mut scan = HeaderScan { bytes: &bytes, pos: 0 };
    let magic = scan
        .token()
        .and_then(|t| std::str::from_utf8(t).ok())
        .ok_or_else(|| Error::PnmHeader { path: pstr.clone() })?
        .to_string();
    if magic != want_magic {
        return Err(Error::PnmUnsupported { path: pstr, found: magic });
    }
    let w = scan.int().ok_or_else(|| Error::PnmHeader { path: pstr.clone() })? as usize;
    let h = scan.int().ok_or_else(|| Error::PnmHeader { path: pstr.clone() })? as usize;
    let maxval = scan.int().ok_or_else(|| Error::PnmHeader { path: pstr.clone() })?;
    if maxval != 255 {
        return Err(Error::PnmMaxval { path: pstr, found: maxval });
    }
    // Exactly one whitespace byte separates the header from the payload.
    if scan.pos >= bytes.len() || !bytes[scan.pos].is_ascii_whitespace() {
        return Err(Error::PnmHeader { path: pstr });
    }
    let payload = &bytes[scan.pos + 1..];
    let want = w * h * channels;
    if payload.len() < want {
        return Err(Error::PnmTruncated { path: pstr, want, got: payload.len() });
    }
    Ok((w, h, payload[..want].to_vec()))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_pnm(path, "P5", 1)
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_pnm(path, "P6", 3)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("smamba-pnm-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn pgm_round_trip_and_exact_header() {
        let dir = tmpdir();
        let path = dir.join("m.pgm");
        // 2x2 mask [0,1;1,0] as bytes 00 FF FF 00.
        write_pgm(&path, 2, 2, &[0, 255, 255, 0]).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes, b"P5\n2 2\n255\n\x00\xff\xff\x00");
        let (w, h, data) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(data, vec![0, 255, 255, 0]);
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tmpdir();
        let path = dir.join("i.ppm");
        let rgb: Vec<u8> = (0..12).map(|i| i as u8 * 20).collect();
        write_ppm(&path, 2, 2, &rgb).unwrap();
        let (w, h, data) = read_ppm(&path).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(data, rgb);
    }

    #[test]
    fn error_kinds_are_distinct() {
        let dir = tmpdir();

        let p4 = dir.join("bad.pbm");
        fs::write(&p4, b"P4\n2 2\n\x00").unwrap();
        assert!(matches!(read_pgm(&p4), Err(Error::PnmUnsupported { .. })));

        let badmax = dir.join("badmax.pgm");
        fs::write(&badmax, b"P5\n2 2\n65535\n\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_pgm(&badmax), Err(Error::PnmMaxval { found: 65535, .. })));

        let trunc = dir.join("trunc.pgm");
        fs::write(&trunc, b"P5\n4 4\n255\n\x00\x01").unwrap();
        assert!(matches!(read_pgm(&trunc), Err(Error::PnmTruncated { want: 16, got: 2, .. })));

        let garbled = dir.join("garbled.pgm");
        fs::write(&garbled, b"P5\nnot numbers\n255\n").unwrap();
        assert!(matches!(read_pgm(&garbled), Err(Error::PnmHeader { .. })));
    }

    #[test]
    fn header_comments_accepted() {
        let dir = tmpdir();
        let p = dir.join("comment.pgm");
        fs::write(&p, b"P5\n# a comment\n2 1\n255\n\x05\x06").unwrap();
        let (w, h, data) = read_pgm(&p).unwrap();
        assert_eq!((w, h, data), (2, 1, vec![5, 6]));
    }
}
