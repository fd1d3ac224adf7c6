//! Binary PGM (P5) read/write, 8-bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_pgm(path: &Path, w: usize, h: usize, bytes: &[u8]) -> Result<()> {
    debug_assert_eq!(bytes.len(), w * h);
    let mut buf = Vec::with_capacity(bytes.len() + 32);
    write!(buf, "P5\n{} {}\n255\n", w, h).expect("in-memory write");
    buf.extend_from_slice(bytes);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub struct Pgm {
    pub w: usize,
    pub h: usize,
    pub bytes: Vec<u8>,
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let raw = match fs::read(path) {
        Ok(r) => r,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile { path: path.to_path_buf() })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let corrupt = |detail: &str| Error::CorruptPayload {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };

    // Header: "P5", width, height, maxval as whitespace-separated tokens,
    // then exactly one whitespace byte before the payload.
    let mut pos = 0usize;
    let mut tokens: Vec<String> = Vec::new();
    while tokens.len() < 4 {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&raw[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(corrupt(&format!("bad magic '{}'", tokens[0])));
    }
    let w: usize = tokens[1].parse().map_err(|_| corrupt("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| corrupt("bad height"))?;
    if tokens[3] != "255" {
        return Err(corrupt("only maxval 255 is supported"));
    }
    pos += 1; // single whitespace separator
    if pos + w * h > raw.len() {
        return Err(corrupt(&format!(
            "payload has {} bytes, header promises {}",
            raw.len().saturating_sub(pos),
            w * h
        )));
    }
    Ok(Pgm {
        w,
        h,
        bytes: raw[pos..pos + w * h].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        let bytes: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        write_pgm(&p, 4, 3, &bytes).unwrap();
        let back = read_pgm(&p).unwrap();
        assert_eq!((back.w, back.h), (4, 3));
        assert_eq!(back.bytes, bytes);
    }

    #[test]
    fn truncated_payload_is_corrupt_not_crash() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        std::fs::write(&p, b"P5\n4 4\n255\nabc").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::CorruptPayload { .. })));
    }

    #[test]
    fn missing_file_is_distinct() {
        assert!(matches!(
            read_pgm(Path::new("/nonexistent/x.pgm")),
            Err(Error::MissingFile { .. })
        ));
    }

    #[test]
    fn bad_magic_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        std::fs::write(&p, b"P6\n2 2\n255\naaaa").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::CorruptPayload { .. })));
    }
}
