//! Binary PPM (P6) and PGM (P5) files with maxval 255.

use std::path::Path;

use crate::error::{FanError, Result};

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Raster of a decoded file: width, height, bytes.
pub type Raster = (usize, usize, Vec<u8>);

fn decode(bytes: &[u8], magic: &[u8; 2], channels: usize) -> std::result::Result<Raster, String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format!("missing {} magic number", String::from_utf8_lossy(magic)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("malformed header".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("header number out of range")?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if width == 0 || height == 0 {
        return Err("zero-sized raster".into());
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("malformed header".into());
    }
    pos += 1;
    let n = width * height * channels;
    if bytes.len() - pos != n {
        return Err(format!("expected {n} data bytes, found {}", bytes.len() - pos));
    }
    Ok((width, height, bytes[pos..].to_vec()))
}

fn read(path: &Path, magic: &[u8; 2], channels: usize) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| FanError::io(path, e))?;
    decode(&bytes, magic, channels).map_err(|m| FanError::Data(format!("{}: {m}", path.display())))
}

pub fn read_ppm(path: &Path) -> Result<Raster> {
    read(path, b"P6", 3)
}

pub fn read_pgm(path: &Path) -> Result<Raster> {
    read(path, b"P5", 1)
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    std::fs::write(path, encode_ppm(width, height, rgb)).map_err(|e| FanError::io(path, e))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    std::fs::write(path, encode_pgm(width, height, gray)).map_err(|e| FanError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_comments() {
        let px = [1u8, 2, 3, 4, 5, 6];
        let enc = encode_ppm(2, 1, &px);
        assert_eq!(decode(&enc, b"P6", 3).unwrap(), (2, 1, px.to_vec()));
        let commented = b"P5\n# note\n2 2\n255\n\x00\xff\x00\xff";
        assert_eq!(decode(commented, b"P5", 1).unwrap().2, vec![0, 255, 0, 255]);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(decode(b"P6\n2 1\n255\n\x01", b"P6", 3).is_err());
        assert!(decode(b"P5\n1 1\n65535\n\x01\x02", b"P5", 1).is_err());
        assert!(decode(b"P3\n1 1\n255\n1", b"P6", 3).is_err());
    }
}
