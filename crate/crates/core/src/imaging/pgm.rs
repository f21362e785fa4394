//! Binary PGM (P5). 8-bit files hold gray images, 16-bit big-endian files
//! hold label maps.

use std::fs;
use std::path::Path;

use super::{GrayImage, Grid, LabelMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum PgmImage {
    Gray(GrayImage),
    Labels(LabelMap),
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format("not a binary PGM (missing P5 magic)".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Whitespace and comments may separate header tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Format("truncated PGM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad number in PGM header".into()))?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("missing whitespace after PGM maxval".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("empty PGM {width}x{height}")));
    }
    Ok(Header { width, height, maxval, data_start: pos })
}

pub fn decode_pgm(bytes: &[u8]) -> Result<PgmImage> {
    let h = parse_header(bytes)?;
    let n = h.width * h.height;
    let payload = &bytes[h.data_start..];
    match h.maxval {
        255 => {
            if payload.len() < n {
                return Err(Error::Format(format!("PGM payload has {} of {n} bytes", payload.len())));
            }
            let data = payload[..n].iter().map(|&b| b as f64 / 255.0).collect();
            Ok(PgmImage::Gray(Grid::new(h.height, h.width, data)?))
        }
        65535 => {
            if payload.len() < 2 * n {
                return Err(Error::Format(format!(
                    "PGM payload has {} of {} bytes",
                    payload.len(),
                    2 * n
                )));
            }
            let data = payload[..2 * n]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
                .collect();
            Ok(PgmImage::Labels(Grid::new(h.height, h.width, data)?))
        }
        other => Err(Error::Format(format!("unsupported PGM maxval {other}"))),
    }
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<PgmImage> {
    decode_pgm(&fs::read(path)?)
}

/// Encodes a gray image as 8-bit P5, quantizing with `round(v * 255)`.
pub fn encode_gray_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Encodes a label map as 16-bit big-endian P5.
pub fn encode_label_pgm(labels: &LabelMap) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{} {}\n65535\n", labels.width(), labels.height()).into_bytes();
    for &l in labels.data() {
        let v = u16::try_from(l)
            .map_err(|_| Error::InvalidArgument(format!("label {l} does not fit 16 bits")))?;
        out.extend_from_slice(&v.to_be_bytes());
    }
    Ok(out)
}

pub fn write_gray_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_gray_pgm(img))?;
    Ok(())
}

pub fn write_label_pgm(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_label_pgm(labels)?)?;
    Ok(())
}
