//! `MDPM1` probability stacks: the magic line, an ASCII `W H N` line, then
//! `N * H * W` little-endian `f32` values, plane-major then row-major.

use std::fs;
use std::path::Path;

use log::warn;

use super::{Grid, ProbMap, Stack};
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"MDPM1\n";

pub fn encode_probstack(stack: &Stack<f64>) -> Vec<u8> {
    let (h, w) = stack.dims();
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(format!("{w} {h} {}\n", stack.len()).as_bytes());
    for plane in stack.planes() {
        for &v in plane.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Decodes a stack, clamping out-of-range values into `[0, 1]`. Returns the
/// stack and the number of clamped values.
pub fn decode_probstack(bytes: &[u8]) -> Result<(Stack<f64>, usize)> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Format("bad magic, expected MDPM1".into()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing MDPM1 size line".into()))?;
    let line = std::str::from_utf8(&rest[..nl])
        .map_err(|_| Error::Format("non-ASCII size line".into()))?;
    let dims: Vec<usize> = line
        .split(' ')
        .map(|t| t.parse().map_err(|_| Error::Format(format!("bad size line `{line}`"))))
        .collect::<Result<_>>()?;
    let [w, h, n] = dims[..] else {
        return Err(Error::Format(format!("size line `{line}` needs W H N")));
    };
    if w == 0 || h == 0 || n == 0 {
        return Err(Error::Format(format!("empty stack {w}x{h}x{n}")));
    }
    let payload = &rest[nl + 1..];
    let expected = w * h * n * 4;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let mut clamped = 0;
    let mut values = Vec::with_capacity(w * h * n);
    for c in payload.chunks_exact(4) {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
        if !v.is_finite() {
            return Err(Error::Format("non-finite probability".into()));
        }
        if !(0.0..=1.0).contains(&v) {
            clamped += 1;
        }
        values.push(v.clamp(0.0, 1.0));
    }
    let planes: Vec<ProbMap> = values
        .chunks_exact(w * h)
        .map(|c| Grid::new(h, w, c.to_vec()))
        .collect::<Result<_>>()?;
    Ok((Stack::new(planes)?, clamped))
}

pub fn read_probstack(path: impl AsRef<Path>) -> Result<Stack<f64>> {
    let path = path.as_ref();
    let (stack, clamped) = decode_probstack(&fs::read(path)?)?;
    if clamped > 0 {
        warn!("{}: clamped {clamped} values into [0, 1]", path.display());
    }
    Ok(stack)
}

pub fn write_probstack(stack: &Stack<f64>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_probstack(stack))?;
    Ok(())
}
