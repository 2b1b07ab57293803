//! PFM reader/writer for depth and disparity grids.
//!
//! Grayscale PFM only: magic `Pf`, ASCII width/height, a scale whose sign
//! encodes endianness (negative = little-endian), then `width * height`
//! 32-bit floats stored bottom row first. Non-finite and non-positive stored
//! values load as invalid pixels; invalid pixels are written as NaN. The
//! scale magnitude is ignored beyond its sign; the writer always emits
//! `-1.0`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::camera::Grid;
use crate::error::{Error, Result};

fn parse_error(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        offset,
        message: message.into(),
    }
}

/// Pulls the next whitespace-delimited ASCII token starting at `*offset`.
fn next_token<'a>(bytes: &'a [u8], offset: &mut usize, path: &Path) -> Result<&'a str> {
    while *offset < bytes.len() && bytes[*offset].is_ascii_whitespace() {
        *offset += 1;
    }
    let start = *offset;
    while *offset < bytes.len() && !bytes[*offset].is_ascii_whitespace() {
        *offset += 1;
    }
    if start == *offset {
        return Err(parse_error(path, start, "unexpected end of header"));
    }
    std::str::from_utf8(&bytes[start..*offset])
        .map_err(|_| parse_error(path, start, "header is not ASCII"))
}

/// Reads a PFM file into a grid.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut offset = 0;
    let magic = next_token(&bytes, &mut offset, path)?;
    match magic {
        "Pf" => {}
        "PF" => {
            return Err(parse_error(
                path,
                0,
                "color PFM (magic 'PF') is not supported, expected grayscale 'Pf'",
            ));
        }
        other => {
            return Err(parse_error(
                path,
                0,
                format!("bad magic {other:?}, expected 'Pf'"),
            ));
        }
    }
    let width_at = offset;
    let width: usize = next_token(&bytes, &mut offset, path)?
        .parse()
        .map_err(|e| parse_error(path, width_at, format!("bad width: {e}")))?;
    let height_at = offset;
    let height: usize = next_token(&bytes, &mut offset, path)?
        .parse()
        .map_err(|e| parse_error(path, height_at, format!("bad height: {e}")))?;
    let scale_at = offset;
    let scale: f64 = next_token(&bytes, &mut offset, path)?
        .parse()
        .map_err(|e| parse_error(path, scale_at, format!("bad scale: {e}")))?;
    if width == 0 || height == 0 {
        return Err(parse_error(path, width_at, "zero image dimension"));
    }
    if scale == 0.0 {
        return Err(parse_error(path, scale_at, "scale must be nonzero"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if offset >= bytes.len() || !bytes[offset].is_ascii_whitespace() {
        return Err(parse_error(path, offset, "missing header terminator"));
    }
    offset += 1;

    let little_endian = scale < 0.0;
    let expected = width * height * 4;
    let payload = &bytes[offset..];
    if payload.len() < expected {
        return Err(parse_error(
            path,
            offset + payload.len(),
            format!(
                "truncated payload: expected {expected} bytes, found {}",
                payload.len()
            ),
        ));
    }

    // Rows are stored bottom to top.
    let mut values = vec![0.0f64; width * height];
    for row in 0..height {
        let v = height - 1 - row; // in-memory row (top-first)
        for u in 0..width {
            let at = offset + (row * width + u) * 4;
            let raw: [u8; 4] = bytes[at..at + 4].try_into().unwrap();
            let bits = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            values[v * width + u] = f64::from(bits);
        }
    }
    Grid::from_values(width, height, values)
}

/// Writes a grid as little-endian grayscale PFM, invalid pixels as NaN.
pub fn write_pfm(path: impl AsRef<Path>, grid: &Grid) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(32 + grid.width() * grid.height() * 4);
    write!(out, "Pf\n{} {}\n-1.0\n", grid.width(), grid.height()).expect("vec write");
    for row in 0..grid.height() {
        let v = grid.height() - 1 - row;
        for u in 0..grid.width() {
            let value = match grid.get(u, v) {
                Some(d) => d as f32,
                None => f32::NAN,
            };
            out.extend_from_slice(&value.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}
