use std::path::Path;

use super::{header_tokens, read_bytes, write_bytes};
use crate::error::{CoreError, Result};

/// Single-channel float image, rows stored top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct PfmImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Writes a little-endian grayscale PFM (`Pf`, scale −1). PFM stores rows
/// bottom to top.
pub fn write_pfm(path: &Path, img: &PfmImage) -> Result<()> {
    if img.data.len() != img.height * img.width {
        return Err(CoreError::format(path, "pixel count does not match extents"));
    }
    let mut out = format!("Pf\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    out.reserve(img.data.len() * 4);
    for row in img.data.chunks(img.width).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_bytes(path, &out)
}

pub fn read_pfm(path: &Path) -> Result<PfmImage> {
    let bytes = read_bytes(path)?;
    decode(&bytes).map_err(|msg| CoreError::format(path, msg))
}

fn decode(bytes: &[u8]) -> std::result::Result<PfmImage, String> {
    let (tok, start) = header_tokens(bytes, 4).ok_or("truncated PFM header")?;
    if tok[0] != "Pf" {
        return Err(format!("expected single-channel PFM magic `Pf`, found `{}`", tok[0]));
    }
    let width: usize = tok[1].parse().map_err(|_| format!("bad width `{}`", tok[1]))?;
    let height: usize = tok[2].parse().map_err(|_| format!("bad height `{}`", tok[2]))?;
    let scale: f64 = tok[3].parse().map_err(|_| format!("bad scale `{}`", tok[3]))?;
    if width == 0 || height == 0 || scale == 0.0 {
        return Err("zero extent or scale".into());
    }
    let body = &bytes[start..];
    let n = width * height;
    if body.len() != n * 4 {
        return Err(format!("expected {} data bytes, found {}", n * 4, body.len()));
    }
    let little = scale < 0.0;
    let mut data = vec![0f32; n];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (r, c) = (height - 1 - i / width, i % width);
        data[r * width + c] = v;
    }
    Ok(PfmImage { height, width, data })
}
