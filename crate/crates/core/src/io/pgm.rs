use std::path::Path;

use super::{header_tokens, read_bytes, write_bytes};
use crate::error::{CoreError, Result};

/// Grayscale image with intensities in `[0, 1]`, rows top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

fn quantize(v: f64, max: f64) -> u16 {
    (v.clamp(0.0, 1.0) * max).round() as u16
}

/// Binary PGM (P5) with maxval 65535, big-endian samples.
pub fn write_pgm16(path: &Path, img: &GrayImage) -> Result<()> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for &v in &img.data {
        out.extend_from_slice(&quantize(v, 65535.0).to_be_bytes());
    }
    write_bytes(path, &out)
}

/// Binary PGM (P5) with maxval 255, for quick visualization.
pub fn write_pgm8(path: &Path, img: &GrayImage) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v, 255.0) as u8));
    write_bytes(path, &out)
}

/// Reads a P5 PGM of any maxval, scaling samples to `[0, 1]`.
pub fn read_pgm16(path: &Path) -> Result<GrayImage> {
    let bytes = read_bytes(path)?;
    decode(&bytes).map_err(|msg| CoreError::format(path, msg))
}

fn decode(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let (tok, start) = header_tokens(bytes, 4).ok_or("truncated PGM header")?;
    if tok[0] != "P5" {
        return Err(format!("expected binary PGM magic `P5`, found `{}`", tok[0]));
    }
    let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} `{s}`"));
    let width = parse(&tok[1], "width")?;
    let height = parse(&tok[2], "height")?;
    let maxval = parse(&tok[3], "maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err("zero extent or maxval out of range".into());
    }
    let wide = maxval > 255;
    let n = width * height;
    let body = &bytes[start..];
    let need = if wide { 2 * n } else { n };
    if body.len() != need {
        return Err(format!("expected {need} data bytes, found {}", body.len()));
    }
    let scale = maxval as f64;
    let data = if wide {
        body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale).collect()
    } else {
        body.iter().map(|&b| b as f64 / scale).collect()
    };
    Ok(GrayImage { height, width, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.pgm");
        let data: Vec<f64> = (0..100).map(|i| (i as f64 * 0.731).fract()).collect();
        let img = GrayImage { height: 10, width: 10, data };
        write_pgm16(&path, &img).unwrap();
        let back = read_pgm16(&path).unwrap();
        let worst = img.data.iter().zip(&back.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1.0 / 65535.0, "{worst}");
    }

    #[test]
    fn wrong_magic() {
        assert!(decode(b"P2\n1 1\n255\n0\n").unwrap_err().contains("P5"));
    }
}
