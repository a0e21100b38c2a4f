//! File formats: PFM depth, 16-bit PGM images, ASCII PLY point clouds and
//! CSV manifests.

mod manifest;
mod pfm;
mod pgm;
mod ply;

pub use manifest::{read_dataset_manifest, read_eval_manifest, write_dataset_manifest, write_eval_manifest, DatasetRow, EvalRow};
pub use pfm::{read_pfm, write_pfm, PfmImage};
pub use pgm::{read_pgm16, write_pgm16, write_pgm8, GrayImage};
pub use ply::{read_ply, write_ply};

use std::path::Path;

use crate::error::{CoreError, Result};

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CoreError::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

/// Whitespace-separated header tokens of a Netpbm-style file, returning the
/// tokens and the offset just past the single whitespace byte that ends the
/// last one.
pub(crate) fn header_tokens(bytes: &[u8], count: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return None;
    }
    Some((tokens, i + 1))
}
