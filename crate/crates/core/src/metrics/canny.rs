use serde::{Deserialize, Serialize};

use crate::codec::{percentile, DepthMap};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CannyParams {
    pub low_pct: f64,
    pub high_pct: f64,
    pub dilation_radius: usize,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams { low_pct: 70.0, high_pct: 90.0, dilation_radius: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    pub dilation_radius: usize,
}

impl EdgeMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.mask.len() as f64
    }
}

const SIGMA: f64 = 1.0;
const RADIUS: usize = 3;
const MAG_FLOOR: f64 = 1e-9;

/// Canny on inverse depth scaled to `[0, 1]`: Gaussian blur, Sobel,
/// non-maximum suppression, percentile double threshold with 8-connected
/// hysteresis, then square dilation. A constant map yields an empty mask.
pub fn canny_edges(d: &DepthMap, params: &CannyParams) -> Result<EdgeMask> {
    let (h, w) = (d.height(), d.width());
    if d.valid_count() < 9 || h < 3 || w < 3 {
        return Err(CoreError::contract("canny_edges", "need at least a 3x3 support of valid pixels"));
    }
    if !(0.0..=100.0).contains(&params.low_pct) || !(params.low_pct <= params.high_pct && params.high_pct <= 100.0) {
        return Err(CoreError::contract(
            "canny_edges",
            format!("thresholds must satisfy 0 <= low <= high <= 100, got {} / {}", params.low_pct, params.high_pct),
        ));
    }
    let empty = EdgeMask { height: h, width: w, mask: vec![false; h * w], dilation_radius: params.dilation_radius };

    let inv: Vec<f64> = d
        .values()
        .iter()
        .zip(d.valid())
        .map(|(&v, &ok)| if ok && v > 0.0 { 1.0 / v } else { f64::NAN })
        .collect();
    let lo = inv.iter().copied().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
    let hi = inv.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Ok(empty);
    }
    let img: Vec<f64> = inv.iter().map(|&v| if v.is_finite() { (v - lo) / (hi - lo) } else { 0.0 }).collect();

    let blurred = gaussian_blur(&img, h, w);
    let (gx, gy) = sobel(&blurred, h, w);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();

    let nonzero: Vec<f64> = mag.iter().copied().filter(|&m| m > MAG_FLOOR).collect();
    if nonzero.is_empty() {
        return Ok(empty);
    }
    let t_low = percentile(&nonzero, params.low_pct)?;
    let t_high = percentile(&nonzero, params.high_pct)?;

    let thin = suppress(&mag, &gx, &gy, h, w);
    let edges = hysteresis(&thin, h, w, t_low.max(MAG_FLOOR), t_high.max(MAG_FLOOR));
    Ok(EdgeMask { mask: dilate(&edges, h, w, params.dilation_radius), ..empty })
}

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn gaussian_blur(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let r = RADIUS as isize;
    let mut kernel: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * SIGMA * SIGMA)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .zip(&kernel)
                .map(|(o, k)| k * img[y * w + clamp_idx(x as isize + o, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .zip(&kernel)
                .map(|(o, k)| k * tmp[clamp_idx(y as isize + o, h) * w + x])
                .sum();
        }
    }
    out
}

fn sobel(img: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |y: isize, x: isize| img[clamp_idx(y, h) * w + clamp_idx(x, w)];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        }
    }
    (gx, gy)
}

/// Keeps local maxima across the gradient direction, quantized to four
/// orientations. Ties keep the pixel only against the "before" neighbour so
/// flat ridges thin to one pixel. The one-pixel border is dropped.
fn suppress(mag: &[f64], gx: &[f64], gy: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            let m = mag[i];
            if m <= MAG_FLOOR {
                continue;
            }
            let angle = gy[i].atan2(gx[i]).to_degrees().rem_euclid(180.0);
            let (dy, dx): (isize, isize) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let before = mag[(y as isize - dy) as usize * w + (x as isize - dx) as usize];
            let after = mag[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
            if m > before && m >= after {
                out[i] = m;
            }
        }
    }
    out
}

fn hysteresis(thin: &[f64], h: usize, w: usize, low: f64, high: f64) -> Vec<bool> {
    let mut edge = vec![false; h * w];
    let mut stack: Vec<usize> = (0..h * w).filter(|&i| thin[i] >= high).collect();
    for &i in &stack {
        edge[i] = true;
    }
    while let Some(i) = stack.pop() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edge[j] && thin[j] >= low {
                    edge[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    edge
}

fn dilate(mask: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    if r == 0 {
        return mask.to_vec();
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                    for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                        out[yy * w + xx] = true;
                    }
                }
            }
        }
    }
    out
}
