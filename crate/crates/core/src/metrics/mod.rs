//! Relative-depth accuracy, depth unprojection and the edge-aware Chamfer
//! metric.

mod canny;
mod chamfer;
mod report;

pub use canny::{canny_edges, CannyParams, EdgeMask};
pub use chamfer::{chamfer_brute_force, chamfer_edge, KdTree};
pub use report::{evaluate_pair, evaluate_run, ImageMetrics, MetricsReport, MetricsSummary};

use serde::{Deserialize, Serialize};

use crate::codec::DepthMap;
use crate::error::{CoreError, Result};

pub const DELTA1_THRESHOLD: f64 = 1.25;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(CoreError::contract("CameraIntrinsics", format!("fx={fx} fy={fy} cx={cx} cy={cy}")));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn shared_pixels<'a>(pred: &'a DepthMap, gt: &'a DepthMap) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(CoreError::contract(
            "metrics",
            format!("extents {}x{} vs {}x{}", pred.height(), pred.width(), gt.height(), gt.width()),
        ));
    }
    let it = (0..gt.values().len())
        .filter(|&i| gt.valid()[i] && pred.valid()[i] && gt.values()[i] > 0.0)
        .map(|i| (pred.values()[i], gt.values()[i]));
    Ok(it)
}

/// Mean of `|pred − gt| / gt` over pixels valid in both maps.
pub fn absrel(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, g) in shared_pixels(pred, gt)? {
        sum += (p - g).abs() / g;
        n += 1;
    }
    if n == 0 {
        return Err(CoreError::Empty("absrel"));
    }
    Ok(sum / n as f64)
}

/// Fraction of shared valid pixels with `max(pred/gt, gt/pred) < 1.25`.
/// Non-positive predictions count as misses.
pub fn delta1(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for (p, g) in shared_pixels(pred, gt)? {
        if p > 0.0 && (p / g).max(g / p) < DELTA1_THRESHOLD {
            hit += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(CoreError::Empty("delta1"));
    }
    Ok(hit as f64 / n as f64)
}

/// Back-projects every valid pixel `(u, v)` with depth `d` to
/// `((u − cx)·d/fx, (v − cy)·d/fy, d)`, in row-major pixel order.
pub fn unproject(d: &DepthMap, k: &CameraIntrinsics) -> PointCloud {
    unproject_masked(d, k, None)
}

/// As [`unproject`], restricted to pixels where `mask` is set.
pub fn unproject_masked(d: &DepthMap, k: &CameraIntrinsics, mask: Option<&[bool]>) -> PointCloud {
    let w = d.width();
    let points = (0..d.values().len())
        .filter(|&i| d.valid()[i] && mask.map_or(true, |m| m[i]))
        .map(|i| {
            let (v, u) = ((i / w) as f64, (i % w) as f64);
            let z = d.values()[i];
            [(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z]
        })
        .collect();
    PointCloud { points }
}

/// 3x3 mean filter over valid neighbours (replicate border). A blurred
/// ground truth is the reference baseline an edge-aware prediction must beat.
pub fn mean_blur3(d: &DepthMap) -> Result<DepthMap> {
    let (h, w) = (d.height(), d.width());
    let mut out = d.values().to_vec();
    for r in 0..h {
        for c in 0..w {
            if !d.is_valid(r, c) {
                continue;
            }
            let (mut sum, mut n) = (0.0, 0usize);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let rr = (r as i64 + dr).clamp(0, h as i64 - 1) as usize;
                    let cc = (c as i64 + dc).clamp(0, w as i64 - 1) as usize;
                    if d.is_valid(rr, cc) {
                        sum += d.get(rr, cc);
                        n += 1;
                    }
                }
            }
            out[r * w + c] = sum / n as f64;
        }
    }
    DepthMap::with_mask(h, w, out, d.valid().to_vec(), d.space())
}
