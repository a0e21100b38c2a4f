use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{absrel, canny_edges, chamfer_edge, delta1, unproject_masked, CameraIntrinsics, CannyParams};
use crate::codec::{align_affine, DepthMap};
use crate::error::{CoreError, Result};
use crate::io::{read_eval_manifest, read_pfm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub absrel: f64,
    pub delta1: f64,
    /// `None` when the ground truth has no edge pixels.
    pub chamfer_edge: Option<f64>,
    pub valid_pixels: usize,
    pub edge_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub images: usize,
    pub absrel: f64,
    pub delta1: f64,
    pub chamfer_edge: Option<f64>,
    pub valid_pixels: usize,
    pub edge_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: Vec<ImageMetrics>,
    pub aggregate: MetricsSummary,
    /// Manifest rows whose prediction or ground truth could not be used.
    pub missing: Vec<MissingPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingPair {
    pub id: String,
    pub reason: String,
}

/// Scores one relative prediction against metric ground truth: affine
/// alignment, AbsRel and δ1 over shared valid pixels, then Chamfer distance
/// between both clouds unprojected with the GT intrinsics on the dilated GT
/// edge mask.
pub fn evaluate_pair(
    id: &str,
    pred: &DepthMap,
    gt: &DepthMap,
    k: &CameraIntrinsics,
    canny: &CannyParams,
) -> Result<ImageMetrics> {
    let (aligned, _) = align_affine(pred, gt)?;
    let edges = canny_edges(gt, canny)?;
    let mask: Vec<bool> = (0..edges.mask.len()).map(|i| edges.mask[i] && aligned.valid()[i] && gt.valid()[i]).collect();
    let edge_pixels = mask.iter().filter(|&&m| m).count();
    let chamfer = if edge_pixels == 0 {
        None
    } else {
        let p = unproject_masked(&aligned, k, Some(&mask));
        let g = unproject_masked(gt, k, Some(&mask));
        Some(chamfer_edge(&p, &g)?)
    };
    let valid_pixels = (0..gt.valid().len()).filter(|&i| gt.valid()[i] && aligned.valid()[i]).count();
    Ok(ImageMetrics {
        id: id.to_string(),
        absrel: absrel(&aligned, gt)?,
        delta1: delta1(&aligned, gt)?,
        chamfer_edge: chamfer,
        valid_pixels,
        edge_pixels,
    })
}

impl MetricsSummary {
    /// Unweighted means over images; Chamfer averages only images with edges.
    pub fn from_images(images: &[ImageMetrics]) -> Self {
        let n = images.len();
        let mean = |f: &dyn Fn(&ImageMetrics) -> f64| {
            if n == 0 {
                f64::NAN
            } else {
                images.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let ch: Vec<f64> = images.iter().filter_map(|m| m.chamfer_edge).collect();
        MetricsSummary {
            images: n,
            absrel: mean(&|m| m.absrel),
            delta1: mean(&|m| m.delta1),
            chamfer_edge: if ch.is_empty() { None } else { Some(ch.iter().sum::<f64>() / ch.len() as f64) },
            valid_pixels: images.iter().map(|m| m.valid_pixels).sum(),
            edge_pixels: images.iter().map(|m| m.edge_pixels).sum(),
        }
    }
}

fn load_depth(path: &Path) -> Result<DepthMap> {
    let img = read_pfm(path)?;
    DepthMap::metric(img.height, img.width, img.data.iter().map(|&v| v as f64).collect())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Evaluates every manifest row. Rows that fail to load or score are listed
/// in `missing` and left out of the aggregate.
pub fn evaluate_run(manifest: &Path, canny: &CannyParams) -> Result<MetricsReport> {
    let rows = read_eval_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut images = Vec::new();
    let mut missing = Vec::new();
    for row in rows {
        let scored = (|| {
            let pred = load_depth(&resolve(base, &row.pred_path))?;
            let gt = load_depth(&resolve(base, &row.gt_path))?;
            let k = CameraIntrinsics::new(row.fx, row.fy, row.cx, row.cy)?;
            evaluate_pair(&row.id, &pred, &gt, &k, canny)
        })();
        match scored {
            Ok(m) => images.push(m),
            Err(e) => missing.push(MissingPair { id: row.id.clone(), reason: e.to_string() }),
        }
    }
    Ok(MetricsReport { aggregate: MetricsSummary::from_images(&images), images, missing })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "id,absrel,delta1,chamfer_edge,valid_pixels,edge_pixels";

    /// Per-image rows followed by a `mean` row; empty Chamfer cells mean no
    /// edge pixels.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for m in &self.images {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                m.id,
                m.absrel,
                m.delta1,
                opt(m.chamfer_edge),
                m.valid_pixels,
                m.edge_pixels
            ));
        }
        let a = &self.aggregate;
        s.push_str(&format!(
            "mean,{},{},{},{},{}\n",
            a.absrel,
            a.delta1,
            opt(a.chamfer_edge),
            a.valid_pixels,
            a.edge_pixels
        ));
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `metrics.csv` and `metrics.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let csv = dir.join("metrics.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| CoreError::io(&csv, e))?;
        let json = dir.join("metrics.json");
        std::fs::write(&json, self.to_json()).map_err(|e| CoreError::io(&json, e))
    }
}
