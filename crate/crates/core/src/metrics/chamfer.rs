use crate::error::{CoreError, Result};
use crate::metrics::PointCloud;

/// Static 3-D k-d tree for nearest-neighbour distance queries.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    // per node: splitting axis; the node's point sits at the middle of its slice
    axis: Vec<u8>,
}

impl KdTree {
    pub fn build(points: &[[f64; 3]]) -> Self {
        let mut pts = points.to_vec();
        let mut axis = vec![0u8; pts.len()];
        build(&mut pts, &mut axis, 0);
        KdTree { points: pts, axis }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Euclidean distance from `q` to its nearest stored point.
    pub fn nearest_distance(&self, q: &[f64; 3]) -> Option<f64> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = f64::INFINITY;
        self.search(0, self.points.len(), q, &mut best);
        Some(best.sqrt())
    }

    fn search(&self, lo: usize, hi: usize, q: &[f64; 3], best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = &self.points[mid];
        let d2 = dist2(p, q);
        if d2 < *best {
            *best = d2;
        }
        let a = self.axis[mid] as usize;
        let diff = q[a] - p[a];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(near.0, near.1, q, best);
        if diff * diff < *best {
            self.search(far.0, far.1, q, best);
        }
    }
}

fn build(pts: &mut [[f64; 3]], axis: &mut [u8], depth: usize) {
    if pts.len() <= 1 {
        if let Some(a) = axis.first_mut() {
            *a = (depth % 3) as u8;
        }
        return;
    }
    // split on the axis of largest extent
    let mut a = 0;
    let mut widest = -1.0;
    for k in 0..3 {
        let lo = pts.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
        if hi - lo > widest {
            widest = hi - lo;
            a = k;
        }
    }
    let mid = pts.len() / 2;
    pts.select_nth_unstable_by(mid, |p, q| p[a].total_cmp(&q[a]));
    axis[mid] = a as u8;
    let (left, right) = pts.split_at_mut(mid);
    let (al, ar) = axis.split_at_mut(mid);
    build(left, al, depth + 1);
    build(&mut right[1..], &mut ar[1..], depth + 1);
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn mean_nn(from: &PointCloud, to: &KdTree) -> f64 {
    let total: f64 = from.points.iter().map(|p| to.nearest_distance(p).unwrap_or(0.0)).sum();
    total / from.len() as f64
}

/// Symmetric mean Chamfer distance (unsquared):
/// `½·mean_p min_q ‖p−q‖ + ½·mean_q min_p ‖p−q‖`.
pub fn chamfer_edge(pred: &PointCloud, gt: &PointCloud) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(CoreError::Empty("chamfer_edge"));
    }
    let a = mean_nn(pred, &KdTree::build(&gt.points));
    let b = mean_nn(gt, &KdTree::build(&pred.points));
    Ok(0.5 * a + 0.5 * b)
}

/// Quadratic reference for [`chamfer_edge`].
pub fn chamfer_brute_force(pred: &PointCloud, gt: &PointCloud) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(CoreError::Empty("chamfer_edge"));
    }
    let one_way = |from: &PointCloud, to: &PointCloud| {
        from.points
            .iter()
            .map(|p| to.points.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min).sqrt())
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(0.5 * one_way(pred, gt) + 0.5 * one_way(gt, pred))
}
