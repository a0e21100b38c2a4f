//! Depth preprocessing: log transform, percentile normalization and its
//! inverse, and least-squares affine alignment for relative-depth scoring.

use crate::error::{CoreError, Result};

/// Minimum number of valid pixels for percentile statistics.
pub const MIN_VALID_PIXELS: usize = 50;
pub const LOW_PERCENTILE: f64 = 2.0;
pub const HIGH_PERCENTILE: f64 = 98.0;
pub const DEFAULT_LOG_EPS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DepthSpace {
    Metric,
    Log { eps: f64 },
    Normalized,
}

/// Percentile pair of a log-depth map plus the log offset, enough to invert
/// the normalization exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub d_min: f64,
    pub d_max: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
    space: DepthSpace,
    stats: Option<NormStats>,
}

impl DepthMap {
    /// Metric depth; pixels with non-positive or non-finite values are invalid.
    pub fn metric(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_extent(height, width, values.len())?;
        let valid = values.iter().map(|&v| v.is_finite() && v > 0.0).collect();
        Ok(DepthMap { height, width, values, valid, space: DepthSpace::Metric, stats: None })
    }

    pub fn with_mask(height: usize, width: usize, values: Vec<f64>, valid: Vec<bool>, space: DepthSpace) -> Result<Self> {
        check_extent(height, width, values.len())?;
        check_extent(height, width, valid.len())?;
        if space == DepthSpace::Normalized {
            return Err(CoreError::contract("DepthMap", "normalized maps carry stats; use DepthMap::normalized"));
        }
        if space == DepthSpace::Metric && values.iter().zip(&valid).any(|(&v, &ok)| ok && !(v > 0.0)) {
            return Err(CoreError::contract("DepthMap", "metric depth must be positive on valid pixels"));
        }
        Ok(DepthMap { height, width, values, valid, space, stats: None })
    }

    /// A normalized map (e.g. a model prediction) with the stats that invert it.
    pub fn normalized(height: usize, width: usize, values: Vec<f64>, valid: Vec<bool>, stats: NormStats) -> Result<Self> {
        check_extent(height, width, values.len())?;
        check_extent(height, width, valid.len())?;
        Ok(DepthMap { height, width, values, valid, space: DepthSpace::Normalized, stats: Some(stats) })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn space(&self) -> DepthSpace {
        self.space
    }

    pub fn stats(&self) -> Option<NormStats> {
        self.stats
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_values(&self) -> Vec<f64> {
        self.values.iter().zip(&self.valid).filter(|(_, &ok)| ok).map(|(&v, _)| v).collect()
    }

    /// Same map with every value replaced by `f(value)`; the mask is kept.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        DepthMap { values: self.values.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }
}

fn check_extent(h: usize, w: usize, n: usize) -> Result<()> {
    if h == 0 || w == 0 || h * w != n {
        return Err(CoreError::contract("DepthMap", format!("{h}x{w} map needs {} values, got {n}", h * w)));
    }
    Ok(())
}

/// Percentile `p` in `[0, 100]` with linear interpolation between order
/// statistics at fractional rank `p/100 · (n − 1)`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(CoreError::Empty("percentile"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(CoreError::contract("percentile", format!("p = {p} outside [0, 100]")));
    }
    let mut buf = values.to_vec();
    let rank = p / 100.0 * (buf.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(buf.len() - 1);
    let frac = rank - lo as f64;
    let (_, &mut a, upper) = buf.select_nth_unstable_by(lo, f64::total_cmp);
    let b = if hi == lo { a } else { upper.iter().copied().min_by(f64::total_cmp).unwrap_or(a) };
    Ok(a + (b - a) * frac)
}

/// `log(d + eps)` on valid pixels; invalid pixels are left untouched.
pub fn to_log(d: &DepthMap, eps: f64) -> Result<DepthMap> {
    if d.space != DepthSpace::Metric {
        return Err(CoreError::contract("to_log", format!("expected metric depth, got {:?}", d.space)));
    }
    if !(eps > 0.0) {
        return Err(CoreError::contract("to_log", format!("eps must be positive, got {eps}")));
    }
    let values = d.values.iter().zip(&d.valid).map(|(&v, &ok)| if ok { (v + eps).ln() } else { v }).collect();
    Ok(DepthMap { values, space: DepthSpace::Log { eps }, stats: None, ..d.clone() })
}

/// Maps log depth so the 2% and 98% percentiles land on −0.5 and +0.5.
/// Values outside the band are not clamped.
pub fn normalize(d: &DepthMap) -> Result<DepthMap> {
    let DepthSpace::Log { eps } = d.space else {
        return Err(CoreError::contract("normalize", format!("expected log depth, got {:?}", d.space)));
    };
    let valid = d.valid_values();
    if valid.len() < MIN_VALID_PIXELS {
        return Err(CoreError::DegenerateDepth(format!(
            "{} valid pixels, need at least {MIN_VALID_PIXELS}",
            valid.len()
        )));
    }
    let d_min = percentile(&valid, LOW_PERCENTILE)?;
    let d_max = percentile(&valid, HIGH_PERCENTILE)?;
    if !(d_max > d_min) {
        return Err(CoreError::DegenerateDepth(format!("percentile range [{d_min}, {d_max}] is empty")));
    }
    let span = d_max - d_min;
    let values = d
        .values
        .iter()
        .zip(&d.valid)
        .map(|(&v, &ok)| if ok { (v - d_min) / span - 0.5 } else { v })
        .collect();
    Ok(DepthMap {
        values,
        space: DepthSpace::Normalized,
        stats: Some(NormStats { d_min, d_max, eps }),
        ..d.clone()
    })
}

/// Metric → log → normalized in one call.
pub fn encode(d: &DepthMap, eps: f64) -> Result<DepthMap> {
    normalize(&to_log(d, eps)?)
}

/// Exact inverse of [`encode`] on valid pixels: `exp((d̂ + 0.5)(d_max − d_min) + d_min) − eps`.
pub fn denormalize(d: &DepthMap, stats: Option<NormStats>) -> Result<DepthMap> {
    if d.space != DepthSpace::Normalized {
        return Err(CoreError::contract("denormalize", format!("expected normalized depth, got {:?}", d.space)));
    }
    let s = stats
        .or(d.stats)
        .ok_or_else(|| CoreError::contract("denormalize", "no normalization stats available"))?;
    let span = s.d_max - s.d_min;
    let values = d
        .values
        .iter()
        .zip(&d.valid)
        .map(|(&v, &ok)| if ok { ((v + 0.5) * span + s.d_min).exp() - s.eps } else { v })
        .collect::<Vec<f64>>();
    // predictions far below the low percentile can invert to non-positive depth
    let valid = d.valid.iter().zip(&values).map(|(&ok, &v)| ok && v > 0.0).collect();
    Ok(DepthMap { values, valid, space: DepthSpace::Metric, stats: None, ..d.clone() })
}

/// Relative depth from a normalized prediction when no statistics are known:
/// `exp((d̂ + 0.5) · log_span)`, positive and order preserving. Scale and
/// shift are left to [`align_affine`].
pub fn relative_depth(d: &DepthMap, log_span: f64) -> Result<DepthMap> {
    if !(log_span > 0.0) {
        return Err(CoreError::contract("relative_depth", format!("log span must be positive, got {log_span}")));
    }
    let values = d.values.iter().map(|&v| ((v + 0.5) * log_span).exp()).collect();
    Ok(DepthMap { values, space: DepthSpace::Metric, stats: None, ..d.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub scale: f64,
    pub shift: f64,
}

/// Least-squares `(s, b)` minimizing `Σ (s·pred + b − gt)²` over pixels
/// valid in both maps.
pub fn fit_affine(pred: &DepthMap, gt: &DepthMap) -> Result<Affine> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(CoreError::contract(
            "align_affine",
            format!("extents {}x{} vs {}x{}", pred.height, pred.width, gt.height, gt.width),
        ));
    }
    let pairs: Vec<(f64, f64)> = (0..pred.values.len())
        .filter(|&i| pred.valid[i] && gt.valid[i])
        .map(|i| (pred.values[i], gt.values[i]))
        .collect();
    if pairs.len() < 2 {
        return Err(CoreError::Alignment(format!("{} overlapping valid pixels, need 2", pairs.len())));
    }
    let n = pairs.len() as f64;
    let mp = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mg = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut cov, mut var) = (0.0, 0.0);
    for &(p, g) in &pairs {
        cov += (p - mp) * (g - mg);
        var += (p - mp) * (p - mp);
    }
    if !(var > f64::EPSILON * f64::EPSILON * n * (1.0 + mp * mp)) {
        return Err(CoreError::Alignment("prediction is constant over the valid pixels".into()));
    }
    let scale = cov / var;
    Ok(Affine { scale, shift: mg - scale * mp })
}

/// `s·pred + b` with the least-squares fit against `gt`; keeps `pred`'s mask
/// and takes `gt`'s space.
pub fn align_affine(pred: &DepthMap, gt: &DepthMap) -> Result<(DepthMap, Affine)> {
    let fit = fit_affine(pred, gt)?;
    let values = pred
        .values
        .iter()
        .zip(&pred.valid)
        .map(|(&v, &ok)| if ok { fit.scale * v + fit.shift } else { v })
        .collect();
    let space = match gt.space {
        DepthSpace::Normalized => DepthSpace::Log { eps: gt.stats.map_or(DEFAULT_LOG_EPS, |s| s.eps) },
        s => s,
    };
    let mut valid = pred.valid.clone();
    if space == DepthSpace::Metric {
        // an affine fit can push far-tail pixels below zero
        for (ok, &v) in valid.iter_mut().zip(&values) {
            *ok &= v > 0.0;
        }
    }
    Ok((DepthMap { values, valid, space, stats: None, ..pred.clone() }, fit))
}
