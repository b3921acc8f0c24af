//! Static stereo depth initialization on the rectified pair.

use super::image::Raster;
use super::residual::PATTERN;
use crate::geometry::CameraIntrinsics;

/// Parameters for the epipolar block match.
#[derive(Debug, Clone, Copy)]
pub struct StereoConfig {
    /// Maximum disparity searched, pixels.
    pub search_range: usize,
    /// Reject when the best mean absolute difference per pattern pixel
    /// exceeds this (intensity units).
    pub max_cost: f64,
    /// Reject when no competitor outside the best's +-1 neighborhood is at
    /// least this much worse (uniqueness, intensity units).
    pub min_margin: f64,
}

impl Default for StereoConfig {
    fn default() -> Self {
        Self {
            search_range: 64,
            max_cost: 12.0,
            min_margin: 1.5,
        }
    }
}

/// Matches `pixel` from the left image along the horizontal epipolar line in
/// the right image and returns the inverse depth `disparity / (fx * baseline)`.
///
/// Integer search minimizes the mean absolute difference over the 8-point
/// pattern; the winner is refined by an iterated, safeguarded parabolic fit
/// on squared differences. The refinement samples both images at the same
/// fractional offset so interpolation blurs them equally, which keeps the
/// sub-pixel estimate unbiased.
pub fn static_stereo_depth(
    left: &Raster,
    right: &Raster,
    pixel: (usize, usize),
    k: &CameraIntrinsics,
    cfg: &StereoConfig,
) -> Option<f64> {
    let (x, y) = pixel;
    if !left.in_bounds(x as f64, y as f64, 3.0) {
        return None;
    }
    // Keep the whole pattern inside the right image for every disparity.
    let d_max = cfg.search_range.min(x.saturating_sub(3));
    if d_max < 2 {
        return None;
    }

    let mut costs = Vec::with_capacity(d_max + 1);
    for d in 0..=d_max {
        let mut sum = 0.0;
        for (ox, oy) in PATTERN {
            let lx = (x as i64 + ox as i64) as usize;
            let ly = (y as i64 + oy as i64) as usize;
            let rx = (lx as i64 - d as i64) as usize;
            sum += (left.get(lx, ly) - right.get(rx, ly)).abs();
        }
        costs.push(sum / PATTERN.len() as f64);
    }

    let best = costs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)?;
    if costs[best] > cfg.max_cost {
        return None;
    }
    // Uniqueness: something outside the +-1 neighborhood must be clearly
    // worse, otherwise the pixel is textureless or ambiguous.
    let competitor = costs
        .iter()
        .enumerate()
        .filter(|(i, _)| (*i as i64 - best as i64).abs() > 1)
        .map(|(_, c)| *c)
        .fold(f64::INFINITY, f64::min);
    if competitor - costs[best] < cfg.min_margin {
        return None;
    }
    if best == 0 {
        return None;
    }

    let disparity = if best >= d_max {
        best as f64
    } else {
        refine_subpixel(left, right, x, y, best as f64)
    };
    if disparity <= 0.0 {
        return None;
    }
    Some(disparity / (k.fx * k.baseline))
}

/// Squared-difference cost at a fractional disparity, sampling both images
/// at the same fractional grid offset.
fn symmetric_cost(left: &Raster, right: &Raster, x: usize, y: usize, d: f64) -> f64 {
    let a = (d - d.floor()) / 2.0;
    let mut sum = 0.0;
    for (ox, oy) in PATTERN {
        let lx = x as f64 + ox as f64 + a;
        let ly = y as f64 + oy as f64;
        let rx = lx - d;
        let l = left.sample(lx, ly);
        let r = right.sample(rx, ly);
        sum += (l - r) * (l - r);
    }
    sum
}

/// Iterated parabolic sub-pixel fit within one pixel of the integer winner.
/// Each round fits a parabola through (c-h, c, c+h), clamps the vertex into
/// the bracket, keeps whichever probe actually scored lowest, and halves the
/// bracket.
fn refine_subpixel(left: &Raster, right: &Raster, x: usize, y: usize, d0: f64) -> f64 {
    let eval = |d: f64| symmetric_cost(left, right, x, y, d);
    let mut center = d0;
    let mut half = 1.0;
    let mut f_center = eval(center);
    for _ in 0..9 {
        let lo = center - half;
        let hi = center + half;
        let f_lo = eval(lo);
        let f_hi = eval(hi);
        let den = f_lo - 2.0 * f_center + f_hi;
        let vertex = if den > 0.0 {
            (center + 0.5 * (f_lo - f_hi) / den * half).clamp(lo, hi)
        } else {
            center
        };
        let f_vertex = eval(vertex);
        let (mut best_d, mut best_f) = (center, f_center);
        for (d, f) in [(lo, f_lo), (hi, f_hi), (vertex, f_vertex)] {
            if f < best_f {
                best_d = d;
                best_f = f;
            }
        }
        center = best_d;
        f_center = best_f;
        half *= 0.5;
    }
    center
}
