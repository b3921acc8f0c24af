//! Trajectory evaluation against ground truth.
//!
//! Experiences are associated to ground-truth poses by nearest timestamp.
//! The primary statistics anchor the map to the first associated pose and
//! heading (no scale); a least-squares rigid fit is reported alongside.

use super::PipelineError;
use crate::experience_map::MapGraph;
use crate::geometry::RigidTransform3;
use serde::Serialize;

/// Planar error statistics in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryStats {
    pub mean: f64,
    pub median: f64,
    pub rmse: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

/// Anchored plus rigid-fit statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub anchored: TrajectoryStats,
    pub fitted: TrajectoryStats,
}

/// Ground-plane projection of a camera-to-world pose: `x = t_z`, `y = t_x`,
/// heading from the forward axis. Matches the chirality of the planar
/// odometry integration.
pub fn planar_of_transform(t: &RigidTransform3) -> (f64, f64, f64) {
    let tr = t.translation();
    let r = t.rotation();
    (tr[2], tr[0], r[(0, 2)].atan2(r[(2, 2)]))
}

fn stats_of(errors: &mut [f64]) -> TrajectoryStats {
    let n = errors.len();
    assert!(n > 0);
    errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let sum: f64 = errors.iter().sum();
    let sq_sum: f64 = errors.iter().map(|e| e * e).sum();
    let median = if n % 2 == 1 {
        errors[n / 2]
    } else {
        0.5 * (errors[n / 2 - 1] + errors[n / 2])
    };
    TrajectoryStats {
        mean: sum / n as f64,
        median,
        rmse: (sq_sum / n as f64).sqrt(),
        min: errors[0],
        max: errors[n - 1],
        n,
    }
}

/// Pairs of (map point, ground-truth point) after association.
struct Associated {
    map: Vec<(f64, f64)>,
    map_theta0: f64,
    gt: Vec<(f64, f64)>,
    gt_theta0: f64,
}

fn associate(
    map: &MapGraph,
    ground_truth: &[RigidTransform3],
    timestamps: &[f64],
) -> Result<Associated, PipelineError> {
    if map.is_empty() {
        return Err(PipelineError::Evaluate("map has no experiences".into()));
    }
    if ground_truth.is_empty() {
        return Err(PipelineError::Evaluate("ground truth is empty".into()));
    }
    if ground_truth.len() != timestamps.len() {
        return Err(PipelineError::Evaluate(format!(
            "{} ground-truth poses but {} timestamps",
            ground_truth.len(),
            timestamps.len()
        )));
    }
    let mut map_pts = Vec::with_capacity(map.len());
    let mut gt_pts = Vec::with_capacity(map.len());
    let mut gt_theta0 = 0.0;
    for e in map.experiences() {
        // Nearest timestamp; the list is sorted by construction.
        let idx = match timestamps.binary_search_by(|t| t.partial_cmp(&e.timestamp).unwrap()) {
            Ok(i) => i,
            Err(i) => {
                if i == 0 {
                    0
                } else if i >= timestamps.len() {
                    timestamps.len() - 1
                } else if (timestamps[i] - e.timestamp).abs()
                    < (e.timestamp - timestamps[i - 1]).abs()
                {
                    i
                } else {
                    i - 1
                }
            }
        };
        let (gx, gy, gtheta) = planar_of_transform(&ground_truth[idx]);
        if gt_pts.is_empty() {
            gt_theta0 = gtheta;
        }
        map_pts.push((e.x, e.y));
        gt_pts.push((gx, gy));
    }
    Ok(Associated {
        map_theta0: map.experiences()[0].theta,
        map: map_pts,
        gt: gt_pts,
        gt_theta0,
    })
}

/// Evaluates a map against ground truth. `timestamps[i]` is the capture time
/// of `ground_truth[i]`.
pub fn evaluate(
    map: &MapGraph,
    ground_truth: &[RigidTransform3],
    timestamps: &[f64],
) -> Result<Evaluation, PipelineError> {
    let assoc = associate(map, ground_truth, timestamps)?;

    // Anchored: rotate about the first map pose so headings agree, then
    // translate the first pose onto the first ground-truth pose.
    let phi = assoc.gt_theta0 - assoc.map_theta0;
    let (s, c) = phi.sin_cos();
    let (mx0, my0) = assoc.map[0];
    let (gx0, gy0) = assoc.gt[0];
    let mut anchored_errors: Vec<f64> = assoc
        .map
        .iter()
        .zip(&assoc.gt)
        .map(|((mx, my), (gx, gy))| {
            let dx = mx - mx0;
            let dy = my - my0;
            let ax = gx0 + c * dx - s * dy;
            let ay = gy0 + s * dx + c * dy;
            ((ax - gx).powi(2) + (ay - gy).powi(2)).sqrt()
        })
        .collect();

    // Least-squares rigid fit (rotation + translation, no scale).
    let n = assoc.map.len() as f64;
    let mc = (
        assoc.map.iter().map(|p| p.0).sum::<f64>() / n,
        assoc.map.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let gc = (
        assoc.gt.iter().map(|p| p.0).sum::<f64>() / n,
        assoc.gt.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let mut sin_acc = 0.0;
    let mut cos_acc = 0.0;
    for ((mx, my), (gx, gy)) in assoc.map.iter().zip(&assoc.gt) {
        let (ax, ay) = (mx - mc.0, my - mc.1);
        let (bx, by) = (gx - gc.0, gy - gc.1);
        sin_acc += ax * by - ay * bx;
        cos_acc += ax * bx + ay * by;
    }
    let phi_fit = sin_acc.atan2(cos_acc);
    let (sf, cf) = phi_fit.sin_cos();
    let mut fitted_errors: Vec<f64> = assoc
        .map
        .iter()
        .zip(&assoc.gt)
        .map(|((mx, my), (gx, gy))| {
            let dx = mx - mc.0;
            let dy = my - mc.1;
            let ax = gc.0 + cf * dx - sf * dy;
            let ay = gc.1 + sf * dx + cf * dy;
            ((ax - gx).powi(2) + (ay - gy).powi(2)).sqrt()
        })
        .collect();

    Ok(Evaluation {
        anchored: stats_of(&mut anchored_errors),
        fitted: stats_of(&mut fitted_errors),
    })
}
