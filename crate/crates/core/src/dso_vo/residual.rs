//! Photometric residuals of the direct alignment energy and their analytic
//! Jacobians.
//!
//! A point hosted at pixel `p` with inverse depth `d` contributes one
//! residual per pattern pixel:
//! `r = I_j[p'] - b_j - (e^{a_j}/e^{a_i}) * (I_i[p] - b_i)` where `p'` is the
//! projection of the back-projected pattern pixel through the relative pose.
//! All pattern pixels share the center's inverse depth.

use super::image::Raster;
use crate::geometry::{CameraIntrinsics, RigidTransform3};
use nalgebra::{Vector2, Vector3};

/// The fixed 8-point residual pattern: center, the four +-2 axis neighbors,
/// and three diagonals.
pub const PATTERN: [(i32, i32); 8] = [
    (0, 0),
    (-2, 0),
    (2, 0),
    (0, -2),
    (0, 2),
    (-1, -1),
    (1, -1),
    (-1, 1),
];

/// Margin kept from the image border for bilinear access over the pattern.
pub const BORDER_MARGIN: f64 = 3.0;

/// Affine brightness transfer parameters of one image.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AffineBrightness {
    pub a: f64,
    pub b: f64,
}

/// Huber penalty: quadratic inside `gamma`, linear outside.
pub fn huber_rho(r: f64, gamma: f64) -> f64 {
    let a = r.abs();
    if a <= gamma {
        r * r
    } else {
        gamma * (2.0 * a - gamma)
    }
}

/// IRLS weight matching [`huber_rho`].
pub fn huber_weight(r: f64, gamma: f64) -> f64 {
    let a = r.abs();
    if a <= gamma {
        1.0
    } else {
        gamma / a
    }
}

/// Gradient down-weighting of Eq.-style `c^2 / (c^2 + |grad I|^2)` at an
/// integer pixel.
pub fn gradient_weight(image: &Raster, pixel: (usize, usize), c: f64) -> f64 {
    let g2 = image.grad_sq(pixel.0, pixel.1);
    c * c / (c * c + g2)
}

/// One pattern pixel's residual and the pieces its Jacobians are assembled
/// from.
#[derive(Debug, Clone, Copy)]
pub struct PatternTerm {
    pub residual: f64,
    /// Gradient down-weighting from the host image at this pattern pixel.
    pub weight: f64,
    /// d(residual)/d(P_j), the target-frame point.
    pub j_geo: Vector3<f64>,
    /// Back-projected pattern pixel in the host frame.
    pub p_i: Vector3<f64>,
    /// The same point in the target frame.
    pub p_j: Vector3<f64>,
    /// `e^{a_j - a_i} * (I_i[p] - b_i)`.
    pub host_term: f64,
    /// `e^{a_j - a_i}`.
    pub exp_ratio: f64,
}

impl PatternTerm {
    /// Jacobian w.r.t. a left-multiplied se(3) increment on the target's
    /// world-to-camera transform, ordered `[translation, rotation]`.
    pub fn j_pose_target(&self) -> [f64; 6] {
        let rot = self.p_j.cross(&self.j_geo);
        [
            self.j_geo.x,
            self.j_geo.y,
            self.j_geo.z,
            rot.x,
            rot.y,
            rot.z,
        ]
    }

    /// Jacobian w.r.t. a left-multiplied se(3) increment on the host's
    /// world-to-camera transform.
    pub fn j_pose_host(&self, t_ji: &RigidTransform3) -> [f64; 6] {
        let q = t_ji.rotation().transpose() * self.j_geo;
        let rot = -(self.p_i.cross(&q));
        [-q.x, -q.y, -q.z, rot.x, rot.y, rot.z]
    }

    /// Jacobian w.r.t. the point's inverse depth.
    pub fn j_inv_depth(&self, t_ji: &RigidTransform3, inv_depth: f64) -> f64 {
        let rp = self.p_j - t_ji.translation();
        -self.j_geo.dot(&rp) / inv_depth
    }

    /// Jacobians w.r.t. the target affine parameters (a_j, b_j).
    pub fn j_affine_target(&self) -> [f64; 2] {
        [-self.host_term, -1.0]
    }

    /// Jacobians w.r.t. the host affine parameters (a_i, b_i).
    pub fn j_affine_host(&self) -> [f64; 2] {
        [self.host_term, self.exp_ratio]
    }
}

/// Evaluates the 8 pattern residuals of one point against a target image.
///
/// Pattern pixels that back-project behind the camera or land outside the
/// target raster are masked out (`None`). Returns the terms and the count of
/// valid ones; a fully masked point should be dropped for this frame pair.
#[allow(clippy::too_many_arguments)]
pub fn pattern_residuals(
    host: &Raster,
    target: &Raster,
    k: &CameraIntrinsics,
    pixel: Vector2<f64>,
    inv_depth: f64,
    t_ji: &RigidTransform3,
    affine_host: AffineBrightness,
    affine_target: AffineBrightness,
    gradient_c: f64,
) -> ([Option<PatternTerm>; 8], usize) {
    let mut terms: [Option<PatternTerm>; 8] = [None; 8];
    let mut valid = 0;
    if inv_depth <= 0.0 {
        return (terms, 0);
    }
    let exp_ratio = (affine_target.a - affine_host.a).exp();
    let z = 1.0 / inv_depth;
    for (slot, (ox, oy)) in terms.iter_mut().zip(PATTERN) {
        let u = pixel.x + ox as f64;
        let v = pixel.y + oy as f64;
        if !host.in_bounds(u, v, 1.0) {
            continue;
        }
        let p_i = Vector3::new((u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z);
        let p_j = t_ji.transform_point(&p_i);
        if p_j.z <= 1e-6 {
            continue;
        }
        let up = k.fx * p_j.x / p_j.z + k.cx;
        let vp = k.fy * p_j.y / p_j.z + k.cy;
        if !target.in_bounds(up, vp, BORDER_MARGIN) {
            continue;
        }
        let (i_j, gx, gy) = target.sample_with_gradient(up, vp);
        let i_i = host.sample(u, v);
        let host_term = exp_ratio * (i_i - affine_host.b);
        let residual = i_j - affine_target.b - host_term;
        // Chain rule through the projection: dp'/dP_j rows scaled by the
        // image gradient.
        let iz = 1.0 / p_j.z;
        let j_geo = Vector3::new(
            gx * k.fx * iz,
            gy * k.fy * iz,
            -(gx * k.fx * p_j.x + gy * k.fy * p_j.y) * iz * iz,
        );
        let weight = gradient_weight(
            host,
            (
                (u.round() as usize).min(host.width() - 1),
                (v.round() as usize).min(host.height() - 1),
            ),
            gradient_c,
        );
        *slot = Some(PatternTerm {
            residual,
            weight,
            j_geo,
            p_i,
            p_j,
            host_term,
            exp_ratio,
        });
        valid += 1;
    }
    (terms, valid)
}

/// Huber energy of one point's valid pattern terms, gradient-weighted.
pub fn point_energy(terms: &[Option<PatternTerm>; 8], gamma: f64) -> f64 {
    terms
        .iter()
        .flatten()
        .map(|t| t.weight * huber_rho(t.residual, gamma))
        .sum()
}
