//! SE(3) poses, pinhole projection, and planar velocity extraction.
//!
//! Poses are camera-to-world: `X_world = R * X_cam + t`. The camera frame
//! follows the usual pinhole convention (x right, y down, z forward).

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

/// Tolerance for the orthonormality / determinant checks on rotations.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("rotation matrix is not orthonormal with unit determinant (defect {defect:.3e})")]
    InvalidRotation { defect: f64 },
    #[error("point depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("inverse depth must be positive, got {0}")]
    InvalidInverseDepth(f64),
    #[error("time interval must be positive, got {0}")]
    InvalidInterval(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Rigid transform in SE(3): rotation plus translation (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform3 {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform3 {
    /// Builds a transform, checking that `rotation` is a proper rotation
    /// (orthonormal, determinant +1) within `ROTATION_TOL`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let defect = rotation_defect(&rotation);
        if defect > ROTATION_TOL {
            return Err(GeometryError::InvalidRotation { defect });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation about the camera y axis by `angle`, standard
    /// `[[cos,0,sin],[0,1,0],[-sin,0,cos]]` layout.
    pub fn from_yaw(angle: f64, translation: Vector3<f64>) -> Self {
        let (s, c) = angle.sin_cos();
        let rotation = Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c);
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Composition `self * other` (apply `other` first).
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Exponential map of a twist `[rho, phi]` (translation part first).
    pub fn exp(xi: &[f64; 6]) -> Self {
        let rho = Vector3::new(xi[0], xi[1], xi[2]);
        let phi = Vector3::new(xi[3], xi[4], xi[5]);
        let theta = phi.norm();
        let k = skew(&phi);
        let k2 = k * k;
        let (rotation, v) = if theta < 1e-12 {
            // Second-order series; adequate far below the sqrt of machine eps.
            (
                Matrix3::identity() + k + k2 * 0.5,
                Matrix3::identity() + k * 0.5 + k2 * (1.0 / 6.0),
            )
        } else {
            let (s, c) = theta.sin_cos();
            let t2 = theta * theta;
            (
                Matrix3::identity() + k * (s / theta) + k2 * ((1.0 - c) / t2),
                Matrix3::identity() + k * ((1.0 - c) / t2) + k2 * ((theta - s) / (t2 * theta)),
            )
        };
        Self {
            rotation,
            translation: v * rho,
        }
    }

    /// Re-projects the rotation block onto SO(3) via SVD. Returns the
    /// orthonormality defect that was present before the correction.
    pub fn orthonormalize(&mut self) -> f64 {
        let defect = rotation_defect(&self.rotation);
        let svd = self.rotation.svd(true, true);
        let u = svd.u.expect("svd of 3x3 always yields u");
        let v_t = svd.v_t.expect("svd of 3x3 always yields v_t");
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        self.rotation = r;
        defect
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn rotation_defect(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = (r.determinant() - 1.0).abs();
    ortho.max(det)
}

/// Pinhole intrinsics of a rectified stereo pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Stereo baseline in meters.
    pub baseline: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        baseline: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if fx <= 0.0 || fy <= 0.0 || baseline <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "fx, fy, baseline must be positive (fx={fx}, fy={fy}, baseline={baseline})"
            )));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            baseline,
            width,
            height,
        })
    }

    /// Intrinsics of pyramid level `level` under 2x2-average downsampling.
    /// Pixel centers map as `u_fine = 2 * u_coarse + 0.5`.
    pub fn at_level(&self, level: usize) -> CameraIntrinsics {
        let s = (1u64 << level) as f64;
        CameraIntrinsics {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: (self.cx + 0.5) / s - 0.5,
            cy: (self.cy + 0.5) / s - 0.5,
            baseline: self.baseline,
            width: self.width >> level,
            height: self.height >> level,
        }
    }
}

/// Planar velocity over a time step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarVelocity {
    /// Heading rate in rad/s, sign per the yaw-extraction formula below.
    pub rotational: f64,
    /// Ground-plane speed in m/s, always non-negative.
    pub translational: f64,
    /// Interval the velocity was measured over, seconds.
    pub dt: f64,
}

impl PlanarVelocity {
    pub fn new(rotational: f64, translational: f64, dt: f64) -> Result<Self, GeometryError> {
        if dt <= 0.0 {
            return Err(GeometryError::InvalidInterval(dt));
        }
        Ok(Self {
            rotational,
            translational: translational.abs(),
            dt,
        })
    }

    pub fn zero(dt: f64) -> Self {
        Self {
            rotational: 0.0,
            translational: 0.0,
            dt,
        }
    }
}

/// Projects a camera-frame point to pixel coordinates.
pub fn project(k: &CameraIntrinsics, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    if p.z <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(p.z));
    }
    Ok(Vector2::new(
        k.fx * p.x / p.z + k.cx,
        k.fy * p.y / p.z + k.cy,
    ))
}

/// Back-projects a pixel at the given inverse depth into the camera frame.
pub fn back_project(
    k: &CameraIntrinsics,
    px: &Vector2<f64>,
    inv_depth: f64,
) -> Result<Vector3<f64>, GeometryError> {
    if inv_depth <= 0.0 {
        return Err(GeometryError::InvalidInverseDepth(inv_depth));
    }
    let z = 1.0 / inv_depth;
    Ok(Vector3::new(
        (px.x - k.cx) / k.fx * z,
        (px.y - k.cy) / k.fy * z,
        z,
    ))
}

/// Relative transform `T_ji = T_j^-1 * T_i` mapping frame-i coordinates
/// into frame j.
pub fn relative_transform(t_i: &RigidTransform3, t_j: &RigidTransform3) -> RigidTransform3 {
    t_j.inverse().compose(t_i)
}

/// Extracts planar rotational and translational velocity from a relative
/// keyframe transform.
///
/// With zero-based indices into the 3x3 rotation block:
/// `omega = atan2(R(2,0), sqrt(R(2,1)^2 + R(2,2)^2)) / dt` and
/// `v = sqrt(t(0)^2 + t(2)^2) / dt`. Vertical (camera-y) motion contributes
/// to neither component.
pub fn velocity_from_relative(
    t_ji: &RigidTransform3,
    dt: f64,
) -> Result<PlanarVelocity, GeometryError> {
    if dt <= 0.0 {
        return Err(GeometryError::InvalidInterval(dt));
    }
    let r = t_ji.rotation();
    let t = t_ji.translation();
    let rotational = r[(2, 0)].atan2((r[(2, 1)].powi(2) + r[(2, 2)].powi(2)).sqrt()) / dt;
    let translational = (t[0].powi(2) + t[2].powi(2)).sqrt() / dt;
    Ok(PlanarVelocity {
        rotational,
        translational,
        dt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 0.5, 101, 101).unwrap()
    }

    #[test]
    fn project_optical_axis_hits_principal_point() {
        let k = test_intrinsics();
        let px = project(&k, &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(px, Vector2::new(50.0, 50.0));
    }

    #[test]
    fn project_off_axis() {
        let k = test_intrinsics();
        let px = project(&k, &Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_eq!(px, Vector2::new(100.0, 50.0));
        let px = project(&k, &Vector3::new(0.3, -0.2, 4.0)).unwrap();
        assert_relative_eq!(px.x, 57.5, max_relative = 1e-12);
        assert_relative_eq!(px.y, 45.0, max_relative = 1e-12);
    }

    #[test]
    fn project_rejects_non_positive_depth() {
        let k = test_intrinsics();
        assert!(matches!(
            project(&k, &Vector3::new(0.0, 0.0, 0.0)),
            Err(GeometryError::NonPositiveDepth(_))
        ));
        assert!(project(&k, &Vector3::new(0.0, 0.0, -1.0)).is_err());
    }

    #[test]
    fn back_project_inverts_examples() {
        let k = test_intrinsics();
        let p = back_project(&k, &Vector2::new(50.0, 50.0), 1.0).unwrap();
        assert_relative_eq!(p, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
        let p = back_project(&k, &Vector2::new(100.0, 50.0), 0.5).unwrap();
        assert_relative_eq!(p, Vector3::new(1.0, 0.0, 2.0), epsilon = 1e-12);
    }

    #[test]
    fn back_project_rejects_bad_inverse_depth() {
        let k = test_intrinsics();
        assert!(matches!(
            back_project(&k, &Vector2::new(10.0, 10.0), 0.0),
            Err(GeometryError::InvalidInverseDepth(_))
        ));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 0.1, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 11.0, 0.0, 0.1, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 5.0, 5.0, -0.1, 10, 10).is_err());
    }

    #[test]
    fn relative_transform_of_equal_poses_is_identity() {
        let t = RigidTransform3::from_yaw(0.7, Vector3::new(1.0, -2.0, 3.0));
        let rel = relative_transform(&t, &t);
        assert_relative_eq!(rel.rotation(), &Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(rel.translation(), &Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn relative_transform_against_identity_returns_input() {
        let t = RigidTransform3::from_yaw(-0.3, Vector3::new(0.1, 0.2, 0.3));
        let rel = relative_transform(&t, &RigidTransform3::identity());
        assert_relative_eq!(rel.rotation(), t.rotation(), epsilon = 1e-12);
        assert_relative_eq!(rel.translation(), t.translation(), epsilon = 1e-12);
    }

    #[test]
    fn velocity_forward_translation() {
        let t = RigidTransform3::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let vel = velocity_from_relative(&t, 0.1).unwrap();
        assert_eq!(vel.rotational, 0.0);
        assert_relative_eq!(vel.translational, 10.0, max_relative = 1e-12);
    }

    #[test]
    fn velocity_of_identity_is_zero() {
        let vel = velocity_from_relative(&RigidTransform3::identity(), 0.42).unwrap();
        assert_eq!(vel.rotational, 0.0);
        assert_eq!(vel.translational, 0.0);
    }

    #[test]
    fn velocity_yaw_sign_convention() {
        // R = [[cos,0,sin],[0,1,0],[-sin,0,cos]] at 0.1 rad over dt=0.1
        // must give omega = -1.0 rad/s; this fixes the sign convention.
        let t = RigidTransform3::from_yaw(0.1, Vector3::zeros());
        let vel = velocity_from_relative(&t, 0.1).unwrap();
        assert_relative_eq!(vel.rotational, -1.0, max_relative = 1e-12);
        assert_eq!(vel.translational, 0.0);
    }

    #[test]
    fn velocity_rejects_non_positive_dt() {
        let t = RigidTransform3::identity();
        assert!(matches!(
            velocity_from_relative(&t, 0.0),
            Err(GeometryError::InvalidInterval(_))
        ));
        assert!(PlanarVelocity::new(0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn velocity_ignores_vertical_motion() {
        let t = RigidTransform3::from_translation(Vector3::new(0.0, 5.0, 0.0));
        let vel = velocity_from_relative(&t, 1.0).unwrap();
        assert_eq!(vel.rotational, 0.0);
        assert_eq!(vel.translational, 0.0);
    }

    #[test]
    fn composed_small_yaws_match_single_step_rate() {
        let alpha = 0.05;
        let dt = 0.1;
        let n = 20;
        let single = velocity_from_relative(&RigidTransform3::from_yaw(alpha, Vector3::zeros()), dt)
            .unwrap()
            .rotational;
        let mut composite = RigidTransform3::identity();
        for _ in 0..n {
            composite = composite.compose(&RigidTransform3::from_yaw(alpha, Vector3::zeros()));
        }
        let combined = velocity_from_relative(&composite, n as f64 * dt)
            .unwrap()
            .rotational;
        assert_relative_eq!(single, combined, epsilon = 1e-6);
    }

    #[test]
    fn exp_matches_closed_forms() {
        let t = RigidTransform3::exp(&[0.1, -0.2, 0.3, 0.0, 0.0, 0.0]);
        assert_relative_eq!(
            t.translation(),
            &Vector3::new(0.1, -0.2, 0.3),
            epsilon = 1e-15
        );
        assert_relative_eq!(t.rotation(), &Matrix3::identity(), epsilon = 1e-15);

        let t = RigidTransform3::exp(&[0.0, 0.0, 0.0, 0.0, -0.4, 0.0]);
        let expected = RigidTransform3::from_yaw(0.4, Vector3::zeros());
        assert_relative_eq!(t.rotation(), expected.rotation(), epsilon = 1e-12);
    }

    #[test]
    fn invalid_rotation_rejected() {
        let r = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.1);
        assert!(RigidTransform3::new(r, Vector3::zeros()).is_err());
    }

    #[test]
    fn orthonormalize_repairs_drifted_rotation() {
        let mut t = RigidTransform3::from_yaw(0.9, Vector3::zeros());
        t.rotation[(0, 0)] += 1e-4;
        let defect = t.orthonormalize();
        assert!(defect > 1e-5);
        assert!(rotation_defect(t.rotation()) < 1e-12);
    }

    proptest! {
        #[test]
        fn back_project_project_round_trip(
            u in 1.0f64..99.0,
            v in 1.0f64..99.0,
            inv_depth in 0.05f64..5.0,
        ) {
            let k = test_intrinsics();
            let p = back_project(&k, &Vector2::new(u, v), inv_depth).unwrap();
            let px = project(&k, &p).unwrap();
            prop_assert!((px.x - u).abs() < 1e-9);
            prop_assert!((px.y - v).abs() < 1e-9);
        }

        #[test]
        fn relative_transform_cancels_with_inverse_order(
            yaw_i in -3.0f64..3.0,
            yaw_j in -3.0f64..3.0,
            tx in -5.0f64..5.0,
            tz in -5.0f64..5.0,
        ) {
            let t_i = RigidTransform3::from_yaw(yaw_i, Vector3::new(tx, 0.3, tz));
            let t_j = RigidTransform3::from_yaw(yaw_j, Vector3::new(-tz, 0.1, tx));
            let t_ji = relative_transform(&t_i, &t_j);
            let t_ij = relative_transform(&t_j, &t_i);
            let prod = t_ji.compose(&t_ij);
            prop_assert!((prod.rotation() - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!(prod.translation().norm() < 1e-9);
        }

        #[test]
        fn exp_produces_valid_rotations(
            a in -0.5f64..0.5, b in -0.5f64..0.5, c in -0.5f64..0.5,
        ) {
            let t = RigidTransform3::exp(&[0.0, 0.0, 0.0, a, b, c]);
            prop_assert!(rotation_defect(t.rotation()) < 1e-12);
        }
    }
}
