//! Coarse-to-fine direct tracking of a new frame against the keyframe
//! window, with depths fixed.

use super::image::Pyramid;
use super::residual::{
    huber_rho, huber_weight, pattern_residuals, AffineBrightness,
};
use super::{KeyframeWindow, VoConfig};
use crate::geometry::RigidTransform3;
use nalgebra::{SMatrix, SVector, Vector2};

#[derive(Debug, Clone, Copy)]
pub struct TrackResult {
    /// Camera-to-world pose of the tracked frame.
    pub pose: RigidTransform3,
    /// Estimated affine brightness of the tracked frame's left image.
    pub affine: AffineBrightness,
    pub converged: bool,
    /// Divergence signal: energy kept increasing for five consecutive damped
    /// steps at some level.
    pub lost: bool,
    pub final_energy: f64,
}

fn level_pixel(px: Vector2<f64>, level: usize) -> Vector2<f64> {
    let s = (1u64 << level) as f64;
    Vector2::new((px.x + 0.5) / s - 0.5, (px.y + 0.5) / s - 0.5)
}

/// Energy of the window's active points against the target frame at one
/// pyramid level, for a given world-to-camera guess.
fn level_energy(
    window: &KeyframeWindow,
    target: &Pyramid,
    cfg: &VoConfig,
    level: usize,
    w_j: &RigidTransform3,
    affine: AffineBrightness,
) -> (f64, usize) {
    let k_l = cfg.intrinsics.at_level(level);
    let img = target.level(level);
    let mut energy = 0.0;
    let mut count = 0;
    for kf in window.keyframes() {
        if kf.pyramid.num_levels() <= level {
            continue;
        }
        let host = kf.pyramid.level(level);
        let t_ji = w_j.compose(&kf.pose);
        for pt in &kf.points {
            let (terms, valid) = pattern_residuals(
                host,
                img,
                &k_l,
                level_pixel(pt.pixel, level),
                pt.inverse_depth,
                &t_ji,
                kf.affine_left,
                affine,
                cfg.gradient_c,
            );
            if valid == 0 {
                continue;
            }
            for t in terms.iter().flatten() {
                energy += t.weight * huber_rho(t.residual, cfg.huber_gamma);
            }
            count += valid;
        }
    }
    (energy, count)
}

/// Gauss-Newton over (pose increment, a, b) at one level. Returns false when
/// tracking diverged.
#[allow(clippy::too_many_arguments)]
fn optimize_level(
    window: &KeyframeWindow,
    target: &Pyramid,
    cfg: &VoConfig,
    level: usize,
    w_j: &mut RigidTransform3,
    affine: &mut AffineBrightness,
    energy: &mut f64,
    converged: &mut bool,
) -> bool {
    let k_l = cfg.intrinsics.at_level(level);
    let img = target.level(level);
    let mut lambda = 0.0f64;
    let mut consecutive_fails = 0;

    for _ in 0..cfg.max_track_iterations {
        let mut h = SMatrix::<f64, 8, 8>::zeros();
        let mut g = SVector::<f64, 8>::zeros();
        for kf in window.keyframes() {
            if kf.pyramid.num_levels() <= level {
                continue;
            }
            let host = kf.pyramid.level(level);
            let t_ji = w_j.compose(&kf.pose);
            for pt in &kf.points {
                let (terms, _) = pattern_residuals(
                    host,
                    img,
                    &k_l,
                    level_pixel(pt.pixel, level),
                    pt.inverse_depth,
                    &t_ji,
                    kf.affine_left,
                    *affine,
                    cfg.gradient_c,
                );
                for t in terms.iter().flatten() {
                    let w = t.weight * huber_weight(t.residual, cfg.huber_gamma);
                    let jp = t.j_pose_target();
                    let ja = t.j_affine_target();
                    let mut row = SVector::<f64, 8>::zeros();
                    row.fixed_rows_mut::<6>(0).copy_from_slice(&jp);
                    row[6] = ja[0];
                    row[7] = ja[1];
                    h.ger(w, &row, &row, 1.0);
                    g += row * (w * t.residual);
                }
            }
        }

        let mut damped = h;
        for i in 0..8 {
            damped[(i, i)] += lambda * (1.0 + h[(i, i)]);
        }
        let Some(chol) = damped.cholesky() else {
            lambda = (lambda * 10.0).max(1e-6);
            consecutive_fails += 1;
            if consecutive_fails >= 5 {
                return false;
            }
            continue;
        };
        let delta = chol.solve(&(-g));
        if !delta.iter().all(|v| v.is_finite()) {
            return false;
        }

        let xi = [delta[0], delta[1], delta[2], delta[3], delta[4], delta[5]];
        let w_new = RigidTransform3::exp(&xi).compose(w_j);
        let aff_new = AffineBrightness {
            a: affine.a + delta[6],
            b: affine.b + delta[7],
        };
        let (e_new, n_new) = level_energy(window, target, cfg, level, &w_new, aff_new);
        if n_new == 0 {
            return false;
        }
        if e_new <= *energy {
            let decrease = *energy - e_new;
            *w_j = w_new;
            *affine = aff_new;
            *energy = e_new;
            lambda *= 0.1;
            consecutive_fails = 0;
            if decrease < 1e-6 * energy.max(1e-12) {
                *converged = true;
                return true;
            }
        } else {
            lambda = (lambda * 10.0).max(1e-6);
            consecutive_fails += 1;
            if consecutive_fails >= 5 {
                return false;
            }
        }
    }
    true
}

/// Tracks a new frame against the window by coarse-to-fine Gauss-Newton
/// over the SE(3) pose and the frame's affine brightness, depths fixed.
pub fn track_frame(
    window: &KeyframeWindow,
    target: &Pyramid,
    cfg: &VoConfig,
    init_pose: &RigidTransform3,
    init_affine: AffineBrightness,
) -> TrackResult {
    let mut w_j = init_pose.inverse();
    let mut affine = init_affine;
    let levels = cfg
        .pyramid_levels
        .min(target.num_levels())
        .min(window.min_pyramid_levels().max(1));
    let mut converged = false;
    let mut energy = 0.0;

    for level in (0..levels).rev() {
        let (e0, n0) = level_energy(window, target, cfg, level, &w_j, affine);
        if n0 == 0 {
            return TrackResult {
                pose: w_j.inverse(),
                affine,
                converged: false,
                lost: true,
                final_energy: f64::INFINITY,
            };
        }
        energy = e0;
        converged = false;
        if !optimize_level(
            window, target, cfg, level, &mut w_j, &mut affine, &mut energy, &mut converged,
        ) {
            return TrackResult {
                pose: w_j.inverse(),
                affine,
                converged: false,
                lost: true,
                final_energy: energy,
            };
        }
    }

    TrackResult {
        pose: w_j.inverse(),
        affine,
        converged,
        lost: false,
        final_energy: energy,
    }
}

/// Keyframe need: mean squared optical flow of the active points between the
/// newest keyframe and the tracked frame, or a strong relative brightness
/// change.
pub fn needs_keyframe(
    window: &KeyframeWindow,
    cfg: &VoConfig,
    tracked_pose: &RigidTransform3,
    tracked_affine: AffineBrightness,
) -> bool {
    let Some(reference) = window.keyframes().last() else {
        return true;
    };
    if (tracked_affine.a - reference.affine_left.a).abs() > cfg.brightness_threshold {
        return true;
    }
    let k = &cfg.intrinsics;
    let w_ref = reference.pose.inverse();
    let w_new = tracked_pose.inverse();
    let mut sum = 0.0;
    let mut n = 0usize;
    for kf in window.keyframes() {
        let t_ref_host = w_ref.compose(&kf.pose);
        let t_new_host = w_new.compose(&kf.pose);
        for pt in &kf.points {
            let Ok(p_i) = crate::geometry::back_project(k, &pt.pixel, pt.inverse_depth) else {
                continue;
            };
            let in_ref = t_ref_host.transform_point(&p_i);
            let in_new = t_new_host.transform_point(&p_i);
            if in_ref.z <= 1e-6 || in_new.z <= 1e-6 {
                continue;
            }
            let (Ok(px_ref), Ok(px_new)) = (
                crate::geometry::project(k, &in_ref),
                crate::geometry::project(k, &in_new),
            ) else {
                continue;
            };
            sum += (px_new - px_ref).norm_squared();
            n += 1;
        }
    }
    if n == 0 {
        return true;
    }
    sum / n as f64 > cfg.flow_threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dso_vo::{FrameData, StereoOdometry};
    use crate::pipeline::synth::{render_stereo_frame, PlaneScene};
    use nalgebra::Vector3;

    fn scene() -> PlaneScene {
        PlaneScene::desk_default(42)
    }

    fn bootstrap(scene: &PlaneScene) -> (StereoOdometry, VoConfig) {
        let cfg = VoConfig::desk_default(scene.intrinsics);
        let mut vo = StereoOdometry::new(cfg.clone());
        let frame = render_stereo_frame(scene, &RigidTransform3::identity(), 0.0, 0.0, 0.0);
        vo.process_frame(frame).unwrap();
        (vo, cfg)
    }

    #[test]
    fn identical_frame_tracks_to_identity() {
        let sc = scene();
        let (vo, cfg) = bootstrap(&sc);
        let frame = render_stereo_frame(&sc, &RigidTransform3::identity(), 0.1, 0.0, 0.0);
        let pyr = Pyramid::build(frame.left, cfg.pyramid_levels);
        let res = track_frame(
            vo.window(),
            &pyr,
            &cfg,
            &RigidTransform3::identity(),
            AffineBrightness::default(),
        );
        assert!(!res.lost);
        assert!(res.pose.translation().norm() < 1e-6);
        assert!((res.pose.rotation() - nalgebra::Matrix3::identity()).abs().max() < 1e-6);
        assert!(res.affine.a.abs() < 1e-6 && res.affine.b.abs() < 1e-6);
    }

    #[test]
    fn forward_translation_recovered_to_2mm() {
        let sc = scene();
        let (vo, cfg) = bootstrap(&sc);
        let truth = RigidTransform3::from_translation(Vector3::new(0.0, 0.0, 0.10));
        let frame = render_stereo_frame(&sc, &truth, 0.1, 0.0, 0.0);
        let pyr = Pyramid::build(frame.left, cfg.pyramid_levels);
        let res = track_frame(
            vo.window(),
            &pyr,
            &cfg,
            &RigidTransform3::identity(),
            AffineBrightness::default(),
        );
        assert!(!res.lost);
        let err = (res.pose.translation() - truth.translation()).norm();
        assert!(err < 2e-3, "translation error {err}");
    }

    #[test]
    fn yaw_recovered_to_five_hundredths_degree() {
        let sc = scene();
        let (vo, cfg) = bootstrap(&sc);
        let yaw = 2.0f64.to_radians();
        let truth = RigidTransform3::from_yaw(yaw, Vector3::zeros());
        let frame = render_stereo_frame(&sc, &truth, 0.1, 0.0, 0.0);
        let pyr = Pyramid::build(frame.left, cfg.pyramid_levels);
        let res = track_frame(
            vo.window(),
            &pyr,
            &cfg,
            &RigidTransform3::identity(),
            AffineBrightness::default(),
        );
        assert!(!res.lost);
        let r_err = res.pose.rotation().transpose() * truth.rotation();
        let angle_err = ((r_err.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
        assert!(
            angle_err.to_degrees() < 0.05,
            "rotation error {} deg",
            angle_err.to_degrees()
        );
    }

    #[test]
    fn needs_keyframe_false_for_identical_frame() {
        let sc = scene();
        let (vo, cfg) = bootstrap(&sc);
        assert!(!needs_keyframe(
            vo.window(),
            &cfg,
            &RigidTransform3::identity(),
            AffineBrightness::default(),
        ));
    }

    #[test]
    fn needs_keyframe_on_brightness_jump() {
        let sc = scene();
        let (vo, cfg) = bootstrap(&sc);
        assert!(needs_keyframe(
            vo.window(),
            &cfg,
            &RigidTransform3::identity(),
            AffineBrightness { a: 0.3, b: 0.0 },
        ));
    }

    #[test]
    fn needs_keyframe_on_large_flow() {
        let sc = scene();
        let (vo, cfg) = bootstrap(&sc);
        // A sideways shove creates uniform optical flow well above threshold.
        let pose = RigidTransform3::from_translation(Vector3::new(0.3, 0.0, 0.0));
        assert!(needs_keyframe(
            vo.window(),
            &cfg,
            &pose,
            AffineBrightness::default(),
        ));
    }

    #[test]
    fn frame_data_dimension_check() {
        let sc = scene();
        let f = render_stereo_frame(&sc, &RigidTransform3::identity(), 0.0, 0.0, 0.0);
        assert!(FrameData::new(f.left.clone(), f.right.clone(), 0.0).is_ok());
        let small = crate::dso_vo::image::Raster::from_fn(8, 8, |_, _| 0.0);
        assert!(FrameData::new(f.left, small, 0.0).is_err());
    }
}
