//! Direct sparse stereo visual odometry.
//!
//! New frames are tracked photometrically against a bounded window of
//! keyframes. Keyframe candidates get their depth from static stereo,
//! are refined by non-keyframes, and become active points joined in a
//! windowed photometric optimization. Velocities for the attractor network
//! come from the two latest keyframe poses.

pub mod bundle;
pub mod image;
pub mod residual;
pub mod select;
pub mod stereo;
pub mod track;

use crate::geometry::{
    back_project, project, relative_transform, velocity_from_relative, CameraIntrinsics,
    GeometryError, PlanarVelocity, RigidTransform3,
};
use image::{Pyramid, Raster};
use nalgebra::{Vector2, Vector3};
use residual::AffineBrightness;
use stereo::StereoConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VoError {
    #[error("left image is {lw}x{lh} but right image is {rw}x{rh}")]
    DimensionMismatch {
        lw: usize,
        lh: usize,
        rw: usize,
        rh: usize,
    },
    #[error("timestamp {new} not after previous {prev}")]
    NonMonotoneTimestamp { new: f64, prev: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One stereo frame: rectified left/right rasters and per-image affine
/// brightness parameters.
#[derive(Debug, Clone)]
pub struct FrameData {
    pub left: Raster,
    pub right: Raster,
    pub timestamp: f64,
    pub affine_left: AffineBrightness,
    pub affine_right: AffineBrightness,
}

impl FrameData {
    pub fn new(left: Raster, right: Raster, timestamp: f64) -> Result<Self, VoError> {
        if left.width() != right.width() || left.height() != right.height() {
            return Err(VoError::DimensionMismatch {
                lw: left.width(),
                lh: left.height(),
                rw: right.width(),
                rh: right.height(),
            });
        }
        Ok(Self {
            left,
            right,
            timestamp,
            affine_left: AffineBrightness::default(),
            affine_right: AffineBrightness::default(),
        })
    }
}

/// An activated point: hosted in one keyframe, observed by the others.
/// Every point carries the fixed 8-point pattern ([`residual::PATTERN`]);
/// all pattern pixels share the center's inverse depth.
#[derive(Debug, Clone, Copy)]
pub struct ActivePoint {
    pub host_keyframe: usize,
    pub pixel: Vector2<f64>,
    pub inverse_depth: f64,
    /// Gradient down-weighting at the host pixel.
    pub gradient_weight: f64,
}

/// A selected point awaiting activation; its inverse depth is refined by
/// non-keyframes between keyframe insertions.
#[derive(Debug, Clone, Copy)]
pub struct CandidatePoint {
    pub pixel: Vector2<f64>,
    pub inverse_depth: f64,
    /// Precision of the inverse-depth estimate.
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: usize,
    pub timestamp: f64,
    /// Camera-to-world pose.
    pub pose: RigidTransform3,
    pub affine_left: AffineBrightness,
    pub affine_right: AffineBrightness,
    pub pyramid: Pyramid,
    pub right: Raster,
    pub points: Vec<ActivePoint>,
    pub candidates: Vec<CandidatePoint>,
}

/// Bounded set of keyframes under joint optimization.
#[derive(Debug, Clone)]
pub struct KeyframeWindow {
    keyframes: Vec<Keyframe>,
    pub max_keyframes: usize,
}

/// Snapshot of the state mutated by the bundle step, for revert-on-reject.
pub struct WindowState {
    poses: Vec<RigidTransform3>,
    affines: Vec<(AffineBrightness, AffineBrightness)>,
    depths: Vec<Vec<f64>>,
}

impl KeyframeWindow {
    pub fn new(max_keyframes: usize) -> Self {
        Self {
            keyframes: Vec::new(),
            max_keyframes,
        }
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn keyframes_mut(&mut self) -> &mut [Keyframe] {
        &mut self.keyframes
    }

    pub fn push(&mut self, kf: Keyframe) {
        self.keyframes.push(kf);
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn active_point_count(&self) -> usize {
        self.keyframes.iter().map(|k| k.points.len()).sum()
    }

    pub fn min_pyramid_levels(&self) -> usize {
        self.keyframes
            .iter()
            .map(|k| k.pyramid.num_levels())
            .min()
            .unwrap_or(0)
    }

    pub fn clone_state(&self) -> WindowState {
        WindowState {
            poses: self.keyframes.iter().map(|k| k.pose).collect(),
            affines: self
                .keyframes
                .iter()
                .map(|k| (k.affine_left, k.affine_right))
                .collect(),
            depths: self
                .keyframes
                .iter()
                .map(|k| k.points.iter().map(|p| p.inverse_depth).collect())
                .collect(),
        }
    }

    pub fn restore_state(&mut self, state: WindowState) {
        for (kf, ((pose, aff), depths)) in self.keyframes.iter_mut().zip(
            state
                .poses
                .into_iter()
                .zip(state.affines)
                .zip(state.depths),
        ) {
            kf.pose = pose;
            kf.affine_left = aff.0;
            kf.affine_right = aff.1;
            for (pt, d) in kf.points.iter_mut().zip(depths) {
                pt.inverse_depth = d;
            }
        }
    }
}

/// Tunables of the odometry. None are prescribed by the energy formulation;
/// the defaults below are the desk-scale configuration.
#[derive(Debug, Clone)]
pub struct VoConfig {
    pub intrinsics: CameraIntrinsics,
    /// Coarse-to-fine levels used by the tracker.
    pub pyramid_levels: usize,
    /// Huber threshold on photometric residuals, intensity units.
    pub huber_gamma: f64,
    /// Gradient down-weighting constant of the residual weights.
    pub gradient_c: f64,
    /// Coupling factor between temporal and static stereo energy.
    pub coupling_lambda: f64,
    /// Window bound N_kf.
    pub max_keyframes: usize,
    /// Additive margin over the block median gradient for selection.
    pub g_const: f64,
    /// Block edge length for candidate selection, pixels.
    pub block_size: usize,
    /// Cap on candidates per keyframe (strongest gradients win).
    pub max_points_per_keyframe: usize,
    /// Keyframe trigger: mean squared optical flow, px^2.
    pub flow_threshold: f64,
    /// Keyframe trigger: relative brightness |a_new - a_kf|.
    pub brightness_threshold: f64,
    pub stereo: StereoConfig,
    /// Tracker iteration cap per pyramid level.
    pub max_track_iterations: usize,
    /// Joint optimization iterations per keyframe insertion.
    pub joint_iterations: usize,
    /// Occlusion guard for non-keyframe depth refinement, intensity units.
    pub refine_max_cost: f64,
}

impl VoConfig {
    /// Desk-scale defaults: 4 pyramid levels, gamma 9, c 25, lambda 1,
    /// 7 keyframes, g_const 7.
    pub fn desk_default(intrinsics: CameraIntrinsics) -> Self {
        Self {
            intrinsics,
            pyramid_levels: 4,
            huber_gamma: 9.0,
            gradient_c: 25.0,
            coupling_lambda: 1.0,
            max_keyframes: 7,
            g_const: 7.0,
            block_size: 16,
            max_points_per_keyframe: 150,
            flow_threshold: 64.0,
            brightness_threshold: 0.2,
            stereo: StereoConfig::default(),
            max_track_iterations: 50,
            joint_iterations: 6,
            refine_max_cost: 12.0,
        }
    }
}

/// Updates candidate inverse depths of the newest keyframe from a tracked
/// non-keyframe: a short search along the epipolar direction near the
/// predicted projection, followed by precision-weighted scalar fusion.
pub fn refine_nonkeyframe(
    window: &mut KeyframeWindow,
    target: &Raster,
    cfg: &VoConfig,
    tracked_pose: &RigidTransform3,
    tracked_affine: AffineBrightness,
) {
    let Some(kf) = window.keyframes.last_mut() else {
        return;
    };
    let k = &cfg.intrinsics;
    let t_ji = tracked_pose.inverse().compose(&kf.pose);
    let host_img = kf.pyramid.level(0);
    let exp_ratio = (tracked_affine.a - kf.affine_left.a).exp();

    for cand in &mut kf.candidates {
        let Ok(p_i) = back_project(k, &cand.pixel, cand.inverse_depth) else {
            continue;
        };
        let p_j = t_ji.transform_point(&p_i);
        if p_j.z <= 1e-6 {
            continue;
        }
        let Ok(center) = project(k, &p_j) else {
            continue;
        };
        // dp'/dd: direction the projection moves per unit inverse depth.
        let dpj = -(p_j - t_ji.translation()) / cand.inverse_depth;
        let iz = 1.0 / p_j.z;
        let jx = k.fx * iz * dpj.x - k.fx * p_j.x * iz * iz * dpj.z;
        let jy = k.fy * iz * dpj.y - k.fy * p_j.y * iz * iz * dpj.z;
        let j_norm = (jx * jx + jy * jy).sqrt();
        if j_norm < 1e-4 {
            // No parallax along the epipolar line; nothing to learn.
            continue;
        }
        let dir = Vector2::new(jx / j_norm, jy / j_norm);

        let cost_at = |offset: f64| -> Option<f64> {
            let base = center + dir * offset;
            let mut sum = 0.0;
            for (ox, oy) in residual::PATTERN {
                let hx = cand.pixel.x + ox as f64;
                let hy = cand.pixel.y + oy as f64;
                let tx = base.x + ox as f64;
                let ty = base.y + oy as f64;
                if !host_img.in_bounds(hx, hy, 1.0) || !target.in_bounds(tx, ty, 2.0) {
                    return None;
                }
                let h = exp_ratio * (host_img.sample(hx, hy) - kf.affine_left.b);
                let t = target.sample(tx, ty) - tracked_affine.b;
                sum += (t - h).abs();
            }
            Some(sum / residual::PATTERN.len() as f64)
        };

        let offsets: Vec<f64> = (-3..=3).map(f64::from).collect();
        let costs: Vec<Option<f64>> = offsets.iter().map(|o| cost_at(*o)).collect();
        let Some((best_idx, best_cost)) = costs
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|c| (i, c)))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        else {
            continue;
        };
        if best_cost > cfg.refine_max_cost {
            // Occluded or mismatched; skip the update.
            continue;
        }
        let mut off = offsets[best_idx];
        if best_idx > 0 && best_idx + 1 < costs.len() {
            if let (Some(cm), Some(cp)) = (costs[best_idx - 1], costs[best_idx + 1]) {
                let den = cm - 2.0 * best_cost + cp;
                if den > 1e-12 {
                    off += (0.5 * (cm - cp) / den).clamp(-1.0, 1.0);
                }
            }
        }
        let d_obs = cand.inverse_depth + off / j_norm;
        if d_obs <= 1e-6 {
            continue;
        }
        // Scalar precision-weighted fusion, sigma of half a pixel along the
        // line.
        let w_obs = 4.0 * j_norm * j_norm;
        cand.inverse_depth =
            (cand.weight * cand.inverse_depth + w_obs * d_obs) / (cand.weight + w_obs);
        cand.weight += w_obs;
    }
}

/// Drops keyframes past the window bound. The two newest are protected; the
/// dropped frame maximizes sqrt(distance to latest) times the inverse
/// distance sum to the other old frames, so far-away redundant frames go
/// first. Points hosted in the dropped frame vanish with it, and surviving
/// points unobserved by the two latest keyframes are removed.
pub fn marginalize(window: &mut KeyframeWindow, cfg: &VoConfig) {
    while window.keyframes.len() > window.max_keyframes {
        let n = window.keyframes.len();
        let centers: Vec<Vector3<f64>> = window
            .keyframes
            .iter()
            .map(|k| *k.pose.translation())
            .collect();
        let latest = n - 1;
        let mut best: Option<(f64, usize)> = None;
        for i in 0..n - 2 {
            let d_latest = (centers[i] - centers[latest]).norm();
            let mut inv_sum = 0.0;
            for (j, c) in centers.iter().enumerate() {
                if j != i && j != latest {
                    inv_sum += 1.0 / ((centers[i] - c).norm() + 1e-5);
                }
            }
            let score = d_latest.sqrt() * inv_sum;
            if best.map_or(true, |(s, _)| score > s) {
                best = Some((score, i));
            }
        }
        let Some((_, drop_idx)) = best else { return };
        window.keyframes.remove(drop_idx);

        // Remove points no longer observed by either of the two latest
        // keyframes.
        let k = cfg.intrinsics;
        let newest: Vec<(RigidTransform3, usize, usize)> = window
            .keyframes
            .iter()
            .rev()
            .take(2)
            .map(|kf| (kf.pose.inverse(), kf.pyramid.level(0).width(), kf.pyramid.level(0).height()))
            .collect();
        let poses: Vec<RigidTransform3> = window.keyframes.iter().map(|kf| kf.pose).collect();
        let newest_ids: Vec<usize> = window
            .keyframes
            .iter()
            .rev()
            .take(2)
            .map(|kf| kf.id)
            .collect();
        for (kf_idx, kf) in window.keyframes.iter_mut().enumerate() {
            let host_pose = poses[kf_idx];
            let host_is_new = newest_ids.contains(&kf.id);
            kf.points.retain(|pt| {
                if host_is_new {
                    return true;
                }
                let Ok(p_host) = back_project(&k, &pt.pixel, pt.inverse_depth) else {
                    return false;
                };
                let p_world = host_pose.transform_point(&p_host);
                newest.iter().any(|(w, width, height)| {
                    let p = w.transform_point(&p_world);
                    if p.z <= 1e-6 {
                        return false;
                    }
                    match project(&k, &p) {
                        Ok(px) => {
                            px.x >= 3.0
                                && px.y >= 3.0
                                && px.x <= *width as f64 - 4.0
                                && px.y <= *height as f64 - 4.0
                        }
                        Err(_) => false,
                    }
                })
            });
        }
    }
}

/// Planar velocity from the two latest keyframes, per the relative-pose
/// extraction of the geometry module.
pub fn emit_velocity(window: &KeyframeWindow) -> Result<PlanarVelocity, GeometryError> {
    let n = window.keyframes.len();
    assert!(n >= 2, "emit_velocity needs at least two keyframes");
    let older = &window.keyframes[n - 2];
    let newer = &window.keyframes[n - 1];
    let t_ji = relative_transform(&older.pose, &newer.pose);
    velocity_from_relative(&t_ji, newer.timestamp - older.timestamp)
}

/// Per-frame output of the odometry driver.
#[derive(Debug, Clone, Copy)]
pub struct VoOutput {
    pub frame_index: usize,
    pub timestamp: f64,
    /// Camera-to-world pose of this frame.
    pub pose: RigidTransform3,
    pub is_keyframe: bool,
    pub tracking_lost: bool,
    pub affine: AffineBrightness,
    /// Present on every keyframe after the first: velocity from the two
    /// latest keyframe poses.
    pub velocity: Option<PlanarVelocity>,
}

/// Frame-in, velocity-out odometry driver owning the keyframe window.
#[derive(Debug)]
pub struct StereoOdometry {
    cfg: VoConfig,
    window: KeyframeWindow,
    last_pose: RigidTransform3,
    prev_pose: Option<RigidTransform3>,
    last_affine: AffineBrightness,
    last_timestamp: Option<f64>,
    next_keyframe_id: usize,
    frame_index: usize,
}

impl StereoOdometry {
    pub fn new(cfg: VoConfig) -> Self {
        let max = cfg.max_keyframes;
        Self {
            cfg,
            window: KeyframeWindow::new(max),
            last_pose: RigidTransform3::identity(),
            prev_pose: None,
            last_affine: AffineBrightness::default(),
            last_timestamp: None,
            next_keyframe_id: 0,
            frame_index: 0,
        }
    }

    pub fn window(&self) -> &KeyframeWindow {
        &self.window
    }

    pub fn into_window(self) -> KeyframeWindow {
        self.window
    }

    pub fn config(&self) -> &VoConfig {
        &self.cfg
    }

    /// Constant-velocity pose prediction.
    fn predict_pose(&self) -> RigidTransform3 {
        match &self.prev_pose {
            Some(prev) => {
                let motion = relative_transform(&self.last_pose, prev);
                // T_pred = T_last * (T_prev^-1 * T_last)
                self.last_pose.compose(&motion)
            }
            None => self.last_pose,
        }
    }

    fn select_and_init_candidates(&self, frame: &FrameData) -> Vec<CandidatePoint> {
        let mut picks = select::select_candidate_points(&frame.left, self.cfg.block_size, self.cfg.g_const);
        picks.sort_by(|a, b| {
            let ga = frame.left.grad_sq(a.0, a.1);
            let gb = frame.left.grad_sq(b.0, b.1);
            gb.partial_cmp(&ga)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.0.cmp(&b.0))
        });
        picks.truncate(self.cfg.max_points_per_keyframe);
        picks
            .into_iter()
            .filter_map(|(x, y)| {
                stereo::static_stereo_depth(
                    &frame.left,
                    &frame.right,
                    (x, y),
                    &self.cfg.intrinsics,
                    &self.cfg.stereo,
                )
                .map(|inv_depth| CandidatePoint {
                    pixel: Vector2::new(x as f64, y as f64),
                    inverse_depth: inv_depth,
                    weight: 1.0,
                })
            })
            .collect()
    }

    fn make_keyframe(
        &mut self,
        frame: FrameData,
        pose: RigidTransform3,
        affine: AffineBrightness,
    ) -> Keyframe {
        let candidates = self.select_and_init_candidates(&frame);
        let id = self.next_keyframe_id;
        self.next_keyframe_id += 1;
        Keyframe {
            id,
            timestamp: frame.timestamp,
            pose,
            affine_left: affine,
            affine_right: affine,
            pyramid: Pyramid::build(frame.left, self.cfg.pyramid_levels),
            right: frame.right,
            points: Vec::new(),
            candidates,
        }
    }

    /// Promotes the newest keyframe's candidates to active points.
    fn activate_candidates(&mut self) {
        let c = self.cfg.gradient_c;
        if let Some(kf) = self.window.keyframes.last_mut() {
            let host_id = kf.id;
            let img = kf.pyramid.level(0);
            let candidates = std::mem::take(&mut kf.candidates);
            let mut points: Vec<ActivePoint> = candidates
                .into_iter()
                .map(|cand| ActivePoint {
                    host_keyframe: host_id,
                    pixel: cand.pixel,
                    inverse_depth: cand.inverse_depth,
                    gradient_weight: residual::gradient_weight(
                        img,
                        (cand.pixel.x as usize, cand.pixel.y as usize),
                        c,
                    ),
                })
                .collect();
            kf.points.append(&mut points);
        }
    }

    /// Feeds one stereo frame through the odometry.
    pub fn process_frame(&mut self, frame: FrameData) -> Result<VoOutput, VoError> {
        if frame.left.width() != frame.right.width()
            || frame.left.height() != frame.right.height()
        {
            return Err(VoError::DimensionMismatch {
                lw: frame.left.width(),
                lh: frame.left.height(),
                rw: frame.right.width(),
                rh: frame.right.height(),
            });
        }
        if let Some(prev) = self.last_timestamp {
            if frame.timestamp <= prev {
                return Err(VoError::NonMonotoneTimestamp {
                    new: frame.timestamp,
                    prev,
                });
            }
        }
        self.last_timestamp = Some(frame.timestamp);
        let index = self.frame_index;
        self.frame_index += 1;

        // Bootstrap: the first frame becomes the gauge keyframe and its
        // stereo-initialized candidates activate immediately so the second
        // frame has something to track against.
        if self.window.is_empty() {
            let pose = RigidTransform3::identity();
            let timestamp = frame.timestamp;
            let kf = self.make_keyframe(frame, pose, AffineBrightness::default());
            self.window.push(kf);
            self.activate_candidates();
            self.last_pose = pose;
            return Ok(VoOutput {
                frame_index: index,
                timestamp,
                pose,
                is_keyframe: true,
                tracking_lost: false,
                affine: AffineBrightness::default(),
                velocity: None,
            });
        }

        let pyramid = Pyramid::build(frame.left.clone(), self.cfg.pyramid_levels);
        let prediction = self.predict_pose();
        let result = track::track_frame(
            &self.window,
            &pyramid,
            &self.cfg,
            &prediction,
            self.last_affine,
        );
        let timestamp = frame.timestamp;

        if result.lost {
            // Fall back to the constant-velocity pose and keep going.
            self.prev_pose = Some(self.last_pose);
            self.last_pose = prediction;
            return Ok(VoOutput {
                frame_index: index,
                timestamp,
                pose: prediction,
                is_keyframe: false,
                tracking_lost: true,
                affine: self.last_affine,
                velocity: None,
            });
        }

        let make_kf = track::needs_keyframe(&self.window, &self.cfg, &result.pose, result.affine);
        let mut velocity = None;
        if make_kf {
            self.activate_candidates();
            let kf = self.make_keyframe(frame, result.pose, result.affine);
            self.window.push(kf);
            bundle::joint_optimize(&mut self.window, &self.cfg, self.cfg.joint_iterations);
            marginalize(&mut self.window, &self.cfg);
            velocity = Some(emit_velocity(&self.window)?);
        } else {
            refine_nonkeyframe(
                &mut self.window,
                &frame.left,
                &self.cfg,
                &result.pose,
                result.affine,
            );
        }

        // The bundle step may have moved the newest keyframe; report its
        // refined pose for keyframes.
        let pose = if make_kf {
            self.window.keyframes().last().unwrap().pose
        } else {
            result.pose
        };
        self.prev_pose = Some(self.last_pose);
        self.last_pose = pose;
        self.last_affine = result.affine;
        Ok(VoOutput {
            frame_index: index,
            timestamp,
            pose,
            is_keyframe: make_kf,
            tracking_lost: false,
            affine: result.affine,
            velocity,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synth::{render_stereo_frame, PlaneScene};

    fn tiny_keyframe(id: usize, timestamp: f64, pose: RigidTransform3, n_points: usize) -> Keyframe {
        let img = Raster::from_fn(64, 48, |x, y| ((x * 7 + y * 13) % 200) as f64);
        let right = img.clone();
        let points = (0..n_points)
            .map(|i| ActivePoint {
                host_keyframe: id,
                pixel: Vector2::new(10.0 + i as f64 * 5.0, 20.0),
                inverse_depth: 0.5,
                gradient_weight: 1.0,
            })
            .collect();
        Keyframe {
            id,
            timestamp,
            pose,
            affine_left: AffineBrightness::default(),
            affine_right: AffineBrightness::default(),
            pyramid: Pyramid::build(img, 2),
            right,
            points,
            candidates: Vec::new(),
        }
    }

    fn desk_cfg() -> VoConfig {
        let k = CameraIntrinsics::new(120.0, 120.0, 31.5, 23.5, 0.2, 64, 48).unwrap();
        VoConfig::desk_default(k)
    }

    #[test]
    fn marginalize_drops_one_keyframe_and_its_points() {
        let cfg = desk_cfg();
        let mut window = KeyframeWindow::new(3);
        for i in 0..4 {
            window.push(tiny_keyframe(
                i,
                i as f64,
                RigidTransform3::from_translation(Vector3::new(i as f64 * 0.5, 0.0, 0.0)),
                4,
            ));
        }
        let dropped_candidates: Vec<usize> = window.keyframes()[..2].iter().map(|k| k.id).collect();
        marginalize(&mut window, &cfg);
        assert_eq!(window.len(), 3);
        // Exactly one of the two oldest was dropped, never the two newest.
        let remaining: Vec<usize> = window.keyframes().iter().map(|k| k.id).collect();
        assert!(remaining.contains(&2) && remaining.contains(&3));
        let dropped: Vec<usize> = dropped_candidates
            .into_iter()
            .filter(|id| !remaining.contains(id))
            .collect();
        assert_eq!(dropped.len(), 1);
        for kf in window.keyframes() {
            for pt in &kf.points {
                assert_eq!(pt.host_keyframe, kf.id);
            }
        }
        // Timestamps stay monotone.
        let stamps: Vec<f64> = window.keyframes().iter().map(|k| k.timestamp).collect();
        assert!(stamps.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn emit_velocity_matches_geometry_oracle() {
        let mut window = KeyframeWindow::new(4);
        window.push(tiny_keyframe(0, 0.0, RigidTransform3::identity(), 0));
        let pose = RigidTransform3::from_yaw(0.05, Vector3::new(0.0, 0.0, 0.5));
        window.push(tiny_keyframe(1, 0.1, pose, 0));
        let vel = emit_velocity(&window).unwrap();
        let oracle = velocity_from_relative(
            &relative_transform(&RigidTransform3::identity(), &pose),
            0.1,
        )
        .unwrap();
        assert!((vel.rotational - oracle.rotational).abs() < 1e-12);
        assert!((vel.translational - oracle.translational).abs() < 1e-12);
    }

    #[test]
    fn emit_velocity_identical_poses_is_zero() {
        let mut window = KeyframeWindow::new(4);
        window.push(tiny_keyframe(0, 0.0, RigidTransform3::identity(), 0));
        window.push(tiny_keyframe(1, 0.1, RigidTransform3::identity(), 0));
        let vel = emit_velocity(&window).unwrap();
        assert_eq!(vel.rotational, 0.0);
        assert_eq!(vel.translational, 0.0);
    }

    #[test]
    fn refine_keeps_consistent_depth_and_raises_weight() {
        let scene = PlaneScene::desk_default(5);
        let cfg = VoConfig::desk_default(scene.intrinsics);
        let mut vo = StereoOdometry::new(cfg.clone());
        vo.process_frame(render_stereo_frame(
            &scene,
            &RigidTransform3::identity(),
            0.0,
            0.0,
            0.0,
        ))
        .unwrap();
        // Re-seed candidates (activation consumed them at bootstrap).
        let frame = render_stereo_frame(&scene, &RigidTransform3::identity(), 0.05, 0.0, 0.0);
        let cands = vo.select_and_init_candidates(&frame);
        assert!(!cands.is_empty());
        vo.window.keyframes_mut()[0].candidates = cands;

        let pose = RigidTransform3::from_translation(Vector3::new(0.03, 0.0, 0.0));
        let moved = render_stereo_frame(&scene, &pose, 0.1, 0.0, 0.0);
        let before: Vec<CandidatePoint> = vo.window.keyframes()[0].candidates.clone();
        refine_nonkeyframe(
            &mut vo.window,
            &moved.left,
            &cfg,
            &pose,
            AffineBrightness::default(),
        );
        let after = &vo.window.keyframes()[0].candidates;
        let mut refined = 0;
        for (b, a) in before.iter().zip(after) {
            if a.weight > b.weight {
                refined += 1;
                // True depth: the observation should agree with the stereo
                // prior, so the fused estimate barely moves.
                let rel = (a.inverse_depth - b.inverse_depth).abs() / b.inverse_depth;
                assert!(rel < 0.05, "depth moved {rel} relative");
            }
        }
        assert!(refined > 0, "no candidate was refined");
    }

    #[test]
    fn refine_skips_occluded_points() {
        let scene = PlaneScene::desk_default(6);
        let other = PlaneScene::desk_default(1234);
        let cfg = VoConfig::desk_default(scene.intrinsics);
        let mut vo = StereoOdometry::new(cfg.clone());
        vo.process_frame(render_stereo_frame(
            &scene,
            &RigidTransform3::identity(),
            0.0,
            0.0,
            0.0,
        ))
        .unwrap();
        let frame = render_stereo_frame(&scene, &RigidTransform3::identity(), 0.05, 0.0, 0.0);
        let cands = vo.select_and_init_candidates(&frame);
        vo.window.keyframes_mut()[0].candidates = cands.clone();
        // A frame from an unrelated scene: photometric error is high, all
        // updates must be skipped.
        let pose = RigidTransform3::from_translation(Vector3::new(0.03, 0.0, 0.0));
        let unrelated = render_stereo_frame(&other, &pose, 0.1, 0.0, 0.0);
        refine_nonkeyframe(
            &mut vo.window,
            &unrelated.left,
            &cfg,
            &pose,
            AffineBrightness::default(),
        );
        for (b, a) in cands.iter().zip(&vo.window.keyframes()[0].candidates) {
            assert_eq!(b.weight, a.weight);
            assert_eq!(b.inverse_depth, a.inverse_depth);
        }
    }

    #[test]
    fn bootstrap_creates_active_points() {
        let scene = PlaneScene::desk_default(9);
        let cfg = VoConfig::desk_default(scene.intrinsics);
        let mut vo = StereoOdometry::new(cfg);
        let out = vo
            .process_frame(render_stereo_frame(
                &scene,
                &RigidTransform3::identity(),
                0.0,
                0.0,
                0.0,
            ))
            .unwrap();
        assert!(out.is_keyframe);
        assert!(vo.window().active_point_count() > 20);
        // Depths should sit near the plane depth.
        for pt in &vo.window().keyframes()[0].points {
            let depth = 1.0 / pt.inverse_depth;
            assert!((depth - scene.plane_depth).abs() < 0.05 * scene.plane_depth);
        }
    }

    #[test]
    fn rejects_non_monotone_timestamps() {
        let scene = PlaneScene::desk_default(9);
        let cfg = VoConfig::desk_default(scene.intrinsics);
        let mut vo = StereoOdometry::new(cfg);
        vo.process_frame(render_stereo_frame(
            &scene,
            &RigidTransform3::identity(),
            1.0,
            0.0,
            0.0,
        ))
        .unwrap();
        let err = vo.process_frame(render_stereo_frame(
            &scene,
            &RigidTransform3::identity(),
            1.0,
            0.0,
            0.0,
        ));
        assert!(matches!(err, Err(VoError::NonMonotoneTimestamp { .. })));
    }
}
