//! Synthetic world generation: a textured plane rendered under known SE(3)
//! motion for the photometric stack, and waypoint trajectories with cue
//! events for the attractor/map stack. Both emit the same file formats the
//! loaders read, plus ground truth.

use crate::dso_vo::image::Raster;
use crate::dso_vo::FrameData;
use crate::geometry::{CameraIntrinsics, RigidTransform3};
use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::{FRAC_PI_2, TAU};
use std::fmt::Write as _;
use std::path::Path;

use super::PipelineError;

/// Band-limited pseudo-random texture: a sum of random low-frequency plane
/// waves. Smooth at the pixel scale, non-periodic over the working area.
#[derive(Debug, Clone)]
pub struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..24)
            .map(|_| {
                (
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(0.0..TAU),
                    rng.gen_range(6.0..18.0),
                )
            })
            .collect();
        Self { waves }
    }

    pub fn sample(&self, x: f64, y: f64) -> f64 {
        128.0
            + self
                .waves
                .iter()
                .map(|(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin())
                .sum::<f64>()
    }
}

/// A fronto-parallel textured plane at fixed depth in the world frame
/// (the first camera's frame), viewed by a rectified stereo rig.
#[derive(Debug, Clone)]
pub struct PlaneScene {
    pub intrinsics: CameraIntrinsics,
    pub plane_depth: f64,
    /// Texture-domain units per meter on the plane.
    pub texture_scale: f64,
    pub texture: Texture,
}

impl PlaneScene {
    /// Desk-scale scene: 320x240, plane 2 m ahead, 0.25 m baseline
    /// (35 px disparity at the plane).
    pub fn desk_default(texture_seed: u64) -> Self {
        let intrinsics =
            CameraIntrinsics::new(280.0, 280.0, 159.5, 119.5, 0.25, 320, 240).unwrap();
        Self {
            plane_depth: 2.0,
            texture_scale: 140.0,
            texture: Texture::new(texture_seed),
            intrinsics,
        }
    }

    /// Intensity seen along the ray of `pixel` from a camera at `pose`
    /// offset `baseline_offset` meters along the camera x axis.
    fn trace(&self, pose: &RigidTransform3, u: f64, v: f64, baseline_offset: f64) -> f64 {
        let k = &self.intrinsics;
        let dir = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let dir_w = pose.rotation() * dir;
        let origin = pose.translation() + pose.rotation() * Vector3::new(baseline_offset, 0.0, 0.0);
        let s = (self.plane_depth - origin.z) / dir_w.z;
        let w = origin + dir_w * s;
        self.texture
            .sample(w.x * self.texture_scale, w.y * self.texture_scale)
    }
}

/// Renders one stereo frame from `pose` (camera-to-world), applying the
/// affine brightness perturbation `I -> e^a I + b` to both images.
pub fn render_stereo_frame(
    scene: &PlaneScene,
    pose: &RigidTransform3,
    timestamp: f64,
    affine_a: f64,
    affine_b: f64,
) -> FrameData {
    let k = &scene.intrinsics;
    let gain = affine_a.exp();
    let left = Raster::from_fn(k.width, k.height, |x, y| {
        gain * scene.trace(pose, x as f64, y as f64, 0.0) + affine_b
    });
    let right = Raster::from_fn(k.width, k.height, |x, y| {
        gain * scene.trace(pose, x as f64, y as f64, k.baseline) + affine_b
    });
    FrameData::new(left, right, timestamp).expect("rendered pair shares dimensions")
}

/// Planar pose (x, y, theta) embedded as a camera-to-world matrix whose
/// planar extraction returns it: `t = (y, 0, x)`, `R = R_y(theta)`.
pub fn planar_to_transform(x: f64, y: f64, theta: f64) -> RigidTransform3 {
    RigidTransform3::from_yaw(theta, Vector3::new(y, 0.0, x))
}

/// One row of a velocity trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub timestamp: f64,
    pub omega: f64,
    pub speed: f64,
    /// Synthetic view identity; repeating an id marks a revisit.
    pub cue: Option<u32>,
}

/// A generated trajectory: per-step velocities, cue events, and the exact
/// planar ground truth after each step.
#[derive(Debug, Clone)]
pub struct TrajectoryWorld {
    pub rows: Vec<TraceRow>,
    /// Pose after applying row i (theta first, then translation).
    pub ground_truth: Vec<(f64, f64, f64)>,
}

impl TrajectoryWorld {
    /// Closed square loop: `per_side` straight steps per side, left turns in
    /// place at the corners, a cue at the start that repeats at the end.
    pub fn square(side: f64, per_side: usize, dt: f64, cue_at_start_end: bool) -> Self {
        let speed = side / (per_side as f64 * dt);
        let mut rows = Vec::new();
        let mut gt = Vec::new();
        let mut x = 0.0f64;
        let mut y = 0.0f64;
        let mut theta = 0.0f64;
        let mut t = 0.0f64;
        let push = |rows: &mut Vec<TraceRow>,
                        gt: &mut Vec<(f64, f64, f64)>,
                        t: &mut f64,
                        x: &mut f64,
                        y: &mut f64,
                        theta: &mut f64,
                        omega: f64,
                        speed: f64,
                        cue: Option<u32>| {
            *t += dt;
            *theta += omega * dt;
            *x += speed * dt * theta.cos();
            *y += speed * dt * theta.sin();
            rows.push(TraceRow {
                timestamp: *t,
                omega,
                speed,
                cue,
            });
            gt.push((*x, *y, *theta));
        };
        for leg in 0..4 {
            for i in 0..per_side {
                let cue = (cue_at_start_end && leg == 0 && i == 0).then_some(0);
                push(&mut rows, &mut gt, &mut t, &mut x, &mut y, &mut theta, 0.0, speed, cue);
            }
            let cue = (cue_at_start_end && leg == 3).then_some(0);
            push(
                &mut rows,
                &mut gt,
                &mut t,
                &mut x,
                &mut y,
                &mut theta,
                FRAC_PI_2 / dt,
                0.0,
                cue,
            );
        }
        Self {
            rows,
            ground_truth: gt,
        }
    }

    /// Straight out along +x, a U-turn onto a parallel lane `offset` to the
    /// side, and straight back. Used by the firing-rate map checks.
    pub fn out_and_back(length: f64, offset: f64, step: f64, dt: f64) -> Self {
        let n_out = (length / step).round() as usize;
        let n_off = (offset / step).round().max(1.0) as usize;
        let speed = step / dt;
        let mut rows = Vec::new();
        let mut gt = Vec::new();
        let mut x = 0.0f64;
        let mut y = 0.0f64;
        let mut theta = 0.0f64;
        let mut t = 0.0f64;
        let advance = |rows: &mut Vec<TraceRow>,
                           gt: &mut Vec<(f64, f64, f64)>,
                           t: &mut f64,
                           x: &mut f64,
                           y: &mut f64,
                           theta: &mut f64,
                           omega: f64,
                           v: f64| {
            *t += dt;
            *theta += omega * dt;
            *x += v * dt * theta.cos();
            *y += v * dt * theta.sin();
            rows.push(TraceRow {
                timestamp: *t,
                omega,
                speed: v,
                cue: None,
            });
            gt.push((*x, *y, *theta));
        };
        for _ in 0..n_out {
            advance(&mut rows, &mut gt, &mut t, &mut x, &mut y, &mut theta, 0.0, speed);
        }
        // Turn left to +y, cross the lane offset, turn left to -x.
        advance(&mut rows, &mut gt, &mut t, &mut x, &mut y, &mut theta, FRAC_PI_2 / dt, 0.0);
        for _ in 0..n_off {
            advance(&mut rows, &mut gt, &mut t, &mut x, &mut y, &mut theta, 0.0, speed);
        }
        advance(&mut rows, &mut gt, &mut t, &mut x, &mut y, &mut theta, FRAC_PI_2 / dt, 0.0);
        for _ in 0..n_out {
            advance(&mut rows, &mut gt, &mut t, &mut x, &mut y, &mut theta, 0.0, speed);
        }
        Self {
            rows,
            ground_truth: gt,
        }
    }

    /// Serializes rows as `timestamp,omega,v[,cue]` lines.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("timestamp,omega,v,cue\n");
        for r in &self.rows {
            match r.cue {
                Some(c) => writeln!(out, "{},{},{},{}", r.timestamp, r.omega, r.speed, c),
                None => writeln!(out, "{},{},{},", r.timestamp, r.omega, r.speed),
            }
            .unwrap();
        }
        out
    }

    /// Ground truth in the 12-number row-major 3x4 format.
    pub fn ground_truth_lines(&self) -> String {
        let mut out = String::new();
        for (x, y, theta) in &self.ground_truth {
            let t = planar_to_transform(*x, *y, *theta);
            out.push_str(&transform_line(&t));
            out.push('\n');
        }
        out
    }
}

/// Formats a camera-to-world pose as 12 whitespace-separated numbers
/// (row-major 3x4).
pub fn transform_line(t: &RigidTransform3) -> String {
    let r = t.rotation();
    let tr = t.translation();
    format!(
        "{} {} {} {} {} {} {} {} {} {} {} {}",
        r[(0, 0)],
        r[(0, 1)],
        r[(0, 2)],
        tr[0],
        r[(1, 0)],
        r[(1, 1)],
        r[(1, 2)],
        tr[1],
        r[(2, 0)],
        r[(2, 1)],
        r[(2, 2)],
        tr[2],
    )
}

/// Parsed synthesis request.
#[derive(Debug, Clone, PartialEq)]
pub enum SynthSpec {
    Photometric {
        frames: usize,
        dt: f64,
        /// Per-second twist applied between frames.
        velocity: Vector3<f64>,
        yaw_rate: f64,
        /// Affine brightness applied to every frame after the first.
        affine_a: f64,
        affine_b: f64,
    },
    Square {
        side: f64,
        per_side: usize,
        dt: f64,
        cue_at_start_end: bool,
    },
    OutAndBack {
        length: f64,
        offset: f64,
        step: f64,
        dt: f64,
    },
}

impl SynthSpec {
    /// Parses the flat `key = value` format; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let kv = super::config::parse_key_values(text)?;
        let kind = kv
            .get("kind")
            .ok_or_else(|| PipelineError::Config("synth spec needs a 'kind' key".into()))?
            .clone();
        let get = |key: &str, default: f64| -> Result<f64, PipelineError> {
            match kv.get(key) {
                Some(v) => v.parse::<f64>().map_err(|_| {
                    PipelineError::Config(format!("key '{key}' has non-numeric value '{v}'"))
                }),
                None => Ok(default),
            }
        };
        let known: &[&str] = match kind.as_str() {
            "photometric" => &[
                "kind", "frames", "dt", "vx", "vy", "vz", "yaw_rate", "affine_a", "affine_b",
            ],
            "square" => &["kind", "side", "per_side", "dt", "cue"],
            "outback" => &["kind", "length", "offset", "step", "dt"],
            other => {
                return Err(PipelineError::Config(format!(
                    "unknown synth kind '{other}' (expected photometric, square, or outback)"
                )))
            }
        };
        for key in kv.keys() {
            if !known.contains(&key.as_str()) {
                return Err(PipelineError::Config(format!(
                    "unknown key '{key}' in synth spec for kind '{kind}'"
                )));
            }
        }
        Ok(match kind.as_str() {
            "photometric" => SynthSpec::Photometric {
                frames: get("frames", 3.0)? as usize,
                dt: get("dt", 0.1)?,
                velocity: Vector3::new(get("vx", 0.0)?, get("vy", 0.0)?, get("vz", 0.0)?),
                yaw_rate: get("yaw_rate", 0.0)?,
                affine_a: get("affine_a", 0.0)?,
                affine_b: get("affine_b", 0.0)?,
            },
            "square" => SynthSpec::Square {
                side: get("side", 25.0)?,
                per_side: get("per_side", 25.0)? as usize,
                dt: get("dt", 0.1)?,
                cue_at_start_end: get("cue", 1.0)? != 0.0,
            },
            _ => SynthSpec::OutAndBack {
                length: get("length", 200.0)?,
                offset: get("offset", 3.0)?,
                step: get("step", 1.0)?,
                dt: get("dt", 0.1)?,
            },
        })
    }
}

/// Generates the world described by `spec` into `out_dir`, deterministic in
/// `seed`. Photometric specs write a stereo image sequence (`image_0/`,
/// `image_1/`, `times.txt`); trajectory specs write `trace.csv`. Both write
/// `gt.txt` ground truth.
pub fn synthesize_world(spec: &SynthSpec, seed: u64, out_dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(out_dir)?;
    match spec {
        SynthSpec::Photometric {
            frames,
            dt,
            velocity,
            yaw_rate,
            affine_a,
            affine_b,
        } => {
            let scene = PlaneScene::desk_default(seed);
            let left_dir = out_dir.join("image_0");
            let right_dir = out_dir.join("image_1");
            std::fs::create_dir_all(&left_dir)?;
            std::fs::create_dir_all(&right_dir)?;
            let mut times = String::new();
            let mut gt = String::new();
            let mut pose = RigidTransform3::identity();
            for i in 0..*frames {
                let t = i as f64 * dt;
                let (a, b) = if i == 0 {
                    (0.0, 0.0)
                } else {
                    (*affine_a, *affine_b)
                };
                let frame = render_stereo_frame(&scene, &pose, t, a, b);
                let name = format!("{i:06}.pgm");
                frame.left.save_pgm(&left_dir.join(&name))?;
                frame.right.save_pgm(&right_dir.join(&name))?;
                writeln!(times, "{t}").unwrap();
                gt.push_str(&transform_line(&pose));
                gt.push('\n');
                let step = RigidTransform3::from_yaw(yaw_rate * dt, velocity * *dt);
                pose = pose.compose(&step);
            }
            std::fs::write(out_dir.join("times.txt"), times)?;
            std::fs::write(out_dir.join("gt.txt"), gt)?;
            write_intrinsics(&scene.intrinsics, &out_dir.join("intrinsics.txt"))?;
        }
        SynthSpec::Square {
            side,
            per_side,
            dt,
            cue_at_start_end,
        } => {
            let world = TrajectoryWorld::square(*side, *per_side, *dt, *cue_at_start_end);
            write_trajectory(&world, out_dir)?;
        }
        SynthSpec::OutAndBack {
            length,
            offset,
            step,
            dt,
        } => {
            let world = TrajectoryWorld::out_and_back(*length, *offset, *step, *dt);
            write_trajectory(&world, out_dir)?;
        }
    }
    Ok(())
}

fn write_trajectory(world: &TrajectoryWorld, out_dir: &Path) -> Result<(), PipelineError> {
    std::fs::write(out_dir.join("trace.csv"), world.trace_csv())?;
    std::fs::write(out_dir.join("gt.txt"), world.ground_truth_lines())?;
    let mut times = String::new();
    for r in &world.rows {
        writeln!(times, "{}", r.timestamp).unwrap();
    }
    std::fs::write(out_dir.join("times.txt"), times)?;
    Ok(())
}

fn write_intrinsics(k: &CameraIntrinsics, path: &Path) -> Result<(), PipelineError> {
    let text = format!(
        "fx = {}\nfy = {}\ncx = {}\ncy = {}\nbaseline = {}\nwidth = {}\nheight = {}\n",
        k.fx, k.fy, k.cx, k.cy, k.baseline, k.width, k.height
    );
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attractor::circular_dist;

    #[test]
    fn zero_motion_renders_identical_frames() {
        let scene = PlaneScene::desk_default(1);
        let a = render_stereo_frame(&scene, &RigidTransform3::identity(), 0.0, 0.0, 0.0);
        let b = render_stereo_frame(&scene, &RigidTransform3::identity(), 0.1, 0.0, 0.0);
        assert_eq!(a.left.data(), b.left.data());
        assert_eq!(a.right.data(), b.right.data());
    }

    #[test]
    fn square_trajectory_closes() {
        let w = TrajectoryWorld::square(25.0, 25, 0.1, true);
        let (x, y, theta) = *w.ground_truth.last().unwrap();
        assert!(x.abs() < 1e-9 && y.abs() < 1e-9);
        assert!(circular_dist(theta, TAU, TAU) < 1e-9);
        // Cue fires at the first step and near the end.
        assert_eq!(w.rows[0].cue, Some(0));
        assert!(w.rows[w.rows.len() - 1].cue.is_some());
    }

    #[test]
    fn square_trace_steps_integrate_to_ground_truth() {
        let w = TrajectoryWorld::square(10.0, 10, 0.5, false);
        let mut x = 0.0;
        let mut y = 0.0;
        let mut theta = 0.0f64;
        let mut prev_t = 0.0;
        for (row, gt) in w.rows.iter().zip(&w.ground_truth) {
            let dt = row.timestamp - prev_t;
            prev_t = row.timestamp;
            theta += row.omega * dt;
            x += row.speed * dt * theta.cos();
            y += row.speed * dt * theta.sin();
            assert!((x - gt.0).abs() < 1e-9);
            assert!((y - gt.1).abs() < 1e-9);
            assert!((theta - gt.2).abs() < 1e-9);
        }
    }

    #[test]
    fn planar_transform_round_trips_through_velocity() {
        // Consecutive embedded planar poses reproduce the planar rates
        // through the velocity extraction.
        let a = planar_to_transform(1.0, 2.0, 0.3);
        let b = planar_to_transform(1.5, 2.5, 0.45);
        let rel = crate::geometry::relative_transform(&a, &b);
        let vel = crate::geometry::velocity_from_relative(&rel, 0.1).unwrap();
        assert!((vel.rotational - 1.5).abs() < 1e-9, "{}", vel.rotational);
        let dist = ((1.5f64 - 1.0).powi(2) + (2.5f64 - 2.0).powi(2)).sqrt();
        assert!((vel.translational - dist / 0.1).abs() < 1e-9);
    }

    #[test]
    fn spec_parse_rejects_unknown_keys() {
        assert!(SynthSpec::parse("kind = square\nbogus = 3\n").is_err());
        let ok = SynthSpec::parse("kind = square\nside = 25\nper_side = 25\ndt = 0.1\n").unwrap();
        assert_eq!(
            ok,
            SynthSpec::Square {
                side: 25.0,
                per_side: 25,
                dt: 0.1,
                cue_at_start_end: true
            }
        );
    }

    #[test]
    fn synthesize_photometric_writes_loadable_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::Photometric {
            frames: 2,
            dt: 0.1,
            velocity: Vector3::new(0.0, 0.0, 0.5),
            yaw_rate: 0.0,
            affine_a: 0.0,
            affine_b: 0.0,
        };
        synthesize_world(&spec, 3, dir.path()).unwrap();
        assert!(dir.path().join("image_0/000000.pgm").exists());
        assert!(dir.path().join("image_1/000001.pgm").exists());
        assert!(dir.path().join("times.txt").exists());
        assert!(dir.path().join("gt.txt").exists());
    }
}
